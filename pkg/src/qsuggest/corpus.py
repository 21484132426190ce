"""Query-log ingestion, session segmentation, vocabulary and training targets.

Also hosts the noise-injection perturbations used by the robustness
harness.  Everything here is pure; randomness always flows through an
explicit seeded generator.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import InputFormatError

PAD_TOKEN = "<pad>"
SEP_TOKEN = "</q>"   # query separator / terminator
OOV_TOKEN = "<oov>"  # generator target for words outside the vocabulary
UNK_TOKEN = "<unk>"  # copier target for words absent from the source

RESERVED_TOKENS = (PAD_TOKEN, SEP_TOKEN, OOV_TOKEN, UNK_TOKEN)
PAD_ID, SEP_ID, OOV_ID, UNK_ID = 0, 1, 2, 3

SESSION_GAP = timedelta(minutes=30)

# Fixed stopword list used when building the noise-term resource.
STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because
been before being below between both but by can cannot could did do does
doing down during each few for from further had has have having he her
here hers herself him himself his how i if in into is it its itself just
me more most my myself no nor not now of off on once only or other our
ours ourselves out over own same she should so some such than that the
their theirs them themselves then there these they this those through to
too under until up very was we were what when where which while who whom
why will with would you your yours yourself yourselves
""".split())


@dataclass
class RawLogRecord:
    user_id: str
    query_text: str
    timestamp: datetime


@dataclass
class Session:
    user_id: str | None
    queries: list[list[str]]
    timestamps: list[datetime] | None = None

    def __len__(self) -> int:
        return len(self.queries)


def normalize_query(raw: str) -> list[str]:
    """Lowercase, drop non-alphanumeric characters, split on whitespace.

    An empty result marks the record as droppable.
    """
    cleaned = "".join(c for c in raw.lower() if c.isalnum() or c.isspace())
    return cleaned.split()


def segment_sessions(records: list[RawLogRecord]) -> list[Session]:
    """Split one user's time-ordered records at idle gaps of >= 30 minutes.

    Queries are normalized here; records whose query normalizes to nothing
    are dropped.  Length-1 sessions are retained (filtered later per use).
    """
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp < prev.timestamp:
            raise ValueError("records must be sorted by timestamp")
    sessions: list[Session] = []
    cur_queries: list[list[str]] = []
    cur_times: list[datetime] = []
    last_time: datetime | None = None
    user = records[0].user_id if records else None
    for rec in records:
        tokens = normalize_query(rec.query_text)
        if not tokens:
            continue
        if last_time is not None and rec.timestamp - last_time >= SESSION_GAP:
            sessions.append(Session(user, cur_queries, cur_times))
            cur_queries, cur_times = [], []
        cur_queries.append(tokens)
        cur_times.append(rec.timestamp)
        last_time = rec.timestamp
    if cur_queries:
        sessions.append(Session(user, cur_queries, cur_times))
    return sessions


def sessions_from_log(records: list[RawLogRecord]) -> list[Session]:
    """Group records by user (order of first appearance), sort each user's
    records by time, and segment."""
    by_user: dict[str, list[RawLogRecord]] = {}
    for rec in records:
        by_user.setdefault(rec.user_id, []).append(rec)
    sessions: list[Session] = []
    for user_records in by_user.values():
        user_records.sort(key=lambda r: r.timestamp)
        sessions.extend(segment_sessions(user_records))
    return sessions


class Vocabulary:
    """Token ids over the most frequent training tokens plus a reserved block."""

    def __init__(self, tokens: list[str]):
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(tokens)
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_for(self, token: str) -> int:
        """Vocabulary id, or the <oov> id for unknown tokens."""
        return self.token_to_id.get(token, OOV_ID)

    def token_for(self, idx: int) -> str:
        return self.id_to_token[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("# reserved ids (fixed, not listed below):\n")
            for i, tok in enumerate(RESERVED_TOKENS):
                f.write(f"#   {i} = {tok}\n")
            f.write("# data line j (0-based) maps to id j + "
                    f"{len(RESERVED_TOKENS)}\n")
            for tok in self.id_to_token[len(RESERVED_TOKENS):]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        try:
            with open(path, encoding="utf-8") as f:
                for line in f:
                    line = line.rstrip("\n")
                    if not line or line.startswith("#"):
                        continue
                    tokens.append(line)
        except OSError as e:
            raise InputFormatError(f"cannot read vocabulary: {e}") from e
        return cls(tokens)


def build_vocabulary(sessions: list[Session], size: int) -> Vocabulary:
    """Most frequent tokens, tie-broken (count desc, token asc)."""
    if size <= len(RESERVED_TOKENS):
        raise ValueError(
            f"vocabulary size must exceed the {len(RESERVED_TOKENS)} reserved ids")
    counts: Counter[str] = Counter()
    for session in sessions:
        for query in session.queries:
            counts.update(query)
    if not counts:
        raise ValueError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: size - len(RESERVED_TOKENS)]]
    return Vocabulary(keep)


@dataclass
class LinearizedContext:
    """Flattened session context.

    Source positions are 1-based so that position 0 can denote the copier's
    <unk> slot; position i corresponds to token_ids[i-1].
    separator_positions holds the 1-based indices of every </q>.
    """
    token_ids: np.ndarray
    separator_positions: list[int]
    surface_tokens: list[str]

    @property
    def length(self) -> int:
        return len(self.surface_tokens)

    @property
    def num_queries(self) -> int:
        return len(self.separator_positions)

    def owner_of_positions(self) -> np.ndarray:
        """0-based owning-query index for each position: the smallest j with
        i <= k_j (the separator belongs to its own query)."""
        owner = np.empty(self.length, dtype=np.intp)
        start = 0
        for j, k in enumerate(self.separator_positions):
            owner[start:k] = j
            start = k
        return owner


def linearize(queries: list[list[str]], vocab: Vocabulary) -> LinearizedContext:
    """Concatenate queries, each followed by </q>; keep surface strings so
    out-of-vocabulary source tokens stay copyable."""
    if not queries:
        raise ValueError("cannot linearize an empty query list")
    ids: list[int] = []
    surfaces: list[str] = []
    separators: list[int] = []
    for query in queries:
        if not query:
            raise ValueError("cannot linearize an empty query")
        for tok in query:
            ids.append(vocab.id_for(tok))
            surfaces.append(tok)
        ids.append(SEP_ID)
        surfaces.append(SEP_TOKEN)
        separators.append(len(ids))
    return LinearizedContext(np.asarray(ids, dtype=np.intp), separators, surfaces)


def truncate_queries(queries: list[list[str]], max_tokens: int) -> list[list[str]]:
    """Trim a context to at most max_tokens linearized tokens by dropping the
    oldest whole queries; a single over-long query keeps its last tokens."""
    def total(qs):
        return sum(len(q) + 1 for q in qs)

    queries = list(queries)
    while len(queries) > 1 and total(queries) > max_tokens:
        queries.pop(0)
    if total(queries) > max_tokens:
        keep = max(1, max_tokens - 1)
        queries[0] = queries[0][-keep:]
    return queries


@dataclass
class TrainingExample:
    context: LinearizedContext
    target_surface: list[str]            # target tokens plus terminating </q>
    generator_targets: list[int]         # vocab ids, <oov> where absent
    copier_targets: list[tuple[int, ...]]  # 1-based source positions; () => <unk>
    switch_targets: list[int]

    @property
    def target_length(self) -> int:
        return len(self.target_surface)


def derive_targets(context: LinearizedContext, target_query: list[str],
                   vocab: Vocabulary) -> TrainingExample:
    """Per-step generator/copier/switch targets for one (context, query) pair.

    The switch follows the four-rule table, which collapses to: copy
    whenever the target word occurs anywhere in the source, else generate.
    """
    if not target_query:
        raise ValueError("target query must be non-empty")
    surface = list(target_query) + [SEP_TOKEN]
    gen_targets: list[int] = []
    copy_targets: list[tuple[int, ...]] = []
    switch_targets: list[int] = []
    positions_by_token: dict[str, list[int]] = {}
    for i, tok in enumerate(context.surface_tokens, start=1):
        positions_by_token.setdefault(tok, []).append(i)
    for tok in surface:
        gen_targets.append(vocab.id_for(tok))
        pos = tuple(positions_by_token.get(tok, ()))
        copy_targets.append(pos)
        switch_targets.append(1 if pos else 0)
    return TrainingExample(context, surface, gen_targets, copy_targets,
                           switch_targets)


def make_training_pairs(sessions: list[Session]) -> list[tuple[list[list[str]], list[str]]]:
    """(context queries, next query) pairs: every non-initial query of every
    session with >= 2 queries becomes a target with its preceding queries as
    context."""
    pairs = []
    for session in sessions:
        for i in range(1, len(session.queries)):
            pairs.append((session.queries[:i], session.queries[i]))
    return pairs


# ---------------------------------------------------------------------------
# noise injection


@dataclass
class NoiseResources:
    """Inputs for the three perturbation modes.

    term_list: (term, frequency) pairs, sampled proportionally to frequency.
    query_list: noise queries, sampled uniformly.
    user_sessions: per-user session pools for donor lookup.
    """
    term_list: list[tuple[str, int]] | None = None
    query_list: list[list[str]] | None = None
    user_sessions: dict[str, list[Session]] | None = None


def build_term_resource(sessions: list[Session], k: int = 200,
                        stopwords: frozenset[str] = STOPWORDS
                        ) -> list[tuple[str, int]]:
    """k most frequent non-stopword terms with their counts."""
    counts: Counter[str] = Counter()
    for session in sessions:
        for query in session.queries:
            counts.update(t for t in query if t not in stopwords)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def build_query_resource(sessions: list[Session], k: int = 100) -> list[list[str]]:
    """k most frequent whole queries."""
    counts: Counter[str] = Counter()
    for session in sessions:
        for query in session.queries:
            counts[" ".join(query)] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [key.split(" ") for key, _ in ranked[:k]]


def build_user_pools(sessions: list[Session]) -> dict[str, list[Session]]:
    pools: dict[str, list[Session]] = {}
    for session in sessions:
        if session.user_id is not None:
            pools.setdefault(session.user_id, []).append(session)
    return pools


def inject_noise(sessions: list[Session], mode: str, seed: int,
                 resources: NoiseResources) -> list[Session]:
    """Perturb each session once according to mode.

    term: one sampled frequent term at a random slot of a random query.
    query: one sampled frequent query at a random position in the session.
    session: a random other same-user session prepended, when one exists.
    Deterministic under a fixed seed.
    """
    rng = np.random.default_rng(seed)
    if mode == "term":
        if not resources.term_list:
            raise ValueError("term mode requires a term resource list")
        terms = [t for t, _ in resources.term_list]
        freqs = np.array([c for _, c in resources.term_list], dtype=np.float64)
        probs = freqs / freqs.sum()
        out = []
        for session in sessions:
            term = terms[int(rng.choice(len(terms), p=probs))]
            qi = int(rng.integers(0, len(session.queries)))
            query = list(session.queries[qi])
            slot = int(rng.integers(0, len(query) + 1))
            query.insert(slot, term)
            new_queries = [list(q) for q in session.queries]
            new_queries[qi] = query
            out.append(Session(session.user_id, new_queries, session.timestamps))
        return out
    if mode == "query":
        if not resources.query_list:
            raise ValueError("query mode requires a query resource list")
        out = []
        for session in sessions:
            noise = list(resources.query_list[int(rng.integers(0, len(resources.query_list)))])
            pos = int(rng.integers(0, len(session.queries) + 1))
            new_queries = [list(q) for q in session.queries]
            new_queries.insert(pos, noise)
            out.append(Session(session.user_id, new_queries, None))
        return out
    if mode == "session":
        if resources.user_sessions is None:
            raise ValueError("session mode requires per-user session pools")
        out = []
        for session in sessions:
            pool = resources.user_sessions.get(session.user_id or "", [])
            donors = [s for s in pool if s is not session]
            if not donors:
                out.append(Session(session.user_id,
                                   [list(q) for q in session.queries],
                                   session.timestamps))
                continue
            donor = donors[int(rng.integers(0, len(donors)))]
            new_queries = [list(q) for q in donor.queries] + \
                          [list(q) for q in session.queries]
            out.append(Session(session.user_id, new_queries, None))
        return out
    raise ValueError(f"unknown noise mode {mode!r}")


# ---------------------------------------------------------------------------
# file interfaces


def read_log(path) -> list[RawLogRecord]:
    """Tab-separated user_id, query, ISO-8601 timestamp; one record per line.
    A single header line is permitted and skipped."""
    records: list[RawLogRecord] = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise InputFormatError(f"cannot read log: {e}") from e
    with f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                if lineno == 1:
                    continue  # header line
                raise InputFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}")
            user, query, stamp = parts
            try:
                ts = datetime.fromisoformat(stamp)
            except ValueError:
                if lineno == 1:
                    continue  # header line
                raise InputFormatError(
                    f"{path}:{lineno}: bad timestamp {stamp!r}") from None
            records.append(RawLogRecord(user, query, ts))
    return records


def write_sessions(sessions: list[Session], path) -> None:
    """One session per line; queries joined by tabs, tokens by spaces."""
    with open(path, "w", encoding="utf-8") as f:
        for session in sessions:
            f.write("\t".join(" ".join(q) for q in session.queries) + "\n")


def read_sessions(path) -> list[Session]:
    sessions: list[Session] = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise InputFormatError(f"cannot read sessions: {e}") from e
    with f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            queries = [q.split(" ") for q in line.split("\t")]
            if any(not q or q == [""] for q in queries):
                raise InputFormatError(f"{path}:{lineno}: empty query field")
            sessions.append(Session(None, queries))
    return sessions


def write_users(sessions: list[Session], path) -> None:
    """Sidecar file aligning a user id with each session line; needed by the
    session-noise donor pools."""
    with open(path, "w", encoding="utf-8") as f:
        for session in sessions:
            f.write((session.user_id or "") + "\n")


def read_users(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f]
    except OSError as e:
        raise InputFormatError(f"cannot read user sidecar: {e}") from e
