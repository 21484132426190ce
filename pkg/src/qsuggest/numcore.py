"""Numeric substrate: parameters, layers, Adam, gradient checking, checkpoints.

Parameters live in a ParameterStore, each tagged with the component it
belongs to so the staged training loop can freeze whole components.  Layer
functions operate on autodiff Vars; plain-ndarray variants of softmax and
the logistic are exported for callers that do not need gradients.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import CheckpointError, NumericError

COMPONENT_TAGS = frozenset({
    "encoder", "query_encoder", "attention", "decoder",
    "generator", "copier", "switch", "embedding",
})

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = b"QSGC"


# ---------------------------------------------------------------------------
# plain numeric ops


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-d logit vector."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.isfinite(x).all():
        raise NumericError("softmax over non-finite logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def logistic(x):
    """Standard logistic 1/(1+exp(-x)), overflow-safe for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# parameters


class Parameter:
    __slots__ = ("value", "grad", "tag")

    def __init__(self, value: np.ndarray, tag: str):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.tag = tag


class ParameterStore:
    """Named, component-tagged tensors with parallel gradient buffers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.grads_populated = False

    def add(self, name: str, value: np.ndarray, tag: str) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if tag not in COMPONENT_TAGS:
            raise ValueError(f"unknown component tag {tag!r}")
        self._params[name] = Parameter(value, tag)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tag_of(self, name: str) -> str:
        return self._params[name].tag

    def make_leaves(self) -> dict[str, Var]:
        """Fresh leaf Vars bound to the current parameter arrays."""
        return {name: ad.leaf(p.value) for name, p in self._params.items()}

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)
        self.grads_populated = False

    def accumulate(self, leaves: dict[str, Var]) -> None:
        """Add the gradients collected on leaf Vars into the store buffers.

        Iteration follows store insertion order, so batch reduction is an
        ordered (reproducible) summation.
        """
        any_grad = False
        for name, p in self._params.items():
            leaf = leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                p.grad += leaf.grad
                any_grad = True
        if any_grad:
            self.grads_populated = True

    def gradient_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            total += float(np.dot(p.grad.ravel(), p.grad.ravel()))
        return float(np.sqrt(total))

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so the global norm is at most max_norm."""
        norm = self.gradient_norm()
        if norm > max_norm > 0:
            factor = max_norm / norm
            for p in self._params.values():
                p.grad *= factor
            return factor
        return 1.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform init in +-sqrt(6/(fan_in+fan_out))."""
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        fan_in = shape[0]
        fan_out = shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layers


def add_gru_cell(store: ParameterStore, prefix: str, input_dim: int,
                 hidden_dim: int, tag: str, rng: np.random.Generator) -> None:
    for gate in ("z", "r", "n"):
        store.add(f"{prefix}.W{gate}", glorot(rng, (hidden_dim, input_dim)), tag)
        store.add(f"{prefix}.U{gate}", glorot(rng, (hidden_dim, hidden_dim)), tag)
        store.add(f"{prefix}.b{gate}", np.zeros(hidden_dim), tag)


def gru_cell_leaves(leaves: dict[str, Var], prefix: str) -> dict[str, Var]:
    return {name: leaves[f"{prefix}.{name}"] for name in ad.GRU_PARAM_NAMES}


def gru_step(x: Var, h: Var, cell: dict[str, Var]) -> Var:
    """One GRU update; see autodiff.gru_step for the equations."""
    return ad.gru_step(x, h, cell)


def add_mlp_scorer(store: ParameterStore, prefix: str,
                   block_dims: dict[str, int], hidden_dim: int, tag: str,
                   rng: np.random.Generator) -> None:
    """Parameters for a concat -> tanh hidden -> scalar scorer.

    One weight block per named input so callers can project static inputs
    once and reuse them across decode steps.
    """
    for block, dim in block_dims.items():
        store.add(f"{prefix}.W_{block}", glorot(rng, (hidden_dim, dim)), tag)
    store.add(f"{prefix}.b1", np.zeros(hidden_dim), tag)
    store.add(f"{prefix}.w2", glorot(rng, (hidden_dim,)), tag)
    store.add(f"{prefix}.b2", np.zeros(()), tag)


def eta(inputs: dict[str, Var], leaves: dict[str, Var], prefix: str) -> Var:
    """Scalar logit from named input vectors: w2 . tanh(sum_k W_k x_k + b1) + b2."""
    acc = leaves[f"{prefix}.b1"]
    for block, x in inputs.items():
        acc = ad.add(ad.linear(x, leaves[f"{prefix}.W_{block}"]), acc)
    hidden = ad.tanh(acc)
    return ad.add(ad.matmul(hidden, leaves[f"{prefix}.w2"]), leaves[f"{prefix}.b2"])


def eta_rows(fixed: dict[str, Var], rows_proj: Var, leaves: dict[str, Var],
             prefix: str) -> Var:
    """Vector of logits, one per row of a pre-projected (n, hidden) matrix.

    rows_proj must already be rows @ W_<rows-block>.T; the fixed inputs are
    projected here and broadcast over rows.
    """
    acc = leaves[f"{prefix}.b1"]
    for block, x in fixed.items():
        acc = ad.add(ad.linear(x, leaves[f"{prefix}.W_{block}"]), acc)
    hidden = ad.tanh(ad.add(rows_proj, acc))
    return ad.add(ad.matmul(hidden, leaves[f"{prefix}.w2"]), leaves[f"{prefix}.b2"])


def affine(x: Var, leaves: dict[str, Var], prefix: str) -> Var:
    return ad.linear(x, leaves[f"{prefix}.W"], leaves[f"{prefix}.b"])


def add_affine(store: ParameterStore, prefix: str, in_dim: int, out_dim: int,
               tag: str, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", glorot(rng, (out_dim, in_dim)), tag)
    store.add(f"{prefix}.b", np.zeros(out_dim), tag)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected Adam moments for one update schedule."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_update(store: ParameterStore, opt: AdamState,
                frozen_tags: Iterable[str] = ()) -> None:
    """Apply one Adam step to every parameter whose tag is not frozen.

    Frozen parameters are left bitwise untouched, moments included.
    """
    if not store.grads_populated:
        raise ValueError("gradients not populated; run a backward pass first")
    frozen = frozenset(frozen_tags)
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, p in store.items():
        if p.tag in frozen:
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.value)
        v = opt.v.get(name)
        if v is None:
            v = opt.v[name] = np.zeros_like(p.value)
        g = p.grad
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        p.value -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(fn: Callable[[dict[str, Var]], Var], store: ParameterStore,
                   step: float = 1e-5, coords_per_param: int = 6,
                   rng: np.random.Generator | None = None,
                   param_names: Iterable[str] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    fn builds a scalar loss from a dict of parameter leaves and must be
    deterministic.  Coordinates are sampled per parameter (all of them when
    the tensor is small enough).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    names = list(param_names) if param_names is not None else store.names()

    leaves = store.make_leaves()
    loss = fn(leaves)
    ad.backward(loss)
    analytic = {name: leaves[name].grad for name in names}

    worst = 0.0
    for name in names:
        p = store[name]
        flat = p.value.reshape(-1)
        size = flat.size
        if size == 0:
            continue
        if size <= coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_param, replace=False)
        a_flat = (analytic[name] if analytic[name] is not None
                  else np.zeros_like(p.value)).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn(store.make_leaves()).value)
            flat[i] = orig - step
            f_minus = float(fn(store.make_leaves()).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode("utf-8")


def save_checkpoint(store: ParameterStore, path) -> None:
    """Binary layout: magic, version, manifest (name/tag/dtype/shape per
    parameter), then raw little-endian row-major value blocks in manifest
    order."""
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<i", CHECKPOINT_VERSION))
        f.write(struct.pack("<i", len(store.names())))
        for name, p in store.items():
            _write_str(f, name)
            _write_str(f, p.tag)
            _write_str(f, "<f8")
            f.write(struct.pack("<B", p.value.ndim))
            for extent in p.value.shape:
                f.write(struct.pack("<i", extent))
        for _, p in store.items():
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterStore:
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint: {e}") from e
    with f:
        magic = f.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file")
        (version,) = struct.unpack("<i", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        (count,) = struct.unpack("<i", f.read(4))
        manifest = []
        for _ in range(count):
            name = _read_str(f)
            tag = _read_str(f)
            dtype = _read_str(f)
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<i", f.read(4))[0] for _ in range(ndim))
            manifest.append((name, tag, dtype, shape))
        store = ParameterStore()
        for name, tag, dtype, shape in manifest:
            n_items = int(np.prod(shape)) if shape else 1
            raw = f.read(n_items * 8)
            if len(raw) != n_items * 8:
                raise CheckpointError("truncated checkpoint data block")
            value = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
            store.add(name, value, tag)
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint data")
    return store
