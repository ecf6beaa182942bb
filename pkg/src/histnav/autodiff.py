"""Reverse-mode differentiable tensors over float64 numpy arrays.

The engine provides exactly the operations the navigation model needs:
matrix products, layer normalization, masked softmax, GELU, pooling,
embedding lookups and the loss reductions, plus an AdamW optimizer with
parameter groups and a central-finite-difference oracle used by the
gradient-check suite.

Recording model: ops executed while a Tape is active append one node per
op, in execution order. backward() replays the tape in exact reverse
order, accumulating gradients into every requires_grad leaf reachable
from the loss. Gradients accumulate across backward calls until zeroed.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class FullyMaskedError(ValueError):
    """A softmax row had every entry masked out."""


class GradientUnavailableError(RuntimeError):
    """An optimizer step touched a parameter with no gradient slot."""


class DiffTensor:
    """Shaped float64 array with an optional same-shape gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float64)
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(v) if requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detached(self) -> "DiffTensor":
        return DiffTensor(self.values.copy())

    def __getstate__(self):
        return (self.values, self.grad, self.requires_grad)

    def __setstate__(self, state):
        self.values, self.grad, self.requires_grad = state

    def __repr__(self):
        return f"DiffTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; backward walks it in reverse."""

    __slots__ = ("nodes", "_tracked")

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Tape] = []


class no_grad:
    """Context that suppresses tape recording."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(out: DiffTensor, parents: tuple, backward_fn) -> None:
    tape = _tape()
    if tape is None:
        return
    tracked = tape._tracked
    for p in parents:
        if p.requires_grad or id(p) in tracked:
            tape.nodes.append(_Node(out, parents, backward_fn))
            tracked.add(id(out))
            return


def backward(tape: Tape, loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Visits nodes in exact reverse execution order, so each node's output
    gradient is complete before the node itself propagates to its parents.
    """
    if loss.values.shape != ():
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    flows: dict[int, list] = {id(loss): [loss, np.ones(())]}
    for node in reversed(tape.nodes):
        entry = flows.pop(id(node.out), None)
        if entry is None:
            continue
        parent_grads = node.backward_fn(entry[1])
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            slot = flows.get(id(p))
            if slot is None:
                flows[id(p)] = [p, pg]
            else:
                slot[1] = slot[1] + pg
    for tensor, g in flows.values():
        if tensor.requires_grad:
            tensor.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out = DiffTensor(a.values + b.values)

    def bwd(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    _record(out, (a, b), bwd)
    return out


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out = DiffTensor(a.values - b.values)

    def bwd(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    _record(out, (a, b), bwd)
    return out


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise (broadcasting) product."""
    out = DiffTensor(a.values * b.values)

    def bwd(g):
        return _unbroadcast(g * b.values, a.values.shape), _unbroadcast(g * a.values, b.values.shape)

    _record(out, (a, b), bwd)
    return out


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    out = DiffTensor(a.values * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def gelu(x: DiffTensor) -> DiffTensor:
    """GELU (tanh form)."""
    v = x.values
    c = math.sqrt(2.0 / math.pi)
    v2 = v * v
    t = np.tanh(c * (v + 0.044715 * v2 * v))
    out = DiffTensor(0.5 * v * (1.0 + t))

    def bwd(g):
        du = c * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    _record(out, (x,), bwd)
    return out


def reshape(x: DiffTensor, shape) -> DiffTensor:
    orig = x.values.shape
    out = DiffTensor(x.values.reshape(shape))
    _record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def swapaxes(x: DiffTensor, a: int, b: int) -> DiffTensor:
    out = DiffTensor(np.swapaxes(x.values, a, b))
    _record(out, (x,), lambda g: (np.swapaxes(g, a, b),))
    return out


def concat(parts: list[DiffTensor], axis: int = 0) -> DiffTensor:
    out = DiffTensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.values.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    _record(out, tuple(parts), bwd)
    return out


def stack(parts: list[DiffTensor], axis: int = 0) -> DiffTensor:
    out = DiffTensor(np.stack([p.values for p in parts], axis=axis))

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    _record(out, tuple(parts), bwd)
    return out


def slice_rows(x: DiffTensor, start: int, stop: int) -> DiffTensor:
    out = DiffTensor(x.values[start:stop])

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        return (gx,)

    _record(out, (x,), bwd)
    return out


def gather_rows(x: DiffTensor, idx) -> DiffTensor:
    """Select rows along axis 0; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = DiffTensor(x.values[idx])

    def bwd(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    _record(out, (x,), bwd)
    return out


def take_per_row(x: DiffTensor, idx) -> DiffTensor:
    """From (B, S, d) pick one S-position per batch row -> (B, d)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.values.shape[0])
    out = DiffTensor(x.values[rows, idx])

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[rows, idx] = g
        return (gx,)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatchError(f"matmul inner extents differ: {av.shape} vs {bv.shape}")
    out = DiffTensor(np.matmul(av, bv))

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    _record(out, (a, b), bwd)
    return out


def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """x @ w (+ b), fused so one tape node covers the whole affine map."""
    xv, wv = x.values, w.values
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeMismatchError(f"linear inner extents differ: {xv.shape} vs {wv.shape}")
    y = xv @ wv
    if b is not None:
        y = y + b.values
    out = DiffTensor(y)

    if b is None:

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            return g @ wv.T, x2.T @ g2

        _record(out, (x, w), bwd)
    else:

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            return g @ wv.T, x2.T @ g2, g2.sum(axis=0)

        _record(out, (x, w, b), bwd)
    return out


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-6) -> DiffTensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    v = x.values
    d = v.shape[-1]
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (v - mean) * inv
    out = DiffTensor(y * gain.values + bias.values)

    def bwd(g):
        gy = g * gain.values
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgain = (g * y).sum(axis=axes) if axes else g * y
        dbias = g.sum(axis=axes) if axes else g
        return gx, dgain.reshape(d), dbias.reshape(d)

    _record(out, (x, gain, bias), bwd)
    return out


def softmax(x: DiffTensor, axis: int = -1, mask: np.ndarray | None = None) -> DiffTensor:
    """Softmax over unmasked entries; masked entries are exactly zero.

    mask is a boolean keep-array broadcastable to x; a fully-masked slice
    raises FullyMaskedError.
    """
    v = x.values
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not keep.any(axis=axis).all():
            raise FullyMaskedError("softmax slice with every entry masked")
        shifted = np.where(keep, v, -np.inf)
        shifted = shifted - shifted.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        e = np.where(keep, e, 0.0)
    else:
        e = np.exp(v - v.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    out = DiffTensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    _record(out, (x,), bwd)
    return out


def mean_pool(x: DiffTensor, axis: int = 0) -> DiffTensor:
    v = x.values
    n = v.shape[axis]
    out = DiffTensor(v.mean(axis=axis))

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    _record(out, (x,), bwd)
    return out


def sum_all(x: DiffTensor) -> DiffTensor:
    out = DiffTensor(x.values.sum())
    _record(out, (x,), lambda g: (np.full_like(x.values, float(g)),))
    return out


def embedding_lookup(table: DiffTensor, ids) -> DiffTensor:
    """Select table rows by id; backward scatters into looked-up rows."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.values.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n}): {ids}")
    out = DiffTensor(table.values[ids])

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), bwd)
    return out


def dropout(x: DiffTensor, rate: float, rng) -> DiffTensor:
    """Seeded inverted dropout; rate 0 is an exact identity."""
    if rate <= 0.0:
        return x
    keep = ~rng.bernoulli(rate, x.values.size).reshape(x.values.shape)
    factor = keep / (1.0 - rate)
    out = DiffTensor(x.values * factor)
    _record(out, (x,), lambda g: (g * factor,))
    return out


# ---------------------------------------------------------------------------
# loss reductions


def _log_softmax(v: np.ndarray, keep: np.ndarray | None):
    if keep is not None:
        shifted = np.where(keep, v, -np.inf)
    else:
        shifted = v
    m = shifted.max(axis=-1, keepdims=True)
    z = shifted - m
    e = np.exp(z)
    if keep is not None:
        e = np.where(keep, e, 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return z - np.log(s), e / s


def cross_entropy(logits: DiffTensor, target, mask: np.ndarray | None = None) -> DiffTensor:
    """Negative log-likelihood of target class(es); mean over rows for 2-d logits.

    mask is a boolean keep-array over classes; the target class must be kept.
    """
    v = logits.values
    keep = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if keep is not None and not keep.any(axis=-1).all():
        raise FullyMaskedError("cross_entropy row with every class masked")
    if v.ndim == 1:
        t = int(target)
        if t < 0 or t >= v.shape[0]:
            raise IndexError(f"target {t} outside {v.shape[0]} classes")
        if keep is not None and not keep[t]:
            raise ValueError(f"target class {t} is masked out")
        logp, p = _log_softmax(v, keep)
        out = DiffTensor(-logp[t])

        def bwd(g):
            gx = p.copy()
            gx[t] -= 1.0
            return (gx * float(g),)

        _record(out, (logits,), bwd)
        return out

    targets = np.asarray(target, dtype=np.int64)
    if targets.ndim != 1 or targets.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"need one target per row: logits {v.shape}, targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= v.shape[1]:
        raise IndexError("target outside class range")
    rows = np.arange(v.shape[0])
    if keep is not None and not keep[rows, targets].all():
        raise ValueError("a target class is masked out")
    logp, p = _log_softmax(v, keep)
    out = DiffTensor(-logp[rows, targets].mean())

    def bwd(g):
        gx = p.copy()
        gx[rows, targets] -= 1.0
        return (gx * (float(g) / v.shape[0]),)

    _record(out, (logits,), bwd)
    return out


def soft_cross_entropy(logits: DiffTensor, target_dist: np.ndarray) -> DiffTensor:
    """Cross entropy against a probability-vector target (rows must sum to 1)."""
    v = logits.values
    q = np.asarray(target_dist, dtype=np.float64)
    if q.shape != v.shape:
        raise ShapeMismatchError(f"target distribution shape {q.shape} != logits {v.shape}")
    sums = q.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError(f"target distribution rows must sum to 1, got {sums}")
    logp, p = _log_softmax(v, None)
    if v.ndim == 1:
        out = DiffTensor(-(q * logp).sum())
        _record(out, (logits,), lambda g: ((p - q) * float(g),))
        return out
    n = v.shape[0]
    out = DiffTensor(-(q * logp).sum(axis=-1).mean())
    _record(out, (logits,), lambda g: ((p - q) * (float(g) / n),))
    return out


def entropy(logits: DiffTensor, mask: np.ndarray | None = None) -> DiffTensor:
    """Shannon entropy of softmax(logits) over unmasked entries (1-d logits)."""
    v = logits.values
    keep = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    logp, p = _log_softmax(v, keep)
    terms = np.where(p > 0.0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0)
    h = -terms.sum()
    out = DiffTensor(h)

    def bwd(g):
        safe_logp = np.where(np.isfinite(logp), logp, 0.0)
        return (-p * (safe_logp + h) * float(g),)

    _record(out, (logits,), bwd)
    return out


def mse(pred: DiffTensor, target: DiffTensor) -> DiffTensor:
    """Mean squared difference."""
    d = pred.values - target.values
    n = d.size
    out = DiffTensor((d * d).mean())

    def bwd(g):
        base = d * (2.0 * float(g) / n)
        return base, -base

    _record(out, (pred, target), bwd)
    return out


def sum_squared_error(pred: DiffTensor, target: np.ndarray) -> DiffTensor:
    """Sum of squared differences against a constant target."""
    t = np.asarray(target, dtype=np.float64)
    d = pred.values - t
    out = DiffTensor((d * d).sum())
    _record(out, (pred,), lambda g: (d * (2.0 * float(g)),))
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay and per-group learning-rate multipliers.

    A multiplier of zero freezes the group: values and moments are untouched.
    """

    def __init__(self, groups: dict[str, dict[str, DiffTensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.groups = {name: dict(sorted(params.items())) for name, params in groups.items()}
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.lr_mult = {name: 1.0 for name in self.groups}
        self.step_count = 0
        self.m = {}
        self.v = {}
        for gname, params in self.groups.items():
            for pname, p in params.items():
                key = f"{gname}/{pname}"
                self.m[key] = np.zeros_like(p.values)
                self.v[key] = np.zeros_like(p.values)

    def set_lr_mult(self, group: str, mult: float) -> None:
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}")
        self.lr_mult[group] = float(mult)

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for p in params.values():
                p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for gname, params in self.groups.items():
            mult = self.lr_mult[gname]
            if mult == 0.0:
                continue
            lr = self.lr * mult
            for pname, p in params.items():
                if p.grad is None:
                    raise GradientUnavailableError(f"parameter {gname}/{pname} has no gradient")
                key = f"{gname}/{pname}"
                g = p.grad
                m = self.m[key]
                v = self.v[key]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.values -= lr * (update + self.weight_decay * p.values)

    def state_arrays(self) -> dict:
        """Flat snapshot for checkpointing (keys sorted for determinism)."""
        meta = {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step_count": self.step_count,
            "lr_mult": {k: self.lr_mult[k] for k in sorted(self.lr_mult)},
        }
        arrays = {}
        for key in sorted(self.m):
            arrays[key] = (self.m[key], self.v[key])
        return {"meta": meta, "arrays": arrays}

    def load_state_arrays(self, state: dict) -> None:
        meta = state["meta"]
        self.lr = float(meta["lr"])
        self.betas = tuple(meta["betas"])
        self.eps = float(meta["eps"])
        self.weight_decay = float(meta["weight_decay"])
        self.step_count = int(meta["step_count"])
        for k, v in meta["lr_mult"].items():
            self.lr_mult[k] = float(v)
        for key, (m, v) in state["arrays"].items():
            if key not in self.m:
                raise KeyError(f"optimizer state for unknown parameter {key}")
            if m.shape != self.m[key].shape:
                raise ShapeMismatchError(f"moment shape {m.shape} != parameter {self.m[key].shape}")
            self.m[key] = m.astype(np.float64).copy()
            self.v[key] = v.astype(np.float64).copy()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = 0.0
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for p in tensors:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in tensors:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f, x: DiffTensor, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h per element of x.

    f maps the tensor to a scalar (float or scalar DiffTensor) and must be
    deterministic; evaluations run with recording suppressed.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")

    def evaluate():
        out = f(x)
        return float(out.values) if isinstance(out, DiffTensor) else float(out)

    grad = np.zeros_like(x.values)
    with no_grad():
        for idx in np.ndindex(x.values.shape):
            orig = x.values[idx]
            x.values[idx] = orig + h
            fp = evaluate()
            x.values[idx] = orig - h
            fm = evaluate()
            x.values[idx] = orig
            grad[idx] = (fp - fm) / (2.0 * h)
    return grad
