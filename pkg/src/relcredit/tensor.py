"""Minimal reverse-mode autodiff over dense numpy arrays.

Operations record themselves on the active :class:`Tape` (if any).  Outside a
tape every op is a plain numpy computation, which is what inference uses.

Gradient accumulation contract: ``Tape.backward`` may be called once per tape;
a second call raises ``RuntimeError``.  Parameter ``.grad`` slots accumulate
across tapes until :func:`zero_grad` is called, so two tapes over the same
computation produce exactly doubled gradients.
"""
from __future__ import annotations

import json
import os
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = -1

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.data.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.data.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


class Tape:
    """Records ops in execution order; backward walks the record in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        out.node_id = len(self.records)
        out.requires_grad = True
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise RuntimeError("tape already consumed; build a new tape per backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = rule(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(gi, t.data.shape)
                if t.node_id >= 0 and _is_recorded(self, t):
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    # leaf parameter: accumulate into its slot
                    gi = gi.astype(t.data.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.records.clear()


def _is_recorded(tape: Tape, t: Tensor) -> bool:
    return t.node_id < len(tape.records) and tape.records[t.node_id][0] is t


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    d = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * d, (a,), lambda g: (g * d,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part)
    d = np.where(x > 0, 1.0, neg_part + alpha).astype(x.dtype)
    return _make(out, (a,), lambda g: (g * d,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[x.shape for x in xs]}")
    widths = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=1), tuple(xs), back)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries (f64 accumulation)."""
    s = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _make(s, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    s = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    return _make(s, (a,), lambda g: (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def logsumexp_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return _make(out, (a,), lambda g: (g[:, None] * soft,))


def l2_normalize_rows(a: Tensor, eps: float = 0.0) -> Tensor:
    x = a.data
    norm = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True)).astype(x.dtype)
    if np.any(norm <= eps):
        raise ValueError("cannot normalize a zero-norm row")
    y = x / norm

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make(y, (a,), back)


# ---------------------------------------------------------------- row / segment ops

def row_select(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("row index out of range")

    def back(g):
        return (_segment_sum_np(g, idx, n),)

    return _make(a.data[idx], (a,), back)


def _segment_matrix(seg: np.ndarray, n: int, weights=None, dtype=np.float64) -> sp.csr_matrix:
    m = seg.size
    w = np.ones(m, dtype=dtype) if weights is None else weights.astype(dtype)
    return sp.csr_matrix((w, (seg, np.arange(m))), shape=(n, m))


def _segment_sum_np(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    if seg.size == 0:
        return np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    M = _segment_matrix(seg, n, dtype=x.dtype)
    flat = x.reshape(x.shape[0], -1)
    return np.asarray(M @ flat).reshape((n,) + x.shape[1:])


def _check_seg(seg: np.ndarray, n: int, rows: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (rows,):
        raise ValueError(f"segment ids shape {seg.shape} does not match {rows} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= n):
        raise IndexError("segment id out of range")
    return seg


def segment_sum(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    seg = _check_seg(seg, n, a.shape[0])
    return _make(_segment_sum_np(a.data, seg, n), (a,), lambda g: (g[seg],))


def scatter_add(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Adds row i of ``a`` into output row ``idx[i]`` (alias of segment_sum)."""
    return segment_sum(a, idx, n)


def segment_mean(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Mean of rows per segment; empty segments yield zero rows."""
    seg = _check_seg(seg, n, a.shape[0])
    counts = np.bincount(seg, minlength=n).astype(a.data.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(a.data.dtype)
    shape = (n,) + (1,) * (a.data.ndim - 1)
    out = _segment_sum_np(a.data, seg, n) * inv.reshape(shape)

    def back(g):
        return ((g * inv.reshape(shape))[seg],)

    return _make(out, (a,), back)


def segment_softmax(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column."""
    seg = _check_seg(seg, n, a.shape[0])
    x = a.data
    if x.shape[0] == 0:
        return _make(x.copy(), (a,), lambda g: (g,))
    mx = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    denom = _segment_sum_np(e, seg, n)
    y = e / denom[seg]

    def back(g):
        dot = _segment_sum_np(g * y, seg, n)
        return (y * (g - dot[seg]),)

    return _make(y, (a,), back)


# ---------------------------------------------------------------- normalization / regularization

class BatchNormState:
    """Running statistics for one batch-norm site (momentum 0.1)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    X = x.data
    if training and X.shape[0] > 1:
        mu = X.mean(axis=0, dtype=np.float64)
        var = X.var(axis=0, dtype=np.float64)
        m = state.momentum
        n = X.shape[0]
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * n / (n - 1)).astype(state.running_var.dtype)
        mu = mu.astype(X.dtype)
        inv = (1.0 / np.sqrt(var + state.eps)).astype(X.dtype)
        xhat = (X - mu) * inv
        out = xhat * gamma.data + beta.data

        def back(g):
            gx = g * gamma.data
            dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _make(out, (x, gamma, beta), back)
    inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(X.dtype)
    xhat = (X - state.running_mean.astype(X.dtype)) * inv
    out = xhat * gamma.data + beta.data
    return _make(out, (x, gamma, beta),
                 lambda g: (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)))


def dropout(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with an explicit keep-mask, so steps are replayable."""
    if rate <= 0:
        return x
    m = mask.astype(x.data.dtype) / (1.0 - rate)
    return _make(x.data * m, (x,), lambda g: (g * m,))


def weighted_bce_with_logits(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean over rows of w_i * BCE(sigmoid(logit_i), y_i), w_i = pos_weight for positives."""
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=z.dtype).reshape(-1)
    if z.shape != y.shape:
        raise ValueError("logits and labels differ in length")
    w = np.where(y > 0.5, pos_weight, 1.0).astype(z.dtype)
    # log(1+e^-|z|) + max(z,0) - y z
    per = np.logaddexp(0, z) - y * z
    n = z.size
    loss = np.asarray((w * per).sum(dtype=np.float64) / n, dtype=z.dtype)
    p = _sigmoid(z)
    shape = logits.shape
    return _make(loss, (logits,), lambda g: ((g * w * (p - y) / n).reshape(shape),))


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               tol: float | None = None) -> dict:
    """Compare tape gradients with central differences for every parameter entry.

    The per-parameter error is max_i |analytic_i - numeric_i| divided by the
    largest absolute gradient entry of that parameter (analytic or numeric), so
    near-zero entries are judged against the parameter's gradient scale.
    Functions with ReLU-style kinks must keep pre-activations away from zero.
    """
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    report = {}
    for i, p in enumerate(params):
        analytic = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
        scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        err = float(np.abs(analytic - numeric).max(initial=0.0) / scale_)
        report[p.name or f"param{i}"] = err
    zero_grad(params)
    result = {"errors": report, "max_error": max(report.values(), default=0.0)}
    if tol is not None:
        result["passed"] = result["max_error"] < tol
    return result


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, named: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Writes ``params.bin`` (little-endian f32, concatenated) and ``manifest.json``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "dtype": "f32-le", "params": entries}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    raw = np.fromfile(os.path.join(path, "params.bin"), dtype="<f4")
    out = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"] // 4
        out[e["name"]] = raw[start:start + n].reshape(e["shape"]).copy()
    return out, manifest.get("extra", {})
