"""Dense float32 tensors with tape-based reverse-mode gradients.

Only the operations the pipeline needs are provided. Every op checks shapes
strictly (bias addition is the only broadcast) and rejects non-finite results.
Reductions (pooling, dot products, loss sums) accumulate in float64; convolution
matmuls run in the storage dtype.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
NORM_EPS = 1e-8
_STORAGE = DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=_STORAGE)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        _TAPE.backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{tag}, requires_grad={self.requires_grad})"


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops; replayed backwards once, then cleared."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            self.clear()
            return
        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, root.data.dtype)}
        leaves: dict[int, Tensor] = {}
        if id(root) not in produced:
            leaves[id(root)] = root
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.ascontiguousarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def storage_dtype(dtype):
    """Temporarily store new tensors as ``dtype`` (float64 for tight gradient checks)."""
    global _STORAGE
    prev, _STORAGE = _STORAGE, np.dtype(dtype).type
    try:
        yield
    finally:
        _STORAGE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and log it on the tape if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data, name=op)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.records.append(Record(op, tuple(inputs), out, backward))
    return out


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(_STORAGE)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of padded ``xp[N,C,Hp,Wp]`` as ``[C*kh*kw, N*ho*wo]``."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[K,C,kh,kw]`` plus ``bias[K]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input axis 1 (channels) is {c} but kernel axis 1 is {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias axis 0 must equal kernel axis 0 ({k}), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height (axis 2) {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width (axis 3) {kw} exceeds padded input width {wp}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(k, -1)
    out = wmat @ cols
    out += bias.data[:, None]
    out = out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        gb = _f32(gt.sum(axis=1, dtype=np.float64))
        gw = (gt @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c, hp, wp), gcols.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gw, gb

    return record("conv2d", out, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# pooling, activations, elementwise


def global_average_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_average_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = _f32(x.data.mean(axis=(2, 3), dtype=np.float64))

    def backward(g):
        return (_f32(np.broadcast_to((g / (h * w))[:, :, None, None], x.shape)),)

    return record("global_average_pool", out, (x,), backward)


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        out = np.where(mask, x.data, 0).astype(x.data.dtype)
        return record("relu", out, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid64(x.data)
        return record("sigmoid", _f32(s), (x,), lambda g: (_f32(g * s * (1.0 - s)),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale_columns(x: Tensor, gate: Tensor) -> Tensor:
    """``x[N,C]`` times a gate of shape [1] (shared) or [C] (per column)."""
    if x.data.ndim != 2:
        raise ShapeError(f"scale_columns expects [N,C], got {x.shape}")
    if gate.shape not in ((1,), (x.shape[1],)):
        raise ShapeError(f"scale_columns: gate must be [1] or [{x.shape[1]}], got {gate.shape}")
    out = x.data * gate.data

    def backward(g):
        gg = (g.astype(np.float64) * x.data).sum(axis=0)
        if gate.shape == (1,):
            gg = gg.sum(keepdims=True)
        return g * gate.data, _f32(gg)

    return record("scale_columns", out, (x, gate), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[N,C,H,W]``."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return record("upsample2x", out, (x,),
                  lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# dense layers and reshaping


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x[N,D] @ weight[D,E] + bias[E]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input axis 1 is {x.shape[1]} but weight axis 0 is {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias must be [{weight.shape[1]}], got {bias.shape}")
    x64, w64 = x.data.astype(np.float64), weight.data.astype(np.float64)
    out = _f32(x64 @ w64 + bias.data)

    def backward(g):
        g64 = g.astype(np.float64)
        return _f32(g64 @ w64.T), _f32(x64.T @ g64), _f32(g64.sum(axis=0))

    return record("linear", out, (x, weight, bias), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-item normalization of ``x[N,C,H,W]`` over channel groups, with per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels, {groups} groups, gamma {gamma.shape}, beta {beta.shape}")
    xg = x.data.astype(np.float64).reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    g4 = gamma.data.astype(np.float64)[None, :, None, None]
    out = _f32(xhat * g4 + beta.data[None, :, None, None])

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = (g64 * g4).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return (_f32(gx.reshape(n, c, h, w)), _f32((g64 * xhat).sum(axis=(0, 2, 3))),
                _f32(g64.sum(axis=(0, 2, 3))))

    return record("group_norm", out, (x, gamma, beta), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each column of ``x[N,D]`` over the batch, then scale and shift."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: need x [N,D] with gamma/beta [D], got {x.shape}, {gamma.shape}, {beta.shape}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=0)
    inv = 1.0 / np.sqrt(x64.var(axis=0) + eps)
    xhat = (x64 - mu) * inv
    out = _f32(xhat * gamma.data + beta.data)

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return _f32(gx), _f32((g64 * xhat).sum(axis=0)), _f32(g64.sum(axis=0))

    return record("batch_norm", out, (x, gamma, beta), backward)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; all other axes must agree."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], 1):
        other = [d for d in range(len(ref)) if d != axis]
        if len(p.shape) != len(ref) or any(p.shape[d] != ref[d] for d in other):
            raise ShapeError(f"concat: part {i} has shape {p.shape}, incompatible with {ref} off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", out, tuple(parts), lambda g: np.split(g, cuts, axis=axis))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros(x.shape, x.data.dtype)
        gx[idx] = g
        return (gx,)

    return record("slice", x.data[idx], (x,), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        g64 = g.astype(np.float64)
        return (_f32(s * (g64 - (g64 * s).sum(axis=axis, keepdims=True))),)

    return record("softmax", _f32(s), (x,), backward)


def sum(x: Tensor, weights: np.ndarray | None = None) -> Tensor:  # noqa: A001
    """Scalar sum of ``x`` (optionally weighted elementwise by a constant array)."""
    if weights is None:
        w = np.ones(x.shape)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise ShapeError(f"sum: weights {w.shape} do not match tensor {x.shape}")
    out = (x.data.astype(np.float64) * w).sum()
    return record("sum", np.array(out), (x,), lambda g: (_f32(g * w),))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """``dot(a,b) / (max(|a|,eps) * max(|b|,eps))`` for 1-d tensors."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity expects equal 1-d shapes, got {a.shape} and {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    na, nb = np.sqrt(a64 @ a64), np.sqrt(b64 @ b64)
    da, db = max(na, eps), max(nb, eps)
    cos = (a64 @ b64) / (da * db)

    def backward(g):
        ga = b64 / (da * db) - (cos * a64 / (da * da) if na > eps else 0.0)
        gb = a64 / (da * db) - (cos * b64 / (db * db) if nb > eps else 0.0)
        return _f32(g * ga), _f32(g * gb)

    return record("cosine_similarity", np.array(cos), (a, b), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N,K]`` against integer ``labels[N]``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels must be [{n}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (_f32(g * p / n),)

    return record("cross_entropy", np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


def numeric_gradient(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. every entry of ``params``, in float64."""
    if not 0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    result = []
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            num = np.zeros(flat.size, np.float64)
            for i in range(flat.size):
                orig = flat[i]
                cast = p.data.dtype.type
                hi, lo = cast(orig + h), cast(orig - h)
                flat[i] = hi
                fp = _scalar_value(f())
                flat[i] = lo
                fm = _scalar_value(f())
                flat[i] = orig
                num[i] = (fp - fm) / (np.float64(hi) - np.float64(lo))
            result.append(num.reshape(p.shape))
    return result


def analytic_gradient(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    _TAPE.clear()
    zero_grad(params)
    out = f()
    _scalar_value(out)
    out.backward()
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    zero_grad(params)
    return grads


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max over entries of ``|analytic - numeric| / max(1, |numeric|)``."""
    analytic = analytic_gradient(f, params)
    numeric = numeric_gradient(f, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float((np.abs(a - n) / np.maximum(1.0, np.abs(n))).max()))
    return worst


def _scalar_value(t: Tensor) -> float:
    if t.size != 1:
        raise ShapeError(f"expected a scalar-valued function, got shape {t.shape}")
    v = float(t.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("function value is not finite")
    return v
