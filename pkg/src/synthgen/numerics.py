"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Image-like
kernels accept either a single ``[C, H, W]`` array or a batch ``[N, C, H, W]``;
the batched form is what the training loop uses.
"""
from __future__ import annotations

import math

import numpy as np


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

class Rng:
    """Seedable random stream.

    Backed by numpy's PCG64 bit generator. Child streams are derived through
    ``SeedSequence`` spawn keys, so ``Rng(seed).derive(epoch, i)`` does not depend
    on how many numbers were drawn from the parent.
    """

    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self.gen.uniform(lo, hi, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in [lo, hi)."""
        return self.gen.integers(lo, hi, size)

    def choose_subset(self, items, m: int) -> list:
        items = list(items)
        if m > len(items):
            raise ValueError(f"cannot choose {m} of {len(items)} items")
        if m < 0:
            raise ValueError("subset size must be non-negative")
        idx = self.gen.permutation(len(items))[:m]
        return [items[i] for i in sorted(idx)]

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def rng_uniform(state: Rng) -> float:
    return float(state.uniform())


def rng_normal(state: Rng) -> float:
    return float(state.normal())


def rng_choose_subset(state: Rng, items, m: int) -> list:
    return state.choose_subset(items, m)


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def _check_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels, ignore_index: int | None = None):
    """Mean cross-entropy over non-ignored rows of ``logits [N, K]``.

    Returns ``(loss, grad_logits)`` where the gradient is
    ``(softmax - onehot) / count`` on counted rows and zero elsewhere.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"shape mismatch: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if ignore_index is not None:
        valid = labels != ignore_index
    else:
        valid = np.ones(n, dtype=bool)
    lab = labels[valid].astype(np.int64)
    if lab.size == 0:
        raise ValueError("empty loss: every entry is ignored")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits[valid], axis=1)
    count = lab.size
    rows = np.arange(count)
    loss = float(-logp[rows, lab].sum() / count)
    g = np.exp(logp)
    g[rows, lab] -= 1.0
    grad = np.zeros_like(logits)
    grad[valid] = g / count
    return loss, grad


def seg_cross_entropy(logits, labels, ignore_index: int | None = 255):
    """Pixel-averaged cross-entropy for ``logits [N, K, H, W]`` and ``labels [N, H, W]``.

    All pixels of the batch are pooled into one mean.
    """
    logits = as_tensor(logits)
    n, k, h, w = logits.shape
    flat = logits.transpose(0, 2, 3, 1).reshape(-1, k)
    loss, g = cross_entropy(flat, np.asarray(labels).reshape(-1), ignore_index)
    return loss, g.reshape(n, h, w, k).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _batched(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int):
    """Output size floor((n + 2p - k) / s) + 1; trailing rows that do not fill a stride are dropped."""
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"input {h}x{w} with padding {padding} is smaller than kernel {k}")
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, k, k, Ho, Wo]
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x, w, b, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` with filters ``w [F, C, k, k]`` plus bias ``b [F]``."""
    out, _ = conv2d_forward(x, w, b, stride, padding)
    return out


def conv2d_forward(x, w, b, stride: int = 1, padding: int = 0):
    """Like :func:`conv2d` but also returns the cache needed by the backward pass."""
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    xb, single = _batched(x)
    n, c, h, wd = xb.shape
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"filters must be [F,C,k,k], got {w.shape}")
    f, wc, k, _ = w.shape
    if wc != c:
        raise ValueError(f"channel mismatch: input has {c}, filters expect {wc}")
    if b.shape != (f,):
        raise ValueError(f"bias shape {b.shape} does not match {f} filters")
    ho, wo = _conv_geometry(h, wd, k, stride, padding)
    if k == 1 and stride == 1 and padding == 0:
        cols = xb[:, :, None, None]
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
        cols = _im2col(xp, k, stride, ho, wo)
    # [F, CKK] @ [N, CKK, HoWo] -> [N, F, HoWo]
    colm = cols.reshape(n, c * k * k, ho * wo)
    out = np.matmul(w.reshape(f, -1), colm) + b[None, :, None]
    out = out.reshape(n, f, ho, wo)
    cache = (xb.shape, colm, w, stride, padding, single)
    return (out[0] if single else out), cache


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dw, db)`` for :func:`conv2d_forward`."""
    xshape, colm, w, stride, padding, single = cache
    dout = as_tensor(dout)
    if single:
        dout = dout[None]
    n, c, h, wd = xshape
    f, _, k, _ = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.reshape(n, f, ho * wo)
    db = d2.sum(axis=(0, 2))
    # sum over batch of [F, HoWo] @ [HoWo, CKK]
    dw = np.einsum("nfp,nqp->fq", d2, colm, optimize=True).reshape(w.shape)
    dcol = np.matmul(w.reshape(f, -1).T, d2).reshape(n, c, k, k, ho, wo)
    if k == 1 and stride == 1 and padding == 0:
        dx = dcol[:, :, 0, 0]
    else:
        dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcol[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    if single:
        dx = dx[0]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pointwise / resampling
# ---------------------------------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(dout, x) -> np.ndarray:
    return np.where(np.asarray(x) > 0, dout, 0.0)


def upsample_nearest_2x(x) -> np.ndarray:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("need at least 2 dimensions")
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample_nearest_2x_backward(dout) -> np.ndarray:
    d = as_tensor(dout)
    if d.shape[-1] % 2 or d.shape[-2] % 2:
        raise ValueError("gradient spatial size must be even")
    s = d.shape[:-2] + (d.shape[-2] // 2, 2, d.shape[-1] // 2, 2)
    return d.reshape(s).sum(axis=(-3, -1))


def l2_normalize(v, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    v = as_tensor(v)
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("cannot normalise a zero-norm vector")
    return v / norm


def l2_normalize_backward(dout, v, axis: int = -1) -> np.ndarray:
    v = as_tensor(v)
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    u = v / norm
    return (dout - u * (dout * u).sum(axis=axis, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_gradient(f, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place one coordinate at a time and restored, so ``f``
    may close over the same array.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise TypeError("finite differences need a float64 array")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
