"""Tiny encoder-decoder segmentation network with a patch projection head.

Layout (``K`` classes, ``D``-dim embeddings)::

    conv1 3x3, 3->16      ReLU
    conv2 3x3/2, 16->32   ReLU
    conv3 3x3, 32->32     ReLU    <- encoder output
    nearest upsample x2
    conv_out 1x1, 32->K           <- segmentation logits
    head: global average pool of the encoder output, linear 32->D, L2 norm

Parameters live in an ordered ``dict`` of float64 arrays keyed by name.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .numerics import (
    Rng,
    conv2d_backward,
    conv2d_forward,
    l2_normalize,
    l2_normalize_backward,
    relu,
    relu_backward,
    upsample_nearest_2x,
    upsample_nearest_2x_backward,
)

Params = dict  # name -> np.ndarray

ENC_CH = 32


def param_shapes(k: int, d: int) -> dict[str, tuple[int, ...]]:
    return {
        "conv1.w": (16, 3, 3, 3),
        "conv1.b": (16,),
        "conv2.w": (32, 16, 3, 3),
        "conv2.b": (32,),
        "conv3.w": (32, 32, 3, 3),
        "conv3.b": (32,),
        "out.w": (k, 32, 1, 1),
        "out.b": (k,),
        "head.w": (d, ENC_CH),
        "head.b": (d,),
    }


def init_params(rng: Rng, k: int, d: int) -> Params:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    if k < 1 or d < 2:
        raise ValueError("need k >= 1 and d >= 2")
    params = {}
    for name, shape in param_shapes(k, d).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(shape) * np.sqrt(2.0 / fan_in)
    return params


def zero_params(k: int, d: int) -> Params:
    return {name: np.zeros(shape) for name, shape in param_shapes(k, d).items()}


def clone_params(params: Params) -> Params:
    return {name: v.copy() for name, v in params.items()}


def num_classes(params: Params) -> int:
    return params["out.b"].shape[0]


def embed_dim(params: Params) -> int:
    return params["head.b"].shape[0]


def count_params(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def zeros_like(params: Params) -> Params:
    return {name: np.zeros_like(v) for name, v in params.items()}


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _encode(params: Params, x: np.ndarray):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"spatial size must be even, got {x.shape[-2:]}")
    if x.shape[-3] != 3:
        raise ValueError(f"expected 3 input channels, got {x.shape[-3]}")
    z1, c1 = conv2d_forward(x, params["conv1.w"], params["conv1.b"], 1, 1)
    a1 = relu(z1)
    z2, c2 = conv2d_forward(a1, params["conv2.w"], params["conv2.b"], 2, 1)
    a2 = relu(z2)
    z3, c3 = conv2d_forward(a2, params["conv3.w"], params["conv3.b"], 1, 1)
    a3 = relu(z3)
    return a3, (c1, z1, c2, z2, c3, z3)


def _encode_backward(da3: np.ndarray, cache, grads: Params) -> np.ndarray:
    c1, z1, c2, z2, c3, z3 = cache
    dz3 = relu_backward(da3, z3)
    da2, grads["conv3.w"], grads["conv3.b"] = conv2d_backward(dz3, c3)
    dz2 = relu_backward(da2, z2)
    da1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(dz2, c2)
    dz1 = relu_backward(da1, z1)
    dx, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(dz1, c1)
    return dx


# ---------------------------------------------------------------------------
# segmentation path
# ---------------------------------------------------------------------------

def forward(params: Params, x):
    """Logits ``[K, H, W]`` (or ``[N, K, H, W]``) and the backward cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise ValueError(f"expected [3,H,W] or [N,3,H,W], got {x.shape}")
    a3, enc_cache = _encode(params, x)
    up = upsample_nearest_2x(a3)
    logits, c_out = conv2d_forward(up, params["out.w"], params["out.b"], 1, 0)
    return logits, (enc_cache, c_out)


def predict(params: Params, x) -> np.ndarray:
    logits, _ = forward(params, x)
    return np.argmax(logits, axis=-3)


def backward(params: Params, cache, dlogits) -> Params:
    """Parameter gradients given d(loss)/d(logits). Head gradients are zero."""
    enc_cache, c_out = cache
    grads = zeros_like(params)
    dup, grads["out.w"], grads["out.b"] = conv2d_backward(dlogits, c_out)
    _encode_backward(upsample_nearest_2x_backward(dup), enc_cache, grads)
    return grads


def input_gradient(params: Params, cache, dlogits) -> np.ndarray:
    enc_cache, c_out = cache
    dup, _, _ = conv2d_backward(dlogits, c_out)
    return _encode_backward(upsample_nearest_2x_backward(dup), enc_cache, zeros_like(params))


# ---------------------------------------------------------------------------
# embedding path
# ---------------------------------------------------------------------------

def encode_project_forward(params: Params, patches):
    """Unit-norm embeddings ``[P, D]`` for patches ``[P, 3, p, p]``."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 3
    if single:
        patches = patches[None]
    a3, enc_cache = _encode(params, patches)
    pooled = a3.mean(axis=(2, 3))  # [P, 32]
    raw = pooled @ params["head.w"].T + params["head.b"]
    emb = l2_normalize(raw, axis=1)
    cache = (enc_cache, a3.shape, pooled, raw, single)
    return (emb[0] if single else emb), cache


def encode_project(params: Params, patch) -> np.ndarray:
    return encode_project_forward(params, patch)[0]


def encode_project_backward(params: Params, cache, demb, grads: Params | None = None) -> Params:
    """Accumulate d(loss)/d(params) from d(loss)/d(embedding) into ``grads``."""
    enc_cache, a3_shape, pooled, raw, single = cache
    demb = np.asarray(demb, dtype=np.float64)
    if single:
        demb = demb[None]
    if grads is None:
        grads = zeros_like(params)
    draw = l2_normalize_backward(demb, raw, axis=1)
    grads["head.w"] = grads["head.w"] + draw.T @ pooled
    grads["head.b"] = grads["head.b"] + draw.sum(axis=0)
    dpooled = draw @ params["head.w"]
    n, c, h, w = a3_shape
    da3 = np.broadcast_to((dpooled / (h * w))[:, :, None, None], a3_shape)
    enc = {}
    _encode_backward(np.ascontiguousarray(da3), enc_cache, enc)
    for name, g in enc.items():
        grads[name] = grads[name] + g
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_FORMAT = "synthgen-checkpoint-v1"


def save_checkpoint(path, params: Params, epoch: int = 0, extra: dict | None = None) -> Path:
    """First line: JSON header. Then each tensor as little-endian float64, in header order."""
    header = {
        "format": CKPT_FORMAT,
        "K": num_classes(params),
        "D": embed_dim(params),
        "epoch": int(epoch),
        "shapes": [[name, list(v.shape)] for name, v in params.items()],
    }
    if extra:
        header["extra"] = extra
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(params, header)``."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(data[:nl])
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    params, off = {}, nl + 1
    for name, shape in header["shapes"]:
        n = int(np.prod(shape))
        if off + 8 * n > len(data):
            raise ValueError(f"{path}: truncated payload at tensor {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return params, header


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def global_norm(params: Params) -> float:
    return float(np.sqrt(sum(float((v * v).sum()) for v in params.values())))

