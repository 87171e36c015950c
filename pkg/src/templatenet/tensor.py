"""Dense tensor primitives: valid 2-D convolution, elementwise ops, ReLU, TNT1 I/O.

Tensors are plain C-contiguous numpy arrays. Convolutions accept a single
``(C, H, W)`` input or a batch ``(N, C, H, W)``; the batch form is what the
network uses, the single form is what the module contract is stated in.
"""

from __future__ import annotations

import io
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"float32": np.float32, "float64": np.float64}

TNT_MAGIC = b"TNT1"


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def as_dtype(precision):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")


def conv_output_size(size, k, stride):
    if k > size:
        raise ShapeError(f"kernel size {k} exceeds input extent {size}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    return (size - k) // stride + 1


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"input rank must be 3 (C,H,W) or 4 (N,C,H,W), got shape {x.shape}")


def _check_conv_args(x, kernels, bias=None):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be (C_out, C_in, k, k), got shape {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"kernel height {kh} != kernel width {kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels C_in={x.shape[1]} do not match kernel C_in={c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={c_out}")
    return c_out, c_in, kh


def im2col(x, k, stride):
    """``(C*k*k, N*H'*W')`` patch matrix of a batch ``x`` (rows ordered c, u, v)."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]  # (N, C, H', W', k, k)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def conv2d_forward(x, kernels, bias, stride=1, return_cols=False):
    """Valid (unpadded) cross-correlation.

    ``out[o, i, j] = bias[o] + sum_{c,u,v} x[c, i*s+u, j*s+v] * kernels[o, c, u, v]``

    Args:
        x: ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
        kernels: ``(C_out, C_in, k, k)``.
        bias: ``(C_out,)``.
        stride: positive step between output samples.
        return_cols: also return the im2col matrix so a later
            :func:`conv2d_backward` can reuse it.

    Returns:
        ``(C_out, H', W')`` or ``(N, C_out, H', W')`` with
        ``H' = (H - k) // stride + 1``.
    """
    xb, single = _batched(np.asarray(x))
    c_out, _, k = _check_conv_args(xb, kernels, bias)
    n, _, h, w = xb.shape
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(w, k, stride)
    cols = im2col(xb, k, stride)
    out = kernels.reshape(c_out, -1) @ cols
    out += bias.reshape(-1, 1)
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x, kernels, stride, grad_out, cols=None, need_input_grad=True):
    """Adjoint of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_kernels, grad_bias)``, the exact partials of
    ``sum(grad_out * conv2d_forward(x, kernels, bias, stride))``. Batch inputs
    accumulate kernel and bias gradients over the batch. ``grad_input`` is
    ``None`` when ``need_input_grad`` is false.
    """
    xb, single = _batched(np.asarray(x))
    gb = grad_out[None] if single else grad_out
    c_out, c_in, k = _check_conv_args(xb, kernels)
    n, _, h, w = xb.shape
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(w, k, stride)
    if gb.shape != (n, c_out, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(c_out, ho, wo) if single else (n, c_out, ho, wo)}"
        )
    if cols is None:
        cols = im2col(xb, k, stride)
    g2 = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    grad_k = (g2 @ cols.T).reshape(kernels.shape)
    grad_b = g2.sum(axis=1)
    if not need_input_grad:
        return None, grad_k, grad_b
    gcols = (kernels.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, n, ho, wo)
    grad_x = np.zeros((c_in, n, h, w), dtype=np.result_type(xb, gcols))
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for u in range(k):
        for v in range(k):
            grad_x[:, :, u:u + hspan:stride, v:v + wspan:stride] += gcols[:, u, v]
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3))
    if single:
        grad_x = grad_x[0]
    return grad_x, grad_k, grad_b


def elementwise(a, b, op):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shape {a.shape} != {b.shape}")
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    raise ValueError(f"unknown elementwise op {op!r}")


def relu(a):
    return np.maximum(a, 0)


def relu_grad(preact):
    """1 where ``preact > 0`` and 0 elsewhere, including exactly at 0."""
    preact = np.asarray(preact)
    return (preact > 0).astype(preact.dtype if preact.dtype.kind == "f" else np.float64)


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0 or min(arr.shape) < 1:
        raise ShapeError(f"TNT1 tensors need rank >= 1 and positive extents, got {arr.shape}")
    header = " ".join(str(d) for d in (arr.ndim, *arr.shape))
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return TNT_MAGIC + b"\n" + header.encode("ascii") + b"\n" + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    magic = stream.readline().rstrip(b"\n")
    if magic != TNT_MAGIC:
        raise ValueError(f"bad TNT1 magic {magic!r}")
    fields = stream.readline().decode("ascii").split()
    if not fields:
        raise ValueError("missing TNT1 shape header")
    rank = int(fields[0])
    shape = tuple(int(f) for f in fields[1:])
    if len(shape) != rank:
        raise ValueError(f"TNT1 header declares rank {rank} but lists {len(shape)} extents")
    payload = stream.read()
    count = int(np.prod(shape))
    if len(payload) != 4 * count:
        raise ValueError(f"TNT1 payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return tensor_from_bytes(fh.read())
