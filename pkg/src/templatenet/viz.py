"""PGM/PPM emitters for first-layer filters and per-template feature-mask responses."""

from __future__ import annotations

import math

import numpy as np

from . import network
from .orthopatch import OrthoPatch

SEPARATOR = 255


def write_pnm(path, img):
    """Binary PGM for ``(H, W)`` uint8, PPM for ``(H, W, 3)`` uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM header {magic!r} maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    payload = data[pos:]
    if len(payload) != w * h * channels:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {w * h * channels}")
    img = np.frombuffer(payload, dtype=np.uint8)
    return img.reshape(h, w) if channels == 1 else img.reshape(h, w, 3)


def normalize_tile(tile):
    """Min-max scale to ``[0, 1]``; a constant tile maps to 0.5."""
    tile = np.asarray(tile, dtype=np.float64)
    lo, hi = tile.min(), tile.max()
    if hi == lo:
        return np.full(tile.shape, 0.5)
    return (tile - lo) / (hi - lo)


def quantize(values):
    return np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def tile_grid(tiles, cols=None):
    """Lay equal-size uint8 tiles row-major into a grid with 1-px separators."""
    n = len(tiles)
    th, tw = tiles[0].shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.full((rows * th + rows + 1, cols * tw + cols + 1), SEPARATOR, dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        out[1 + r * (th + 1):1 + r * (th + 1) + th, 1 + c * (tw + 1):1 + c * (tw + 1) + tw] = t
    return out


def filter_tiles(params, layer=1, per_channel=False):
    """Quantized tiles of conv ``layer`` (1-based): one per kernel, or one per (kernel, input channel)."""
    n_conv = len(params.config.convs)
    if not 1 <= layer <= n_conv:
        raise ValueError(f"layer {layer} out of range 1..{n_conv}")
    w = np.asarray(params.trainable[f"conv{layer}.W"], dtype=np.float64)
    kernels = w.reshape(-1, *w.shape[2:]) if per_channel else w.mean(axis=1)
    return [quantize(normalize_tile(k)) for k in kernels]


def dump_filters(params, layer, out_path, per_channel=False):
    img = tile_grid(filter_tiles(params, layer, per_channel))
    write_pnm(out_path, img)
    return img


def response_panel(values):
    """Nonnegative panel scaled by its own maximum; any positive value maps to at least 1.

    Zero stays exactly 0 (black), so supports survive quantization and an
    all-zero panel is uniformly black.
    """
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    if top <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    q = np.rint(values / top * 255)
    q = np.where(values > 0, np.maximum(q, 1), 0)
    return q.astype(np.uint8)


def template_responses(params, x, channels=None):
    """``(zhat, T, z)`` for one input, each ``(M', h, w)`` over the selected channels."""
    if params.templates is None:
        raise ValueError("network has no template layer")
    if isinstance(x, OrthoPatch):
        x = x.normals
    trace = network.forward(params, np.asarray(x)[None] if np.ndim(x) == 3 else x, keep_cols=False)
    zhat = np.asarray(trace.zhat[0], dtype=np.float64)
    t = np.asarray(params.templates, dtype=np.float64)
    z = np.asarray(trace.z[0], dtype=np.float64)
    sel = list(range(t.shape[0])) if channels is None else list(channels)
    return zhat[sel], t[sel], z[sel]


def dump_template_response(params, bank, x, out_path, channels=None):
    """One row per selected template channel: ``[zhat_m | T_m | z_m]``.

    ``bank`` must be the bank attached to ``params`` (checked); it is taken
    explicitly so callers state which templates they are visualizing.
    """
    if bank is not None and params.bank is not None and not np.array_equal(bank.maps, params.bank.maps):
        raise ValueError("bank differs from the network's template layer")
    zhat, t, z = template_responses(params, x, channels)
    tiles = []
    for m in range(len(t)):
        tiles += [response_panel(zhat[m]), response_panel(t[m]), response_panel(z[m])]
    img = tile_grid(tiles, cols=3)
    write_pnm(out_path, img)
    return img


def panel(img, row, col, shape):
    """Extract panel ``(row, col)`` of a grid written by :func:`tile_grid`."""
    th, tw = shape
    r0 = 1 + row * (th + 1)
    c0 = 1 + col * (tw + 1)
    return img[r0:r0 + th, c0:c0 + tw]


def orthopatch_image(normals):
    """``(3, H, W)`` channels in ``[0, 1]`` to an ``(H, W, 3)`` uint8 image."""
    return quantize(np.moveaxis(np.asarray(normals, dtype=np.float64), 0, -1))


def dump_orthopatch(patch, out_path):
    normals = patch.normals if isinstance(patch, OrthoPatch) else patch
    img = orthopatch_image(normals)
    write_pnm(out_path, img)
    return img
