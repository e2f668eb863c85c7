"""Differentiable bilinear sampling with zero padding outside the map."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, as_tensor

# corner offsets (dx, dy) in the order the weights are built below
_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _corner_terms(xy: np.ndarray, height: int, width: int):
    """Per-corner flat pixel index, validity mask, weight and weight derivatives."""
    x = xy[..., 0]
    y = xy[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    dwx = (-1.0, 1.0)
    terms = []
    for dx, dy in _CORNERS:
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        flat = np.where(valid, cy * width + cx, 0)
        w = wx[dx] * wy[dy] * valid
        dw_dx = dwx[dx] * wy[dy] * valid
        dw_dy = wx[dx] * dwx[dy] * valid
        terms.append((flat, w, dw_dx, dw_dy))
    return terms


def sample_maps(value, xy) -> Tensor:
    """Bilinearly sample channel-last maps at pixel coordinates.

    value: [G, H, W, C]; xy: [G, P, 2] as (x=column, y=row) in pixel units.
    Returns [G, P, C]. Pixels outside the map contribute zero.
    """
    value, xy = as_tensor(value), as_tensor(xy)
    if value.ndim != 4 or xy.ndim != 3 or xy.shape[-1] != 2 or xy.shape[0] != value.shape[0]:
        raise ValueError(f"sample_maps expects value [G,H,W,C] and xy [G,P,2], got {value.shape} and {xy.shape}")
    g_count, height, width, channels = value.shape
    flat_value = value.data.reshape(g_count, height * width, channels)
    terms = _corner_terms(xy.data, height, width)
    rows = np.arange(g_count)[:, None]
    gathered = [flat_value[rows, flat] for flat, _, _, _ in terms]
    out = np.zeros((g_count, xy.shape[1], channels))
    for (_, w, _, _), vals in zip(terms, gathered):
        out += w[..., None] * vals

    return _make(out, (value, xy), lambda g: _sample_backward(g, value, terms, gathered))


def _sample_backward(g, value, terms, gathered):
    g_count, height, width, channels = value.shape
    g_value = np.zeros((g_count * height * width, channels))
    g_xy = np.zeros(g.shape[:2] + (2,))
    offset = (np.arange(g_count) * height * width)[:, None]
    for (flat, w, dw_dx, dw_dy), vals in zip(terms, gathered):
        np.add.at(g_value, (flat + offset).reshape(-1), (w[..., None] * g).reshape(-1, channels))
        dot = (vals * g).sum(axis=-1)
        g_xy[..., 0] += dw_dx * dot
        g_xy[..., 1] += dw_dy * dot
    return g_value.reshape(value.shape), g_xy


def bilinear_sample(feature_map, loc) -> Tensor:
    """Sample a [C, H, W] map at one fractional location ``(x, y)``; returns [C]."""
    feature_map = as_tensor(feature_map)
    if feature_map.ndim != 3:
        raise ValueError(f"expected a [C, H, W] map, got shape {feature_map.shape}")
    loc = as_tensor(loc)
    value = feature_map.transpose(1, 2, 0).reshape(1, *feature_map.shape[1:], feature_map.shape[0])
    return sample_maps(value, loc.reshape(1, 1, 2)).reshape(feature_map.shape[0])
