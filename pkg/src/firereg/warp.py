"""Spatial transformations in normalized coordinates.

Every image axis spans [-1, 1] with the align-corners convention: index 0 maps
to -1 and the last index to +1. A sampling grid is a backward map stored as a
``(n, *out_shape)`` tensor whose component ``k`` addresses spatial axis ``k``
of the image, so ``sample(img, grid)[p] = img[grid[p]]``.

Affine matrices are ``(n, n+1)`` tensors acting on ``[p; 1]``; displacement
fields are ``(n, *field_shape)`` tensors added to the identity grid.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _result, affine_apply, resize_linear

__all__ = [
    "identity_affine",
    "compose_affine",
    "identity_grid",
    "affine_grid",
    "displacement_grid",
    "compose",
    "sample",
    "sample_nearest",
    "bending_energy",
    "jacobian_det_map",
]


def identity_affine(n: int, dtype=np.float32) -> np.ndarray:
    return np.eye(n, n + 1, dtype=dtype)


def _homogeneous(m: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    h = np.eye(n + 1, dtype=np.float64)
    h[:n] = m
    return h


def compose_affine(outer, inner) -> np.ndarray:
    """Matrix of the map ``p -> outer(inner(p))``.

    Sampling through ``affine_grid(outer)`` and then through
    ``affine_grid(inner)`` is equivalent to one pass through this matrix.
    """
    outer = np.asarray(getattr(outer, "data", outer), dtype=np.float64)
    inner = np.asarray(getattr(inner, "data", inner), dtype=np.float64)
    n = outer.shape[0]
    return (_homogeneous(outer) @ _homogeneous(inner))[:n]


def identity_grid(shape: Sequence[int], dtype=np.float32) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 2 for s in shape):
        raise ShapeError(f"identity_grid needs extents >= 2, got {shape}")
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"))
    return Tensor(mesh.astype(dtype), dtype=dtype)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def affine_grid(matrix, shape: Sequence[int]) -> Tensor:
    matrix = _as_tensor(matrix)
    n = len(shape)
    if matrix.shape != (n, n + 1):
        raise ShapeError(f"affine_grid: matrix {matrix.shape} for a {n}-D grid")
    return affine_apply(matrix, identity_grid(shape, matrix.dtype))


def displacement_grid(field, shape: Sequence[int]) -> Tensor:
    """Identity grid plus the field linearly resized to ``shape``."""
    field = _as_tensor(field)
    if field.shape[0] != len(shape) or field.ndim != len(shape) + 1:
        raise ShapeError(f"displacement_grid: field {field.shape} for a {len(shape)}-D grid")
    return identity_grid(shape, field.dtype) + resize_linear(field, shape)


def compose(matrix, field, shape: Sequence[int]) -> Tensor:
    """Single backward map ``p -> A [p + u(p); 1]``: the field first, then the affine."""
    matrix = _as_tensor(matrix)
    n = len(shape)
    if matrix.shape != (n, n + 1):
        raise ShapeError(f"compose: matrix {matrix.shape} for a {n}-D grid")
    return affine_apply(matrix, displacement_grid(field, shape))


def _index_coords(grid: np.ndarray, spatial: Sequence[int], border: str, snap_tol: float):
    """Continuous indices per axis with their floor, fraction and d(index)/d(coord)."""
    out = []
    for k, s in enumerate(spatial):
        half = 0.5 * (s - 1)
        x = (grid[k] + 1.0) * half
        if border == "clamp":
            inside = (x >= 0) & (x <= s - 1)
            x = np.clip(x, 0, s - 1)
            dxdp = np.where(inside, half, 0.0)
        else:
            dxdp = np.full(x.shape, half)
        fl = np.floor(x)
        t = x - fl
        # nodes hit up to rounding are read exactly
        up = t > 1 - snap_tol
        fl[up] += 1
        t[up] = 0.0
        t[t < snap_tol] = 0.0
        i0 = fl.astype(np.int64)
        out.append((i0, i0 + 1, t, dxdp))
    return out


def sample(image: Tensor, grid: Tensor, border: str = "clamp") -> Tensor:
    """Multi-linear interpolation of ``image`` (C, *S) at ``grid`` (n, *T).

    ``border="clamp"`` repeats edge values outside [-1, 1]; ``"zeros"`` reads
    zeros there. Differentiable with respect to both image and grid.
    """
    if border not in ("clamp", "zeros"):
        raise ValueError(f"unknown border policy {border!r}")
    grid = _as_tensor(grid, image.dtype)
    spatial = image.shape[1:]
    n = len(spatial)
    if grid.shape[0] != n or grid.ndim != n + 1:
        raise ShapeError(f"sample: grid {grid.shape} for image {image.shape}")
    if any(s < 2 for s in spatial):
        raise ShapeError(f"sample: image extents must be >= 2, got {spatial}")
    c = image.shape[0]
    out_sp = grid.shape[1:]
    g = grid.data.reshape(n, -1).astype(np.float64)
    npts = g.shape[1]
    snap_tol = 16 * np.finfo(grid.dtype).eps * max(spatial)
    coords = _index_coords(g, spatial, border, snap_tol)
    strides = np.cumprod((1,) + tuple(spatial[::-1]))[:-1][::-1]
    flat_img = image.data.reshape(c, -1)

    corners = list(itertools.product((0, 1), repeat=n))
    flat_idx, valid = [], []
    for bits in corners:
        flat = np.zeros(npts, dtype=np.int64)
        ok = np.ones(npts, dtype=bool)
        for k, b in enumerate(bits):
            i0, i1, _, _ = coords[k]
            idx = i1 if b else i0
            if border == "clamp":
                idx = np.minimum(idx, spatial[k] - 1)
            else:
                ok &= (idx >= 0) & (idx < spatial[k])
                idx = np.clip(idx, 0, spatial[k] - 1)
            flat += idx * strides[k]
        flat_idx.append(flat)
        valid.append(ok)
    vals = np.stack([flat_img[:, f] * ok for f, ok in zip(flat_idx, valid)])
    vals = vals.reshape((2,) * n + (c, npts))
    ts = [coords[k][2].astype(image.dtype) for k in range(n)]
    red = vals
    for k in reversed(range(n)):
        v0 = red[(Ellipsis, 0, slice(None), slice(None))]
        v1 = red[(Ellipsis, 1, slice(None), slice(None))]
        red = v0 + ts[k] * (v1 - v0)
    out = red.reshape((c,) + out_sp)
    flat_vals = vals.reshape(len(corners), c, npts)

    def bw(g_out):
        g2 = g_out.reshape(c, npts)
        factors = [(1.0 - coords[k][2], coords[k][2]) for k in range(n)]
        gimg = ggrid = None
        if image.requires_grad:
            acc = np.zeros(c * flat_img.shape[1], dtype=np.float64)
            chan_off = (np.arange(c) * flat_img.shape[1])[:, None]
            for ci, bits in enumerate(corners):
                w = np.prod([factors[k][b] for k, b in enumerate(bits)], axis=0) * valid[ci]
                acc += np.bincount(
                    (chan_off + flat_idx[ci]).ravel(),
                    weights=(g2 * w).ravel(),
                    minlength=acc.size,
                )
            gimg = acc.reshape(image.shape).astype(image.dtype)
        if grid.requires_grad:
            ggrid = np.zeros((n, npts), dtype=np.float64)
            gv = [(g2 * flat_vals[ci]).sum(axis=0) for ci in range(len(corners))]
            for k in range(n):
                d = np.zeros(npts)
                for ci, bits in enumerate(corners):
                    w = np.ones(npts)
                    for j, b in enumerate(bits):
                        if j != k:
                            w = w * factors[j][b]
                    d += gv[ci] * w * (1.0 if bits[k] else -1.0)
                ggrid[k] = d * coords[k][3]
            ggrid = ggrid.reshape(grid.shape).astype(grid.dtype)
        return (gimg, ggrid)

    return _result(out, (image, grid), bw, "sample")


def sample_nearest(image: np.ndarray, grid, border: str = "zeros") -> np.ndarray:
    """Nearest-neighbour lookup for label masks; keeps values in the input set.

    Points outside the field of view read 0 by default: a clamped lookup
    would smear any structure touching the border into a streak.
    """
    image = np.asarray(image)
    g = np.asarray(getattr(grid, "data", grid), dtype=np.float64)
    spatial = image.shape[1:]
    idx = []
    ok = np.ones(g.shape[1:], dtype=bool)
    for k, s in enumerate(spatial):
        x = np.rint((g[k] + 1.0) * 0.5 * (s - 1)).astype(np.int64)
        if border == "zeros":
            ok &= (x >= 0) & (x < s)
        idx.append(np.clip(x, 0, s - 1))
    out = image[(slice(None),) + tuple(idx)]
    if border == "zeros":
        out = out * ok
    return out.astype(image.dtype)


def bending_energy(field: Tensor) -> Tensor:
    """Sum over interior points and components of the squared discrete Laplacian.

    Second differences use unit grid spacing; boundary points are excluded.
    """
    field = _as_tensor(field)
    spatial = field.shape[1:]
    if any(s < 3 for s in spatial):
        raise ShapeError(f"bending_energy needs extents >= 3, got {spatial}")
    nd = len(spatial)
    u = field.data
    centre = (slice(None),) + (slice(1, -1),) * nd
    shifts = []
    for a in range(nd):
        plus = list(centre)
        minus = list(centre)
        plus[1 + a] = slice(2, None)
        minus[1 + a] = slice(None, -2)
        shifts.append((tuple(plus), tuple(minus)))
    lap = -2.0 * nd * u[centre]
    for plus, minus in shifts:
        lap = lap + u[plus] + u[minus]
    energy = np.asarray((lap * lap).sum(dtype=np.float64), dtype=u.dtype)

    def bw(g):
        r = (2.0 * g) * lap
        gu = np.zeros_like(u)
        gu[centre] -= 2.0 * nd * r
        for plus, minus in shifts:
            gu[plus] += r
            gu[minus] += r
        return (gu,)

    return _result(energy, (field,), bw, "bending_energy")


def jacobian_det_map(grid) -> np.ndarray:
    """Determinant of the central-difference Jacobian of ``p -> grid(p)``.

    Derivatives are taken per unit of normalized coordinate, so the identity
    grid gives 1 and a uniform scale s gives s**n. Only interior points.
    """
    g = np.asarray(getattr(grid, "data", grid), dtype=np.float64)
    n = g.shape[0]
    spatial = g.shape[1:]
    if len(spatial) != n or any(s < 3 for s in spatial):
        raise ShapeError(f"jacobian_det_map needs an (n, *S) grid with S >= 3, got {g.shape}")
    centre = (slice(1, -1),) * n
    jac = np.empty((n, n) + tuple(s - 2 for s in spatial))
    for a, s in enumerate(spatial):
        h = 2.0 / (s - 1)
        plus = list(centre)
        minus = list(centre)
        plus[a] = slice(2, None)
        minus[a] = slice(None, -2)
        for i in range(n):
            jac[i, a] = (g[i][tuple(plus)] - g[i][tuple(minus)]) / (2 * h)
    mats = np.moveaxis(jac.reshape(n, n, -1), -1, 0)
    return np.linalg.det(mats).reshape(tuple(s - 2 for s in spatial))
