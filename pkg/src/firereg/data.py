"""Synthetic two-modality phantoms, random ground-truth warps and volume files.

A phantom is a smooth random head-like shape (outer ellipsoid, an inner
ellipsoid and a stem-like protrusion) rendered under two invertible intensity
mappings. Both renderings share the same label masks, so a pair is perfectly
co-registered until a perturbation is applied.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, no_grad, resize_linear
from .warp import compose, sample, sample_nearest

STRUCTURES = ("tissue", "inner", "stem")
STYLES = ("t1", "flair", "ir")
VOLUME_VERSION = 1
EXTENT = 2.0  # length of every axis in normalized coordinates


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    image: np.ndarray  # (1, *spatial) or (C, *spatial) float32
    spacing: tuple[float, ...]
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim < 2:
            raise ValueError(f"image must be (C, *spatial), got {self.image.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.image.ndim - 1 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing {self.spacing} invalid for image {self.image.shape}")
        if not np.isfinite(self.image).all():
            raise ValueError("image contains non-finite values")
        for name, mask in self.labels.items():
            mask = np.asarray(mask)
            if mask.shape != self.shape:
                raise ValueError(f"label {name!r} has shape {mask.shape}, expected {self.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"label {name!r} is not binary")
            self.labels[name] = mask.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.image.shape[1:]

    @property
    def dim(self) -> int:
        return self.image.ndim - 1


@dataclass(frozen=True)
class PerturbationSpec:
    """Random ground-truth transformation settings.

    At least one axis receives a scale change ``|s - 1|`` or a translation
    whose magnitude, as a fraction of the axis extent, lies in ``strength``.
    ``minor_translation`` is also a fraction of the extent.
    """

    strength: tuple[float, float] = (0.2, 0.5)
    max_rotation_deg: float = 10.0
    minor_scale: float = 0.1
    minor_translation: float = 0.05
    include_nonrigid: bool = True
    nonrigid_amplitude: float = 0.06
    nonrigid_smoothness: int = 5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.strength
        if not (0 <= lo <= hi < 1):
            raise ValueError(f"strength must satisfy 0 <= lo <= hi < 1, got {self.strength}")
        if not 0 <= self.nonrigid_amplitude < 1:
            raise ValueError("nonrigid_amplitude must lie in [0, 1)")
        if self.nonrigid_smoothness < 3:
            raise ValueError("nonrigid_smoothness (control grid extent) must be >= 3")


# -- phantoms -------------------------------------------------------------------
def _rotation(dim: int, rng: np.random.Generator, max_deg: float) -> np.ndarray:
    r = np.eye(dim)
    planes = [(0, 1)] if dim == 2 else [(0, 1), (0, 2), (1, 2)]
    for i, j in planes:
        a = np.deg2rad(rng.uniform(-max_deg, max_deg)) if max_deg > 0 else 0.0
        g = np.eye(dim)
        g[i, i] = g[j, j] = np.cos(a)
        g[i, j], g[j, i] = -np.sin(a), np.sin(a)
        r = g @ r
    return r


def _ellipsoid_level(coords, centre, radii, rot) -> np.ndarray:
    d = np.tensordot(rot.T, coords - np.reshape(centre, (-1,) + (1,) * (coords.ndim - 1)), axes=1)
    return np.sqrt(sum((d[k] / radii[k]) ** 2 for k in range(len(radii))))


def _soft(level: np.ndarray, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(np.clip((level - 1.0) / width, -50, 50)))


def _style_map(v: np.ndarray, style: str) -> np.ndarray:
    """Invertible intensity mappings on [0, 1]."""
    if style == "t1":
        return v
    if style == "flair":
        return (1.0 - v) ** 0.7
    if style == "ir":
        return v**2
    raise ValueError(f"unknown style {style!r}; choose from {STYLES}")


def _to_unit_range(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return 2.0 * (img - lo) / (hi - lo) - 1.0


def generate_phantom_pair(
    seed: int,
    dim: int = 2,
    size: int = 64,
    style_a: str = "t1",
    style_b: str = "flair",
    spacing: Sequence[float] | None = None,
) -> tuple[Volume, Volume]:
    rng = np.random.default_rng(seed)
    shape = (size,) * dim
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    rot = _rotation(dim, rng, 12.0)
    centre = rng.uniform(-0.05, 0.05, dim)

    outer_r = rng.uniform(0.45, 0.58, dim)
    inner_r = outer_r * rng.uniform(0.38, 0.5, dim)
    inner_c = centre + rng.uniform(-0.06, 0.06, dim)
    # the stem hangs off the outer shape along axis 0
    stem_r = np.full(dim, 0.14)
    stem_r[0] = 0.26
    stem_c = centre.copy()
    stem_c[0] += outer_r[0] * 0.95
    stem_c[1:] += rng.uniform(-0.05, 0.05, dim - 1)

    width = 0.02
    lv_outer = _ellipsoid_level(coords, centre, outer_r, rot)
    lv_inner = _ellipsoid_level(coords, inner_c, inner_r, rot)
    lv_stem = _ellipsoid_level(coords, stem_c, stem_r, rot)
    s_outer, s_inner, s_stem = _soft(lv_outer, width), _soft(lv_inner, width), _soft(lv_stem, width)

    # smooth texture so features have content inside the shapes
    freq = rng.uniform(1.5, 3.0, (2, dim))
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = sum(
        0.06 * np.cos(np.tensordot(freq[i], coords, axes=1) * np.pi / 2 + phase[i]) for i in range(2)
    )
    body = np.maximum(s_outer, s_stem)
    unit = 0.75 * body + texture * body
    unit = unit * (1 - s_stem) + 0.45 * s_stem
    unit = unit * (1 - s_inner) + 0.25 * s_inner
    unit = np.clip(unit, 0.0, 1.0)

    inner = lv_inner <= 1.0
    stem = (lv_stem <= 1.0) & ~inner
    tissue = (lv_outer <= 1.0) & ~inner & ~stem
    labels = {"tissue": tissue, "inner": inner, "stem": stem}
    spacing = tuple(spacing) if spacing is not None else (1.0,) * dim

    def render(style):
        img = _to_unit_range(_style_map(unit, style))
        return Volume(
            img[None].astype(np.float32),
            spacing,
            {k: v.astype(np.uint8) for k, v in labels.items()},
            {"seed": int(seed), "style": style},
        )

    return render(style_a), render(style_b)


# -- perturbations ----------------------------------------------------------------
def _rng_for(spec: PerturbationSpec, rng) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(spec.seed)


def random_affine(spec: PerturbationSpec, dim: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Backward-map matrix ``R diag(s) | t`` with one strong scale or shift."""
    rng = _rng_for(spec, rng)
    lo, hi = spec.strength
    scale = 1.0 + rng.uniform(-spec.minor_scale, spec.minor_scale, dim)
    shift = rng.uniform(-spec.minor_translation, spec.minor_translation, dim) * EXTENT
    axis = int(rng.integers(dim))
    magnitude = rng.uniform(lo, hi)
    sign = rng.choice((-1.0, 1.0))
    if rng.random() < 0.5:
        scale[axis] = 1.0 + sign * magnitude
    else:
        shift[axis] = sign * magnitude * EXTENT
    rot = _rotation(dim, rng, spec.max_rotation_deg)
    out = np.zeros((dim, dim + 1))
    out[:, :dim] = rot @ np.diag(scale)
    out[:, dim] = shift
    return out


def affine_strength(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis |scale - 1| and |translation| / extent of a ``random_affine`` matrix."""
    n = matrix.shape[0]
    lin = matrix[:, :n]
    scales = np.linalg.norm(lin, axis=0)
    return np.abs(scales - 1.0), np.abs(matrix[:, n]) / EXTENT


def random_smooth_field(
    spec: PerturbationSpec, shape: Sequence[int], rng: np.random.Generator | None = None
) -> np.ndarray:
    """Fold-free displacement field (n, *shape) from a coarse random control grid.

    The amplitude is capped so that the piecewise-linear field's derivatives
    stay below 1/n per component, which keeps the Jacobian positive.
    """
    rng = _rng_for(spec, rng)
    shape = tuple(shape)
    n = len(shape)
    c = spec.nonrigid_smoothness
    pitch = 2.0 / (c - 1)
    amp = min(spec.nonrigid_amplitude, 0.95 * pitch / (2 * n))
    ctrl = rng.uniform(-amp, amp, (n,) + (c,) * n)
    if amp == 0:
        return np.zeros((n,) + shape)
    return resize_linear(Tensor(ctrl, dtype=np.float64), shape).data


def random_warp(spec: PerturbationSpec, shape: Sequence[int], rng: np.random.Generator | None = None):
    rng = _rng_for(spec, rng)
    a = random_affine(spec, len(shape), rng)
    if spec.include_nonrigid:
        u = random_smooth_field(spec, shape, rng)
    else:
        u = np.zeros((len(shape),) + tuple(shape))
    return a, u


def ground_truth_grid(matrix, field, shape) -> np.ndarray:
    with no_grad():
        return compose(
            Tensor(np.asarray(matrix, np.float64), dtype=np.float64),
            Tensor(np.asarray(field, np.float64), dtype=np.float64),
            shape,
        ).data


def invert_grid(matrix, field, shape, iters: int = 30) -> np.ndarray:
    """Backward map of the inverse of ``p -> A (p + u(p))`` by fixed-point iteration."""
    matrix = np.asarray(matrix, np.float64)
    n = matrix.shape[0]
    shape = tuple(shape)
    with no_grad():
        from .warp import identity_grid

        q = identity_grid(shape, np.float64).data.reshape(n, -1)
        lin_inv = np.linalg.inv(matrix[:, :n])
        target = lin_inv @ (q - matrix[:, n:])
        u = Tensor(np.asarray(field, np.float64), dtype=np.float64)
        p = target.copy()
        for _ in range(iters):
            up = sample(u, Tensor(p.reshape((n,) + shape), dtype=np.float64)).data.reshape(n, -1)
            p = target - up
    return p.reshape((n,) + shape)


def apply_ground_truth_warp(v: Volume, matrix, field) -> Volume:
    """Warp the image linearly and the masks by nearest neighbour."""
    matrix = np.asarray(matrix, np.float64)
    field = np.asarray(field, np.float64)
    if matrix.shape != (v.dim, v.dim + 1) or field.shape[0] != v.dim:
        raise ValueError(f"warp {matrix.shape}/{field.shape} does not match a {v.dim}-D volume")
    grid = ground_truth_grid(matrix, field, v.shape)
    with no_grad():
        img = sample(Tensor(v.image, dtype=np.float64), Tensor(grid, dtype=np.float64)).data
    labels = {k: sample_nearest(m[None], grid)[0] for k, m in v.labels.items()}
    meta = dict(v.meta, applied_affine=matrix.tolist())
    out = Volume(img.astype(np.float32), v.spacing, labels, meta)
    out.meta["applied_field"] = field
    return out


# -- file formats -----------------------------------------------------------------
def _stem(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".vol.f32", ".vol"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_volume(v: Volume, path) -> Path:
    """Write ``<stem>.vol.json`` + ``<stem>.vol.f32`` (+ ``<stem>.<label>.msk.u8``)."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": VOLUME_VERSION,
        "shape": list(v.shape),
        "channels": int(v.image.shape[0]),
        "spacing_mm": list(v.spacing),
        "dtype": "f32",
        "labels": [],
    }
    _atomic_write(stem.with_name(stem.name + ".vol.f32"), v.image.astype("<f4").tobytes())
    for name, mask in sorted(v.labels.items()):
        fname = f"{stem.name}.{name}.msk.u8"
        _atomic_write(stem.with_name(fname), mask.astype(np.uint8).tobytes())
        header["labels"].append({"name": name, "file": fname})
    head = stem.with_name(stem.name + ".vol.json")
    _atomic_write(head, json.dumps(header, indent=1).encode())
    return head


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc


def load_volume(path) -> Volume:
    stem = _stem(path)
    head = stem.with_name(stem.name + ".vol.json")
    try:
        header = json.loads(head.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read volume header {head}: {exc}") from exc
    if header.get("version") != VOLUME_VERSION or header.get("dtype") != "f32":
        raise VolumeFormatError(
            f"{head}: unsupported version/dtype {header.get('version')}/{header.get('dtype')}"
        )
    shape = tuple(int(s) for s in header["shape"])
    channels = int(header.get("channels", 1))
    raw = np.frombuffer(_read(stem.with_name(stem.name + ".vol.f32")), dtype="<f4")
    expected = channels * int(np.prod(shape))
    if raw.size != expected or raw.nbytes != expected * 4:
        raise VolumeFormatError(f"{head}: payload has {raw.size} values, header implies {expected}")
    labels = {}
    for entry in header.get("labels", []):
        m = np.frombuffer(_read(stem.with_name(entry["file"])), dtype=np.uint8)
        if m.size != int(np.prod(shape)):
            raise VolumeFormatError(f"label {entry['name']}: {m.size} values for shape {shape}")
        labels[entry["name"]] = m.reshape(shape).copy()
    return Volume(raw.reshape((channels,) + shape).astype(np.float32), header["spacing_mm"], labels)


def to_pgm_bytes(image2d: np.ndarray) -> bytes:
    """Binary PGM (P5) with [-1, 1] mapped linearly onto [0, 255]."""
    img = np.asarray(image2d, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM preview needs a 2-D image")
    px = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + px.tobytes()


def write_pgm(v: Volume, path) -> Path:
    if v.dim != 2:
        raise ValueError("PGM previews are only written for 2-D volumes")
    path = Path(path)
    _atomic_write(path, to_pgm_bytes(v.image[0]))
    return path


# -- datasets -----------------------------------------------------------------------
DATASET_VERSION = 1
MANIFEST = "manifest.json"


def pair_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def write_dataset(out_dir, count: int, dim: int = 2, size: int = 64, seed: int = 0,
                  styles: tuple[str, str] = ("t1", "flair")) -> Path:
    """Write ``count`` co-registered phantom pairs and a manifest.

    Each manifest entry records the pair seed, so any pair can be rebuilt with
    ``generate_phantom_pair(entry["seed"], dim, size, *styles)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(3, len(str(count - 1)))
    for i, s in enumerate(pair_seeds(seed, count)):
        a, b = generate_phantom_pair(s, dim, size, *styles)
        stem = f"pair{i:0{width}d}"
        save_volume(a, out / f"{stem}_a")
        save_volume(b, out / f"{stem}_b")
        entries.append({"seed": s, "moving": f"{stem}_a.vol.json", "fixed": f"{stem}_b.vol.json"})
    manifest = {
        "version": DATASET_VERSION, "dim": dim, "size": size, "seed": seed,
        "styles": list(styles), "pairs": entries,
    }
    path = out / MANIFEST
    _atomic_write(path, json.dumps(manifest, indent=1).encode())
    return path


def load_dataset(data_dir) -> list[tuple[Volume, Volume]]:
    path = Path(data_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise VolumeFormatError(f"{path}: unsupported dataset version {manifest.get('version')}")
    root = path.parent
    return [(load_volume(root / e["moving"]), load_volume(root / e["fixed"])) for e in manifest["pairs"]]


def perturbed_pairs(cases: Sequence[tuple[Volume, Volume]], spec: PerturbationSpec) -> list[tuple[Volume, Volume]]:
    """Training view of a dataset: each moving volume gets one fixed random warp.

    Pair ``i`` draws from ``default_rng([spec.seed, i])``, so the view depends
    only on the spec and the pair order.
    """
    out = []
    for i, (moving, fixed) in enumerate(cases):
        a, u = random_warp(spec, moving.shape, np.random.default_rng([spec.seed, i]))
        out.append((apply_ground_truth_warp(moving, a, u), fixed))
    return out
