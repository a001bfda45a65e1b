"""Registration quality metrics, the repeated-perturbation protocol and timing."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PerturbationSpec, Volume, apply_ground_truth_warp, random_warp
from .model import FireModel, predict_transform
from .tensor import Tensor, no_grad
from .warp import jacobian_det_map, sample, sample_nearest


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks count as a perfect match."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ValueError("dice expects binary masks")
    a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _interior(shape, margin: float):
    return tuple(slice(int(np.floor(s * margin)), s - int(np.floor(s * margin))) for s in shape)


def inverse_consistency_residual(x, grid_fwd, grid_bwd, margin: float = 0.1, border: str = "clamp") -> float:
    """RMS between ``x`` and ``x o fwd o bwd`` over an interior crop."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    gf = np.asarray(getattr(grid_fwd, "data", grid_fwd), dtype=np.float64)
    gb = np.asarray(getattr(grid_bwd, "data", grid_bwd), dtype=np.float64)
    if gf.shape[1:] != x.shape[1:] or gb.shape[1:] != x.shape[1:]:
        raise ValueError(f"grids {gf.shape}/{gb.shape} do not match image {x.shape}")
    with no_grad():
        once = sample(Tensor(x, dtype=np.float64), Tensor(gf, dtype=np.float64), border)
        back = sample(once, Tensor(gb, dtype=np.float64), border).data
    crop = (slice(None),) + _interior(x.shape[1:], margin)
    diff = (x - back)[crop]
    return float(np.sqrt(np.mean(diff * diff)))


def jacobian_positive_fraction(grid) -> float:
    det = jacobian_det_map(grid)
    if det.size == 0:
        raise ValueError("grid has no interior points")
    return float(np.mean(det > 0))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    structures: tuple[str, ...] = ()

    DICE_KINDS = ("unaligned", "affine", "full")

    def dice_values(self, kind: str, structure: str | None = None) -> np.ndarray:
        keys = [structure] if structure else list(self.structures)
        return np.array([r[f"dice_{kind}_{s}"] for r in self.rows for s in keys])

    def mean_dice(self, kind: str, structure: str | None = None) -> float:
        return float(np.mean(self.dice_values(kind, structure)))

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for kind in self.DICE_KINDS:
            for s in self.structures:
                v = self.dice_values(kind, s)
                out[f"dice_{kind}_{s}"] = (float(v.mean()), float(v.std()))
        for key in ("ic_residual", "jacobian_positive_fraction", "t_register"):
            v = np.array([r[key] for r in self.rows])
            out[key] = (float(v.mean()), float(v.std()))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.rows:
            return ""
        writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]))
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [
            "Dice x100, mean (std) over all case x repeat rows",
            f"{'Object':<10}{'unaligned':>16}{'FIRE-affine':>16}{'FIRE':>16}",
        ]
        for s in self.structures:
            cells = []
            for kind in self.DICE_KINDS:
                m, sd = agg[f"dice_{kind}_{s}"]
                cells.append(f"{100 * m:.2f} ({100 * sd:.1f})")
            lines.append(f"{s:<10}" + "".join(f"{c:>16}" for c in cells))
        m, sd = agg["ic_residual"]
        lines.append(f"inverse-consistency residual: {m:.5f} ({sd:.5f})")
        m, sd = agg["jacobian_positive_fraction"]
        lines.append(f"Jacobian-positive fraction: {m:.5f} ({sd:.5f})")
        return "\n".join(lines)


def _warp_mask(mask: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return sample_nearest(mask[None], grid)[0]


def _evaluate_case(model, ci, moving0, fixed, repeat, spec, seed) -> list[dict]:
    if not moving0.labels or not fixed.labels:
        raise ValueError(f"case {ci} has no label masks")
    structures = sorted(set(moving0.labels) & set(fixed.labels))
    rows = []
    for r in range(repeat):
        rng = np.random.default_rng([seed, ci, r])
        a, u = random_warp(spec, moving0.shape, rng)
        moving = apply_ground_truth_warp(moving0, a, u)
        t0 = time.perf_counter()
        fwd = predict_transform(moving.image, fixed.image, model, "ab")
        t1 = time.perf_counter()
        bwd = predict_transform(fixed.image, moving.image, model, "ba")
        row = {"case": ci, "repeat": r}
        for s in structures:
            fm = fixed.labels[s]
            mm = moving.labels[s]
            row[f"dice_unaligned_{s}"] = dice(mm, fm)
            row[f"dice_affine_{s}"] = dice(_warp_mask(mm, fwd.affine_grid), fm)
            row[f"dice_full_{s}"] = dice(_warp_mask(mm, fwd.grid), fm)
        row["ic_residual"] = inverse_consistency_residual(moving.image, fwd.grid, bwd.grid)
        row["jacobian_positive_fraction"] = jacobian_positive_fraction(fwd.grid)
        row["t_register"] = t1 - t0
        rows.append(row)
    return rows


def evaluate(
    model: FireModel,
    cases: Sequence[tuple[Volume, Volume]],
    repeat: int = 20,
    spec: PerturbationSpec | None = None,
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Perturb each moving volume ``repeat`` times, register it to its fixed
    partner and score unaligned, affine-only and full Dice per structure.

    Cases are independent; ``workers > 1`` spreads them over threads and the
    rows come back in case order either way.
    """
    spec = spec or PerturbationSpec()
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    for ci, (moving0, fixed) in enumerate(cases):
        if not moving0.labels or not fixed.labels:
            raise ValueError(f"case {ci} has no label masks")
    jobs = [(model, ci, m, f, repeat, spec, seed) for ci, (m, f) in enumerate(cases)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_case = list(pool.map(lambda job: _evaluate_case(*job), jobs))
    else:
        per_case = [_evaluate_case(*job) for job in jobs]
    report = EvalReport()
    for rows in per_case:
        report.rows.extend(rows)
    if cases:
        report.structures = tuple(sorted(set(cases[-1][0].labels) & set(cases[-1][1].labels)))
    return report


# -- timing ---------------------------------------------------------------------
def _time_affine(model: FireModel, moving: np.ndarray, fixed: np.ndarray) -> float:
    from .model import encode, predict_affine
    from .warp import affine_grid

    t0 = time.perf_counter()
    with no_grad():
        dtype = model.config.dtype
        mov = Tensor(moving, dtype=dtype)
        g_m, g_f = encode(mov, model), encode(Tensor(fixed, dtype=dtype), model)
        aff = predict_affine(g_m, g_f, model, "ab")
        sample(mov, affine_grid(aff, mov.shape[1:]))
    return time.perf_counter() - t0


def _time_full(model: FireModel, moving: np.ndarray, fixed: np.ndarray) -> float:
    t0 = time.perf_counter()
    reg = predict_transform(moving, fixed, model, "ab")
    with no_grad():
        sample(Tensor(moving, dtype=model.config.dtype), Tensor(reg.grid, dtype=model.config.dtype))
    return time.perf_counter() - t0


@dataclass
class TimingTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["data", "registration", "images", "cpu_mean_s", "cpu_std_s"])
        for r in self.rows:
            writer.writerow([r["data"], r["mode"], r["n"], f"{r['mean']:.6f}", f"{r['std']:.6f}"])
        return buf.getvalue()

    def text(self) -> str:
        lines = [
            "Mean registration time on CPU, (std) in parentheses",
            f"{'Data':<16}{'Registration':<14}{'Images':>8}{'CPU (sec)':>22}",
        ]
        for r in self.rows:
            cell = f"{r['mean']:.4f} ({r['std']:.4f})"
            lines.append(f"{r['data']:<16}{r['mode'].capitalize():<14}{r['n']:>8}{cell:>22}")
        return "\n".join(lines)


def bench(
    model: FireModel,
    cases: Sequence[tuple[Volume, Volume]],
    modes: Sequence[str] = ("affine", "nonrigid"),
    runs: int = 5,
    dataset_name: str | None = None,
) -> TimingTable:
    """Wall-clock per registration, one row per (dataset, mode)."""
    if not cases:
        raise ValueError("bench needs at least one case")
    name = dataset_name or f"phantom ({cases[0][0].dim}D)"
    timers = {"affine": _time_affine, "nonrigid": _time_full}
    rows = []
    for mode in modes:
        if mode not in timers:
            raise ValueError(f"unknown bench mode {mode!r}")
        times = []
        for _ in range(runs):
            for moving, fixed in cases:
                times.append(timers[mode](model, moving.image, fixed.image))
        times = np.array(times)
        rows.append({
            "data": name, "mode": mode, "n": len(times),
            "mean": float(times.mean()),
            "std": float(times.std(ddof=1)) if len(times) > 1 else 0.0,
        })
    return TimingTable(rows)
