"""Synthesis, registration and regularization objectives.

All terms are unweighted RMS sums except the bending energy, which is scaled
by ``lambda_for(dim, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .model import ForwardBundle
from .tensor import ShapeError, Tensor
from .warp import bending_energy, sample

COMPONENTS = (
    "syn_acc", "syn_fea", "syn_cyc", "syn_align",
    "reg_acc", "reg_ic", "r_syn", "r_reg", "r_smooth",
)


class NonFiniteComponentError(FloatingPointError):
    """A loss term could not be evaluated to a finite value."""

    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"{component}: {detail}" if detail else component)


def _terms(items) -> dict[str, Tensor]:
    parts = {}
    for name, fn in items:
        try:
            parts[name] = fn()
        except FloatingPointError as exc:
            raise NonFiniteComponentError(name, str(exc)) from exc
    return parts


def rms(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"rms: shape mismatch {a.shape} vs {b.shape}")
    return T.rms(a, b)


def lambda_for(dim: int, n_points: int) -> float:
    """Bending-energy weight 2**(2n) / (10 N) for an n-D image of N points."""
    if dim not in (2, 3) or n_points < 1:
        raise ValueError(f"lambda_for needs dim in (2, 3) and N >= 1, got {dim}, {n_points}")
    return 2.0 ** (2 * dim) / (10.0 * n_points)


def _need(bundle, *names):
    for name in names:
        if getattr(bundle, name, None) is None:
            raise ValueError(f"bundle is missing {name}")


def synthesis_loss(b: ForwardBundle) -> tuple[Tensor, dict[str, Tensor]]:
    _need(b, "syn_t_a", "syn_t_b", "g_a", "g_b", "g_a_warped", "g_b_warped",
          "cyc_a", "cyc_b", "g_syn_a", "g_syn_b")
    parts = _terms([
        ("syn_acc", lambda: rms(b.syn_t_b, b.x_b) + rms(b.syn_t_a, b.x_a)),
        ("syn_fea", lambda: rms(b.g_a, b.g_b_warped) + rms(b.g_b, b.g_a_warped)),
        ("syn_cyc", lambda: rms(b.cyc_a, b.x_a) + rms(b.cyc_b, b.x_b)),
        ("syn_align", lambda: rms(b.g_a, b.g_syn_b) + rms(b.g_b, b.g_syn_a)),
    ])
    return _total(parts.values()), parts


def registration_loss(b: ForwardBundle, border: str = "clamp") -> tuple[Tensor, dict[str, Tensor]]:
    _need(b, "syn_t_a", "syn_t_b", "x_a_warped", "x_b_warped", "grid_ab", "grid_ba")
    # reg_acc repeats the synthesis-accuracy expression term for term
    parts = _terms([
        ("reg_acc", lambda: rms(b.syn_t_b, b.x_b) + rms(b.syn_t_a, b.x_a)),
        ("reg_ic", lambda: rms(b.x_a, sample(b.x_a_warped, b.grid_ba, border))
                           + rms(b.x_b, sample(b.x_b_warped, b.grid_ab, border))),
    ])
    return _total(parts.values()), parts


def regularization(b: ForwardBundle, image_shape=None, dim: int | None = None):
    """Returns (r_syn + r_reg + lambda * r_smooth, parts, lambda)."""
    _need(b, "syn_af_feat_a", "syn_af_feat_b", "syn_af_img_a", "syn_af_img_b",
          "field_ab", "field_ba")
    image_shape = tuple(image_shape or b.image_shape)
    dim = dim or len(image_shape)
    lam = lambda_for(dim, int(np.prod(image_shape)))
    parts = _terms([
        ("r_syn", lambda: rms(b.x_b, b.syn_af_feat_b) + rms(b.x_a, b.syn_af_feat_a)),
        ("r_reg", lambda: rms(b.x_b, b.syn_af_img_b) + rms(b.x_a, b.syn_af_img_a)),
        ("r_smooth", lambda: bending_energy(b.field_ab) + bending_energy(b.field_ba)),
    ])
    total = parts["r_syn"] + parts["r_reg"] + parts["r_smooth"] * lam
    return total, parts, lam


def _total(terms):
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass
class LossBreakdown:
    syn_acc: float
    syn_fea: float
    syn_cyc: float
    syn_align: float
    reg_acc: float
    reg_ic: float
    r_syn: float
    r_reg: float
    r_smooth: float
    lam: float
    total: float

    def as_row(self) -> dict[str, float]:
        return {f.name if f.name != "lam" else "lambda": getattr(self, f.name) for f in fields(self)}

    def first_non_finite(self) -> str | None:
        for name, value in self.as_row().items():
            if not np.isfinite(value):
                return name
        return None


def total_loss(b: ForwardBundle) -> tuple[Tensor, LossBreakdown]:
    """Differentiable scalar and its float breakdown."""
    l_syn, syn = synthesis_loss(b)
    l_reg, reg = registration_loss(b)
    r, reg_terms, lam = regularization(b)
    total = l_syn + l_reg + r
    parts = {**syn, **reg, **reg_terms}
    values = {k: float(v.data) for k, v in parts.items()}
    return total, LossBreakdown(**values, lam=lam, total=float(total.data))
