import os

# single-threaded BLAS, set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from firereg.model import ForwardBundle
from firereg.tensor import Tape, Tensor
from firereg.warp import identity_grid


def numeric_grad(fn, arrays, index, h=1e-4):
    """Central differences of the scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(*base)
        x[i] = old - h
        fm = fn(*base)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(build, arrays):
    """Run ``build`` on float64 tensors and return the reverse-mode gradients.

    Inputs the output does not depend on get an all-zero gradient.
    """
    ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*ts)
    Tape.from_output(out).replay_backward(np.ones(out.shape, dtype=np.float64))
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in ts]


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(build, arrays, tol=1e-4, h=1e-4, which=None):
    """Compare reverse-mode gradients of scalar ``build`` with finite differences."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build(*ts).data)

    grads = analytic_grads(build, arrays)
    errors = []
    for i in which if which is not None else range(len(arrays)):
        num = numeric_grad(value, arrays, i, h)
        errors.append(rel_err(grads[i], num))
        assert errors[-1] <= tol, f"input {i}: relative error {errors[-1]:.2e} > {tol}"
    return errors


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def np_rms(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def np_bending(u):
    total = 0.0
    _, h, w = u.shape
    for c in range(u.shape[0]):
        for i in range(1, h - 1):
            for j in range(1, w - 1):
                lap = (u[c, i - 1, j] + u[c, i + 1, j] - 2 * u[c, i, j]
                       + u[c, i, j - 1] + u[c, i, j + 1] - 2 * u[c, i, j])
                total += lap * lap
    return total


def hand_bundle(rng, grid_ab=None, grid_ba=None, x_a=None, x_b=None, size=4):
    """Bundle of small random tensors; grids default to the identity."""
    img = lambda: rng.uniform(-1, 1, (1, size, size))
    feat = lambda: rng.normal(size=(2, 2, 2))
    ident = identity_grid((size, size), np.float64).data
    arrays = dict(
        x_a=img() if x_a is None else x_a, x_b=img() if x_b is None else x_b,
        g_a=feat(), g_b=feat(),
        affine_ab=np.eye(2, 3), affine_ba=np.eye(2, 3),
        field_ab=rng.normal(size=(2, 3, 3)), field_ba=rng.normal(size=(2, 3, 3)),
        grid_ab=ident if grid_ab is None else grid_ab, grid_ba=ident if grid_ba is None else grid_ba,
        grid_ab_feat=identity_grid((2, 2), np.float64).data,
        grid_ba_feat=identity_grid((2, 2), np.float64).data,
    )
    for name in ("syn_b", "syn_a", "syn_t_b", "syn_t_a", "cyc_a", "cyc_b", "x_a_af", "x_b_af",
                 "syn_af_feat_b", "syn_af_feat_a", "syn_af_img_b", "syn_af_img_a",
                 "x_a_warped", "x_b_warped"):
        arrays[name] = img()
    for name in ("g_a_warped", "g_b_warped", "g_syn_b", "g_syn_a", "g_a_af", "g_b_af"):
        arrays[name] = feat()
    return ForwardBundle(**{k: t64(v) for k, v in arrays.items()}), arrays


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------
ACCEPTANCE: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
