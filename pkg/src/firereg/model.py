"""Shared encoder, two decoders and two factorised transformation networks.

Parameters live in one flat ``name -> Tensor`` dict. Name prefixes decide the
optimizer group: ``taf_*`` (affine subnets), ``tnr_*`` (non-rigid subnets) and
``G`` / ``F_*`` (synthesis encoder and decoders).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .warp import affine_grid, compose, sample, sample_nearest

if TYPE_CHECKING:
    from .data import Volume

DIRECTIONS = ("ab", "ba")
GROUPS = ("taf", "tnr", "gf")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 2
    base_channels: int = 16
    resnet_blocks: int = 4
    delta_max: float = 0.25
    leaky_slope: float = 0.2
    branch_depth: int = 2
    norm_eps: float = 1e-5
    float64: bool = False

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if not 0 < self.delta_max <= 1:
            raise ValueError("delta_max must lie in (0, 1]")
        if self.resnet_blocks < 0 or self.branch_depth < 1:
            raise ValueError("resnet_blocks must be >= 0 and branch_depth >= 1")

    @property
    def feature_channels(self) -> int:
        return 4 * self.base_channels

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32

    def to_dict(self) -> dict:
        return asdict(self)


def param_group(name: str) -> str:
    if name.startswith("taf_"):
        return "taf"
    if name.startswith("tnr_"):
        return "tnr"
    return "gf"


class _Init:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg, self.rng, self.params = cfg, rng, {}

    def _add(self, name, arr):
        self.params[name] = Tensor(arr.astype(self.cfg.dtype), requires_grad=True, dtype=self.cfg.dtype)

    def conv(self, name, c_out, c_in, k, zero=False, bias=True):
        shape = (c_out, c_in) + (k,) * self.cfg.dim
        fan_in = c_in * k**self.cfg.dim
        w = np.zeros(shape) if zero else self.rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        self._add(name + ".w", w)
        if bias:
            self._add(name + ".b", np.zeros(c_out))

    def dense(self, name, n_out, n_in):
        self._add(name + ".w", self.rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in)))
        self._add(name + ".b", np.zeros(n_out))

    def resblock(self, name, c):
        self.conv(name + ".c1", c, c, 3, bias=False)
        self.conv(name + ".c2", c, c, 3, bias=False)


class FireModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig | None = None, seed: int = 0) -> "FireModel":
        """Random weights with identity-initialized transform heads.

        Convolutions followed by instance norm carry no bias: the norm
        subtracts any per-channel constant, so such a bias is never trained.
        """
        cfg = config or ModelConfig()
        init = _Init(cfg, np.random.default_rng(seed))
        c, cf, n = cfg.base_channels, cfg.feature_channels, cfg.dim

        init.conv("G.c0", c, 1, 7, bias=False)
        init.conv("G.d1", 2 * c, c, 3, bias=False)
        init.conv("G.d2", cf, 2 * c, 3, bias=False)
        for i in range(cfg.resnet_blocks):
            init.resblock(f"G.r{i}", cf)

        for d in DIRECTIONS:
            f = f"F_{d}"
            for i in range(cfg.resnet_blocks):
                init.resblock(f"{f}.r{i}", cf)
            init.conv(f"{f}.u1", 2 * c, cf, 3, bias=False)
            init.conv(f"{f}.u2", c, 2 * c, 3, bias=False)
            init.conv(f"{f}.c7", 3, c, 7, bias=False)
            init.conv(f"{f}.out", 1, 3, 1)

            a = f"taf_{d}"
            init.conv(f"{a}.c1", cf, 2 * cf, 3, bias=False)
            init.conv(f"{a}.c2", cf // 2, cf, 3, bias=False)
            init.conv(f"{a}.c3", cf // 4, cf // 2, 3)
            init.dense(f"{a}.fc1", cf // 2, cf // 4)
            init._add(f"{a}.fc2.w", np.zeros((n * (n + 1), cf // 2)))
            init._add(f"{a}.fc2.b", np.eye(n, n + 1).ravel())

            r = f"tnr_{d}"
            for branch in ("mov", "fix"):
                cin = cf
                for j in range(cfg.branch_depth):
                    init.conv(f"{r}.{branch}{j}", c, cin, 3, bias=False)
                    cin = c
            init.resblock(f"{r}.res", 2 * c)
            init.conv(f"{r}.out", n, 2 * c, 3, zero=True)
        return cls(cfg, init.params)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out = {g: {} for g in GROUPS}
        for name, p in self.params.items():
            out[param_group(name)][name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "FireModel":
        return FireModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.params.items()},
        )


# -- sub-networks ---------------------------------------------------------------
def _conv(p, prefix, x, stride=1):
    return T.conv_nd(x, p[prefix + ".w"], p.get(prefix + ".b"), stride=stride)


def _block(p, prefix):
    return {"w1": p[prefix + ".c1.w"], "b1": p.get(prefix + ".c1.b"),
            "w2": p[prefix + ".c2.w"], "b2": p.get(prefix + ".c2.b")}


def encode(x: Tensor, model: FireModel) -> Tensor:
    """Image (1, *S) -> features (4 * base_channels, *S/4)."""
    cfg, p = model.config, model.params
    spatial = x.shape[1:]
    if x.shape[0] != 1 or len(spatial) != cfg.dim:
        raise ShapeError(f"encode: expected a (1, {cfg.dim}-D) image, got {x.shape}")
    if any(s % 4 or s < 16 for s in spatial):
        raise ShapeError(f"encode: extents must be multiples of 4 and >= 16, got {spatial}")
    eps = cfg.norm_eps
    h = T.relu(T.instance_norm(_conv(p, "G.c0", x), eps))
    h = T.relu(T.instance_norm(_conv(p, "G.d1", h, 2), eps))
    h = T.relu(T.instance_norm(_conv(p, "G.d2", h, 2), eps))
    for i in range(cfg.resnet_blocks):
        h = T.resnet_block(h, _block(p, f"G.r{i}"), "relu", eps)
    return h


def decode(g: Tensor, model: FireModel, direction: str) -> Tensor:
    """Features -> synthesized image in (-1, 1) at 4x the feature extents.

    ``direction="ab"`` is the A-to-B decoder, ``"ba"`` the reverse one.
    """
    cfg, p = model.config, model.params
    if g.shape[0] != cfg.feature_channels:
        raise ShapeError(f"decode: expected {cfg.feature_channels} channels, got {g.shape[0]}")
    f, eps = f"F_{direction}", cfg.norm_eps
    h = g
    for i in range(cfg.resnet_blocks):
        h = T.resnet_block(h, _block(p, f"{f}.r{i}"), "relu", eps)
    for stage in ("u1", "u2"):
        h = T.resize_linear(h, [2 * s for s in h.shape[1:]])
        h = T.relu(T.instance_norm(_conv(p, f"{f}.{stage}", h), eps))
    h = T.relu(T.instance_norm(_conv(p, f"{f}.c7", h), eps))
    return T.tanh(_conv(p, f"{f}.out", h))


def predict_affine(g_moving: Tensor, g_fixed: Tensor, model: FireModel, direction: str) -> Tensor:
    """Affine matrix (n, n+1) from concatenated features via GAP and two dense layers."""
    if g_moving.shape != g_fixed.shape:
        raise ShapeError(f"predict_affine: feature shapes {g_moving.shape} vs {g_fixed.shape}")
    after_two = [-(-(-(-s // 2)) // 2) for s in g_moving.shape[1:]]
    if int(np.prod(after_two)) < 2:
        raise ShapeError(
            f"predict_affine: features {g_moving.shape[1:]} are too small to normalize after "
            "two stride-2 convolutions; use larger images"
        )
    cfg, p = model.config, model.params
    a, eps, slope = f"taf_{direction}", cfg.norm_eps, cfg.leaky_slope
    n = cfg.dim
    h = T.concat([g_moving, g_fixed])
    h = T.leaky_relu(T.instance_norm(_conv(p, f"{a}.c1", h, 2), eps), slope)
    h = T.leaky_relu(T.instance_norm(_conv(p, f"{a}.c2", h, 2), eps), slope)
    # no normalization here: the pooled mean of a normalized map is always zero
    h = T.leaky_relu(_conv(p, f"{a}.c3", h, 2), slope)
    v = T.global_avg_pool(h)
    v = T.leaky_relu(T.dense(v, p[f"{a}.fc1.w"], p[f"{a}.fc1.b"]), slope)
    v = T.dense(v, p[f"{a}.fc2.w"], p[f"{a}.fc2.b"])
    return v.reshape(n, n + 1)


def predict_nonrigid(g_moving_af: Tensor, g_fixed: Tensor, model: FireModel, direction: str) -> Tensor:
    """Displacement field (n, *feature_shape), each component within +-delta_max."""
    if g_moving_af.shape != g_fixed.shape:
        raise ShapeError(f"predict_nonrigid: feature shapes {g_moving_af.shape} vs {g_fixed.shape}")
    cfg, p = model.config, model.params
    r, eps, slope = f"tnr_{direction}", cfg.norm_eps, cfg.leaky_slope
    branches = []
    for branch, h in (("mov", g_moving_af), ("fix", g_fixed)):
        for j in range(cfg.branch_depth):
            h = T.leaky_relu(T.instance_norm(_conv(p, f"{r}.{branch}{j}", h), eps), slope)
        branches.append(h)
    h = T.concat(branches)
    h = T.resnet_block(h, _block(p, f"{r}.res"), "leaky_relu", eps)
    return T.tanh(_conv(p, f"{r}.out", h)) * cfg.delta_max


# -- full pass ------------------------------------------------------------------
@dataclass
class ForwardBundle:
    x_a: Tensor
    x_b: Tensor
    g_a: Tensor
    g_b: Tensor
    affine_ab: Tensor
    affine_ba: Tensor
    field_ab: Tensor
    field_ba: Tensor
    grid_ab: Tensor  # image resolution
    grid_ba: Tensor
    grid_ab_feat: Tensor  # feature resolution
    grid_ba_feat: Tensor
    syn_b: Tensor  # F_ab(g_a)
    syn_a: Tensor  # F_ba(g_b)
    g_a_warped: Tensor  # g_a o grid_ab_feat
    g_b_warped: Tensor
    syn_t_b: Tensor  # F_ab(g_a o phi_ab)
    syn_t_a: Tensor
    g_syn_b: Tensor  # G(syn_b)
    g_syn_a: Tensor
    cyc_a: Tensor  # F_ba(G(syn_b))
    cyc_b: Tensor  # F_ab(G(syn_a))
    g_a_af: Tensor  # g_a o affine_ab (features)
    g_b_af: Tensor
    syn_af_feat_b: Tensor  # F_ab(g_a o affine_ab)
    syn_af_feat_a: Tensor
    x_a_af: Tensor  # x_a o affine_ab (image)
    x_b_af: Tensor
    syn_af_img_b: Tensor  # F_ab(G(x_a o affine_ab))
    syn_af_img_a: Tensor
    x_a_warped: Tensor  # x_a o grid_ab
    x_b_warped: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.x_a.shape[1:]


def _as_image(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def forward_pair(x_a, x_b, model: FireModel) -> ForwardBundle:
    """Every intermediate the losses need, for one (A, B) image pair."""
    dtype = model.config.dtype
    x_a, x_b = _as_image(x_a, dtype), _as_image(x_b, dtype)
    if x_a.shape != x_b.shape:
        raise ShapeError(f"forward_pair: image shapes {x_a.shape} vs {x_b.shape}")
    shape = x_a.shape[1:]
    g_a, g_b = encode(x_a, model), encode(x_b, model)
    fshape = g_a.shape[1:]

    aff_ab = predict_affine(g_a, g_b, model, "ab")
    aff_ba = predict_affine(g_b, g_a, model, "ba")
    g_a_af = sample(g_a, affine_grid(aff_ab, fshape))
    g_b_af = sample(g_b, affine_grid(aff_ba, fshape))
    u_ab = predict_nonrigid(g_a_af, g_b, model, "ab")
    u_ba = predict_nonrigid(g_b_af, g_a, model, "ba")

    grid_ab_f, grid_ba_f = compose(aff_ab, u_ab, fshape), compose(aff_ba, u_ba, fshape)
    grid_ab, grid_ba = compose(aff_ab, u_ab, shape), compose(aff_ba, u_ba, shape)
    g_a_w, g_b_w = sample(g_a, grid_ab_f), sample(g_b, grid_ba_f)

    syn_b, syn_a = decode(g_a, model, "ab"), decode(g_b, model, "ba")
    g_syn_b, g_syn_a = encode(syn_b, model), encode(syn_a, model)
    x_a_af = sample(x_a, affine_grid(aff_ab, shape))
    x_b_af = sample(x_b, affine_grid(aff_ba, shape))

    return ForwardBundle(
        x_a=x_a, x_b=x_b, g_a=g_a, g_b=g_b,
        affine_ab=aff_ab, affine_ba=aff_ba, field_ab=u_ab, field_ba=u_ba,
        grid_ab=grid_ab, grid_ba=grid_ba, grid_ab_feat=grid_ab_f, grid_ba_feat=grid_ba_f,
        syn_b=syn_b, syn_a=syn_a,
        g_a_warped=g_a_w, g_b_warped=g_b_w,
        syn_t_b=decode(g_a_w, model, "ab"), syn_t_a=decode(g_b_w, model, "ba"),
        g_syn_b=g_syn_b, g_syn_a=g_syn_a,
        cyc_a=decode(g_syn_b, model, "ba"), cyc_b=decode(g_syn_a, model, "ab"),
        g_a_af=g_a_af, g_b_af=g_b_af,
        syn_af_feat_b=decode(g_a_af, model, "ab"), syn_af_feat_a=decode(g_b_af, model, "ba"),
        x_a_af=x_a_af, x_b_af=x_b_af,
        syn_af_img_b=decode(encode(x_a_af, model), model, "ab"),
        syn_af_img_a=decode(encode(x_b_af, model), model, "ba"),
        x_a_warped=sample(x_a, grid_ab), x_b_warped=sample(x_b, grid_ba),
    )


# -- inference ------------------------------------------------------------------
@dataclass
class Registration:
    affine: np.ndarray
    field: np.ndarray  # feature resolution
    grid: np.ndarray  # image resolution, affine o non-rigid
    affine_grid: np.ndarray  # image resolution, affine only


def predict_transform(moving, fixed, model: FireModel, direction: str = "ab") -> Registration:
    """Encoder plus one direction's transform nets; nothing is recorded for backward."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")
    dtype = model.config.dtype
    with T.no_grad():
        mov, fix = _as_image(moving, dtype), _as_image(fixed, dtype)
        if mov.shape != fix.shape:
            raise ShapeError(f"register: moving {mov.shape} vs fixed {fix.shape}")
        shape = mov.shape[1:]
        g_m, g_f = encode(mov, model), encode(fix, model)
        aff = predict_affine(g_m, g_f, model, direction)
        g_m_af = sample(g_m, affine_grid(aff, g_m.shape[1:]))
        u = predict_nonrigid(g_m_af, g_f, model, direction)
        grid = compose(aff, u, shape)
        agrid = affine_grid(aff, shape)
    return Registration(aff.data.copy(), u.data.copy(), grid.data, agrid.data)


def register(moving: "Volume", fixed: "Volume", model: FireModel, direction: str = "ab"):
    """Warp ``moving`` onto ``fixed``; returns (affine, field, warped volume).

    The warped volume carries the fixed volume's spacing; moving label masks
    are carried along with nearest-neighbour lookup.
    """
    from .data import Volume

    reg = predict_transform(moving.image, fixed.image, model, direction)
    with T.no_grad():
        img = Tensor(moving.image, dtype=model.config.dtype)
        warped = sample(img, Tensor(reg.grid, dtype=img.dtype)).data.astype(np.float32)
    labels = {
        name: sample_nearest(mask[None], reg.grid)[0] for name, mask in moving.labels.items()
    }
    return reg.affine, reg.field, Volume(warped, tuple(fixed.spacing), labels)
