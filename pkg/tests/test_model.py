import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from firereg.data import Volume
from firereg.losses import total_loss
from firereg.model import (
    FireModel,
    ModelConfig,
    decode,
    encode,
    forward_pair,
    param_group,
    predict_affine,
    predict_nonrigid,
    predict_transform,
    register,
)
from firereg.tensor import ShapeError, Tensor, backward
from firereg.trainer import TrainConfig, make_optimizers, train_step
from firereg.warp import identity_affine, identity_grid

TINY = ModelConfig(base_channels=4, resnet_blocks=1)


@pytest.fixture(scope="module")
def model():
    return FireModel.initialize(ModelConfig(), seed=3)


@pytest.fixture(scope="module")
def tiny():
    return FireModel.initialize(TINY, seed=5)


def image(rng, shape=(64, 64)):
    return Tensor(rng.uniform(-1, 1, size=(1, *shape)).astype(np.float32))


def perturb_heads(model, rng, scale=0.05):
    """Move the transform heads off their identity initialization."""
    for name, p in model.params.items():
        if name.endswith(("fc2.w", "tnr_ab.out.w", "tnr_ba.out.w")):
            p.data = (p.data + rng.normal(0, scale, p.shape)).astype(p.dtype)
    return model


class TestConfig:
    def test_validation(self):
        for bad in (dict(dim=4), dict(base_channels=2), dict(delta_max=0), dict(delta_max=1.5)):
            with pytest.raises(ValueError):
                ModelConfig(**bad)

    def test_every_parameter_in_one_group(self, model):
        groups = model.groups()
        names = [n for g in groups.values() for n in g]
        assert sorted(names) == sorted(model.params)
        assert set(groups) == {"taf", "tnr", "gf"}
        assert param_group("taf_ab.fc1.w") == "taf" and param_group("F_ba.out.w") == "gf"

    def test_directions_never_share_parameters(self, model):
        ab = {n[len("taf_ab"):]: p for n, p in model.params.items() if n.startswith("taf_ab")}
        ba = {n[len("taf_ba"):]: p for n, p in model.params.items() if n.startswith("taf_ba")}
        assert ab.keys() == ba.keys()
        assert all(ab[k] is not ba[k] for k in ab)
        assert not np.array_equal(ab[".c1.w"].data, ba[".c1.w"].data)


class TestEncoderDecoder:
    def test_feature_shape(self, model, rng):
        assert encode(image(rng), model).shape == (64, 16, 16)

    def test_paper_scale_widths(self):
        m = FireModel.initialize(ModelConfig(base_channels=64), seed=0)
        assert m.params["G.c0.w"].shape == (64, 1, 7, 7)
        assert m.params["G.d1.w"].shape == (128, 64, 3, 3)
        assert m.params["G.d2.w"].shape == (256, 128, 3, 3)
        assert sum(1 for n in m.params if n.startswith("G.r") and n.endswith("c1.w")) == 4
        assert m.params["F_ab.u1.w"].shape == (128, 256, 3, 3)
        assert m.params["F_ab.u2.w"].shape == (64, 128, 3, 3)
        assert m.params["F_ab.out.w"].shape[2:] == (1, 1)

    def test_encode_is_pure(self, model, rng):
        x = image(rng)
        np.testing.assert_array_equal(encode(x, model).data, encode(Tensor(x.data.copy()), model).data)

    def test_encode_rejects_bad_extents(self, model):
        for shape in ((1, 30, 32), (1, 12, 12), (2, 32, 32)):
            with pytest.raises(ShapeError):
                encode(Tensor(np.zeros(shape, np.float32)), model)

    def test_decode_round_trip(self, model, rng):
        x = image(rng, (48, 32))
        out = decode(encode(x, model), model, "ab").data
        assert out.shape == x.shape
        assert np.all(np.abs(out) < 1)
        with pytest.raises(ShapeError):
            decode(Tensor(np.zeros((8, 4, 4), np.float32)), model, "ab")

    def test_3d_shapes(self, rng):
        m = FireModel.initialize(ModelConfig(dim=3, base_channels=4, resnet_blocks=1), seed=0)
        x = image(rng, (16, 16, 20))
        g = encode(x, m)
        assert g.shape == (16, 4, 4, 5)
        assert decode(g, m, "ba").shape == x.shape
        assert predict_affine(g, g, m, "ab").shape == (3, 4)


class TestTransformHeads:
    def test_affine_identity_at_init(self, model, rng):
        g1, g2 = encode(image(rng), model), encode(image(rng), model)
        np.testing.assert_array_equal(predict_affine(g1, g2, model, "ab").data, identity_affine(2))
        assert predict_affine(g1, g2, model, "ba").data.size == 6

    def test_affine_spatial_size_agnostic(self, tiny, rng):
        m = perturb_heads(tiny.copy(), rng)
        cf = TINY.feature_channels
        for s in (16, 20, 9):
            g = Tensor(rng.normal(size=(cf, s, s)).astype(np.float32))
            assert predict_affine(g, g, m, "ab").shape == (2, 3)
        with pytest.raises(ShapeError):
            predict_affine(Tensor(np.zeros((cf, 4, 4))), Tensor(np.zeros((cf, 5, 4))), m, "ab")
        with pytest.raises(ShapeError, match="too small"):
            predict_affine(Tensor(np.ones((cf, 4, 4))), Tensor(np.ones((cf, 4, 4))), m, "ab")

    def test_nonrigid_zero_at_init(self, model, rng):
        g = encode(image(rng), model)
        u = predict_nonrigid(g, g, model, "ab")
        assert u.shape == (2, 16, 16)
        assert np.all(u.data == 0)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_displacement_bound(self, seed):
        rng = np.random.default_rng(seed)
        m = perturb_heads(FireModel.initialize(TINY, seed=1), rng, scale=50.0)
        g = Tensor(rng.normal(size=(16, 8, 8)).astype(np.float32))
        u = predict_nonrigid(g, g, m, "ab").data
        assert np.all(np.abs(u) <= TINY.delta_max)


class TestForwardPair:
    def test_identity_at_init(self, model, rng):
        b = forward_pair(image(rng), image(rng), model)
        ident = identity_grid((64, 64)).data
        assert np.abs(b.grid_ab.data - ident).max() == 0
        assert np.abs(b.grid_ba.data - ident).max() == 0
        np.testing.assert_array_equal(b.x_a_warped.data, b.x_a.data)

    def test_shapes(self, model, rng):
        b = forward_pair(image(rng), image(rng), model)
        for name in ("x_a", "x_b", "syn_a", "syn_b", "syn_t_a", "syn_t_b", "cyc_a", "cyc_b",
                     "x_a_af", "x_b_af", "syn_af_img_a", "syn_af_img_b", "syn_af_feat_a",
                     "syn_af_feat_b", "x_a_warped", "x_b_warped"):
            assert getattr(b, name).shape == (1, 64, 64), name
        for name in ("g_a", "g_b", "g_a_warped", "g_b_warped", "g_syn_a", "g_syn_b", "g_a_af", "g_b_af"):
            assert getattr(b, name).shape == (64, 16, 16), name
        assert b.grid_ab.shape == (2, 64, 64) and b.grid_ab_feat.shape == (2, 16, 16)
        assert b.field_ab.shape == (2, 16, 16) and b.affine_ab.shape == (2, 3)

    def test_same_image_feature_terms_vanish(self, model, rng):
        x = image(rng)
        _, parts = total_loss(forward_pair(x, Tensor(x.data.copy()), model))
        assert parts.syn_fea == 0

    def test_pure(self, tiny, rng):
        m = perturb_heads(tiny.copy(), rng)
        xa, xb = image(rng, (32, 32)), image(rng, (32, 32))
        b1, b2 = forward_pair(xa, xb, m), forward_pair(xa, xb, m)
        for name in ("grid_ab", "syn_t_b", "cyc_a", "syn_af_img_a", "x_b_warped"):
            np.testing.assert_array_equal(getattr(b1, name).data, getattr(b2, name).data)

    def test_shape_mismatch(self, tiny):
        with pytest.raises(ShapeError):
            forward_pair(np.zeros((1, 32, 32)), np.zeros((1, 32, 36)), tiny)

    def test_no_dead_parameters(self, rng):
        m = FireModel.initialize(TINY, seed=11)
        xa, xb = image(rng, (32, 32)), image(rng, (32, 32))
        cfg = TrainConfig(lr_taf=1e-3, lr_tnr=1e-3, lr_gf=1e-3, model=TINY)
        # the zero-initialized heads block gradients only until their first update
        train_step(m, (xa, xb), make_optimizers(m, cfg))
        m.zero_grad()
        loss, _ = total_loss(forward_pair(xa, xb, m))
        backward(loss)
        dead = [n for n, p in m.params.items() if p.grad is None or not np.any(p.grad)]
        assert dead == []


class TestRegister:
    def test_untrained_is_identity(self, model, rng):
        mov = Volume(rng.uniform(-1, 1, (1, 32, 32)).astype(np.float32), (1.0, 1.0),
                     {"tissue": (rng.random((32, 32)) > 0.5).astype(np.uint8)})
        fix = Volume(rng.uniform(-1, 1, (1, 32, 32)).astype(np.float32), (0.5, 2.0))
        aff, field, warped = register(mov, fix, model)
        np.testing.assert_array_equal(warped.image, mov.image)
        np.testing.assert_array_equal(warped.labels["tissue"], mov.labels["tissue"])
        assert warped.spacing == (0.5, 2.0)
        np.testing.assert_array_equal(aff, identity_affine(2))
        assert np.all(field == 0)

    def test_directions_are_independent(self, tiny, rng):
        m = perturb_heads(tiny.copy(), rng)
        x = image(rng, (32, 32)).data
        ab = predict_transform(x, x, m, "ab")
        ba = predict_transform(x, x, m, "ba")
        assert not np.array_equal(ab.affine, ba.affine)

    def test_records_no_tape(self, tiny, rng):
        x = image(rng, (32, 32)).data
        reg = predict_transform(x, x, tiny)
        assert isinstance(reg.grid, np.ndarray)
        with pytest.raises(ShapeError):
            predict_transform(x, np.zeros((1, 36, 32)), tiny)
