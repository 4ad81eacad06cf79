import numpy as np
import pytest

from _cases import micro_batch
from _gradcheck import check
from pointrecon import backprojection as bp
from pointrecon import model as M
from pointrecon.autodiff import Tensor
from pointrecon.autodiff import tensor as T
from pointrecon.backprojection import FeatureMap2D, FeatureVolume, GuidanceStrategy
from pointrecon.geometry import GridSpec, Intrinsics, look_at
from pointrecon.training import batch_loss

TOL = 1e-4


def zero_params(params):
    for t in params.parameters():
        t.data = np.zeros_like(t.data)


def test_feature_shapes(rng):
    params = M.init_model()
    for h, w in ((16, 24), (32, 8)):
        fc, ff = M.extract_features(rng.normal(size=(2, 3, h, w)), params)
        assert len(fc) == 2 and fc[0].data.shape == (16, h // 4, w // 4) and fc[0].stride == 4
        assert ff[0].data.shape == (16, h // 2, w // 2) and ff[0].stride == 2
    with pytest.raises(ValueError):
        M.extract_features(rng.normal(size=(1, 3, 10, 12)), params)


def test_zero_weights_give_zero_features(rng):
    params = M.init_model()
    zero_params(params)
    fc, ff = M.extract_features(rng.normal(size=(1, 3, 16, 16)), params)
    assert all(np.all(f.data == 0) for f in fc + ff)


def test_feature_nets_have_disjoint_storage():
    params = M.init_model()
    a = params.nets["omega_c"]["c1"].params["weight"]
    b = params.nets["omega_f"]["c1"].params["weight"]
    assert a.shape == b.shape and a is not b and not np.shares_memory(a.data, b.data)
    assert M.architecture(params.config)["omega_c"] == M.architecture(params.config)["omega_f"]


@pytest.mark.parametrize("level", [2, 4])
def test_receptive_field_locality(rng, level):
    params = M.init_model(seed=3)
    img = rng.normal(size=(1, 3, 32, 32))
    bumped = img.copy()
    py, px = 13, 18
    bumped[0, 1, py, px] += 1.0
    net = "omega_f" if level == 2 else "omega_c"
    a = M.feature_net(params.nets[net], Tensor(img), level).data[0]
    b = M.feature_net(params.nets[net], Tensor(bumped), level).data[0]
    changed = np.argwhere(np.any(a != b, axis=0))
    assert len(changed)
    r = M.receptive_radius(level)
    # output cell (i, j) covers input pixels around (i*level, j*level)
    for i, j in changed:
        assert abs(i * level - py) <= r and abs(j * level - px) <= r


@pytest.mark.parametrize("dims", [(8, 8, 8), (5, 6, 7)])
def test_encode_preserves_dims(rng, dims):
    params = M.init_model()
    spec = GridSpec((0, 0, 0), 0.04, dims)
    cin = params.config.volume_channels
    vg = FeatureVolume(spec, rng.normal(size=dims + (cin,)), np.ones(dims))
    vpsi, logits = M.encode_volume(vg, params)
    assert vpsi.data.shape == dims + (32,) and logits.shape == dims
    again, _ = M.encode_volume(vg, params)
    assert np.array_equal(again.data, vpsi.data)
    bad = FeatureVolume(spec, rng.normal(size=dims + (cin + 1,)), np.ones(dims))
    with pytest.raises(ValueError, match="channels"):
        M.encode_volume(bad, params)


def test_psi_gradients_on_small_volume(rng):
    params = M.init_model(seed=1)
    x = Tensor(rng.normal(size=(1, params.config.volume_channels, 8, 8, 8)))
    R = rng.normal(size=(1, 32, 8, 8, 8))
    psi = [t for k, t in params.named().items() if k.startswith("psi.")]
    for t in psi:
        t.requires_grad = True

    def fn():
        return T.sum_all(T.mul(M.psi_forward(params.nets["psi"], x), Tensor(R)))

    assert check(fn, psi, max_entries=6) < TOL


def test_predict_without_pb_ignores_fine_features(rng):
    params = M.init_model()
    spec = GridSpec((0, 0, 0), 0.1, (4, 4, 4))
    vpsi = FeatureVolume(spec, rng.normal(size=(4, 4, 4, 32)), np.ones((4, 4, 4)))
    K = Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16)
    cams = [(K, look_at((0.15, 0.15, -1.0), (0.15, 0.15, 0.15)))]
    pts = rng.uniform(0, 0.3, size=(20, 3))
    f1 = [FeatureMap2D(rng.normal(size=(16, 8, 8)), 2)]
    f2 = [FeatureMap2D(rng.normal(size=(16, 8, 8)), 2)]
    a = M.predict_tsdf(pts, vpsi, f1, cams, params, enable_pb=False)
    b = M.predict_tsdf(pts, vpsi, f2, cams, params, enable_pb=False)
    assert np.array_equal(a, b)
    c = M.predict_tsdf(pts, vpsi, f1, cams, params, enable_pb=True)
    d = M.predict_tsdf(pts, vpsi, f2, cams, params, enable_pb=True)
    assert not np.array_equal(c, d)


def test_constant_volume_gives_position_independent_output(rng):
    params = M.init_model()
    spec = GridSpec((0, 0, 0), 0.1, (4, 4, 4))
    vpsi = FeatureVolume(spec, np.broadcast_to(rng.normal(size=32), (4, 4, 4, 32)).copy(), np.ones((4, 4, 4)))
    out = M.predict_tsdf(spec.centers(), vpsi, [], [], params, enable_pb=False)
    assert np.allclose(out, out[0], atol=1e-12)


def test_pb_gives_sub_voxel_variation(rng):
    params = M.init_model(seed=2)
    spec = GridSpec((0, 0, 0), 0.1, (4, 4, 4))
    vpsi = FeatureVolume(spec, np.broadcast_to(rng.normal(size=32), (4, 4, 4, 32)).copy(), np.ones((4, 4, 4)))
    K = Intrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    cams = [(K, look_at((0.15, 0.15, -1.0), (0.15, 0.15, 0.15)))]
    ff = [FeatureMap2D(rng.normal(size=(16, 16, 16)), 2)]
    inside = 0.1 + 0.1 * rng.random((8, 3))
    out = M.predict_tsdf(inside, vpsi, ff, cams, params, enable_pb=True)
    assert np.var(out) > 0


def test_theta_s_width_is_fixed_across_pb():
    for variant in bp.VARIANTS:
        cfg = M.ModelConfig(strategy=GuidanceStrategy(variant))
        spec = M.architecture(cfg)["theta_s"]["fc0"]
        assert spec.in_channels == cfg.c_fine + cfg.c_psi


def test_loss_examples():
    assert M.tsdf_transform(0.0) == 0
    assert abs(M.tsdf_transform(np.e - 1) - 1) < 1e-12
    assert abs(M.tsdf_transform(-(np.e - 1)) + 1) < 1e-12
    total, l_s, l_o = M.compute_loss([0.0], [0.04], [0.0], [1.0])
    assert l_s == pytest.approx(np.log(1.04), abs=1e-12)
    assert abs(l_o - np.log(2)) < 1e-12 and total == pytest.approx(l_s + l_o)
    s = np.array([0.3, -0.2, 1.0])
    _, l_s, l_o = M.compute_loss(s, s, [30.0, -30.0], [1.0, 0.0])
    assert l_s == 0 and l_o < 1e-6
    with pytest.raises(ValueError):
        M.compute_loss([0.0, 1.0], [0.0], [0.0], [1.0])


@pytest.mark.parametrize("enable_pb", [False, True])
def test_end_to_end_gradients(enable_pb):
    rng = np.random.default_rng(5)
    params = M.init_model(seed=4)
    batch = micro_batch(rng)
    tensors = params.parameters()
    if not enable_pb:
        tensors = [t for k, t in params.named().items() if not k.startswith("omega_f.")]

    def fn():
        return batch_loss(params, batch, enable_pb)[0]

    assert check(fn, tensors, max_entries=4) < TOL


def test_load_arrays_checks_shapes():
    params = M.init_model()
    arrays = {k: t.data for k, t in params.named().items()}
    other = M.init_model(seed=9)
    other.load_arrays(arrays)
    assert all(np.array_equal(other.named()[k].data, v) for k, v in arrays.items())
    bad = dict(arrays)
    bad["theta_o.fc0.bias"] = np.zeros(3)
    with pytest.raises(ValueError, match="theta_o.fc0.bias"):
        other.load_arrays(bad)
    del bad["theta_o.fc0.bias"]
    with pytest.raises(ValueError, match="missing"):
        other.load_arrays(bad)
