import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cconvfluid.contconv import ConvGeometry
from cconvfluid.core import ParticleSet
from cconvfluid.network import (
    Model,
    ModelConfig,
    check_params,
    forward,
    forward_arrays,
    forward_backward,
    fuse_features,
    init_params,
    input_features,
    param_shapes,
    particle_selector,
    taim_forward,
    tape_signature,
)
from oracles import naive_network, naive_selector, naive_taim

R = 0.1125
SMALL = ModelConfig(width=4, selector_width=2)


def _random_params(cfg, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(scale=scale, size=s) for k, (_, s) in param_shapes(cfg).items()}


def _cloud(rng, n, side=0.12):
    return rng.random((n, 3)) * side


# --------------------------------------------------------------------------- input features


def test_input_feature_rows():
    s = ParticleSet([[0, 0, 0], [1, 1, 1]], [[0, 0, 0], [0, -0.2, 0]], [[0, 0, 0]], [[0, 1, 0]])
    f, sf = input_features(s)
    np.testing.assert_array_equal(f[0], [1, 0, 0, 0])
    np.testing.assert_allclose(f[1], [1, 0, -0.2, 0])
    np.testing.assert_array_equal(sf[0], [1, 0, 1, 0])


# --------------------------------------------------------------------------- selector


def test_selector_zero_input_gives_half(rng):
    P = _random_params(SMALL, 0)
    P["fusion0.selector.dense.bias"] = np.zeros(1)
    w = particle_selector(P, "fusion0.selector", np.zeros((6, 4)), _cloud(rng, 6), R)
    np.testing.assert_array_equal(w, 0.5)


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 20.0))
def test_selector_output_in_open_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    P = _random_params(SMALL, seed, scale)
    w = particle_selector(P, "fusion0.selector", rng.normal(size=(12, 4)), _cloud(rng, 12), R)
    assert ((w > 0) & (w < 1)).all()


def test_selector_single_particle_matches_hand_composition(rng):
    P = _random_params(SMALL, 3)
    x = _cloud(rng, 1)
    f = rng.normal(size=(1, 4))
    np.testing.assert_allclose(particle_selector(P, "fusion1.selector", f, x, R),
                               naive_selector(P, "fusion1.selector", x, f, R), rtol=1e-12)


# --------------------------------------------------------------------------- fusion


def test_fusion_of_equal_operands_is_identity(rng):
    P = _random_params(SMALL, 1)
    F = rng.normal(size=(10, 4))
    np.testing.assert_allclose(fuse_features(F, F, _cloud(rng, 10), P), F, rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("bias, pick", [(-50.0, 0), (50.0, 1)])
def test_fusion_saturated_selector(rng, bias, pick):
    P = _random_params(SMALL, 2)
    P["fusion0.selector.dense.weight"] = np.zeros((2, 1))
    P["fusion0.selector.dense.bias"] = np.array([bias])
    a, b = rng.normal(size=(2, 10, 4))
    out = fuse_features(a, b, _cloud(rng, 10), P)
    assert np.abs(out - (a, b)[pick]).max() <= 1e-8 * np.abs(a - b).max()


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_fusion_envelope(seed, n):
    rng = np.random.default_rng(seed)
    P = _random_params(SMALL, seed, 2.0)
    a, b = rng.normal(size=(2, n, 4)) * rng.uniform(0.1, 10)
    out = fuse_features(a, b, _cloud(rng, n), P)
    assert ((out >= np.minimum(a, b)) & (out <= np.maximum(a, b))).all()


# --------------------------------------------------------------------------- type-aware input


@pytest.mark.parametrize("variant", ["cconv", "ascc"])
def test_taim_without_solids_blends_with_zero_lift(rng, variant):
    cfg = ModelConfig(width=4, selector_width=2)
    P = init_params(cfg, 0, np.float64)
    path = "main" if variant == "cconv" else "cons"
    x = _cloud(rng, 6)
    ff = np.concatenate([np.ones((6, 1)), rng.normal(size=(6, 3))], 1)
    out = taim_forward(ff, np.zeros((0, 4)), x, np.zeros((0, 3)), P, variant, R)
    # zero-initialised selector heads give w = 0.5 and zero biases give a zero solid lift
    ref = naive_taim(P, path, x, ff, np.zeros((0, 3)), np.zeros((0, 4)), R)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


def test_taim_zero_selector_heads_average_the_lifts(rng):
    cfg = ModelConfig(width=4, selector_width=2)
    P = _random_params(cfg, 4)
    for s in ("sel1", "sel2"):
        P[f"taim_main.{s}.dense.weight"] = np.zeros((2, 1))
        P[f"taim_main.{s}.dense.bias"] = np.zeros(1)
    P2 = dict(P)
    x, sp = _cloud(rng, 8), _cloud(rng, 8)
    ff = np.concatenate([np.ones((8, 1)), rng.normal(size=(8, 3))], 1)
    sf = np.concatenate([np.ones((8, 1)), rng.normal(size=(8, 3))], 1)
    out = taim_forward(ff, sf, x, sp, P2, "cconv", R)
    from oracles import naive_conv, relu

    lf = relu(naive_conv(ff, x, x, P["taim_main.lift_fluid.kernel"], R) + P["taim_main.lift_fluid.bias"])
    ls = relu(naive_conv(sf, sp, x, P["taim_main.lift_solid.kernel"], R) + P["taim_main.lift_solid.bias"])
    np.testing.assert_allclose(out, 0.5 * (lf + ls), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("variant, path", [("cconv", "main"), ("ascc", "cons")])
def test_taim_matches_naive_reference(rng, variant, path):
    P = _random_params(SMALL, 5)
    x, sp = _cloud(rng, 8), _cloud(rng, 8)
    ff = np.concatenate([np.ones((8, 1)), rng.normal(size=(8, 3))], 1)
    sf = np.concatenate([np.ones((8, 1)), rng.normal(size=(8, 3))], 1)
    out = taim_forward(ff, sf, x, sp, P, variant, R)
    np.testing.assert_allclose(out, naive_taim(P, path, x, ff, sp, sf, R), rtol=1e-10, atol=1e-12)


# --------------------------------------------------------------------------- full model


def test_params_init_and_check():
    P = init_params(ModelConfig(), 0)
    assert all(v.dtype == np.float32 for v in P.values())
    assert not P["head.weight"].any() and not P["head.bias"].any()
    bad = dict(P)
    bad.pop("main.conv2.kernel")
    with pytest.raises(ValueError, match="main.conv2.kernel"):
        check_params(bad, ModelConfig())
    with pytest.raises(ValueError, match="taim_main.lift_fluid.kernel"):
        check_params(P, ModelConfig(width=64))


def test_zero_head_gives_zero_dx(rng):
    m = Model.init(ModelConfig(), 0)
    s = ParticleSet(_cloud(rng, 50, 0.3), rng.normal(size=(50, 3)), _cloud(rng, 20, 0.3), np.tile([0, 1, 0], (20, 1)))
    assert not m.predict(s).any()


def test_single_particle_matches_hand_evaluation(rng):
    P = _random_params(SMALL, 6)
    x, v = _cloud(rng, 1), rng.normal(size=(1, 3))
    dx, _ = forward_arrays(x, v, np.zeros((0, 3)), np.zeros((0, 3)), P, SMALL)
    np.testing.assert_allclose(dx, naive_network(P, x, v, np.zeros((0, 3)), np.zeros((0, 3)), SMALL), rtol=1e-10)


def test_small_scene_matches_naive_network(rng):
    P = _random_params(SMALL, 7, 0.4)
    x, v = _cloud(rng, 7), rng.normal(size=(7, 3))
    sp = _cloud(rng, 5)
    sn = rng.normal(size=(5, 3))
    sn /= np.linalg.norm(sn, axis=1, keepdims=True)
    dx, _ = forward_arrays(x, v, sp, sn, P, SMALL)
    ref = naive_network(P, x, v, sp, sn, SMALL)
    np.testing.assert_allclose(dx, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_permutation_equivariance(rng):
    P = _random_params(ModelConfig(width=8, selector_width=4), 8, 0.3)
    cfg = ModelConfig(width=8, selector_width=4)
    x, v = _cloud(rng, 30, 0.2), rng.normal(size=(30, 3))
    sp, sn = _cloud(rng, 10, 0.2), np.tile([0.0, 1.0, 0.0], (10, 1))
    perm = rng.permutation(30)
    dx, _ = forward_arrays(x, v, sp, sn, P, cfg)
    dxp, _ = forward_arrays(x[perm], v[perm], sp, sn, P, cfg)
    np.testing.assert_allclose(dxp, dx[perm], rtol=1e-10, atol=1e-12 * np.abs(dx).max())


def test_forward_accepts_particle_set(rng):
    m = Model.init(SMALL, 0)
    s = ParticleSet(_cloud(rng, 5), np.zeros((5, 3)))
    dx, tape = forward(s, m.params, SMALL)
    assert dx.shape == (5, 3) and dx.dtype == np.float32


# --------------------------------------------------------------------------- backward


def _instance(rng, n=6, m=4):
    x, v = _cloud(rng, n, 0.1), rng.normal(size=(n, 3))
    sp = _cloud(rng, m, 0.1)
    sn = np.tile([0.0, 1.0, 0.0], (m, 1))
    return x, v, sp, sn


def test_zero_upstream_gradient_gives_zero(rng):
    P = _random_params(SMALL, 9)
    x, v, sp, sn = _instance(rng)
    _, tape = forward_arrays(x, v, sp, sn, P, SMALL)
    g, gpos, gvel = forward_backward(tape, np.zeros((6, 3)), positions=True)
    assert all(not a.any() for a in g.values())
    assert not gpos.any() and not gvel.any()


def test_frozen_tensor_gradient_is_exactly_zero(rng):
    P = _random_params(SMALL, 10)
    x, v, sp, sn = _instance(rng)
    _, tape = forward_arrays(x, v, sp, sn, P, SMALL)
    g, _, _ = forward_backward(tape, rng.normal(size=(6, 3)), frozen=("main.conv2.kernel",))
    assert not g["main.conv2.kernel"].any()
    assert g["main.conv3.kernel"].any()


def _directional_fd(run, arr, d, h=1e-4, min_h=1e-8):
    """Central difference along ``d``; the step shrinks until both stencil points take the
    same discrete branches (ReLU masks, neighbour sets, voxel cells) as the centre."""
    old = arr.copy()
    ref = run()[1]
    while True:
        arr[...] = old + h * d
        fp, sp = run()
        arr[...] = old - h * d
        fm, sm = run()
        arr[...] = old
        if (sp == ref and sm == ref) or h / 10 < min_h:
            return (fp - fm) / (2 * h)
        h /= 10


def test_all_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    P = _random_params(SMALL, 11, 0.4)
    x, v, sp, sn = _instance(rng)
    gdx = rng.normal(size=(6, 3))

    def run():
        dx, tape = forward_arrays(x, v, sp, sn, P, SMALL)
        return float(np.sum(dx * gdx)), tape_signature(tape)

    floor = 1e-8 * (1 + abs(run()[0]))  # finite-difference round-off level
    _, tape = forward_arrays(x, v, sp, sn, P, SMALL)
    g, gpos, gvel = forward_backward(tape, gdx, positions=True)
    targets = [(P[k], g[k]) for k in P] + [(x, gpos), (v, gvel)]
    for arr, an in targets:
        # direction along the analytic gradient plus noise, so the check is not vacuous
        d = an / (np.linalg.norm(an) + 1e-300) + rng.normal(size=arr.shape) / np.sqrt(arr.size)
        fd = _directional_fd(run, arr, d)
        ad = float(np.sum(an * d))
        assert abs(fd - ad) <= 1e-5 * max(abs(fd), abs(ad), floor)
