from __future__ import annotations

import numpy as np
import pytest

from patchweave.autodiff import Graph, NonFiniteError
from patchweave.coords import PatchLayout, crop_psi, merge_phi
from patchweave.layers import (
    ArchConfig,
    ModelBundle,
    ParamStore,
    apply_cbn,
    build_discriminator,
    build_generator,
    discriminator_block_plan,
    generator_stride_plan,
    init_discriminator,
    init_generator,
    make_cbn,
    orthogonal_init,
    power_iterate,
    power_iterate_all,
    sn_weight,
    spectral_normalize,
)

from oracles import reference_batchnorm, reference_sigma

LAYOUT = PatchLayout(grid_h=4, grid_w=4, macro_rows=2, macro_cols=2, micro_size=4)
ARCH = ArchConfig(latent_dim=8, base_channels=8)


def _bundle(**kw):
    return ModelBundle.create(ArchConfig(latent_dim=8, base_channels=8, **kw), LAYOUT, seed=1)


# ------------------------------------------------------------- spectral norm

def test_spectral_normalize_sigma_matches_svd_after_50_iterations():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((64, 64))
    res = spectral_normalize(w, u=rng.standard_normal(64), iters=50)
    want = reference_sigma(w)
    assert abs(res.sigma - want) / want < 1e-3
    # the normalized weight has top singular value ~1
    assert abs(reference_sigma(res.weight) - 1.0) < 1e-3


def test_spectral_normalize_conv_weight_flattens_output_axis():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((6, 3, 3, 3)).astype(np.float32)
    res = spectral_normalize(w, iters=50)
    assert res.weight.shape == w.shape
    assert abs(reference_sigma(res.weight.reshape(6, -1)) - 1.0) < 1e-3


def test_spectral_normalize_zero_weight_is_flagged_not_divided():
    w = np.zeros((4, 4), dtype=np.float32)
    res = spectral_normalize(w, iters=5)
    assert res.degenerate and res.sigma == 0.0
    np.testing.assert_array_equal(res.weight, w)


def test_persisted_u_one_iteration_per_call_converges():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((32, 48))
    u = rng.standard_normal(32)
    sigma = 0.0
    for _ in range(60):
        res = spectral_normalize(w, u, iters=1)
        u, sigma = res.u, res.sigma
    assert abs(sigma - reference_sigma(w)) / reference_sigma(w) < 1e-3


def test_orthogonal_init_has_unit_sigma():
    rng = np.random.default_rng(3)
    for shape in [(16, 24), (24, 16), (8, 4, 3, 3)]:
        w = orthogonal_init(rng, shape)
        assert abs(reference_sigma(w.reshape(shape[0], -1)) - 1.0) < 1e-5


def test_sn_weight_graph_matches_numpy_normalization():
    store = ParamStore()
    rng = np.random.default_rng(4)
    store.add_param("w", rng.standard_normal((6, 10)).astype(np.float32))
    from patchweave.layers import _register_sn

    _register_sn(store, rng, "w")
    for _ in range(50):
        power_iterate(store, "w")
    g = Graph(params=store.tensors, dtype=np.float64)
    wn = g.eval({}, sn_weight(g, "w"))
    res = spectral_normalize(store.tensors["w"], store.tensors["sn.u::w"], iters=0)
    # same u/v pair => same sigma => same normalized weight
    want = store.tensors["w"] / np.float32(res.sigma)
    np.testing.assert_allclose(wn, want, rtol=1e-6)
    assert abs(reference_sigma(wn) - 1.0) < 1e-3


def test_sn_weight_gradient_includes_sigma_term():
    # d(sum(W/sigma))/dW must differ from the constant-sigma answer
    store = ParamStore()
    rng = np.random.default_rng(5)
    store.add_param("w", rng.standard_normal((3, 3)).astype(np.float32))
    from patchweave.layers import _register_sn

    _register_sn(store, rng, "w")
    for _ in range(50):
        power_iterate(store, "w")
    g = Graph(params=store.tensors, dtype=np.float64)
    wn = sn_weight(g, "w")
    wleaf = g.bound("w")
    grad = g.backward(g.sum(wn), [wleaf])[wleaf]
    got = g.eval({}, grad)
    res = spectral_normalize(store.tensors["w"], store.tensors["sn.u::w"], iters=0)
    naive = np.full((3, 3), 1.0 / res.sigma)
    assert not np.allclose(got, naive, atol=1e-6)
    # analytic: d sum(W/s)/dW = 1/s - (sum(W) / s^2) u v^T  with s treated via uv
    w = store.tensors["w"].astype(np.float64)
    u = store.tensors["sn.u::w"].astype(np.float64)
    v = store.tensors["sn.v::w"].astype(np.float64)
    s = float(u @ w @ v)
    want = 1.0 / s - (w.sum() / s**2) * np.outer(u, v)
    np.testing.assert_allclose(got, want, rtol=1e-5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sn_weight_zero_weight_aborts_evaluation():
    store = ParamStore()
    rng = np.random.default_rng(6)
    store.add_param("w", rng.standard_normal((4, 4)).astype(np.float32))
    from patchweave.layers import _register_sn

    _register_sn(store, rng, "w")
    g = Graph(params=store.tensors)
    wn = sn_weight(g, "w")
    store.tensors["w"] = np.zeros((4, 4), dtype=np.float32)
    with pytest.raises(NonFiniteError):
        g.eval({}, wn)


# ------------------------------------------------------ conditional batchnorm

def _cbn_fixture(channels=6, cond_dim=5, batch=4, hw=3, seed=7):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    make_cbn(store, rng, "site", channels, cond_dim)
    x = rng.standard_normal((batch, channels, hw, hw))
    cond = rng.standard_normal((batch, cond_dim))
    return store, x, cond


def _silence_mlps(store):
    # relu(x W + b) with b very negative is exactly zero, so the MLP output
    # is exactly its output bias (weights cannot be zeroed: they are
    # spectrally normalized, which is scale-free)
    store.tensors["site.gamma.fc1.b"][:] = -10.0
    store.tensors["site.beta.fc1.b"][:] = -10.0


def test_cbn_with_unit_gain_zero_shift_is_plain_batchnorm():
    store, x, cond = _cbn_fixture()
    _silence_mlps(store)
    g = Graph(params=store.tensors, dtype=np.float64)
    xn = g.placeholder("x", x.shape)
    cn = g.placeholder("c", cond.shape)
    out = g.eval({"x": x, "c": cond}, apply_cbn(g, "site", xn, cn, "train", []))
    b, c = x.shape[:2]
    want = reference_batchnorm(x, np.ones((b, c)), np.zeros((b, c)))
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_cbn_gain_and_shift_come_from_condition_mlps():
    store, x, cond = _cbn_fixture()
    _silence_mlps(store)
    store.tensors["site.gamma.fc2.b"][:] = 2.0
    store.tensors["site.beta.fc2.b"][:] = -0.3
    g = Graph(params=store.tensors, dtype=np.float64)
    xn = g.placeholder("x", x.shape)
    cn = g.placeholder("c", cond.shape)
    out = g.eval({"x": x, "c": cond}, apply_cbn(g, "site", xn, cn, "train", []))
    b, c = x.shape[:2]
    want = reference_batchnorm(x, np.full((b, c), 2.0), np.full((b, c), -0.3))
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_cbn_train_mode_records_batch_stats_sites():
    store, x, cond = _cbn_fixture()
    g = Graph(params=store.tensors)
    xn = g.placeholder("x", x.shape)
    cn = g.placeholder("c", cond.shape)
    sites = []
    out = apply_cbn(g, "site", xn, cn, "train", sites)
    assert len(sites) == 1 and sites[0].prefix == "site"
    mu = g.eval({"x": x, "c": cond}, sites[0].mean_node)
    np.testing.assert_allclose(mu.reshape(-1), x.mean(axis=(0, 2, 3)), atol=1e-5)
    assert out.shape == x.shape


def test_cbn_infer_mode_is_per_sample():
    store, x, cond = _cbn_fixture(batch=2)
    rng = np.random.default_rng(8)
    store.tensors["bn.mean::site"] = rng.standard_normal(6).astype(np.float32)
    store.tensors["bn.var::site"] = (0.5 + rng.random(6)).astype(np.float32)

    def run(xb, cb):
        g = Graph(params=store.tensors)
        xn = g.placeholder("x", xb.shape)
        cn = g.placeholder("c", cb.shape)
        return g.eval({"x": xb, "c": cb}, apply_cbn(g, "site", xn, cn, "infer", []))

    both = run(x, cond)
    np.testing.assert_allclose(both[0], run(x[:1], cond[:1])[0], atol=1e-6)
    np.testing.assert_allclose(both[1], run(x[1:], cond[1:])[0], atol=1e-6)


def test_cbn_rejects_unknown_mode():
    store, x, cond = _cbn_fixture()
    g = Graph(params=store.tensors)
    xn = g.placeholder("x", x.shape)
    cn = g.placeholder("c", cond.shape)
    with pytest.raises(ValueError):
        apply_cbn(g, "site", xn, cn, "test", [])


# ----------------------------------------------------------------- generator

def test_generator_stride_plan_sizes():
    assert generator_stride_plan(4) == [False, False]
    assert generator_stride_plan(8) == [True, False]
    assert generator_stride_plan(16) == [True, True]
    assert generator_stride_plan(32) == [True, True, True]
    with pytest.raises(ValueError):
        generator_stride_plan(6)
    with pytest.raises(ValueError):
        generator_stride_plan(2)


@pytest.mark.parametrize("s", [4, 8])
def test_generator_output_shape_and_range(s):
    layout = PatchLayout(4, 4, 2, 2, s)
    bundle = ModelBundle.create(ArchConfig(latent_dim=8, base_channels=8), layout, seed=0)
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, (3, 8)).astype(np.float32)
    c = rng.uniform(-1, 1, (3, 2)).astype(np.float32)
    out = bundle.generator_forward(z, c)
    assert out.shape == (3, 3, s, s)
    assert np.all(out > -1.0) and np.all(out < 1.0)


def test_generator_depends_on_coordinates():
    bundle = _bundle()
    z = np.zeros((1, 8), dtype=np.float32)
    a = bundle.micro_patch(z[0], np.array([-1.0, -1.0]))
    b = bundle.micro_patch(z[0], np.array([1.0, 1.0]))
    assert not np.array_equal(a, b)


def test_generator_inference_is_deterministic_and_per_sample():
    bundle = _bundle()
    rng = np.random.default_rng(1)
    z = rng.uniform(-1, 1, (4, 8)).astype(np.float32)
    c = rng.uniform(-1, 1, (4, 2)).astype(np.float32)
    full = bundle.generator_forward(z, c)
    again = bundle.generator_forward(z, c)
    assert full.tobytes() == again.tobytes()
    solo = bundle.micro_patch(z[2], c[2])
    np.testing.assert_allclose(full[2], solo, atol=1e-6)


def test_micro_patch_batch1_path_is_bitwise_stable():
    bundle = _bundle()
    z = np.linspace(-1, 1, 8).astype(np.float32)
    c = np.array([0.5, -0.5], dtype=np.float32)
    assert bundle.micro_patch(z, c).tobytes() == bundle.micro_patch(z, c).tobytes()


def test_assembly_commutes_with_cropping_bitwise():
    # weave the full canvas, then crop any macro patch: bitwise identical to
    # weaving that anchor's cells directly
    bundle = _bundle()
    z = np.random.default_rng(2).uniform(-1, 1, 8).astype(np.float32)
    canvas = bundle.generate_full(z)
    for anchor in LAYOUT.anchors():
        block_coords = LAYOUT.micro_coord_matrix(anchor)
        patches = np.stack(
            [
                np.stack([bundle.micro_patch(z, block_coords[n, m]) for m in range(2)])
                for n in range(2)
            ]
        )
        direct = merge_phi(patches)
        assert crop_psi(canvas, anchor, LAYOUT).tobytes() == direct.tobytes()


def test_same_seed_same_parameters():
    a = ModelBundle.create(ARCH, LAYOUT, seed=5)
    b = ModelBundle.create(ARCH, LAYOUT, seed=5)
    assert sorted(a.store.tensors) == sorted(b.store.tensors)
    for name, val in a.store.tensors.items():
        np.testing.assert_array_equal(val, b.store.tensors[name])


def test_generate_full_shapes_with_extension():
    bundle = _bundle()
    z = np.zeros(8, dtype=np.float32)
    assert bundle.generate_full(z).shape == (3, 16, 16)
    assert bundle.generate_full(z, extend=1).shape == (3, 24, 24)


# ------------------------------------------------------------- discriminator

def test_discriminator_block_plan_depths():
    arch = ArchConfig(latent_dim=8, base_channels=8)
    plan8 = discriminator_block_plan(arch, LAYOUT)  # 8x8 macro
    assert [p[0] for p in plan8] == ["d.block0", "d.block1"]
    assert plan8[0][4] is True and plan8[1][4] is False
    assert plan8[1][3] == 16  # doubled
    layout16 = PatchLayout(8, 8, 4, 4, 4)
    plan16 = discriminator_block_plan(arch, layout16)
    assert [p[4] for p in plan16] == [True, True, False]
    assert plan16[-1][3] == 32


def test_discriminator_shapes_and_heads():
    bundle = _bundle(latent_head=True)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (5, 3, 8, 8)).astype(np.float32)
    c = rng.uniform(-1, 1, (5, 2)).astype(np.float32)
    out = bundle.discriminator_forward(x, c)
    assert out["score"].shape == (5, 1)
    assert out["coord_pred"].shape == (5, 2)
    assert np.all(np.abs(out["coord_pred"]) < 1.0)  # tanh range
    assert out["latent_pred"].shape == (5, 8)
    assert out["pooled"].shape == (5, 16)


def test_projection_term_conditions_score_on_coordinates():
    bundle = _bundle()
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    ca = np.array([[-1.0, -1.0], [0.0, 0.0]], dtype=np.float32)
    cb = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
    sa = bundle.discriminator_forward(x, ca)["score"]
    sb = bundle.discriminator_forward(x, cb)["score"]
    assert abs(sa[0, 0] - sb[0, 0]) > 1e-7  # coordinate changed -> score changed
    np.testing.assert_allclose(sa[1], sb[1], atol=1e-7)  # same coordinate -> same score


def test_projection_flag_off_ignores_coordinates():
    bundle = _bundle(projection=False)
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    unconditioned = bundle.discriminator_forward(x)
    assert "d.embed.W" not in bundle.store.tensors
    assert unconditioned["score"].shape == (2, 1)
    assert unconditioned["latent_pred"] is None


def test_every_weight_is_spectrally_normalized():
    bundle = _bundle(latent_head=True)
    weights = [n for n in bundle.store.trainable if n.endswith(".W")]
    assert set(bundle.store.sn_names) == set(weights)
    assert len(weights) > 20  # generator MLPs, convs, heads all covered
    power_iterate_all(bundle.store, iters=50)
    for name in bundle.store.sn_names:
        w = bundle.store.tensors[name]
        res = spectral_normalize(w, bundle.store.tensors[f"sn.u::{name}"], iters=0)
        effective = w / res.sigma
        assert abs(reference_sigma(effective.reshape(effective.shape[0], -1)) - 1.0) < 1e-3, name


def test_first_two_layer_names_cover_seed_and_first_block_only():
    bundle = _bundle()
    names = bundle.g_first_two_layer_names()
    assert "g.seed.W" in names
    assert any(n.startswith("g.block0.cbn1") for n in names)
    assert not any(n.startswith("g.block1") for n in names)
    assert not any(n.startswith("g.out") for n in names)


def test_q_route_covers_head_and_trunk_but_not_score():
    bundle = _bundle(latent_head=True)
    q_route = bundle.q_route_names()
    assert any(n.startswith("d.q.") for n in q_route)
    assert any(n.startswith("d.block") for n in q_route)
    assert not any(n.startswith("d.score") or n.startswith("d.a.") for n in q_route)
    main = bundle.d_main_names()
    assert not any(n.startswith("d.q.") for n in main)
