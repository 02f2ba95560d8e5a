"""Optimizer, training step wiring, resume, and extension training."""

import numpy as np
import pytest

from patchweave.autodiff import NonFiniteError
from patchweave.coords import PatchLayout, merge_phi
from patchweave.data import CheckpointError, sample_latent, synth_dataset
from patchweave.layers import ArchConfig, ModelBundle
from patchweave.training import (
    AdamState,
    TrainConfig,
    Trainer,
    beyond_boundary_posttrain,
    config_from_meta,
    load_trainer,
    save_trainer,
)

from oracles import reference_adam_step

LAYOUT = PatchLayout(grid_h=4, grid_w=4, macro_rows=2, macro_cols=2, micro_size=4)
CFG = TrainConfig(batch=4, power_iters=1)


def _bundle(**kwargs):
    arch = ArchConfig(latent_dim=8, base_channels=8, **kwargs)
    return ModelBundle.create(arch, LAYOUT, seed=3)


def _images(seed=1, count=8):
    return synth_dataset("gradient_hue", count, LAYOUT, seed=seed).images


def test_adam_matches_reference_formula_over_steps():
    rng = np.random.default_rng(0)

    class Store:
        tensors = {"w": rng.normal(size=(5, 4)).astype(np.float32)}

    adam = AdamState(Store, ["w"])
    p = Store.tensors["w"].astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, 6):
        g = rng.normal(size=(5, 4)).astype(np.float32)
        adam.step(Store, {"w": g}, 1e-3, 0.0, 0.999, 1e-8)
        p, m, v = reference_adam_step(p, g.astype(np.float64), m, v, t, 1e-3, 0.0, 0.999, 1e-8)
        assert np.allclose(Store.tensors["w"], p, atol=1e-6)
        assert adam.t == t


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError, match="batch"):
        TrainConfig(batch=1)
    with pytest.raises(ValueError, match="sampling"):
        TrainConfig(sampling="grid")


def test_step_returns_finite_metrics_and_updates_everything():
    bundle = _bundle()
    before = {n: a.copy() for n, a in bundle.store.tensors.items()}
    trainer = Trainer(bundle, _images(), CFG, seed=0)
    metrics = trainer.step()
    for key in ("L_W", "L_GP", "L_S", "L_Q", "d_loss", "g_loss", "wall_ms"):
        assert np.isfinite(metrics[key]), key
    assert metrics["step"] == 1
    assert metrics["L_GP"] >= 0.0
    assert metrics["L_S"] >= 0.0
    changed = {n for n, a in bundle.store.tensors.items() if not np.array_equal(a, before[n])}
    for name in trainer.g_trainable:
        assert name in changed, name
    for name in bundle.d_main_names():
        # the score bias cancels in the Wasserstein gap and cannot move
        if name != "d.score.b":
            assert name in changed, name
    # norm estimates and running stats move as a side effect of the step
    assert any(n.startswith("sn.u::") for n in changed)
    assert any(n.startswith("bn.mean::") for n in changed)


def test_optimizers_own_disjoint_parameter_sets():
    trainer = Trainer(_bundle(latent_head=True), _images(), CFG, seed=0)
    g, d, q = set(trainer.adam_g.names), set(trainer.adam_d.names), set(trainer.adam_q.names)
    assert not g & d and not g & q
    assert all(n.startswith("d.q.") or n.startswith("d.block") for n in q)


def test_same_seed_runs_are_bitwise_identical():
    tr_a = Trainer(_bundle(), _images(), CFG, seed=9)
    tr_b = Trainer(_bundle(), _images(), CFG, seed=9)
    for _ in range(3):
        tr_a.step()
        tr_b.step()
    for name, arr in tr_a.bundle.store.tensors.items():
        assert np.array_equal(arr, tr_b.bundle.store.tensors[name]), name


def test_resumed_run_matches_uninterrupted_run_bitwise():
    tr_full = Trainer(_bundle(), _images(), CFG, seed=4)
    tr_full.run(6)
    tr_half = Trainer(_bundle(), _images(), CFG, seed=4)
    tr_half.run(3)
    resumed = load_trainer(save_trainer(tr_half), _images())
    assert resumed.step_count == 3
    resumed.run(3)
    assert save_trainer(resumed) == save_trainer(tr_full)


def test_config_round_trips_through_checkpoint_meta():
    cfg = TrainConfig(batch=6, lr_g=3e-4, lr_d=2e-4, gp_weight=7.5,
                      coord_weight=50.0, sampling="continuous", power_iters=2)
    trainer = Trainer(_bundle(), _images(), cfg, seed=0)
    resumed = load_trainer(save_trainer(trainer), _images())
    assert resumed.cfg == cfg


def test_load_trainer_rejects_missing_optimizer_tensors():
    trainer = Trainer(_bundle(), _images(), CFG, seed=0)
    trainer.step()
    blob = save_trainer(trainer)
    # drop one optimizer record: re-serialize without it
    from patchweave.data import read_checkpoint_bytes, write_checkpoint_bytes

    config, tensors = read_checkpoint_bytes(blob)
    victim = next(n for n in tensors if n.startswith("opt.g.m::"))
    del tensors[victim]
    with pytest.raises(CheckpointError, match="opt\\.g\\.m"):
        load_trainer(write_checkpoint_bytes(config, tensors), _images())


def test_discriminator_losses_match_independent_forward_passes():
    bundle = _bundle()
    trainer = Trainer(bundle, _images(), CFG, seed=2)
    rng = np.random.default_rng(7)
    b = CFG.batch
    x_real, c_real = trainer.real.draw(rng, b)
    c_fake, cells, _ = trainer.fake_coords.draw(rng, b)
    x_fake = trainer._generate_fakes(sample_latent(rng, b, 8), cells)
    feeds = {
        "x_real": x_real, "c_real": c_real, "x_fake": x_fake, "c_fake": c_fake,
        "eps_x": np.full((b, 1, 1, 1), 0.5, np.float32),
        "eps_c": np.full((b, 1), 0.5, np.float32),
    }
    d_loss, lw, gp, ls_real = (
        v.item() for v in trainer._dg.eval(feeds, trainer._d_outs)
    )
    score_real = bundle.discriminator_forward(x_real, c_real)["score"]
    score_fake = bundle.discriminator_forward(x_fake, c_fake)["score"]
    assert np.isclose(lw, score_real.mean() - score_fake.mean(), atol=1e-4)
    pred = bundle.discriminator_forward(x_real, c_real)["coord_pred"]
    want_ls = np.linalg.norm(pred - c_real, axis=1).mean()
    assert np.isclose(ls_real, want_ls, atol=1e-5)
    assert np.isclose(d_loss, lw + 10.0 * gp + 100.0 * ls_real, rtol=1e-5)
    assert gp > 0.0


def test_generator_loss_matches_assembled_macro_passes():
    bundle = _bundle(latent_head=True)
    cfg = TrainConfig(batch=4, latent_weight=0.5)
    trainer = Trainer(bundle, _images(), cfg, seed=5)
    rng = np.random.default_rng(11)
    b = cfg.batch
    c_macro, cells, mask = trainer.fake_coords.draw(rng, b)
    z = sample_latent(rng, b, 8)
    from patchweave.training import _flatten_cells

    feeds = {
        "z": z, "cells": _flatten_cells(cells), "c_macro": c_macro,
        "mask": np.ones((b, 1), np.float32), "count": np.array([b], np.float32),
    }
    g_loss, ls, lq = (v.item() for v in trainer._gg.eval(feeds, trainer._g_outs))
    macro = trainer._gg.eval(feeds, trainer._g_macro)
    # assemble the same macro batch from a train-mode forward pass
    z_rep = np.repeat(z[None], 4, axis=0).reshape(16, 8)
    micro = bundle.generator_forward(z_rep, _flatten_cells(cells), mode="train")
    for s in range(b):
        tiles = micro[s::b].reshape(2, 2, 3, 4, 4)
        assert np.allclose(macro[s], merge_phi(tiles), atol=1e-6)
    out = bundle.discriminator_forward(macro, c_macro)
    want_ls = np.linalg.norm(out["coord_pred"] - c_macro, axis=1).mean()
    assert np.isclose(ls, want_ls, atol=1e-5)
    want_lq = np.abs(z - out["latent_pred"]).sum(axis=1).mean()
    assert np.isclose(lq, want_lq, atol=1e-4)
    assert np.isclose(g_loss, out["score"].mean() + 100.0 * ls + 0.5 * lq, rtol=1e-4)


def test_coordinate_loss_skips_masked_samples():
    bundle = _bundle()
    trainer = Trainer(bundle, _images(), CFG, seed=6, extend=1)
    rng = np.random.default_rng(13)
    b = CFG.batch
    c_macro, cells, mask = trainer.fake_coords.draw(rng, b)
    while mask.min() == 1.0 or mask.max() == 0.0:
        c_macro, cells, mask = trainer.fake_coords.draw(rng, b)
    z = sample_latent(rng, b, 8)
    from patchweave.training import _flatten_cells

    feeds = {
        "z": z, "cells": _flatten_cells(cells), "c_macro": c_macro,
        "mask": mask.reshape(b, 1),
        "count": np.array([mask.sum()], np.float32),
    }
    _, ls, _ = (v.item() for v in trainer._gg.eval(feeds, trainer._g_outs))
    macro = trainer._gg.eval(feeds, trainer._g_macro)
    pred = bundle.discriminator_forward(macro, c_macro)["coord_pred"]
    norms = np.linalg.norm(pred - c_macro, axis=1)
    want = norms[mask > 0].sum() / mask.sum()
    assert np.isclose(ls, want, atol=1e-5)


def test_extension_training_touches_only_input_layers_of_generator():
    bundle = _bundle()
    images = _images()
    Trainer(bundle, images, CFG, seed=1).run(2)
    before = {n: a.copy() for n, a in bundle.store.tensors.items()}
    trainer = beyond_boundary_posttrain(bundle, images, CFG, steps=2, extend=1, seed=8)
    assert trainer.extend == 1
    head = set(bundle.g_first_two_layer_names())
    for name in bundle.g_param_names():
        same = np.array_equal(bundle.store.tensors[name], before[name])
        assert same != (name in head), name
    assert any(
        not np.array_equal(bundle.store.tensors[n], before[n])
        for n in bundle.d_main_names()
    )


def test_extension_training_rejects_cylindrical_and_bad_extend():
    lay = PatchLayout(grid_h=4, grid_w=4, macro_rows=2, macro_cols=2,
                      micro_size=4, topology="cylindrical")
    arch = ArchConfig(latent_dim=8, base_channels=8)
    bundle = ModelBundle.create(arch, lay, seed=0)
    images = synth_dataset("rings", 4, lay, seed=0).images
    with pytest.raises(ValueError, match="planar"):
        beyond_boundary_posttrain(bundle, images, CFG, steps=1, extend=1)
    with pytest.raises(ValueError, match="extend"):
        beyond_boundary_posttrain(_bundle(), _images(), CFG, steps=1, extend=-1)


def test_step_leaves_spectral_states_unit_norm():
    trainer = Trainer(_bundle(), _images(), CFG, seed=0)
    trainer.step()
    store = trainer.bundle.store.tensors
    names = [n for n in store if n.startswith(("sn.u::", "sn.v::"))]
    assert names
    for name in names:
        assert abs(np.linalg.norm(store[name]) - 1.0) <= 1e-6, name


def test_zero_coord_weight_freezes_coordinate_head():
    cfg = TrainConfig(batch=4, coord_weight=0.0, power_iters=1)
    trainer = Trainer(_bundle(), _images(), cfg, seed=0)
    head = {n: v.copy() for n, v in trainer.bundle.store.tensors.items()
            if n.startswith("d.a.")}
    assert head
    trainer.step()
    for name, value in head.items():
        assert np.array_equal(trainer.bundle.store.tensors[name], value), name


def test_critic_update_descends_score_gap_on_fixed_batch():
    # with the penalty and coordinate terms off, the critic loss is exactly
    # the real-minus-fake score gap, so one update must lower it on the
    # same batch
    cfg = TrainConfig(batch=4, gp_weight=0.0, coord_weight=0.0, power_iters=1)
    trainer = Trainer(_bundle(), _images(), cfg, seed=0)
    b, zd = cfg.batch, trainer.bundle.arch.latent_dim
    x_real, c_real = trainer.real.draw(trainer.rng, b)
    c_fake, cells, _ = trainer.fake_coords.draw(trainer.rng, b)
    x_fake = trainer._generate_fakes(sample_latent(trainer.rng, b, zd), cells)
    eps = trainer.rng.uniform(0.0, 1.0, b).astype(np.float32)
    feeds = {
        "x_real": x_real, "c_real": c_real, "x_fake": x_fake, "c_fake": c_fake,
        "eps_x": eps.reshape(b, 1, 1, 1), "eps_c": eps.reshape(b, 1),
    }
    vals = trainer._dg.eval(feeds, trainer._d_outs + trainer._d_grad_nodes)
    lw_before = vals[1].item()
    grads = dict(zip(trainer._d_grad_order, vals[4:]))
    trainer.adam_d.step(trainer.bundle.store, grads, cfg.lr_d,
                        cfg.beta1, cfg.beta2, cfg.adam_eps)
    lw_after = trainer._dg.eval(feeds, [trainer._d_outs[1]])[0].item()
    assert lw_after < lw_before


def test_extension_training_with_zero_rings_changes_nothing():
    bundle = _bundle()
    before = {k: v.copy() for k, v in bundle.store.tensors.items()}
    beyond_boundary_posttrain(bundle, _images(), CFG, steps=3, extend=0)
    for name, value in before.items():
        assert np.array_equal(bundle.store.tensors[name], value), name


def test_extension_scope_survives_checkpoint_round_trip():
    trainer = beyond_boundary_posttrain(_bundle(), _images(), CFG, steps=1, extend=1)
    resumed = load_trainer(save_trainer(trainer), _images())
    assert resumed.extend == 1
    assert resumed.g_trainable == resumed.bundle.g_first_two_layer_names()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_parameters_abort_the_step():
    bundle = _bundle()
    trainer = Trainer(bundle, _images(), CFG, seed=0)
    bundle.store.tensors["g.seed.W"][:] = np.inf
    with pytest.raises(NonFiniteError):
        trainer.step()
