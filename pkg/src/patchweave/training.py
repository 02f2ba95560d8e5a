"""Adversarial training loop for the coordinate-conditioned patch generator.

Each step alternates one discriminator update and one generator update.  The
critic objective is the Wasserstein gap plus a gradient penalty (unit-norm
target on interpolates, interpolation weight on the generated side) plus a
coordinate regression term on real patches.  The generator objective pushes
its macro patch scores plus the same coordinate regression on generated
patches, plus an optional latent reconstruction term when the latent head is
enabled.

Both update graphs are built once; every step re-evaluates them with fresh
feeds.  All randomness flows through one generator-owned RNG, so a run is a
pure function of (parameters, config, seed), and checkpoints capture enough
state (weights, norm/stat buffers, optimizer moments, RNG) to resume exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Graph
from .data import (
    CheckpointError,
    CoordSampler,
    MacroSampler,
    load_checkpoint,
    sample_latent,
    save_checkpoint,
)
from .layers import (
    ModelBundle,
    apply_bn_updates,
    build_discriminator,
    build_generator,
    power_iterate_all,
)


@dataclass
class TrainConfig:
    batch: int = 32
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gp_weight: float = 10.0
    coord_weight: float = 100.0
    latent_weight: float = 1.0
    sampling: str = "discrete"
    power_iters: int = 1

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (batch norm needs real statistics)")
        if self.sampling not in ("discrete", "continuous"):
            raise ValueError(f"sampling must be discrete|continuous, got {self.sampling!r}")


class AdamState:
    """First/second moment buffers for a fixed set of named tensors."""

    def __init__(self, store, names):
        self.names = list(names)
        self.m = {n: np.zeros_like(store.tensors[n]) for n in self.names}
        self.v = {n: np.zeros_like(store.tensors[n]) for n in self.names}
        self.t = 0

    def step(self, store, grads: dict[str, np.ndarray], lr: float,
             beta1: float, beta2: float, eps: float):
        """One bias-corrected update, applied to the store tensors in place."""
        self.t += 1
        c1 = 1.0 - beta1**self.t
        c2 = 1.0 - beta2**self.t
        for name in self.names:
            g = grads[name].astype(np.float32)
            m, v = self.m[name], self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p = store.tensors[name]
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(np.float32)


def _flatten_cells(cells: np.ndarray) -> np.ndarray:
    """[B, N, M, cd] -> [N*M*B, cd] with cell k occupying rows k*B..(k+1)*B."""
    return np.ascontiguousarray(
        cells.transpose(1, 2, 0, 3).reshape(-1, cells.shape[3]), dtype=np.float32
    )


class Trainer:
    """Holds the model, samplers, optimizers, and the two update graphs.

    ``extend`` widens the grid the generated patches are anchored on (the real
    sampler always stays on the core canvas); the coordinate regression term
    skips generated patches whose macro coordinate leaves [-1, 1].
    ``g_trainable`` restricts which generator tensors the optimizer touches
    (used to fine-tune only the early layers during extension training).
    """

    def __init__(self, bundle: ModelBundle, images: np.ndarray, cfg: TrainConfig,
                 seed: int = 0, extend: int = 0, g_trainable: list[str] | None = None):
        if extend and bundle.layout.topology != "planar":
            raise ValueError("extended-grid training supports planar layouts only")
        self.bundle = bundle
        self.cfg = cfg
        self.extend = extend
        self.seed = seed
        self.real = MacroSampler(images, bundle.layout, cfg.sampling)
        self.fake_coords = CoordSampler(bundle.layout, cfg.sampling, extend)
        self.rng = np.random.default_rng([seed, 0x7EA1])
        self.step_count = 0
        self.g_trainable = list(g_trainable) if g_trainable is not None else bundle.g_param_names()
        self._build_graphs()
        store = bundle.store
        self.adam_g = AdamState(store, self.g_trainable)
        self.adam_d = AdamState(store, bundle.d_main_names())
        self.adam_q = AdamState(store, bundle.q_route_names()) if bundle.arch.latent_head else None

    # ------------------------------------------------------------ graph build

    def _build_graphs(self):
        arch, lay, cfg = self.bundle.arch, self.bundle.layout, self.cfg
        b = cfg.batch
        n, m = lay.macro_rows, lay.macro_cols
        s = lay.micro_size
        zd, cd = arch.latent_dim, lay.coord_dim
        mh, mw = lay.macro_h, lay.macro_w
        store = self.bundle.store.tensors

        # generator update graph: micro patches -> assembled macro -> critic
        gg = Graph(params=store)
        z = gg.placeholder("z", (b, zd))
        cells = gg.placeholder("cells", (n * m * b, cd))
        c_macro = gg.placeholder("c_macro", (b, cd))
        mask = gg.placeholder("mask", (b, 1))
        count = gg.placeholder("count", (1,))
        z_rep = gg.reshape(gg.broadcast_to(gg.reshape(z, (1, b, zd)), (n * m, b, zd)),
                           (n * m * b, zd))
        self._bn_sites = []
        micro = build_generator(gg, arch, lay, z_rep, cells, "train", self._bn_sites)
        rows = []
        for r in range(n):
            parts = [gg.slice(micro, ((r * m + k) * b, 0, 0, 0), (b, 3, s, s))
                     for k in range(m)]
            rows.append(parts[0] if m == 1 else gg.concat(parts, 3))
        macro = rows[0] if n == 1 else gg.concat(rows, 2)
        disc = build_discriminator(gg, arch, lay, macro, c_macro)
        norms = gg.l2norm(gg.sub(disc.coord_pred, c_macro), (1,), keepdims=True)
        ls = gg.mul(gg.reshape(gg.sum(gg.mul(norms, mask)), (1,)), gg.reciprocal(count))
        g_loss = gg.add(gg.reshape(gg.mean(disc.score), (1,)), gg.scale(ls, cfg.coord_weight))
        lq = None
        if arch.latent_head:
            lq = gg.reshape(gg.scale(gg.sum(gg.abs(gg.sub(z, disc.latent_pred))), 1.0 / b), (1,))
            g_loss = gg.add(g_loss, gg.scale(lq, cfg.latent_weight))
        g_wrt = [gg.bound(name) for name in self.g_trainable]
        g_grads = gg.backward(g_loss, g_wrt)
        self._gg = gg
        self._g_macro = macro
        self._bn_nodes = [node for site in self._bn_sites
                          for node in (site.mean_node, site.var_node)]
        self._g_outs = [g_loss, ls, lq if lq is not None else ls]
        self._g_grad_order = list(self.g_trainable)
        self._g_grad_nodes = [g_grads[node] for node in g_wrt]
        self._q_grad_nodes = []
        self._q_grad_order = []
        if arch.latent_head:
            q_wrt = [gg.bound(name) for name in self.bundle.q_route_names()]
            q_grads = gg.backward(gg.scale(lq, cfg.latent_weight), q_wrt)
            self._q_grad_order = self.bundle.q_route_names()
            self._q_grad_nodes = [q_grads[node] for node in q_wrt]

        # discriminator update graph: real/fake/interpolate critic passes
        dg = Graph(params=store)
        x_real = dg.placeholder("x_real", (b, 3, mh, mw))
        c_real = dg.placeholder("c_real", (b, cd))
        x_fake = dg.placeholder("x_fake", (b, 3, mh, mw))
        c_fake = dg.placeholder("c_fake", (b, cd))
        eps_x = dg.placeholder("eps_x", (b, 1, 1, 1))
        eps_c = dg.placeholder("eps_c", (b, 1))
        ex = dg.broadcast_to(eps_x, (b, 3, mh, mw))
        ox = dg.broadcast_to(dg.add_scalar(dg.scale(eps_x, -1.0), 1.0), (b, 3, mh, mw))
        x_mix = dg.add(dg.mul(x_fake, ex), dg.mul(x_real, ox))
        ec = dg.broadcast_to(eps_c, (b, cd))
        oc = dg.broadcast_to(dg.add_scalar(dg.scale(eps_c, -1.0), 1.0), (b, cd))
        c_mix = dg.add(dg.mul(c_fake, ec), dg.mul(c_real, oc))
        d_real = build_discriminator(dg, arch, lay, x_real, c_real)
        d_fake = build_discriminator(dg, arch, lay, x_fake, c_fake)
        d_mix = build_discriminator(dg, arch, lay, x_mix, c_mix)
        lw = dg.sub(dg.mean(d_real.score), dg.mean(d_fake.score))
        grad_mix = dg.backward(dg.sum(d_mix.score), [x_mix])[x_mix]
        gp = dg.mean(dg.square(dg.add_scalar(dg.l2norm(grad_mix, (1, 2, 3)), -1.0)))
        ls_real = dg.mean(dg.l2norm(dg.sub(d_real.coord_pred, c_real), (1,)))
        d_loss = dg.add(dg.add(lw, dg.scale(gp, cfg.gp_weight)),
                        dg.scale(ls_real, cfg.coord_weight))
        d_wrt = [dg.bound(name) for name in self.bundle.d_main_names()]
        d_grads = dg.backward(d_loss, d_wrt)
        self._dg = dg
        self._d_outs = [d_loss, lw, gp, ls_real]
        self._d_grad_order = self.bundle.d_main_names()
        self._d_grad_nodes = [d_grads[node] for node in d_wrt]

    # ----------------------------------------------------------------- phases

    def _generate_fakes(self, z: np.ndarray, cells: np.ndarray) -> np.ndarray:
        """Evaluate the assembled macro batch in train mode, folding the batch
        statistics this evaluation used into the running stats."""
        vals = self._gg.eval({"z": z, "cells": _flatten_cells(cells)},
                             [self._g_macro] + self._bn_nodes)
        self._fold_bn(vals[1:])
        return vals[0]

    def _fold_bn(self, bn_values):
        lookup = dict(zip(self._bn_nodes, bn_values))
        apply_bn_updates(self.bundle.store, self._bn_sites, lookup)

    def step(self) -> dict:
        """One discriminator update then one generator update; returns metrics."""
        cfg = self.cfg
        b = cfg.batch
        zd = self.bundle.arch.latent_dim
        t0 = time.perf_counter()
        power_iterate_all(self.bundle.store, cfg.power_iters)

        x_real, c_real = self.real.draw(self.rng, b)
        c_fake, cells, _ = self.fake_coords.draw(self.rng, b)
        z_d = sample_latent(self.rng, b, zd)
        x_fake = self._generate_fakes(z_d, cells)
        eps = self.rng.uniform(0.0, 1.0, b).astype(np.float32)
        d_vals = self._dg.eval(
            {
                "x_real": x_real, "c_real": c_real,
                "x_fake": x_fake, "c_fake": c_fake,
                "eps_x": eps.reshape(b, 1, 1, 1), "eps_c": eps.reshape(b, 1),
            },
            self._d_outs + self._d_grad_nodes,
        )
        d_loss, lw, gp, ls_real = (v.item() for v in d_vals[:4])
        d_grads = dict(zip(self._d_grad_order, d_vals[4:]))
        self.adam_d.step(self.bundle.store, d_grads, cfg.lr_d,
                         cfg.beta1, cfg.beta2, cfg.adam_eps)

        c_macro, cells_g, mask = self.fake_coords.draw(self.rng, b)
        z_g = sample_latent(self.rng, b, zd)
        count = np.array([max(float(mask.sum()), 1.0)], dtype=np.float32)
        g_vals = self._gg.eval(
            {
                "z": z_g, "cells": _flatten_cells(cells_g), "c_macro": c_macro,
                "mask": mask.reshape(b, 1), "count": count,
            },
            self._g_outs + self._bn_nodes + self._g_grad_nodes + self._q_grad_nodes,
        )
        g_loss, ls_fake, lq = (v.item() for v in g_vals[:3])
        if self.adam_q is None:
            lq = 0.0
        pos = 3
        self._fold_bn(g_vals[pos : pos + len(self._bn_nodes)])
        pos += len(self._bn_nodes)
        g_grads = dict(zip(self._g_grad_order, g_vals[pos : pos + len(self._g_grad_nodes)]))
        pos += len(self._g_grad_nodes)
        self.adam_g.step(self.bundle.store, g_grads, cfg.lr_g,
                         cfg.beta1, cfg.beta2, cfg.adam_eps)
        if self.adam_q is not None:
            q_grads = dict(zip(self._q_grad_order, g_vals[pos:]))
            self.adam_q.step(self.bundle.store, q_grads, cfg.lr_g,
                             cfg.beta1, cfg.beta2, cfg.adam_eps)

        self.step_count += 1
        return {
            "step": self.step_count,
            "L_W": lw,
            "L_GP": gp,
            "L_S": ls_fake,
            "L_Q": lq,
            "d_loss": d_loss,
            "g_loss": g_loss,
            "ls_real": ls_real,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }

    def run(self, steps: int, hook=None) -> list[dict]:
        out = []
        for _ in range(steps):
            metrics = self.step()
            out.append(metrics)
            if hook is not None:
                hook(metrics)
        return out


# ------------------------------------------------------------- checkpointing


def _trainer_adams(trainer: Trainer):
    pairs = [("g", trainer.adam_g), ("d", trainer.adam_d)]
    if trainer.adam_q is not None:
        pairs.append(("q", trainer.adam_q))
    return pairs


def save_trainer(trainer: Trainer) -> bytes:
    """Checkpoint bytes carrying everything needed to resume exactly."""
    meta = {
        "train.step": str(trainer.step_count),
        "train.extend": str(trainer.extend),
        "train.g_scope": "head" if trainer.g_trainable != trainer.bundle.g_param_names() else "all",
        "rng.state": json.dumps(trainer.rng.bit_generator.state),
    }
    for f in fields(TrainConfig):
        meta[f"train.{f.name}"] = str(getattr(trainer.cfg, f.name))
    extras: dict[str, np.ndarray] = {}
    for key, adam in _trainer_adams(trainer):
        meta[f"adam.{key}.t"] = str(adam.t)
        for name in adam.names:
            extras[f"opt.{key}.m::{name}"] = adam.m[name]
            extras[f"opt.{key}.v::{name}"] = adam.v[name]
    return save_checkpoint(trainer.bundle, extras, meta)


def config_from_meta(meta: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        key = f"train.{f.name}"
        if key not in meta:
            continue
        if f.name in ("batch", "power_iters"):
            kwargs[f.name] = int(meta[key])
        elif f.name == "sampling":
            kwargs[f.name] = meta[key]
        else:
            kwargs[f.name] = float(meta[key])
    return TrainConfig(**kwargs)


def load_trainer(blob: bytes, images: np.ndarray) -> Trainer:
    """Rebuild a trainer from checkpoint bytes, resuming the exact run state."""
    loaded = load_checkpoint(blob)
    meta = loaded.meta
    cfg = config_from_meta(meta)
    extend = int(meta.get("train.extend", "0"))
    subset = None
    if meta.get("train.g_scope") == "head":
        subset = loaded.bundle.g_first_two_layer_names()
    trainer = Trainer(loaded.bundle, images, cfg, seed=0, extend=extend, g_trainable=subset)
    trainer.step_count = int(meta.get("train.step", "0"))
    if "rng.state" in meta:
        trainer.rng.bit_generator.state = json.loads(meta["rng.state"])
    for key, adam in _trainer_adams(trainer):
        tkey = f"adam.{key}.t"
        if tkey not in meta:
            continue
        adam.t = int(meta[tkey])
        for name in adam.names:
            for moment, slot in (("m", adam.m), ("v", adam.v)):
                full = f"opt.{key}.{moment}::{name}"
                if full not in loaded.extra_tensors:
                    raise CheckpointError(f"optimizer tensor {full!r} missing from checkpoint")
                slot[name] = loaded.extra_tensors[full].astype(np.float32)
    return trainer


def beyond_boundary_posttrain(bundle: ModelBundle, images: np.ndarray, cfg: TrainConfig,
                              steps: int, extend: int, seed: int = 0, hook=None) -> Trainer:
    """Teach a trained planar model to render past the canvas edge.

    Generated patches are anchored on a grid widened by ``extend`` rings whose
    spacing continues the core grid; real patches stay on the core canvas.
    Only the generator's input layers (seed projection and first block) and
    the discriminator train; fresh optimizer state, same learning rates.
    """
    if bundle.layout.topology != "planar":
        raise ValueError("extension training supports planar layouts only")
    if extend < 0:
        raise ValueError(f"extend must be >= 0, got {extend}")
    trainer = Trainer(bundle, images, cfg, seed=seed, extend=extend,
                      g_trainable=bundle.g_first_two_layer_names())
    if extend > 0:
        # with no added anchor rings there is nothing new to learn
        trainer.run(steps, hook)
    return trainer
