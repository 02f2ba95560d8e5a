"""Network building blocks and model assembly.

The generator maps (latent, micro coordinate) to one micro patch through a
linear 4x4 seed and residual up-blocks with conditional batch normalization;
the discriminator scores macro patches through residual down-blocks, global
sum pooling, and three heads: a critic score with an optional coordinate
projection term, a coordinate regressor (tanh), and an optional latent
regressor.

Every weight matrix and convolution kernel of both networks is spectrally
normalized.  The power-iteration vectors u and v live in the parameter store
as named state; the normalization itself is built into the graph from
(W, u, v), so gradients flow through the sigma estimate exactly as they do in
the standard formulation.

Layers are graph builders, not objects: parameters are created once in a
ParamStore, and ``apply_*`` functions emit nodes into any number of graphs
that share that store (training and inference graphs reference the same
weights).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Graph, Node
from .coords import PatchLayout, merge_phi

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


# ----------------------------------------------------------------- parameters


class ParamStore:
    """Named tensors shared by all graphs of a model.

    ``tensors`` holds everything; ``trainable`` lists the optimizer-visible
    subset in creation order; ``sn_names`` lists spectrally normalized weights;
    ``bn_prefixes`` lists batch-norm sites (their running stats are state).
    """

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.trainable: list[str] = []
        self.sn_names: list[str] = []
        self.bn_prefixes: list[str] = []

    def add_param(self, name: str, value: np.ndarray):
        if name in self.tensors:
            raise ValueError(f"duplicate tensor {name!r}")
        # contiguous storage: BLAS kernels round differently on views, which
        # would break bitwise reproducibility across checkpoint round trips
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)
        self.trainable.append(name)

    def add_state(self, name: str, value: np.ndarray):
        if name in self.tensors:
            raise ValueError(f"duplicate tensor {name!r}")
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    @property
    def state_names(self) -> list[str]:
        trainset = set(self.trainable)
        return [n for n in self.tensors if n not in trainset]


def orthogonal_init(rng: np.random.Generator, shape) -> np.ndarray:
    """Orthogonal initialization of a weight viewed as [shape[0], prod(rest)]."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].reshape(shape).astype(np.float32)


# -------------------------------------------------------------- spectral norm


class SpectralNormResult(NamedTuple):
    weight: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: float
    degenerate: bool


def spectral_normalize(weight: np.ndarray, u: np.ndarray | None = None,
                       iters: int = 1) -> SpectralNormResult:
    """Divide ``weight`` by its power-iteration estimate of the top singular value.

    ``weight`` is viewed as [rows, prod(rest)].  ``u`` is the persisted left
    vector (initialized to a normalized constant when absent); ``iters``
    power iterations refine (u, v) before sigma = u^T W v is taken.  An
    all-zero weight cannot be normalized: it is returned unchanged with
    ``degenerate=True`` and sigma 0.
    """
    w = np.asarray(weight)
    w2 = w.reshape(w.shape[0], -1)
    if u is None:
        u = np.full(w2.shape[0], 1.0 / math.sqrt(w2.shape[0]), dtype=w2.dtype)
    u = np.asarray(u, dtype=w2.dtype)
    if not np.any(w2):
        return SpectralNormResult(w, u, np.zeros(w2.shape[1], dtype=w2.dtype), 0.0, True)
    v = None
    for _ in range(max(1, iters)):
        v = w2.T @ u
        v = v / (np.linalg.norm(v) + 1e-12)
        u = w2 @ v
        u = u / (np.linalg.norm(u) + 1e-12)
    sigma = float(u @ w2 @ v)
    return SpectralNormResult((w / w.dtype.type(sigma)).reshape(w.shape), u, v, sigma, False)


def _sn_state_names(name: str) -> tuple[str, str]:
    return f"sn.u::{name}", f"sn.v::{name}"


def _register_sn(store: ParamStore, rng: np.random.Generator, name: str):
    w = store.tensors[name]
    w2 = w.reshape(w.shape[0], -1)
    u = rng.standard_normal(w2.shape[0]).astype(np.float32)
    u /= np.linalg.norm(u) + 1e-12
    res = spectral_normalize(w, u, iters=1)
    un, vn = _sn_state_names(name)
    store.add_state(un, res.u)
    store.add_state(vn, res.v)
    store.sn_names.append(name)


def power_iterate(store: ParamStore, name: str, iters: int = 1) -> float:
    """Refresh the persisted (u, v) pair for one weight; returns sigma."""
    un, vn = _sn_state_names(name)
    res = spectral_normalize(store.tensors[name], store.tensors[un], iters)
    if not res.degenerate:
        store.tensors[un] = res.u.astype(np.float32)
        store.tensors[vn] = res.v.astype(np.float32)
    return res.sigma


def power_iterate_all(store: ParamStore, iters: int = 1):
    for name in store.sn_names:
        power_iterate(store, name, iters)


def sn_weight(g: Graph, name: str) -> Node:
    """Graph node for the spectrally normalized view of a stored weight.

    sigma = sum(W o (u v^T)) is built from graph ops, so backward passes see
    the dependence of the normalized weight on W (u and v are constants of the
    current step, refreshed outside the graph by power_iterate).
    """
    w = g.bound(name)
    un, vn = _sn_state_names(name)
    rows = w.shape[0]
    cols = int(np.prod(w.shape[1:]))
    w2 = g.reshape(w, (rows, cols))
    uv = g.matmul(g.reshape(g.bound(un), (rows, 1)), g.reshape(g.bound(vn), (1, cols)))
    sigma = g.sum(g.mul(w2, uv))
    return g.mul(w, g.broadcast_to(g.reciprocal(sigma), w.shape))


# ------------------------------------------------------------- linear / conv


def make_linear(store: ParamStore, rng, name: str, din: int, dout: int,
                bias: bool = True, bias_init: float = 0.0):
    store.add_param(f"{name}.W", orthogonal_init(rng, (din, dout)))
    _register_sn(store, rng, f"{name}.W")
    if bias:
        store.add_param(f"{name}.b", np.full(dout, bias_init, dtype=np.float32))


def apply_linear(g: Graph, name: str, x: Node) -> Node:
    out = g.matmul(x, sn_weight(g, f"{name}.W"))
    bname = f"{name}.b"
    if bname in g.params:
        b = g.reshape(g.bound(bname), (1, out.shape[1]))
        out = g.add(out, g.broadcast_to(b, out.shape))
    return out


def make_conv(store: ParamStore, rng, name: str, ci: int, co: int, k: int):
    store.add_param(f"{name}.W", orthogonal_init(rng, (co, ci, k, k)))
    _register_sn(store, rng, f"{name}.W")
    store.add_param(f"{name}.b", np.zeros(co, dtype=np.float32))


def apply_conv(g: Graph, name: str, x: Node, stride: int = 1, pad: int = 1) -> Node:
    out = g.conv2d(x, sn_weight(g, f"{name}.W"), stride, pad)
    b = g.reshape(g.bound(f"{name}.b"), (1, out.shape[1], 1, 1))
    return g.add(out, g.broadcast_to(b, out.shape))


# --------------------------------------------------- conditional batch norm


class BnSite(NamedTuple):
    prefix: str
    mean_node: Node
    var_node: Node


def make_cbn(store: ParamStore, rng, prefix: str, channels: int, cond_dim: int):
    """Parameters for one conditional batch-norm site.

    gamma and beta each come from a one-hidden-layer MLP (width 2*channels,
    relu) on the conditioning vector.  The gamma output bias starts at 1 so
    features keep unit scale at initialization; everything else starts at 0
    bias with orthogonal weights.
    """
    hidden = 2 * channels
    make_linear(store, rng, f"{prefix}.gamma.fc1", cond_dim, hidden)
    make_linear(store, rng, f"{prefix}.gamma.fc2", hidden, channels, bias_init=1.0)
    make_linear(store, rng, f"{prefix}.beta.fc1", cond_dim, hidden)
    make_linear(store, rng, f"{prefix}.beta.fc2", hidden, channels)
    store.add_state(f"bn.mean::{prefix}", np.zeros(channels, dtype=np.float32))
    store.add_state(f"bn.var::{prefix}", np.ones(channels, dtype=np.float32))
    store.bn_prefixes.append(prefix)


def apply_cbn(g: Graph, prefix: str, x: Node, cond: Node, mode: str,
              bn_sites: list[BnSite]) -> Node:
    """Normalize per channel, then modulate with conditional gain and shift.

    ``mode="train"`` normalizes by batch statistics and records the site so the
    training loop can maintain running stats; ``mode="infer"`` normalizes by
    the stored running stats, making the layer a pure per-sample function.
    """
    b, c, h, w = x.shape
    gam = apply_linear(g, f"{prefix}.gamma.fc2", g.relu(apply_linear(g, f"{prefix}.gamma.fc1", cond)))
    bet = apply_linear(g, f"{prefix}.beta.fc2", g.relu(apply_linear(g, f"{prefix}.beta.fc1", cond)))
    if mode == "train":
        mu = g.mean(x, (0, 2, 3), keepdims=True)
        centered = g.sub(x, g.broadcast_to(mu, x.shape))
        var = g.mean(g.square(centered), (0, 2, 3), keepdims=True)
        inv = g.reciprocal(g.sqrt(g.add_scalar(var, BN_EPS)))
        xhat = g.mul(centered, g.broadcast_to(inv, x.shape))
        bn_sites.append(BnSite(prefix, mu, var))
    elif mode == "infer":
        rm = g.reshape(g.bound(f"bn.mean::{prefix}"), (1, c, 1, 1))
        rv = g.reshape(g.bound(f"bn.var::{prefix}"), (1, c, 1, 1))
        centered = g.sub(x, g.broadcast_to(rm, x.shape))
        inv = g.reciprocal(g.sqrt(g.add_scalar(rv, BN_EPS)))
        xhat = g.mul(centered, g.broadcast_to(inv, x.shape))
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    gam4 = g.broadcast_to(g.reshape(gam, (b, c, 1, 1)), x.shape)
    bet4 = g.broadcast_to(g.reshape(bet, (b, c, 1, 1)), x.shape)
    return g.add(g.mul(xhat, gam4), bet4)


def apply_bn_updates(store: ParamStore, sites: list[BnSite], values: dict):
    """Fold freshly evaluated batch stats into the running stats."""
    m = BN_MOMENTUM
    for site in sites:
        mu = values[site.mean_node].reshape(-1)
        var = values[site.var_node].reshape(-1)
        mn, vn = f"bn.mean::{site.prefix}", f"bn.var::{site.prefix}"
        store.tensors[mn] = (m * store.tensors[mn] + (1.0 - m) * mu).astype(np.float32)
        store.tensors[vn] = (m * store.tensors[vn] + (1.0 - m) * var).astype(np.float32)


# ----------------------------------------------------------------- generator


@dataclass(frozen=True)
class ArchConfig:
    """Capacity and head flags (geometry lives in PatchLayout)."""

    latent_dim: int = 16
    base_channels: int = 32
    projection: bool = True
    latent_head: bool = False

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")


def generator_stride_plan(micro_size: int) -> list[bool]:
    """Up-sampling flags per residual block for a 4x4 seed.

    One 2x up-block per factor of 2 above 4; at least two blocks total, the
    extras non-strided (a 4-pixel micro patch trains with two plain blocks).
    """
    if micro_size < 4 or micro_size & (micro_size - 1):
        raise ValueError(f"micro_size must be a power-of-two >= 4, got {micro_size}")
    n_up = int(math.log2(micro_size // 4))
    n_blocks = max(2, n_up)
    return [True] * n_up + [False] * (n_blocks - n_up)


def init_generator(store: ParamStore, rng, arch: ArchConfig, layout: PatchLayout):
    c = arch.base_channels
    cond_dim = arch.latent_dim + layout.coord_dim
    make_linear(store, rng, "g.seed", cond_dim, 16 * c)
    for i in range(len(generator_stride_plan(layout.micro_size))):
        make_cbn(store, rng, f"g.block{i}.cbn1", c, cond_dim)
        make_conv(store, rng, f"g.block{i}.conv1", c, c, 3)
        make_cbn(store, rng, f"g.block{i}.cbn2", c, cond_dim)
        make_conv(store, rng, f"g.block{i}.conv2", c, c, 3)
    make_cbn(store, rng, "g.out.cbn", c, cond_dim)
    make_conv(store, rng, "g.out.conv", c, 3, 3)


def build_generator(g: Graph, arch: ArchConfig, layout: PatchLayout, z: Node,
                    coords: Node, mode: str, bn_sites: list[BnSite]) -> Node:
    """Emit generator nodes mapping (z, micro coordinate) -> micro patch.

    ``z`` is [B, latent_dim], ``coords`` is [B, coord_dim]; the output is
    [B, 3, S, S] in (-1, 1) via tanh.  Conditioning (z concat coord) reaches
    every block through its CBN gain/shift MLPs.
    """
    batch = z.shape[0]
    c = arch.base_channels
    cond = g.concat([z, coords], 1)
    h = g.reshape(apply_linear(g, "g.seed", cond), (batch, c, 4, 4))
    for i, up in enumerate(generator_stride_plan(layout.micro_size)):
        prefix = f"g.block{i}"
        r = apply_cbn(g, f"{prefix}.cbn1", h, cond, mode, bn_sites)
        r = g.relu(r)
        if up:
            r = g.upsample2x(r)
        r = apply_conv(g, f"{prefix}.conv1", r)
        r = apply_cbn(g, f"{prefix}.cbn2", r, cond, mode, bn_sites)
        r = g.relu(r)
        r = apply_conv(g, f"{prefix}.conv2", r)
        h = g.add(r, g.upsample2x(h) if up else h)
    h = g.relu(apply_cbn(g, "g.out.cbn", h, cond, mode, bn_sites))
    return g.tanh(apply_conv(g, "g.out.conv", h))


# ------------------------------------------------------------- discriminator


def discriminator_block_plan(arch: ArchConfig, layout: PatchLayout):
    """Residual block schedule: downsample to a 4-pixel edge, doubling channels
    per downsampling block, then one non-strided block before pooling."""
    min_edge = min(layout.macro_h, layout.macro_w)
    if min_edge < 4 or min_edge & (min_edge - 1):
        raise ValueError(f"macro patch edge must be a power-of-two >= 4, got {min_edge}")
    n_down = max(int(math.log2(min_edge)) - 2, 0)
    base = arch.base_channels
    blocks = [("d.block0", "opt", 3, base, n_down > 0)]
    for k in range(1, n_down):
        blocks.append((f"d.block{k}", "std", base * 2 ** (k - 1), base * 2**k, True))
    tail_ci = base * 2 ** max(n_down - 1, 0)
    blocks.append((f"d.block{max(n_down, 1)}", "std", tail_ci, base * 2 ** max(n_down, 1), False))
    return blocks


def discriminator_feat_dim(arch: ArchConfig, layout: PatchLayout) -> int:
    return discriminator_block_plan(arch, layout)[-1][3]


def init_discriminator(store: ParamStore, rng, arch: ArchConfig, layout: PatchLayout):
    for prefix, _kind, ci, co, down in discriminator_block_plan(arch, layout):
        make_conv(store, rng, f"{prefix}.conv1", ci, co, 3)
        make_conv(store, rng, f"{prefix}.conv2", co, co, 3)
        if ci != co or down:
            make_conv(store, rng, f"{prefix}.convsc", ci, co, 1)
    feat = discriminator_feat_dim(arch, layout)
    make_linear(store, rng, "d.score", feat, 1)
    if arch.projection:
        make_linear(store, rng, "d.embed", layout.coord_dim, feat, bias=False)
    make_linear(store, rng, "d.a.fc1", feat, feat)
    make_linear(store, rng, "d.a.fc2", feat, layout.coord_dim)
    if arch.latent_head:
        make_linear(store, rng, "d.q.fc1", feat, feat)
        make_linear(store, rng, "d.q.fc2", feat, arch.latent_dim)


def _avgpool2x(g: Graph, x: Node) -> Node:
    return g.scale(g.sumpool2x(x), 0.25)


class DiscOut(NamedTuple):
    score: Node          # [B, 1] critic value (projection term included if conditioned)
    coord_pred: Node     # [B, coord_dim] tanh coordinate regression
    latent_pred: Node | None  # [B, latent_dim] when the latent head exists
    pooled: Node         # [B, feat] global features


def build_discriminator(g: Graph, arch: ArchConfig, layout: PatchLayout, x: Node,
                        coord: Node | None) -> DiscOut:
    """Emit discriminator nodes scoring a macro patch [B, 3, N*S, M*S].

    When ``coord`` is given and the projection flag is set, the score gains
    the inner product between the coordinate embedding and pooled features.
    """
    h = x
    for prefix, kind, ci, co, down in discriminator_block_plan(arch, layout):
        if kind == "opt":
            r = apply_conv(g, f"{prefix}.conv1", h)
            r = apply_conv(g, f"{prefix}.conv2", g.relu(r))
            if down:
                r = _avgpool2x(g, r)
                sc = apply_conv(g, f"{prefix}.convsc", _avgpool2x(g, h), pad=0)
            else:
                sc = apply_conv(g, f"{prefix}.convsc", h, pad=0)
        else:
            r = apply_conv(g, f"{prefix}.conv1", g.relu(h))
            r = apply_conv(g, f"{prefix}.conv2", g.relu(r))
            sc = h
            if ci != co or down:
                sc = apply_conv(g, f"{prefix}.convsc", sc, pad=0)
            if down:
                r = _avgpool2x(g, r)
                sc = _avgpool2x(g, sc)
        h = g.add(r, sc)
    pooled = g.sum(g.relu(h), (2, 3))
    score = apply_linear(g, "d.score", pooled)
    if coord is not None and arch.projection:
        emb = apply_linear(g, "d.embed", coord)
        score = g.add(score, g.sum(g.mul(emb, pooled), (1,), keepdims=True))
    coord_pred = g.tanh(apply_linear(g, "d.a.fc2", g.relu(apply_linear(g, "d.a.fc1", pooled))))
    latent_pred = None
    if arch.latent_head:
        latent_pred = apply_linear(g, "d.q.fc2", g.relu(apply_linear(g, "d.q.fc1", pooled)))
    return DiscOut(score, coord_pred, latent_pred, pooled)


# --------------------------------------------------------------- model bundle


@dataclass
class ModelBundle:
    """Generator + discriminator parameters plus cached inference graphs."""

    arch: ArchConfig
    layout: PatchLayout
    store: ParamStore
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, arch: ArchConfig, layout: PatchLayout, seed: int = 0) -> "ModelBundle":
        store = ParamStore()
        rng = np.random.default_rng([seed, 0x57EED])
        init_generator(store, rng, arch, layout)
        init_discriminator(store, rng, arch, layout)
        return cls(arch, layout, store)

    # name registries -------------------------------------------------------

    def g_param_names(self) -> list[str]:
        return [n for n in self.store.trainable if n.startswith("g.")]

    def g_first_two_layer_names(self) -> list[str]:
        return [n for n in self.store.trainable
                if n.startswith("g.seed") or n.startswith("g.block0.")]

    def d_main_names(self) -> list[str]:
        """Everything the critic loss trains: trunk, score, projection, coord head."""
        return [n for n in self.store.trainable
                if n.startswith("d.") and not n.startswith("d.q.")]

    def d_trunk_names(self) -> list[str]:
        return [n for n in self.store.trainable if n.startswith("d.block")]

    def q_route_names(self) -> list[str]:
        """Latent-head route: the head itself plus the shared trunk."""
        return [n for n in self.store.trainable if n.startswith("d.q.")] + self.d_trunk_names()

    # forward conveniences ---------------------------------------------------

    def _gen_graph(self, batch: int, mode: str):
        key = ("gen", batch, mode)
        if key not in self._cache:
            g = Graph(params=self.store.tensors)
            z = g.placeholder("z", (batch, self.arch.latent_dim))
            c = g.placeholder("c", (batch, self.layout.coord_dim))
            sites: list[BnSite] = []
            out = build_generator(g, self.arch, self.layout, z, c, mode, sites)
            self._cache[key] = (g, out)
        return self._cache[key]

    def _disc_graph(self, batch: int, conditioned: bool):
        key = ("disc", batch, conditioned)
        if key not in self._cache:
            g = Graph(params=self.store.tensors)
            x = g.placeholder("x", (batch, 3, self.layout.macro_h, self.layout.macro_w))
            c = g.placeholder("c", (batch, self.layout.coord_dim)) if conditioned else None
            out = build_discriminator(g, self.arch, self.layout, x, c)
            self._cache[key] = (g, out)
        return self._cache[key]

    def generator_forward(self, z: np.ndarray, coords: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Micro patches for a batch of (z, coordinate) pairs.

        Inference mode uses running batch-norm stats and is a pure per-sample
        function; train mode uses batch stats (running stats are only updated
        by the training loop, not here).
        """
        z = np.asarray(z, dtype=np.float32)
        g, out = self._gen_graph(z.shape[0], mode)
        return g.eval({"z": z, "c": coords}, out)

    def micro_patch(self, z: np.ndarray, coord: np.ndarray) -> np.ndarray:
        """One micro patch, batch-1 evaluation.

        This is the canonical generation path: full scenes are assembled from
        batch-1 patches so that every assembly route produces bitwise-identical
        pixels (batched BLAS may round differently across batch shapes).
        """
        return self.generator_forward(z[None], np.asarray(coord, dtype=np.float32)[None])[0]

    def discriminator_forward(self, x: np.ndarray, coord: np.ndarray | None = None):
        """Score/heads for a batch of macro patches; returns dict of arrays."""
        x = np.asarray(x, dtype=np.float32)
        g, out = self._disc_graph(x.shape[0], coord is not None)
        feeds = {"x": x}
        if coord is not None:
            feeds["c"] = np.asarray(coord, dtype=np.float32)
        targets = [out.score, out.coord_pred, out.pooled]
        if out.latent_pred is not None:
            targets.append(out.latent_pred)
        vals = g.eval(feeds, targets)
        return {
            "score": vals[0],
            "coord_pred": vals[1],
            "pooled": vals[2],
            "latent_pred": vals[3] if out.latent_pred is not None else None,
        }

    def generate_full(self, z: np.ndarray, extend: int = 0) -> np.ndarray:
        """Weave a full (optionally extended) canvas from batch-1 micro patches."""
        coords = self.layout.full_micro_coords(extend)
        rows, cols = coords.shape[:2]
        s = self.layout.micro_size
        patches = np.empty((rows, cols, 3, s, s), dtype=np.float32)
        for i in range(rows):
            for j in range(cols):
                patches[i, j] = self.micro_patch(np.asarray(z, dtype=np.float32), coords[i, j])
        return merge_phi(patches)

    def generate_full_batch(self, zs: np.ndarray, extend: int = 0) -> np.ndarray:
        """Full canvases for many latents, batched per cell (metrics use only)."""
        zs = np.asarray(zs, dtype=np.float32)
        n = zs.shape[0]
        coords = self.layout.full_micro_coords(extend)
        rows, cols = coords.shape[:2]
        s = self.layout.micro_size
        out = np.empty((n, 3, rows * s, cols * s), dtype=np.float32)
        for i in range(rows):
            for j in range(cols):
                c = np.broadcast_to(coords[i, j].astype(np.float32), (n, coords.shape[2]))
                patch = self.generator_forward(zs, c)
                out[:, :, i * s : (i + 1) * s, j * s : (j + 1) * s] = patch
        return out
