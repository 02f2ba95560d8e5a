"""Datasets, image codec, real-patch samplers, and checkpoint serialization.

Synthetic datasets paint position-dependent structure so a coordinate-
conditioned generator has something to learn at desk scale:

* ``gradient_hue``: a strictly left-to-right brightness ramp (randomly warped
  and tinted per image).  Luminance strictly increases along every row, which
  makes horizontal position trivially inferable from content.
* ``blobs``: four fixed-position color blobs with random per-image amplitudes.
* ``rings``: concentric rings around the canvas center with random spacing and
  phase.

Images are float32 [3, H, W] in [-1, 1] throughout.  The PPM codec and the
checkpoint format are byte-exact: encoders round deterministically, writers
sort by name, and a save/load/save round trip reproduces identical bytes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coords import PatchLayout, crop_psi
from .layers import ArchConfig, ModelBundle

log = logging.getLogger(__name__)

DATASET_KINDS = ("gradient_hue", "placed_blobs", "rings")


class CodecError(ValueError):
    """Malformed image bytes."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint bytes."""


class DataError(ValueError):
    """Unusable dataset source."""


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    """Image collection with a deterministic train/held-out split.

    The last ``round(n * heldout_fraction)`` images (at least one, at most
    n - 1) are held out; they never reach the training sampler.
    """

    images: np.ndarray
    kind: str
    seed: int
    heldout_fraction: float = 0.1

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"expected [n, 3, H, W] images, got {self.images.shape}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise DataError(f"heldout_fraction must be in (0, 1), got {self.heldout_fraction}")
        n = len(self.images)
        if n < 2:
            raise DataError("need at least 2 images to split")
        k = min(max(int(round(n * self.heldout_fraction)), 1), n - 1)
        self._split = n - k

    @property
    def train_images(self) -> np.ndarray:
        return self.images[: self._split]

    @property
    def heldout_images(self) -> np.ndarray:
        return self.images[self._split :]


def _gradient_hue(count, h, w, rng):
    """Hue ramps crossed per axis: red runs with the horizontal warp, green
    with the vertical one, blue mixes both, so any crop pins down where it
    came from. Channel-mean luminance strictly increases left to right."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    images = np.empty((count, 3, h, w), dtype=np.float32)
    for k in range(count):
        phx = rng.uniform(0.0, 2.0 * np.pi)
        phy = rng.uniform(0.0, 2.0 * np.pi)
        amp_x = rng.uniform(1.55, 1.7)
        amp_y = rng.uniform(1.55, 1.7)
        mix = rng.uniform(0.25, 0.45)
        off = rng.uniform(-0.1, 0.1)
        # monotone warps: derivative (1 +/- 0.05*pi)/1.1 > 0, range stays in (0, 1)
        wx = (xs + 0.05 * np.sin(np.pi * xs + phx) + 0.05) / 1.1
        wy = (ys + 0.05 * np.sin(np.pi * ys + phy) + 0.05) / 1.1
        red = amp_x * (wx - 0.5)
        green = amp_y * (wy - 0.5)
        images[k, 0] = red[None, :]
        images[k, 1] = green[:, None]
        images[k, 2] = mix * red[None, :] + (1.0 - mix) * green[:, None] + off
    return images


def _blobs(count, h, w, rng):
    centers = [(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7)]
    colors = np.array(
        [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [0.9, 0.9, 0.2]]
    )
    sigma = 0.15 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    kernels = []
    for cy, cx in centers:
        r2 = (yy - cy * (h - 1)) ** 2 + (xx - cx * (w - 1)) ** 2
        kernels.append(np.exp(-r2 / (2.0 * sigma**2)))
    images = np.empty((count, 3, h, w), dtype=np.float32)
    for k in range(count):
        amps = rng.uniform(0.4, 1.0, 4)
        img = np.full((3, h, w), -0.85)
        for kern, amp, col in zip(kernels, amps, colors):
            img += 1.6 * amp * col[:, None, None] * kern[None]
        images[k] = np.clip(img, -1.0, 1.0).astype(np.float32)
    return images


def _rings(count, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.sqrt((yy - (h - 1) / 2.0) ** 2 + (xx - (w - 1) / 2.0) ** 2)
    offsets = np.array([0.0, 0.7, 1.4])
    images = np.empty((count, 3, h, w), dtype=np.float32)
    for k in range(count):
        lam = rng.uniform(0.25, 0.45) * min(h, w)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        phase = 2.0 * np.pi * r / lam + phi
        images[k] = (0.8 * np.cos(phase[None] + offsets[:, None, None])).astype(np.float32)
    return images


_SYNTHS = {"gradient_hue": _gradient_hue, "placed_blobs": _blobs, "rings": _rings}


def synth_dataset(kind: str, count: int, layout: PatchLayout, seed: int,
                  heldout_fraction: float = 0.1) -> Dataset:
    """Deterministically synthesize ``count`` canvas-sized images of ``kind``."""
    kind = kind.replace("-", "_")
    if kind == "blobs":
        kind = "placed_blobs"
    if kind not in _SYNTHS:
        raise DataError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if count < 2:
        raise DataError(f"count must be >= 2, got {count}")
    rng = np.random.default_rng([seed, 0xDA7A])
    images = _SYNTHS[kind](count, layout.canvas_h, layout.canvas_w, rng)
    return Dataset(images, kind, seed, heldout_fraction)


# ------------------------------------------------------------------ samplers


def sample_real_macro(images: np.ndarray, layout: PatchLayout, rng: np.random.Generator):
    """Crop one uniformly drawn macro patch; returns (patch, coordinate, anchor)."""
    img = images[int(rng.integers(len(images)))]
    anchors = layout.anchors()
    anchor = anchors[int(rng.integers(len(anchors)))]
    return crop_psi(img, anchor, layout), layout.macro_coord(anchor), anchor


class MacroSampler:
    """Batched real macro patch sampler over a fixed image set.

    ``discrete`` draws anchors from the anchor grid; ``continuous`` draws
    pixel-granular anchors (crops stay pixel aligned; the coordinate is the
    fractional anchor position on the same normalized scale).
    """

    def __init__(self, images: np.ndarray, layout: PatchLayout, sampling: str = "discrete"):
        if sampling not in ("discrete", "continuous"):
            raise ValueError(f"sampling must be discrete|continuous, got {sampling!r}")
        if len(images) < 1:
            raise DataError("sampler needs at least one image")
        self.images = np.asarray(images, dtype=np.float32)
        want = (3, layout.canvas_h, layout.canvas_w)
        if self.images.shape[1:] != want:
            raise DataError(f"images are {self.images.shape[1:]}, layout expects {want}")
        self.layout = layout
        self.sampling = sampling
        self._anchors = layout.anchors()

    def draw(self, rng: np.random.Generator, batch: int):
        lay = self.layout
        x = np.empty((batch, 3, lay.macro_h, lay.macro_w), dtype=np.float32)
        c = np.empty((batch, lay.coord_dim), dtype=np.float32)
        idx = rng.integers(0, len(self.images), batch)
        if self.sampling == "discrete":
            which = rng.integers(0, len(self._anchors), batch)
            for b in range(batch):
                anchor = self._anchors[int(which[b])]
                x[b] = crop_psi(self.images[int(idx[b])], anchor, lay)
                c[b] = lay.macro_coord(anchor)
        else:
            s = lay.micro_size
            py = rng.integers(0, (lay.anchor_rows - 1) * s + 1, batch)
            if lay.topology == "cylindrical":
                px = rng.integers(0, lay.canvas_w, batch)
            else:
                px = rng.integers(0, (lay.anchor_cols - 1) * s + 1, batch)
            for b in range(batch):
                img = self.images[int(idx[b])]
                r0, c0 = int(py[b]), int(px[b])
                rows = slice(r0, r0 + lay.macro_h)
                if lay.topology == "cylindrical":
                    cols = (c0 + np.arange(lay.macro_w)) % lay.canvas_w
                    x[b] = img[:, rows, :][:, :, cols]
                else:
                    x[b] = img[:, rows, c0 : c0 + lay.macro_w]
                c[b] = lay.macro_coord_frac(r0 / s, c0 / s)
        return x, c


class CoordSampler:
    """Coordinate sampler for generated macro patches.

    Yields the macro coordinate, the per-cell micro coordinates, and an
    in-range mask (0 for macro coordinates beyond [-1, 1], which exist only
    when sampling an extended grid; the coordinate regression loss must skip
    those samples).
    """

    def __init__(self, layout: PatchLayout, sampling: str = "discrete", extend: int = 0):
        if sampling == "continuous" and extend:
            raise ValueError("continuous sampling does not support extended grids")
        self.layout = layout
        self.sampling = sampling
        self.extend = extend
        self._anchors = layout.anchors(extend)

    def draw(self, rng: np.random.Generator, batch: int):
        lay = self.layout
        n, m = lay.macro_rows, lay.macro_cols
        c_macro = np.empty((batch, lay.coord_dim), dtype=np.float32)
        cells = np.empty((batch, n, m, lay.coord_dim), dtype=np.float32)
        mask = np.ones(batch, dtype=np.float32)
        if self.sampling == "discrete":
            which = rng.integers(0, len(self._anchors), batch)
            for b in range(batch):
                anchor = self._anchors[int(which[b])]
                c_macro[b] = lay.macro_coord(anchor, self.extend)
                cells[b] = lay.micro_coord_matrix(anchor, self.extend)
                if lay.topology == "planar" and np.any(np.abs(c_macro[b]) > 1.0):
                    mask[b] = 0.0
        else:
            fi = rng.uniform(0.0, lay.anchor_rows - 1.0, batch)
            if lay.topology == "cylindrical":
                fj = rng.uniform(0.0, lay.grid_w, batch)
            else:
                fj = rng.uniform(0.0, lay.anchor_cols - 1.0, batch)
            for b in range(batch):
                c_macro[b] = lay.macro_coord_frac(fi[b], fj[b])
                cells[b] = lay.micro_coords_frac(fi[b], fj[b])
        return c_macro, cells, mask


def sample_latent(rng: np.random.Generator, batch: int, dim: int) -> np.ndarray:
    """Latents are uniform on [-1, 1]^dim."""
    return rng.uniform(-1.0, 1.0, (batch, dim)).astype(np.float32)


# ----------------------------------------------------------------- PPM codec


def ppm_encode(img: np.ndarray) -> bytes:
    """Encode [3, H, W] values in [-1, 1] as binary PPM (P6, maxval 255).

    Levels are round((v+1)/2 * 255) with ties rounding up, clamped to [0, 255].
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise CodecError(f"expected [3, H, W] image, got {img.shape}")
    levels = np.floor(img.astype(np.float64) * 127.5 + 128.0)
    levels = np.clip(levels, 0.0, 255.0).astype(np.uint8)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii")
    return header + levels.transpose(1, 2, 0).tobytes()


def _ppm_tokens(data: bytes, count: int):
    """Yield ``count`` whitespace/comment-delimited header tokens and the offset
    of the byte right after the single whitespace that terminates the last one."""
    pos = 0
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos] != ord("#"):
            pos += 1
        if pos == start:
            raise CodecError("truncated PPM header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise CodecError("PPM header must end with a whitespace byte")
    return tokens, pos + 1


def ppm_decode(data: bytes) -> np.ndarray:
    """Decode binary PPM bytes to [3, H, W] float32 in [-1, 1] (level/255*2-1)."""
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise CodecError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CodecError(f"bad PPM header tokens {tokens[1:]}") from exc
    if maxval != 255:
        raise CodecError(f"only maxval 255 is supported, got {maxval}")
    if w < 1 or h < 1:
        raise CodecError(f"bad PPM dimensions {w}x{h}")
    payload = data[offset : offset + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise CodecError(f"PPM payload truncated: {len(payload)} of {3 * w * h} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (arr.astype(np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)).astype(np.float32)


def write_ppm(path, img: np.ndarray):
    Path(path).write_bytes(ppm_encode(img))


def read_ppm(path) -> np.ndarray:
    return ppm_decode(Path(path).read_bytes())


def _nearest_resize(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    _, h, w = img.shape
    rows = np.floor((np.arange(th) + 0.5) * h / th).astype(int)
    cols = np.floor((np.arange(tw) + 0.5) * w / tw).astype(int)
    return img[:, rows][:, :, cols]


def image_folder_ingest(folder, layout: PatchLayout) -> np.ndarray:
    """Load every readable *.ppm in ``folder`` (sorted), fitted to the canvas.

    Off-size images are center-cropped to the canvas aspect ratio and
    nearest-resized.  Corrupt files are skipped with a warning; zero usable
    images is an error.
    """
    folder = Path(folder)
    th, tw = layout.canvas_h, layout.canvas_w
    out = []
    for path in sorted(folder.glob("*.ppm")):
        try:
            img = read_ppm(path)
        except (CodecError, OSError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        _, h, w = img.shape
        if (h, w) != (th, tw):
            ch = min(h, max(1, int(round(w * th / tw))))
            cw = min(w, max(1, int(round(ch * tw / th))))
            r0, c0 = (h - ch) // 2, (w - cw) // 2
            img = _nearest_resize(img[:, r0 : r0 + ch, c0 : c0 + cw], th, tw)
        out.append(img)
    if not out:
        raise DataError(f"no usable .ppm images in {folder}")
    return np.stack(out)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CCGN"
CHECKPOINT_VERSION = 1
_OPT_PREFIX = "opt."


def write_checkpoint_bytes(config: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    """Exact byte layout: magic, u32 version, length-prefixed key=value text,
    then name-sorted tensor records [u32 name len, name, u8 rank, u32 dims, f32 data]."""
    for key, value in config.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"config entry {key!r} would corrupt the text block")
    text = "".join(f"{k}={config[k]}\n" for k in sorted(config)).encode("utf-8")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(text)) + text
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb + struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.tobytes()
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def read_checkpoint_bytes(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config: dict[str, str] = {}
    for line in r.take(r.u32()).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    tensors: dict[str, np.ndarray] = {}
    while not r.exhausted:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
    return config, tensors


def _bool_str(flag: bool) -> str:
    return "true" if flag else "false"


def _parse_bool(value: str, key: str) -> bool:
    if value not in ("true", "false"):
        raise CheckpointError(f"config {key!r} must be true|false, got {value!r}")
    return value == "true"


def save_checkpoint(bundle: ModelBundle, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> bytes:
    """Serialize a model bundle (weights + norm/stat state) with optional
    optimizer tensors (names must start with "opt.") and free-form metadata."""
    config = {
        "arch.latent_dim": str(bundle.arch.latent_dim),
        "arch.base_channels": str(bundle.arch.base_channels),
        "arch.projection": _bool_str(bundle.arch.projection),
        "arch.latent_head": _bool_str(bundle.arch.latent_head),
        "layout.grid_h": str(bundle.layout.grid_h),
        "layout.grid_w": str(bundle.layout.grid_w),
        "layout.macro_rows": str(bundle.layout.macro_rows),
        "layout.macro_cols": str(bundle.layout.macro_cols),
        "layout.micro_size": str(bundle.layout.micro_size),
        "layout.topology": bundle.layout.topology,
    }
    for key, value in (meta or {}).items():
        if key in config:
            raise CheckpointError(f"meta key {key!r} collides with a model key")
        config[key] = str(value)
    tensors = dict(bundle.store.tensors)
    for name, arr in (extra_tensors or {}).items():
        if not name.startswith(_OPT_PREFIX):
            raise CheckpointError(f"extra tensor {name!r} must use the 'opt.' prefix")
        tensors[name] = arr
    return write_checkpoint_bytes(config, tensors)


@dataclass
class LoadedCheckpoint:
    bundle: ModelBundle
    extra_tensors: dict[str, np.ndarray]
    meta: dict[str, str]


def load_checkpoint(data: bytes, into: ModelBundle | None = None) -> LoadedCheckpoint:
    """Rebuild a bundle from checkpoint bytes.

    Without ``into``, the architecture is reconstructed from the config block.
    With ``into``, tensors load into that bundle, and any mismatch between its
    tensor names/shapes and the file's is an error naming the first offender.
    """
    config, tensors = read_checkpoint_bytes(data)
    model_tensors = {n: a for n, a in tensors.items() if not n.startswith(_OPT_PREFIX)}
    extra = {n: a for n, a in tensors.items() if n.startswith(_OPT_PREFIX)}
    if into is None:
        try:
            arch = ArchConfig(
                latent_dim=int(config["arch.latent_dim"]),
                base_channels=int(config["arch.base_channels"]),
                projection=_parse_bool(config["arch.projection"], "arch.projection"),
                latent_head=_parse_bool(config["arch.latent_head"], "arch.latent_head"),
            )
            layout = PatchLayout(
                grid_h=int(config["layout.grid_h"]),
                grid_w=int(config["layout.grid_w"]),
                macro_rows=int(config["layout.macro_rows"]),
                macro_cols=int(config["layout.macro_cols"]),
                micro_size=int(config["layout.micro_size"]),
                topology=config["layout.topology"],
            )
        except KeyError as exc:
            raise CheckpointError(f"config is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            raise CheckpointError(f"bad model config: {exc}") from None
        bundle = ModelBundle.create(arch, layout, seed=0)
    else:
        bundle = into
    expected = set(bundle.store.tensors)
    got = set(model_tensors)
    for name in sorted(got - expected):
        raise CheckpointError(f"checkpoint tensor {name!r} has no slot in this architecture")
    for name in sorted(expected - got):
        raise CheckpointError(f"architecture tensor {name!r} is missing from the checkpoint")
    for name, arr in model_tensors.items():
        want = bundle.store.tensors[name].shape
        if arr.shape != want:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {want}")
        bundle.store.tensors[name] = arr.astype(np.float32)
    meta = {k: v for k, v in config.items()
            if not k.startswith("arch.") and not k.startswith("layout.")}
    return LoadedCheckpoint(bundle, extra, meta)
