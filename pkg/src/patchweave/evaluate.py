"""Quality metrics and guided generation.

The distribution metric is a desk-scale stand-in for feature-space Frechet
distances: images are nearest-downsampled to 8x8, flattened to 192-dim pixel
features, fit with Gaussians, and compared with the closed-form Frechet
formula.  Seam energy quantifies stitching artifacts as the excess absolute
neighbor difference across patch boundaries relative to patch interiors.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as scipy_linalg

from .coords import PatchLayout, crop_psi
from .layers import ModelBundle

FEATURE_EDGE = 8
EVAL_BATCH = 256


def downsample_nearest(images: np.ndarray, size: int = FEATURE_EDGE) -> np.ndarray:
    """Nearest-neighbor downsample of [n, 3, H, W] to [n, 3, size, size]."""
    n, ch, h, w = images.shape
    rows = np.floor((np.arange(size) + 0.5) * h / size).astype(int)
    cols = np.floor((np.arange(size) + 0.5) * w / size).astype(int)
    return images[:, :, rows][:, :, :, cols]


def _features(images: np.ndarray) -> np.ndarray:
    small = downsample_nearest(np.asarray(images, dtype=np.float64))
    return small.reshape(len(small), -1)


def _gaussian_stats(feats: np.ndarray, ridge: float):
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) + ridge * np.eye(feats.shape[1])
    return mu, cov


def frechet_proxy(images_a: np.ndarray, images_b: np.ndarray, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of 8x8 pixel features.

    The two stat sets are put in a canonical order (lexicographic on the
    feature bytes) before the asymmetric-looking sqrtm product is computed,
    so the result is exactly symmetric in its arguments.
    """
    fa, fb = _features(images_a), _features(images_b)
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least 2 images per side to fit covariances")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    if fb.tobytes() < fa.tobytes():
        fa, fb = fb, fa
    mu_a, ca = _gaussian_stats(fa, ridge)
    mu_b, cb = _gaussian_stats(fb, ridge)
    prod = scipy_linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(prod):
        prod = prod.real
    d = mu_a - mu_b
    return float(d @ d + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(prod))


def seam_energy(img: np.ndarray, s: int, region: np.ndarray | None = None) -> float:
    """Boundary-minus-interior mean absolute neighbor difference.

    Neighbor pairs straddling a multiple-of-``s`` pixel boundary are patch
    seams; all other pairs sample interior texture.  ``region`` (a [H, W]
    bool mask) restricts the measurement to pairs with both pixels inside.
    A clean weave scores near 0; visible seams push it up.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected [C, H, W], got {img.shape}")
    _, h, w = img.shape
    if region is None:
        region = np.ones((h, w), dtype=bool)
    hd = np.abs(img[:, :, 1:] - img[:, :, :-1])
    hb = ((np.arange(w - 1) + 1) % s == 0)[None, :].repeat(h, 0)
    hr = region[:, 1:] & region[:, :-1]
    vd = np.abs(img[:, 1:, :] - img[:, :-1, :])
    vb = ((np.arange(h - 1) + 1) % s == 0)[:, None].repeat(w, 1)
    vr = region[1:, :] & region[:-1, :]
    boundary = np.concatenate([hd[:, hr & hb].ravel(), vd[:, vr & vb].ravel()])
    interior = np.concatenate([hd[:, hr & ~hb].ravel(), vd[:, vr & ~vb].ravel()])
    if boundary.size == 0 or interior.size == 0:
        raise ValueError("region leaves no boundary or no interior pixel pairs")
    return float(boundary.mean() - interior.mean())


def extension_ring_mask(layout: PatchLayout, extend: int) -> np.ndarray:
    """True exactly on the pixels an extended render adds around the canvas."""
    if extend < 1:
        raise ValueError(f"extend must be >= 1, got {extend}")
    s = layout.micro_size
    full_h = (layout.grid_h + 2 * extend) * s
    full_w = (layout.grid_w + 2 * extend) * s
    mask = np.ones((full_h, full_w), dtype=bool)
    off = extend * s
    mask[off : off + layout.canvas_h, off : off + layout.canvas_w] = False
    return mask


def coord_head_error(bundle: ModelBundle, images: np.ndarray) -> float:
    """Mean L2 error of the coordinate head over every (image, anchor) crop."""
    lay = bundle.layout
    anchors = lay.anchors()
    crops, targets = [], []
    for img in images:
        for anchor in anchors:
            crops.append(crop_psi(np.asarray(img, dtype=np.float32), anchor, lay))
            targets.append(lay.macro_coord(anchor))
    crops = np.stack(crops)
    targets = np.stack(targets).astype(np.float32)
    errors = []
    for lo in range(0, len(crops), EVAL_BATCH):
        chunk = slice(lo, lo + EVAL_BATCH)
        pred = bundle.discriminator_forward(crops[chunk])["coord_pred"]
        errors.append(np.linalg.norm(pred - targets[chunk], axis=1))
    return float(np.concatenate(errors).mean())


def generate_set(bundle: ModelBundle, rng: np.random.Generator, count: int,
                 extend: int = 0) -> np.ndarray:
    """Full canvases for ``count`` fresh latents (batched for metric use)."""
    out = []
    for lo in range(0, count, EVAL_BATCH):
        n = min(EVAL_BATCH, count - lo)
        zs = rng.uniform(-1.0, 1.0, (n, bundle.arch.latent_dim)).astype(np.float32)
        out.append(bundle.generate_full_batch(zs, extend))
    return np.concatenate(out)


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between latents (linear when nearly parallel)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return ((1.0 - t) * a + t * b).astype(np.float32)
    omega = float(np.arccos(np.clip(float(a @ b) / denom, -1.0, 1.0)))
    if omega < 1e-6:
        mixed = (1.0 - t) * a + t * b
    else:
        mixed = (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)
    return mixed.astype(np.float32)


def guide_from_patch(bundle: ModelBundle, patch: np.ndarray):
    """Estimate (z, coordinate) from one macro patch and render the full scene.

    Returns (canvas, info) where info carries the latent and coordinate the
    discriminator heads read off the patch.  Requires the latent head.
    """
    if not bundle.arch.latent_head:
        raise ValueError("guided generation needs a model trained with the latent head")
    patch = np.asarray(patch, dtype=np.float32)
    lay = bundle.layout
    if patch.shape != (3, lay.macro_h, lay.macro_w):
        raise ValueError(f"patch must be (3, {lay.macro_h}, {lay.macro_w}), got {patch.shape}")
    out = bundle.discriminator_forward(patch[None])
    z_hat = out["latent_pred"][0]
    c_hat = out["coord_pred"][0]
    canvas = bundle.generate_full(np.clip(z_hat, -1.0, 1.0))
    return canvas, {"z": z_hat, "coord": c_hat}
