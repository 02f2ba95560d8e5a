"""Coordinate grids, patch assembly, and cropping for patch-based generation.

The image plane is divided into a full grid of micro cells (each ``S`` pixels
square).  A generator produces one micro patch per cell, conditioned on the
cell's normalized coordinate; ``merge_phi`` concatenates an ``N x M`` block of
micro patches into a macro patch, and ``crop_psi`` extracts the matching pixel
region from a real image.  Discriminators only ever see macro patches.

Two topologies are supported:

* ``planar``: both axes normalized to [-1, 1] with equal spacing.  Axis values
  are built by mirroring the negative half so that ``v[k] == -v[K-1-k]``
  exactly (the naive ``-1 + 2k/(K-1)`` formula breaks this by one ulp).
* ``cylindrical``: the horizontal axis wraps.  Positions are embedded as
  (cos th, sin th) so that horizontally adjacent cells are chord-equidistant
  including the wrap seam; coordinates are (cos th, sin th, y).  The angular
  input is wrapped into [-1, 1) *before* scaling by pi, so the two labels of
  the seam produce bitwise-identical embeddings.

Axes accept an ``extend`` count: ``extend=e`` continues the spacing ``e``
positions beyond each end (mirrored, so antisymmetry still holds exactly).
Anchor grids extend consistently: extended anchor (i, j) covers extended
micro rows i..i+N-1, exactly like in-range anchors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

TOPOLOGIES = ("planar", "cylindrical")


def _axis_value(i: int, count: int, spacing: float) -> float:
    # i may lie outside [0, count-1] for extended axes; mirror keeps v[i] == -v[count-1-i]
    j = count - 1 - i
    if i == j:
        return 0.0
    if i < j:
        if i >= 0:
            return -1.0 + i * spacing
        return -(1.0 + (-i) * spacing)
    return -_axis_value(j, count, spacing)


def axis_coords(count: int, extend: int = 0) -> np.ndarray:
    """Normalized positions of ``count`` grid cells on [-1, 1].

    Spacing is ``2/(count-1)``; ``extend`` continues that spacing beyond each
    end.  The result is exactly antisymmetric: ``v[k] == -v[-1-k]``.
    A single cell sits at 0 (and cannot be extended: its spacing is undefined).
    """
    if count < 1:
        raise ValueError(f"axis_coords: count must be >= 1, got {count}")
    if extend < 0:
        raise ValueError(f"axis_coords: extend must be >= 0, got {extend}")
    if count == 1:
        if extend:
            raise ValueError("axis_coords: cannot extend a single-cell axis (no spacing)")
        return np.zeros(1)
    spacing = 2.0 / (count - 1)
    return np.array(
        [_axis_value(i, count, spacing) for i in range(-extend, count + extend)], dtype=np.float64
    )


def angular_axis(count: int) -> np.ndarray:
    """Angular positions of ``count`` cells around a cylinder, in [-1, 1).

    Spacing is ``2/count`` (the interval wraps, so position 1 is identified
    with -1 and is not emitted).
    """
    if count < 1:
        raise ValueError(f"angular_axis: count must be >= 1, got {count}")
    return np.arange(count, dtype=np.float64) * (2.0 / count) - 1.0


def wrap_unit(v):
    """Wrap angular positions into [-1, 1); wrap_unit(1.0) == wrap_unit(-1.0) bitwise."""
    return ((np.asarray(v, dtype=np.float64) + 1.0) % 2.0) - 1.0


def cylindrical_embed(v):
    """Embed angular position(s) v as (cos(pi*w), sin(pi*w)) with w = wrap_unit(v).

    Wrapping first guarantees embed(-1) == embed(1) bitwise; adjacent cells of
    an angular_axis are chord-equidistant including the wrap pair.
    """
    t = np.pi * wrap_unit(v)
    return np.cos(t), np.sin(t)


def interp_coords(c_a: np.ndarray, c_b: np.ndarray, t: float, topology: str = "planar") -> np.ndarray:
    """Interpolate between two coordinates of the same topology.

    Planar coordinates interpolate linearly.  Cylindrical coordinates
    (cos, sin, y) interpolate the angle along the shortest arc and the height
    linearly, then re-embed, so the result stays on the cylinder (unit norm in
    the first two components).  t=0.0 and t=1.0 return the endpoints exactly.
    """
    c_a = np.asarray(c_a, dtype=np.float64)
    c_b = np.asarray(c_b, dtype=np.float64)
    if c_a.shape != c_b.shape:
        raise ValueError(f"interp_coords: shape mismatch {c_a.shape} vs {c_b.shape}")
    if t == 0.0:
        return c_a.copy()
    if t == 1.0:
        return c_b.copy()
    if topology == "planar":
        return (1.0 - t) * c_a + t * c_b
    if topology != "cylindrical":
        raise ValueError(f"interp_coords: unknown topology {topology!r}")
    th_a = np.arctan2(c_a[1], c_a[0])
    th_b = np.arctan2(c_b[1], c_b[0])
    dth = (th_b - th_a + np.pi) % (2.0 * np.pi) - np.pi  # shortest arc
    th = th_a + t * dth
    y = (1.0 - t) * c_a[2] + t * c_b[2]
    return np.array([np.cos(th), np.sin(th), y])


@dataclass(frozen=True)
class PatchLayout:
    """Grid geometry: full canvas grid, macro patch extent, micro patch size.

    grid_h, grid_w:
        Micro cells per column / row of the full canvas.
    macro_rows, macro_cols:
        Micro cells per macro patch (N x M).
    micro_size:
        Micro patch edge in pixels (S).
    topology:
        "planar" or "cylindrical" (horizontal wrap).
    """

    grid_h: int
    grid_w: int
    macro_rows: int
    macro_cols: int
    micro_size: int
    topology: str = "planar"

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        for name in ("grid_h", "grid_w", "macro_rows", "macro_cols", "micro_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.macro_rows > self.grid_h:
            raise ValueError(f"macro_rows {self.macro_rows} exceeds grid_h {self.grid_h}")
        if self.macro_cols > self.grid_w:
            raise ValueError(f"macro_cols {self.macro_cols} exceeds grid_w {self.grid_w}")

    # pixel extents
    @property
    def canvas_h(self) -> int:
        return self.grid_h * self.micro_size

    @property
    def canvas_w(self) -> int:
        return self.grid_w * self.micro_size

    @property
    def macro_h(self) -> int:
        return self.macro_rows * self.micro_size

    @property
    def macro_w(self) -> int:
        return self.macro_cols * self.micro_size

    # anchor grid (top-left micro cell of a macro patch)
    @property
    def anchor_rows(self) -> int:
        return self.grid_h - self.macro_rows + 1

    @property
    def anchor_cols(self) -> int:
        if self.topology == "cylindrical":
            return self.grid_w  # wrap: every column anchors a macro patch
        return self.grid_w - self.macro_cols + 1

    @property
    def coord_dim(self) -> int:
        return 3 if self.topology == "cylindrical" else 2

    # ------------------------------------------------------------------- axes

    def _check_col_extend(self, extend: int):
        if extend and self.topology == "cylindrical":
            raise ValueError("cylindrical layouts cannot extend horizontally (the axis wraps)")

    def micro_row_axis(self, extend: int = 0) -> np.ndarray:
        return axis_coords(self.grid_h, extend)

    def micro_col_axis(self, extend: int = 0) -> np.ndarray:
        if self.topology == "cylindrical":
            self._check_col_extend(extend)
            return angular_axis(self.grid_w)
        return axis_coords(self.grid_w, extend)

    def anchor_row_axis(self, extend: int = 0) -> np.ndarray:
        return axis_coords(self.anchor_rows, extend)

    def anchor_col_axis(self, extend: int = 0) -> np.ndarray:
        if self.topology == "cylindrical":
            self._check_col_extend(extend)
            return angular_axis(self.grid_w)
        return axis_coords(self.anchor_cols, extend)

    # ------------------------------------------------------------ coordinates

    def _assemble(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Coordinate matrix from row positions and column positions."""
        r, c = len(rows), len(cols)
        out = np.empty((r, c, self.coord_dim), dtype=np.float64)
        if self.topology == "cylindrical":
            cos, sin = cylindrical_embed(cols)
            out[:, :, 0] = cos[None, :]
            out[:, :, 1] = sin[None, :]
            out[:, :, 2] = rows[:, None]
        else:
            out[:, :, 0] = rows[:, None]
            out[:, :, 1] = cols[None, :]
        return out

    def full_micro_coords(self, extend: int = 0) -> np.ndarray:
        """Micro coordinates of every cell of the (possibly extended) canvas.

        Planar: [grid_h + 2e, grid_w + 2e, 2] with entries (y, x).
        Cylindrical: [grid_h + 2e, grid_w, 3] with entries (cos, sin, y);
        only the vertical axis extends.
        """
        cols_extend = 0 if self.topology == "cylindrical" else extend
        return self._assemble(self.micro_row_axis(extend), self.micro_col_axis(cols_extend))

    def micro_coord_matrix(self, anchor: tuple[int, int], extend: int = 0) -> np.ndarray:
        """Micro coordinates of the N x M cells covered by ``anchor``.

        ``anchor`` indexes the (extended) anchor grid; cell (n, m) of the
        macro patch is extended micro cell (i + n, j + m), wrapping
        horizontally on cylindrical layouts.
        """
        i, j = self._check_anchor(anchor, extend)
        rows = self.micro_row_axis(extend)[i : i + self.macro_rows]
        if self.topology == "cylindrical":
            axis = self.micro_col_axis()
            cols = axis[(j + np.arange(self.macro_cols)) % self.grid_w]
        else:
            cols = self.micro_col_axis(extend)[j : j + self.macro_cols]
        return self._assemble(rows, cols)

    def macro_coord(self, anchor: tuple[int, int], extend: int = 0) -> np.ndarray:
        """Normalized coordinate of a macro patch anchored at ``anchor``."""
        i, j = self._check_anchor(anchor, extend)
        y = self.anchor_row_axis(extend)[i]
        if self.topology == "cylindrical":
            cos, sin = cylindrical_embed(self.anchor_col_axis()[j])
            return np.array([cos, sin, y])
        x = self.anchor_col_axis(extend)[j]
        return np.array([y, x])

    def _check_anchor(self, anchor, extend: int) -> tuple[int, int]:
        i, j = int(anchor[0]), int(anchor[1])
        self._check_col_extend(extend)
        rows = self.anchor_rows + 2 * extend
        cols = self.anchor_cols if self.topology == "cylindrical" else self.anchor_cols + 2 * extend
        if not (0 <= i < rows and 0 <= j < cols):
            raise IndexError(f"anchor {anchor} outside {rows}x{cols} anchor grid (extend={extend})")
        return i, j

    def anchors(self, extend: int = 0) -> list[tuple[int, int]]:
        """All anchor positions of the (extended) anchor grid, row-major."""
        self._check_col_extend(extend)
        rows = self.anchor_rows + 2 * extend
        cols = self.anchor_cols if self.topology == "cylindrical" else self.anchor_cols + 2 * extend
        return [(i, j) for i in range(rows) for j in range(cols)]

    # continuous (pixel-granular) coordinates, used by the sampling ablation;
    # at integer indices these agree with the discrete axes to within 1 ulp
    def macro_coord_frac(self, fi: float, fj: float) -> np.ndarray:
        y = 0.0 if self.anchor_rows == 1 else -1.0 + 2.0 * fi / (self.anchor_rows - 1)
        if self.topology == "cylindrical":
            cos, sin = cylindrical_embed(-1.0 + 2.0 * fj / self.grid_w)
            return np.array([cos, sin, y])
        x = 0.0 if self.anchor_cols == 1 else -1.0 + 2.0 * fj / (self.anchor_cols - 1)
        return np.array([y, x])

    def micro_coords_frac(self, fi: float, fj: float) -> np.ndarray:
        """Micro coordinates of the macro cells for a fractional anchor."""
        out = np.empty((self.macro_rows, self.macro_cols, self.coord_dim), dtype=np.float64)
        rows = np.array(
            [0.0 if self.grid_h == 1 else -1.0 + 2.0 * (fi + n) / (self.grid_h - 1)
             for n in range(self.macro_rows)]
        )
        if self.topology == "cylindrical":
            cols = np.array([-1.0 + 2.0 * (fj + m) / self.grid_w for m in range(self.macro_cols)])
        else:
            cols = np.array(
                [0.0 if self.grid_w == 1 else -1.0 + 2.0 * (fj + m) / (self.grid_w - 1)
                 for m in range(self.macro_cols)]
            )
        return self._assemble(rows, cols)


def merge_phi(patches) -> np.ndarray:
    """Concatenate a grid of micro patches into one image, without overlap.

    ``patches`` is [R, C, 3, S, S] (array or nested sequence); the result is
    [3, R*S, C*S].  Pure memory movement: every output pixel is a bitwise copy
    of exactly one input pixel.
    """
    arr = np.asarray(patches)
    if arr.ndim != 5:
        raise ValueError(f"merge_phi: expected [R, C, ch, S, S] patches, got shape {arr.shape}")
    r, c, ch, sh, sw = arr.shape
    return np.ascontiguousarray(arr.transpose(2, 0, 3, 1, 4).reshape(ch, r * sh, c * sw))


def crop_psi(full: np.ndarray, anchor: tuple[int, int], layout: PatchLayout) -> np.ndarray:
    """Extract the macro patch anchored at ``anchor`` from a full image.

    ``full`` is [ch, canvas_h, canvas_w].  Cylindrical layouts wrap columns.
    The inverse relation with merge_phi is exact: cropping a merged canvas at
    any anchor returns bitwise the same pixels as merging that anchor's cells.
    """
    full = np.asarray(full)
    if full.ndim != 3 or full.shape[1] != layout.canvas_h or full.shape[2] != layout.canvas_w:
        raise ValueError(
            f"crop_psi: image shape {full.shape} does not match canvas "
            f"[*, {layout.canvas_h}, {layout.canvas_w}]"
        )
    i, j = layout._check_anchor(anchor, 0)
    s = layout.micro_size
    rows = slice(i * s, (i + layout.macro_rows) * s)
    if layout.topology == "cylindrical":
        cols = (j * s + np.arange(layout.macro_cols * s)) % layout.canvas_w
        return np.ascontiguousarray(full[:, rows, :][:, :, cols])
    return np.ascontiguousarray(full[:, rows, j * s : (j + layout.macro_cols) * s])


def extended_micro_coords(layout: PatchLayout, extend: int) -> np.ndarray:
    """Coordinate matrix for generating beyond the training canvas."""
    return layout.full_micro_coords(extend)


@lru_cache(maxsize=None)
def _anchor_array(layout: PatchLayout, extend: int) -> tuple[tuple[int, int], ...]:
    return tuple(layout.anchors(extend))


def sample_anchor(layout: PatchLayout, rng: np.random.Generator, extend: int = 0) -> tuple[int, int]:
    """Draw an anchor uniformly from the (extended) anchor grid."""
    grid = _anchor_array(layout, extend)
    return grid[int(rng.integers(len(grid)))]
