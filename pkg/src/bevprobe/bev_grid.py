"""BEV grid definition, Gaussian center-heatmap rendering, and file I/O.

A grid is a lattice of cell sample points: integer grid coordinate (i, j)
sits at world position (origin + i * cell_size, origin + j * cell_size).
Heatmaps are float32 tensors laid out [class][y][x] with values in [0, 1].

Ground-truth centers are splatted as unnormalized Gaussians whose radius
follows the classic corner-overlap bound (the smallest radius such that a
shifted box still overlaps the original by at least ``min_overlap``), with
sigma = radius / 3 and peaks max-combined so overlapping objects never sum
above 1.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .geometry import BevBox

_FORMAT_TAG = "bevprobe-grid-v1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class BevGridSpec:
    """Shape and world placement of a BEV grid."""

    size_x: int
    size_y: int
    num_classes: int
    cell_size: float
    origin_x: float
    origin_y: float

    def __post_init__(self) -> None:
        if self.size_x < 1 or self.size_y < 1:
            raise ValueError("grid dimensions must be at least 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if not self.cell_size > 0.0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_classes, self.size_y, self.size_x)

    def world_to_grid(self, point: tuple[float, float]) -> tuple[float, float]:
        """Continuous grid coordinates of a world point."""
        return (
            (point[0] - self.origin_x) / self.cell_size,
            (point[1] - self.origin_y) / self.cell_size,
        )

    def grid_to_world(self, point: tuple[float, float]) -> tuple[float, float]:
        """World position of (possibly fractional) grid coordinates."""
        return (
            self.origin_x + point[0] * self.cell_size,
            self.origin_y + point[1] * self.cell_size,
        )

    def contains_cell(self, x: int, y: int) -> bool:
        return 0 <= x < self.size_x and 0 <= y < self.size_y


def world_to_grid(point: tuple[float, float], spec: BevGridSpec) -> tuple[float, float]:
    return spec.world_to_grid(point)


def grid_to_world(point: tuple[float, float], spec: BevGridSpec) -> tuple[float, float]:
    return spec.grid_to_world(point)


@dataclass(frozen=True)
class Heatmap:
    """Per-class center heatmap over a grid: float32 [C][Y][X] in [0, 1].

    Values are copied and frozen at construction; treat instances as
    immutable.
    """

    spec: BevGridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float32)
        if arr.shape != self.spec.shape:
            raise ValueError(
                f"heatmap shape {arr.shape} does not match grid shape {self.spec.shape}"
            )
        if not ((arr >= 0.0).all() and (arr <= 1.0).all()):
            raise ValueError("heatmap values must lie in [0, 1] and contain no NaNs")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, spec: BevGridSpec) -> "Heatmap":
        return cls(spec, np.zeros(spec.shape, dtype=np.float32))


@dataclass(frozen=True)
class GaussianRenderConfig:
    """Controls the footprint-to-radius rule for center splats."""

    min_overlap: float = 0.1
    min_radius_cells: int = 2

    def __post_init__(self) -> None:
        if not 0.0 < self.min_overlap < 1.0:
            raise ValueError(f"min_overlap must lie in (0, 1), got {self.min_overlap}")
        if self.min_radius_cells < 1:
            raise ValueError("min_radius_cells must be at least 1")


def gaussian_radius(extent_a: float, extent_b: float, min_overlap: float) -> float:
    """Continuous corner-overlap radius for a box of the given cell extents.

    Smallest of the three quadratic bounds guaranteeing IoU >= min_overlap
    between the original footprint and one shifted by the radius. Symmetric
    in its two extents.
    """
    # Canonical argument order keeps the symmetry exact in floating point.
    h, w = max(extent_a, extent_b), min(extent_a, extent_b)

    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap)
    sq1 = math.sqrt(b1 * b1 - 4.0 * a1 * c1)
    r1 = (b1 - sq1) / (2.0 * a1)

    a2 = 4.0
    b2 = 2.0 * (h + w)
    c2 = (1.0 - min_overlap) * w * h
    sq2 = math.sqrt(b2 * b2 - 4.0 * a2 * c2)
    r2 = (b2 - sq2) / (2.0 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (h + w)
    c3 = (min_overlap - 1.0) * w * h
    sq3 = math.sqrt(b3 * b3 - 4.0 * a3 * c3)
    r3 = (b3 + sq3) / (2.0 * a3)

    return min(r1, r2, r3)


def radius_for_box(box: BevBox, spec: BevGridSpec, cfg: GaussianRenderConfig) -> int:
    """Integer splat radius in cells for a box footprint on a grid."""
    r = gaussian_radius(
        box.length / spec.cell_size, box.width / spec.cell_size, cfg.min_overlap
    )
    return max(cfg.min_radius_cells, int(r))


def draw_gaussian_peak(
    canvas: np.ndarray, x: int, y: int, radius: int, peak: float = 1.0
) -> bool:
    """Max-combine a Gaussian bump (sigma = radius / 3) into a 2D canvas.

    The bump is evaluated on the integer lattice of a (2r+1)^2 window
    centered at (x, y); cells beyond the canvas are dropped. The center
    cell receives exactly ``peak``. Returns False when (x, y) is off-canvas.
    """
    ny, nx = canvas.shape
    if not (0 <= x < nx and 0 <= y < ny):
        return False
    sigma = radius / 3.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    bump = peak * np.exp(-(ax[None, :] ** 2 + ax[:, None] ** 2) / (2.0 * sigma * sigma))
    x0, x1 = max(0, x - radius), min(nx, x + radius + 1)
    y0, y1 = max(0, y - radius), min(ny, y + radius + 1)
    window = bump[
        y0 - (y - radius) : y1 - (y - radius), x0 - (x - radius) : x1 - (x - radius)
    ]
    region = canvas[y0:y1, x0:x1]
    np.maximum(region, window, out=region)
    return True


def render_gaussian_heatmap(
    gts: Sequence[BevBox],
    spec: BevGridSpec,
    cfg: GaussianRenderConfig = GaussianRenderConfig(),
) -> tuple[Heatmap, int]:
    """Render ground-truth centers into a fresh heatmap.

    Each box splats a Gaussian into its class channel at the rounded center
    cell; overlapping splats are combined by elementwise max. Boxes whose
    rounded center falls outside the grid are skipped; the skip count is
    returned alongside the heatmap.
    """
    canvas = np.zeros(spec.shape, dtype=np.float64)
    skipped = 0
    for gt in gts:
        if not 0 <= gt.class_id < spec.num_classes:
            raise ValueError(f"class_id {gt.class_id} outside [0, {spec.num_classes})")
        gx, gy = spec.world_to_grid((gt.cx, gt.cy))
        x, y = int(round(gx)), int(round(gy))
        radius = radius_for_box(gt, spec, cfg)
        if not draw_gaussian_peak(canvas[gt.class_id], x, y, radius, peak=1.0):
            skipped += 1
    return Heatmap(spec, canvas), skipped


def _spec_to_dict(spec: BevGridSpec) -> dict:
    return {
        "size_x": spec.size_x,
        "size_y": spec.size_y,
        "num_classes": spec.num_classes,
        "cell_size": spec.cell_size,
        "origin_x": spec.origin_x,
        "origin_y": spec.origin_y,
    }


def _spec_from_dict(d: dict, path: str | os.PathLike) -> BevGridSpec:
    try:
        return BevGridSpec(
            size_x=int(d["size_x"]),
            size_y=int(d["size_y"]),
            num_classes=int(d["num_classes"]),
            cell_size=float(d["cell_size"]),
            origin_x=float(d["origin_x"]),
            origin_y=float(d["origin_y"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid grid spec in header: {exc}") from exc


def write_grid_tensor(
    path: str | os.PathLike, spec: BevGridSpec, values: np.ndarray, dtype: str
) -> None:
    """Write a [C][Y][X] tensor as a one-line JSON header plus a raw blob.

    The header pins the grid spec, the element dtype tag ("f32" or "u8"),
    the "CYX" layout and little-endian byte order. The blob is the C-order
    tensor bytes. The format is deterministic: equal inputs give equal
    bytes.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype tag {dtype!r}")
    arr = np.ascontiguousarray(values, dtype=_DTYPES[dtype])
    if arr.shape != spec.shape:
        raise ValueError(f"tensor shape {arr.shape} does not match grid {spec.shape}")
    header = {
        "format": _FORMAT_TAG,
        "spec": _spec_to_dict(spec),
        "dtype": dtype,
        "layout": "CYX",
        "endianness": "little",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.tobytes(order="C"))


def read_grid_tensor(path: str | os.PathLike) -> tuple[BevGridSpec, np.ndarray, str]:
    """Read a tensor written by :func:`write_grid_tensor`.

    Returns (spec, values, dtype tag). Raises DataError on any malformed
    header, unsupported field, or size mismatch between header and blob.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read grid tensor {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != _FORMAT_TAG:
        raise DataError(f"{path}: not a {_FORMAT_TAG} file")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise DataError(f"{path}: unsupported dtype {dtype!r}")
    if header.get("layout") != "CYX":
        raise DataError(f"{path}: unsupported layout {header.get('layout')!r}")
    if header.get("endianness") != "little":
        raise DataError(f"{path}: unsupported endianness {header.get('endianness')!r}")
    spec = _spec_from_dict(header.get("spec") or {}, path)
    blob = raw[newline + 1 :]
    np_dtype = _DTYPES[dtype]
    expected = spec.num_classes * spec.size_y * spec.size_x * np_dtype.itemsize
    if len(blob) != expected:
        raise DataError(
            f"{path}: blob holds {len(blob)} bytes, header implies {expected}"
        )
    values = np.frombuffer(blob, dtype=np_dtype).reshape(spec.shape)
    return spec, values, dtype


def save_heatmap(path: str | os.PathLike, heatmap: Heatmap) -> None:
    """Persist a heatmap to the grid-tensor container."""
    write_grid_tensor(path, heatmap.spec, heatmap.values, "f32")


def load_heatmap(path: str | os.PathLike) -> Heatmap:
    """Load a heatmap persisted by :func:`save_heatmap`."""
    spec, values, dtype = read_grid_tensor(path)
    if dtype != "f32":
        raise DataError(f"{path}: expected an f32 heatmap, found dtype {dtype!r}")
    try:
        return Heatmap(spec, values)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
