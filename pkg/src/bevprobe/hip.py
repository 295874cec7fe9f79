"""Multi-stage hard-instance probing over BEV center heatmaps.

Each stage takes the k highest-scoring cells that no earlier stage has
claimed, then marks the neighborhood of every selection in a per-class
positive mask. Masks accumulate across stages by elementwise max, so later
stages are forced onto previously missed (hard) instances. Three masking
modes are supported: the selected cell only, a square pooling window
(small classes keep the single cell), and the footprint of a predicted box.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bev_grid import BevGridSpec, Heatmap, read_grid_tensor, write_grid_tensor
from .errors import DataError
from .geometry import BevBox


class MaskType(enum.Enum):
    POINT = "point"
    POOLING = "pooling"
    BOX = "box"


@dataclass(frozen=True)
class HipConfig:
    """Stage layout and masking behavior of the probing loop."""

    num_stages: int = 3
    k_per_stage: tuple[int, ...] = (200, 200, 200)
    mask_type: MaskType = MaskType.POINT
    small_classes: frozenset[int] = frozenset()
    pooling_kernel: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_per_stage", tuple(int(k) for k in self.k_per_stage))
        object.__setattr__(self, "small_classes", frozenset(self.small_classes))
        if self.num_stages < 1:
            raise ValueError("num_stages must be at least 1")
        if len(self.k_per_stage) != self.num_stages:
            raise ValueError(
                f"k_per_stage has {len(self.k_per_stage)} entries for "
                f"{self.num_stages} stages"
            )
        if any(k < 1 for k in self.k_per_stage):
            raise ValueError("every stage budget must be at least 1")
        if self.pooling_kernel < 1 or self.pooling_kernel % 2 == 0:
            raise ValueError(
                f"pooling_kernel must be a positive odd integer, got {self.pooling_kernel}"
            )

    @property
    def total_k(self) -> int:
        return sum(self.k_per_stage)


@dataclass(frozen=True, slots=True)
class Candidate:
    """One selected heatmap cell: grid location, class, score, stage."""

    x: int
    y: int
    class_id: int
    score: float
    stage: int
    world_x: float
    world_y: float


def _frozen_bits(bits: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    arr = np.array(bits, dtype=np.uint8)
    if arr.shape != spec.shape:
        raise ValueError(f"mask shape {arr.shape} does not match grid {spec.shape}")
    if not (arr <= 1).all():
        raise ValueError("mask bits must be 0 or 1")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PositiveMask:
    """Per-class 0/1 grid marking cells claimed by one stage's selections."""

    spec: BevGridSpec
    bits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _frozen_bits(self.bits, self.spec))


@dataclass(frozen=True)
class AccumulatedPositiveMask:
    """Elementwise-max union of stage masks seen so far."""

    spec: BevGridSpec
    bits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _frozen_bits(self.bits, self.spec))

    @classmethod
    def zeros(cls, spec: BevGridSpec) -> "AccumulatedPositiveMask":
        return cls(spec, np.zeros(spec.shape, dtype=np.uint8))


@dataclass(frozen=True)
class TopKResult:
    candidates: tuple[Candidate, ...]
    degenerate: bool


def topk_select(
    heatmap: Heatmap,
    accumulated: AccumulatedPositiveMask | None,
    k: int,
    stage: int = 0,
) -> TopKResult:
    """Pick the k best unmasked cells under a deterministic total order.

    Cells are ranked by score descending, ties broken by ascending
    (class, y, x). With fewer than k positive-score unmasked cells the
    selection is padded with zero-score cells (or truncated when the grid
    runs out) and flagged degenerate.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    spec = heatmap.spec
    if accumulated is not None and accumulated.spec != spec:
        raise ValueError("accumulated mask grid spec does not match the heatmap")
    flat = heatmap.values.ravel()
    if accumulated is None:
        valid = np.arange(flat.size)
    else:
        valid = np.flatnonzero(accumulated.bits.ravel() == 0)
    if valid.size == 0:
        return TopKResult((), True)
    scores = flat[valid]
    if k >= valid.size:
        chosen = valid
    else:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        above = valid[scores > kth]
        at_kth = valid[scores == kth]
        chosen = np.concatenate([above, at_kth[: k - above.size]])
    # Flat C-order index equals (class * Y + y) * X + x, so ascending index
    # is exactly the (class, y, x) tie order.
    order = np.lexsort((chosen, -flat[chosen].astype(np.float64)))
    chosen = chosen[order]
    plane = spec.size_y * spec.size_x
    cands = []
    for idx in chosen.tolist():
        c, rem = divmod(idx, plane)
        y, x = divmod(rem, spec.size_x)
        wx, wy = spec.grid_to_world((x, y))
        cands.append(Candidate(x, y, c, float(flat[idx]), stage, wx, wy))
    degenerate = sum(1 for cd in cands if cd.score > 0.0) < k
    return TopKResult(tuple(cands), degenerate)


def _rasterize_box(channel_bits: np.ndarray, box: BevBox, spec: BevGridSpec) -> None:
    """Set bits for every cell whose sample point lies in the box footprint.

    Containment is inclusive of the boundary. Cells outside the grid are
    ignored.
    """
    corners = box.corners()
    gx = (corners[:, 0] - spec.origin_x) / spec.cell_size
    gy = (corners[:, 1] - spec.origin_y) / spec.cell_size
    x0 = max(0, int(math.floor(gx.min())))
    x1 = min(spec.size_x - 1, int(math.ceil(gx.max())))
    y0 = max(0, int(math.floor(gy.min())))
    y1 = min(spec.size_y - 1, int(math.ceil(gy.max())))
    if x0 > x1 or y0 > y1:
        return
    xs = spec.origin_x + np.arange(x0, x1 + 1) * spec.cell_size
    ys = spec.origin_y + np.arange(y0, y1 + 1) * spec.cell_size
    dx = xs[None, :] - box.cx
    dy = ys[:, None] - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= 0.5 * box.length) & (np.abs(v) <= 0.5 * box.width)
    region = channel_bits[y0 : y1 + 1, x0 : x1 + 1]
    region[inside] = 1


def build_positive_mask(
    candidates: Sequence[Candidate],
    cfg: HipConfig,
    spec: BevGridSpec,
    boxes: Sequence[BevBox] | None = None,
) -> PositiveMask:
    """Mark the cells claimed by one stage's candidates.

    POINT marks each selected cell; POOLING marks a pooling_kernel square
    around it except for small classes, which keep the single cell; BOX
    marks every cell whose sample point falls inside the candidate's
    predicted box (one box per candidate, required).
    """
    bits = np.zeros(spec.shape, dtype=np.uint8)
    for cd in candidates:
        if not (0 <= cd.class_id < spec.num_classes and spec.contains_cell(cd.x, cd.y)):
            raise ValueError(f"candidate {cd} lies outside the grid")
    if cfg.mask_type is MaskType.POINT:
        for cd in candidates:
            bits[cd.class_id, cd.y, cd.x] = 1
    elif cfg.mask_type is MaskType.POOLING:
        half = cfg.pooling_kernel // 2
        for cd in candidates:
            if cd.class_id in cfg.small_classes:
                bits[cd.class_id, cd.y, cd.x] = 1
            else:
                y0, y1 = max(0, cd.y - half), min(spec.size_y, cd.y + half + 1)
                x0, x1 = max(0, cd.x - half), min(spec.size_x, cd.x + half + 1)
                bits[cd.class_id, y0:y1, x0:x1] = 1
    elif cfg.mask_type is MaskType.BOX:
        if boxes is None:
            raise ValueError("box masking requires a predicted box per candidate")
        if len(boxes) != len(candidates):
            raise ValueError(
                f"{len(candidates)} candidates but {len(boxes)} predicted boxes"
            )
        for cd, box in zip(candidates, boxes):
            bits[cd.class_id, cd.y, cd.x] = 1
            _rasterize_box(bits[cd.class_id], box, spec)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown mask type {cfg.mask_type!r}")
    return PositiveMask(spec, bits)


def accumulate_mask(
    accumulated: AccumulatedPositiveMask, mask: PositiveMask
) -> AccumulatedPositiveMask:
    """Fold one stage mask into the running union (elementwise max)."""
    if accumulated.spec != mask.spec:
        raise ValueError("mask grid specs do not match")
    return AccumulatedPositiveMask(
        accumulated.spec, np.maximum(accumulated.bits, mask.bits)
    )


def apply_mask(heatmap: Heatmap, accumulated: AccumulatedPositiveMask) -> Heatmap:
    """Zero out claimed cells: values * (1 - bits), untouched elsewhere."""
    if heatmap.spec != accumulated.spec:
        raise ValueError("mask grid spec does not match the heatmap")
    keep = (1 - accumulated.bits).astype(np.float32)
    return Heatmap(heatmap.spec, heatmap.values * keep)


StageSource = Callable[[int, tuple[Candidate, ...]], Heatmap]
BoxProvider = Callable[[Sequence[Candidate]], Sequence[BevBox]]


@dataclass(frozen=True)
class StageTrace:
    """Everything one stage saw and produced."""

    stage: int
    masked_heatmap: Heatmap
    candidates: tuple[Candidate, ...]
    positive_mask: PositiveMask
    accumulated_mask: AccumulatedPositiveMask
    degenerate: bool


@dataclass(frozen=True)
class HipResult:
    candidates: tuple[Candidate, ...]
    accumulated_mask: AccumulatedPositiveMask
    traces: tuple[StageTrace, ...]
    degenerate: bool


def run_hip(
    stage_source: Sequence[Heatmap] | StageSource,
    cfg: HipConfig,
    spec: BevGridSpec,
    box_provider: BoxProvider | None = None,
) -> HipResult:
    """Run the full staged probing loop.

    ``stage_source`` is either a sequence of exactly ``cfg.num_stages``
    heatmaps or a callable ``(stage, candidates_so_far) -> Heatmap``. BOX
    masking additionally needs ``box_provider`` mapping a stage's
    candidates to one predicted box each. Errors are re-raised with the
    failing stage identified.
    """
    if callable(stage_source):
        fetch = stage_source
    else:
        stage_maps = list(stage_source)
        if len(stage_maps) != cfg.num_stages:
            raise ValueError(
                f"expected {cfg.num_stages} stage heatmaps, got {len(stage_maps)}"
            )
        fetch = lambda stage, _cands: stage_maps[stage]
    if cfg.mask_type is MaskType.BOX and box_provider is None:
        raise ValueError("box masking requires a box_provider")

    accumulated = AccumulatedPositiveMask.zeros(spec)
    collected: list[Candidate] = []
    traces: list[StageTrace] = []
    for stage in range(cfg.num_stages):
        try:
            hm = fetch(stage, tuple(collected))
        except Exception as exc:
            raise RuntimeError(f"stage {stage}: heatmap source failed: {exc}") from exc
        if hm.spec != spec:
            raise ValueError(f"stage {stage}: heatmap grid spec differs from the run's")
        masked = apply_mask(hm, accumulated)
        result = topk_select(hm, accumulated, cfg.k_per_stage[stage], stage=stage)
        boxes = None
        if cfg.mask_type is MaskType.BOX:
            boxes = list(box_provider(result.candidates))
        try:
            stage_mask = build_positive_mask(result.candidates, cfg, spec, boxes=boxes)
        except ValueError as exc:
            raise ValueError(f"stage {stage}: {exc}") from exc
        accumulated = accumulate_mask(accumulated, stage_mask)
        traces.append(
            StageTrace(
                stage, masked, result.candidates, stage_mask, accumulated,
                result.degenerate,
            )
        )
        collected.extend(result.candidates)
    return HipResult(
        tuple(collected),
        accumulated,
        tuple(traces),
        any(t.degenerate for t in traces),
    )


def candidate_to_dict(cand: Candidate) -> dict:
    """JSON-ready record; key order is part of the dump format."""
    return {
        "stage": cand.stage,
        "x": cand.x,
        "y": cand.y,
        "class_id": cand.class_id,
        "score": cand.score,
        "world_x": cand.world_x,
        "world_y": cand.world_y,
    }


def candidate_from_dict(d: dict) -> Candidate:
    try:
        return Candidate(
            x=int(d["x"]),
            y=int(d["y"]),
            class_id=int(d["class_id"]),
            score=float(d["score"]),
            stage=int(d["stage"]),
            world_x=float(d["world_x"]),
            world_y=float(d["world_y"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid candidate record {d!r}: {exc}") from exc


def candidates_to_jsonl(candidates: Sequence[Candidate]) -> str:
    """One compact JSON object per line, in candidate order."""
    lines = [
        json.dumps(candidate_to_dict(cd), separators=(",", ":")) for cd in candidates
    ]
    return "".join(line + "\n" for line in lines)


def candidates_from_jsonl(text: str) -> list[Candidate]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: malformed JSON: {exc}") from exc
        out.append(candidate_from_dict(record))
    return out


def save_mask(path: str | os.PathLike, mask: PositiveMask | AccumulatedPositiveMask) -> None:
    """Persist mask bits in the u8 grid-tensor container."""
    write_grid_tensor(path, mask.spec, mask.bits, "u8")


def load_accumulated_mask(path: str | os.PathLike) -> AccumulatedPositiveMask:
    spec, values, dtype = read_grid_tensor(path)
    if dtype != "u8":
        raise DataError(f"{path}: expected a u8 mask, found dtype {dtype!r}")
    try:
        return AccumulatedPositiveMask(spec, values)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
