"""Synthetic BEV scenes and paired probing-vs-baseline experiments.

A scene is a set of ground-truth boxes, a per-object peak amplitude, and a
field of single-cell clutter peaks. An oracle detector renders stage
heatmaps directly from this state: every object splats a Gaussian at its
center with its amplitude as the peak, and objects that no candidate has
matched yet get their amplitude scaled by ``stage_gain ** stage`` (capped
at 1), modeling a detector that re-concentrates capacity on what it
missed once earlier detections are claimed by the positive masks.

Experiments run two arms per scene with equal candidate budget: a staged
probing arm and a single-pass baseline. Scene generation and both arms
are fully determined by the experiment seed; scenes are independent, so
runs may be parallelized across processes without changing any result.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .assignment import MatchConfig, MatchMetric, classify_stage
from .bev_grid import BevGridSpec, GaussianRenderConfig, Heatmap, draw_gaussian_peak, radius_for_box
from .errors import ConfigError, DataError
from .geometry import BevBox
from .hip import Candidate, HipConfig, MaskType, run_hip
from .metrics import RecallConfig, RecallReport, average_recall, merge_reports

_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SceneParams:
    """Scene population: how many objects, of what class and size, where.

    ``size_table[c]`` is (mean length, mean width, jitter fraction) for
    class c; sizes are drawn uniformly within +-jitter of the mean.
    ``class_mix`` must sum to 1. Objects of the same class keep at least
    ``min_same_class_separation`` meters between centers.
    """

    rng_seed: int
    num_objects_range: tuple[int, int]
    class_mix: tuple[float, ...]
    size_table: tuple[tuple[float, float, float], ...]
    spec: BevGridSpec
    min_same_class_separation: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "num_objects_range", tuple(int(n) for n in self.num_objects_range))
        object.__setattr__(self, "class_mix", tuple(float(p) for p in self.class_mix))
        object.__setattr__(
            self, "size_table", tuple(tuple(float(v) for v in row) for row in self.size_table)
        )
        lo, hi = self.num_objects_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad num_objects_range {self.num_objects_range}")
        if len(self.class_mix) != self.spec.num_classes:
            raise ValueError("class_mix length must equal the grid's class count")
        if len(self.size_table) != self.spec.num_classes:
            raise ValueError("size_table length must equal the grid's class count")
        if any(p < 0.0 for p in self.class_mix):
            raise ValueError("class_mix entries must be non-negative")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must sum to 1, got {sum(self.class_mix)}")
        for c, row in enumerate(self.size_table):
            if len(row) != 3:
                raise ValueError(f"size_table[{c}] must be (length, width, jitter)")
            l, w, j = row
            if not (l > 0.0 and w > 0.0):
                raise ValueError(f"size_table[{c}] mean footprint must be positive")
            if not 0.0 <= j < 1.0:
                raise ValueError(f"size_table[{c}] jitter must lie in [0, 1)")
        if not self.min_same_class_separation > 0.0:
            raise ValueError("min_same_class_separation must be positive")


@dataclass(frozen=True)
class DetectabilityModel:
    """How visible each object is to the oracle detector, per stage.

    A fraction of objects is easy (amplitude ``easy_amplitude``); the rest
    draw a hard amplitude strictly below it. Clutter peaks are single-cell
    false responses kept at least ``clutter_clearance`` meters from any
    same-class object center. ``detect_eta`` is the center-distance by
    which a collected candidate counts as having found an object, which
    then stops receiving the stage gain.
    """

    easy_fraction: float
    easy_amplitude: float = 1.0
    hard_amplitude_range: tuple[float, float] = (0.2, 0.5)
    clutter_peaks: int = 0
    clutter_amplitude_range: tuple[float, float] = (0.2, 0.8)
    stage_gain: float = 1.0
    clutter_clearance: float = 4.5
    detect_eta: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "hard_amplitude_range", tuple(float(v) for v in self.hard_amplitude_range)
        )
        object.__setattr__(
            self, "clutter_amplitude_range", tuple(float(v) for v in self.clutter_amplitude_range)
        )
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise ValueError(f"easy_fraction must lie in [0, 1], got {self.easy_fraction}")
        if not 0.0 < self.easy_amplitude <= 1.0:
            raise ValueError("easy_amplitude must lie in (0, 1]")
        lo, hi = self.hard_amplitude_range
        if not 0.0 < lo <= hi < self.easy_amplitude:
            raise ValueError(
                "hard_amplitude_range must satisfy 0 < lo <= hi < easy_amplitude"
            )
        if self.clutter_peaks < 0:
            raise ValueError("clutter_peaks must be non-negative")
        clo, chi = self.clutter_amplitude_range
        if not 0.0 < clo <= chi <= 1.0:
            raise ValueError("clutter_amplitude_range must lie within (0, 1]")
        if not self.stage_gain > 0.0:
            raise ValueError(f"stage_gain must be positive, got {self.stage_gain}")
        if not self.clutter_clearance > 0.0:
            raise ValueError("clutter_clearance must be positive")
        if not self.detect_eta > 0.0:
            raise ValueError("detect_eta must be positive")


@dataclass(frozen=True)
class ClutterPeak:
    x: int
    y: int
    class_id: int
    amplitude: float


@dataclass(frozen=True)
class SyntheticScene:
    gts: tuple[BevBox, ...]
    amplitudes: tuple[float, ...]
    clutter: tuple[ClutterPeak, ...]

    def __post_init__(self) -> None:
        if len(self.amplitudes) != len(self.gts):
            raise ValueError("one amplitude per ground-truth box is required")


def generate_scene(params: SceneParams, model: DetectabilityModel) -> SyntheticScene:
    """Draw a scene deterministically from ``params.rng_seed``.

    Placement uses bounded rejection sampling; a scene too dense for its
    separation or clearance constraints raises DataError rather than
    looping forever.
    """
    rng = np.random.default_rng(params.rng_seed)
    spec = params.spec
    margin = spec.cell_size
    x_lo = spec.origin_x + margin
    x_hi = spec.origin_x + (spec.size_x - 1) * spec.cell_size - margin
    y_lo = spec.origin_y + margin
    y_hi = spec.origin_y + (spec.size_y - 1) * spec.cell_size - margin
    if x_hi <= x_lo or y_hi <= y_lo:
        raise DataError("grid is too small to place objects inside a one-cell margin")

    lo, hi = params.num_objects_range
    count = int(rng.integers(lo, hi + 1))
    mix = np.asarray(params.class_mix, dtype=np.float64)
    mix = mix / mix.sum()
    min_sep = params.min_same_class_separation

    gts: list[BevBox] = []
    centers_by_class: dict[int, list[tuple[float, float]]] = {}
    for i in range(count):
        class_id = int(rng.choice(spec.num_classes, p=mix))
        mean_l, mean_w, jitter = params.size_table[class_id]
        length = max(0.05, mean_l * (1.0 + rng.uniform(-jitter, jitter)))
        width = max(0.05, mean_w * (1.0 + rng.uniform(-jitter, jitter)))
        yaw = float(rng.uniform(-np.pi, np.pi))
        taken = centers_by_class.setdefault(class_id, [])
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            cx = float(rng.uniform(x_lo, x_hi))
            cy = float(rng.uniform(y_lo, y_hi))
            if all((cx - px) ** 2 + (cy - py) ** 2 >= min_sep * min_sep for px, py in taken):
                break
        else:
            raise DataError(
                f"could not place object {i} (class {class_id}) after "
                f"{_PLACEMENT_ATTEMPTS} attempts; lower the density or separation"
            )
        taken.append((cx, cy))
        gts.append(BevBox(cx, cy, length, width, yaw, class_id))

    amplitudes = []
    for _ in range(count):
        if rng.random() < model.easy_fraction:
            amplitudes.append(model.easy_amplitude)
        else:
            amplitudes.append(float(rng.uniform(*model.hard_amplitude_range)))

    clearance_sq = model.clutter_clearance ** 2
    clutter: list[ClutterPeak] = []
    for i in range(model.clutter_peaks):
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            x = int(rng.integers(spec.size_x))
            y = int(rng.integers(spec.size_y))
            class_id = int(rng.integers(spec.num_classes))
            wx, wy = spec.grid_to_world((x, y))
            near = centers_by_class.get(class_id, ())
            if all((wx - px) ** 2 + (wy - py) ** 2 >= clearance_sq for px, py in near):
                break
        else:
            raise DataError(
                f"could not place clutter peak {i} after {_PLACEMENT_ATTEMPTS} "
                "attempts; lower clutter_clearance or the object density"
            )
        amplitude = float(rng.uniform(*model.clutter_amplitude_range))
        clutter.append(ClutterPeak(x, y, class_id, amplitude))

    return SyntheticScene(tuple(gts), tuple(amplitudes), tuple(clutter))


def oracle_stage_heatmap(
    scene: SyntheticScene,
    stage: int,
    detected_so_far: frozenset[int] | set[int],
    model: DetectabilityModel,
    spec: BevGridSpec,
    render_cfg: GaussianRenderConfig = GaussianRenderConfig(),
) -> Heatmap:
    """Render the heatmap the oracle detector would emit at one stage.

    Objects not yet detected have their peak scaled by
    ``stage_gain ** stage`` (capped at 1.0); detected objects keep their
    base amplitude. Clutter peaks are stage-independent single cells,
    max-combined with the Gaussians.
    """
    if stage < 0:
        raise ValueError(f"stage must be non-negative, got {stage}")
    canvas = np.zeros(spec.shape, dtype=np.float64)
    for i, gt in enumerate(scene.gts):
        amp = scene.amplitudes[i]
        if i not in detected_so_far:
            amp = min(1.0, amp * model.stage_gain ** stage)
        gx, gy = spec.world_to_grid((gt.cx, gt.cy))
        radius = radius_for_box(gt, spec, render_cfg)
        draw_gaussian_peak(canvas[gt.class_id], int(round(gx)), int(round(gy)), radius, amp)
    for peak in scene.clutter:
        if peak.amplitude > canvas[peak.class_id, peak.y, peak.x]:
            canvas[peak.class_id, peak.y, peak.x] = peak.amplitude
    return Heatmap(spec, canvas)


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "gts": [
            {
                "cx": g.cx, "cy": g.cy, "length": g.length, "width": g.width,
                "yaw": g.yaw, "class_id": g.class_id,
            }
            for g in scene.gts
        ],
        "amplitudes": list(scene.amplitudes),
        "clutter": [
            {"x": p.x, "y": p.y, "class_id": p.class_id, "amplitude": p.amplitude}
            for p in scene.clutter
        ],
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    try:
        gts = tuple(
            BevBox(
                cx=float(g["cx"]), cy=float(g["cy"]), length=float(g["length"]),
                width=float(g["width"]), yaw=float(g["yaw"]), class_id=int(g["class_id"]),
            )
            for g in d["gts"]
        )
        amplitudes = tuple(float(a) for a in d["amplitudes"])
        clutter = tuple(
            ClutterPeak(
                x=int(p["x"]), y=int(p["y"]), class_id=int(p["class_id"]),
                amplitude=float(p["amplitude"]),
            )
            for p in d["clutter"]
        )
        return SyntheticScene(gts, amplitudes, clutter)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid scene record: {exc}") from exc


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything one experiment needs, as parsed from a config file."""

    params: SceneParams
    model: DetectabilityModel
    hip_cfg: HipConfig
    baseline_cfg: HipConfig
    recall_cfg: RecallConfig
    num_scenes: int
    render_cfg: GaussianRenderConfig = GaussianRenderConfig()

    def __post_init__(self) -> None:
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be at least 1")


@dataclass(frozen=True)
class SceneOutcome:
    scene_id: str
    seed: int
    reports: dict[str, RecallReport]
    candidates: dict[str, tuple[Candidate, ...]]
    degenerate: dict[str, bool]
    delta: float


@dataclass(frozen=True)
class ArmSummary:
    mean_mar: float
    pooled: RecallReport


@dataclass(frozen=True)
class ExperimentResult:
    scenes: tuple[SceneOutcome, ...]
    arms: dict[str, ArmSummary]
    deltas: tuple[float, ...]
    mean_delta: float
    frac_nonneg_delta: float
    num_scenes: int
    total_budget: int


ARM_PROBE = "hip"
ARM_BASELINE = "baseline"


def _run_arm(
    scene: SyntheticScene, cfg: HipConfig, setup: ExperimentSetup
) -> tuple[tuple[Candidate, ...], bool]:
    """Run one arm's staged loop against the oracle detector."""
    model = setup.model
    spec = setup.params.spec
    detect_cfg = MatchConfig(MatchMetric.CENTER_DISTANCE, model.detect_eta)
    static: list[Heatmap] = []

    def source(stage: int, collected: tuple[Candidate, ...]) -> Heatmap:
        # With gain 1 the oracle output never changes, so render once.
        if model.stage_gain == 1.0:
            if not static:
                static.append(
                    oracle_stage_heatmap(scene, 0, frozenset(), model, spec, setup.render_cfg)
                )
            return static[0]
        if stage == 0:
            detected: frozenset[int] = frozenset()
        else:
            detected = frozenset(classify_stage(collected, scene.gts, detect_cfg).tp_gt)
        return oracle_stage_heatmap(scene, stage, detected, model, spec, setup.render_cfg)

    result = run_hip(source, cfg, spec)
    return result.candidates, result.degenerate


def _run_scene(setup: ExperimentSetup, index: int, seed: int) -> SceneOutcome:
    scene = generate_scene(replace(setup.params, rng_seed=seed), setup.model)
    reports: dict[str, RecallReport] = {}
    candidates: dict[str, tuple[Candidate, ...]] = {}
    degenerate: dict[str, bool] = {}
    for arm, cfg in ((ARM_PROBE, setup.hip_cfg), (ARM_BASELINE, setup.baseline_cfg)):
        cands, degen = _run_arm(scene, cfg, setup)
        candidates[arm] = cands
        degenerate[arm] = degen
        reports[arm] = average_recall(cands, scene.gts, setup.recall_cfg)
    delta = reports[ARM_PROBE].mean_average_recall - reports[ARM_BASELINE].mean_average_recall
    return SceneOutcome(
        scene_id=f"scene_{index:04d}",
        seed=seed,
        reports=reports,
        candidates=candidates,
        degenerate=degenerate,
        delta=delta,
    )


def _scene_task(payload: tuple[ExperimentSetup, int, int]) -> SceneOutcome:
    setup, index, seed = payload
    return _run_scene(setup, index, seed)


def scene_seeds(rng_seed: int, num_scenes: int) -> list[int]:
    """Per-scene seeds derived from the experiment seed."""
    return [int(s) for s in np.random.SeedSequence(rng_seed).generate_state(num_scenes)]


def run_experiment(setup: ExperimentSetup, jobs: int = 1) -> ExperimentResult:
    """Run the paired-arm experiment over ``setup.num_scenes`` scenes.

    Both arms must spend the same total candidate budget; anything else is
    an apples-to-oranges comparison and is rejected. Results are identical
    for any ``jobs`` value because scenes are independent and merged in
    scene order.
    """
    if setup.hip_cfg.total_k != setup.baseline_cfg.total_k:
        raise ConfigError(
            f"arms must spend equal candidate budgets, got "
            f"{setup.hip_cfg.total_k} vs {setup.baseline_cfg.total_k}"
        )
    if jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {jobs}")
    seeds = scene_seeds(setup.params.rng_seed, setup.num_scenes)
    payloads = [(setup, i, seed) for i, seed in enumerate(seeds)]
    if jobs == 1:
        outcomes = [_scene_task(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_scene_task, payloads, chunksize=8))

    arms = {}
    for arm in (ARM_PROBE, ARM_BASELINE):
        arm_reports = [o.reports[arm] for o in outcomes]
        mean_mar = sum(r.mean_average_recall for r in arm_reports) / len(arm_reports)
        arms[arm] = ArmSummary(mean_mar, merge_reports(arm_reports, setup.recall_cfg))
    deltas = tuple(o.delta for o in outcomes)
    mean_delta = sum(deltas) / len(deltas)
    frac_nonneg = sum(1 for d in deltas if d >= 0.0) / len(deltas)
    return ExperimentResult(
        scenes=tuple(outcomes),
        arms=arms,
        deltas=deltas,
        mean_delta=mean_delta,
        frac_nonneg_delta=frac_nonneg,
        num_scenes=setup.num_scenes,
        total_budget=setup.hip_cfg.total_k,
    )


def _require(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError(f"missing config key: {path}{key}")
    return cfg[key]


def _build(cls, kwargs: dict, path: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _hip_config_from(cfg: dict, path: str) -> HipConfig:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must be an object")
    kwargs = dict(cfg)
    if "mask_type" in kwargs:
        try:
            kwargs["mask_type"] = MaskType(str(kwargs["mask_type"]).lower())
        except ValueError as exc:
            valid = ", ".join(m.value for m in MaskType)
            raise ConfigError(
                f"{path}.mask_type: expected one of {valid}, got {kwargs['mask_type']!r}"
            ) from exc
    if "small_classes" in kwargs:
        kwargs["small_classes"] = frozenset(int(c) for c in kwargs["small_classes"])
    return _build(HipConfig, kwargs, path)


def experiment_from_config(cfg: dict) -> ExperimentSetup:
    """Build an experiment from a plain-dict config (see README schema).

    Raises ConfigError naming the offending key for anything malformed.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("experiment config must be a JSON object")
    grid = _require(cfg, "grid", "")
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object")
    spec = _build(BevGridSpec, grid, "grid")
    scene = _require(cfg, "scene", "")
    if not isinstance(scene, dict):
        raise ConfigError("scene must be an object")
    params = _build(
        SceneParams,
        dict(scene, spec=spec, rng_seed=int(_require(cfg, "rng_seed", ""))),
        "scene",
    )
    det = _require(cfg, "detectability", "")
    if not isinstance(det, dict):
        raise ConfigError("detectability must be an object")
    model = _build(DetectabilityModel, det, "detectability")
    hip_cfg = _hip_config_from(_require(cfg, "hip", ""), "hip")
    baseline_cfg = _hip_config_from(_require(cfg, "baseline", ""), "baseline")
    recall = cfg.get("recall", {})
    if not isinstance(recall, dict):
        raise ConfigError("recall must be an object")
    recall_cfg = _build(RecallConfig, recall, "recall")
    render = cfg.get("render", {})
    if not isinstance(render, dict):
        raise ConfigError("render must be an object")
    render_cfg = _build(GaussianRenderConfig, render, "render")
    num_scenes = int(_require(cfg, "num_scenes", ""))
    try:
        return ExperimentSetup(
            params=params,
            model=model,
            hip_cfg=hip_cfg,
            baseline_cfg=baseline_cfg,
            recall_cfg=recall_cfg,
            num_scenes=num_scenes,
            render_cfg=render_cfg,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
