import math

import numpy as np
import pytest

from bevprobe.bev_grid import (
    BevGridSpec,
    GaussianRenderConfig,
    Heatmap,
    render_gaussian_heatmap,
)
from bevprobe.geometry import BevBox
from bevprobe.losses import LossConfig, gaussian_focal_loss, multi_stage_loss

RNG = np.random.default_rng


def make_spec(size=4, num_classes=1):
    return BevGridSpec(size, size, num_classes, 1.0, 0.0, 0.0)


def heat(spec, fill=0.0):
    return Heatmap(spec, np.full(spec.shape, fill, dtype=np.float32))


def single_cell(spec, value, y=0, x=0):
    values = np.zeros(spec.shape, dtype=np.float32)
    values[0, y, x] = value
    return Heatmap(spec, values)


def reference_loss(p, t, alpha=2.0, beta=4.0, eps=1e-12):
    """Scalar re-derivation, cell by cell, straight from the formula."""
    total = 0.0
    num_pos = 0
    for pv, tv in zip(p.ravel().tolist(), t.ravel().tolist()):
        pv = min(max(pv, eps), 1.0 - eps)
        if tv == 1.0:
            num_pos += 1
            total += (1.0 - pv) ** alpha * -math.log(pv)
        else:
            total += (1.0 - tv) ** beta * pv ** alpha * -math.log(1.0 - pv)
    return total / max(1, num_pos)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.beta, cfg.epsilon) == (2.0, 4.0, 1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            LossConfig(beta=-0.5)
        for eps in (0.0, 0.5, 1.0, -1e-9):
            with pytest.raises(ValueError):
                LossConfig(epsilon=eps)


class TestGaussianFocalLoss:
    def test_single_positive_closed_form(self):
        # One positive cell with p = 0.5 on an otherwise-zero 1x1 grid:
        # (1 - 0.5)^2 * -log(0.5) = 0.25 * log 2.
        spec = BevGridSpec(1, 1, 1, 1.0, 0.0, 0.0)
        loss = gaussian_focal_loss(single_cell(spec, 0.5), single_cell(spec, 1.0))
        assert loss == pytest.approx(0.17328679513998632, abs=1e-12)
        assert loss == pytest.approx(0.25 * math.log(2.0), abs=1e-15)

    def test_single_negative_closed_form(self):
        # One cell with t = 0.5, p = 0.5 and no positives anywhere:
        # 0.5^4 * 0.5^2 * -log(0.5), normalized by max(1, 0) = 1.
        spec = BevGridSpec(1, 1, 1, 1.0, 0.0, 0.0)
        loss = gaussian_focal_loss(single_cell(spec, 0.5), single_cell(spec, 0.5))
        assert loss == pytest.approx(0.010830424696249145, abs=1e-12)
        assert loss == pytest.approx(0.0625 * 0.25 * math.log(2.0), abs=1e-15)

    def test_perfect_prediction_is_tiny(self):
        spec = make_spec()
        target = single_cell(spec, 1.0, 2, 2)
        loss = gaussian_focal_loss(target, target)
        assert 0.0 <= loss < 1e-11

    def test_normalized_by_positive_count(self):
        # Doubling the positives at the same per-cell loss keeps the value.
        spec = make_spec()
        pred1 = single_cell(spec, 0.5, 0, 0)
        tgt1 = single_cell(spec, 1.0, 0, 0)
        pred2 = Heatmap(spec, np.clip(pred1.values + single_cell(spec, 0.5, 3, 3).values, 0, 1))
        tgt2 = Heatmap(spec, np.clip(tgt1.values + single_cell(spec, 1.0, 3, 3).values, 0, 1))
        one = gaussian_focal_loss(pred1, tgt1)
        two = gaussian_focal_loss(pred2, tgt2)
        assert two == pytest.approx(one, rel=1e-12)

    def test_finite_at_saturated_predictions(self):
        spec = make_spec(2)
        for fill in (0.0, 1.0):
            for tval in (0.0, 1.0):
                loss = gaussian_focal_loss(heat(spec, fill), heat(spec, tval))
                assert math.isfinite(loss)
                assert loss >= 0.0

    def test_confident_miss_is_costly(self):
        spec = BevGridSpec(1, 1, 1, 1.0, 0.0, 0.0)
        miss = gaussian_focal_loss(single_cell(spec, 0.0), single_cell(spec, 1.0))
        hedge = gaussian_focal_loss(single_cell(spec, 0.5), single_cell(spec, 1.0))
        assert miss > hedge > 0.0

    def test_near_center_cells_downweighted(self):
        # Same wrong confidence hurts less where the target is higher.
        spec = BevGridSpec(1, 1, 1, 1.0, 0.0, 0.0)
        near = gaussian_focal_loss(single_cell(spec, 0.8), single_cell(spec, 0.9))
        far = gaussian_focal_loss(single_cell(spec, 0.8), single_cell(spec, 0.1))
        assert near < far

    def test_matches_reference_on_rendered_targets(self):
        rng = RNG(30)
        spec = BevGridSpec(24, 24, 2, 0.5, -6.0, -6.0)
        for _ in range(20):
            boxes = [
                BevBox(
                    float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4)),
                    float(rng.uniform(1, 5)), float(rng.uniform(1, 3)),
                    float(rng.uniform(-math.pi, math.pi)), int(rng.integers(0, 2)),
                )
                for _ in range(int(rng.integers(1, 6)))
            ]
            target, _ = render_gaussian_heatmap(boxes, spec, GaussianRenderConfig())
            pred = Heatmap(spec, rng.random(spec.shape).astype(np.float32))
            got = gaussian_focal_loss(pred, target)
            want = reference_loss(
                pred.values.astype(np.float64), target.values.astype(np.float64)
            )
            assert got == pytest.approx(want, rel=1e-12)

    def test_custom_exponents(self):
        spec = BevGridSpec(1, 1, 1, 1.0, 0.0, 0.0)
        cfg = LossConfig(alpha=1.0, beta=2.0)
        loss = gaussian_focal_loss(single_cell(spec, 0.25), single_cell(spec, 1.0), cfg)
        assert loss == pytest.approx(0.75 * -math.log(0.25), abs=1e-15)

    def test_spec_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_focal_loss(heat(make_spec(4)), heat(make_spec(5)))


class TestMultiStageLoss:
    def test_exact_sum(self):
        rng = RNG(31)
        spec = make_spec(6)
        preds, targets = [], []
        for _ in range(3):
            preds.append(Heatmap(spec, rng.random(spec.shape).astype(np.float32)))
            values = np.zeros(spec.shape, dtype=np.float32)
            values[0, rng.integers(6), rng.integers(6)] = 1.0
            targets.append(Heatmap(spec, values))
        total = multi_stage_loss(preds, targets)
        parts = [gaussian_focal_loss(p, t) for p, t in zip(preds, targets)]
        assert total == sum(parts)

    def test_empty_stages(self):
        assert multi_stage_loss([], []) == 0.0

    def test_length_mismatch(self):
        spec = make_spec()
        with pytest.raises(ValueError, match="2 predictions for 1 targets"):
            multi_stage_loss([heat(spec), heat(spec)], [heat(spec)])
