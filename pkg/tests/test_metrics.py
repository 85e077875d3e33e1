import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mffunet.data import Sample
from mffunet.metrics import (binarize, evaluate_dataset, evaluate_predictions, hard_dsc, jaccard, one_hot,
                             parse_report, soft_dice_loss)
from mffunet.model import ModelConfig, build_model
from mffunet.tensor import Tensor

import oracles


class FixedModel:
    """Stands in for a network: returns preset probabilities in order."""

    def __init__(self, probs, num_classes):
        self.queue = list(probs)
        self.config = ModelConfig(base_width=4, num_classes=num_classes, input_size=16)
        self.params = {"w": Tensor(np.zeros(1, dtype=np.float64))}

    def forward(self, x, mode="eval"):
        return Tensor(self.queue.pop(0))


def samples_from_masks(masks):
    return [Sample(np.zeros((1,) + m.shape, dtype=np.float32), m.astype(np.int64), f"c{i:03d}_000")
            for i, m in enumerate(masks)]


class TestSoftDice:
    def test_perfect_prediction(self):
        t = np.array([[[0, 1], [2, 1]]])
        loss = soft_dice_loss(Tensor(one_hot(t, 3, np.float64)), t)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_total_miss(self):
        t = np.array([[[1, 1], [2, 2]]])
        p = one_hot(np.array([[[0, 0], [0, 0]]]), 3, np.float64)
        assert soft_dice_loss(Tensor(p), t).item() == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        z = r.standard_normal((1, 2, 4, 4))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        t = r.integers(0, 2, (1, 4, 4))
        assert soft_dice_loss(Tensor(p), t).item() == pytest.approx(oracles.soft_dice_loss(p, t), abs=1e-7)

    def test_target_shape_checked(self):
        with pytest.raises(ValueError):
            soft_dice_loss(Tensor(np.ones((1, 3, 2, 2))), np.zeros((1, 3, 3), dtype=int))

    def test_label_range_checked(self):
        with pytest.raises(ValueError):
            soft_dice_loss(Tensor(np.ones((1, 3, 2, 2))), np.full((1, 2, 2), 3))


class TestHardMetrics:
    def test_identity(self):
        a = np.array([[1, 0], [1, 1]])
        assert hard_dsc(a, a) == 1.0
        assert jaccard(a, a) == 1.0

    def test_disjoint(self):
        a = np.array([1, 1, 0, 0])
        assert hard_dsc(a, 1 - a) == 0.0
        assert jaccard(a, 1 - a) == 0.0

    def test_half_overlap(self):
        a = np.array([1, 1, 1, 1, 0, 0])
        b = np.array([0, 0, 1, 1, 1, 1])
        assert hard_dsc(a, b) == 0.5
        assert jaccard(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert hard_dsc(z, z) == 1.0
        assert jaccard(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            hard_dsc(np.zeros(3), np.zeros(4))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_identities(self, seed):
        r = np.random.default_rng(seed)
        a = r.random((6, 7)) < r.random()
        b = r.random((6, 7)) < r.random()
        d, j = hard_dsc(a, b), jaccard(a, b)
        assert 0.0 <= j <= d <= 1.0
        assert j == pytest.approx(d / (2 - d), abs=1e-12)
        assert hard_dsc(a, b) == hard_dsc(b, a)


class TestBinarize:
    def test_one_hot(self):
        t = np.array([[[2, 0], [1, 1]]])
        np.testing.assert_array_equal(binarize(one_hot(t, 3)), t)

    def test_uniform_ties_to_background(self):
        np.testing.assert_array_equal(binarize(np.full((1, 3, 2, 2), 1 / 3)), 0)

    def test_argmax(self):
        assert binarize(np.array([0.2, 0.5, 0.3]).reshape(1, 3, 1, 1)).item() == 1


class TestEvaluate:
    def test_perfect_model(self):
        masks = [np.random.default_rng(i).integers(0, 3, (4, 4)) for i in range(3)]
        probs = [one_hot(np.stack(masks[:2]), 3), one_hot(np.stack(masks[2:]), 3)]
        report = evaluate_dataset(FixedModel(probs, 3), samples_from_masks(masks), batch_size=2)
        assert all(v == 1.0 for v in report.dsc.values())
        assert all(v == 1.0 for v in report.ji.values())
        assert report.n_samples == 3

    def test_background_model(self):
        masks = [np.array([[0, 1], [2, 0]])] * 2
        probs = [one_hot(np.zeros((2, 2, 2), dtype=int), 3)]
        report = evaluate_dataset(FixedModel(probs, 3), samples_from_masks(masks), batch_size=2)
        assert report.dsc[1] == 0.0 and report.dsc[2] == 0.0
        assert report.mean_fg_dsc == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_against_hand_count(self, seed):
        r = np.random.default_rng(seed)
        masks = [r.integers(0, 3, (5, 5)) for _ in range(2)]
        probs = r.random((2, 3, 5, 5))
        report = evaluate_dataset(FixedModel([probs], 3), samples_from_masks(masks), batch_size=2)
        inter, pred, true = oracles.overlap_counts(list(probs.argmax(axis=1)), masks, 3)
        for c in range(3):
            d, j = oracles.dice_and_jaccard(inter[c], pred[c], true[c])
            assert report.dsc[c] == pytest.approx(d, abs=1e-12)
            assert report.ji[c] == pytest.approx(j, abs=1e-12)

    def test_real_model_runs(self):
        m = build_model(ModelConfig(base_width=4, input_size=16))
        masks = [np.random.default_rng(i).integers(0, 3, (16, 16)) for i in range(3)]
        samples = [Sample(np.random.default_rng(i).random((1, 16, 16), dtype=np.float32), mk, f"s{i}_000")
                   for i, mk in enumerate(masks)]
        report = evaluate_dataset(m, samples, batch_size=2, split="val")
        assert report.n_samples == 3
        assert set(report.dsc) == {0, 1, 2}

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_dataset(FixedModel([], 3), [])


class TestReport:
    def test_text_schema_and_parse(self):
        r = evaluate_predictions([np.array([[0, 1], [2, 2]])], [np.array([[0, 1], [1, 2]])], 3, split="test")
        text = r.to_text()
        parsed = parse_report(text)
        for c in range(3):
            assert f"test.class{c}.dsc" in parsed and f"test.class{c}.ji" in parsed
        assert parsed["test.class1.dsc"] == pytest.approx(2 / 3, abs=5e-7)
        assert parsed["test.samples"] == 1
        assert "test.mean_foreground.dsc = " in text
        assert all(len(line.split("= ")[1].split(".")[1]) == 6 for line in text.splitlines() if "samples" not in line)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (3, 4, 4), elements=st.integers(0, 2)), arrays(np.int64, (3, 4, 4), elements=st.integers(0, 2)))
    def test_pooled_counts_match_loops(self, p, t):
        r = evaluate_predictions([p], [t], 3)
        inter, pred, true = oracles.overlap_counts(list(p), list(t), 3)
        np.testing.assert_array_equal(r.intersection, inter)
        np.testing.assert_array_equal(r.pred_size, pred)
        np.testing.assert_array_equal(r.true_size, true)
