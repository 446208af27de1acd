import csv
import math

import numpy as np
import pytest

from replayseg.model import Activations, forward, init_model, loss_ce, zero_model
from replayseg.scoring import (
    CSV_COLUMNS,
    cosine_distance,
    image_entropy,
    mscn,
    naturalness_score,
    perceptual_distance,
    score_dataset,
    total_variation,
    uniformity_distance,
    write_scores_csv,
)
from replayseg.types import IGNORE, ClassHistogram, Rng, class_histogram

from conftest import make_sample, random_labels
from oracles import loop_entropy, loop_tv_image, loop_tv_label


def posterior_acts(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    return Activations(None, None, None, logp, logp, np.ones(p.shape[1], bool))


class TestEntropy:
    def test_uniform_four(self):
        assert image_entropy(posterior_acts(np.full((5, 4), 0.25))) == pytest.approx(math.log(4), abs=1e-12)

    def test_one_hot(self):
        assert image_entropy(posterior_acts(np.eye(4)[[0, 1, 2, 3, 1]])) == 0.0

    def test_two_mass(self):
        p = np.tile([0.5, 0.5, 0.0, 0.0], (6, 1))
        assert image_entropy(posterior_acts(p)) == pytest.approx(math.log(2), abs=1e-12)

    def test_loop_oracle_and_bounds(self, small_model, g):
        acts = forward(small_model, g.random((3, 6, 6)))
        value = image_entropy(acts)
        assert value == pytest.approx(loop_entropy(acts.posterior), abs=1e-9)
        assert 0.0 <= value <= math.log(5) + 1e-12


class TestTotalVariation:
    def test_constant(self):
        assert total_variation(np.full((3, 4, 4), 0.3)) == 0.0

    def test_checker_luminance(self):
        lum = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert total_variation(np.stack([lum] * 3)) == pytest.approx(4.0)

    def test_label_pairs(self):
        assert total_variation(np.array([[0, 0], [1, 1]], np.uint8)) == 2.0

    def test_loop_oracles(self, g):
        for _ in range(10):
            image = g.random((3, 7, 5))
            y = g.integers(0, 4, (7, 5)).astype(np.uint8)
            assert total_variation(image) == pytest.approx(loop_tv_image(image), abs=1e-9)
            assert total_variation(y) == loop_tv_label(y)

    def test_label_tv_invariant_to_relabeling(self, g):
        y = g.integers(0, 4, (8, 8)).astype(np.uint8)
        perm = np.array([2, 0, 3, 1], np.uint8)
        assert total_variation(perm[y]) == total_variation(y)


class TestNaturalness:
    def test_noise_more_natural_than_checkerboard(self, g):
        noise = np.clip(0.5 + 0.1 * g.standard_normal((3, 32, 32)), 0, 1)
        board = np.broadcast_to((np.indices((32, 32)).sum(axis=0) % 2).astype(float), (3, 32, 32))
        # local normalisation makes MSCN of white noise slightly light-tailed
        assert naturalness_score(noise) < 1.0
        assert naturalness_score(noise) < naturalness_score(board)

    def test_constant_image_finite(self):
        a = naturalness_score(np.full((3, 8, 8), 0.4))
        assert math.isfinite(a) and a == naturalness_score(np.full((3, 8, 8), 0.4))

    def test_offset_invariance(self, g):
        image = 0.2 + 0.5 * g.random((3, 16, 16))
        np.testing.assert_allclose(mscn(image + 0.1), mscn(image), atol=1e-9)
        assert naturalness_score(image + 0.1) == pytest.approx(naturalness_score(image), abs=1e-6)


class TestPerceptualDistance:
    def test_identity_and_symmetry(self, g):
        m = init_model(4, Rng(0), patch_size=3, hidden=(8, 8), dtype=np.float64)
        a, b = make_sample(0, np.zeros((6, 6))), make_sample(1, np.zeros((6, 6)))
        assert perceptual_distance(a, a, m) == 0.0
        assert perceptual_distance(a, b, m) == perceptual_distance(b, a, m)

    def test_random_pairs_positive(self):
        m = init_model(4, Rng(0), patch_size=3, hidden=(8, 8), dtype=np.float64)
        for i in range(100):
            a, b = make_sample(2 * i, np.zeros((5, 5))), make_sample(2 * i + 1, np.zeros((5, 5)))
            assert perceptual_distance(a, b, m) > 0

    def test_zero_norm(self):
        assert cosine_distance(np.zeros(3), np.ones(3)) == 1.0


class TestUniformity:
    def test_uniform(self):
        assert uniformity_distance(ClassHistogram(np.array([5, 5, 5]), 3)) == pytest.approx(0.0)

    def test_single_class(self):
        assert uniformity_distance(ClassHistogram(np.array([3, 0, 0]), 3)) == pytest.approx(4 / 3)

    def test_half_quarter_quarter(self):
        assert uniformity_distance(ClassHistogram(np.array([2, 1, 1]), 3)) == pytest.approx(1 / 3)

    def test_restricted_classes(self):
        h = ClassHistogram(np.array([0, 0, 4, 4]), 4)
        assert uniformity_distance(h, {2, 3}) == pytest.approx(0.0)
        assert uniformity_distance(h) == pytest.approx(1.0)


class TestScoreDataset:
    def test_empty(self):
        assert score_dataset(zero_model(3, patch_size=3, hidden=(2, 2)), []) == []

    def test_fields_and_recomputation(self, g):
        m = init_model(4, Rng(1), patch_size=3, hidden=(8, 6), dtype=np.float64)
        samples = [make_sample(i, random_labels(g, (6, 6), 4)) for i in (3, 1, 2)]
        scores = score_dataset(m, samples)
        assert [s.id for s in scores] == [1, 2, 3]
        for s in scores:
            ref = loss_ce(forward(m, s.sample.image), s.sample.labels)[0]
            assert s.loss == ref
            assert s.gradient is not None and len(s.gradient) == m.num_params
            assert s.histogram.counts.tolist() == class_histogram(s.sample.labels, 4).counts.tolist()
            assert s.distinct_classes <= 4

    def test_duplicate_identical(self, g):
        m = init_model(4, Rng(1), patch_size=3, hidden=(8, 6))
        s = make_sample(0, random_labels(g, (5, 5), 4))
        a, b = score_dataset(m, [s, s], {"loss", "entropy", "naturalness"})
        assert (a.loss, a.entropy, a.naturalness) == (b.loss, b.entropy, b.naturalness)

    def test_gradient_only_on_request(self, g):
        m = init_model(4, Rng(1), patch_size=3, hidden=(8, 6))
        (s,) = score_dataset(m, [make_sample(0, random_labels(g, (5, 5), 4))], {"loss"})
        assert s.gradient is None and math.isnan(s.entropy)

    def test_all_ignore_ineligible(self):
        m = zero_model(3, patch_size=3, hidden=(2, 2))
        (s,) = score_dataset(m, [make_sample(0, np.full((4, 4), IGNORE))], {"loss"})
        assert not s.eligible

    def test_csv(self, g, tmp_path):
        m = init_model(4, Rng(1), patch_size=3, hidden=(8, 6))
        scores = score_dataset(m, [make_sample(i, random_labels(g, (5, 5), 4)) for i in range(3)], {"loss", "tv_image"})
        write_scores_csv(scores, tmp_path / "s.csv")
        with open(tmp_path / "s.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert [int(r["id"]) for r in rows] == [0, 1, 2]
