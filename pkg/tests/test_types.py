import numpy as np
import pytest

from replayseg.types import (
    IGNORE,
    ConfigError,
    EmptyHistogramError,
    InvalidLabelError,
    Rng,
    ShapeError,
    TaskDef,
    check_image,
    check_task_sequence,
    class_histogram,
    histogram_distribution,
)


def loop_histogram(labels, num_classes):
    counts = [0] * num_classes
    for row in labels:
        for v in row:
            if v != IGNORE:
                counts[int(v)] += 1
    return counts


class TestClassHistogram:
    def test_small_map(self):
        assert class_histogram([[0, 0], [1, 2]], 3).counts.tolist() == [2, 1, 1]

    def test_all_ignore(self):
        assert class_histogram(np.full((2, 2), IGNORE), 3).counts.tolist() == [0, 0, 0]

    def test_matches_loop_oracle(self, g):
        for _ in range(20):
            y = g.integers(0, 6, size=(16, 16)).astype(np.uint8)
            y[g.random((16, 16)) < 0.3] = IGNORE
            h = class_histogram(y, 6)
            assert h.counts.tolist() == loop_histogram(y, 6)
            assert h.total + int((y == IGNORE).sum()) == y.size

    def test_out_of_range_label(self):
        with pytest.raises(InvalidLabelError):
            class_histogram([[0, 3]], 3)


class TestHistogramDistribution:
    @pytest.mark.parametrize(
        "counts,expected",
        [([2, 1, 1], [0.5, 0.25, 0.25]), ([4, 0, 0], [1, 0, 0]), ([1, 1, 1], [1 / 3, 1 / 3, 1 / 3])],
    )
    def test_examples(self, counts, expected):
        h = class_histogram(np.repeat(np.arange(3), counts)[None, :], 3)
        np.testing.assert_allclose(histogram_distribution(h), expected, atol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyHistogramError):
            histogram_distribution(class_histogram(np.full((2, 2), IGNORE), 3))


class TestChecks:
    def test_image_shape(self):
        with pytest.raises(ShapeError):
            check_image(np.zeros((4, 4)))

    def test_image_range(self):
        with pytest.raises(ValueError):
            check_image(np.full((3, 2, 2), 1.5))

    def test_task_sequence_disjoint(self):
        a = TaskDef(0, [], [], {0, 1}, "class_incremental")
        b = TaskDef(1, [], [], {1, 2}, "class_incremental")
        with pytest.raises(ConfigError):
            check_task_sequence([a, b])

    def test_domain_tasks_share_classes(self):
        a = TaskDef(0, [], [], {0, 1}, "domain_incremental")
        b = TaskDef(1, [], [], {0}, "domain_incremental")
        with pytest.raises(ConfigError):
            check_task_sequence([a, b])


class TestRng:
    def test_reproducible(self):
        assert np.array_equal(Rng(5).random(10_000), Rng(5).random(10_000))

    def test_streams_independent(self):
        r = Rng(5)
        assert not np.array_equal(r.stream("data").random(8), r.stream("init").random(8))
        assert not np.array_equal(r.stream("sample", 1).random(8), r.stream("sample", 2).random(8))
        assert np.array_equal(r.stream("sample", 1).random(8), Rng(5).stream("sample", 1).random(8))
