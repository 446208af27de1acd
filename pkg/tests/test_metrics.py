import numpy as np
import pytest

from replayseg.metrics import cka_drift, confusion, linear_cka, miou, recency_bias
from replayseg.model import init_model
from replayseg.types import IGNORE, Rng, ShapeError

from conftest import make_sample
from oracles import loop_confusion, loop_miou


class TestConfusion:
    def test_perfect(self):
        y = np.array([[0, 1], [2, 2]])
        assert np.array_equal(confusion(y, y, 3), np.diag([1, 1, 2]))

    def test_three_pixels(self):
        cm = confusion(np.array([0, 1, 1]), np.array([0, 1, 2]), 3)
        assert cm[0, 0] == 1 and cm[1, 1] == 1 and cm[2, 1] == 1 and cm.sum() == 3

    def test_all_ignore(self):
        assert not confusion(np.zeros((3, 3), int), np.full((3, 3), IGNORE), 4).any()

    def test_loop_oracle(self, g):
        for _ in range(10):
            pred = g.integers(0, 4, (6, 7))
            truth = g.integers(0, 4, (6, 7))
            truth[g.random((6, 7)) < 0.2] = IGNORE
            assert np.array_equal(confusion(pred, truth, 4), loop_confusion(pred, truth, 4))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros(3), np.zeros(4), 2)

    def test_additivity(self, g):
        preds = [g.integers(0, 4, (5, 5)) for _ in range(3)]
        truth = [g.integers(0, 4, (5, 5)) for _ in range(3)]
        total = sum(confusion(p, t, 4) for p, t in zip(preds, truth))
        assert np.array_equal(total, confusion(np.stack(preds), np.stack(truth), 4))


class TestMiou:
    def test_diagonal(self):
        assert miou(np.diag([3, 2, 1]), {0, 1, 2}).value == 1.0

    def test_subset_from_three_pixels(self):
        cm = confusion(np.array([0, 1, 1]), np.array([0, 1, 2]), 3)
        assert miou(cm, {1}).value == pytest.approx(0.5)

    def test_disjoint(self):
        cm = np.array([[0, 4], [3, 0]])
        assert miou(cm, {0, 1}).value == 0.0

    def test_zero_union_excluded(self):
        cm = np.zeros((3, 3), int)
        cm[0, 0] = 5
        m = miou(cm, {0, 1, 2})
        assert m.value == 1.0 and m.excluded == 2
        assert miou(cm, {1, 2}).value is None

    def test_loop_oracle(self, g):
        for _ in range(10):
            cm = g.integers(0, 20, (5, 5))
            cm[3] = 0
            cm[:, 3] = 0
            assert miou(cm, {0, 2, 3, 4}).value == pytest.approx(loop_miou(cm, [0, 2, 3, 4]), abs=1e-12)

    def test_permutation_equivariance(self, g):
        cm = g.integers(0, 20, (4, 4))
        perm = np.array([2, 0, 3, 1])
        inv = np.argsort(perm)
        permuted = cm[np.ix_(inv, inv)]
        a = miou(cm, range(4)).per_class
        b = miou(permuted, range(4)).per_class
        for c in range(4):
            assert b[perm[c]] == pytest.approx(a[c])


class TestRecencyBias:
    def test_diagonal(self):
        assert recency_bias(np.diag([4, 4, 4, 4]), {0, 1}, {2, 3}) == 0.0

    def test_all_to_new(self):
        cm = np.zeros((4, 4), int)
        cm[0, 2] = 5
        cm[1, 3] = 2
        assert recency_bias(cm, {0, 1}, {2, 3}) == 1.0

    def test_mixed(self):
        cm = np.array([[6, 1, 3], [0, 0, 0], [2, 0, 8]])
        # old {0}: 10 pixels, 3 predicted as new class 2
        assert recency_bias(cm, {0}, {2}) == pytest.approx(0.3)

    def test_no_old_pixels(self):
        assert recency_bias(np.diag([0, 3]), {0}, {1}) is None


class TestCka:
    def test_self(self, g):
        X = g.standard_normal((200, 10))
        assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-6)

    def test_invariances(self, g):
        X = g.standard_normal((200, 10))
        Y = X @ g.standard_normal((10, 6)) + 0.5 * g.standard_normal((200, 6))
        q, _ = np.linalg.qr(g.standard_normal((6, 6)))
        base = linear_cka(X, Y)
        assert linear_cka(X, Y @ q) == pytest.approx(base, abs=1e-6)
        assert linear_cka(X, 3.7 * Y) == pytest.approx(base, abs=1e-6)
        assert linear_cka(Y, X) == pytest.approx(base, abs=1e-9)
        assert 0.0 <= base <= 1.0 + 1e-6

    def test_independent_low(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            assert linear_cka(r.standard_normal((500, 32)), r.standard_normal((500, 32))) < 0.2

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            linear_cka(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_zero_denominator(self):
        assert linear_cka(np.ones((5, 2)), np.ones((5, 2))) == 0.0


class TestCkaDrift:
    def probe(self):
        return [make_sample(i, np.zeros((6, 6))) for i in range(3)]

    def test_same_model_all_ones(self):
        m = init_model(4, Rng(0), patch_size=3, hidden=(8, 6), dtype=np.float64)
        curve = cka_drift(m, m.copy(), self.probe(), Rng(1), n_pixels=50)
        assert set(curve) == {"input", "h1", "h2", "logits"}
        for v in curve.values():
            assert v == pytest.approx(1.0, abs=1e-9)

    def test_zeroing_head_only_moves_logits(self):
        m = init_model(4, Rng(0), patch_size=3, hidden=(8, 6), dtype=np.float64)
        after = m.copy()
        after.W3 = np.zeros_like(after.W3)
        after.W3[0, 0] = 1.0
        curve = cka_drift(m, after, self.probe(), Rng(1), n_pixels=80)
        for name in ("input", "h1", "h2"):
            assert curve[name] == pytest.approx(1.0, abs=1e-9)
        assert curve["logits"] < 0.99
