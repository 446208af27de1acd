"""Replay sample-selection policies.

Each policy turns the scored training samples of a finished task into the
entries offered to the buffer, and names the eviction rule used later when
the task's share of the buffer shrinks:

``random``        uniform subset
``keep_lowest``   keep the smallest stored scores (GSS and RSS: drop the highest)
``keep_highest``  keep the largest stored scores
``median``        re-centre on the lower median of the stored scores
``mean_nearest``  keep scores nearest the survivors' mean
``keep_rank``     keep the earliest picks of a greedy or ranked pass
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .buffer import BufferEntry
from .scoring import cosine_distance, score_dataset
from .types import ConfigError, Rng

GSS_SHIFT = 1e-8

# policy id -> (score field, ranking kind)
SCORE_POLICIES = {
    "loss_min": ("loss", "min"),
    "loss_max": ("loss", "max"),
    "loss_median": ("loss", "median"),
    "loss_mean": ("loss", "mean-nearest"),
    "entropy_min": ("entropy", "min"),
    "entropy_max": ("entropy", "max"),
    "entropy_mean": ("entropy", "mean-nearest"),
    "brisque": ("naturalness", "min"),
    "tv_label": ("tv_label", "max"),
    "tv_image": ("tv_image", "max"),
}
EVICTION_FOR_KIND = {"min": "keep_lowest", "max": "keep_highest", "median": "median", "mean-nearest": "mean_nearest"}


@dataclass
class SelectionResult:
    chosen: list
    eviction: str
    warnings: list = field(default_factory=list)

    @property
    def ids(self) -> list:
        return [e.id for e in self.chosen]


def _entries(scores: list, order, values, task: int | None = None) -> list:
    out = []
    for rank, i in enumerate(order):
        s = scores[i]
        v = None if values is None else values[i]
        out.append(BufferEntry(s.sample, None if v is None else float(v), s.task_id if task is None else task, rank))
    return out


def rank_by_score(values, ids, quota: int, kind: str) -> list:
    """Indices chosen by ``kind`` (min, max, median, mean-nearest); ties by id."""
    values = np.asarray(values, dtype=np.float64)
    ids = np.asarray(ids)
    n = len(values)
    q = min(quota, n)
    if q <= 0:
        return []
    if kind == "min":
        return list(np.lexsort((ids, values))[:q])
    if kind == "max":
        return list(np.lexsort((ids, -values))[:q])
    if kind == "median":
        order = np.lexsort((ids, values))
        mid = (n - 1) // 2
        start = min(max(mid - (q - 1) // 2, 0), n - q)
        return list(order[start : start + q])
    if kind == "mean-nearest":
        dist = np.abs(values - values.mean())
        return list(np.lexsort((ids, dist))[:q])
    raise ConfigError(f"unknown ranking kind {kind!r}")


def select_by_score(scores: list, quota: int, kind: str, field_name: str = "loss") -> SelectionResult:
    values = [getattr(s, field_name) for s in scores]
    order = rank_by_score(values, [s.id for s in scores], quota, kind)
    return SelectionResult(_entries(scores, order, values), EVICTION_FOR_KIND[kind])


def select_random(scores: list, quota: int, rng: Rng) -> SelectionResult:
    q = min(quota, len(scores))
    order = list(rng.choice(len(scores), size=q, replace=False)) if q else []
    return SelectionResult(_entries(scores, order, None), "random")


def _balance_ranking(scores: list) -> list:
    eligible = sorted((s.uniformity_distance, s.id, i) for i, s in enumerate(scores) if s.eligible)
    rest = sorted((s.id, i) for i, s in enumerate(scores) if not s.eligible)
    return [i for *_, i in eligible] + [i for _, i in rest]


def select_class_balanced_samples(scores: list, quota: int, rng: Rng | None = None) -> SelectionResult:
    """Samples whose own class distribution is closest to uniform."""
    if scores and not any(s.eligible for s in scores):
        res = select_random(scores, quota, rng or Rng(0))
        return SelectionResult(res.chosen, "keep_rank", ["no sample has labeled pixels; fell back to random"])
    order = _balance_ranking(scores)[: min(quota, len(scores))]
    return SelectionResult(_entries(scores, order, [s.uniformity_distance for s in scores]), "keep_rank")


def _l1_to_uniform(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return np.inf
    return float(np.abs(counts / total - 1.0 / counts.size).sum())


def select_class_balanced_buffer(scores: list, quota: int, existing=None, classes=None) -> SelectionResult:
    """Greedy picks that move the aggregate class distribution towards uniform.

    ``existing`` is the class histogram already in the buffer; ``classes``
    the class set whose uniform distribution is the target (default: every
    class with pixels in ``existing`` or among the candidates).
    """
    if not scores:
        return SelectionResult([], "keep_rank")
    num_classes = scores[0].histogram.num_classes
    base = np.zeros(num_classes, dtype=np.int64) if existing is None else np.asarray(existing, dtype=np.int64).copy()
    hists = np.stack([s.histogram.counts for s in scores])
    if classes is None:
        classes = np.flatnonzero(base + hists.sum(axis=0))
    cls = np.array(sorted(classes), dtype=np.int64)
    current = base[cls]
    sub = hists[:, cls]
    ids = np.array([s.id for s in scores])
    left = list(np.argsort(ids, kind="stable"))
    order = []
    for _ in range(min(quota, len(scores))):
        dists = [_l1_to_uniform(current + sub[i]) for i in left]
        best = int(np.argmin(dists))  # ``left`` is id-sorted, so ties go to the smaller id
        pick = left.pop(best)
        order.append(pick)
        current = current + sub[pick]
    return SelectionResult(_entries(scores, order, [s.uniformity_distance for s in scores]), "keep_rank")


def select_ambivalent(scores: list, quota: int) -> SelectionResult:
    """Samples with the most distinct labeled classes; ties by uniformity, then id."""
    key = sorted(
        (-s.distinct_classes, np.inf if s.uniformity_distance is None else s.uniformity_distance, s.id, i)
        for i, s in enumerate(scores)
    )
    order = [i for *_, i in key][: min(quota, len(scores))]
    return SelectionResult(_entries(scores, order, [float(s.distinct_classes) for s in scores]), "keep_rank")


def select_diverse_class_balanced(scores: list, quota: int, th: float, model=None) -> SelectionResult:
    """Class-balanced ranking with a diversity filter on embedding distance.

    A candidate is accepted when its distance to every accepted sample is at
    least ``th``. Unfilled slots are then taken by the best-ranked rejects.
    """
    if model is not None:
        from .model import embed

        for s in scores:
            if s.embedding is None:
                s.embedding = embed(model, s.sample.image)
    ranking = _balance_ranking(scores)
    q = min(quota, len(scores))
    accepted, rejected = [], []
    for i in ranking:
        if len(accepted) == q:
            break
        if all(cosine_distance(scores[i].embedding, scores[j].embedding) >= th for j in accepted):
            accepted.append(i)
        else:
            rejected.append(i)
    warnings = []
    if len(accepted) < q:
        warnings.append(f"diversity pass accepted {len(accepted)} of {q}; filled from rejected candidates")
        spill = rejected + [i for i in ranking if i not in accepted and i not in rejected]
        accepted += spill[: q - len(accepted)]
    return SelectionResult(_entries(scores, accepted, [s.uniformity_distance for s in scores]), "keep_rank", warnings)


# gradient-based selection -----------------------------------------------------


def gss_score(candidate, members: list, cmp: int, rng: Rng) -> float:
    """Max gradient cosine similarity against ``cmp`` randomly drawn members (0 if none)."""
    if not members:
        return 0.0
    if cmp >= len(members):
        pool = members
    else:
        pool = [members[i] for i in rng.choice(len(members), size=cmp, replace=False)]
    return max(candidate.cosine(g) for g in pool)


def select_gss(scores: list, quota: int, cmp: int, rng: Rng) -> SelectionResult:
    """Greedy gradient-diversity selection over the task stream (samples in id order).

    While the selection is below quota, candidates are inserted with their
    score; afterwards one member is discarded with probability proportional
    to its score and the candidate takes its place.
    """
    stream = sorted(range(len(scores)), key=lambda i: scores[i].id)
    members: list = []  # (index, score)
    for i in stream:
        grad = scores[i].gradient
        if grad is None:
            raise ConfigError("GSS needs per-sample gradients")
        r = gss_score(grad, [scores[j].gradient for j, _ in members], cmp, rng)
        if len(members) < quota:
            members.append((i, r))
            continue
        weights = np.array([max(s, 0.0) for _, s in members]) + GSS_SHIFT
        victim = int(rng.choice(len(members), p=weights / weights.sum()))
        members[victim] = (i, r)
    members.sort(key=lambda m: scores[m[0]].id)
    values = {i: r for i, r in members}
    order = [i for i, _ in members]
    return SelectionResult(_entries(scores, order, [values.get(i) for i in range(len(scores))]), "keep_lowest")


# representation-based selection -----------------------------------------------


def _row_project(X: np.ndarray, components: np.ndarray) -> np.ndarray:
    # row-by-row arithmetic so identical rows map to bit-identical points
    return (X[:, None, :] * components[None, :, :]).sum(axis=2)


class LinearReducer(TransformerMixin, BaseEstimator):
    """Projection onto the top principal directions of the centred data.

    Each direction is signed so that its largest-magnitude coordinate is
    positive, which makes the output deterministic.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        d = self.n_components
        if d < 1 or d > X.shape[1]:
            raise ConfigError(f"n_components={d} must lie in [1, {X.shape[1]}]")
        self.mean_ = X.mean(axis=0)
        _, _, vt = np.linalg.svd(X - self.mean_, full_matrices=True)
        comps = vt[:d].copy()
        for row in comps:
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1
        self.components_ = comps
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return _row_project(X - self.mean_, self.components_)


def reduce_dim(embeddings, d: int, reducer=None) -> np.ndarray:
    """Project embeddings to ``d`` dimensions (default: :class:`LinearReducer`)."""
    X = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one embedding")
    if d > X.shape[1]:
        raise ConfigError(f"reduced dimension {d} exceeds embedding dimension {X.shape[1]}")
    reducer = reducer if reducer is not None else LinearReducer(n_components=d)
    return np.asarray(reducer.fit_transform(X), dtype=np.float64)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(points, k: int, rng: Rng, max_iter: int = 100) -> tuple:
    """k-means++ seeding followed by Lloyd iterations.

    Points are processed in lexicographic order so the result does not depend
    on how the input is arranged. An empty cluster is re-seeded at the point
    farthest from its assigned centroid. Returns
    ``(centroids, assignments, inertia, n_iter)``.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    order = np.lexsort(X.T[::-1])
    P = X[order]
    first = min(int(rng.random() * n), n - 1)
    centers = [P[first]]
    d2 = _sq_dists(P, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(np.flatnonzero(d2 == d2.max())[0])
        else:
            cum = np.cumsum(d2)
            idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            idx = min(idx, n - 1)
            while d2[idx] == 0 and idx > 0:
                idx -= 1
        centers.append(P[idx])
        d2 = np.minimum(d2, _sq_dists(P, P[idx : idx + 1])[:, 0])
    C = np.array(centers)
    assign = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = _sq_dists(P, C)
        new = np.argmin(dist, axis=1)
        for j in range(k):
            if not np.any(new == j):
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = j
                dist[far] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        C = np.array([P[assign == j].mean(axis=0) for j in range(k)])
    inertia = float(_sq_dists(P, C)[np.arange(n), assign].sum())
    out = np.empty(n, dtype=np.int64)
    out[order] = assign
    return C, out, inertia, n_iter


class KMeansPP(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans`."""

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = self.random_state if isinstance(self.random_state, Rng) else Rng(self.random_state)
        self.cluster_centers_, self.labels_, self.inertia_, self.n_iter_ = kmeans(X, self.n_clusters, rng, self.max_iter)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)


def select_rss(scores: list, quota: int, d: int, rng: Rng, reducer=None, model=None) -> SelectionResult:
    """Cluster the reduced embeddings into ``quota`` groups and keep each group's most central sample.

    Entry scores are distances to the mean of all reduced task points; the
    eviction rule drops the largest ones first.
    """
    if not scores:
        return SelectionResult([], "keep_lowest")
    if quota < 1:
        raise ConfigError("RSS needs a quota of at least 1")
    if model is not None:
        from .model import embed

        for s in scores:
            if s.embedding is None:
                s.embedding = embed(model, s.sample.image)
    E = np.stack([s.embedding for s in scores])
    Z = reduce_dim(E, min(d, E.shape[1]) if reducer is None else d, reducer)
    center = Z.mean(axis=0)
    spread = np.sqrt(((Z - center) ** 2).sum(axis=1))
    ids = np.array([s.id for s in scores])
    if quota >= len(scores):
        order = list(np.argsort(ids, kind="stable"))
        return SelectionResult(_entries(scores, order, spread), "keep_lowest")
    C, assign, _, _ = kmeans(Z, quota, rng)
    dist = np.sqrt(_sq_dists(Z, C))
    picked = []
    for j in range(quota):
        members = np.flatnonzero(assign == j)
        members = [m for m in members if m not in picked] or [m for m in range(len(scores)) if m not in picked]
        picked.append(min(members, key=lambda m: (dist[m, j], ids[m])))
    order = sorted(picked, key=lambda m: ids[m])
    return SelectionResult(_entries(scores, order, spread), "keep_lowest")


# eviction ---------------------------------------------------------------------


def shrink_entries(entries: list, n: int, rule: str, rng: Rng) -> list:
    """Apply an eviction rule, keeping ``n`` of ``entries``."""
    if n >= len(entries):
        return list(entries)
    if n <= 0:
        return []
    ids = [e.id for e in entries]
    if rule == "random":
        keep = sorted(rng.choice(len(entries), size=n, replace=False))
        return [entries[i] for i in keep]
    if rule == "keep_rank":
        return sorted(entries, key=lambda e: (e.rank, e.id))[:n]
    values = [e.score for e in entries]
    kind = {"keep_lowest": "min", "keep_highest": "max", "median": "median", "mean_nearest": "mean-nearest"}.get(rule)
    if kind is None:
        raise ConfigError(f"unknown eviction rule {rule!r}")
    order = rank_by_score(values, ids, n, kind)
    return [entries[i] for i in sorted(order)]


# policy object ----------------------------------------------------------------

POLICY_SCORES = {
    "none": set(),
    "random": set(),
    "ambivalent": set(),
    "class_bal_samples": set(),
    "class_bal_buffer": set(),
    "div_class_bal": {"embedding"},
    "gss": {"gradient"},
    "rss": {"embedding"},
}


class SampleSelector(BaseEstimator):
    """A configured selection policy.

    ``select`` scores a finished task's training samples with the current
    model and returns the entries to offer to the buffer; ``shrink`` is the
    matching eviction hook for :func:`replayseg.buffer.settle_new_task`.
    """

    def __init__(self, policy="random", th=0.6, cmp=5, reduced_dim=2, direction="", reducer=None):
        self.policy = policy
        self.th = th
        self.cmp = cmp
        self.reduced_dim = reduced_dim
        self.direction = direction
        self.reducer = reducer

    def _score_rule(self):
        field_name, kind = SCORE_POLICIES[self.policy]
        if self.direction and kind in ("min", "max"):
            kind = self.direction
        return field_name, kind

    @property
    def eviction(self) -> str:
        if self.policy in SCORE_POLICIES:
            return EVICTION_FOR_KIND[self._score_rule()[1]]
        return {"random": "random", "gss": "keep_lowest", "rss": "keep_lowest"}.get(self.policy, "keep_rank")

    def required_scores(self) -> set:
        if self.policy in SCORE_POLICIES:
            return {self._score_rule()[0]}
        if self.policy not in POLICY_SCORES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        return POLICY_SCORES[self.policy]

    def select(self, samples: list, model, quota: int, rng: Rng, buffer=None, classes=None, seen_classes=None):
        """Choose up to ``quota`` of ``samples`` (one finished task) for the buffer."""
        if self.policy == "none" or quota <= 0 or not samples:
            return SelectionResult([], self.eviction)
        scores = score_dataset(model, samples, self.required_scores(), classes)
        return self.select_from_scores(scores, quota, rng, buffer=buffer, seen_classes=seen_classes, model=model)

    def select_from_scores(self, scores: list, quota: int, rng: Rng, buffer=None, seen_classes=None, model=None):
        p = self.policy
        if p == "random":
            return select_random(scores, quota, rng)
        if p in SCORE_POLICIES:
            field_name, kind = self._score_rule()
            return select_by_score(scores, quota, kind, field_name)
        if p == "class_bal_samples":
            return select_class_balanced_samples(scores, quota, rng)
        if p == "class_bal_buffer":
            existing = buffer.histogram() if buffer is not None else None
            return select_class_balanced_buffer(scores, quota, existing, seen_classes)
        if p == "ambivalent":
            return select_ambivalent(scores, quota)
        if p == "div_class_bal":
            return select_diverse_class_balanced(scores, quota, self.th, model)
        if p == "gss":
            return select_gss(scores, quota, self.cmp, rng)
        if p == "rss":
            return select_rss(scores, quota, self.reduced_dim, rng, self.reducer, model)
        raise ConfigError(f"unknown policy {p!r}")

    def shrink(self, entries: list, n: int, rng: Rng) -> list:
        return shrink_entries(entries, n, self.eviction, rng)
