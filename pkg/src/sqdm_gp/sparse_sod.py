"""Subset-of-Data approximation: exact GP inference on a small active set.

Three selection policies: a sliding window of the most recent points, an
evolving-GP filter that admits only informative points, and k-means
clustering with the covariance function as similarity measure. Reduces
inference cost from O(n^3) to O(m^3) for an active set of size m.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dataset, SamplePoint
from . import gp_exact
from .gp_exact import FitState, GpPosterior
from .kernels import HyperParams, kernel_matrix

SLIDING_WINDOW = "sliding-window"
EVOLVING_GP = "evolving-gp"
CLUSTERING = "clustering"
POLICY_TAGS = (SLIDING_WINDOW, EVOLVING_GP, CLUSTERING)


@dataclass(frozen=True)
class ActiveSetPolicy:
    tag: str
    capacity: int
    egp_err_threshold: float = 0.005   # V
    egp_var_threshold: float = 2.5e-5  # V^2
    k_clusters: int = 1

    def __post_init__(self):
        if self.tag not in POLICY_TAGS:
            raise ValueError(f"unknown policy {self.tag!r}")
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.tag == EVOLVING_GP:
            if self.egp_err_threshold <= 0 or self.egp_var_threshold <= 0:
                raise ValueError("evolving-GP thresholds must be positive")
        if self.tag == CLUSTERING and self.k_clusters < 1:
            raise ValueError("need at least one cluster")


@dataclass(frozen=True)
class ActiveSet:
    """Ordered subset of the data stream, bounded by a capacity."""

    points: Dataset
    capacity: int

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if len(self.points) > self.capacity:
            raise ValueError("active set exceeds its capacity")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, capacity: int, polarity: str = "negative") -> "ActiveSet":
        return cls(Dataset.empty(polarity), capacity)


def update_sliding(active: ActiveSet, new_point: SamplePoint) -> ActiveSet:
    """Append the new point; evict the oldest when over capacity."""
    data = active.points.append(new_point)
    if len(data) > active.capacity:
        data = data.tail(active.capacity)
    return ActiveSet(data, active.capacity)


def evolving_accepts(model: Optional[FitState], point: SamplePoint,
                     err_threshold: float, var_threshold: float) -> bool:
    """Informative iff prediction error or predictive variance exceeds its
    (absolute) threshold. No model yet means everything is informative."""
    if model is None or model.n == 0:
        return True
    post = gp_exact.predict(model, np.asarray(point.input)[None, :])
    err = abs(float(post.mean[0]) - point.target)
    var = float(post.variance[0])
    return err > err_threshold or var > var_threshold


def update_evolving(active: ActiveSet, model: Optional[FitState],
                    new_point: SamplePoint,
                    err_threshold: float = 0.005,
                    var_threshold: float = 2.5e-5) -> tuple[ActiveSet, bool]:
    """Admit the point only if informative; evict the oldest at capacity."""
    if not evolving_accepts(model, new_point, err_threshold, var_threshold):
        return active, False
    data = active.points.append(new_point)
    if len(data) > active.capacity:
        data = data.tail(active.capacity)
    return ActiveSet(data, active.capacity), True


def cluster_kmeans(data: Dataset, k: int, kind: str, h: HyperParams,
                   rng=None, max_iters: int = 100) -> list[ActiveSet]:
    """Lloyd iterations with kernel similarity: a point belongs to the
    centroid with the highest covariance k(x, centroid). Centroids are
    arithmetic means of their members in input space. Empty clusters are
    re-seeded at the point with the lowest similarity to its centroid.
    """
    n = len(data)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(rng)
    centroids = data.inputs[rng.choice(n, size=k, replace=False)].copy()
    assign = np.full(n, -1)
    for _ in range(max_iters):
        sim = kernel_matrix(kind, h, data.inputs, centroids)  # (n, k)
        new_assign = np.argmax(sim, axis=1)
        for c in range(k):
            if not np.any(new_assign == c):
                # farthest point = lowest similarity to its own centroid
                own = sim[np.arange(n), new_assign]
                worst = int(np.argmin(own))
                centroids[c] = data.inputs[worst]
                new_assign[worst] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            centroids[c] = data.inputs[assign == c].mean(axis=0)
    sets = []
    for c in range(k):
        members = data.take(assign == c)
        sets.append(ActiveSet(members, capacity=max(1, len(members))))
    return sets


def _fit_active(kind: str, h: HyperParams, active: ActiveSet) -> FitState:
    return gp_exact.fit(kind, h, active.points)


def predict_sod(policy: ActiveSetPolicy, data: Dataset, test,
                kind: str, h: HyperParams, rng=None) -> GpPosterior:
    """Stream the data through the policy, then predict with the exact GP
    on the resulting active set. Clustering routes each test input to the
    model of the most similar centroid."""
    test = np.atleast_2d(np.asarray(test, dtype=float))
    if policy.tag == SLIDING_WINDOW:
        active = ActiveSet(data.tail(policy.capacity), policy.capacity)
        return gp_exact.predict(_fit_active(kind, h, active), test)
    if policy.tag == EVOLVING_GP:
        active = ActiveSet.empty(policy.capacity, data.polarity)
        model: Optional[FitState] = None
        for point in data.points:
            active, accepted = update_evolving(
                active, model, point,
                policy.egp_err_threshold, policy.egp_var_threshold)
            if accepted:
                model = _fit_active(kind, h, active)
        if model is None:
            model = _fit_active(kind, h, active)
        return gp_exact.predict(model, test)
    # clustering
    sets = cluster_kmeans(data, policy.k_clusters, kind, h, rng=rng)
    centroids = np.array([s.points.inputs.mean(axis=0) for s in sets])
    models = [_fit_active(kind, h, s) for s in sets]
    sim = kernel_matrix(kind, h, test, centroids)
    route = np.argmax(sim, axis=1)
    mean = np.empty(test.shape[0])
    var = np.empty(test.shape[0])
    for c, model in enumerate(models):
        mask = route == c
        if not mask.any():
            continue
        post = gp_exact.predict(model, test[mask])
        mean[mask] = post.mean
        var[mask] = post.variance
    # cross-covariances between points routed to different models are not
    # defined; report the routed per-point variances on the diagonal
    return GpPosterior(mean, np.diag(var))
