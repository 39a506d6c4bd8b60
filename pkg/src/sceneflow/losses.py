"""Self-supervised scene flow losses with analytic gradients.

Four terms are evaluated between a source frame and the next frame given a
per-point residual flow (the optimization variable): symmetric squared-NN
Chamfer on the full clouds, the same restricted to dynamic points, a zero-flow
penalty on the residual of static points, and a cluster consistency term that
drives every member of a dynamic cluster toward a per-cluster flow target
derived from raw geometry. The total is the unweighted sum; per-term weights
exist for ablations and default to one.

Gradients differentiate through fixed nearest-neighbor correspondences (the
standard Chamfer subgradient, re-established at every evaluation). Cluster
targets are built from the raw input clouds and are constants with respect to
the residual flow.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterSet
from .geometry import NearestNeighborIndex, PointCloud, RigidTransform, ego_flow


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights; zero disables (and skips) a term."""

    chamfer: float = 1.0
    dynamic_chamfer: float = 1.0
    static_flow: float = 1.0
    cluster_consistency: float = 1.0

    def as_tuple(self):
        return (self.chamfer, self.dynamic_chamfer, self.static_flow, self.cluster_consistency)


@dataclass(frozen=True)
class ClusterTarget:
    """Flow target for one cluster.

    For the default upper-bound rule the target is the displacement from the
    cluster's worst-matched source point (largest NN distance into next-frame
    dynamic points; ties to the lowest index) to that point's nearest neighbor.
    Source/matched indices are -1 for the averaged/componentwise-max variants.
    """

    cluster_id: int
    flow: np.ndarray  # (3,) meters/frame
    source_index: int = -1
    matched_index: int = -1


@dataclass
class LossReport:
    """Per-term values, weighted total, and d(total)/d(residual flow)."""

    chamfer: float
    dynamic_chamfer: float
    static_flow: float
    cluster_consistency: float
    total: float
    grad: np.ndarray  # (N, 3)
    targets: tuple = ()

    def term_items(self):
        return (
            ("chamfer", self.chamfer),
            ("dynamic_chamfer", self.dynamic_chamfer),
            ("static_flow", self.static_flow),
            ("cluster_consistency", self.cluster_consistency),
            ("total", self.total),
        )

    def format_lines(self):
        return [f"{name} {value:.12g}" for name, value in self.term_items()]


class _PairCache:
    """Lazily built quantities that depend only on the raw frame pair."""

    def __init__(self):
        self.ego_applied = None
        self.target_index = None
        self.target_dyn_index = None
        self.raw_dyn_nn = None


class LossInputs:
    """One frame pair plus everything the losses need, and the residual flow.

    The predicted next-frame cloud is the ego-transformed source plus the
    residual, so the ego/residual decomposition holds exactly by construction.
    Raw-pair caches (target indexes, raw NN distances) are shared across
    `with_residual` copies, which is what makes iterative solving cheap.
    """

    def __init__(self, source: PointCloud, target: PointCloud, source_dynamic,
                 target_dynamic, clusters: ClusterSet | None, ego_motion: RigidTransform,
                 residual_flow=None):
        if len(source) == 0 or len(target) == 0:
            raise ValueError("loss inputs need non-empty source and target clouds")
        self.source = source
        self.target = target
        self.source_dynamic = self._check_mask(source_dynamic, len(source), "source")
        self.target_dynamic = self._check_mask(target_dynamic, len(target), "target")
        self.clusters = clusters if clusters is not None else ClusterSet((), np.empty(0, np.int64), len(source))
        if self.clusters.n_points != len(source):
            raise ValueError("cluster set does not align with the source cloud")
        for members in self.clusters.clusters:
            if not self.source_dynamic[members].all():
                raise ValueError("clusters contain points not marked dynamic")
        self.ego_motion = ego_motion
        if residual_flow is None:
            residual_flow = np.zeros((len(source), 3))
        self.residual_flow = self._check_flow(residual_flow, len(source))
        self.source_dyn_idx = np.flatnonzero(self.source_dynamic)
        self.target_dyn_idx = np.flatnonzero(self.target_dynamic)
        self._cache = _PairCache()

    @staticmethod
    def _check_mask(mask, n, name):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError(f"{name} dynamic mask must have shape ({n},)")
        return mask

    @staticmethod
    def _check_flow(flow, n):
        flow = np.ascontiguousarray(flow, dtype=np.float64)
        if flow.shape != (n, 3):
            raise ValueError(f"flow must have shape ({n}, 3)")
        if not np.isfinite(flow).all():
            raise ValueError("flow contains non-finite entries")
        return flow

    def with_residual(self, residual_flow) -> "LossInputs":
        """Copy sharing all raw-pair caches but holding a different residual."""
        new = copy.copy(self)
        new.residual_flow = self._check_flow(residual_flow, len(self.source))
        return new

    # -- cached raw-pair quantities -------------------------------------------------

    @property
    def ego_applied(self) -> np.ndarray:
        if self._cache.ego_applied is None:
            self._cache.ego_applied = self.ego_motion.apply(self.source.points)
        return self._cache.ego_applied

    @property
    def target_index(self) -> NearestNeighborIndex:
        if self._cache.target_index is None:
            self._cache.target_index = NearestNeighborIndex(self.target.points)
        return self._cache.target_index

    @property
    def target_dyn_index(self) -> NearestNeighborIndex | None:
        if len(self.target_dyn_idx) == 0:
            return None
        if self._cache.target_dyn_index is None:
            self._cache.target_dyn_index = NearestNeighborIndex(self.target.points[self.target_dyn_idx])
        return self._cache.target_dyn_index

    def raw_dynamic_nn(self):
        """NN of each raw dynamic source point into the raw dynamic target set.

        Returns (distances, target cloud indices) aligned with source_dyn_idx.
        """
        if self._cache.raw_dyn_nn is None:
            idx = self.target_dyn_index
            if idx is None or len(self.source_dyn_idx) == 0:
                self._cache.raw_dyn_nn = (np.empty(0), np.empty(0, dtype=np.int64))
            else:
                d, sub = idx.query(self.source.points[self.source_dyn_idx])
                self._cache.raw_dyn_nn = (d, self.target_dyn_idx[sub])
        return self._cache.raw_dyn_nn

    def predicted(self) -> np.ndarray:
        """Predicted next-frame positions: ego-transformed source plus residual."""
        return self.ego_applied + self.residual_flow

    def total_flow(self) -> np.ndarray:
        """Estimated total flow (ego component plus residual)."""
        return self.predicted() - self.source.points

    def ego_flow(self) -> np.ndarray:
        return ego_flow(self.source, self.ego_motion)


def _zero_grad(inputs) -> np.ndarray:
    return np.zeros((len(inputs.source), 3))


def _directed_sq_nn(points, index: NearestNeighborIndex):
    d, nn = index.query(points)
    return d, nn


def chamfer_loss(inputs: LossInputs):
    """Symmetric squared-NN Chamfer between predicted and actual next frame.

    Returns (value, gradient wrt residual flow). Gradient flows through both
    summands' dependence on the predicted cloud.
    """
    pred = inputs.predicted()
    tgt = inputs.target.points
    n_pred, n_tgt = len(pred), len(tgt)
    d_fwd, nn_fwd = inputs.target_index.query(pred)
    value = float((d_fwd ** 2).sum() / n_pred)
    grad = (2.0 / n_pred) * (pred - tgt[nn_fwd])
    pred_index = NearestNeighborIndex(pred)
    d_rev, nn_rev = pred_index.query(tgt)
    value += float((d_rev ** 2).sum() / n_tgt)
    np.add.at(grad, nn_rev, (2.0 / n_tgt) * (pred[nn_rev] - tgt))
    return value, grad


def dynamic_chamfer_loss(inputs: LossInputs):
    """Chamfer restricted to the dynamic subsets of both frames.

    Zero with zero gradient when either frame has no dynamic points.
    """
    si, ti = inputs.source_dyn_idx, inputs.target_dyn_idx
    if len(si) == 0 or len(ti) == 0:
        return 0.0, _zero_grad(inputs)
    pred_d = inputs.predicted()[si]
    tgt_d = inputs.target.points[ti]
    n_pred, n_tgt = len(pred_d), len(tgt_d)
    d_fwd, nn_fwd = inputs.target_dyn_index.query(pred_d)
    value = float((d_fwd ** 2).sum() / n_pred)
    grad = _zero_grad(inputs)
    grad[si] = (2.0 / n_pred) * (pred_d - tgt_d[nn_fwd])
    pred_index = NearestNeighborIndex(pred_d)
    d_rev, nn_rev = pred_index.query(tgt_d)
    value += float((d_rev ** 2).sum() / n_tgt)
    np.add.at(grad, si[nn_rev], (2.0 / n_tgt) * (pred_d[nn_rev] - tgt_d))
    return value, grad


def static_loss(inputs: LossInputs):
    """Mean squared residual flow over static source points.

    Penalizes the residual (not the total flow); zero when no point is static.
    """
    static = ~inputs.source_dynamic
    n_static = int(static.sum())
    grad = _zero_grad(inputs)
    if n_static == 0:
        return 0.0, grad
    r = inputs.residual_flow[static]
    grad[static] = (2.0 / n_static) * r
    return float((r ** 2).sum() / n_static), grad


def cluster_targets(inputs: LossInputs):
    """Upper-bound flow target per cluster, from raw geometry only.

    For each cluster, the source point with the largest NN distance into the
    next frame's dynamic points (argmax ties to the lowest index) defines the
    target as its displacement to that neighbor. Empty when the next frame has
    no dynamic points.
    """
    if len(inputs.clusters) == 0 or len(inputs.target_dyn_idx) == 0:
        return ()
    dists, matched = inputs.raw_dynamic_nn()
    out = []
    for cid, members in enumerate(inputs.clusters.clusters):
        pos = np.searchsorted(inputs.source_dyn_idx, members)
        k = int(np.argmax(dists[pos]))  # first max == lowest point index
        src = int(members[k])
        tgt = int(matched[pos[k]])
        flow = inputs.target.points[tgt] - inputs.source.points[src]
        out.append(ClusterTarget(cid, flow, src, tgt))
    return tuple(out)


def cluster_loss(inputs: LossInputs, targets=None):
    """Squared deviation of member total flows from their cluster target.

    Normalized by the count of all dynamic source points (noise included,
    contributing zero loss). Targets are constants under differentiation.
    """
    if targets is None:
        targets = cluster_targets(inputs)
    n_dyn = len(inputs.source_dyn_idx)
    grad = _zero_grad(inputs)
    if not targets or n_dyn == 0:
        return 0.0, grad
    flow = inputs.total_flow()
    value = 0.0
    for t in targets:
        members = inputs.clusters.clusters[t.cluster_id]
        diff = flow[members] - t.flow
        value += float((diff ** 2).sum())
        grad[members] += (2.0 / n_dyn) * diff
    return value / n_dyn, grad


def total_loss(inputs: LossInputs, weights: LossWeights | None = None, targets=None) -> LossReport:
    """Weighted sum of the four terms plus the summed gradient.

    Terms with zero weight are skipped and reported as 0.0; with the default
    all-ones weights the total is the plain sum of the four terms.
    """
    w = weights or LossWeights()
    if targets is None and w.cluster_consistency != 0.0:
        targets = cluster_targets(inputs)
    grad = _zero_grad(inputs)
    values = []
    for weight, fn in (
        (w.chamfer, chamfer_loss),
        (w.dynamic_chamfer, dynamic_chamfer_loss),
        (w.static_flow, static_loss),
        (w.cluster_consistency, lambda i: cluster_loss(i, targets)),
    ):
        if weight == 0.0:
            values.append(0.0)
            continue
        v, g = fn(inputs)
        values.append(v)
        grad += weight * g
    total = float(sum(weight * v for weight, v in zip(w.as_tuple(), values)))
    return LossReport(
        chamfer=values[0],
        dynamic_chamfer=values[1],
        static_flow=values[2],
        cluster_consistency=values[3],
        total=total,
        grad=grad,
        targets=tuple(targets or ()),
    )


def ablation_ds_loss(inputs: LossInputs, strategy: str = "scaled"):
    """Alternative dynamic/static loss strategies over the forward NN term.

    Both use the squared NN distance of each flowed source point into the full
    next frame. "scaled" weights points 0.9 (dynamic) / 0.1 (static) under a
    single mean; "unweighted" averages the dynamic and static classes
    separately and sums the two means.
    """
    pred = inputs.predicted()
    tgt = inputs.target.points
    d, nn = inputs.target_index.query(pred)
    sq = d ** 2
    pull = pred - tgt[nn]
    grad = _zero_grad(inputs)
    if strategy == "scaled":
        n = len(pred)
        sigma = np.where(inputs.source_dynamic, 0.9, 0.1)
        value = float((sigma * sq).sum() / n)
        grad = (2.0 / n) * sigma[:, None] * pull
        return value, grad
    if strategy == "unweighted":
        value = 0.0
        for cls_mask in (inputs.source_dynamic, ~inputs.source_dynamic):
            n_cls = int(cls_mask.sum())
            if n_cls == 0:
                continue
            value += float(sq[cls_mask].sum() / n_cls)
            grad[cls_mask] = (2.0 / n_cls) * pull[cls_mask]
        return value, grad
    raise ValueError(f"unknown dynamic/static strategy: {strategy!r}")


def ablation_cluster_target(inputs: LossInputs, selector: str = "upper_bound"):
    """Alternative per-cluster flow target selectors.

    "upper_bound" delegates to `cluster_targets`; "avg" takes the mean of the
    members' current estimated total flows; "max" their componentwise maximum.
    """
    if selector == "upper_bound":
        return cluster_targets(inputs)
    if selector not in ("avg", "max"):
        raise ValueError(f"unknown cluster target selector: {selector!r}")
    if len(inputs.clusters) == 0:
        return ()
    flow = inputs.total_flow()
    out = []
    for cid, members in enumerate(inputs.clusters.clusters):
        f = flow[members]
        target = f.mean(axis=0) if selector == "avg" else f.max(axis=0)
        out.append(ClusterTarget(cid, target))
    return tuple(out)
