"""End point error and its three-way bucket split.

EPE is the mean L2 difference between predicted and ground-truth flow. The
three-way report splits evaluated points into Foreground Dynamic, Foreground
Static, and Background Static buckets inside a square region of interest
centered on the ego vehicle and averages the per-bucket means without
weighting. A point counts as dynamic when its ego-motion-compensated
ground-truth flow exceeds the threshold (strictly).

Background points above the threshold have no bucket in this taxonomy; they
are excluded and tallied in the report diagnostics rather than guessed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EvalConfig:
    dynamic_threshold: float = 0.05  # meters/frame
    roi_half_extent: float = 50.0  # half side of the evaluation box, meters

    def __post_init__(self):
        if self.dynamic_threshold <= 0:
            raise ValueError("dynamic_threshold must be positive")
        if self.roi_half_extent <= 0:
            raise ValueError("roi_half_extent must be positive")


@dataclass
class EpeReport:
    epe_3way: float
    epe_fd: float | None  # None when a bucket is empty
    epe_fs: float | None
    epe_bs: float | None
    count_fd: int
    count_fs: int
    count_bs: int
    n_excluded_background_dynamic: int = 0
    n_outside_roi: int = 0
    n_ground_excluded: int = 0

    def bucket_items(self):
        return (
            ("FD", self.epe_fd, self.count_fd),
            ("FS", self.epe_fs, self.count_fs),
            ("BS", self.epe_bs, self.count_bs),
        )

    def format_lines(self):
        lines = [f"epe_3way {self.epe_3way:.12g}"]
        for name, value, count in self.bucket_items():
            shown = "nan" if value is None else f"{value:.12g}"
            lines.append(f"epe_{name.lower()} {shown} count {count}")
        lines.append(
            f"excluded background_dynamic {self.n_excluded_background_dynamic} "
            f"outside_roi {self.n_outside_roi} ground {self.n_ground_excluded}"
        )
        return lines


def _check_flow_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"flow fields must share shape (N, 3); got {pred.shape} vs {gt.shape}")
    return pred, gt


def epe(pred, gt) -> float:
    """Mean L2 norm of per-point flow differences."""
    pred, gt = _check_flow_pair(pred, gt)
    if len(pred) == 0:
        raise ValueError("no points to evaluate")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def epe_three_way(pred, gt, foreground, positions, config: EvalConfig | None = None, *,
                  ego_flow=None, ego_center=(0.0, 0.0, 0.0), ground=None) -> EpeReport:
    """Bucketed EPE over FD / FS / BS inside the ROI box.

    `positions` are the evaluated points (used for the xy ROI filter around
    `ego_center`); `ego_flow`, when given, is subtracted from the ground truth
    before thresholding so bucket membership reflects true world motion.
    Ground-labeled points are excluded up front. Empty buckets are skipped in
    the three-way average with the divisor adjusted; all-empty is an error.
    """
    config = config or EvalConfig()
    pred, gt = _check_flow_pair(pred, gt)
    n = len(pred)
    foreground = np.asarray(foreground, dtype=bool)
    positions = np.asarray(positions, dtype=np.float64)
    if foreground.shape != (n,) or positions.shape != (n, 3):
        raise ValueError("foreground mask and positions must align with the flow fields")

    keep = np.ones(n, dtype=bool)
    n_ground = 0
    if ground is not None:
        ground = np.asarray(ground, dtype=bool)
        n_ground = int(ground.sum())
        keep &= ~ground
    center = np.asarray(ego_center, dtype=np.float64).reshape(3)
    in_roi = (np.abs(positions[:, 0] - center[0]) <= config.roi_half_extent) & (
        np.abs(positions[:, 1] - center[1]) <= config.roi_half_extent
    )
    n_outside = int((keep & ~in_roi).sum())
    keep &= in_roi

    motion = gt if ego_flow is None else gt - np.asarray(ego_flow, dtype=np.float64)
    moving = np.linalg.norm(motion, axis=1) > config.dynamic_threshold
    err = np.linalg.norm(pred - gt, axis=1)

    fd = keep & foreground & moving
    fs = keep & foreground & ~moving
    bs = keep & ~foreground & ~moving
    excluded = keep & ~foreground & moving

    buckets = []
    means = []
    for sel in (fd, fs, bs):
        c = int(sel.sum())
        buckets.append(c)
        means.append(float(err[sel].mean()) if c else None)
    present = [m for m in means if m is not None]
    if not present:
        raise ValueError("no evaluable points in any bucket")
    return EpeReport(
        epe_3way=float(np.mean(present)),
        epe_fd=means[0],
        epe_fs=means[1],
        epe_bs=means[2],
        count_fd=buckets[0],
        count_fs=buckets[1],
        count_bs=buckets[2],
        n_excluded_background_dynamic=int(excluded.sum()),
        n_outside_roi=n_outside,
        n_ground_excluded=n_ground,
    )
