"""Direct per-point flow optimization against the total loss.

A raw residual flow field (three free variables per point, zero-initialized)
is driven by gradient descent with backtracking halving whenever a step would
increase the loss, so the recorded loss trace is non-increasing. Nearest
neighbor correspondences refresh at every evaluation; cluster flow targets are
computed once up front and stay constant. Deterministic given its inputs.

Loss gradients are means over the cloud, so the raw per-point gradient scales
like 1/N; steps are therefore scaled by the source cloud size, making the
learning rate a meters-per-unit-error step length independent of cloud size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .losses import LossInputs, LossReport, LossWeights, ablation_cluster_target, total_loss

TRACE_COLUMNS = ("iteration", "chamfer", "dynamic_chamfer", "static_flow", "cluster_consistency", "total")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 500
    learning_rate: float = 0.05  # meters per unit NN error, see module docstring
    convergence_tol: float = 1e-7  # stop once an accepted step reduces the loss by less
    max_backtracks: int = 40
    seed: int = 0  # reserved; the solver itself is deterministic
    weights: LossWeights = field(default_factory=LossWeights)
    target_selector: str = "upper_bound"

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("iteration counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")


@dataclass
class SolveTrace:
    rows: list  # (iteration, chamfer, dynamic_chamfer, static, cluster, total)
    final_flow: np.ndarray  # total flow (ego + residual)
    wall_time: float
    converged: bool
    reason: str

    @property
    def totals(self) -> np.ndarray:
        return np.array([r[-1] for r in self.rows])

    def to_delimited(self, sep: str = ",") -> str:
        lines = [sep.join(TRACE_COLUMNS)]
        for row in self.rows:
            lines.append(sep.join(f"{v:.12g}" if i else str(int(v)) for i, v in enumerate(row)))
        return "\n".join(lines) + "\n"


class SolverNumericalError(RuntimeError):
    """Raised when the loss goes non-finite; carries the trace so far."""

    def __init__(self, message: str, trace: SolveTrace):
        super().__init__(message)
        self.trace = trace


def _row(iteration: int, report: LossReport):
    return (
        iteration,
        report.chamfer,
        report.dynamic_chamfer,
        report.static_flow,
        report.cluster_consistency,
        report.total,
    )


def solve(inputs: LossInputs, config: SolverConfig | None = None):
    """Optimize the residual flow for one frame pair.

    Any residual already present on `inputs` is ignored; optimization starts
    from zero. Returns (total_flow, trace).
    """
    config = config or SolverConfig()
    started = time.perf_counter()
    n = len(inputs.source)
    inputs = inputs.with_residual(np.zeros((n, 3)))
    targets = ()
    if config.weights.cluster_consistency != 0.0:
        targets = ablation_cluster_target(inputs, config.target_selector)
    report = total_loss(inputs, config.weights, targets)
    rows = [_row(0, report)]

    def trace(converged, reason):
        return SolveTrace(rows, inputs.total_flow(), time.perf_counter() - started, converged, reason)

    if not np.isfinite(report.total):
        raise SolverNumericalError("initial loss is not finite", trace(False, "non-finite loss"))

    converged = False
    reason = "max iterations reached"
    for iteration in range(1, config.max_iterations + 1):
        grad = report.grad
        if not grad.any():
            converged, reason = True, "zero gradient"
            break
        step = config.learning_rate * n
        accepted = None
        for _ in range(config.max_backtracks):
            candidate = inputs.with_residual(inputs.residual_flow - step * grad)
            cand_report = total_loss(candidate, config.weights, targets)
            if not np.isfinite(cand_report.total):
                raise SolverNumericalError(
                    f"loss became non-finite at iteration {iteration}", trace(False, "non-finite loss")
                )
            if cand_report.total < report.total:
                accepted = (candidate, cand_report)
                break
            step *= 0.5
        if accepted is None:
            converged, reason = True, "no descending step"
            break
        delta = report.total - accepted[1].total
        inputs, report = accepted
        rows.append(_row(iteration, report))
        if delta < config.convergence_tol:
            converged, reason = True, "loss delta below tolerance"
            break

    return inputs.total_flow(), trace(converged, reason)
