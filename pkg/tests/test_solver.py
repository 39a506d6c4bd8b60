import numpy as np
import pytest

import sceneflow as sf
from sceneflow.solver import SolverConfig, SolverNumericalError, solve


def static_pair(rng, n=60):
    pts = rng.uniform(-5, 5, (n, 3))
    T = sf.RigidTransform.rotation_z(0.02, (0.1, 0.0, 0.0))
    src = sf.PointCloud(pts)
    tgt = sf.PointCloud(T.apply(pts))
    return sf.LossInputs(src, tgt, np.zeros(n, bool), np.zeros(n, bool), None, T)


def test_static_scene_converges_to_zero_residual():
    rng = np.random.default_rng(0)
    inputs = static_pair(rng)
    flow, trace = solve(inputs, SolverConfig())
    residual = flow - sf.ego_flow(inputs.source, inputs.ego_motion)
    assert np.linalg.norm(residual, axis=1).max() < 1e-3
    assert trace.converged


def test_trace_non_increasing():
    frames = sf.fig3_scenario()
    f0, f1 = frames
    cs = sf.cluster_dynamic(f0.cloud, f0.dynamic)
    inputs = sf.LossInputs(f0.cloud, f1.cloud, f0.dynamic, f1.dynamic, cs, sf.RigidTransform.identity())
    _, trace = solve(inputs, SolverConfig(max_iterations=40))
    totals = trace.totals
    assert (np.diff(totals) <= 0).all()
    assert len(trace.rows) >= 2


def test_deterministic_given_inputs():
    frames = sf.fig3_scenario()
    f0, f1 = frames
    cs = sf.cluster_dynamic(f0.cloud, f0.dynamic)

    def run():
        inputs = sf.LossInputs(f0.cloud, f1.cloud, f0.dynamic, f1.dynamic, cs, sf.RigidTransform.identity())
        return solve(inputs, SolverConfig(max_iterations=30))

    flow_a, trace_a = run()
    flow_b, trace_b = run()
    np.testing.assert_array_equal(flow_a, flow_b)
    assert trace_a.rows == trace_b.rows


def test_existing_residual_ignored():
    rng = np.random.default_rng(1)
    inputs = static_pair(rng, n=30).with_residual(np.full((30, 3), 5.0))
    flow, trace = solve(inputs, SolverConfig(max_iterations=5))
    # starts from zero: the static scene stays converged immediately
    assert trace.rows[0][-1] == pytest.approx(0.0, abs=1e-20)


def test_nonfinite_loss_aborts_with_trace():
    n = 4
    src = sf.PointCloud(np.zeros((n, 3)))
    tgt = sf.PointCloud(np.full((n, 3), 1e200))
    inputs = sf.LossInputs(src, tgt, np.zeros(n, bool), np.zeros(n, bool), None, sf.RigidTransform.identity())
    with pytest.raises(SolverNumericalError) as err:
        solve(inputs, SolverConfig())
    assert err.value.trace is not None


def test_trace_csv_format():
    rng = np.random.default_rng(2)
    _, trace = solve(static_pair(rng, n=20), SolverConfig(max_iterations=3))
    text = trace.to_delimited()
    lines = text.strip().splitlines()
    assert lines[0] == "iteration,chamfer,dynamic_chamfer,static_flow,cluster_consistency,total"
    assert len(lines) == len(trace.rows) + 1


def test_disabled_terms_not_reported():
    frames = sf.fig3_scenario()
    f0, f1 = frames
    cs = sf.cluster_dynamic(f0.cloud, f0.dynamic)
    inputs = sf.LossInputs(f0.cloud, f1.cloud, f0.dynamic, f1.dynamic, cs, sf.RigidTransform.identity())
    _, trace = solve(inputs, SolverConfig(max_iterations=2, weights=sf.LossWeights(1, 0, 0, 0)))
    assert all(row[2] == 0.0 and row[3] == 0.0 and row[4] == 0.0 for row in trace.rows)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(max_iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        SolverConfig(convergence_tol=-1e-9)
