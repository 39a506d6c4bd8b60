"""Command-line pipeline tying all stages together.

Subcommands: synth, classify, cluster, loss, solve, eval, ablate. Sequence
directories hold zero-padded frame files plus one poses.txt; labels ride on
frame flag bits and ground-truth flow sits in per-frame .flow sidecars.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from .clustering import cluster_dynamic
from .geometry import PointCloud, RigidTransform, apply_transform, ego_flow, relative_motion
from .io import (
    DataFormatError,
    RunConfig,
    read_flow,
    read_frame,
    read_grid,
    read_labels,
    read_mask,
    read_poses,
    write_flow,
    write_frame,
    write_grid,
    write_labels,
    write_mask,
    write_poses,
)
from .losses import LossInputs, total_loss
from .metrics import epe_three_way
from .occupancy import OccupancyGrid
from .solver import SolverNumericalError, solve
from .synth import generate, scene_spec_from_dict

ABLATE_CONFIGS = (
    ("chamfer", dict(use_dynamic_chamfer=False, use_static=False, use_cluster=False)),
    ("+dynamic_chamfer", dict(use_static=False, use_cluster=False)),
    ("+static", dict(use_cluster=False)),
    ("all", dict()),
    ("all/avg_target", dict(target_selector="avg")),
    ("all/max_target", dict(target_selector="max")),
    ("no_chamfer", dict(use_chamfer=False)),
    ("no_dynamic_chamfer", dict(use_dynamic_chamfer=False)),
    ("no_static", dict(use_static=False)),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _frame_paths(seq_dir):
    paths = sorted(glob.glob(os.path.join(seq_dir, "*.sfpc")))
    if not paths:
        raise DataFormatError(f"no .sfpc frames in {seq_dir}")
    return paths


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _load_poses(path, n_expected):
    poses, _ = read_poses(path)
    if len(poses) < n_expected:
        raise DataFormatError(f"{path}: {len(poses)} poses for {n_expected} frames")
    return poses


def _pair_ego_motion(args, index_t):
    """Ego motion between consecutive frames, identity when no poses are given."""
    if not args.poses:
        return RigidTransform.identity()
    poses = _load_poses(args.poses, index_t + 2)
    return relative_motion(poses[index_t], poses[index_t + 1])


def _frame_index(path):
    stem = _stem(path)
    try:
        return int(stem)
    except ValueError as exc:
        raise DataFormatError(f"frame name {stem!r} is not a zero-padded index") from exc


def _cmd_synth(args):
    with open(args.spec_file) as fh:
        spec = scene_spec_from_dict(json.load(fh))
    frames = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    for i, fr in enumerate(frames):
        write_frame(
            os.path.join(args.out, f"{i:06d}.sfpc"),
            fr.cloud,
            ground=fr.ground,
            dynamic=fr.dynamic,
            foreground=fr.foreground,
        )
        if fr.flow_to_next is not None:
            write_flow(os.path.join(args.out, f"{i:06d}.flow"), fr.flow_to_next)
    write_poses(
        os.path.join(args.out, "poses.txt"),
        [fr.ego_pose for fr in frames],
        [fr.cloud.timestamp for fr in frames],
    )
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _cmd_classify(args):
    cfg = _load_config(args)
    paths = _frame_paths(args.seq_dir)
    poses = _load_poses(os.path.join(args.seq_dir, "poses.txt"), len(paths))
    frames = [read_frame(p) for p in paths]
    os.makedirs(args.out, exist_ok=True)

    if args.grid:
        grid = read_grid(args.grid)
    else:
        grid = OccupancyGrid(cfg.classifier_config())
        for (cloud, flags), pose in zip(frames, poses):
            world = apply_transform(cloud, pose)
            keep = ~flags["ground"]
            carve = PointCloud(world.points[keep], timestamp=cloud.timestamp)
            grid.integrate_frame(carve, pose.translation)

    n_dynamic = 0
    for path, (cloud, flags), pose in zip(paths, frames, poses):
        world = apply_transform(cloud, pose)
        mask = grid.classify(world)
        mask[flags["ground"]] = False  # labeled ground is static by definition
        write_mask(os.path.join(args.out, _stem(path) + ".mask"), mask)
        n_dynamic += int(mask.sum())
    write_grid(os.path.join(args.out, "grid.sfog"), grid)
    print(f"classified {len(paths)} frames: {n_dynamic} dynamic points, {grid.n_voxels} voxels")
    return 0


def _frame_mask(args, path, cloud=None, flags=None):
    """Dynamic mask for one frame: cached classifier output or label bits."""
    if args.gt_masks:
        if flags is None:
            cloud, flags = read_frame(path)
        return cloud, flags["dynamic"]
    if cloud is None:
        cloud, flags = read_frame(path)
    mask = read_mask(os.path.join(args.masks, _stem(path) + ".mask"))
    if len(mask) != len(cloud):
        raise DataFormatError(f"mask for {path} has wrong length")
    return cloud, mask


def _cmd_cluster(args):
    cfg = _load_config(args)
    paths = _frame_paths(args.seq_dir)
    out_dir = args.out or args.masks
    if out_dir is None:
        raise DataFormatError("--out is required with --gt-masks")
    os.makedirs(out_dir, exist_ok=True)
    n_clusters = 0
    for path in paths:
        cloud, mask = _frame_mask(args, path)
        clusters = cluster_dynamic(cloud, mask, cfg.cluster_config())
        write_labels(os.path.join(out_dir, _stem(path) + ".clusters"), clusters)
        n_clusters += len(clusters)
    print(f"clustered {len(paths)} frames: {n_clusters} clusters")
    return 0


def _pair_inputs(args):
    source, flags_t = read_frame(args.frame_t)
    target, flags_t1 = read_frame(args.frame_t1)
    _, mask_t = _frame_mask(args, args.frame_t, source, flags_t)
    _, mask_t1 = _frame_mask(args, args.frame_t1, target, flags_t1)
    clusters = read_labels(os.path.join(args.clusters, _stem(args.frame_t) + ".clusters"))
    motion = _pair_ego_motion(args, _frame_index(args.frame_t))
    return LossInputs(source, target, mask_t, mask_t1, clusters, motion)


def _cmd_loss(args):
    cfg = _load_config(args)
    total_flow = read_flow(args.flow)
    inputs = _pair_inputs(args)
    if len(total_flow) != len(inputs.source):
        raise DataFormatError("flow length does not match the source frame")
    residual = total_flow - ego_flow(inputs.source, inputs.ego_motion)
    inputs = inputs.with_residual(residual)
    report = total_loss(inputs, cfg.loss_weights())
    for line in report.format_lines():
        print(line)
    return 0


def _cmd_solve(args):
    cfg = _load_config(args)
    inputs = _pair_inputs(args)
    flow, trace = solve(inputs, cfg.solver_config())
    write_flow(args.out, flow)
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(trace.to_delimited())
    final = trace.rows[-1]
    print(
        f"solved in {len(trace.rows) - 1} iterations ({trace.reason}); "
        f"final total {final[-1]:.12g}"
    )
    return 0


def _eval_report(pred_flow, cloud, flags, gt_flow, cfg, ego_motion, ground_z):
    ground = flags["ground"].copy()
    if ground_z is not None and np.isfinite(ground_z):
        ground |= cloud.points[:, 2] < ground_z
    comp = ego_flow(cloud, ego_motion) if ego_motion is not None else None
    return epe_three_way(
        pred_flow,
        gt_flow,
        flags["foreground"],
        cloud.points,
        cfg.eval_config(),
        ego_flow=comp,
        ground=ground,
    )


def _cmd_eval(args):
    cfg = _load_config(args)
    pred = read_flow(args.pred_flow)
    cloud, flags = read_frame(args.frame_t)
    gt_path = os.path.splitext(args.frame_t)[0] + ".flow"
    gt = read_flow(gt_path)
    if len(pred) != len(cloud) or len(gt) != len(cloud):
        raise DataFormatError("flow lengths do not match the frame")
    motion = _pair_ego_motion(args, _frame_index(args.frame_t)) if args.poses else None
    ground_z = args.ground_z if args.ground_z is not None else cfg.ground_z
    report = _eval_report(pred, cloud, flags, gt, cfg, motion, ground_z)
    for line in report.format_lines():
        print(line)
    return 0


def _cmd_ablate(args):
    cfg = _load_config(args)
    paths = _frame_paths(args.seq_dir)
    t = args.pair
    if t + 1 >= len(paths):
        raise DataFormatError(f"pair index {t} out of range for {len(paths)} frames")
    poses = _load_poses(os.path.join(args.seq_dir, "poses.txt"), len(paths))
    frames = [read_frame(p) for p in paths]

    grid = OccupancyGrid(cfg.classifier_config())
    for (cloud, flags), pose in zip(frames, poses):
        world = apply_transform(cloud, pose)
        keep = ~flags["ground"]
        grid.integrate_frame(PointCloud(world.points[keep], timestamp=cloud.timestamp), pose.translation)
    masks = []
    for (cloud, flags), pose in zip(frames, poses):
        mask = grid.classify(apply_transform(cloud, pose))
        mask[flags["ground"]] = False
        masks.append(mask)

    source, src_flags = frames[t]
    target, _ = frames[t + 1]
    gt = read_flow(os.path.join(args.seq_dir, f"{_stem(paths[t])}.flow"))
    clusters = cluster_dynamic(source, masks[t], cfg.cluster_config())
    motion = relative_motion(poses[t], poses[t + 1])
    inputs = LossInputs(source, target, masks[t], masks[t + 1], clusters, motion)

    header = f"{'config':<22} {'epe_3way':>10} {'fd':>10} {'fs':>10} {'bs':>10}"
    print(header)
    for name, overrides in ABLATE_CONFIGS:
        run = dataclasses.replace(cfg, **overrides)
        flow, _ = solve(inputs, run.solver_config())
        report = _eval_report(flow, source, src_flags, gt, cfg, motion, cfg.ground_z)
        cells = [
            f"{report.epe_3way:>10.4f}",
            *(
                f"{v:>10.4f}" if v is not None else f"{'n/a':>10}"
                for v in (report.epe_fd, report.epe_fs, report.epe_bs)
            ),
        ]
        print(f"{name:<22} " + " ".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sceneflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic labeled sequence")
    p.add_argument("spec_file", help="JSON scene spec")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("classify", help="dynamic/static classification over a sequence")
    p.add_argument("seq_dir")
    p.add_argument("--out", required=True, help="cache directory for masks and grid")
    p.add_argument("--grid", help="reuse a cached occupancy grid instead of integrating")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("cluster", help="cluster dynamic points per frame")
    p.add_argument("seq_dir")
    p.add_argument("--masks", required=True, help="directory with per-frame .mask files")
    p.add_argument("--out", help="output directory (defaults to the mask directory)")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("loss", help="print the loss report for a given flow file")
    p.add_argument("frame_t")
    p.add_argument("frame_t1")
    p.add_argument("--masks", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--flow", required=True, help="total estimated flow file")
    p.add_argument("--poses", help="pose file for the ego-motion decomposition")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("solve", help="optimize a flow field for one frame pair")
    p.add_argument("frame_t")
    p.add_argument("frame_t1")
    p.add_argument("--masks", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--poses")
    p.add_argument("--out", required=True, help="output flow file (total flow)")
    p.add_argument("--trace", help="write the per-iteration loss table here")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("eval", help="three-way EPE of a predicted flow against labels")
    p.add_argument("pred_flow")
    p.add_argument("frame_t", help="labeled frame; its .flow sidecar is the ground truth")
    p.add_argument("--poses")
    p.add_argument("--ground-z", type=float, dest="ground_z",
                   help="also treat points below this height as ground")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="solve one pair under every loss configuration")
    p.add_argument("seq_dir")
    p.add_argument("--pair", type=int, default=0, help="source frame index (default 0)")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SolverNumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
