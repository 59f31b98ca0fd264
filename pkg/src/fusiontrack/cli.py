"""Command-line entry point: simulate, estimate-noise, train, track, evaluate, report, benchmark.

Exit codes: 0 ok, 2 usage or missing input, 3 malformed input, 4 configuration
mismatch (checkpoints, feature dims, missing noise model), 5 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .core import ConfigMismatchError
from .fileio import (
    FormatError,
    RunConfig,
    check_feature_dims,
    read_config,
    read_detections,
    read_groundtruth,
    read_json,
    read_noise,
    read_tracks,
    write_json,
    write_noise,
    write_tracks,
)
from .learned import TrackingNets
from .lifecycle import LifecyclePolicy
from .metrics import evaluate
from .simlab import CROSSING_CONFIG, ScenarioConfig, crossing_benchmark, generate
from .tracker import run_sequence

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4, 5
DET_FILE, GT_FILE = "detections.txt", "groundtruth.txt"

log = logging.getLogger("fusiontrack")


class UsageError(Exception):
    pass


# helpers -----------------------------------------------------------------------

def _require(path: Optional[str], what: str) -> str:
    if not path:
        raise UsageError(f"missing {what}")
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_config(path: Optional[str]) -> RunConfig:
    return read_config(_require(path, "config file")) if path else RunConfig()


def _load_nets(directory: str) -> TrackingNets:
    _require(directory, "checkpoint directory")
    try:
        return TrackingNets.load(directory)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint missing: {exc.filename}") from None
    except ValueError as exc:
        raise ConfigMismatchError(f"unusable checkpoints: {exc}") from None


def _sequence_dirs(root: str) -> List[str]:
    _require(root, "scenario directory")
    if os.path.exists(os.path.join(root, DET_FILE)):
        return [root]
    dirs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.exists(os.path.join(root, d, DET_FILE))
    )
    if not dirs:
        raise UsageError(f"no {DET_FILE} found under {root}")
    return dirs


def _read_sequence(directory: str):
    header, dets = read_detections(_require(os.path.join(directory, DET_FILE), "detection file"))
    gt = read_groundtruth(_require(os.path.join(directory, GT_FILE), "ground-truth file"))
    if len(gt) != len(dets):
        raise FormatError(f"{directory}: detection and ground-truth frame counts differ ({len(dets)} vs {len(gt)})")
    return header, dets, gt


def _classes(arg: Optional[str]) -> Optional[List[str]]:
    return [c for c in arg.split(",") if c] if arg else None


# commands ----------------------------------------------------------------------

def _simulate_one(job):
    cfg, seed, out, crossing = job
    sc = crossing_benchmark(seed, cfg) if crossing else generate(replace(cfg, seed=seed))
    directory = os.path.join(out, f"seq_{seed:04d}")
    os.makedirs(directory, exist_ok=True)
    sc.write(os.path.join(directory, DET_FILE), os.path.join(directory, GT_FILE))
    write_json(os.path.join(directory, "scenario.json"), {"crossing": crossing, **replace(sc.config, seed=seed).to_dict()})
    return directory


def cmd_simulate(args) -> int:
    if args.config:
        try:
            cfg = ScenarioConfig.from_dict(read_json(_require(args.config, "scenario config")))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"malformed scenario config: {exc}", None, args.config) from None
    else:
        cfg = CROSSING_CONFIG if args.crossing else ScenarioConfig()
    jobs = [(cfg, args.seed + i, args.out, args.crossing) for i in range(args.sequences)]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            dirs = list(pool.map(_simulate_one, jobs))
    else:
        dirs = [_simulate_one(j) for j in jobs]
    for d in dirs:
        print(d)
    return EXIT_OK


def cmd_estimate_noise(args) -> int:
    from .training import noise_from_files

    seqs = []
    if args.scenarios:
        for d in _sequence_dirs(args.scenarios):
            _, dets, gt = _read_sequence(d)
            seqs.append((gt, dets))
    else:
        _, dets = read_detections(_require(args.detections, "detection file"))
        gt = read_groundtruth(_require(args.gt, "ground-truth file"))
        seqs.append((gt, dets))
    noise = noise_from_files(seqs)
    write_noise(args.out, noise)
    print(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import LabeledSequence, TrainConfig, Telemetry, collect_frame_samples, telemetry_writer, train

    config = _load_config(args.config)
    if args.noise:
        config = replace(config, noise=read_noise(_require(args.noise, "noise file")))
    if config.noise is None:
        raise ConfigMismatchError("no noise suite: pass --noise (see estimate-noise) or put one in --config")
    gate = args.gate if args.gate is not None else config.gate
    samples = []
    for d in _sequence_dirs(args.scenarios):
        header, dets, gt = _read_sequence(d)
        check_feature_dims(header, config.feature_dims)
        samples.extend(collect_frame_samples(LabeledSequence(gt, dets), config.noise, gate))
    seed = args.seed if args.seed is not None else config.optimizer.seed
    stages = {"1": ["stage1"], "2": ["stage2"], "init": ["init"], "all": ["stage1", "stage2", "init"]}[args.stage]
    if stages[0] == "stage1":
        nets = TrackingNets.create(config.feature_dims, seed=seed)
    else:
        nets = _load_nets(args.checkpoints or config.checkpoints or args.out)
        if nets.dims != config.feature_dims:
            raise ConfigMismatchError("checkpoint dims differ from the config's feature dims")
    cfg = TrainConfig(lr=config.optimizer.lr, epochs=config.optimizer.epochs, seed=seed, loss=config.loss,
                      checkpoint_dir=args.out)
    telemetry_path = os.path.join(args.out, "telemetry.jsonl")
    os.makedirs(args.out, exist_ok=True)
    # a run starting from stage 1 starts a fresh telemetry log; later stages append
    if stages[0] == "stage1" and os.path.exists(telemetry_path):
        os.remove(telemetry_path)
    train(nets, samples, cfg, stages, Telemetry(sink=telemetry_writer(telemetry_path)))
    print(args.out)
    return EXIT_OK


def cmd_track(args) -> int:
    config = _load_config(args.config)
    if args.noise:
        config = replace(config, noise=read_noise(_require(args.noise, "noise file")))
    if config.noise is None:
        raise ConfigMismatchError("no noise suite: pass --noise or put one in --config")
    policy = LifecyclePolicy.parse(args.policy) if args.policy else config.policy
    gate = args.gate if args.gate is not None else config.gate
    header, dets = read_detections(_require(args.detections, "detection file"))
    ckpt = args.checkpoints or config.checkpoints
    nets = None
    if ckpt:
        nets = _load_nets(ckpt)
        check_feature_dims(header, nets.dims)
    classes = _classes(args.classes)
    if classes is not None:
        dets = [[d for d in frame if d.class_id in classes] for frame in dets]
    records = run_sequence(dets, config.noise, policy, gate, nets, config.confidence_floor)
    write_tracks(args.out, records, header.n_frames)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    n_frames, records = read_tracks(_require(args.tracks, "track file"))
    gt = read_groundtruth(_require(args.gt, "ground-truth file"))
    if n_frames != len(gt):
        raise FormatError(f"track file covers {n_frames} frames, ground truth {len(gt)}")
    report = evaluate(gt, records, _classes(args.classes))
    data = report.to_dict()
    if args.out:
        write_json(args.out, data)
    print(json.dumps(data["overall"], sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "fusiontrack"  # stable element ids
    import matplotlib.pyplot as plt

    _, records = read_tracks(_require(args.tracks, "track file"))
    metrics = read_json(_require(args.metrics, "metrics report")) if args.metrics else None
    gt = read_groundtruth(_require(args.gt, "ground-truth file")) if args.gt else None
    fig, ax = plt.subplots(figsize=(7, 7))
    if gt is not None:
        paths = {}
        for frame in gt:
            for b in frame:
                paths.setdefault(b.id, []).append(b.state[:2])
        for pts in paths.values():
            pts = np.array(pts)
            ax.plot(pts[:, 0], pts[:, 1], color="0.8", lw=4, zorder=1)
    cmap = plt.get_cmap("tab20")
    by_id = {}
    for r in records:
        by_id.setdefault(r.id, []).append(r.state[:2])
    for k, (tid, pts) in enumerate(sorted(by_id.items())):
        pts = np.array(pts)
        color = cmap(k % 20)
        ax.plot(pts[:, 0], pts[:, 1], "-o", ms=2, lw=1, color=color, zorder=2)
        ax.annotate(str(tid), pts[-1], fontsize=7, color=color)
    title = "bird's-eye view, colored by track id"
    if metrics is not None:
        o = metrics["overall"]
        title += f"\nAMOTA {o['amota']:.3f}  MOTA {o['mota']:.3f}  IDS {o['id_switches']}"
    ax.set_title(title)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    fig.tight_layout()
    tmp = args.out + ".tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, args.out)
    print(args.out)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from .experiments import clutter_experiment, crossing_experiment, summary_table
    from .training import TrainConfig

    cfg = TrainConfig(seed=args.seed or 0)
    if args.kind == "crossing":
        results, _ = crossing_experiment(args.seeds, args.train_seeds, args.parallel, cfg)
    else:
        results, _ = clutter_experiment(args.seeds, args.train_seeds, args.parallel, cfg=cfg)
    table = summary_table(results)
    print(table)
    if args.out:
        write_json(args.out, {
            "kind": args.kind,
            "seeds": [{"seed": r.seed, "baseline": r.baseline.to_dict()["overall"],
                       "learned": r.learned.to_dict()["overall"]} for r in results],
        })
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusiontrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write synthetic scenario files")
    s.add_argument("--config", help="scenario config JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--sequences", type=int, default=1)
    s.add_argument("--crossing", action="store_true", help="generate crossing benchmark scenes")
    s.add_argument("--parallel", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate-noise", help="estimate per-class Q and R from labelled files")
    s.add_argument("--detections")
    s.add_argument("--gt")
    s.add_argument("--scenarios", help="directory of simulated sequences (instead of --detections/--gt)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate_noise)

    s = sub.add_parser("train", help="train the distance and init networks")
    s.add_argument("scenarios", help="directory of labelled sequences")
    s.add_argument("--stage", choices=["1", "2", "init", "all"], default="all")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--noise", help="noise suite JSON (overrides the config's)")
    s.add_argument("--checkpoints", help="existing checkpoints to continue from (stages 2 and init)")
    s.add_argument("--seed", type=int)
    s.add_argument("--gate", type=float)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="track a detection file")
    s.add_argument("detections")
    s.add_argument("--config")
    s.add_argument("--noise", help="noise suite JSON (overrides the config's)")
    s.add_argument("--checkpoints", help="trained networks; omit for the Mahalanobis-only baseline")
    s.add_argument("--policy", help="always | count_based[:k] | learned[:threshold]")
    s.add_argument("--gate", type=float)
    s.add_argument("--classes", help="comma-separated class filter")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("evaluate", help="score a track file against ground truth")
    s.add_argument("tracks")
    s.add_argument("--gt", required=True)
    s.add_argument("--classes")
    s.add_argument("--out", help="metrics report JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="bird's-eye-view SVG of tracks")
    s.add_argument("tracks")
    s.add_argument("--metrics")
    s.add_argument("--gt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("benchmark", help="paired baseline vs learned comparison over seeds")
    s.add_argument("kind", choices=["crossing", "clutter"])
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--train-seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0, help="network initialization seed")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out", help="summary JSON")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fusiontrack: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatchError as exc:
        print(f"fusiontrack: config mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"fusiontrack: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"fusiontrack: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"fusiontrack: invalid input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"fusiontrack: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
