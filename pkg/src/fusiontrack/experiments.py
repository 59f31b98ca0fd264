"""Paired baseline-vs-learned experiments on simulated data.

Training scenes use seeds from ``TRAIN_SEED_BASE`` upwards so they never
overlap the evaluation seeds (0, 1, ...).
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from .filtering import NoiseSuite
from .learned import DESK_DIMS, NetDims, TrackingNets
from .lifecycle import LifecyclePolicy
from .metrics import EvaluationReport, evaluate
from .simlab import CROSSING_CONFIG, Scenario, ScenarioConfig, crossing_benchmark, generate
from .tracker import run_sequence
from .training import LabeledSequence, Telemetry, TrainConfig, collect_frame_samples, noise_from_scenarios, train

TRAIN_SEED_BASE = 1000
# crowded crossing scenes: more same-class pairs per frame, hence more hard negatives
CROSSING_TRAIN_CONFIG = replace(CROSSING_CONFIG, n_objects={"car": 10})
CLUTTER_CONFIG = replace(ScenarioConfig(), clutter_rate=2.0)


def fit(scenarios: Sequence[Scenario], dims: NetDims = DESK_DIMS, cfg: TrainConfig = TrainConfig(),
        gate: float = 11.0) -> Tuple[NoiseSuite, TrackingNets, Telemetry]:
    """Estimate noise, harvest association samples and run all training stages."""
    noise = noise_from_scenarios(scenarios)
    samples = []
    for sc in scenarios:
        samples.extend(collect_frame_samples(LabeledSequence(sc.gt, sc.detections), noise, gate))
    nets = TrackingNets.create(dims, seed=cfg.seed)
    telemetry = train(nets, samples, cfg)
    return noise, nets, telemetry


@dataclass
class PairedResult:
    seed: int
    baseline: EvaluationReport
    learned: EvaluationReport


def _run_pair(args) -> PairedResult:
    seed, scenario, noise, nets, base_policy, learned_policy, learned_nets_for_base = args
    base = run_sequence(scenario.detections, noise, base_policy, nets=nets if learned_nets_for_base else None)
    ours = run_sequence(scenario.detections, noise, learned_policy, nets=nets)
    classes = sorted({b.class_id for f in scenario.gt for b in f})
    return PairedResult(seed, evaluate(scenario.gt, base, classes), evaluate(scenario.gt, ours, classes))


def _map(fn, jobs, parallel: int):
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def crossing_experiment(n_seeds: int = 20, n_train: int = 20, parallel: int = 1,
                        cfg: TrainConfig = TrainConfig()) -> Tuple[List[PairedResult], Telemetry]:
    """Mahalanobis-only baseline vs combined distance, both with always-init."""
    train_set = [crossing_benchmark(TRAIN_SEED_BASE + s, CROSSING_TRAIN_CONFIG) for s in range(n_train)]
    noise, nets, telemetry = fit(train_set, cfg=cfg)
    policy = LifecyclePolicy("always")
    jobs = [(s, crossing_benchmark(s), noise, nets, policy, policy, False) for s in range(n_seeds)]
    return _map(_run_pair, jobs, parallel), telemetry


def clutter_experiment(n_seeds: int = 10, n_train: int = 10, parallel: int = 1,
                       config: Optional[ScenarioConfig] = None,
                       cfg: TrainConfig = TrainConfig()) -> Tuple[List[PairedResult], Telemetry]:
    """Always-init vs learned init, both using the trained combined distance."""
    config = config or CLUTTER_CONFIG
    train_set = [generate(replace(config, seed=TRAIN_SEED_BASE + s)) for s in range(n_train)]
    noise, nets, telemetry = fit(train_set, cfg=cfg)
    jobs = [
        (s, generate(replace(config, seed=s)), noise, nets, LifecyclePolicy("always"), LifecyclePolicy("learned"), True)
        for s in range(n_seeds)
    ]
    return _map(_run_pair, jobs, parallel), telemetry


def summary_table(results: Sequence[PairedResult]) -> str:
    lines = [f"{'seed':>4}  {'IDS base':>8}  {'IDS ours':>8}  {'FT base':>7}  {'FT ours':>7}  "
             f"{'AMOTA base':>10}  {'AMOTA ours':>10}"]
    for r in results:
        lines.append(f"{r.seed:>4}  {r.baseline.id_switches:>8}  {r.learned.id_switches:>8}  "
                     f"{r.baseline.false_tracks:>7}  {r.learned.false_tracks:>7}  "
                     f"{r.baseline.amota:>10.4f}  {r.learned.amota:>10.4f}")
    lines.append(
        f"{'all':>4}  {sum(r.baseline.id_switches for r in results):>8}  "
        f"{sum(r.learned.id_switches for r in results):>8}  "
        f"{sum(r.baseline.false_tracks for r in results):>7}  {sum(r.learned.false_tracks for r in results):>7}  "
        f"{sum(r.baseline.amota for r in results) / len(results):>10.4f}  "
        f"{sum(r.learned.amota for r in results) / len(results):>10.4f}"
    )
    return "\n".join(lines)
