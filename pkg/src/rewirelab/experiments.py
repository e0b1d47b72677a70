"""Experiment orchestration: one config in, reports and a summary out.

Every experiment writes into `<output>/<name>/`: per-seed run records and
checkpoints under `seed_<s>/`, the run ledger, `summary.json` and CSV
exports of its tables.
"""

import logging
import os
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel

from rewirelab import diagnostics
from rewirelab.config import ExperimentConfig, build_setup, config_hash
from rewirelab.data import PlantedSpec, STDataset, two_cluster_layout
from rewirelab.diagnostics import ArmSummary, Report
from rewirelab.graph import (
    bandwidth_ablation,
    connected_components,
    read_coords,
    read_edge_list,
)
from rewirelab.models import GraphParamKind, export_graph
from rewirelab.reporting import write_tables
from rewirelab.runner import LedgerRunner, Setup
from rewirelab.spectral import (
    SpectrumReport,
    TighteningResult,
    dirichlet_energy,
    spatial_mp,
    spectral_report,
    verify_tightening,
)
from rewirelab.tasks import make_task
from rewirelab.trainers import (
    RunRecord,
    TrainMode,
    igr_oracle,
    instrument_gradients,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_FAILED = 3


class Summary(Report):
    """Top-level result of an experiment, written as `summary.json`."""

    experiment: str
    name: str
    seeds: list[int]
    failed_seeds: list[int] = []
    status: Literal["ok", "partial", "failed"] = "ok"
    error: Optional[str] = None
    report: dict[str, Any] = {}

    @property
    def exit_code(self) -> int:
        return {
            "ok": EXIT_OK,
            "partial": EXIT_PARTIAL,
            "failed": EXIT_FAILED,
        }[self.status]


class SeedRun(BaseModel):
    seed: int
    status: str
    failure_reason: Optional[str] = None
    test_metric: Optional[float] = None
    best_epoch: int
    best_val_metric: Optional[float] = None
    per_horizon_test: Optional[list[float]] = None
    graph_hash: str


class TrainReport(Report):
    arm: str
    runs: list[SeedRun]
    summary: Optional[ArmSummary] = None


class GraphComparison(BaseModel):
    path: str
    spectrum: SpectrumReport
    tightening: TighteningResult
    dirichlet_energy: Optional[float] = None


class SpectraReport(Report):
    spectrum: SpectrumReport
    delta: float
    rho_eff: float
    dirichlet_energy: Optional[float] = None
    comparisons: list[GraphComparison] = []


class BandwidthReport(Report):
    rows: list[dict[str, Any]]


def _default_jobs(seeds: list[int]) -> int:
    return max(1, min(len(seeds), os.cpu_count() or 1))


def _features(setup: Setup) -> Optional[np.ndarray]:
    dataset = setup.dataset
    if dataset.graph.features is not None:
        return np.asarray(dataset.graph.features)
    if isinstance(dataset, STDataset):
        start, end = dataset.splits["train"]
        return dataset.normalized[start:end].T
    return None


def _seed_status(seeds: list[int], failed: list[int]) -> str:
    if not failed:
        return "ok"
    return "failed" if set(failed) >= set(seeds) else "partial"


def _write_artifacts(
    root: Path, records: dict[int, RunRecord], label: str, threshold: float
) -> None:
    """Gradient tables and learned graphs next to each seed's record."""
    for seed, record in records.items():
        directory = root / f"seed_{seed}"
        directory.mkdir(parents=True, exist_ok=True)
        if record.grad_norms:
            instrument_gradients(record).to_csv(
                directory / f"{label}__grad_norms.csv", index=False
            )
        if record.phi is not None and record.status == "ok":
            bernoulli = record.phi.kind == GraphParamKind.BERNOULLI
            export_graph(
                record.phi,
                directory / f"{label}__graph.txt",
                threshold if bernoulli else None,
            )


def _train(
    config: ExperimentConfig, setup: Setup, runner: LedgerRunner, root: Path
) -> tuple[Report, list[int]]:
    mode = setup.train.mode
    specs = [setup.spec("main", mode, seed) for seed in config.seeds]
    records = dict(zip(config.seeds, runner(specs)))
    _write_artifacts(
        root, records, f"main__{mode.value}", config.decompose.edge_threshold
    )

    runs = [
        SeedRun(
            seed=seed,
            status=record.status,
            failure_reason=record.failure_reason,
            test_metric=record.test_metric,
            best_epoch=record.best_epoch,
            best_val_metric=record.best_val_metric,
            per_horizon_test=record.per_horizon_test,
            graph_hash=record.graph_hash,
        )
        for seed, record in records.items()
    ]
    ok = {r.seed: r.test_metric for r in runs if r.status == "ok"}
    report = TrainReport(
        arm=mode.value,
        runs=runs,
        summary=ArmSummary.of(ok) if ok else None,
    )
    return report, [r.seed for r in runs if r.status != "ok"]


def _decompose(
    config: ExperimentConfig, setup: Setup, runner: LedgerRunner, root: Path
) -> tuple[dict[str, Any], list[int]]:
    section = config.decompose
    report, table = diagnostics.decomposition_study(
        setup,
        config.seeds,
        runner,
        section.resamples,
        section.bootstrap_seed,
    )
    result: dict[str, Any] = {"decomposition": report.model_dump()}
    failed = set(report.failed_seeds)

    bilevel = {
        seed: record
        for seed, record in table["main", TrainMode.BILEVEL.value].items()
        if record.status == "ok"
    }
    _write_artifacts(root, bilevel, "main__bilevel", section.edge_threshold)
    if setup.phi.kind == GraphParamKind.BERNOULLI:
        result["edge_probabilities"] = {
            str(seed): diagnostics.edge_probability_report(
                record.phi, section.edge_threshold
            ).model_dump()
            for seed, record in bilevel.items()
        }
    threshold = (
        section.edge_threshold
        if setup.phi.kind == GraphParamKind.BERNOULLI
        else None
    )
    result["dirichlet"] = {
        str(seed): diagnostics.dirichlet_report(
            setup.dataset, record.phi, threshold
        ).model_dump()
        for seed, record in bilevel.items()
    }

    if section.weight_decays:
        sweep = diagnostics.weight_decay_sweep(
            setup, section.weight_decays, config.seeds, runner
        )
        result["weight_decay_sweep"] = sweep.model_dump()
        failed |= set(sweep.failed_seeds)
    if section.epoch_multipliers:
        sweep = diagnostics.compute_matched(
            setup, section.epoch_multipliers, config.seeds, runner
        )
        result["compute_matched"] = sweep.model_dump()
        failed |= set(sweep.failed_seeds)
    if section.e2e:
        comparison = diagnostics.e2e_comparison(setup, config.seeds, runner)
        result["e2e_comparison"] = comparison.model_dump()
        failed |= set(comparison.failed_seeds)
    return result, sorted(failed)


def _distill(
    config: ExperimentConfig,
    setup: Setup,
    planted: Optional[PlantedSpec],
    runner: LedgerRunner,
) -> tuple[Report, list[int]]:
    section = config.distill
    if section.source == "init":
        learned = setup.dataset.graph.adjacency()
    elif section.source == "true":
        learned = planted.true_graph.adjacency()
    else:
        seed = config.seeds[0]
        (record,) = runner([setup.spec("main", TrainMode.BILEVEL, seed)])
        if record.status != "ok":
            raise RuntimeError(
                f"The bilevel run of seed {seed} failed: "
                f"{record.failure_reason}"
            )
        learned = record.phi

    report = diagnostics.distill(
        setup, learned, config.seeds, runner, section.threshold
    )
    return report, report.failed_seeds


def _spectra(config: ExperimentConfig, setup: Setup) -> Report:
    section = config.spectra
    graph = setup.dataset.graph
    lcc = list(connected_components(graph).lcc_nodes)
    features = _features(setup)

    mp = spatial_mp(
        graph, section.alpha, section.c1, section.c2, section.normalization
    )
    comparisons = []
    for path in section.graphs:
        other = read_edge_list(path)
        comparisons.append(
            GraphComparison(
                path=str(path),
                spectrum=spectral_report(
                    other, section.eps, lcc, section.method
                ),
                tightening=verify_tightening(
                    graph,
                    other,
                    section.alpha,
                    section.c1,
                    section.c2,
                    section.k_max,
                    section.normalization,
                ),
                dirichlet_energy=(
                    dirichlet_energy(other, features)
                    if features is not None
                    else None
                ),
            )
        )
    return SpectraReport(
        spectrum=spectral_report(graph, section.eps, method=section.method),
        delta=mp.delta,
        rho_eff=mp.rho_eff,
        dirichlet_energy=(
            dirichlet_energy(graph, features) if features is not None else None
        ),
        comparisons=comparisons,
    )


def _jacobian(
    config: ExperimentConfig, setup: Setup, runner: LedgerRunner
) -> tuple[dict[str, Any], list[int]]:
    section = config.jacobian
    specs = [setup.spec("main", section.arm, s) for s in config.seeds]
    task = make_task(
        setup.dataset,
        setup.backbone,
        setup.train.batch_size,
        setup.train.val_batch_size,
    )
    strata = "nc" if setup.backbone.kind == "gcn_classifier" else "st"

    reports, failed = {}, []
    for seed, record in zip(config.seeds, runner(specs)):
        if record.status != "ok":
            failed.append(seed)
            continue
        reports[str(seed)] = diagnostics.jacobian_by_distance(
            record,
            task,
            strata,
            section.seed,
            section.pairs_per_stratum,
            section.output_step,
        ).model_dump()
    return {"arm": section.arm.value, "seeds": reports}, failed


def _bandwidth(config: ExperimentConfig) -> Report:
    section = config.bandwidth
    if section.coords is not None:
        coords = read_coords(section.coords)
        metric = section.metric
    else:
        coords, _ = two_cluster_layout(
            section.n_per_cluster,
            section.separation,
            section.spread,
            section.seed,
        )
        metric = "euclidean"
    rows = bandwidth_ablation(
        coords, section.rules, section.threshold, section.cutoff, metric
    )
    return BandwidthReport(rows=[row.model_dump() for row in rows])


def run_experiment(
    config: ExperimentConfig, resume: bool = False
) -> tuple[Summary, Path]:
    """Run a validated experiment and write its summary.

    Seeds whose runs fail are recorded and dropped from the reports; the
    summary status is `partial` when some seeds failed and `failed` when
    all did or the experiment itself raised.

    Returns:
        tuple[Summary, Path]: The summary and the experiment directory.
    """
    root = config.output / config.label
    root.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    summary = Summary(
        config_hash=digest,
        experiment=config.experiment,
        name=config.label,
        seeds=config.seeds,
    )
    logger.info(
        "Running %s experiment %s over seeds %s",
        config.experiment,
        config.label,
        config.seeds,
    )

    runner = LedgerRunner(
        root,
        config.label,
        jobs=config.jobs or _default_jobs(config.seeds),
        resume=resume,
    )
    failed: list[int] = []
    try:
        report: Any
        if config.experiment == "igr-oracle":
            report = igr_oracle(
                np.asarray(config.igr.hessian),
                np.asarray(config.igr.theta0),
                config.igr.etas,
                config.igr.horizon,
            )
        elif config.experiment == "bandwidth-ablation":
            report = _bandwidth(config)
        else:
            setup, planted = build_setup(config)
            if config.experiment == "train":
                report, failed = _train(config, setup, runner, root)
            elif config.experiment == "decompose":
                report, failed = _decompose(config, setup, runner, root)
            elif config.experiment == "tsweep":
                report = diagnostics.t_sweep(
                    setup,
                    config.tsweep.t_values,
                    config.seeds,
                    runner,
                    [TrainMode(arm) for arm in config.tsweep.arms],
                )
                failed = report.failed_seeds
            elif config.experiment == "corruption":
                report = diagnostics.corruption_study(
                    setup,
                    config.corruption.r_values,
                    config.seeds,
                    runner,
                    config.corruption.corruption_seed,
                )
                failed = report.failed_seeds
            elif config.experiment == "distill":
                report, failed = _distill(config, setup, planted, runner)
            elif config.experiment == "spectra":
                report = _spectra(config, setup)
            else:
                report, failed = _jacobian(config, setup, runner)

        if isinstance(report, BaseModel):
            report = report.model_dump()
        summary.report = report
        summary.failed_seeds = sorted(failed)
        summary.status = _seed_status(config.seeds, summary.failed_seeds)
    except (ValueError, RuntimeError) as e:
        logger.warning("Experiment %s failed: %s", config.label, e)
        summary.status = "failed"
        summary.error = str(e)
        summary.failed_seeds = list(config.seeds)

    logger.info("%d runs trained, %d reused", runner.trained, runner.reused)
    (root / "summary.json").write_text(summary.model_dump_json(indent=2))
    write_tables(summary, root)
    return summary, root

