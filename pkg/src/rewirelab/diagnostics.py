"""Measurements on top of training runs.

The central quantity is the three-way decomposition of a bilevel gain
into an inner-loop channel (vanilla vs frozen-φ, same graph, more θ
steps) and a graph channel (frozen-φ vs bilevel, same θ budget, learned
graph). Metrics are smaller-is-better throughout; accuracies are turned
into error rates before they get here, or decomposed with
`smaller_is_better=False`.
"""

import logging
import math
from collections.abc import Mapping
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, field_validator
from scipy import stats

from rewirelab.data import NCDataset, STDataset
from rewirelab.graph import Graph, bfs_distances, corrupt_edges
from rewirelab.models import (
    GraphParam,
    GraphParamKind,
    binarize,
    learned_adjacency,
    materialize_graph,
)
from rewirelab.runner import Runner, RunSpec, Setup
from rewirelab.seeding import generator
from rewirelab.spectral import dirichlet_energy
from rewirelab.tasks import Task
from rewirelab.tensor import Tensor, jacobian_rows
from rewirelab.trainers import RunRecord, TrainMode

logger = logging.getLogger(__name__)

SCHEMA = "rewirelab/1"

VANILLA = TrainMode.VANILLA.value
FROZEN = TrainMode.FROZEN_PHI.value
BILEVEL = TrainMode.BILEVEL.value
E2E = TrainMode.E2E_JOINT.value

NaReason = Literal["nonpositive_total", "opposite_signs"]
SeedValues = Mapping[int, float] | Sequence[float]

# Opposing channel share of |Δ_total| above which a mixed-sign
# decomposition is not summarized by a share.
OPPOSING_CHANNEL_LIMIT = 0.1


class Report(BaseModel):
    schema_version: str = SCHEMA
    config_hash: Optional[str] = None


class TTestResult(BaseModel):
    statistic: Optional[float] = None
    p_value: Optional[float] = None
    degenerate: bool = False
    n: int


class CorrelationResult(BaseModel):
    kind: Literal["spearman", "pearson"]
    coefficient: Optional[float] = None
    p_value: Optional[float] = None
    undefined: bool = False


class ShareInterval(BaseModel):
    low: Optional[float] = None
    high: Optional[float] = None
    level: float
    resamples: int
    undefined_fraction: float
    unstable: bool


class MeansDecomposition(BaseModel):
    delta_inner: float
    delta_graph: float
    delta_total: float
    inner_share: Optional[float] = None
    na_reason: Optional[NaReason] = None


class ArmSummary(BaseModel):
    seeds: list[int]
    values: list[float]
    mean: float
    std: float

    @classmethod
    def of(cls, values: Mapping[int, float]) -> "ArmSummary":
        seeds = sorted(values)
        array = np.array([values[s] for s in seeds], dtype=np.float64)
        return cls(
            seeds=seeds,
            values=array.tolist(),
            mean=float(array.mean()),
            std=float(array.std(ddof=1)) if len(array) > 1 else 0.0,
        )


class DecompositionReport(Report):
    """Three-way decomposition over paired seeds.

    `inner_share` is Δ_inner / Δ_total in percent, None when n/a.
    """

    smaller_is_better: bool = True
    seeds: list[int]
    arms: dict[str, ArmSummary]
    delta_inner: float
    delta_graph: float
    delta_total: float
    inner_share: Optional[float] = None
    na_reason: Optional[NaReason] = None
    share_ci: Optional[ShareInterval] = None
    p_total: TTestResult
    p_graph: TTestResult
    p_inner: TTestResult
    per_horizon: Optional[list[MeansDecomposition]] = None
    failed_seeds: list[int] = []

    @property
    def display_share(self) -> str:
        if self.inner_share is None:
            return "n/a"
        return f"{round(self.inner_share)}%"


class SweepPoint(BaseModel):
    value: float
    arms: dict[str, ArmSummary]
    decomposition: Optional[DecompositionReport] = None
    graph_hash: Optional[str] = None


class SweepReport(Report):
    axis: str
    points: list[SweepPoint]
    flags: dict[str, bool] = {}
    trend: Optional[TTestResult] = None
    failed_seeds: list[int] = []

    @field_validator("points")
    @classmethod
    def _increasing(cls, points: list[SweepPoint]) -> list[SweepPoint]:
        values = [p.value for p in points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"Axis values must increase, got {values}")
        return points


class DistillReport(Report):
    arms: dict[str, ArmSummary]
    graph_share: Optional[float] = None
    p_distilled: TTestResult
    distilled_edges: int
    threshold: Optional[float] = None
    failed_seeds: list[int] = []


class E2EReport(Report):
    arms: dict[str, ArmSummary]
    bilevel_gain: float
    e2e_gain: float
    p_bilevel_vs_e2e: TTestResult
    bilevel_not_worse: bool
    failed_seeds: list[int] = []


class StratumStats(BaseModel):
    label: str
    low: float
    high: float
    pairs: int
    mean: Optional[float] = None
    median: Optional[float] = None


class JacobianReport(Report):
    strata: list[StratumStats]
    hop_radius: int
    short_long_ratio: Optional[float] = None
    max_beyond_radius: Optional[float] = None
    unreachable_pairs: int = 0
    sampled: bool
    seed: int


class EdgeProbabilityReport(Report):
    bin_edges: list[float]
    counts: list[int]
    fraction_below_001: float
    fraction_above_09: float
    fraction_below_threshold: float
    threshold: float
    substitution_rate: float
    addition_rate: float


class DirichletReport(Report):
    init_energy: float
    learned_energy: float


def _as_mapping(values: SeedValues) -> dict[int, float]:
    if isinstance(values, Mapping):
        return {int(k): float(v) for k, v in values.items()}
    return {i: float(v) for i, v in enumerate(values)}


def pooled_std(*arms: Sequence[float]) -> float:
    """Square root of the mean per-arm sample variance."""
    variances = [np.var(np.asarray(a, dtype=np.float64), ddof=1) for a in arms]
    return float(np.sqrt(np.mean(variances)))


def decompose_means(
    vanilla: float,
    frozen: float,
    bilevel: float,
    smaller_is_better: bool = True,
    pooled_std: Optional[float] = None,
) -> MeansDecomposition:
    """Channels and inner share from three arm means.

    The share is n/a when the total gain is not positive, or when the
    channels have strictly opposite signs and either the total is below
    the pooled per-seed std or the opposing channel exceeds 10% of the
    total.
    """
    sign = 1.0 if smaller_is_better else -1.0
    delta_inner = sign * (vanilla - frozen)
    delta_graph = sign * (frozen - bilevel)
    delta_total = delta_inner + delta_graph

    na_reason: Optional[NaReason] = None
    if delta_total <= 0:
        na_reason = "nonpositive_total"
    elif delta_inner * delta_graph < 0:
        opposing = min(delta_inner, delta_graph)
        small_total = pooled_std is not None and delta_total < pooled_std
        if small_total or -opposing > OPPOSING_CHANNEL_LIMIT * delta_total:
            na_reason = "opposite_signs"

    return MeansDecomposition(
        delta_inner=delta_inner,
        delta_graph=delta_graph,
        delta_total=delta_total,
        inner_share=None if na_reason else 100.0 * delta_inner / delta_total,
        na_reason=na_reason,
    )


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test of a against b.

    Zero-variance differences give a degenerate result without a p-value.

    Raises:
        ValueError: If the samples differ in length or have fewer than two
            values.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(
            f"Paired samples must be equal-length vectors, got {a.shape} "
            f"and {b.shape}"
        )
    if len(a) < 2:
        raise ValueError("A paired t-test needs at least two pairs")

    differences = a - b
    scale = max(1.0, float(np.max(np.abs(differences))))
    if np.ptp(differences) <= 1e-12 * scale:
        return TTestResult(degenerate=True, n=len(a))

    result = stats.ttest_rel(a, b)
    return TTestResult(
        statistic=float(result.statistic),
        p_value=float(result.pvalue),
        n=len(a),
    )


def rank_correlation(
    x: Sequence[float],
    y: Sequence[float],
    kind: Literal["spearman", "pearson"] = "spearman",
) -> CorrelationResult:
    """Spearman (average ranks for ties) or Pearson correlation.

    Raises:
        ValueError: If the lengths differ or are below three.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(
            f"Correlation needs equal-length vectors, got {x.shape} and "
            f"{y.shape}"
        )
    if len(x) < 3:
        raise ValueError("Correlation needs at least three points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return CorrelationResult(kind=kind, undefined=True)

    if kind == "spearman":
        result = stats.spearmanr(x, y)
    else:
        result = stats.pearsonr(x, y)
    return CorrelationResult(
        kind=kind,
        coefficient=float(result.statistic),
        p_value=float(result.pvalue),
    )


def bootstrap_share_ci(
    vanilla: Sequence[float],
    frozen: Sequence[float],
    bilevel: Sequence[float],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    smaller_is_better: bool = True,
) -> ShareInterval:
    """Percentile interval of the inner share over paired resamples.

    Seed indices are resampled with replacement and the share recomputed
    from the resampled means. Endpoints are achieved resample shares.

    Raises:
        ValueError: If fewer than three paired seeds are given.
    """
    arms = np.array([vanilla, frozen, bilevel], dtype=np.float64)
    if arms.ndim != 2 or arms.shape[1] < 3:
        raise ValueError("The share interval needs at least three seeds")
    if not 0 < level < 1:
        raise ValueError(f"Level must be in (0, 1), got {level}")

    n = arms.shape[1]
    rng = generator(seed, "bootstrap")
    shares = []
    for _ in range(resamples):
        picked = arms[:, rng.integers(0, n, size=n)]
        means = picked.mean(axis=1)
        decomposition = decompose_means(
            *means,
            smaller_is_better=smaller_is_better,
            pooled_std=pooled_std(*picked),
        )
        if decomposition.inner_share is not None:
            shares.append(decomposition.inner_share)

    undefined = 1.0 - len(shares) / resamples
    low = high = None
    if shares:
        tail = 100.0 * (1.0 - level) / 2.0
        low, high = np.percentile(
            shares, [tail, 100.0 - tail], method="inverted_cdf"
        )
        low, high = float(low), float(high)
    return ShareInterval(
        low=low,
        high=high,
        level=level,
        resamples=resamples,
        undefined_fraction=undefined,
        unstable=undefined > 0.5,
    )


def decompose(
    vanilla: SeedValues,
    frozen: SeedValues,
    bilevel: SeedValues,
    smaller_is_better: bool = True,
    resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> DecompositionReport:
    """Decompose paired per-seed metrics of the three arms.

    Args:
        vanilla (SeedValues): Seed to metric, or metrics in seed order.
        frozen (SeedValues): Same seeds, frozen-φ arm.
        bilevel (SeedValues): Same seeds, bilevel arm.
        smaller_is_better (bool): Metric direction.
        resamples (int): Bootstrap resamples; the interval needs at least
            three seeds and is omitted otherwise.
        bootstrap_seed (int): Seed of the resampling stream.

    Raises:
        ValueError: If the arms cover different seeds or fewer than two.
    """
    arms = {
        VANILLA: _as_mapping(vanilla),
        FROZEN: _as_mapping(frozen),
        BILEVEL: _as_mapping(bilevel),
    }
    seeds = sorted(arms[VANILLA])
    for name, values in arms.items():
        if sorted(values) != seeds:
            raise ValueError(
                f"Seed sets differ: {name} has {sorted(values)}, vanilla "
                f"has {seeds}"
            )
    if len(seeds) < 2:
        raise ValueError("Decomposition needs at least two seeds per arm")

    v, f, b = (
        np.array([arms[name][s] for s in seeds])
        for name in (VANILLA, FROZEN, BILEVEL)
    )
    means = decompose_means(
        float(v.mean()),
        float(f.mean()),
        float(b.mean()),
        smaller_is_better,
        pooled_std(v, f, b),
    )
    share_ci = None
    if len(seeds) >= 3:
        share_ci = bootstrap_share_ci(
            v,
            f,
            b,
            resamples,
            seed=bootstrap_seed,
            smaller_is_better=smaller_is_better,
        )

    return DecompositionReport(
        smaller_is_better=smaller_is_better,
        seeds=seeds,
        arms={name: ArmSummary.of(values) for name, values in arms.items()},
        delta_inner=means.delta_inner,
        delta_graph=means.delta_graph,
        delta_total=means.delta_total,
        inner_share=means.inner_share,
        na_reason=means.na_reason,
        share_ci=share_ci,
        p_total=paired_t_test(v, b),
        p_graph=paired_t_test(f, b),
        p_inner=paired_t_test(v, f),
    )


def per_horizon_decomposition(
    vanilla: Sequence[Sequence[float]],
    frozen: Sequence[Sequence[float]],
    bilevel: Sequence[Sequence[float]],
) -> list[MeansDecomposition]:
    """Decomposition at each forecast step from per-seed horizon curves."""
    v, f, b = (
        np.asarray(arm, dtype=np.float64) for arm in (vanilla, frozen, bilevel)
    )
    if not v.shape == f.shape == b.shape or v.ndim != 2:
        raise ValueError(
            f"Horizon curves must be (seeds, horizon) of one shape, got "
            f"{v.shape}, {f.shape}, {b.shape}"
        )
    return [
        decompose_means(
            float(v[:, h].mean()),
            float(f[:, h].mean()),
            float(b[:, h].mean()),
            pooled_std=pooled_std(v[:, h], f[:, h], b[:, h]),
        )
        for h in range(v.shape[1])
    ]


Table = dict[tuple[str, str], dict[int, RunRecord]]


def _run(runner: Runner, specs: Sequence[RunSpec]) -> Table:
    records = runner(specs)
    table: Table = {}
    for spec, record in zip(specs, records):
        table.setdefault((spec.cell, spec.arm), {})[spec.seed] = record
    return table


def _usable(
    table: Table, keys: Sequence[tuple[str, str]], seeds: Sequence[int]
) -> tuple[list[int], list[int]]:
    """Seeds whose runs succeeded in every listed cell, and the rest."""
    usable, failed = [], []
    for seed in seeds:
        broken = [
            f"{cell}/{arm}"
            for cell, arm in keys
            if table[cell, arm][seed].status != "ok"
        ]
        if broken:
            logger.warning(
                "Dropping seed %d: %s failed", seed, ", ".join(broken)
            )
            failed.append(seed)
        else:
            usable.append(seed)
    return usable, failed


def _metrics(
    table: Table, cell: str, arm: str, seeds: Sequence[int]
) -> dict[int, float]:
    return {s: table[cell, arm][s].test_metric for s in seeds}


def _decompose_cell(
    table: Table,
    cells: Mapping[str, str],
    seeds: Sequence[int],
    resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> DecompositionReport:
    """Decompose arms that may live in different cells.

    Args:
        cells (Mapping[str, str]): Arm name to the cell holding its runs.
    """
    arms = (VANILLA, FROZEN, BILEVEL)
    report = decompose(
        *(_metrics(table, cells[arm], arm, seeds) for arm in arms),
        resamples=resamples,
        bootstrap_seed=bootstrap_seed,
    )
    curves = [
        [table[cells[arm], arm][s].per_horizon_test for s in seeds]
        for arm in arms
    ]
    if all(c is not None for arm in curves for c in arm):
        report.per_horizon = per_horizon_decomposition(*curves)
    return report


def decomposition_study(
    setup: Setup,
    seeds: Sequence[int],
    runner: Runner,
    resamples: int = 1000,
    bootstrap_seed: int = 0,
) -> tuple[DecompositionReport, Table]:
    """Run the three arms on the setup and decompose the gain.

    Returns:
        tuple[DecompositionReport, Table]: The report and the run records
            keyed by (cell, arm) and seed.
    """
    specs = [
        setup.spec("main", arm, seed)
        for arm in (TrainMode.VANILLA, TrainMode.FROZEN_PHI, TrainMode.BILEVEL)
        for seed in seeds
    ]
    table = _run(runner, specs)
    cells = {VANILLA: "main", FROZEN: "main", BILEVEL: "main"}
    usable, failed = _usable(table, list(table), seeds)
    report = _decompose_cell(
        table, cells, usable, resamples, bootstrap_seed
    )
    report.failed_seeds = failed
    return report, table


def t_sweep(
    setup: Setup,
    t_values: Sequence[int],
    seeds: Sequence[int],
    runner: Runner,
    arms: Sequence[TrainMode] = (TrainMode.FROZEN_PHI, TrainMode.BILEVEL),
) -> SweepReport:
    """Metrics of the frozen-φ and bilevel arms across inner step counts.

    Flags:
        t1_matches_vanilla: the frozen arm at T=1 equals vanilla exactly on
            every seed.
        frozen_monotone: frozen means do not increase with T.
        frozen_invariant: frozen means span less than 1e-9 across T.
    """
    if any(t < 1 for t in t_values):
        raise ValueError(f"Inner step counts must be ≥ 1, got {t_values}")

    specs = [setup.spec("vanilla", TrainMode.VANILLA, s) for s in seeds]
    specs += [
        setup.spec(f"T={t}", arm, s, inner_steps=t)
        for t in t_values
        for arm in arms
        for s in seeds
    ]
    table = _run(runner, specs)
    usable, failed = _usable(table, list(table), seeds)

    vanilla = _metrics(table, "vanilla", VANILLA, usable)
    points = []
    for t in sorted(t_values):
        cell = f"T={t}"
        summaries = {VANILLA: ArmSummary.of(vanilla)}
        for arm in arms:
            summaries[arm.value] = ArmSummary.of(
                _metrics(table, cell, arm.value, usable)
            )
        decomposition = None
        if FROZEN in summaries and BILEVEL in summaries and len(usable) >= 2:
            decomposition = _decompose_cell(
                table,
                {VANILLA: "vanilla", FROZEN: cell, BILEVEL: cell},
                usable,
            )
        points.append(
            SweepPoint(value=t, arms=summaries, decomposition=decomposition)
        )

    flags: dict[str, bool] = {}
    if TrainMode.FROZEN_PHI in arms:
        frozen = [p.arms[FROZEN].mean for p in points]
        flags["frozen_monotone"] = all(
            b <= a for a, b in zip(frozen, frozen[1:])
        )
        flags["frozen_invariant"] = max(frozen) - min(frozen) < 1e-9
        if 1 in t_values:
            flags["t1_matches_vanilla"] = all(
                table["T=1", FROZEN][s].test_metric == vanilla[s]
                for s in usable
            )
    return SweepReport(
        axis="inner_steps", points=points, flags=flags, failed_seeds=failed
    )


def corruption_study(
    setup: Setup,
    r_values: Sequence[float],
    seeds: Sequence[int],
    runner: Runner,
    corruption_seed: int = 0,
) -> SweepReport:
    """Decompose the gain at each edge-corruption rate.

    Each rate corrupts the setup's graph once with `corruption_seed`; all
    three arms and all seeds of that rate train on the same corrupted
    graph.

    Flags:
        graph_increasing: the graph channel increases strictly with r.
        inner_saturates: the inner channel's increments shrink with r.
        cells_share_graph: the arms of each rate started from the same φ.
    """
    if any(not 0.0 <= r <= 1.0 for r in r_values):
        raise ValueError(f"Corruption rates must be in [0, 1], got {r_values}")

    specs, hashes = [], {}
    for r in sorted(r_values):
        graph = corrupt_edges(setup.dataset.graph, r, corruption_seed)
        hashes[r] = graph.content_hash()
        dataset = setup.dataset.with_graph(graph)
        phi = GraphParam.from_graph(
            graph, setup.phi.kind, setup.phi.sample_count
        )
        specs += [
            setup.spec(f"r={r}", arm, s, phi=phi, dataset=dataset)
            for arm in (
                TrainMode.VANILLA, TrainMode.FROZEN_PHI, TrainMode.BILEVEL
            )
            for s in seeds
        ]
    table = _run(runner, specs)
    usable, failed = _usable(table, list(table), seeds)

    points, shared = [], True
    for r in sorted(r_values):
        cell = f"r={r}"
        shared &= (
            len(
                {
                    table[cell, arm][s].graph_hash
                    for arm in (VANILLA, FROZEN, BILEVEL)
                    for s in usable
                }
            )
            <= 1
        )
        decomposition = _decompose_cell(
            table, {VANILLA: cell, FROZEN: cell, BILEVEL: cell}, usable
        )
        points.append(
            SweepPoint(
                value=r,
                arms=decomposition.arms,
                decomposition=decomposition,
                graph_hash=hashes[r],
            )
        )

    graph = [p.decomposition.delta_graph for p in points]
    inner = [p.decomposition.delta_inner for p in points]
    increments = np.diff(inner)
    flags = {
        "graph_increasing": all(b > a for a, b in zip(graph, graph[1:])),
        "inner_saturates": len(increments) >= 2
        and all(b < a for a, b in zip(increments, increments[1:])),
        "cells_share_graph": shared,
    }

    trend = None
    if len(points) >= 2:
        first, last = f"r={points[0].value}", f"r={points[-1].value}"

        def channel(cell: str) -> list[float]:
            return [
                table[cell, FROZEN][s].test_metric
                - table[cell, BILEVEL][s].test_metric
                for s in usable
            ]

        trend = paired_t_test(channel(last), channel(first))
    return SweepReport(
        axis="corruption_rate",
        points=points,
        flags=flags,
        trend=trend,
        failed_seeds=failed,
    )


def distill(
    setup: Setup,
    learned: GraphParam | np.ndarray,
    seeds: Sequence[int],
    runner: Runner,
    threshold: Optional[float] = None,
) -> DistillReport:
    """Retrain vanilla from scratch on a learned graph.

    The graph share is (M_vanilla − M_distilled) / (M_vanilla − M_bilevel)
    in percent, undefined when vanilla and bilevel tie. A learned φ is
    handed over as its exact A_φ. A plain adjacency becomes the A_init of
    a fresh φ, so distilling the setup's own A_init reproduces the vanilla
    runs exactly.

    Args:
        learned (GraphParam | np.ndarray): A learned φ or an adjacency.
        threshold (Optional[float]): Binarization threshold, required for
            Bernoulli φ.

    Raises:
        ValueError: If a Bernoulli φ comes without a threshold.
    """
    kind, samples = setup.phi.kind, setup.phi.sample_count
    if isinstance(learned, GraphParam):
        adjacency = learned_adjacency(learned, threshold)
        phi = GraphParam.fixed(adjacency, kind, samples)
    else:
        adjacency = np.asarray(learned, dtype=np.float64)
        phi = GraphParam.from_adjacency(adjacency, kind, samples)

    specs = [setup.spec("main", TrainMode.VANILLA, s) for s in seeds]
    specs += [setup.spec("main", TrainMode.BILEVEL, s) for s in seeds]
    specs += [
        setup.spec("distilled", TrainMode.VANILLA, s, phi=phi) for s in seeds
    ]
    table = _run(runner, specs)
    usable, failed = _usable(table, list(table), seeds)
    if len(usable) < 2:
        raise ValueError(
            f"Distillation needs two successful seeds, got {usable}"
        )

    vanilla = _metrics(table, "main", VANILLA, usable)
    bilevel = _metrics(table, "main", BILEVEL, usable)
    distilled = _metrics(table, "distilled", VANILLA, usable)
    arms = {
        VANILLA: ArmSummary.of(vanilla),
        BILEVEL: ArmSummary.of(bilevel),
        "distilled": ArmSummary.of(distilled),
    }
    gain = arms[VANILLA].mean - arms[BILEVEL].mean
    share = None
    if gain != 0:
        share = 100.0 * (arms[VANILLA].mean - arms["distilled"].mean) / gain

    return DistillReport(
        arms=arms,
        graph_share=share,
        p_distilled=paired_t_test(
            [vanilla[s] for s in usable], [distilled[s] for s in usable]
        ),
        distilled_edges=int(np.count_nonzero(np.triu(adjacency, k=1))),
        threshold=threshold,
        failed_seeds=failed,
    )


def _baseline_sweep(
    setup: Setup,
    axis: str,
    values: Sequence[float],
    seeds: Sequence[int],
    runner: Runner,
    flag: str,
) -> SweepReport:
    """Vanilla at each value of one config axis against frozen-φ."""
    specs = [setup.spec("frozen", TrainMode.FROZEN_PHI, s) for s in seeds]
    specs += [
        setup.spec(f"{axis}={v}", TrainMode.VANILLA, s, **{axis: v})
        for v in values
        for s in seeds
    ]
    table = _run(runner, specs)
    usable, failed = _usable(table, list(table), seeds)

    frozen = ArmSummary.of(_metrics(table, "frozen", FROZEN, usable))
    points = [
        SweepPoint(
            value=v,
            arms={
                VANILLA: ArmSummary.of(
                    _metrics(table, f"{axis}={v}", VANILLA, usable)
                ),
                FROZEN: frozen,
            },
        )
        for v in sorted(values)
    ]
    return SweepReport(
        axis=axis,
        points=points,
        flags={flag: any(p.arms[VANILLA].mean <= frozen.mean for p in points)},
        failed_seeds=failed,
    )


def weight_decay_sweep(
    setup: Setup,
    lambdas: Sequence[float],
    seeds: Sequence[int],
    runner: Runner,
) -> SweepReport:
    """Can stronger regularization of vanilla stand in for inner steps?"""
    return _baseline_sweep(
        setup, "weight_decay", lambdas, seeds, runner, "reaches_frozen"
    )


def compute_matched(
    setup: Setup,
    multipliers: Sequence[int],
    seeds: Sequence[int],
    runner: Runner,
) -> SweepReport:
    """Vanilla with a multiplied epoch budget against frozen-φ."""
    return _baseline_sweep(
        setup, "epoch_multiplier", multipliers, seeds, runner, "matches_frozen"
    )


def e2e_comparison(
    setup: Setup, seeds: Sequence[int], runner: Runner
) -> E2EReport:
    """Gain of bilevel and of joint end-to-end training over vanilla."""
    arms = (TrainMode.VANILLA, TrainMode.BILEVEL, TrainMode.E2E_JOINT)
    specs = [setup.spec("main", arm, s) for arm in arms for s in seeds]
    table = _run(runner, specs)
    usable, failed = _usable(table, list(table), seeds)
    if len(usable) < 2:
        raise ValueError(
            f"Comparison needs two successful seeds, got {usable}"
        )

    metrics = {a.value: _metrics(table, "main", a.value, usable) for a in arms}
    summaries = {name: ArmSummary.of(m) for name, m in metrics.items()}
    bilevel_gain = summaries[VANILLA].mean - summaries[BILEVEL].mean
    e2e_gain = summaries[VANILLA].mean - summaries[E2E].mean
    return E2EReport(
        arms=summaries,
        bilevel_gain=bilevel_gain,
        e2e_gain=e2e_gain,
        p_bilevel_vs_e2e=paired_t_test(
            [metrics[BILEVEL][s] for s in usable],
            [metrics[E2E][s] for s in usable],
        ),
        bilevel_not_worse=bilevel_gain >= e2e_gain,
        failed_seeds=failed,
    )


NC_STRATA = [
    ("1", 1, 1),
    ("2", 2, 2),
    ("3", 3, 3),
    ("4", 4, 4),
    (">=5", 5, math.inf),
]
ST_STRATA = [("<=2", 1, 2), ("3-5", 3, 5), (">=6", 6, math.inf)]


def jacobian_pairs(
    model: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    pairs: np.ndarray,
    output_step: Optional[int] = None,
) -> np.ndarray:
    """Norms ‖∂ŷ_v/∂x_u‖₂, one backward pass per target v."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    norms = np.zeros(len(pairs))
    for target in np.unique(pairs[:, 1]):
        rows = jacobian_rows(model, inputs, int(target), output_step)
        picked = pairs[:, 1] == target
        norms[picked] = rows[pairs[picked, 0]]
    return norms


def jacobian_by_distance(
    record: RunRecord,
    task: Task,
    strata: Literal["nc", "st"] = "nc",
    seed: int = 0,
    pairs_per_stratum: int = 200,
    output_step: Optional[int] = None,
) -> JacobianReport:
    """Input sensitivity of a trained model, grouped by hop distance.

    Distances are measured on the support of the graph the model was
    evaluated with. Graphs of up to 100 nodes use every ordered pair;
    larger graphs sample up to `pairs_per_stratum` pairs per stratum.
    Pairs in different components are counted but left out of every
    stratum.

    Raises:
        ValueError: If the record carries no parameters or φ.
    """
    if record.params is None or record.phi is None:
        raise ValueError("The run record has no trained parameters or φ")

    adjacency = materialize_graph(record.phi)
    support = Graph.from_adjacency(
        (adjacency != 0).astype(np.float64), symmetrize=True
    )
    distances = bfs_distances(support)
    n = support.n
    sources, targets = np.nonzero(~np.eye(n, dtype=bool))
    hops = distances[sources, targets]
    reachable = np.isfinite(hops)

    model = task.node_model(record.params, adjacency)
    inputs = task.probe_inputs()
    bounds = NC_STRATA if strata == "nc" else ST_STRATA
    rng = generator(seed, "jacobian_pairs")
    sampled = n > 100

    chosen, labels = [], []
    for k, (_, low, high) in enumerate(bounds):
        members = np.flatnonzero(reachable & (hops >= low) & (hops <= high))
        if sampled and len(members) > pairs_per_stratum:
            members = np.sort(
                rng.choice(members, size=pairs_per_stratum, replace=False)
            )
        chosen.append(members)
        labels.append(np.full(len(members), k))
    chosen = np.concatenate(chosen)
    labels = np.concatenate(labels)

    pairs = np.column_stack([sources[chosen], targets[chosen]])
    norms = jacobian_pairs(model, inputs, pairs, output_step)
    pair_hops = hops[chosen]

    rows = []
    for k, (label, low, high) in enumerate(bounds):
        values = norms[labels == k]
        rows.append(
            StratumStats(
                label=label,
                low=low,
                high=high,
                pairs=len(values),
                mean=float(values.mean()) if len(values) else None,
                median=float(np.median(values)) if len(values) else None,
            )
        )

    short = norms[pair_hops <= 2]
    long = norms[pair_hops >= 3]
    ratio = None
    if len(short) and len(long) and long.mean() > 0:
        ratio = float(short.mean() / long.mean())
    radius = task.backbone.hop_radius
    beyond = norms[pair_hops > radius]
    return JacobianReport(
        strata=rows,
        hop_radius=radius,
        short_long_ratio=ratio,
        max_beyond_radius=float(beyond.max()) if len(beyond) else None,
        unreachable_pairs=int(np.sum(~reachable)),
        sampled=sampled,
        seed=seed,
    )


def edge_probability_report(
    phi: GraphParam, threshold: float = 0.5, bins: int = 20
) -> EdgeProbabilityReport:
    """Distribution of learned edge probabilities over node pairs.

    Substitution is the fraction of A_init edges the modal graph drops,
    addition the number of new modal edges relative to |E_init|.

    Raises:
        ValueError: If φ is not Bernoulli.
    """
    if phi.kind != GraphParamKind.BERNOULLI:
        raise ValueError("Edge probabilities need a Bernoulli φ")

    upper = np.triu_indices(phi.n, k=1)
    theta = phi.values[upper]
    counts, edges = np.histogram(theta, bins=bins, range=(0.0, 1.0))

    initial = phi.support[upper]
    modal = binarize(phi, threshold)[upper] > 0
    base = max(int(initial.sum()), 1)
    return EdgeProbabilityReport(
        bin_edges=edges.tolist(),
        counts=counts.tolist(),
        fraction_below_001=float(np.mean(theta < 0.01)),
        fraction_above_09=float(np.mean(theta > 0.9)),
        fraction_below_threshold=float(np.mean(theta < threshold)),
        threshold=threshold,
        substitution_rate=float(np.sum(initial & ~modal) / base),
        addition_rate=float(np.sum(modal & ~initial) / base),
    )


def dirichlet_report(
    dataset: STDataset | NCDataset,
    phi: GraphParam,
    threshold: Optional[float] = None,
) -> DirichletReport:
    """Dirichlet energy of the inputs on A_init and on the learned graph.

    Forecasting inputs are the normalized train range, one column per
    time step.
    """
    if isinstance(dataset, STDataset):
        start, end = dataset.splits["train"]
        features = dataset.normalized[start:end].T
    else:
        features = np.asarray(dataset.graph.features)
    learned = Graph.from_adjacency(
        learned_adjacency(phi, threshold), symmetrize=True
    )
    return DirichletReport(
        init_energy=dirichlet_energy(dataset.graph, features),
        learned_energy=dirichlet_energy(learned, features),
    )
