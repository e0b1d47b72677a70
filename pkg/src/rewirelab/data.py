"""Datasets, synthetic generators with planted structural slack, and CSV
ingestion."""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal, Sequence

import networkx as nx
import numpy as np
import pandas as pd

from rewirelab.graph import (
    Graph,
    corrupt_edges,
    gaussian_kernel_adjacency,
    read_edge_list,
    write_edge_list,
)
from rewirelab.seeding import derive_seed, generator

logger = logging.getLogger(__name__)

Split = Literal["train", "val", "test"]
SPLITS: tuple[Split, ...] = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


def contiguous_splits(
    steps: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> dict[str, tuple[int, int]]:
    """Ordered [start, end) time ranges for train, val and test."""
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"Split fractions must sum to 1, got {fractions}")
    # rounded first so 0.7 + 0.1 of 100 steps ends at 80, not 79
    train_end = math.floor(round(fractions[0] * steps, 9))
    val_end = math.floor(round((fractions[0] + fractions[1]) * steps, 9))
    return {
        "train": (0, train_end),
        "val": (train_end, val_end),
        "test": (val_end, steps),
    }


@dataclass(frozen=True, eq=False)
class STDataset:
    """A node signal over time with a (possibly imperfect) graph.

    Normalization statistics are fit per node on the train range only.
    A window starting at t covers inputs t..t+W-1 and targets
    t+W..t+W+H-1, all inside one split.
    """

    graph: Graph
    signal: np.ndarray
    window: int
    horizon: int
    splits: dict[str, tuple[int, int]]
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        signal = np.asarray(self.signal, dtype=np.float64)
        if signal.ndim != 2 or signal.shape[1] != self.graph.n:
            raise ValueError(
                f"Signal shape {signal.shape} does not match "
                f"{self.graph.n} nodes"
            )
        if not np.all(np.isfinite(signal)):
            raise ValueError("Signal contains missing or infinite values")
        if self.window < 1 or self.horizon < 1:
            raise ValueError("Window and horizon must be positive")

        previous_end = 0
        for name in SPLITS:
            start, end = self.splits[name]
            if start != previous_end or end < start:
                raise ValueError(
                    f"Splits must be contiguous, got {self.splits}"
                )
            if end - start < self.window + self.horizon:
                raise ValueError(
                    f"The {name} split has {end - start} steps, fewer than "
                    f"window + horizon = {self.window + self.horizon}"
                )
            previous_end = end
        if previous_end != len(signal):
            raise ValueError(
                f"Splits end at {previous_end}, signal has {len(signal)} "
                "steps"
            )

        start, end = self.splits["train"]
        mean = signal[start:end].mean(axis=0)
        std = signal[start:end].std(axis=0)
        std = np.where(std > 0, std, 1.0)

        object.__setattr__(self, "signal", signal)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def normalized(self) -> np.ndarray:
        return (self.signal - self.mean) / self.std

    def window_starts(self, split: Split) -> np.ndarray:
        start, end = self.splits[split]
        return np.arange(start, end - self.window - self.horizon + 1)

    def inputs(self, starts: np.ndarray) -> np.ndarray:
        """Normalized input windows, shape (B, W, n)."""
        normalized = self.normalized
        return np.stack([normalized[s : s + self.window] for s in starts])

    def targets(self, starts: np.ndarray) -> np.ndarray:
        """Normalized targets, shape (B, H, n)."""
        normalized = self.normalized
        w, h = self.window, self.horizon
        return np.stack([normalized[s + w : s + w + h] for s in starts])

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        """Undo the normalization on an array whose last axis is nodes."""
        return values * self.std + self.mean

    def with_graph(self, graph: Graph) -> "STDataset":
        return replace(self, graph=graph)


@dataclass(frozen=True, eq=False)
class NCDataset:
    """Node classification on one graph with disjoint node splits."""

    graph: Graph
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        if self.graph.features is None or self.graph.labels is None:
            raise ValueError("Node classification needs features and labels")
        parts = [np.asarray(p, dtype=np.int64) for p in self.split_nodes]
        joined = np.concatenate(parts)
        if len(np.unique(joined)) != len(joined):
            raise ValueError("Node splits overlap")
        labels = np.asarray(self.graph.labels)
        missing = set(np.unique(labels)) - set(np.unique(labels[parts[0]]))
        if missing:
            raise ValueError(f"Classes {sorted(missing)} absent from train")
        for name, part in zip(SPLITS, parts):
            object.__setattr__(self, name, part)

    @property
    def split_nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.train, self.val, self.test

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def num_classes(self) -> int:
        return int(np.max(self.graph.labels)) + 1

    def mask(self, split: Split) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[getattr(self, split)] = True
        return mask

    def with_graph(self, graph: Graph) -> "NCDataset":
        graph = replace(
            graph, features=self.graph.features, labels=self.graph.labels
        )
        return replace(self, graph=graph)


@dataclass(frozen=True, eq=False)
class PlantedSpec:
    """How the init graph of a synthetic dataset diverges from the truth."""

    true_graph: Graph
    init_graph: Graph
    slack: float
    rewired_edges: int
    rho: float
    amplitude: float
    period: int
    phases: np.ndarray


def synth_st(
    n_nodes: int = 60,
    steps: int = 3000,
    slack: float = 0.0,
    noise: float = 0.1,
    rho: float = 0.9,
    amplitude: float = 1.0,
    period: int = 48,
    bandwidth: float = 15.0,
    threshold: float = 0.1,
    window: int = 12,
    horizon: int = 4,
    seed: int = 42,
) -> tuple[STDataset, PlantedSpec]:
    """Linear diffusion on a planted graph, seen through a corrupted one.

    The signal follows x_{t+1} = ρ·Ŝ·x_t + a·sin(2πt/P + φ_i) + ε
    with Ŝ the row-normalized true kernel graph. The returned dataset
    carries the init graph, which is the true graph with a `slack`
    fraction of its edges rewired.

    Raises:
        ValueError: If ρ is not in [0, 1) or the slack is outside [0, 1].
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"Diffusion is unstable for rho={rho}")
    if n_nodes < 1 or steps < 1:
        raise ValueError("Node and step counts must be positive")

    coords = generator(seed, "coords").uniform(0.0, 100.0, (n_nodes, 2))
    true_graph = gaussian_kernel_adjacency(
        coords, bandwidth, threshold, metric="euclidean"
    )
    init_graph = corrupt_edges(true_graph, slack, derive_seed(seed, "slack"))

    adjacency = true_graph.adjacency()
    degree = adjacency.sum(axis=1, keepdims=True)
    transition = np.divide(
        adjacency, degree, out=np.zeros_like(adjacency), where=degree > 0
    )

    rng = generator(seed, "signal")
    phases = rng.uniform(0.0, 2.0 * math.pi, n_nodes)
    signal = np.zeros((steps, n_nodes))
    signal[0] = rng.normal(size=n_nodes)
    for t in range(steps - 1):
        forcing = amplitude * np.sin(2.0 * math.pi * t / period + phases)
        signal[t + 1] = (
            rho * transition @ signal[t]
            + forcing
            + noise * rng.normal(size=n_nodes)
        )

    logger.info(
        "Generated %d×%d signal, %d true edges, %d rewired",
        steps,
        n_nodes,
        true_graph.num_edges,
        math.floor(slack * true_graph.num_edges),
    )
    dataset = STDataset(
        graph=init_graph,
        signal=signal,
        window=window,
        horizon=horizon,
        splits=contiguous_splits(steps),
    )
    planted = PlantedSpec(
        true_graph=true_graph,
        init_graph=init_graph,
        slack=slack,
        rewired_edges=math.floor(slack * true_graph.num_edges),
        rho=rho,
        amplitude=amplitude,
        period=period,
        phases=phases,
    )
    return dataset, planted


def _stratified_split(
    labels: np.ndarray, fractions: Sequence[float], seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = generator(seed, "splits")
    parts: list[list[int]] = [[], [], []]
    for label in np.unique(labels):
        nodes = rng.permutation(np.flatnonzero(labels == label))
        n_train = max(1, math.floor(fractions[0] * len(nodes)))
        n_val = math.floor(fractions[1] * len(nodes))
        parts[0] += nodes[:n_train].tolist()
        parts[1] += nodes[n_train : n_train + n_val].tolist()
        parts[2] += nodes[n_train + n_val :].tolist()
    return tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)


def sbm_probabilities(
    n_nodes: int, classes: int, homophily: float, mean_degree: float
) -> tuple[float, float]:
    """Intra and inter block probabilities for a target homophily.

    With balanced blocks, the expected same-class degree is
    p_in·(n/k - 1) = h·d and the other-class degree is
    p_out·n(k-1)/k = (1 - h)·d.

    Raises:
        ValueError: If a probability would exceed 1.
    """
    block = n_nodes / classes
    p_in = homophily * mean_degree / (block - 1)
    p_out = (1.0 - homophily) * mean_degree / (n_nodes - block)
    if p_in > 1.0 or p_out > 1.0:
        raise ValueError(
            f"Homophily {homophily} at mean degree {mean_degree} is "
            f"infeasible for {n_nodes} nodes in {classes} classes"
        )
    return p_in, p_out


def synth_nc(
    n_nodes: int = 300,
    classes: int = 3,
    homophily: float = 0.8,
    mean_degree: float = 6.0,
    feature_dim: int = 16,
    feature_noise: float = 2.0,
    fractions: Sequence[float] = (0.2, 0.2, 0.6),
    seed: int = 42,
) -> NCDataset:
    """Stochastic block model with class-mean Gaussian features.

    Raises:
        ValueError: If homophily is outside (0, 1], there are fewer than 2
            classes, or the target is infeasible.
    """
    if classes < 2:
        raise ValueError(f"Need at least 2 classes, got {classes}")
    if not 0.0 < homophily <= 1.0:
        raise ValueError(f"Homophily must be in (0, 1], got {homophily}")
    p_in, p_out = sbm_probabilities(n_nodes, classes, homophily, mean_degree)

    sizes = [
        n_nodes // classes + (k < n_nodes % classes) for k in range(classes)
    ]
    probabilities = [
        [p_in if a == b else p_out for b in range(classes)]
        for a in range(classes)
    ]
    sbm = nx.stochastic_block_model(
        sizes, probabilities, seed=derive_seed(seed, "sbm")
    )
    labels = np.repeat(np.arange(classes), sizes)
    edges = np.array(sorted(sbm.edges()), dtype=np.int64).reshape(-1, 2)

    rng = generator(seed, "features")
    means = rng.normal(size=(classes, feature_dim))
    features = means[labels] + feature_noise * rng.normal(
        size=(n_nodes, feature_dim)
    )

    graph = Graph(
        n=n_nodes,
        edges=edges,
        weights=np.ones(len(edges)),
        labels=labels,
        features=features,
    )
    train, val, test = _stratified_split(labels, fractions, seed)
    logger.info(
        "Generated SBM with %d nodes, %d edges (p_in=%.4f, p_out=%.4f)",
        n_nodes,
        graph.num_edges,
        p_in,
        p_out,
    )
    return NCDataset(graph=graph, train=train, val=val, test=test)


def two_cluster_layout(
    n_per_cluster: int = 20,
    separation: float = 100.0,
    spread: float = 5.0,
    seed: int = 42,
) -> tuple[np.ndarray, np.ndarray]:
    """Two Gaussian blobs of planar positions and their cluster ids."""
    rng = generator(seed, "layout")
    centers = np.array([[0.0, 0.0], [separation, 0.0]])
    cluster = np.repeat([0, 1], n_per_cluster)
    offsets = spread * rng.normal(size=(2 * n_per_cluster, 2))
    coords = centers[cluster] + offsets
    return coords, cluster


def batch_iter(
    dataset: STDataset, batch_size: int, seed: int, split: Split = "train"
) -> Iterator[np.ndarray]:
    """Window start indices in batches.

    The train split is shuffled by `seed`; val and test keep time order.
    Every valid window appears exactly once.
    """
    if batch_size < 1:
        raise ValueError(f"Batch size must be positive, got {batch_size}")
    starts = dataset.window_starts(split)
    if split == "train":
        starts = np.random.default_rng(seed).permutation(starts)
    for offset in range(0, len(starts), batch_size):
        yield starts[offset : offset + batch_size]


def read_signal(path: Path) -> np.ndarray:
    """Read a `t,node0,...,nodeK` CSV into a (time, nodes) array.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If rows are ragged or values are missing.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Signal file does not exist at {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise ValueError(f"{path}: ragged rows ({e})") from e

    if frame.columns[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    if frame.isna().any(axis=None):
        rows = frame.index[frame.isna().any(axis=1)] + 2
        raise ValueError(f"{path}: missing values on lines {list(rows)}")
    return frame.iloc[:, 1:].to_numpy(dtype=np.float64)


def write_signal(signal: np.ndarray, path: Path) -> None:
    columns = [f"node{i}" for i in range(signal.shape[1])]
    frame = pd.DataFrame(signal, columns=columns)
    frame.insert(0, "t", np.arange(len(frame)))
    frame.to_csv(path, index=False)


def load_csv_st(
    signal_path: Path,
    graph_path: Path,
    window: int,
    horizon: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> STDataset:
    """Build a dataset from a signal CSV and an edge list.

    Raises:
        FileNotFoundError: If a file does not exist.
        ValueError: On malformed files or splits too short for a window.
    """
    signal = read_signal(signal_path)
    graph = read_edge_list(graph_path)
    logger.info(
        "Loaded %d steps over %d nodes from %s", *signal.shape, signal_path
    )
    return STDataset(
        graph=graph,
        signal=signal,
        window=window,
        horizon=horizon,
        splits=contiguous_splits(len(signal), fractions),
    )


def save_csv_st(dataset: STDataset, directory: Path) -> Path:
    """Write signal, edge list and a manifest JSON into `directory`.

    Returns:
        Path: The manifest path.
    """
    directory.mkdir(parents=True, exist_ok=True)
    write_signal(dataset.signal, directory / "signal.csv")
    write_edge_list(dataset.graph, directory / "graph.txt")

    manifest = {
        "signal": "signal.csv",
        "graph": "graph.txt",
        "window": dataset.window,
        "horizon": dataset.horizon,
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "normalization": {
            "mean": dataset.mean.tolist(),
            "std": dataset.std.tolist(),
        },
        "graph_hash": dataset.graph.content_hash(),
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path: Path) -> STDataset:
    """Load a dataset written by `save_csv_st`.

    Raises:
        FileNotFoundError: If the manifest or a listed file is missing.
        ValueError: If the stored normalization does not match the data.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Manifest does not exist at {path}")
    manifest = json.loads(path.read_text())
    dataset = STDataset(
        graph=read_edge_list(path.parent / manifest["graph"]),
        signal=read_signal(path.parent / manifest["signal"]),
        window=manifest["window"],
        horizon=manifest["horizon"],
        splits={k: tuple(v) for k, v in manifest["splits"].items()},
    )
    stored = np.asarray(manifest["normalization"]["mean"])
    if not np.allclose(stored, dataset.mean):
        raise ValueError(f"{path}: normalization does not match the signal")
    return dataset

