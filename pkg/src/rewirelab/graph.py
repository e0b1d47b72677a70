"""Undirected weighted graphs and the operations rewiring acts on."""

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Annotated, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _components
from scipy.sparse.csgraph import shortest_path
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

Metric = Literal["haversine", "euclidean"]


@dataclass(frozen=True, eq=False)
class Graph:
    """Weighted undirected graph stored as an upper-triangle edge list.

    Edges are kept sorted with i < j. The invariants (no self-loops, no
    duplicates, finite non-negative weights) are checked on construction,
    so every operation returning a Graph is validated.
    """

    n: int
    edges: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64)
    )
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coords: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

        if self.n < 0:
            raise ValueError(f"Node count must be non-negative, got {self.n}")
        if len(edges) != len(weights):
            raise ValueError(
                f"{len(edges)} edges but {len(weights)} weights"
            )
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.n:
                raise ValueError(f"Edge index out of range for n={self.n}")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("Self-loops are not allowed")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("Edge weights must be finite and non-negative")

        # Canonical order: i < j, sorted lexicographically
        edges = np.sort(edges, axis=1)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges, weights = edges[order], weights[order]
        if len(edges) > 1:
            same = np.all(edges[1:] == edges[:-1], axis=1)
            if np.any(same):
                i, j = edges[1:][same][0]
                raise ValueError(f"Duplicate edge ({i}, {j})")

        for name, value in (
            ("coords", self.coords),
            ("labels", self.labels),
            ("features", self.features),
        ):
            if value is not None and len(value) != self.n:
                raise ValueError(
                    f"{name} has {len(value)} rows, expected {self.n}"
                )

        edges.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_adjacency(
        cls, adjacency: np.ndarray, symmetrize: bool = False, **attrs
    ) -> "Graph":
        """Build a graph from a dense adjacency matrix.

        Args:
            adjacency (np.ndarray): Square weight matrix. The diagonal is
                ignored.
            symmetrize (bool): Average A and Aᵀ instead of requiring a
                symmetric input.
            **attrs: coords, labels or features.

        Raises:
            ValueError: If the matrix is not square, or not symmetric and
                `symmetrize` is False.
        """
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise ValueError(
                f"Adjacency must be square, got shape {adjacency.shape}"
            )
        if symmetrize:
            adjacency = 0.5 * (adjacency + adjacency.T)
        elif not np.allclose(adjacency, adjacency.T, atol=1e-12):
            raise ValueError("Adjacency is not symmetric")

        rows, cols = np.nonzero(np.triu(adjacency, k=1))
        return cls(
            n=adjacency.shape[0],
            edges=np.column_stack([rows, cols]),
            weights=adjacency[rows, cols],
            **attrs,
        )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric adjacency matrix."""
        matrix = np.zeros((self.n, self.n))
        if self.num_edges:
            i, j = self.edges[:, 0], self.edges[:, 1]
            matrix[i, j] = self.weights
            matrix[j, i] = self.weights
        return matrix

    def degrees(self) -> np.ndarray:
        """Unweighted node degrees."""
        return np.bincount(self.edges.reshape(-1), minlength=self.n)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def with_edges(self, edges: np.ndarray, weights: np.ndarray) -> "Graph":
        """Same nodes and attributes, new edge list."""
        return replace(self, edges=edges, weights=weights)

    def content_hash(self) -> str:
        """SHA-256 over the node count and the canonical edge list."""
        digest = hashlib.sha256()
        digest.update(f"n={self.n}".encode())
        digest.update(self.edges.tobytes())
        digest.update(self.weights.tobytes())
        return digest.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ComponentReport:
    component_count: int
    component_sizes: tuple[int, ...]
    isolated_count: int
    lcc_nodes: tuple[int, ...]
    labels: np.ndarray


def pairwise_distances(coords: np.ndarray, metric: Metric) -> np.ndarray:
    """Pairwise distances in km (haversine) or coordinate units.

    Haversine coordinates are (latitude, longitude) in degrees.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if metric == "euclidean":
        return cdist(coords, coords)

    lat, lon = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = (
        np.sin(dlat / 2) ** 2
        + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    )
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def gaussian_kernel_adjacency(
    coords: np.ndarray,
    bandwidth: float,
    threshold: float = 0.1,
    metric: Metric = "haversine",
) -> Graph:
    """Thresholded Gaussian kernel graph over node positions.

    Edge (i, j) is kept iff exp(-d_ij²/θ²) ≥ τ, and weighted with the raw
    kernel value.

    Args:
        coords (np.ndarray): (n, 2) positions.
        bandwidth (float): Kernel bandwidth θ, in km for haversine.
        threshold (float): Kernel threshold τ in [0, 1).
        metric (Metric): Distance metric.

    Raises:
        ValueError: If θ ≤ 0 or τ is outside [0, 1).
    """
    if bandwidth <= 0:
        raise ValueError(f"Bandwidth must be positive, got {bandwidth}")
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"Threshold must be in [0, 1), got {threshold}")

    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(coords)
    if n < 2:
        return Graph(n=n, coords=coords)

    kernel = np.exp(-(pairwise_distances(coords, metric) ** 2) / bandwidth**2)
    rows, cols = np.triu_indices(n, k=1)
    keep = kernel[rows, cols] >= threshold
    return Graph(
        n=n,
        edges=np.column_stack([rows[keep], cols[keep]]),
        weights=kernel[rows[keep], cols[keep]],
        coords=coords,
    )


def connected_components(g: Graph) -> ComponentReport:
    """Undirected components, labelled 0.. in order of smallest node."""
    matrix = csr_matrix(
        (np.ones(g.num_edges), (g.edges[:, 0], g.edges[:, 1])),
        shape=(g.n, g.n),
    )
    count, raw = _components(matrix, directed=False)

    # Relabel so component k is the one with the k-th smallest first node
    first_node = np.full(count, g.n)
    np.minimum.at(first_node, raw, np.arange(g.n))
    relabel = np.empty(count, dtype=np.int64)
    relabel[np.argsort(first_node)] = np.arange(count)
    labels = relabel[raw]

    sizes = np.bincount(labels, minlength=count)
    lcc = int(np.argmax(sizes)) if count else 0  # argmax takes the first tie
    return ComponentReport(
        component_count=int(count),
        component_sizes=tuple(sorted((int(s) for s in sizes), reverse=True)),
        isolated_count=int(np.sum(g.degrees() == 0)),
        lcc_nodes=tuple(int(v) for v in np.flatnonzero(labels == lcc)),
        labels=labels,
    )


def single_linkage_clusters(
    coords: np.ndarray, cutoff: float, metric: Metric = "haversine"
) -> np.ndarray:
    """Cluster ids of single-linkage clustering cut at `cutoff`.

    Two nodes share a cluster iff a chain of pairwise distances ≤ cutoff
    connects them, i.e. the connected components of the cutoff graph.
    """
    if cutoff <= 0:
        raise ValueError(f"Cutoff must be positive, got {cutoff}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = len(coords)
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    distances = pairwise_distances(coords, metric)
    rows, cols = np.triu_indices(n, k=1)
    near = distances[rows, cols] <= cutoff
    cutoff_graph = Graph(
        n=n,
        edges=np.column_stack([rows[near], cols[near]]),
        weights=np.ones(int(near.sum())),
    )
    return connected_components(cutoff_graph).labels


class FixedBandwidth(BaseModel):
    kind: Literal["fixed"] = "fixed"
    value: float = Field(gt=0)

    @property
    def label(self) -> str:
        return f"fixed {self.value:g}"

    def resolve(self, distances: np.ndarray) -> float:
        return self.value


class SubsetStdBandwidth(BaseModel):
    """Std of all pairwise distances among a subset of nodes."""

    kind: Literal["subset_std"] = "subset_std"
    nodes: list[int]

    @property
    def label(self) -> str:
        return f"std over {len(self.nodes)} nodes"

    def resolve(self, distances: np.ndarray) -> float:
        if not self.nodes:
            raise ValueError("Std bandwidth rule needs a non-empty subset")
        subset = np.asarray(self.nodes)
        return float(np.std(distances[np.ix_(subset, subset)]))


class PercentileBandwidth(BaseModel):
    """Percentile p of the pairwise distances over all node pairs."""

    kind: Literal["percentile"] = "percentile"
    p: float = Field(gt=0, le=100)

    @property
    def label(self) -> str:
        return f"p{self.p:g}"

    def resolve(self, distances: np.ndarray) -> float:
        rows, cols = np.triu_indices(len(distances), k=1)
        return float(np.percentile(distances[rows, cols], self.p))


BandwidthRule = Annotated[
    Union[FixedBandwidth, SubsetStdBandwidth, PercentileBandwidth],
    Field(discriminator="kind"),
]


class BandwidthRow(BaseModel):
    rule: str
    bandwidth: float
    component_count: int
    isolated: int
    mean_degree: float
    edge_count: int
    inter_cluster_edges: int


def bandwidth_ablation(
    coords: np.ndarray,
    rules: Sequence[BandwidthRule],
    threshold: float = 0.1,
    cutoff: float = 80.0,
    metric: Metric = "haversine",
) -> list[BandwidthRow]:
    """One kernel graph per bandwidth rule, with its block structure.

    Inter-cluster edges join nodes in different single-linkage clusters at
    `cutoff`.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    distances = pairwise_distances(coords, metric)
    clusters = single_linkage_clusters(coords, cutoff, metric)

    rows = []
    for rule in rules:
        bandwidth = rule.resolve(distances)
        g = gaussian_kernel_adjacency(coords, bandwidth, threshold, metric)
        report = connected_components(g)
        inter = int(
            np.sum(clusters[g.edges[:, 0]] != clusters[g.edges[:, 1]])
        )
        logger.info(
            "Bandwidth %s = %.3f: %d edges, %d components",
            rule.label,
            bandwidth,
            g.num_edges,
            report.component_count,
        )
        rows.append(
            BandwidthRow(
                rule=rule.label,
                bandwidth=bandwidth,
                component_count=report.component_count,
                isolated=report.isolated_count,
                mean_degree=2.0 * g.num_edges / g.n if g.n else 0.0,
                edge_count=g.num_edges,
                inter_cluster_edges=inter,
            )
        )
    return rows


def corrupt_edges(g: Graph, fraction: float, seed: int) -> Graph:
    """Swap ⌊r·|E|⌋ random edges for random non-edges.

    The removed subset is drawn first. Additions are drawn uniformly from
    the pairs that are not edges of the original graph, so exactly
    ⌊r·|E|⌋ original edges are absent afterwards. Added edges take over
    the weights of the removed ones.

    Raises:
        ValueError: If r is outside [0, 1] or too few non-edges exist.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"Fraction must be in [0, 1], got {fraction}")

    count = math.floor(fraction * g.num_edges)
    if count == 0:
        return g

    rows, cols = np.triu_indices(g.n, k=1)
    pair_ids = rows * g.n + cols
    edge_ids = g.edges[:, 0] * g.n + g.edges[:, 1]
    complement = np.flatnonzero(~np.isin(pair_ids, edge_ids))
    if count > len(complement):
        raise ValueError(
            f"Cannot add {count} edges: only {len(complement)} non-edges"
        )

    rng = np.random.default_rng(seed)
    removed = rng.choice(g.num_edges, size=count, replace=False)
    added = rng.choice(complement, size=count, replace=False)

    keep = np.ones(g.num_edges, dtype=bool)
    keep[removed] = False
    edges = np.concatenate(
        [g.edges[keep], np.column_stack([rows[added], cols[added]])]
    )
    weights = np.concatenate([g.weights[keep], g.weights[removed]])
    return g.with_edges(edges, weights)


def bfs_distances(
    g: Graph, sources: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Unweighted hop distances from `sources` (all nodes by default).

    Unreachable pairs are `np.inf`.
    """
    matrix = csr_matrix(
        (np.ones(g.num_edges), (g.edges[:, 0], g.edges[:, 1])),
        shape=(g.n, g.n),
    )
    indices = None if sources is None else np.asarray(sources)
    distances = shortest_path(
        matrix, directed=False, unweighted=True, indices=indices
    )
    return np.atleast_2d(distances)


def edge_homophily(g: Graph) -> float:
    """Mean over non-isolated nodes of the same-label neighbour fraction.

    Raises:
        ValueError: If labels are missing or every node is isolated.
    """
    if g.labels is None:
        raise ValueError("Homophily needs node labels")
    degrees = g.degrees()
    if not np.any(degrees > 0):
        raise ValueError("Homophily is undefined when every node is isolated")

    labels = np.asarray(g.labels)
    same = labels[g.edges[:, 0]] == labels[g.edges[:, 1]]
    same_count = np.bincount(
        g.edges[same].reshape(-1), minlength=g.n
    ).astype(np.float64)

    connected = degrees > 0
    return float(np.mean(same_count[connected] / degrees[connected]))


class WeightDeltaStats(BaseModel):
    edge_count: int
    median: float
    quantiles: dict[str, float]
    histogram: list[int]
    bin_edges: list[float]
    fraction_below_0_1: float


def weight_delta_stats(
    original: Graph, learned: Graph, bins: int = 20
) -> WeightDeltaStats:
    """Distribution of |Δw| over the edges of the original graph.

    Edges missing from the learned graph count with weight 0.

    Raises:
        ValueError: If the node sets differ or the original has no edges.
    """
    if original.n != learned.n:
        raise ValueError(
            f"Node sets differ: {original.n} vs {learned.n} nodes"
        )
    if original.num_edges == 0:
        raise ValueError("Original graph has no edges")

    i, j = original.edges[:, 0], original.edges[:, 1]
    delta = np.abs(learned.adjacency()[i, j] - original.weights)

    upper = float(delta.max()) if delta.max() > 0 else 1.0
    counts, edges = np.histogram(delta, bins=bins, range=(0.0, upper))
    levels = (0.05, 0.25, 0.5, 0.75, 0.95)
    return WeightDeltaStats(
        edge_count=len(delta),
        median=float(np.median(delta)),
        quantiles={
            f"q{round(q * 100):02d}": float(np.quantile(delta, q))
            for q in levels
        },
        histogram=[int(c) for c in counts],
        bin_edges=[float(e) for e in edges],
        fraction_below_0_1=float(np.mean(delta < 0.1)),
    )


def write_edge_list(g: Graph, path: Path) -> None:
    """Write `n=<count>` followed by one `i j w` line per edge."""
    lines = [f"n={g.n}"]
    lines += [
        f"{i} {j} {w!r}"
        for (i, j), w in zip(g.edges.tolist(), g.weights.tolist())
    ]
    path.write_text("\n".join(lines) + "\n")


def read_edge_list(path: Path) -> Graph:
    """Read the edge-list format written by `write_edge_list`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the header or a line is malformed.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Edge list does not exist at {path}")

    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("n="):
        raise ValueError(f"{path}: first line must be 'n=<count>'")
    try:
        n = int(lines[0][2:])
    except ValueError as e:
        raise ValueError(f"{path}: invalid header {lines[0]!r}") from e

    edges, weights = [], []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            edges.append((int(parts[0]), int(parts[1])))
            weights.append(float(parts[2]))
        except ValueError as e:
            raise ValueError(f"{path}:{number}: expected 'i j w'") from e

    return Graph(n=n, edges=np.array(edges).reshape(-1, 2), weights=weights)


def _read_node_table(path: Path, columns: Optional[list[str]]) -> pd.DataFrame:
    if not path.is_file():
        raise FileNotFoundError(f"File does not exist at {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    if frame.columns[0] != "id":
        raise ValueError(f"{path}: first column must be 'id'")
    if columns is not None and list(frame.columns[1:]) != columns:
        raise ValueError(
            f"{path}: expected columns id,{','.join(columns)}, "
            f"got {','.join(frame.columns)}"
        )
    if frame.isna().any(axis=None):
        rows = frame.index[frame.isna().any(axis=1)] + 2
        raise ValueError(f"{path}: missing values on lines {list(rows)}")
    if not np.array_equal(frame["id"].to_numpy(), np.arange(len(frame))):
        raise ValueError(f"{path}: ids must be 0..n-1 in order")
    return frame


def read_coords(path: Path) -> np.ndarray:
    """Read an `id,lat,lon` CSV into an (n, 2) array."""
    return _read_node_table(path, ["lat", "lon"])[["lat", "lon"]].to_numpy()


def read_labels(path: Path) -> np.ndarray:
    """Read an `id,label` CSV."""
    frame = _read_node_table(path, ["label"])
    return frame["label"].to_numpy(dtype=np.int64)


def read_features(path: Path) -> np.ndarray:
    """Read an `id,f1,...,fk` CSV into an (n, k) array."""
    frame = _read_node_table(path, None)
    return frame.iloc[:, 1:].to_numpy(dtype=np.float64)


def write_coords(coords: np.ndarray, path: Path) -> None:
    frame = pd.DataFrame(coords, columns=["lat", "lon"])
    frame.insert(0, "id", np.arange(len(frame)))
    frame.to_csv(path, index=False)


def write_labels(labels: np.ndarray, path: Path) -> None:
    frame = pd.DataFrame({"id": np.arange(len(labels)), "label": labels})
    frame.to_csv(path, index=False)


def write_features(features: np.ndarray, path: Path) -> None:
    columns = [f"f{k + 1}" for k in range(features.shape[1])]
    frame = pd.DataFrame(features, columns=columns)
    frame.insert(0, "id", np.arange(len(frame)))
    frame.to_csv(path, index=False)
