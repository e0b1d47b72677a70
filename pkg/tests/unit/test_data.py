import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from rewirelab.data import (
    NCDataset,
    STDataset,
    batch_iter,
    contiguous_splits,
    load_csv_st,
    read_manifest,
    read_signal,
    save_csv_st,
    sbm_probabilities,
    synth_nc,
    synth_st,
    two_cluster_layout,
    write_signal,
)
from rewirelab.graph import Graph, edge_homophily, write_edge_list


def _line_graph(n: int) -> Graph:
    edges = np.array([(i, i + 1) for i in range(n - 1)])
    return Graph(n=n, edges=edges, weights=np.ones(n - 1))


def _dataset(steps: int = 100, n: int = 3) -> STDataset:
    signal = np.random.default_rng(0).normal(size=(steps, n))
    return STDataset(
        graph=_line_graph(n),
        signal=signal,
        window=4,
        horizon=2,
        splits=contiguous_splits(steps),
    )


def test_contiguous_splits() -> None:
    """Splits are ordered, contiguous and cover every step."""
    assert contiguous_splits(100) == {
        "train": (0, 70),
        "val": (70, 80),
        "test": (80, 100),
    }
    assert contiguous_splits(10, (0.5, 0.25, 0.25)) == {
        "train": (0, 5),
        "val": (5, 7),
        "test": (7, 10),
    }
    with pytest.raises(ValueError):
        contiguous_splits(100, (0.5, 0.5, 0.5))


def test_st_dataset_windows() -> None:
    """Windows stay inside their split and normalize on train only."""
    dataset = _dataset()
    train = dataset.signal[:70]

    np.testing.assert_allclose(dataset.mean, train.mean(axis=0))
    np.testing.assert_allclose(
        dataset.normalized[:70].mean(axis=0), 0.0, atol=1e-12
    )

    starts = dataset.window_starts("val")
    np.testing.assert_array_equal(starts, np.arange(70, 75))
    assert dataset.inputs(starts).shape == (5, 4, 3)
    assert dataset.targets(starts).shape == (5, 2, 3)
    np.testing.assert_allclose(
        dataset.targets(starts[-1:])[0, -1], dataset.normalized[79]
    )
    np.testing.assert_allclose(
        dataset.denormalize(dataset.normalized), dataset.signal
    )


def test_st_dataset_validation() -> None:
    """Test mismatched nodes, missing values and short splits."""
    graph = _line_graph(3)
    splits = contiguous_splits(100)
    with pytest.raises(ValueError, match="nodes"):
        STDataset(graph, np.zeros((100, 4)), 4, 2, splits)

    signal = np.zeros((100, 3))
    signal[5, 1] = np.nan
    with pytest.raises(ValueError, match="missing"):
        STDataset(graph, signal, 4, 2, splits)

    with pytest.raises(ValueError, match="val split"):
        STDataset(graph, np.zeros((100, 3)), 8, 4, splits)
    with pytest.raises(ValueError, match="contiguous"):
        STDataset(
            graph,
            np.zeros((100, 3)),
            4,
            2,
            {"train": (0, 70), "val": (72, 80), "test": (80, 100)},
        )
    with pytest.raises(ValueError, match="Splits end"):
        STDataset(graph, np.zeros((120, 3)), 4, 2, splits)


def test_batch_iter_covers_every_window() -> None:
    """Each window appears once; train is shuffled by seed."""
    dataset = _dataset()
    batches = list(batch_iter(dataset, 8, seed=1))

    assert all(len(b) <= 8 for b in batches)
    np.testing.assert_array_equal(
        np.sort(np.concatenate(batches)), dataset.window_starts("train")
    )
    again = np.concatenate(list(batch_iter(dataset, 8, seed=1)))
    np.testing.assert_array_equal(np.concatenate(batches), again)
    other = np.concatenate(list(batch_iter(dataset, 8, seed=2)))
    assert not np.array_equal(other, again)

    test = np.concatenate(list(batch_iter(dataset, 4, 1, split="test")))
    np.testing.assert_array_equal(test, dataset.window_starts("test"))
    with pytest.raises(ValueError):
        next(batch_iter(dataset, 0, seed=1))


def test_synth_st_is_deterministic() -> None:
    """The same seed reproduces signal and graphs."""
    a, planted_a = synth_st(n_nodes=12, steps=200, slack=0.3, seed=3)
    b, planted_b = synth_st(n_nodes=12, steps=200, slack=0.3, seed=3)
    c, _ = synth_st(n_nodes=12, steps=200, slack=0.3, seed=4)

    np.testing.assert_array_equal(a.signal, b.signal)
    assert a.graph == b.graph
    assert planted_a.true_graph == planted_b.true_graph
    assert not np.array_equal(a.signal, c.signal)


def test_synth_st_slack() -> None:
    """Slack rewires a fraction of the true edges and keeps the count."""
    clean, planted = synth_st(n_nodes=20, steps=200, slack=0.0, seed=1)
    assert clean.graph == planted.true_graph
    assert planted.rewired_edges == 0

    noisy, planted = synth_st(n_nodes=20, steps=200, slack=0.5, seed=1)
    true_edges = planted.true_graph.edge_set()
    init_edges = noisy.graph.edge_set()
    assert len(init_edges) == len(true_edges)
    assert planted.rewired_edges == len(true_edges) // 2
    assert len(true_edges - init_edges) == planted.rewired_edges
    assert planted.init_graph is noisy.graph

    with pytest.raises(ValueError):
        synth_st(rho=1.0)


def test_synth_nc_homophily() -> None:
    """The SBM hits its homophily target and stratifies the splits."""
    dataset = synth_nc(n_nodes=300, classes=3, homophily=0.8, seed=0)

    assert dataset.num_classes == 3
    assert edge_homophily(dataset.graph) == pytest.approx(0.8, abs=0.1)
    masks = [dataset.mask(s) for s in ("train", "val", "test")]
    np.testing.assert_array_equal(sum(m.astype(int) for m in masks), 1)
    labels = dataset.graph.labels
    assert set(labels[dataset.train]) == {0, 1, 2}
    assert dataset.graph.features.shape == (300, 16)

    low = synth_nc(n_nodes=300, classes=3, homophily=0.3, seed=0)
    assert edge_homophily(low.graph) < 0.5


def test_sbm_probabilities() -> None:
    """Test the block probabilities and the infeasible case."""
    p_in, p_out = sbm_probabilities(100, 2, 0.8, 6.0)
    assert p_in == pytest.approx(0.8 * 6.0 / 49)
    assert p_out == pytest.approx(0.2 * 6.0 / 50)

    with pytest.raises(ValueError, match="infeasible"):
        sbm_probabilities(10, 2, 1.0, 10.0)
    with pytest.raises(ValueError):
        synth_nc(classes=1)
    with pytest.raises(ValueError):
        synth_nc(homophily=0.0)


def test_nc_dataset_validation() -> None:
    """Test overlapping splits and classes missing from train."""
    graph = Graph(
        n=4,
        labels=np.array([0, 0, 1, 1]),
        features=np.zeros((4, 2)),
    )
    with pytest.raises(ValueError, match="overlap"):
        NCDataset(graph, np.array([0, 2]), np.array([2]), np.array([3]))
    with pytest.raises(ValueError, match="absent"):
        NCDataset(graph, np.array([0, 1]), np.array([2]), np.array([3]))
    with pytest.raises(ValueError, match="features"):
        NCDataset(Graph(n=4), np.array([0]), np.array([1]), np.array([2]))

    dataset = NCDataset(graph, np.array([0, 2]), np.array([1]), np.array([3]))
    moved = dataset.with_graph(_line_graph(4))
    np.testing.assert_array_equal(moved.graph.labels, graph.labels)


def test_csv_round_trip() -> None:
    """A saved dataset loads back with the same signal and graph."""
    dataset = _dataset()
    with tempfile.TemporaryDirectory() as tmpdir:
        manifest = save_csv_st(dataset, Path(tmpdir) / "planted")
        loaded = read_manifest(manifest)

        np.testing.assert_array_equal(loaded.signal, dataset.signal)
        assert loaded.graph == dataset.graph
        assert loaded.splits == dataset.splits

        content = json.loads(manifest.read_text())
        assert content["graph_hash"] == dataset.graph.content_hash()
        content["normalization"]["mean"] = [9.0, 9.0, 9.0]
        manifest.write_text(json.dumps(content))
        with pytest.raises(ValueError, match="normalization"):
            read_manifest(manifest)

        with pytest.raises(FileNotFoundError):
            read_manifest(Path(tmpdir) / "missing.json")


def test_load_csv_st() -> None:
    """A signal CSV and an edge list make a dataset."""
    with tempfile.TemporaryDirectory() as tmpdir:
        signal_path = Path(tmpdir) / "signal.csv"
        graph_path = Path(tmpdir) / "graph.txt"
        signal = np.random.default_rng(1).normal(size=(50, 3))
        write_signal(signal, signal_path)
        write_edge_list(_line_graph(3), graph_path)

        dataset = load_csv_st(
            signal_path, graph_path, 3, 1, fractions=(0.6, 0.2, 0.2)
        )
        assert dataset.splits["val"] == (30, 40)
        np.testing.assert_array_equal(read_signal(signal_path), signal)


def test_read_signal_errors() -> None:
    """Test missing values, a wrong header and a missing file."""
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "signal.csv"
        path.write_text("t,node0,node1\n0,1.0,2.0\n1,,3.0\n")
        with pytest.raises(ValueError, match=r"missing values on lines \[3\]"):
            read_signal(path)

        path.write_text("time,node0\n0,1.0\n")
        with pytest.raises(ValueError, match="first column"):
            read_signal(path)

        with pytest.raises(FileNotFoundError):
            read_signal(Path(tmpdir) / "missing.csv")


def test_two_cluster_layout() -> None:
    """Two blobs around (0, 0) and (separation, 0)."""
    coords, cluster = two_cluster_layout(20, 100.0, 5.0, seed=0)

    assert coords.shape == (40, 2)
    np.testing.assert_array_equal(np.bincount(cluster), [20, 20])
    np.testing.assert_allclose(
        coords[cluster == 0].mean(axis=0), [0.0, 0.0], atol=5.0
    )
    np.testing.assert_allclose(
        coords[cluster == 1].mean(axis=0), [100.0, 0.0], atol=5.0
    )
