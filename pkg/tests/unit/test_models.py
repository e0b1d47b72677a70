import tempfile
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from rewirelab.graph import Graph, bfs_distances, read_edge_list
from rewirelab.models import (
    BackboneConfig,
    GraphParam,
    GraphParamKind,
    adjacency_tensor,
    binarize,
    export_graph,
    gcn_forward,
    gcn_node_model,
    init_params,
    learned_adjacency,
    load_checkpoint,
    loss,
    materialize_graph,
    save_checkpoint,
    stgnn_forward,
    stgnn_node_model,
)
from rewirelab.tensor import (
    Tape,
    Tensor,
    jacobian_rows,
    multiply,
    numerical_gradient,
    reduce_sum,
)


def _path_adjacency(n: int) -> np.ndarray:
    adjacency = np.zeros((n, n))
    for i in range(n - 1):
        adjacency[i, i + 1] = adjacency[i + 1, i] = 1.0
    return adjacency


def _weighted(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.2, 1.0, (n, n)) * (rng.random((n, n)) < 0.5)
    upper = np.triu(weights, 1)
    return upper + upper.T


def _st_config(**overrides: object) -> BackboneConfig:
    settings = dict(
        kind="decoupled_stgnn",
        hidden_dim=4,
        spatial_layers=1,
        temporal_layers=2,
        hops=2,
        kernel_size=3,
        window=6,
        horizon=2,
    )
    return BackboneConfig.model_validate({**settings, **overrides})


def test_softmax_param_at_init() -> None:
    """Uniform logits spread each row's weight evenly over its support."""
    a_init = _weighted(6, seed=0)
    phi = GraphParam.from_adjacency(a_init)
    counts = (a_init > 0).sum(axis=1, keepdims=True)
    expected = np.divide(
        a_init, counts, out=np.zeros_like(a_init), where=counts > 0
    )

    np.testing.assert_allclose(materialize_graph(phi), expected)
    assert np.all(materialize_graph(phi)[a_init == 0] == 0)


def test_fixed_param_keeps_learned_graph() -> None:
    """A fixed φ materializes to the learned A_φ, not a reweighting of it."""
    complete = np.ones((4, 4)) - np.eye(4)
    learned = materialize_graph(GraphParam.from_adjacency(complete))
    np.testing.assert_allclose(learned[0], [0.0, 1 / 3, 1 / 3, 1 / 3])

    fixed = GraphParam.fixed(learned)
    np.testing.assert_allclose(materialize_graph(fixed), learned)

    logits = np.random.default_rng(0).normal(size=(6, 6))
    trained = GraphParam.from_adjacency(_weighted(6, seed=2)).with_values(
        logits
    )
    learned = learned_adjacency(trained)
    np.testing.assert_allclose(
        materialize_graph(GraphParam.fixed(learned)), learned
    )

    support = (complete > 0).astype(float)
    bernoulli = GraphParam.fixed(complete, GraphParamKind.BERNOULLI, 4)
    np.testing.assert_array_equal(materialize_graph(bernoulli), support)
    assert bernoulli.sample_count == 4


def test_bernoulli_param_at_init() -> None:
    """θ starts at the support, so samples reproduce A_init's edges."""
    a_init = _weighted(8, seed=1)
    phi = GraphParam.from_adjacency(a_init, GraphParamKind.BERNOULLI, 4)
    support = (a_init > 0).astype(float)

    np.testing.assert_array_equal(materialize_graph(phi), support)
    sampled = materialize_graph(phi, "sampled", seed=3)
    np.testing.assert_array_equal(sampled, support)
    with pytest.raises(ValueError):
        materialize_graph(phi, "sampled")


def test_bernoulli_samples_are_symmetric() -> None:
    """Samples are symmetric 0/1 matrices, reproducible by seed."""
    phi = GraphParam(
        GraphParamKind.BERNOULLI,
        np.ones((10, 10)) - np.eye(10),
        np.full((10, 10), 0.5),
    )
    a = materialize_graph(phi, "sampled", seed=1)
    b = materialize_graph(phi, "sampled", seed=1)

    np.testing.assert_array_equal(a, a.T)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0}
    assert np.all(np.diag(a) == 0)


def test_graph_param_validation() -> None:
    """Test shape, probability and sample-count checks."""
    with pytest.raises(ValueError, match="shape"):
        GraphParam(GraphParamKind.SOFTMAX_REWEIGHT, np.eye(3), np.eye(2))
    with pytest.raises(ValueError, match="Bernoulli"):
        GraphParam(GraphParamKind.BERNOULLI, np.eye(2), np.full((2, 2), 2.0))
    with pytest.raises(ValueError, match="Sample count"):
        GraphParam(GraphParamKind.SOFTMAX_REWEIGHT, np.eye(2), np.eye(2), 0)


def test_project() -> None:
    """Bernoulli φ is mirrored from the upper triangle and clipped."""
    phi = GraphParam.from_adjacency(np.ones((3, 3)), GraphParamKind.BERNOULLI)
    projected = phi.project(
        np.array([[5.0, 1.5, -0.2], [0.0, 0.0, 0.4], [0.9, 0.9, 0.0]])
    )
    np.testing.assert_allclose(
        projected.values,
        [[0.0, 1.0, 0.0], [1.0, 0.0, 0.4], [0.0, 0.4, 0.0]],
    )

    logits = GraphParam.from_adjacency(np.ones((2, 2)))
    values = np.array([[3.0, -7.0], [1.0, 2.0]])
    np.testing.assert_array_equal(logits.project(values).values, values)


def test_binarize() -> None:
    """Modal binarization keeps edges with θ ≥ τ."""
    theta = np.array([[0.0, 0.6, 0.2], [0.6, 0.0, 0.5], [0.2, 0.5, 0.0]])
    phi = GraphParam(GraphParamKind.BERNOULLI, np.ones((3, 3)), theta)

    np.testing.assert_array_equal(
        binarize(phi, 0.5), [[0, 1, 0], [1, 0, 1], [0, 1, 0]]
    )
    np.testing.assert_array_equal(
        learned_adjacency(phi, 0.5), binarize(phi, 0.5)
    )
    with pytest.raises(ValueError):
        learned_adjacency(phi)
    with pytest.raises(ValueError):
        binarize(GraphParam.from_adjacency(np.ones((3, 3))), 0.5)


def test_softmax_adjacency_gradient() -> None:
    """A(φ) is differentiable in the logits."""
    phi = GraphParam.from_adjacency(_weighted(5, seed=2))
    rng = np.random.default_rng(0)
    values = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    weights = rng.normal(size=(5, 5))

    def fn() -> Tensor:
        return reduce_sum(multiply(adjacency_tensor(values, phi), weights))

    with Tape() as tape:
        objective = fn()
    tape.backward(objective)

    np.testing.assert_allclose(
        values.grad, numerical_gradient(fn, values), atol=1e-8
    )


def test_straight_through_gradient() -> None:
    """A sampled graph carries the gradient of the expectation."""
    rng = np.random.default_rng(1)
    theta = np.triu(rng.uniform(size=(6, 6)), 1)
    phi = GraphParam(
        GraphParamKind.BERNOULLI, np.ones((6, 6)), theta + theta.T
    )
    weights = rng.normal(size=(6, 6))

    grads = []
    for seed in (None, 7):
        values = Tensor(phi.values, requires_grad=True)
        with Tape() as tape:
            adjacency = adjacency_tensor(values, phi, sample_seed=seed)
            objective = reduce_sum(multiply(adjacency, weights))
        tape.backward(objective)
        grads.append(values.grad)
        if seed is not None:
            assert set(np.unique(adjacency.data)) <= {0.0, 1.0}

    np.testing.assert_allclose(grads[0], grads[1])


def test_gcn_forward() -> None:
    """Test logit shapes, dropout and shape errors."""
    config = BackboneConfig(kind="gcn_classifier", hidden_dim=8, num_classes=3)
    params = init_params(config, in_features=5, seed=0)
    adjacency = Tensor(_weighted(7, seed=3))
    features = np.random.default_rng(0).normal(size=(7, 5))

    logits = gcn_forward(params, adjacency, features)
    assert logits.shape == (7, 3)

    dropped = gcn_forward(
        params, adjacency, features, True, dropout_seed=1, dropout_rate=0.5
    )
    assert not np.allclose(dropped.data, logits.data)
    with pytest.raises(ValueError, match="gcn_forward"):
        gcn_forward(params, adjacency, features[:5])


def test_stgnn_forward() -> None:
    """Test forecast shapes and the receptive-field check."""
    config = _st_config()
    params = init_params(config, in_features=1, seed=0)
    adjacency = Tensor(_weighted(5, seed=4))
    windows = np.random.default_rng(0).normal(size=(3, 6, 5))

    assert stgnn_forward(params, adjacency, windows, config).shape == (3, 2, 5)
    with pytest.raises(ValueError, match="receptive field"):
        stgnn_forward(params, adjacency, windows[:, :4], config)
    with pytest.raises(ValueError, match="nodes"):
        stgnn_forward(params, Tensor(np.eye(4)), windows, config)


def test_backbone_config() -> None:
    """Test the hop radius and the window check."""
    assert _st_config(spatial_layers=4, hops=2).hop_radius == 8
    assert BackboneConfig(kind="gcn_classifier").hop_radius == 2
    assert _st_config(temporal_layers=2, kernel_size=3).receptive_field == 5
    with pytest.raises(ValidationError):
        _st_config(window=3)


def test_stgnn_receptive_field() -> None:
    """Outputs never depend on nodes beyond the hop radius."""
    config = _st_config(spatial_layers=2, hops=2)
    params = init_params(config, in_features=1, seed=1)
    adjacency = _path_adjacency(10)
    model = stgnn_node_model(params, adjacency, config)
    inputs = np.random.default_rng(0).normal(size=(10, 6))

    distances = bfs_distances(Graph.from_adjacency(adjacency))
    for target in (0, 4):
        norms = jacobian_rows(model, inputs, target)
        beyond = distances[target] > config.hop_radius
        assert np.all(norms[beyond] == 0.0)
        assert np.all(norms[~beyond] > 0.0)


def test_gcn_receptive_field() -> None:
    """A 2-layer GCN sees exactly two hops."""
    config = BackboneConfig(kind="gcn_classifier", hidden_dim=8, num_classes=2)
    params = init_params(config, in_features=3, seed=2)
    adjacency = _path_adjacency(8)
    model = gcn_node_model(params, adjacency)
    inputs = np.random.default_rng(1).normal(size=(8, 3))

    norms = jacobian_rows(model, inputs, target_node=0)
    np.testing.assert_array_equal(norms[3:], 0.0)


def test_loss() -> None:
    """Test MAE, MSE, masks and cross-entropy."""
    pred = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    target = np.array([[0.0, 2.0], [5.0, 4.0]])

    assert loss(pred, target, "mae").item() == pytest.approx(0.75)
    assert loss(pred, target, "mse").item() == pytest.approx(1.25)
    mask = np.array([[True, False], [False, False]])
    assert loss(pred, target, "mae", mask).item() == pytest.approx(1.0)
    with pytest.raises(ValueError, match="empty"):
        loss(pred, target, "mae", np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError, match="incompatible"):
        loss(pred, target[:1], "mse")

    logits = Tensor(np.zeros((3, 4)))
    value = loss(logits, np.array([0, 1, 2]), "cross_entropy")
    assert value.item() == pytest.approx(np.log(4))


def test_model_params() -> None:
    """Test seeded initialization and flat views."""
    config = _st_config()
    a = init_params(config, 1, seed=5)
    b = init_params(config, 1, seed=5)
    c = init_params(config, 1, seed=6)

    np.testing.assert_array_equal(a.flatten(), b.flatten())
    assert not np.array_equal(a.flatten(), c.flatten())

    copy = a.unflatten(a.flatten() * 2)
    np.testing.assert_array_equal(copy.flatten(), a.flatten() * 2)
    assert list(copy.tensors) == list(a.tensors)
    with pytest.raises(ValueError):
        a.unflatten(np.zeros(3))

    snapshot = a.snapshot()
    a.load(c.snapshot())
    np.testing.assert_array_equal(a.flatten(), c.flatten())
    a.load(snapshot)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    assert not any(t.requires_grad for t in a.detached().parameters())


def test_checkpoint() -> None:
    """Parameters and φ survive a checkpoint."""
    config = _st_config()
    params = init_params(config, 1, seed=0)
    phi = GraphParam.from_adjacency(
        _weighted(5, seed=0), GraphParamKind.BERNOULLI, 16
    )
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "run.npz"
        save_checkpoint(path, config, params, phi)
        loaded_config, loaded, loaded_phi = load_checkpoint(path)

        assert loaded_config == config
        np.testing.assert_array_equal(loaded.flatten(), params.flatten())
        assert loaded_phi.kind == GraphParamKind.BERNOULLI
        assert loaded_phi.sample_count == 16
        np.testing.assert_array_equal(loaded_phi.values, phi.values)

        save_checkpoint(path, config, params)
        assert load_checkpoint(path)[2] is None
        with pytest.raises(FileNotFoundError):
            load_checkpoint(Path(tmpdir) / "missing.npz")


def test_export_graph() -> None:
    """Learned graphs are written as symmetric edge lists."""
    phi = GraphParam.from_adjacency(_weighted(6, seed=1))
    theta = GraphParam.from_adjacency(
        _weighted(6, seed=1), GraphParamKind.BERNOULLI
    )
    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "graph.txt"
        g = export_graph(phi, path)
        assert read_edge_list(path) == g
        adjacency = materialize_graph(phi)
        np.testing.assert_allclose(
            g.adjacency(), (adjacency + adjacency.T) / 2
        )

        g = export_graph(theta, path, threshold=0.5)
        np.testing.assert_array_equal(g.adjacency(), binarize(theta, 0.5))
