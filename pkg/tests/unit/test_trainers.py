from dataclasses import dataclass

import numpy as np
import pytest
from pydantic import ValidationError

from rewirelab.data import synth_nc, synth_st
from rewirelab.models import BackboneConfig, GraphParam, GraphParamKind
from rewirelab.optim import OptimizerKind
from rewirelab.tasks import NCTask, STTask
from rewirelab.tensor import Tensor
from rewirelab.trainers import (
    Regime,
    TrainConfig,
    TrainMode,
    igr_oracle,
    instrument_gradients,
    nc_preset,
    st_preset,
    train,
    within_batch_profile,
)


def _st_fixture() -> tuple[BackboneConfig, STTask, GraphParam]:
    dataset, _ = synth_st(
        n_nodes=8,
        steps=160,
        slack=0.3,
        bandwidth=40.0,
        window=6,
        horizon=2,
        seed=0,
    )
    backbone = BackboneConfig(
        kind="decoupled_stgnn", hidden_dim=4, window=6, horizon=2
    )
    task = STTask(dataset, backbone, batch_size=32, val_batch_size=32)
    return backbone, task, GraphParam.from_graph(dataset.graph)


def _st_config(mode: TrainMode, **overrides: object) -> TrainConfig:
    settings = dict(
        mode=mode,
        epochs=3,
        warmup_epochs=1,
        inner_steps=1,
        inner_lr=1e-2,
        outer_lr=1e-2,
        early_stop_patience=None,
        seed=0,
    )
    return TrainConfig.model_validate({**settings, **overrides})


def _nc_fixture() -> tuple[NCTask, GraphParam]:
    dataset = synth_nc(
        n_nodes=60, classes=3, mean_degree=4.0, feature_dim=8, seed=0
    )
    backbone, _ = nc_preset(num_classes=3)
    phi = GraphParam.from_graph(dataset.graph, GraphParamKind.BERNOULLI)
    return NCTask(dataset, backbone), phi


def test_frozen_single_step_matches_vanilla_st() -> None:
    """Frozen-φ with T=1 reproduces vanilla exactly on forecasting."""
    backbone, task, phi = _st_fixture()
    vanilla = train(_st_config(TrainMode.VANILLA), backbone, phi, task)
    frozen = train(_st_config(TrainMode.FROZEN_PHI), backbone, phi, task)

    assert vanilla.status == frozen.status == "ok"
    assert frozen.train_loss == vanilla.train_loss
    assert frozen.val_metric == vanilla.val_metric
    assert frozen.test_metric == vanilla.test_metric
    np.testing.assert_array_equal(
        frozen.params.flatten(), vanilla.params.flatten()
    )


def test_frozen_single_step_matches_vanilla_nc() -> None:
    """Frozen-φ with T=1 reproduces vanilla exactly on classification."""
    task, phi = _nc_fixture()
    records = []
    for mode in (TrainMode.VANILLA, TrainMode.FROZEN_PHI):
        _, config = nc_preset(
            mode,
            3,
            regime=Regime.MINIBATCH_REUSE,
            inner_steps=1,
            epochs=5,
            seed=1,
        )
        records.append(train(config, task.backbone, phi, task))

    vanilla, frozen = records
    assert frozen.train_loss == vanilla.train_loss
    assert frozen.val_metric == vanilla.val_metric
    assert frozen.test_metric == vanilla.test_metric


def test_vanilla_ignores_regime() -> None:
    """Vanilla takes the persistent loop under either regime."""
    task, phi = _nc_fixture()
    records = []
    for regime in Regime:
        _, config = nc_preset(
            TrainMode.VANILLA, 3, regime=regime, epochs=4, seed=2
        )
        records.append(train(config, task.backbone, phi, task))

    assert records[0].train_loss == records[1].train_loss
    assert records[0].test_metric == records[1].test_metric


def _separable_nc_fixture() -> tuple[NCTask, GraphParam]:
    dataset = synth_nc(
        n_nodes=60,
        classes=3,
        homophily=1.0,
        mean_degree=4.0,
        feature_dim=8,
        feature_noise=0.05,
        seed=0,
    )
    backbone = BackboneConfig(
        kind="gcn_classifier", hidden_dim=16, dropout=0.0, num_classes=3
    )
    phi = GraphParam.from_graph(dataset.graph, GraphParamKind.BERNOULLI)
    return NCTask(dataset, backbone), phi


def test_reset_regime_reports_inner_fit() -> None:
    """With θ reset, the reported model is the T-step inner fit."""
    task, phi = _nc_fixture()
    records = {}
    for inner_steps in (1, 20):
        _, config = nc_preset(
            TrainMode.FROZEN_PHI, 3, inner_steps=inner_steps, epochs=3, seed=3
        )
        records[inner_steps] = train(config, task.backbone, phi, task)

    short, long = records[1], records[20]
    assert short.status == long.status == "ok"
    assert not np.array_equal(short.params.flatten(), long.params.flatten())
    assert short.train_loss != long.train_loss
    assert short.best_val_metric == min(short.val_metric)


def test_reset_regime_frozen_is_t_invariant() -> None:
    """Past the inner plateau, the frozen-φ metric does not depend on T."""
    task, phi = _separable_nc_fixture()
    metrics = []
    for inner_steps in (5, 10, 20):
        _, config = nc_preset(
            TrainMode.FROZEN_PHI,
            3,
            inner_steps=inner_steps,
            epochs=2,
            inner_lr=0.1,
            weight_decay=0.0,
            seed=3,
        )
        record = train(config, task.backbone, phi, task)
        metrics.append(record.test_metric)

    assert max(metrics) - min(metrics) < 1e-9


def test_bilevel_updates_phi() -> None:
    """Only bilevel and e2e_joint move φ away from its start."""
    backbone, task, phi = _st_fixture()
    frozen = train(
        _st_config(TrainMode.FROZEN_PHI, inner_steps=2), backbone, phi, task
    )
    bilevel = train(
        _st_config(TrainMode.BILEVEL, inner_steps=2, warmup_epochs=0),
        backbone,
        phi,
        task,
    )
    joint = train(_st_config(TrainMode.E2E_JOINT), backbone, phi, task)

    np.testing.assert_array_equal(frozen.phi.values, phi.values)
    assert not np.array_equal(bilevel.phi.values, phi.values)
    assert not np.array_equal(joint.phi.values, phi.values)
    assert np.all(bilevel.phi.values[~phi.support] == 0.0)
    assert frozen.graph_hash == bilevel.graph_hash


def test_bernoulli_bilevel_stays_feasible() -> None:
    """Projected θ stays a symmetric probability matrix."""
    task, phi = _nc_fixture()
    _, config = nc_preset(TrainMode.BILEVEL, 3, epochs=3)
    record = train(config, task.backbone, phi, task)

    theta = record.phi.values
    np.testing.assert_array_equal(theta, theta.T)
    assert theta.min() >= 0.0 and theta.max() <= 1.0


def test_gradient_instrumentation() -> None:
    """One gradient norm per inner step, profiled by step index."""
    backbone, task, phi = _st_fixture()
    config = _st_config(
        TrainMode.FROZEN_PHI, inner_steps=3, instrument_gradients=True
    )
    record = train(config, backbone, phi, task)
    table = instrument_gradients(record)

    batches = len(task.epoch_batches(0, 0))
    assert list(table.columns) == [
        "epoch",
        "batch",
        "inner_step",
        "grad_norm",
    ]
    assert len(table) == config.epochs * batches * 3
    assert (table["grad_norm"] >= 0).all()

    profile = within_batch_profile(table)
    assert profile["inner_step"].tolist() == [0, 1, 2]
    assert "mean_grad_norm" in profile.columns


def test_data_exposure_parity() -> None:
    """Every arm sees the same batches; only the depth per batch differs."""
    backbone, task, phi = _st_fixture()
    counts = {}
    for mode in (TrainMode.VANILLA, TrainMode.FROZEN_PHI, TrainMode.BILEVEL):
        config = _st_config(mode, inner_steps=2, instrument_gradients=True)
        table = instrument_gradients(train(config, backbone, phi, task))
        counts[mode] = table.groupby(["epoch", "batch"]).size()

    vanilla = counts[TrainMode.VANILLA]
    assert (vanilla == 1).all()
    for mode in (TrainMode.FROZEN_PHI, TrainMode.BILEVEL):
        assert counts[mode].index.equals(vanilla.index)
        assert (counts[mode] == 2).all()


@dataclass
class _DivergingTask(STTask):
    def batch_loss(self, *args: object, **kwargs: object) -> Tensor:
        return Tensor(np.nan)


def test_diverged_run_is_marked_failed() -> None:
    """A non-finite loss fails the run instead of raising."""
    backbone, task, phi = _st_fixture()
    diverging = _DivergingTask(task.dataset, backbone, 32, 32)
    record = train(_st_config(TrainMode.VANILLA), backbone, phi, diverging)

    assert record.status == "failed"
    assert "Non-finite" in record.failure_reason
    assert record.test_metric is None


def test_phi_must_cover_the_task() -> None:
    """Test a φ with the wrong node count."""
    backbone, task, _ = _st_fixture()
    with pytest.raises(ValueError, match="nodes"):
        train(
            _st_config(TrainMode.VANILLA),
            backbone,
            GraphParam.from_adjacency(np.ones((3, 3))),
            task,
        )


def test_train_config_validation() -> None:
    """Test warmup, e2e under reset and step bounds."""
    with pytest.raises(ValidationError, match="Warmup"):
        TrainConfig(epochs=5, warmup_epochs=6)
    with pytest.raises(ValidationError, match="e2e_joint"):
        TrainConfig(mode="e2e_joint", regime="fullbatch_reset")
    with pytest.raises(ValidationError):
        TrainConfig(inner_steps=0)

    assert TrainConfig(mode="vanilla", inner_steps=10).steps_per_batch == 1
    assert TrainConfig(mode="bilevel", inner_steps=10).steps_per_batch == 10
    assert TrainConfig(epochs=10, epoch_multiplier=3).total_epochs == 30


def test_presets() -> None:
    """Test the forecasting and classification defaults."""
    backbone, config = st_preset(TrainMode.BILEVEL, epochs=7)
    assert backbone.kind == "decoupled_stgnn"
    assert (backbone.hidden_dim, backbone.window, backbone.horizon) == (
        32,
        12,
        4,
    )
    assert config.epochs == 7
    assert config.inner_steps == 10
    assert config.regime == Regime.MINIBATCH_REUSE

    backbone, config = nc_preset(TrainMode.FROZEN_PHI, num_classes=6)
    assert backbone.kind == "gcn_classifier"
    assert backbone.num_classes == 6
    assert config.regime == Regime.FULLBATCH_RESET
    assert config.outer_optimizer == OptimizerKind.SGD


def test_igr_oracle_slopes() -> None:
    """GD deviates from gradient flow at order η and from the modified
    flow at order η²."""
    report = igr_oracle(
        np.diag([1.0, 2.0, 3.0]),
        np.array([1.0, -1.0, 0.5]),
        etas=[0.0025, 0.005, 0.01, 0.02],
        horizon=1.0,
    )

    assert report.slope_plain == pytest.approx(1.0, abs=0.2)
    assert report.slope_modified == pytest.approx(2.0, abs=0.2)
    assert [p.steps for p in report.points] == [400, 200, 100, 50]
    for point in report.points:
        assert point.modified_deviation < point.plain_deviation


def test_igr_oracle_errors() -> None:
    """Test indefinite Hessians, large steps and a single step size."""
    with pytest.raises(ValueError, match="positive definite"):
        igr_oracle(np.diag([1.0, -1.0]), np.ones(2), [0.01, 0.02])
    with pytest.raises(ValueError, match="Step size"):
        igr_oracle(np.diag([1.0, 4.0]), np.ones(2), [0.01, 0.3])
    with pytest.raises(ValueError, match="two step sizes"):
        igr_oracle(np.eye(2), np.ones(2), [0.01])
    with pytest.raises(ValueError, match="symmetric"):
        igr_oracle(
            np.array([[1.0, 0.5], [0.0, 1.0]]), np.ones(2), [0.1, 0.2]
        )
