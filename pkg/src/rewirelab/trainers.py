"""First-order bilevel training and its controls.

Every mode shares one loop so that the controls differ from the full
method only where they are meant to:

- `vanilla`: one θ step per batch, φ fixed.
- `frozen_phi`: the bilevel loop with its T inner steps, but the outer φ
  step is skipped.
- `bilevel`: T inner θ steps on a detached A_φ, then one first-order
  outer step on φ from a validation batch with θ held constant.
- `e2e_joint`: a single optimizer over θ and φ on the training loss.
"""

import hashlib
import logging
import math
import time
from enum import Enum
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import solve_ivp

from rewirelab.models import (
    BackboneConfig,
    GraphParam,
    GraphParamKind,
    ModelParams,
    adjacency_tensor,
    init_params,
    materialize_graph,
)
from rewirelab.optim import (
    ConstantSchedule,
    CosineSchedule,
    Optimizer,
    OptimizerKind,
    clip_grad_norm,
    make_optimizer,
)
from rewirelab.seeding import derive_seed
from rewirelab.tasks import Task
from rewirelab.tensor import Tape, Tensor, add, scale

logger = logging.getLogger(__name__)


class TrainMode(str, Enum):
    VANILLA = "vanilla"
    FROZEN_PHI = "frozen_phi"
    BILEVEL = "bilevel"
    E2E_JOINT = "e2e_joint"


class Regime(str, Enum):
    MINIBATCH_REUSE = "minibatch_reuse"
    FULLBATCH_RESET = "fullbatch_reset"


class TrainConfig(BaseModel):
    """Optimization settings of a single run."""

    mode: TrainMode = TrainMode.VANILLA
    regime: Regime = Regime.MINIBATCH_REUSE
    inner_steps: int = Field(default=10, ge=1)
    warmup_epochs: int = Field(default=10, ge=0)
    epochs: int = Field(default=100, ge=1)
    epoch_multiplier: int = Field(default=1, ge=1)
    batch_size: int = Field(default=64, ge=1)
    val_batch_size: int = Field(default=64, ge=1)
    inner_lr: float = Field(default=1e-3, ge=0)
    outer_lr: float = Field(default=1e-3, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    grad_clip: Optional[float] = Field(default=5.0, gt=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    lr_min: float = Field(default=1e-6, ge=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    outer_optimizer: OptimizerKind = OptimizerKind.ADAM
    early_stop_patience: Optional[int] = Field(default=30, ge=1)
    instrument_gradients: bool = False
    seed: int = 42

    @property
    def total_epochs(self) -> int:
        return self.epochs * self.epoch_multiplier

    @property
    def steps_per_batch(self) -> int:
        if self.mode in (TrainMode.VANILLA, TrainMode.E2E_JOINT):
            return 1
        return self.inner_steps

    @model_validator(mode="after")
    def _check_combination(self) -> "TrainConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError(
                f"Warmup epochs ({self.warmup_epochs}) exceed epochs "
                f"({self.epochs})"
            )
        if (
            self.mode == TrainMode.E2E_JOINT
            and self.regime == Regime.FULLBATCH_RESET
        ):
            raise ValueError(
                "e2e_joint trains θ and φ together and cannot reset θ per "
                "outer iteration; use regime minibatch_reuse"
            )
        return self


class RunRecord(BaseModel):
    """Outcome of one training run.

    The learned φ and the best parameters travel with the record in memory
    but are not part of its JSON form; checkpoints hold them on disk.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: TrainConfig
    status: Literal["ok", "failed"] = "ok"
    failure_reason: Optional[str] = None
    train_loss: list[float] = []
    val_metric: list[float] = []
    best_epoch: int = -1
    best_val_metric: Optional[float] = None
    test_metric: Optional[float] = None
    per_horizon_test: Optional[list[float]] = None
    graph_hash: str = ""
    grad_norms: list[tuple[int, int, int, float]] = []
    wall_time: float = 0.0

    phi: Optional[GraphParam] = Field(default=None, exclude=True)
    params: Optional[ModelParams] = Field(default=None, exclude=True)


class DivergedError(Exception):
    """Raised inside a run when a loss stops being finite."""


def _graph_hash(phi: GraphParam) -> str:
    digest = hashlib.sha256()
    digest.update(phi.a_init.tobytes())
    digest.update(phi.values.tobytes())
    return digest.hexdigest()


class Trainer:
    """Runs one configuration of the training loop on a task."""

    def __init__(
        self,
        config: TrainConfig,
        backbone: BackboneConfig,
        phi_init: GraphParam,
        task: Task,
    ) -> None:
        nodes = task.probe_inputs().shape[0]
        if phi_init.n != nodes:
            raise ValueError(
                f"φ covers {phi_init.n} nodes, the task has {nodes}"
            )
        self.config = config
        self.backbone = backbone
        self.task = task
        self.phi = phi_init
        self.seed = config.seed
        self.grad_norms: list[tuple[int, int, int, float]] = []

        self.params = init_params(
            backbone, task.in_features, derive_seed(self.seed, "init")
        )
        self.init_snapshot = self.params.snapshot()
        self.phi_values = Tensor(phi_init.values, requires_grad=True)

        if config.lr_schedule == "cosine":
            self.schedule = CosineSchedule(
                config.inner_lr, config.total_epochs, config.lr_min
            )
        else:
            self.schedule = ConstantSchedule(config.inner_lr)

    def _inner_optimizer(self) -> Optimizer:
        params = self.params.parameters()
        if self.config.mode == TrainMode.E2E_JOINT:
            params = params + [self.phi_values]
        return make_optimizer(
            self.config.optimizer,
            params,
            self.config.inner_lr,
            self.config.weight_decay,
        )

    def _train_graph(self, *labels: object) -> Tensor:
        """Constant adjacency for inner steps; Bernoulli φ is sampled."""
        seed = None
        if self.phi.kind == GraphParamKind.BERNOULLI:
            seed = derive_seed(self.seed, "sample", *labels)
        return Tensor(
            materialize_graph(
                self.phi,
                "sampled" if seed is not None else "deterministic",
                seed,
            )
        )

    def _check(self, value: Tensor, where: str) -> float:
        loss = value.item()
        if not math.isfinite(loss):
            raise DivergedError(f"Non-finite {where} loss {loss}")
        return loss

    def _inner_step(
        self,
        optimizer: Optimizer,
        graph: Tensor,
        batch: np.ndarray,
        key: tuple[int, int, int],
        dropout_seed: int,
    ) -> float:
        optimizer.zero_grad()
        tape = Tape()
        with tape:
            value = self.task.batch_loss(
                self.params, graph, batch, True, dropout_seed
            )
        loss = self._check(value, "training")
        tape.backward(value)

        norm = clip_grad_norm(self.params.parameters(), self.config.grad_clip)
        if self.config.instrument_gradients:
            self.grad_norms.append((*key, norm))
        optimizer.step()
        return loss

    def _outer_step(
        self, optimizer: Optimizer, val_batch: np.ndarray, *labels: object
    ) -> None:
        """One first-order step on φ with θ held constant."""
        constant = self.params.detached()
        self.phi_values.data = self.phi.values.copy()
        optimizer.zero_grad()

        samples = 1
        if self.phi.kind == GraphParamKind.BERNOULLI:
            samples = self.phi.sample_count

        tape = Tape()
        with tape:
            total: Optional[Tensor] = None
            for s in range(samples):
                sample_seed = None
                if self.phi.kind == GraphParamKind.BERNOULLI:
                    sample_seed = derive_seed(
                        self.seed, "outer_sample", *labels, s
                    )
                adjacency = adjacency_tensor(
                    self.phi_values, self.phi, sample_seed
                )
                value = self.task.batch_loss(constant, adjacency, val_batch)
                total = value if total is None else add(total, value)
            total = scale(total, 1.0 / samples)
        self._check(total, "validation")

        tape.backward(total)
        optimizer.step()
        self.phi = self.phi.project(self.phi_values.data)

    def _joint_step(
        self,
        optimizer: Optimizer,
        batch: np.ndarray,
        epoch: int,
        b: int,
    ) -> float:
        self.phi_values.data = self.phi.values.copy()
        optimizer.zero_grad()
        sample_seed = None
        if self.phi.kind == GraphParamKind.BERNOULLI:
            sample_seed = derive_seed(self.seed, "sample", epoch, b)

        tape = Tape()
        with tape:
            adjacency = adjacency_tensor(
                self.phi_values, self.phi, sample_seed
            )
            value = self.task.batch_loss(
                self.params,
                adjacency,
                batch,
                True,
                derive_seed(self.seed, "dropout", epoch, b, 0),
            )
        loss = self._check(value, "training")
        tape.backward(value)

        norm = clip_grad_norm(
            self.params.parameters() + [self.phi_values],
            self.config.grad_clip,
        )
        if self.config.instrument_gradients:
            self.grad_norms.append((epoch, b, 0, norm))
        optimizer.step()
        self.phi = self.phi.project(self.phi_values.data)
        return loss

    def _evaluate(self, split: Literal["val", "test"]) -> float:
        return self.task.evaluate(
            self.params, materialize_graph(self.phi), split
        )

    def _run_persistent(self, record: RunRecord) -> None:
        """θ persists across batches and epochs (vanilla and reuse)."""
        config = self.config
        inner = self._inner_optimizer()
        outer = make_optimizer(
            config.outer_optimizer, [self.phi_values], config.outer_lr
        )

        best = math.inf
        best_state = (self.params.snapshot(), self.phi)
        for epoch in range(config.total_epochs):
            inner.lr = self.schedule(epoch)
            losses = []
            batches = self.task.epoch_batches(self.seed, epoch)
            for b, batch in enumerate(batches):
                if config.mode == TrainMode.E2E_JOINT:
                    losses.append(self._joint_step(inner, batch, epoch, b))
                    continue

                graph = self._train_graph(epoch, b)
                for step in range(config.steps_per_batch):
                    losses.append(
                        self._inner_step(
                            inner,
                            graph,
                            batch,
                            (epoch, b, step),
                            derive_seed(self.seed, "dropout", epoch, b, step),
                        )
                    )
                if (
                    config.mode == TrainMode.BILEVEL
                    and epoch >= config.warmup_epochs
                ):
                    val_batch = self.task.sample_val_batch(
                        derive_seed(self.seed, "val", epoch, b)
                    )
                    self._outer_step(outer, val_batch, epoch, b)

            val = self._evaluate("val")
            record.train_loss.append(float(np.mean(losses)))
            record.val_metric.append(val)
            logger.debug(
                "Epoch %d: train loss %.6f, val %.6f",
                epoch,
                record.train_loss[-1],
                val,
            )

            if val < best:
                best, record.best_epoch = val, epoch
                best_state = (self.params.snapshot(), self.phi)
            elif (
                config.early_stop_patience is not None
                and epoch - record.best_epoch >= config.early_stop_patience
            ):
                logger.info(
                    "Early stopping at epoch %d, best epoch %d",
                    epoch,
                    record.best_epoch,
                )
                break

        self.params.load(best_state[0])
        self.phi = best_state[1]
        record.best_val_metric = best

    def _run_reset(self, record: RunRecord) -> None:
        """θ restarts from its initialization every outer iteration.

        Each iteration's θ_T is scored on the φ it was fit against, before
        the outer step moves φ. The reported model is the θ_T and φ of the
        best-validation iteration.
        """
        config = self.config
        outer = make_optimizer(
            config.outer_optimizer, [self.phi_values], config.outer_lr
        )
        full_batch = self.task.full_batch()

        best = math.inf
        best_state = (self.init_snapshot, self.phi)
        for iteration in range(config.total_epochs):
            self.params.load(self.init_snapshot)
            inner = self._inner_optimizer()
            graph = self._train_graph("reset", iteration)
            losses = [
                self._inner_step(
                    inner,
                    graph,
                    full_batch,
                    (iteration, 0, step),
                    derive_seed(self.seed, "dropout", "reset", step),
                )
                for step in range(config.steps_per_batch)
            ]

            val = self._evaluate("val")
            record.train_loss.append(float(np.mean(losses)))
            record.val_metric.append(val)
            if val < best:
                best, record.best_epoch = val, iteration
                best_state = (self.params.snapshot(), self.phi)

            if (
                config.mode == TrainMode.BILEVEL
                and iteration >= config.warmup_epochs
            ):
                val_batch = self.task.sample_val_batch(
                    derive_seed(self.seed, "val", iteration, 0)
                )
                self._outer_step(outer, val_batch, iteration, 0)

            if (
                config.early_stop_patience is not None
                and iteration - record.best_epoch >= config.early_stop_patience
            ):
                logger.info(
                    "Early stopping at outer iteration %d, best %d",
                    iteration,
                    record.best_epoch,
                )
                break

        self.params.load(best_state[0])
        self.phi = best_state[1]
        record.best_val_metric = best

    def run(self) -> RunRecord:
        config = self.config
        record = RunRecord(config=config, graph_hash=_graph_hash(self.phi))
        logger.info(
            "Starting %s run (%s, T=%d, seed %d)",
            config.mode.value,
            config.regime.value,
            config.steps_per_batch,
            self.seed,
        )
        started = time.perf_counter()

        try:
            if (
                config.regime == Regime.FULLBATCH_RESET
                and config.mode != TrainMode.VANILLA
            ):
                self._run_reset(record)
            else:
                self._run_persistent(record)
        except DivergedError as e:
            logger.warning("Run aborted: %s", e)
            record.status = "failed"
            record.failure_reason = str(e)

        if record.status == "ok":
            adjacency = materialize_graph(self.phi)
            record.test_metric = self.task.evaluate(
                self.params, adjacency, "test"
            )
            record.per_horizon_test = self.task.per_horizon(
                self.params, adjacency, "test"
            )

        record.grad_norms = self.grad_norms
        record.wall_time = time.perf_counter() - started
        record.phi = self.phi
        record.params = self.params
        logger.info(
            "Finished %s run: test metric %s",
            config.mode.value,
            record.test_metric,
        )
        return record


def train(
    config: TrainConfig,
    backbone: BackboneConfig,
    phi_init: GraphParam,
    task: Task,
) -> RunRecord:
    """Train one run and return its record.

    Raises:
        ValueError: If φ does not cover the task's nodes.
    """
    return Trainer(config, backbone, phi_init, task).run()


def instrument_gradients(record: RunRecord) -> pd.DataFrame:
    """Pre-clip gradient norms, one row per (epoch, batch, inner step).

    Refit steps of the full-batch reset regime have epoch -1.
    """
    return pd.DataFrame(
        record.grad_norms,
        columns=["epoch", "batch", "inner_step", "grad_norm"],
    )


def within_batch_profile(table: pd.DataFrame) -> pd.DataFrame:
    """Mean gradient norm at each inner step index."""
    return (
        table.groupby("inner_step", as_index=False)["grad_norm"]
        .mean()
        .rename(columns={"grad_norm": "mean_grad_norm"})
    )


class IGRPoint(BaseModel):
    eta: float
    steps: int
    plain_deviation: float
    modified_deviation: float


class IGRReport(BaseModel):
    horizon: float
    points: list[IGRPoint]
    slope_plain: float
    slope_modified: float


def igr_oracle(
    hessian: np.ndarray,
    theta0: np.ndarray,
    etas: Sequence[float],
    horizon: float = 1.0,
) -> IGRReport:
    """Compare gradient descent on ½θᵀHθ with two continuous flows.

    For each step size η, T = round(t/η) GD steps are compared with the
    gradient flow of L and with the flow of L + (η/4)‖Hθ‖², both
    integrated to time T·η. The log-log slope of each deviation against η
    gives its order in η.

    Raises:
        ValueError: If H is not symmetric positive definite, fewer than two
            step sizes are given, or some η ≥ 1/λ_max(H).
    """
    h = np.asarray(hessian, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    if h.ndim != 2 or h.shape != (len(theta0), len(theta0)):
        raise ValueError(
            f"Hessian {h.shape} does not match θ0 {theta0.shape}"
        )
    if not np.allclose(h, h.T):
        raise ValueError("Hessian is not symmetric")
    eigenvalues = np.linalg.eigvalsh(h)
    if eigenvalues[0] <= 0:
        raise ValueError("Hessian is not positive definite")
    if len(etas) < 2:
        raise ValueError("Need at least two step sizes to fit a slope")
    lam_max = float(eigenvalues[-1])

    points = []
    for eta in sorted(etas):
        if eta <= 0 or eta >= 1.0 / lam_max:
            raise ValueError(
                f"Step size {eta} must be in (0, 1/λ_max = {1.0 / lam_max})"
            )
        steps = max(1, round(horizon / eta))
        iterate = np.linalg.matrix_power(np.eye(len(h)) - eta * h, steps)
        iterate = iterate @ theta0

        modified = h + 0.5 * eta * h @ h
        end = steps * eta
        deviations = []
        for rate in (h, modified):
            flow = solve_ivp(
                lambda t, y, m=rate: -m @ y,
                (0.0, end),
                theta0,
                method="DOP853",
                rtol=1e-12,
                atol=1e-14,
            )
            deviations.append(float(np.linalg.norm(iterate - flow.y[:, -1])))
        points.append(
            IGRPoint(
                eta=eta,
                steps=steps,
                plain_deviation=deviations[0],
                modified_deviation=deviations[1],
            )
        )

    log_eta = np.log([p.eta for p in points])
    plain = np.log([p.plain_deviation for p in points])
    modified = np.log([p.modified_deviation for p in points])
    return IGRReport(
        horizon=horizon,
        points=points,
        slope_plain=float(np.polyfit(log_eta, plain, 1)[0]),
        slope_modified=float(np.polyfit(log_eta, modified, 1)[0]),
    )


def st_preset(
    mode: TrainMode = TrainMode.VANILLA, **overrides: object
) -> tuple[BackboneConfig, TrainConfig]:
    """Forecasting defaults: DiffConv-style K=2 diffusion, TCN kernel 3."""
    backbone = BackboneConfig(
        kind="decoupled_stgnn",
        hidden_dim=32,
        spatial_layers=1,
        temporal_layers=2,
        hops=2,
        kernel_size=3,
        dilation=1,
        dropout=0.0,
        window=12,
        horizon=4,
    )
    defaults = dict(
        mode=mode,
        regime=Regime.MINIBATCH_REUSE,
        inner_steps=10,
        warmup_epochs=10,
        epochs=100,
        batch_size=64,
        inner_lr=1e-3,
        outer_lr=1e-3,
        grad_clip=5.0,
        lr_schedule="cosine",
        lr_min=1e-6,
        optimizer=OptimizerKind.ADAM,
        outer_optimizer=OptimizerKind.ADAM,
        early_stop_patience=30,
    )
    return backbone, TrainConfig.model_validate({**defaults, **overrides})


def nc_preset(
    mode: TrainMode = TrainMode.VANILLA,
    num_classes: int = 3,
    **overrides: object,
) -> tuple[BackboneConfig, TrainConfig]:
    """Node classification defaults: 2-layer GCN with Bernoulli φ."""
    backbone = BackboneConfig(
        kind="gcn_classifier",
        hidden_dim=16,
        dropout=0.5,
        num_classes=num_classes,
    )
    defaults = dict(
        mode=mode,
        regime=Regime.FULLBATCH_RESET,
        inner_steps=5,
        warmup_epochs=0,
        epochs=100,
        inner_lr=1e-2,
        outer_lr=1.0,
        weight_decay=5e-4,
        grad_clip=None,
        lr_schedule="constant",
        optimizer=OptimizerKind.ADAM,
        outer_optimizer=OptimizerKind.SGD,
        early_stop_patience=20,
    )
    return backbone, TrainConfig.model_validate({**defaults, **overrides})
