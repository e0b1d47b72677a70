"""Task adapters between datasets and backbones.

A task knows how to batch its dataset, how to compute the training loss of
a backbone on a batch for a given adjacency, and how to score a split.
Metrics are always smaller-is-better: MAE in the signal's raw units for
forecasting and error rate in percent for node classification.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from rewirelab.data import NCDataset, Split, STDataset, batch_iter
from rewirelab.models import (
    BackboneConfig,
    ModelParams,
    gcn_forward,
    gcn_node_model,
    loss,
    stgnn_forward,
    stgnn_node_model,
)
from rewirelab.seeding import derive_seed
from rewirelab.tensor import Tensor


class Task(Protocol):
    backbone: BackboneConfig

    @property
    def in_features(self) -> int: ...

    def epoch_batches(self, seed: int, epoch: int) -> list[np.ndarray]: ...

    def full_batch(self) -> np.ndarray: ...

    def sample_val_batch(self, seed: int) -> np.ndarray: ...

    def batch_loss(
        self,
        params: ModelParams,
        adjacency: Tensor,
        batch: np.ndarray,
        training: bool = False,
        dropout_seed: int = 0,
    ) -> Tensor: ...

    def evaluate(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> float: ...

    def per_horizon(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> Optional[list[float]]: ...

    def node_model(
        self, params: ModelParams, adjacency: np.ndarray
    ) -> Callable[[Tensor], Tensor]: ...

    def probe_inputs(self) -> np.ndarray: ...


@dataclass
class STTask:
    dataset: STDataset
    backbone: BackboneConfig
    batch_size: int = 64
    val_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.backbone.kind != "decoupled_stgnn":
            raise ValueError("Forecasting needs the decoupled_stgnn backbone")
        if (
            self.backbone.window != self.dataset.window
            or self.backbone.horizon != self.dataset.horizon
        ):
            raise ValueError(
                f"Backbone window/horizon {self.backbone.window}/"
                f"{self.backbone.horizon} do not match the dataset's "
                f"{self.dataset.window}/{self.dataset.horizon}"
            )

    @property
    def in_features(self) -> int:
        return 1

    def epoch_batches(self, seed: int, epoch: int) -> list[np.ndarray]:
        return list(
            batch_iter(
                self.dataset,
                self.batch_size,
                derive_seed(seed, "batches", epoch),
                "train",
            )
        )

    def full_batch(self) -> np.ndarray:
        return self.dataset.window_starts("train")

    def sample_val_batch(self, seed: int) -> np.ndarray:
        starts = self.dataset.window_starts("val")
        size = min(self.val_batch_size, len(starts))
        chosen = np.random.default_rng(seed).choice(
            starts, size=size, replace=False
        )
        return np.sort(chosen)

    def batch_loss(
        self,
        params: ModelParams,
        adjacency: Tensor,
        batch: np.ndarray,
        training: bool = False,
        dropout_seed: int = 0,
    ) -> Tensor:
        pred = stgnn_forward(
            params,
            adjacency,
            self.dataset.inputs(batch),
            self.backbone,
            training,
            dropout_seed,
        )
        return loss(pred, self.dataset.targets(batch), "mae")

    def _errors(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> np.ndarray:
        """Absolute raw-unit errors, shape (windows, horizon, nodes)."""
        a = Tensor(adjacency)
        errors = []
        for batch in batch_iter(self.dataset, self.val_batch_size, 0, split):
            pred = stgnn_forward(
                params, a, self.dataset.inputs(batch), self.backbone
            )
            errors.append(
                np.abs(
                    self.dataset.denormalize(pred.data)
                    - self.dataset.denormalize(self.dataset.targets(batch))
                )
            )
        return np.concatenate(errors)

    def evaluate(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> float:
        return float(self._errors(params, adjacency, split).mean())

    def per_horizon(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> Optional[list[float]]:
        errors = self._errors(params, adjacency, split)
        return [float(v) for v in errors.mean(axis=(0, 2))]

    def node_model(
        self, params: ModelParams, adjacency: np.ndarray
    ) -> Callable[[Tensor], Tensor]:
        return stgnn_node_model(params, adjacency, self.backbone)

    def probe_inputs(self) -> np.ndarray:
        """First test window as a nodes-first (n, W) matrix."""
        start = self.dataset.window_starts("test")[:1]
        return self.dataset.inputs(start)[0].T


@dataclass
class NCTask:
    """Full-graph node classification; every batch is the train set."""

    dataset: NCDataset
    backbone: BackboneConfig

    def __post_init__(self) -> None:
        if self.backbone.kind != "gcn_classifier":
            raise ValueError("Node classification needs gcn_classifier")
        if self.backbone.num_classes != self.dataset.num_classes:
            raise ValueError(
                f"Backbone has {self.backbone.num_classes} classes, dataset "
                f"has {self.dataset.num_classes}"
            )

    @property
    def in_features(self) -> int:
        return self.dataset.graph.features.shape[1]

    def epoch_batches(self, seed: int, epoch: int) -> list[np.ndarray]:
        return [self.dataset.train]

    def full_batch(self) -> np.ndarray:
        return self.dataset.train

    def sample_val_batch(self, seed: int) -> np.ndarray:
        return self.dataset.val

    def _logits(
        self,
        params: ModelParams,
        adjacency: Tensor,
        training: bool = False,
        dropout_seed: int = 0,
    ) -> Tensor:
        return gcn_forward(
            params,
            adjacency,
            self.dataset.graph.features,
            training,
            dropout_seed,
            self.backbone.dropout,
        )

    def batch_loss(
        self,
        params: ModelParams,
        adjacency: Tensor,
        batch: np.ndarray,
        training: bool = False,
        dropout_seed: int = 0,
    ) -> Tensor:
        logits = self._logits(params, adjacency, training, dropout_seed)
        mask = np.zeros(self.dataset.n, dtype=bool)
        mask[batch] = True
        return loss(logits, self.dataset.graph.labels, "cross_entropy", mask)

    def evaluate(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> float:
        logits = self._logits(params, Tensor(adjacency)).data
        nodes = getattr(self.dataset, split)
        predicted = np.argmax(logits[nodes], axis=1)
        labels = np.asarray(self.dataset.graph.labels)[nodes]
        return float(100.0 * np.mean(predicted != labels))

    def per_horizon(
        self, params: ModelParams, adjacency: np.ndarray, split: Split
    ) -> Optional[list[float]]:
        return None

    def node_model(
        self, params: ModelParams, adjacency: np.ndarray
    ) -> Callable[[Tensor], Tensor]:
        return gcn_node_model(params, adjacency)

    def probe_inputs(self) -> np.ndarray:
        return np.asarray(self.dataset.graph.features)


def make_task(
    dataset: STDataset | NCDataset,
    backbone: BackboneConfig,
    batch_size: int = 64,
    val_batch_size: int = 64,
) -> Task:
    if isinstance(dataset, STDataset):
        return STTask(dataset, backbone, batch_size, val_batch_size)
    return NCTask(dataset, backbone)
