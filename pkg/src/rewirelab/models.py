"""Backbones and the graph parameterizations they are trained on.

Two backbones are provided: a 2-layer GCN node classifier and a decoupled
spatio-temporal network (dilated temporal convolutions followed by K-hop
bidirectional diffusion). The graph parameter φ is either a row-softmax
reweighting of a fixed support or a matrix of Bernoulli edge
probabilities.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from rewirelab.graph import Graph, write_edge_list
from rewirelab.seeding import generator
from rewirelab.tensor import (
    Tensor,
    absolute,
    add,
    conv1d,
    cross_entropy_with_logits,
    detach,
    dropout,
    gelu,
    matmul,
    multiply,
    power,
    reduce_sum,
    relu,
    reshape,
    row_normalize,
    row_softmax,
    scale,
    squared_error,
    sub,
    take,
    transpose,
)

logger = logging.getLogger(__name__)

LossKind = Literal["mae", "mse", "cross_entropy"]


class GraphParamKind(str, Enum):
    SOFTMAX_REWEIGHT = "softmax_reweight"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True, eq=False)
class GraphParam:
    """The outer parameter φ together with the graph it starts from.

    For `softmax_reweight`, `values` are the logits W_φ and
    A_φ = A_init ⊙ row-softmax(W_φ) restricted to the support of A_init.
    For `bernoulli`, `values` is the symmetric matrix θ of edge
    probabilities, initialized to the support indicators of A_init.
    """

    kind: GraphParamKind
    a_init: np.ndarray
    values: np.ndarray
    sample_count: int = 1

    def __post_init__(self) -> None:
        a_init = np.asarray(self.a_init, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if a_init.ndim != 2 or a_init.shape[0] != a_init.shape[1]:
            raise ValueError(f"A_init must be square, got {a_init.shape}")
        if values.shape != a_init.shape:
            raise ValueError(
                f"φ has shape {values.shape}, expected {a_init.shape}"
            )
        if self.sample_count < 1:
            raise ValueError(
                f"Sample count must be positive, got {self.sample_count}"
            )
        if self.kind == GraphParamKind.BERNOULLI and (
            np.any(values < 0) or np.any(values > 1)
        ):
            raise ValueError("Bernoulli probabilities must lie in [0, 1]")
        object.__setattr__(self, "a_init", a_init)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_graph(
        cls,
        g: Graph,
        kind: GraphParamKind = GraphParamKind.SOFTMAX_REWEIGHT,
        sample_count: int = 1,
    ) -> "GraphParam":
        return cls.from_adjacency(g.adjacency(), kind, sample_count)

    @classmethod
    def from_adjacency(
        cls,
        a_init: np.ndarray,
        kind: GraphParamKind = GraphParamKind.SOFTMAX_REWEIGHT,
        sample_count: int = 1,
    ) -> "GraphParam":
        """φ at its starting point: uniform logits, or θ = support of A."""
        a_init = np.asarray(a_init, dtype=np.float64)
        if kind == GraphParamKind.BERNOULLI:
            values = (a_init > 0).astype(np.float64)
        else:
            values = np.zeros_like(a_init)
        return cls(kind, a_init, values, sample_count)

    @classmethod
    def fixed(
        cls,
        adjacency: np.ndarray,
        kind: GraphParamKind = GraphParamKind.SOFTMAX_REWEIGHT,
        sample_count: int = 1,
    ) -> "GraphParam":
        """φ that materializes to exactly `adjacency`.

        Softmax logits are the log-weights and A_init holds each row's sum
        on the support, so the row softmax gives every row back unchanged.
        A Bernoulli φ takes θ = support and therefore needs a 0/1 graph.
        """
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if kind == GraphParamKind.BERNOULLI:
            return cls.from_adjacency(adjacency, kind, sample_count)
        support = adjacency > 0
        sums = adjacency.sum(axis=1, keepdims=True)
        a_init = np.where(support, sums, 0.0)
        values = np.log(np.where(support, adjacency, 1.0))
        return cls(kind, a_init, values, sample_count)

    @property
    def n(self) -> int:
        return len(self.a_init)

    @property
    def support(self) -> np.ndarray:
        return self.a_init > 0

    def with_values(self, values: np.ndarray) -> "GraphParam":
        return replace(self, values=np.array(values, dtype=np.float64))

    def project(self, values: Optional[np.ndarray] = None) -> "GraphParam":
        """Return φ moved back onto its feasible set.

        Bernoulli probabilities are mirrored from the upper triangle and
        clipped to [0, 1]; softmax logits are unconstrained.
        """
        values = self.values if values is None else values
        if self.kind == GraphParamKind.BERNOULLI:
            upper = np.triu(values, k=1)
            values = np.clip(upper + upper.T, 0.0, 1.0)
        return self.with_values(values)


def _sample_mask(theta: np.ndarray, seed: int) -> np.ndarray:
    """One symmetric 0/1 draw: upper triangle sampled, then mirrored."""
    draws = np.random.default_rng(seed).random(theta.shape)
    upper = np.triu(draws < theta, k=1).astype(np.float64)
    return upper + upper.T


def adjacency_tensor(
    values: Tensor, phi: GraphParam, sample_seed: Optional[int] = None
) -> Tensor:
    """Differentiable A(φ) with respect to `values`.

    Bernoulli samples use a straight-through estimator: the forward value
    is the sampled mask, the backward pass is that of the expectation.

    Args:
        values (Tensor): Current φ values, usually requiring grad.
        phi (GraphParam): Kind and support of the parameterization.
        sample_seed (Optional[int]): Seed of a Bernoulli draw. The
            expectation graph is returned when None.
    """
    if phi.kind == GraphParamKind.SOFTMAX_REWEIGHT:
        weights = row_softmax(values, mask=phi.support)
        return multiply(Tensor(phi.a_init), weights)

    upper = multiply(values, Tensor(np.triu(np.ones(values.shape), k=1)))
    expectation = add(upper, transpose(upper))
    if sample_seed is None:
        return expectation
    mask = _sample_mask(values.data, sample_seed)
    return add(Tensor(mask), sub(expectation, detach(expectation)))


def materialize_graph(
    phi: GraphParam,
    mode: Literal["deterministic", "sampled"] = "deterministic",
    seed: Optional[int] = None,
) -> np.ndarray:
    """Weighted adjacency of φ as a plain array.

    Raises:
        ValueError: If a sampled graph is requested without a seed.
    """
    if mode == "sampled" and seed is None:
        raise ValueError("Sampled graphs need a seed")
    sample_seed = (
        seed
        if mode == "sampled" and phi.kind == GraphParamKind.BERNOULLI
        else None
    )
    return adjacency_tensor(Tensor(phi.values), phi, sample_seed).numpy()


def binarize(phi: GraphParam, threshold: float) -> np.ndarray:
    """Modal 0/1 graph of a Bernoulli φ: edges with θ ≥ τ."""
    if phi.kind != GraphParamKind.BERNOULLI:
        raise ValueError("Only Bernoulli φ can be binarized")
    mask = np.triu(phi.values >= threshold, k=1).astype(np.float64)
    return mask + mask.T


def learned_adjacency(
    phi: GraphParam, threshold: Optional[float] = None
) -> np.ndarray:
    """The graph a learned φ hands over to fresh training.

    Raises:
        ValueError: If φ is Bernoulli and no threshold is given.
    """
    if phi.kind == GraphParamKind.BERNOULLI:
        if threshold is None:
            raise ValueError("Bernoulli φ needs a binarize threshold")
        return binarize(phi, threshold)
    return materialize_graph(phi)


def export_graph(
    phi: GraphParam, path: Path, threshold: Optional[float] = None
) -> Graph:
    """Write the learned graph as an edge list and return it.

    Softmax-reweighted graphs are not symmetric in general; the exported
    graph is their symmetric part.
    """
    if threshold is not None:
        adjacency = binarize(phi, threshold)
    else:
        adjacency = materialize_graph(phi)
    g = Graph.from_adjacency(adjacency, symmetrize=True)
    write_edge_list(g, path)
    logger.info("Exported %d edges to %s", g.num_edges, path)
    return g


class BackboneConfig(BaseModel):
    kind: Literal["gcn_classifier", "decoupled_stgnn"]
    hidden_dim: int = Field(default=32, ge=1)
    spatial_layers: int = Field(default=1, ge=1)
    temporal_layers: int = Field(default=2, ge=1)
    hops: int = Field(default=2, ge=0)
    kernel_size: int = Field(default=3, ge=1)
    dilation: int = Field(default=1, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    window: int = Field(default=12, ge=1)
    horizon: int = Field(default=4, ge=1)
    num_classes: int = Field(default=2, ge=2)
    bidirectional: bool = True

    @property
    def receptive_field(self) -> int:
        return 1 + self.temporal_layers * (self.kernel_size - 1) * (
            self.dilation
        )

    @property
    def hop_radius(self) -> int:
        """Largest graph distance an output can depend on."""
        if self.kind == "gcn_classifier":
            return 2
        return self.spatial_layers * self.hops

    @model_validator(mode="after")
    def _check_window(self) -> "BackboneConfig":
        if (
            self.kind == "decoupled_stgnn"
            and self.window < self.receptive_field
        ):
            raise ValueError(
                f"Window {self.window} is shorter than the temporal "
                f"receptive field {self.receptive_field}"
            )
        return self


@dataclass
class ModelParams:
    """Named parameter tensors of one backbone."""

    tensors: dict[str, Tensor]
    seed: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [t.data.reshape(-1) for t in self.tensors.values()]
        )

    def unflatten(self, vector: np.ndarray) -> "ModelParams":
        """New parameters with the same layout, filled from `vector`.

        Raises:
            ValueError: If the vector length does not match.
        """
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_parameters,):
            raise ValueError(
                f"Expected {self.num_parameters} values, got {vector.shape}"
            )
        tensors, offset = {}, 0
        for name, t in self.tensors.items():
            chunk = vector[offset : offset + t.size].reshape(t.shape)
            tensors[name] = Tensor(chunk, requires_grad=t.requires_grad)
            offset += t.size
        return ModelParams(tensors, self.seed)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load(self, snapshot: dict[str, np.ndarray]) -> None:
        """Overwrite the values in place from a snapshot."""
        for name, t in self.tensors.items():
            t.data = snapshot[name].copy()
            t.grad = None

    def detached(self) -> "ModelParams":
        """Constant copies, for steps that must not update θ."""
        return ModelParams(
            {name: Tensor(t.data) for name, t in self.tensors.items()},
            self.seed,
        )


def _glorot(shape: tuple[int, ...], seed: int, *labels: object) -> Tensor:
    if len(shape) == 3:
        receptive = shape[0]
        fan_in, fan_out = receptive * shape[1], receptive * shape[2]
    else:
        fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    values = generator(seed, "init", *labels).uniform(-limit, limit, shape)
    return Tensor(values, requires_grad=True)


def _zeros(width: int) -> Tensor:
    return Tensor(np.zeros((1, width)), requires_grad=True)


def init_params(
    config: BackboneConfig, in_features: int, seed: int
) -> ModelParams:
    """Glorot-uniform weights and zero biases, one stream per tensor."""
    hidden = config.hidden_dim
    tensors: dict[str, Tensor] = {}

    if config.kind == "gcn_classifier":
        tensors["gcn.0.weight"] = _glorot(
            (in_features, hidden), seed, "gcn", 0
        )
        tensors["gcn.0.bias"] = _zeros(hidden)
        tensors["gcn.1.weight"] = _glorot(
            (hidden, config.num_classes), seed, "gcn", 1
        )
        tensors["gcn.1.bias"] = _zeros(config.num_classes)
        return ModelParams(tensors, seed)

    channels = in_features
    for layer in range(config.temporal_layers):
        tensors[f"temporal.{layer}.weight"] = _glorot(
            (config.kernel_size, channels, hidden), seed, "temporal", layer
        )
        tensors[f"temporal.{layer}.bias"] = _zeros(hidden)
        channels = hidden

    directions = ("fwd", "bwd") if config.bidirectional else ("fwd",)
    for layer in range(config.spatial_layers):
        tensors[f"spatial.{layer}.self"] = _glorot(
            (hidden, hidden), seed, "spatial", layer, "self"
        )
        for direction in directions:
            for hop in range(1, config.hops + 1):
                tensors[f"spatial.{layer}.{direction}.{hop}"] = _glorot(
                    (hidden, hidden), seed, "spatial", layer, direction, hop
                )
        tensors[f"spatial.{layer}.bias"] = _zeros(hidden)

    tensors["readout.weight"] = _glorot(
        (hidden, config.horizon), seed, "readout"
    )
    tensors["readout.bias"] = _zeros(config.horizon)
    return ModelParams(tensors, seed)


def gcn_normalize(adjacency: Tensor) -> Tensor:
    """D^-1/2 (A + I) D^-1/2, differentiable in A."""
    n = adjacency.shape[0]
    with_loops = add(adjacency, Tensor(np.eye(n)))
    inv_sqrt = power(reduce_sum(with_loops, axis=1, keepdims=True), -0.5)
    return multiply(multiply(with_loops, inv_sqrt), transpose(inv_sqrt))


def gcn_forward(
    params: ModelParams,
    adjacency: Tensor,
    features: Tensor | np.ndarray,
    training: bool = False,
    dropout_seed: int = 0,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Class logits of a 2-layer GCN.

    Raises:
        ValueError: If the adjacency and feature shapes disagree.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n) or x.data.ndim != 2 or x.shape[0] != n:
        raise ValueError(
            f"gcn_forward: adjacency {adjacency.shape} does not match "
            f"features {x.shape}"
        )

    a_hat = gcn_normalize(adjacency)
    hidden = add(
        matmul(a_hat, matmul(x, params["gcn.0.weight"])),
        params["gcn.0.bias"],
    )
    hidden = relu(hidden)
    hidden = dropout(hidden, dropout_rate, dropout_seed, training)
    return add(
        matmul(a_hat, matmul(hidden, params["gcn.1.weight"])),
        params["gcn.1.bias"],
    )


def _channel_matmul(h: Tensor, weight: Tensor, rows: int) -> Tensor:
    """Apply a (C, C') map to an (n, B·C) node-major state."""
    channels = weight.shape[0]
    flat = reshape(h, (-1, channels))
    out = matmul(flat, weight)
    return reshape(out, (rows, -1))


def stgnn_forward(
    params: ModelParams,
    adjacency: Tensor,
    window: Tensor | np.ndarray,
    config: BackboneConfig,
    training: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    """Forecast (B, horizon, n) from input windows (B, W, n).

    Each node's series first goes through the temporal convolution stack,
    which does not mix nodes. The last temporal state is then diffused
    over the graph with powers of row-normalized A and Aᵀ, and a linear
    readout maps it to the horizon.

    Raises:
        ValueError: If the window is shorter than the receptive field or
            the node counts disagree.
    """
    x = window if isinstance(window, Tensor) else Tensor(window)
    if x.data.ndim != 3:
        raise ValueError(f"stgnn_forward: expected (B, W, n), got {x.shape}")
    batch, steps, n = x.shape
    if adjacency.shape != (n, n):
        raise ValueError(
            f"stgnn_forward: adjacency {adjacency.shape} does not match "
            f"{n} nodes"
        )
    if steps < config.receptive_field:
        raise ValueError(
            f"stgnn_forward: window {steps} is shorter than the receptive "
            f"field {config.receptive_field}"
        )
    hidden = config.hidden_dim

    # (B, W, n) -> (B·n, W, 1), rows ordered batch-major
    h = reshape(transpose(x, (0, 2, 1)), (batch * n, steps, 1))
    for layer in range(config.temporal_layers):
        h = conv1d(h, params[f"temporal.{layer}.weight"], config.dilation)
        rows, length, _ = h.shape
        h = add(
            reshape(h, (rows * length, hidden)),
            params[f"temporal.{layer}.bias"],
        )
        h = reshape(gelu(h), (rows, length, hidden))

    last = take(h, (slice(None), -1, slice(None)))
    last = dropout(last, config.dropout, dropout_seed, training)

    # (B·n, C) -> (n, B·C) so the graph acts on the node axis
    state = reshape(
        transpose(reshape(last, (batch, n, hidden)), (1, 0, 2)),
        (n, batch * hidden),
    )

    propagators = [row_normalize(adjacency)]
    if config.bidirectional:
        propagators.append(row_normalize(transpose(adjacency)))
    directions = ("fwd", "bwd")

    for layer in range(config.spatial_layers):
        out = _channel_matmul(state, params[f"spatial.{layer}.self"], n)
        for direction, propagator in zip(directions, propagators):
            diffused = state
            for hop in range(1, config.hops + 1):
                diffused = matmul(propagator, diffused)
                out = add(
                    out,
                    _channel_matmul(
                        diffused,
                        params[f"spatial.{layer}.{direction}.{hop}"],
                        n,
                    ),
                )
        out = add(
            reshape(out, (n * batch, hidden)),
            params[f"spatial.{layer}.bias"],
        )
        state = reshape(gelu(out), (n, batch * hidden))

    readout = add(
        matmul(reshape(state, (n * batch, hidden)), params["readout.weight"]),
        params["readout.bias"],
    )
    # (n·B, H) -> (B, H, n)
    return transpose(
        reshape(readout, (n, batch, config.horizon)), (1, 2, 0)
    )


def stgnn_node_model(
    params: ModelParams, adjacency: np.ndarray, config: BackboneConfig
) -> Callable[[Tensor], Tensor]:
    """Wrap the STGNN as a map from (n, W) inputs to (n, H) outputs."""
    a = Tensor(adjacency)

    def model(x: Tensor) -> Tensor:
        n, steps = x.shape
        batch = reshape(transpose(x), (1, steps, n))
        out = stgnn_forward(params, a, batch, config)
        return transpose(reshape(out, (config.horizon, n)))

    return model


def gcn_node_model(
    params: ModelParams, adjacency: np.ndarray
) -> Callable[[Tensor], Tensor]:
    a = Tensor(adjacency)
    return lambda x: gcn_forward(params, a, x)


def loss(
    pred: Tensor,
    target: Tensor | np.ndarray,
    kind: LossKind,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean loss over the entries (rows for cross-entropy) in `mask`.

    Raises:
        ValueError: If the mask is empty or shapes do not match.
    """
    if kind == "cross_entropy":
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        return cross_entropy_with_logits(pred, np.asarray(target), mask)

    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"loss: incompatible shapes {pred.shape} and {target.shape}"
        )
    if kind == "mae":
        errors = absolute(sub(pred, target))
    else:
        errors = squared_error(pred, target)

    if mask is None:
        return scale(reduce_sum(errors), 1.0 / errors.size)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss: empty mask")
    weights = np.broadcast_to(mask, errors.shape).astype(np.float64)
    return scale(reduce_sum(multiply(errors, weights)), 1.0 / count)


def save_checkpoint(
    path: Path,
    config: BackboneConfig,
    params: ModelParams,
    phi: Optional[GraphParam] = None,
) -> None:
    """Write parameters (and φ) as an `.npz` with a JSON header entry."""
    header = {
        "backbone": config.model_dump(mode="json"),
        "seed": params.seed,
        "names": list(params.tensors),
        "phi": None
        if phi is None
        else {"kind": phi.kind.value, "sample_count": phi.sample_count},
    }
    arrays = {f"param__{name}": t.data for name, t in params.tensors.items()}
    if phi is not None:
        arrays["phi__a_init"] = phi.a_init
        arrays["phi__values"] = phi.values
    np.savez(path, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(
    path: Path,
) -> tuple[BackboneConfig, ModelParams, Optional[GraphParam]]:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        FileNotFoundError: If the file does not exist.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint does not exist at {path}")

    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        params = ModelParams(
            {
                name: Tensor(archive[f"param__{name}"], requires_grad=True)
                for name in header["names"]
            },
            header["seed"],
        )
        phi = None
        if header["phi"] is not None:
            phi = GraphParam(
                GraphParamKind(header["phi"]["kind"]),
                archive["phi__a_init"],
                archive["phi__values"],
                header["phi"]["sample_count"],
            )
    return BackboneConfig.model_validate(header["backbone"]), params, phi
