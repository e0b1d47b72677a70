import hashlib
import logging
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import yaml
from pydantic import (
    BaseModel,
    BeforeValidator,
    Field,
    ValidationError,
    model_validator,
)

from rewirelab.data import (
    DEFAULT_FRACTIONS,
    NCDataset,
    PlantedSpec,
    STDataset,
    load_csv_st,
    synth_nc,
    synth_st,
)
from rewirelab.graph import (
    BandwidthRule,
    FixedBandwidth,
    Metric,
    PercentileBandwidth,
)
from rewirelab.models import BackboneConfig, GraphParam, GraphParamKind
from rewirelab.runner import Setup
from rewirelab.trainers import (
    Regime,
    TrainConfig,
    TrainMode,
    nc_preset,
    st_preset,
)
from rewirelab.validators import (
    DEFAULT_SEEDS,
    fraction_values,
    increasing_counts,
    increasing_values,
    seed_list,
)

logger = logging.getLogger(__name__)

ASSETS_ROOT = Path(__file__).parent.parent.parent / "assets"

ExperimentKind = Literal[
    "train",
    "decompose",
    "tsweep",
    "corruption",
    "distill",
    "spectra",
    "jacobian",
    "igr-oracle",
    "bandwidth-ablation",
]

Seeds = Annotated[list[int], BeforeValidator(seed_list)]
AxisValues = Annotated[list[float], BeforeValidator(increasing_values)]
StepCounts = Annotated[list[int], BeforeValidator(increasing_counts)]
Fractions = Annotated[list[float], BeforeValidator(fraction_values)]


class SyntheticSTConfig(BaseModel):
    """Planted linear diffusion; see `rewirelab.data.synth_st`."""

    kind: Literal["synthetic_st"] = "synthetic_st"
    n_nodes: int = Field(default=60, ge=2)
    steps: int = Field(default=3000, ge=1)
    slack: float = Field(default=0.0, ge=0.0, le=1.0)
    noise: float = Field(default=0.1, ge=0.0)
    rho: float = Field(default=0.9, ge=0.0, lt=1.0)
    amplitude: float = 1.0
    period: int = Field(default=48, ge=1)
    bandwidth: float = Field(default=15.0, gt=0)
    threshold: float = Field(default=0.1, ge=0.0, lt=1.0)
    seed: int = 0


class SyntheticNCConfig(BaseModel):
    """Stochastic block model; see `rewirelab.data.synth_nc`."""

    kind: Literal["synthetic_nc"] = "synthetic_nc"
    n_nodes: int = Field(default=300, ge=4)
    classes: int = Field(default=3, ge=2)
    homophily: float = Field(default=0.8, gt=0.0, le=1.0)
    mean_degree: float = Field(default=6.0, gt=0)
    feature_dim: int = Field(default=16, ge=1)
    feature_noise: float = Field(default=2.0, ge=0.0)
    seed: int = 0


class CSVSTConfig(BaseModel):
    """A signal CSV and an edge list on disk."""

    kind: Literal["csv_st"] = "csv_st"
    signal: Path
    graph: Path
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS


DatasetConfig = Annotated[
    Union[SyntheticSTConfig, SyntheticNCConfig, CSVSTConfig],
    Field(discriminator="kind"),
]


class GraphParamConfig(BaseModel):
    kind: Optional[GraphParamKind] = None
    sample_count: Optional[int] = Field(default=None, ge=1)


class TSweepSection(BaseModel):
    t_values: StepCounts = [1, 5, 10, 20]
    arms: list[Literal["frozen_phi", "bilevel"]] = ["frozen_phi", "bilevel"]


class CorruptionSection(BaseModel):
    r_values: Fractions = [0.0, 0.25, 0.5]
    corruption_seed: int = 0


class DistillSection(BaseModel):
    """Which graph to retrain vanilla on.

    `learned` takes the φ of each seed's bilevel run, `init` distills A_init
    itself, `true` the planted true graph of a synthetic ST dataset.
    """

    source: Literal["learned", "init", "true"] = "learned"
    threshold: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class DecomposeSection(BaseModel):
    resamples: int = Field(default=1000, ge=1)
    bootstrap_seed: int = 0
    weight_decays: Optional[AxisValues] = None
    epoch_multipliers: Optional[StepCounts] = None
    e2e: bool = False
    edge_threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class SpectraSection(BaseModel):
    eps: float = Field(default=0.05, gt=0.0, lt=0.5)
    method: Literal["eigh", "jacobi"] = "eigh"
    graphs: list[Path] = []
    alpha: float = 0.5
    c1: float = 0.0
    c2: float = 0.5
    k_max: int = Field(default=10, ge=1)
    normalization: Literal["symmetric", "row"] = "symmetric"


class JacobianSection(BaseModel):
    arm: TrainMode = TrainMode.BILEVEL
    pairs_per_stratum: int = Field(default=200, ge=1)
    output_step: Optional[int] = Field(default=None, ge=0)
    seed: int = 0


class IGRSection(BaseModel):
    hessian: list[list[float]] = [[1.0, 0.0], [0.0, 0.5]]
    theta0: list[float] = [1.0, 1.0]
    etas: AxisValues = [0.0125, 0.025, 0.05, 0.1]
    horizon: float = Field(default=1.0, gt=0)


class BandwidthSection(BaseModel):
    """Kernel graphs under several bandwidth rules.

    Without a coordinate file, a planar two-cluster layout is used.
    """

    coords: Optional[Path] = None
    metric: Metric = "haversine"
    rules: list[BandwidthRule] = [
        FixedBandwidth(value=20.0),
        FixedBandwidth(value=400.0),
        PercentileBandwidth(p=95.0),
    ]
    threshold: float = Field(default=0.1, ge=0.0, lt=1.0)
    cutoff: float = Field(default=80.0, gt=0)
    n_per_cluster: int = Field(default=20, ge=1)
    separation: float = Field(default=500.0, gt=0)
    spread: float = Field(default=5.0, gt=0)
    seed: int = 0


class ExperimentConfig(BaseModel):
    """Configuration of one experiment, read from a single YAML file."""

    experiment: ExperimentKind
    name: Optional[str] = None
    dataset: Optional[DatasetConfig] = None
    backbone: dict[str, Any] = {}
    train: dict[str, Any] = {}
    graph_param: GraphParamConfig = GraphParamConfig()
    seeds: Seeds = list(DEFAULT_SEEDS)
    output: Path = Path("runs")
    jobs: Optional[int] = Field(default=None, ge=1)

    tsweep: TSweepSection = TSweepSection()
    corruption: CorruptionSection = CorruptionSection()
    distill: DistillSection = DistillSection()
    decompose: DecomposeSection = DecomposeSection()
    spectra: SpectraSection = SpectraSection()
    jacobian: JacobianSection = JacobianSection()
    igr: IGRSection = IGRSection()
    bandwidth: BandwidthSection = BandwidthSection()

    @property
    def label(self) -> str:
        return self.name or self.experiment

    @property
    def is_node_classification(self) -> bool:
        return isinstance(self.dataset, SyntheticNCConfig)

    @property
    def phi_kind(self) -> GraphParamKind:
        if self.graph_param.kind is not None:
            return self.graph_param.kind
        if self.is_node_classification:
            return GraphParamKind.BERNOULLI
        return GraphParamKind.SOFTMAX_REWEIGHT

    @property
    def sample_count(self) -> int:
        if self.graph_param.sample_count is not None:
            return self.graph_param.sample_count
        return 16 if self.phi_kind == GraphParamKind.BERNOULLI else 1

    def presets(self) -> tuple[BackboneConfig, TrainConfig]:
        """Backbone and training config: preset defaults plus overrides.

        Raises:
            ValueError: If the overrides do not validate.
        """
        try:
            if self.is_node_classification:
                backbone, train = nc_preset(
                    num_classes=self.dataset.classes, **self.train
                )
            else:
                backbone, train = st_preset(**self.train)
            backbone = BackboneConfig.model_validate(
                {**backbone.model_dump(), **self.backbone}
            )
        except ValidationError as e:
            raise ValueError(str(e)) from None
        return backbone, train

    @model_validator(mode="after")
    def _check_experiment(self) -> "ExperimentConfig":
        needs_data = self.experiment not in (
            "igr-oracle",
            "bandwidth-ablation",
        )
        if needs_data and self.dataset is None:
            raise ValueError(f"Experiment {self.experiment} needs a dataset")
        if self.dataset is not None:
            _, train = self.presets()
            if (
                self.experiment == "decompose"
                and self.decompose.e2e
                and train.regime == Regime.FULLBATCH_RESET
            ):
                raise ValueError(
                    "decompose.e2e needs regime minibatch_reuse"
                )

        if (
            self.experiment == "distill"
            and self.distill.source == "learned"
            and self.phi_kind == GraphParamKind.BERNOULLI
            and self.distill.threshold is None
        ):
            raise ValueError(
                "Distilling a Bernoulli φ needs distill.threshold"
            )
        if (
            self.experiment == "distill"
            and self.distill.source == "true"
            and not isinstance(self.dataset, SyntheticSTConfig)
        ):
            raise ValueError(
                "distill.source 'true' needs a synthetic_st dataset"
            )
        return self


def read_config(path: Path, **overrides: Any) -> ExperimentConfig:
    """Read and validate an experiment config file.

    Args:
        path (Path): Path to the YAML file.
        **overrides (Any): Top-level settings replacing those in the file,
            such as the experiment kind or seeds given on the command line.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        FileNotFoundError: If the config file does not exist.
        ValidationError: If the config does not validate.
    """
    if not path.is_file():
        raise FileNotFoundError(f"Config file does not exist at {path}")

    with open(path, "rb") as f:
        config_data: dict[str, Any] = yaml.safe_load(f) or {}
    if not isinstance(config_data, dict):
        raise ValueError(f"{path} does not hold a mapping of settings")

    config_data.update(
        {key: value for key, value in overrides.items() if value is not None}
    )
    return ExperimentConfig.model_validate(config_data)


def default_config_path() -> Path:
    """Path to the commented example config shipped with the package."""
    return ASSETS_ROOT / "default_config.yml"


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical config, excluding where output goes."""
    canonical = config.model_dump_json(exclude={"output", "jobs"})
    return hashlib.sha256(canonical.encode()).hexdigest()


def build_dataset(
    config: ExperimentConfig,
    backbone: BackboneConfig,
) -> tuple[STDataset | NCDataset, Optional[PlantedSpec]]:
    """Generate or load the configured dataset.

    Raises:
        ValueError: If no dataset is configured.
    """
    spec = config.dataset
    if spec is None:
        raise ValueError(f"Experiment {config.experiment} has no dataset")

    if isinstance(spec, SyntheticSTConfig):
        return synth_st(
            n_nodes=spec.n_nodes,
            steps=spec.steps,
            slack=spec.slack,
            noise=spec.noise,
            rho=spec.rho,
            amplitude=spec.amplitude,
            period=spec.period,
            bandwidth=spec.bandwidth,
            threshold=spec.threshold,
            window=backbone.window,
            horizon=backbone.horizon,
            seed=spec.seed,
        )
    if isinstance(spec, SyntheticNCConfig):
        dataset = synth_nc(
            n_nodes=spec.n_nodes,
            classes=spec.classes,
            homophily=spec.homophily,
            mean_degree=spec.mean_degree,
            feature_dim=spec.feature_dim,
            feature_noise=spec.feature_noise,
            seed=spec.seed,
        )
        return dataset, None
    dataset = load_csv_st(
        spec.signal,
        spec.graph,
        backbone.window,
        backbone.horizon,
        spec.fractions,
    )
    return dataset, None


def build_setup(
    config: ExperimentConfig,
) -> tuple[Setup, Optional[PlantedSpec]]:
    """Dataset, backbone, training defaults and initial φ of an experiment."""
    backbone, train = config.presets()
    dataset, planted = build_dataset(config, backbone)
    phi = GraphParam.from_graph(
        dataset.graph, config.phi_kind, config.sample_count
    )
    return Setup(dataset, backbone, train, phi), planted
