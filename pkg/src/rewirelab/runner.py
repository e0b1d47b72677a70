"""Run orchestration: what a run is, how it is hashed, and where it goes.

A runner turns a list of `RunSpec` into a list of `RunRecord` in the same
order. The ledger runner persists every outcome, runs independent specs
in a process pool, and with `resume` skips specs whose content hash is
already recorded as successful.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from rewirelab.data import NCDataset, STDataset
from rewirelab.ledger import (
    create_ledger,
    failed_seeds,
    read_hashes,
    read_record,
    record_run,
)
from rewirelab.models import (
    BackboneConfig,
    GraphParam,
    load_checkpoint,
    save_checkpoint,
)
from rewirelab.tasks import make_task
from rewirelab.trainers import RunRecord, TrainConfig, TrainMode, train

logger = logging.getLogger(__name__)

Dataset = STDataset | NCDataset
Runner = Callable[[Sequence["RunSpec"]], list[RunRecord]]


def dataset_hash(dataset: Dataset) -> str:
    """SHA-256 over the data, splits and graph of a dataset."""
    digest = hashlib.sha256()
    digest.update(dataset.graph.content_hash().encode())
    if isinstance(dataset, STDataset):
        digest.update(dataset.signal.tobytes())
        digest.update(
            json.dumps(
                [dataset.window, dataset.horizon, dataset.splits],
                sort_keys=True,
            ).encode()
        )
    else:
        digest.update(np.asarray(dataset.graph.features).tobytes())
        digest.update(np.asarray(dataset.graph.labels).tobytes())
        for part in dataset.split_nodes:
            digest.update(part.tobytes())
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class Setup:
    """Everything shared by the runs of one experiment."""

    dataset: Dataset
    backbone: BackboneConfig
    train: TrainConfig
    phi: GraphParam

    def spec(
        self,
        cell: str,
        arm: TrainMode,
        seed: int,
        /,
        phi: Optional[GraphParam] = None,
        dataset: Optional[Dataset] = None,
        **overrides: object,
    ) -> "RunSpec":
        """A run of this setup in one arm, with config overrides."""
        config = TrainConfig.model_validate(
            {
                **self.train.model_dump(),
                **overrides,
                "mode": arm,
                "seed": seed,
            }
        )
        return RunSpec(
            cell=cell,
            arm=arm.value,
            seed=seed,
            config=config,
            backbone=self.backbone,
            phi=self.phi if phi is None else phi,
            dataset=self.dataset if dataset is None else dataset,
        )

    def with_graph(self, dataset: Dataset, phi: GraphParam) -> "Setup":
        return replace(self, dataset=dataset, phi=phi)


@dataclass(frozen=True, eq=False)
class RunSpec:
    cell: str
    arm: str
    seed: int
    config: TrainConfig
    backbone: BackboneConfig
    phi: GraphParam
    dataset: Dataset
    content_hash: str = field(init=False)

    def __post_init__(self) -> None:
        digest = hashlib.sha256()
        digest.update(self.cell.encode())
        digest.update(self.arm.encode())
        digest.update(self.config.model_dump_json().encode())
        digest.update(self.backbone.model_dump_json().encode())
        digest.update(self.phi.kind.value.encode())
        digest.update(self.phi.a_init.tobytes())
        digest.update(self.phi.values.tobytes())
        digest.update(str(self.phi.sample_count).encode())
        digest.update(dataset_hash(self.dataset).encode())
        object.__setattr__(self, "content_hash", digest.hexdigest())

    @property
    def label(self) -> str:
        return f"{self.cell}__{self.arm}"


def execute(spec: RunSpec) -> RunRecord:
    """Train one spec; errors become a failed record instead of raising."""
    try:
        task = make_task(
            spec.dataset,
            spec.backbone,
            spec.config.batch_size,
            spec.config.val_batch_size,
        )
        return train(spec.config, spec.backbone, spec.phi, task)
    except Exception as e:
        logger.warning("Run %s seed %d raised: %s", spec.label, spec.seed, e)
        return RunRecord(
            config=spec.config, status="failed", failure_reason=str(e)
        )


def run_sequential(specs: Sequence[RunSpec]) -> list[RunRecord]:
    """Run specs one after another in this process."""
    return [execute(spec) for spec in specs]


class LedgerRunner:
    """Persisting, resumable runner for one experiment directory.

    Records are written to `<root>/seed_<s>/<cell>__<arm>.json` with a
    checkpoint next to them, and every outcome goes into
    `<root>/ledger.duckdb`.
    """

    def __init__(
        self,
        root: Path,
        experiment: str,
        jobs: int = 1,
        resume: bool = False,
    ) -> None:
        self.root = root
        self.experiment = experiment
        self.jobs = max(1, jobs)
        self.resume = resume
        self.ledger = root / "ledger.duckdb"
        self.trained = 0
        self.reused = 0
        self._seen: dict[str, RunRecord] = {}
        self.retried_seeds: list[int] = []

        root.mkdir(parents=True, exist_ok=True)
        if not self.ledger.exists():
            create_ledger(self.ledger)
        elif resume:
            self.retried_seeds = failed_seeds(self.ledger, experiment)
            if self.retried_seeds:
                logger.info(
                    "Seeds %s have failed runs in the ledger; retrying them",
                    self.retried_seeds,
                )

    def _paths(self, spec: RunSpec) -> tuple[Path, Path]:
        directory = self.root / f"seed_{spec.seed}"
        return (
            directory / f"{spec.label}.json",
            directory / f"{spec.label}.npz",
        )

    def _load(self, spec: RunSpec) -> Optional[RunRecord]:
        stored = read_record(self.ledger, spec.content_hash)
        if stored is None:
            return None
        record = RunRecord.model_validate_json(stored)
        _, checkpoint = self._paths(spec)
        if checkpoint.is_file():
            _, params, phi = load_checkpoint(checkpoint)
            record.params, record.phi = params, phi
        return record

    def _store(self, spec: RunSpec, record: RunRecord) -> None:
        record_path, checkpoint = self._paths(spec)
        record_path.parent.mkdir(parents=True, exist_ok=True)
        record_json = record.model_dump_json()
        record_path.write_text(record_json)
        if record.params is not None:
            save_checkpoint(
                checkpoint, spec.backbone, record.params, record.phi
            )
        record_run(
            self.ledger,
            spec.content_hash,
            self.experiment,
            spec.cell,
            spec.arm,
            spec.seed,
            success=record.status == "ok",
            error=record.failure_reason,
            record=record_json,
        )

    def __call__(self, specs: Sequence[RunSpec]) -> list[RunRecord]:
        records: dict[int, RunRecord] = {}
        pending: list[int] = []
        queued: set[str] = set()
        stored = (
            read_hashes(self.ledger, success=True) if self.resume else set()
        )
        for i, spec in enumerate(specs):
            cached = self._seen.get(spec.content_hash)
            if cached is None and spec.content_hash in stored:
                cached = self._load(spec)
            if cached is not None:
                records[i] = cached
                self.reused += 1
            elif spec.content_hash not in queued:
                queued.add(spec.content_hash)
                pending.append(i)

        logger.info(
            "%d runs to train, %d reused from the ledger",
            len(pending),
            len(specs) - len(pending),
        )
        todo = [specs[i] for i in pending]
        if self.jobs > 1 and len(todo) > 1:
            with Pool(min(self.jobs, len(todo))) as pool:
                results = pool.map(execute, todo)
        else:
            results = [execute(spec) for spec in todo]

        for i, record in zip(pending, results):
            self._store(specs[i], record)
            self._seen[specs[i].content_hash] = record
            self.trained += 1
        return [
            records[i] if i in records else self._seen[spec.content_hash]
            for i, spec in enumerate(specs)
        ]
