import logging
from pathlib import Path
from typing import Optional

import duckdb

logger = logging.getLogger(__name__)

# One row per training run. The content hash covers everything that
# determines the run's outcome, so a matching successful row means the
# run can be skipped and its record reused.
RUNS_SQL = """
CREATE TABLE runs (
    content_hash VARCHAR PRIMARY KEY,
    experiment VARCHAR NOT NULL,
    cell VARCHAR NOT NULL,
    arm VARCHAR NOT NULL,
    seed BIGINT NOT NULL,
    success BOOLEAN NOT NULL,
    error VARCHAR,
    record VARCHAR
)
"""


def create_ledger(db: Path) -> None:
    """Create a new run ledger at the specified path.

    Args:
        db (Path): The path to the database file.

    Raises:
        FileExistsError: If the database file already exists.
    """
    if db.exists():
        raise FileExistsError(f"Ledger already exists at {db}")

    with duckdb.connect(db) as connection:
        connection.sql(RUNS_SQL)
    logger.info("Created run ledger %s", db)


def read_hashes(db: Path, success: Optional[bool] = None) -> set[str]:
    """Content hashes of the runs recorded so far."""
    if not db.is_file():
        raise FileNotFoundError(f"Ledger does not exist at {db}")

    sql = "SELECT content_hash FROM runs "
    if success is True:
        sql += "WHERE success"
    elif success is False:
        sql += "WHERE NOT success"

    with duckdb.connect(db) as connection:
        result = connection.sql(sql).fetchall()
        return {row[0] for row in result}


def read_record(db: Path, content_hash: str) -> Optional[str]:
    """The serialized record of a successful run, if there is one.

    Args:
        db (Path): The path to the database file.
        content_hash (str): Hash of the run.

    Returns:
        Optional[str]: The record JSON, or None if the run is unknown or
            failed.
    """
    if not db.is_file():
        raise FileNotFoundError(f"Ledger does not exist at {db}")

    with duckdb.connect(db) as connection:
        row = connection.execute(
            "SELECT record FROM runs WHERE content_hash = ? AND success",
            (content_hash,),
        ).fetchone()
        return row[0] if row else None


def record_run(
    db: Path,
    content_hash: str,
    experiment: str,
    cell: str,
    arm: str,
    seed: int,
    success: bool,
    error: Optional[str] = None,
    record: Optional[str] = None,
) -> None:
    """Insert or replace the ledger row of a run.

    A failed run is replaced when it is retried, so the ledger always holds
    the latest outcome.
    """
    if not db.is_file():
        raise FileNotFoundError(f"Ledger does not exist at {db}")

    with duckdb.connect(db) as connection:
        connection.execute(
            """
            INSERT OR REPLACE INTO runs
                (content_hash, experiment, cell, arm, seed, success, error,
                 record)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                content_hash,
                experiment,
                cell,
                arm,
                seed,
                success,
                error,
                record,
            ),
        )
    if not success:
        logger.warning("Run %s/%s seed %d failed: %s", cell, arm, seed, error)


def failed_seeds(db: Path, experiment: str) -> list[int]:
    """Seeds with at least one failed run in an experiment."""
    if not db.is_file():
        raise FileNotFoundError(f"Ledger does not exist at {db}")

    with duckdb.connect(db) as connection:
        result = connection.execute(
            """
            SELECT DISTINCT seed
              FROM runs
             WHERE experiment = ? AND NOT success
             ORDER BY seed
            """,
            (experiment,),
        ).fetchall()
        return [row[0] for row in result]
