import tempfile
from pathlib import Path

import duckdb
import pytest

from rewirelab.ledger import (
    create_ledger,
    failed_seeds,
    read_hashes,
    read_record,
    record_run,
)


def test_create() -> None:
    """Test creating a new ledger."""
    with tempfile.TemporaryDirectory() as tmpdir:
        # Make sure we can create a new ledger
        db_path = Path(tmpdir) / "ledger.duckdb"
        assert not db_path.exists()

        create_ledger(db_path)

        assert db_path.is_file()
        with duckdb.connect(db_path) as connection:
            tables = connection.sql("SHOW TABLES").fetchall()
            assert tables == [("runs",)]

        # Make sure we can't overwrite an existing ledger
        with pytest.raises(FileExistsError):
            create_ledger(db_path)


def test_record_and_read() -> None:
    """Successful runs can be read back, failed ones cannot."""
    with tempfile.TemporaryDirectory() as tmpdir:
        db_path = Path(tmpdir) / "ledger.duckdb"
        create_ledger(db_path)

        record_run(db_path, "a", "exp", "main", "vanilla", 1, True, None, "{}")
        record_run(
            db_path, "b", "exp", "main", "bilevel", 2, False, "diverged"
        )

        assert read_record(db_path, "a") == "{}"
        assert read_record(db_path, "b") is None
        assert read_record(db_path, "missing") is None
        assert read_hashes(db_path) == {"a", "b"}
        assert read_hashes(db_path, success=True) == {"a"}
        assert read_hashes(db_path, success=False) == {"b"}


def test_retry_replaces_failure() -> None:
    """A retried run keeps only its latest outcome."""
    with tempfile.TemporaryDirectory() as tmpdir:
        db_path = Path(tmpdir) / "ledger.duckdb"
        create_ledger(db_path)

        record_run(db_path, "a", "exp", "main", "bilevel", 3, False, "nan")
        assert failed_seeds(db_path, "exp") == [3]

        record_run(
            db_path, "a", "exp", "main", "bilevel", 3, True, None, '{"x": 1}'
        )
        assert failed_seeds(db_path, "exp") == []
        assert read_record(db_path, "a") == '{"x": 1}'

        with duckdb.connect(db_path) as connection:
            count = connection.sql("SELECT COUNT(*) FROM runs").fetchone()
            assert count == (1,)


def test_failed_seeds() -> None:
    """Failed seeds are listed per experiment, in order."""
    with tempfile.TemporaryDirectory() as tmpdir:
        db_path = Path(tmpdir) / "ledger.duckdb"
        create_ledger(db_path)

        for content_hash, seed in [("a", 456), ("b", 42), ("c", 456)]:
            record_run(
                db_path, content_hash, "exp", "main", "bilevel", seed, False
            )
        record_run(db_path, "d", "other", "main", "bilevel", 7, False)

        assert failed_seeds(db_path, "exp") == [42, 456]
        assert failed_seeds(db_path, "other") == [7]


def test_missing_ledger() -> None:
    """Every reader refuses a missing file."""
    missing = Path("/nonexistent/ledger.duckdb")
    with pytest.raises(FileNotFoundError):
        read_hashes(missing)
    with pytest.raises(FileNotFoundError):
        read_record(missing, "a")
    with pytest.raises(FileNotFoundError):
        record_run(missing, "a", "exp", "main", "vanilla", 1, True)
    with pytest.raises(FileNotFoundError):
        failed_seeds(missing, "exp")
