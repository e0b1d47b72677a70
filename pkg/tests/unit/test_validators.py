import pytest

from rewirelab.validators import (
    DEFAULT_SEEDS,
    fraction_values,
    increasing_counts,
    increasing_values,
    seed_list,
)


def test_seed_list() -> None:
    """Test seed_list function."""
    assert seed_list([42, 123]) == [42, 123]
    assert seed_list("42, 123,456") == [42, 123, 456]
    assert seed_list(7) == [7]
    assert seed_list(None) == DEFAULT_SEEDS
    assert seed_list([3.0]) == [3]
    with pytest.raises(ValueError, match="duplicates"):
        seed_list("1,1")
    with pytest.raises(ValueError, match="empty"):
        seed_list("")
    with pytest.raises(ValueError):
        seed_list("1,a")
    with pytest.raises(ValueError):
        seed_list([1.5])
    with pytest.raises(ValueError):
        seed_list([True])


def test_increasing_values() -> None:
    """Test increasing_values function."""
    assert increasing_values("0.1,0.5") == [0.1, 0.5]
    assert increasing_values([1, 2.5]) == [1.0, 2.5]
    with pytest.raises(ValueError, match="increasing"):
        increasing_values([1.0, 1.0])
    with pytest.raises(ValueError):
        increasing_values([])
    with pytest.raises(ValueError):
        increasing_values("x")


def test_increasing_counts() -> None:
    """Test increasing_counts function."""
    assert increasing_counts("1,5,10") == [1, 5, 10]
    with pytest.raises(ValueError):
        increasing_counts([0, 1])
    with pytest.raises(ValueError):
        increasing_counts([1, 2.5])


def test_fraction_values() -> None:
    """Test fraction_values function."""
    assert fraction_values([0.0, 0.25, 1.0]) == [0.0, 0.25, 1.0]
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        fraction_values([0.5, 1.5])
