from typing import Any

DEFAULT_SEEDS = [42, 123, 456, 789, 1024]


def _as_list(input: Any) -> list[Any]:
    if isinstance(input, str):
        return [part.strip() for part in input.split(",") if part.strip()]
    if isinstance(input, (list, tuple)):
        return list(input)
    return [input]


def seed_list(input: Any) -> list[int]:
    """Validate a seed list given as a YAML list or a comma separated string.

    Args:
        input (Any): The seeds, e.g. `[42, 123]` or `"42,123"`.

    Returns:
        list[int]: The seeds in their given order.

    Raises:
        ValueError: If the list is empty, has duplicates or non-integers.
    """
    if input is None:
        return list(DEFAULT_SEEDS)

    seeds = []
    for item in _as_list(input):
        if isinstance(item, bool):
            raise ValueError(f"Invalid seed: {item}")
        try:
            seeds.append(int(item))
        except (TypeError, ValueError):
            raise ValueError(f"Invalid seed: {item}") from None
        if isinstance(item, float) and item != int(item):
            raise ValueError(f"Invalid seed: {item}")

    if not seeds:
        raise ValueError("The seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"The seed list has duplicates: {seeds}")
    return seeds


def increasing_values(input: Any) -> list[float]:
    """Validate sweep axis values, which must be strictly increasing.

    Args:
        input (Any): A YAML list or a comma separated string of numbers.

    Returns:
        list[float]: The axis values.
    """
    try:
        values = [float(item) for item in _as_list(input)]
    except (TypeError, ValueError):
        raise ValueError(f"Invalid axis values: {input}") from None

    if not values:
        raise ValueError("The axis has no values")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"Axis values must be strictly increasing: {values}")
    return values


def increasing_counts(input: Any) -> list[int]:
    """Strictly increasing positive integers, e.g. inner step counts."""
    values = increasing_values(input)
    if any(v != int(v) or v < 1 for v in values):
        raise ValueError(f"Expected positive integers, got {values}")
    return [int(v) for v in values]


def fraction_values(input: Any) -> list[float]:
    """Strictly increasing values inside [0, 1], e.g. corruption rates."""
    values = increasing_values(input)
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError(f"Fractions must lie in [0, 1], got {values}")
    return values
