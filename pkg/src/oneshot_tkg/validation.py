"""Input checks for the estimator API and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .core import Quadruple
from .errors import ConfigError, UnknownSymbol


def _int_rows(X, width: int, what: str) -> np.ndarray:
    if isinstance(X, Quadruple):
        X = [X]
    arr = check_array(X, dtype=None, ensure_2d=True, ensure_min_samples=1)
    if arr.shape[1] != width:
        raise ConfigError(f"{what} must have {width} columns, got {arr.shape[1]}")
    if not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise ConfigError(f"{what} must hold integer ids")
        arr = as_int
    return arr.astype(np.int64)


def check_ids(values, upper: int, kind: str) -> None:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= upper):
        bad = values[(values < 0) | (values >= upper)][0]
        raise UnknownSymbol(f"{kind} id {int(bad)} outside [0, {upper})")


def check_quads(X, n_entities: int | None = None, n_relations: int | None = None) -> list[Quadruple]:
    """Rows (s, r, o, t) as Quadruples; ids are range-checked when bounds are given."""
    arr = _int_rows(X, 4, "quadruples")
    if n_entities is not None:
        check_ids(arr[:, [0, 2]], n_entities, "entity")
    if n_relations is not None:
        check_ids(arr[:, 1], n_relations, "relation")
    return [Quadruple(*map(int, row)) for row in arr]


def check_entity_times(X, n_entities: int | None = None) -> np.ndarray:
    """Rows (entity, time) as an (n, 2) int64 array."""
    arr = _int_rows(X, 2, "(entity, time) rows")
    if n_entities is not None:
        check_ids(arr[:, 0], n_entities, "entity")
    return arr


def check_support(support, n_entities: int | None = None,
                  n_relations: int | None = None) -> Quadruple:
    quads = check_quads([tuple(support)], n_entities, n_relations)
    return quads[0]


def check_positive(name: str, value, minimum=1):
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value
