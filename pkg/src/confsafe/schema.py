"""Column schemas of the tables written by experiments."""
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Text, Union

import numpy as np
import pandas as pd

ColumnType = Union[Any, Sequence[Any], Callable[[pd.Series], pd.Series]]


@dataclass(frozen=True)
class TableSchema:
    """Expected columns of a table.

    Each column maps either to a dtype, a sequence of acceptable dtypes (the first one
    being the target when converting), or a callable normalizing the column.
    """

    name: Text
    columns: Mapping[Text, ColumnType]
    required: Sequence[Text] = ()
    index_name: Optional[Text] = None
    prefixes: Sequence[Text] = field(default_factory=tuple)
    """Variable-width column families, e.g. ``x_`` for ``x_0, x_1, ...``."""


def _branch(column: pd.Series) -> pd.Series:
    known = {"nominal", "filtered", "fallback", "backup", "unfiltered"}
    values = column.astype(str)
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"Unknown filter branch(es) {', '.join(sorted(unknown))}")
    return values


METRICS = TableSchema(
    "metrics",
    columns={
        "episode": np.int64,
        "seed": np.int64,
        "filtered": np.bool_,
        "return": np.float64,
        "cost": np.float64,
        "violations": np.int64,
        "interventions": np.int64,
        "fallbacks": np.int64,
        "backups": np.int64,
        "mean_distance": np.float64,
        "max_distance": np.float64,
        "steps": np.int64,
    },
    required=("episode", "seed", "return", "cost", "violations", "interventions"),
)
"""One row per episode."""

STEPS = TableSchema(
    "steps",
    columns={
        "episode": np.int64,
        "k": np.int64,
        "branch": _branch,
        "value": np.float64,
        "worst_case": np.float64,
        "distance": np.float64,
        "backup_feasible": (np.bool_, np.object_),
    },
    required=("k", "branch", "worst_case", "distance"),
    prefixes=("x_", "u_nominal_", "u_"),
)
"""Per-step filter diagnostics."""

TRANSITIONS = TableSchema(
    "transitions", columns={}, required=(), prefixes=("x_", "u_", "xp_")
)
"""Replay buffer content."""

SUMMARY = TableSchema(
    "summary",
    columns={
        "run": np.object_,
        "episodes": np.int64,
        "mean_return": np.float64,
        "mean_cost": np.float64,
        "total_violations": np.int64,
        "total_interventions": np.int64,
    },
    required=("run", "mean_return", "mean_cost", "total_violations"),
)
"""Summary of several runs, one row per run."""


def follows_schema(
    dataframe: pd.DataFrame, schema: TableSchema, raise_exception: bool = False
) -> bool:
    """Whether a table has the schema's required columns with acceptable types."""
    missing = [u for u in schema.required if u not in dataframe.columns]
    missing += [
        u
        for u in schema.prefixes
        if not any(c.startswith(u) for c in dataframe.columns)
    ]
    if missing and raise_exception:
        raise ValueError(f"Missing column(s) {', '.join(missing)} in {schema.name}")
    elif missing:
        return False
    for column, dtypes in schema.columns.items():
        if column not in dataframe.columns:
            continue
        if callable(dtypes) and not isinstance(dtypes, type):
            try:
                correct = bool((dtypes(dataframe[column]) == dataframe[column]).all())
            except ValueError:
                if raise_exception:
                    raise
                correct = False
        else:
            acceptable = dtypes if isinstance(dtypes, Sequence) else [dtypes]
            correct = dataframe[column].dtype in [np.dtype(u) for u in acceptable]
        if not correct and raise_exception:
            raise ValueError(f"Incorrect values or dtype in column {column}")
        elif not correct:
            return False
    if schema.index_name is not None and dataframe.index.name != schema.index_name:
        if raise_exception:
            raise ValueError(
                f"Index name is {dataframe.index.name} rather than {schema.index_name}"
            )
        return False
    return True


def to_schema(
    schema: TableSchema, data: pd.DataFrame, reorder: bool = True
) -> pd.DataFrame:
    """Converts columns to the schema's types, raising on missing required columns."""
    dataframe = data.copy(deep=False)
    for column in schema.required:
        if column not in dataframe.columns and column != schema.index_name:
            raise ValueError(f"Missing column {column} in {schema.name}")
    for column, dtypes in schema.columns.items():
        if column not in dataframe.columns:
            continue
        if callable(dtypes) and not isinstance(dtypes, type):
            dataframe[column] = dtypes(dataframe[column])
            continue
        acceptable = dtypes if isinstance(dtypes, Sequence) else [dtypes]
        if dataframe[column].dtype not in [np.dtype(u) for u in acceptable]:
            dataframe[column] = dataframe[column].astype(acceptable[0])
    if schema.index_name is not None and schema.index_name in dataframe.columns:
        dataframe = dataframe.set_index(schema.index_name)
    elif schema.index_name is not None:
        dataframe.index.name = schema.index_name
    if reorder:
        known = [u for u in schema.columns if u in dataframe.columns]
        dataframe = dataframe[known + [u for u in dataframe.columns if u not in known]]
    return dataframe


def prefixed_columns(dataframe: pd.DataFrame, prefix: Text) -> Sequence[Text]:
    """Columns ``prefix0, prefix1, ...`` in numerical order."""
    columns = [
        c
        for c in dataframe.columns
        if c.startswith(prefix) and c[len(prefix) :].isdigit()
    ]
    return sorted(columns, key=lambda c: int(c[len(prefix):]))
