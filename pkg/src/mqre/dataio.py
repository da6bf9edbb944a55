"""Delimited-text ingestion and export of grouped designs.

Input files are comma-separated with a header row, UTF-8, '.' decimal
separator. Rows with missing values in any mapped column are dropped
(with a count); all other malformed content raises :class:`InputError`
with row or cluster context. Floats are written with ``repr`` so a
written design re-reads bit-identically.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .design import GroupedDesign
from .exceptions import InputError

__all__ = ["DatasetSchema", "read_dataset", "write_design_csv"]

MISSING_TOKENS = {"", "NA", "NaN", "nan", "na"}


@dataclass(frozen=True)
class DatasetSchema:
    """Column mapping for a two-level dataset file."""

    response: str
    covariates: tuple[str, ...]
    cluster: str
    unit_weight: Optional[str] = None
    cluster_weight: Optional[str] = None

    @property
    def coefficient_names(self) -> list[str]:
        return ["intercept", *self.covariates]


def _parse_float(token: str, row: int, column: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise InputError(
            f"row {row}: column {column!r} has non-numeric value {token!r}"
        ) from None


def read_dataset(path, schema: DatasetSchema) -> tuple[GroupedDesign, int]:
    """Read a CSV file into a grouped design (intercept column prepended).

    Returns the design and the number of dropped incomplete rows.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        needed = [schema.response, *schema.covariates, schema.cluster]
        if schema.unit_weight:
            needed.append(schema.unit_weight)
        if schema.cluster_weight:
            needed.append(schema.cluster_weight)
        missing = [c for c in needed if c not in header]
        if missing:
            raise InputError(
                f"{path}: missing column(s) {missing!r}; header has {header!r}"
            )
        col = {name: header.index(name) for name in needed}

        ys, covs, cids, w1s, w2s = [], [], [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not tok.strip() for tok in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"row {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            tokens = {name: row[idx].strip() for name, idx in col.items()}
            if any(tokens[name] in MISSING_TOKENS for name in tokens):
                dropped += 1
                continue
            ys.append(_parse_float(tokens[schema.response], lineno, schema.response))
            covs.append(
                [_parse_float(tokens[c], lineno, c) for c in schema.covariates]
            )
            cids.append(tokens[schema.cluster])
            w1s.append(
                _parse_float(tokens[schema.unit_weight], lineno, schema.unit_weight)
                if schema.unit_weight
                else 1.0
            )
            w2s.append(
                _parse_float(tokens[schema.cluster_weight], lineno, schema.cluster_weight)
                if schema.cluster_weight
                else 1.0
            )

    if not ys:
        raise InputError(f"{path}: no usable rows after dropping incomplete ones")

    w2_by_cluster: dict[str, float] = {}
    for cid, w2 in zip(cids, w2s):
        if cid not in w2_by_cluster:
            w2_by_cluster[cid] = w2
        elif w2_by_cluster[cid] != w2:
            raise InputError(
                f"cluster {cid!r}: level-2 weight is not constant within the cluster "
                f"({w2_by_cluster[cid]!r} vs {w2!r})"
            )

    X = np.column_stack([np.ones(len(ys)), np.asarray(covs, dtype=float)])
    try:
        design = GroupedDesign.from_arrays(
            X=X,
            y=np.asarray(ys),
            cluster_ids=cids,
            w1=np.asarray(w1s),
            w2=w2_by_cluster,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return design, dropped


def write_design_csv(design: GroupedDesign, path, schema: DatasetSchema) -> None:
    """Write a grouped design to CSV under the given column names.

    Expects the design's leading column to be the intercept; only the
    named covariate columns are written. Floats use ``repr`` and re-read
    exactly.
    """
    if not np.all(design.X[:, 0] == 1.0):
        raise ValueError("first design column must be the intercept")
    if design.p != 1 + len(schema.covariates):
        raise ValueError(
            f"design has {design.p - 1} covariates, schema names {len(schema.covariates)}"
        )
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        header = [schema.cluster, schema.response, *schema.covariates]
        if schema.unit_weight:
            header.append(schema.unit_weight)
        if schema.cluster_weight:
            header.append(schema.cluster_weight)
        writer.writerow(header)
        for j, blk in enumerate(design.clusters):
            for i in range(blk.n):
                row = [str(blk.id), repr(float(blk.y[i]))]
                row.extend(repr(float(v)) for v in blk.X[i, 1:])
                if schema.unit_weight:
                    row.append(repr(float(blk.w1[i])))
                if schema.cluster_weight:
                    row.append(repr(float(blk.w2)))
                writer.writerow(row)
