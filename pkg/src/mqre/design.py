"""Two-level dataset containers and fit-result records.

A :class:`GroupedDesign` is a list of per-cluster blocks plus a flattened
copy (unit rows sorted by cluster) that the solver kernels operate on with
segment reductions, so no n x n matrix is ever materialised.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .influence import InfluenceFamily

__all__ = ["ClusterBlock", "GroupedDesign", "VarianceComponents", "FitResult"]


@dataclass
class ClusterBlock:
    """One cluster: covariates, responses and both levels of weights."""

    X: np.ndarray
    y: np.ndarray
    w1: np.ndarray
    w2: float = 1.0
    id: object = None

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.w1 = np.asarray(self.w1, dtype=float).ravel()
        n = self.y.size
        if n < 1:
            raise ValueError(f"cluster {self.id!r}: empty cluster")
        if self.X.shape[0] != n:
            raise ValueError(
                f"cluster {self.id!r}: X has {self.X.shape[0]} rows, y has {n}"
            )
        if self.w1.size != n:
            raise ValueError(f"cluster {self.id!r}: w1 length {self.w1.size} != {n}")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ValueError(f"cluster {self.id!r}: non-finite data")
        if not np.all(np.isfinite(self.w1)) or np.any(self.w1 <= 0.0):
            raise ValueError(f"cluster {self.id!r}: unit weights must be finite and > 0")
        if not np.isfinite(self.w2) or self.w2 < 0.0:
            raise ValueError(f"cluster {self.id!r}: cluster weight must be finite and >= 0")
        self.w2 = float(self.w2)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass
class GroupedDesign:
    """Two-level dataset: per-cluster blocks plus flat solver arrays."""

    clusters: list[ClusterBlock]
    # flattened views, filled in __post_init__
    X: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    w1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)
    starts: np.ndarray = field(init=False, repr=False)
    cluster_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.clusters) < 2:
            raise ValueError("a grouped design needs at least 2 clusters")
        p = self.clusters[0].X.shape[1]
        for blk in self.clusters:
            if blk.X.shape[1] != p:
                raise ValueError(
                    f"cluster {blk.id!r}: {blk.X.shape[1]} columns, expected {p}"
                )
        sizes = np.array([blk.n for blk in self.clusters], dtype=np.intp)
        self.X = np.concatenate([blk.X for blk in self.clusters], axis=0)
        self.y = np.concatenate([blk.y for blk in self.clusters])
        self.w1 = np.concatenate([blk.w1 for blk in self.clusters])
        self.w2 = np.array([blk.w2 for blk in self.clusters], dtype=float)
        self.starts = np.concatenate(([0], np.cumsum(sizes)))
        self.cluster_index = np.repeat(np.arange(len(self.clusters)), sizes)

    @property
    def m(self) -> int:
        return len(self.clusters)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.diff(self.starts)

    @property
    def ids(self) -> list:
        return [blk.id for blk in self.clusters]

    @classmethod
    def from_arrays(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        cluster_ids: Sequence,
        w1: Optional[np.ndarray] = None,
        w2: Optional[dict] = None,
    ) -> "GroupedDesign":
        """Build from flat arrays; clusters keep first-appearance order.

        ``w2`` maps cluster id to the cluster weight (default 1 for all).
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        n = y.size
        w1 = np.ones(n) if w1 is None else np.asarray(w1, dtype=float).ravel()
        ids = list(cluster_ids)
        if len(ids) != n:
            raise ValueError("cluster_ids length does not match y")
        order: dict = {}
        for cid in ids:
            if cid not in order:
                order[cid] = len(order)
        blocks = []
        idx = np.arange(n)
        labels = np.array([order[c] for c in ids])
        for cid, k in order.items():
            rows = idx[labels == k]
            blocks.append(
                ClusterBlock(
                    X=X[rows],
                    y=y[rows],
                    w1=w1[rows],
                    w2=1.0 if w2 is None else float(w2[cid]),
                    id=cid,
                )
            )
        return cls(blocks)

    def with_unit_weights(self) -> "GroupedDesign":
        """Copy of the design with every weight (both levels) set to 1."""
        return GroupedDesign(
            [
                ClusterBlock(X=blk.X, y=blk.y, w1=np.ones(blk.n), w2=1.0, id=blk.id)
                for blk in self.clusters
            ]
        )

    def with_weights(self, w1: np.ndarray, w2: np.ndarray) -> "GroupedDesign":
        """Copy with replacement flat unit weights and per-cluster weights."""
        w1 = np.asarray(w1, dtype=float).ravel()
        w2 = np.asarray(w2, dtype=float).ravel()
        if w1.size != self.n or w2.size != self.m:
            raise ValueError("replacement weights have wrong length")
        return GroupedDesign(
            [
                ClusterBlock(
                    X=blk.X,
                    y=blk.y,
                    w1=w1[self.starts[j] : self.starts[j + 1]],
                    w2=w2[j],
                    id=blk.id,
                )
                for j, blk in enumerate(self.clusters)
            ]
        )


@dataclass(frozen=True)
class VarianceComponents:
    """Quantile-specific between-cluster and residual variances."""

    sigma2_gamma: float
    sigma2_eps: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.sigma2_gamma) or self.sigma2_gamma < 0.0:
            raise ValueError(f"sigma2_gamma must be >= 0, got {self.sigma2_gamma!r}")
        if not np.isfinite(self.sigma2_eps) or self.sigma2_eps <= 0.0:
            raise ValueError(f"sigma2_eps must be > 0, got {self.sigma2_eps!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2_gamma, self.sigma2_eps])


@dataclass
class FitResult:
    """Point estimates, variance components, sandwich inference, diagnostics."""

    beta: np.ndarray
    varcomp: VarianceComponents
    q: float
    c: float
    family: InfluenceFamily
    iterations: int
    converged: bool
    score_norm: float
    cov_beta: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    p_value: Optional[np.ndarray] = None
    inference_error: Optional[str] = None
    message: str = ""

    @property
    def theta(self) -> np.ndarray:
        """Stacked parameter vector (beta, sigma2_gamma, sigma2_eps)."""
        return np.concatenate([self.beta, self.varcomp.as_array()])
