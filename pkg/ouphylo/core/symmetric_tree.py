"""Symmetric trees and the closed-form spectrum of their OU correlation.

A symmetric tree with m levels has a single node at level 1 (the root).
Every node at level k has age u_k and d_k children; the children of the
level-m nodes are the tips. Tip columns follow C order of an array of
shape (d_1, ..., d_m), so block operations are plain reshapes.
"""
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..utils.exceptions import InputError, ModelError, TreeValidationError
from .tree_objects import Tree


@dataclass(frozen=True)
class SymmetricTreeSpec:
    degrees: Tuple[int, ...]
    ages: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        object.__setattr__(self, "ages", tuple(float(u) for u in self.ages))
        if not self.degrees:
            raise TreeValidationError("A symmetric tree needs at least one level")
        if len(self.degrees) != len(self.ages):
            raise TreeValidationError(
                f"{len(self.degrees)} degrees given for {len(self.ages)} ages"
            )
        if any(d < 2 for d in self.degrees):
            raise TreeValidationError(f"Every degree must be at least 2: {self.degrees}")
        if not self.ages[-1] > 0:
            raise TreeValidationError("The youngest level must have a positive age")
        if any(older <= younger for older, younger in zip(self.ages, self.ages[1:])):
            raise TreeValidationError(f"Ages must be strictly decreasing: {self.ages}")

    @property
    def m(self) -> int:
        return len(self.degrees)

    @property
    def n_tips(self) -> int:
        return int(np.prod(self.degrees))

    @property
    def n_tilde(self) -> int:
        """Number of level-m nodes."""
        return self.n_tips // self.degrees[-1]

    @property
    def height(self) -> float:
        return self.ages[0]

    @property
    def tip_branch(self) -> float:
        return self.ages[-1]

    @property
    def branch_lengths(self) -> Tuple[float, ...]:
        """Length of the edges below each level."""
        below = self.ages[1:] + (0.0,)
        return tuple(older - younger for older, younger in zip(self.ages, below))

    @cached_property
    def multiplicities(self) -> Tuple[int, ...]:
        counts = [1]
        nodes_above = 1
        for degree in self.degrees:
            counts.append(nodes_above * (degree - 1))
            nodes_above *= degree
        return tuple(counts)

    def to_dict(self) -> dict:
        return {"m": self.m, "degrees": list(self.degrees), "ages": list(self.ages)}

    @classmethod
    def from_dict(cls, record: dict) -> "SymmetricTreeSpec":
        try:
            spec = cls(tuple(record["degrees"]), tuple(record["ages"]))
        except KeyError as error:
            raise InputError(f"Symmetric tree spec is missing '{error.args[0]}'") from None
        if "m" in record and int(record["m"]) != spec.m:
            raise InputError(f"Spec says m={record['m']} but lists {spec.m} levels")
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SymmetricTreeSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SymmetricTreeSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class DenseTipFamily:
    """Nested symmetric trees of constant degree d with ages q^k + t0."""

    d: int
    q: float
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ModelError(f"Degree must be at least 2, got {self.d}")
        if not 0 < self.q < 1:
            raise ModelError(f"q must lie in (0, 1), got {self.q}")
        if self.t0 < 0:
            raise ModelError(f"t0 must be nonnegative, got {self.t0}")

    @property
    def dq2(self) -> float:
        """Below 1 the ages accumulate too slowly to identify gamma and alpha apart."""
        return self.d * self.q ** 2

    def spec(self, m: int) -> SymmetricTreeSpec:
        return SymmetricTreeSpec(
            (self.d,) * m, tuple(self.q ** k + self.t0 for k in range(1, m + 1))
        )

    def to_dict(self) -> dict:
        return {"d": self.d, "q": self.q, "t0": self.t0}

    @classmethod
    def from_dict(cls, record: dict) -> "DenseTipFamily":
        try:
            return cls(int(record["d"]), float(record["q"]), float(record.get("t0", 0.0)))
        except KeyError as error:
            raise InputError(f"Dense-tip family is missing '{error.args[0]}'") from None


def build_symmetric_tree(spec: SymmetricTreeSpec, prefix: str = "t") -> Tree:
    """Tree with tips labelled t1..tn in C order of the (d_1, ..., d_m) grid."""
    parents: List[int] = []
    lengths: List[float] = []
    labels: List[Optional[str]] = []
    ages = spec.ages + (0.0,)
    tip_count = 0
    pending = [(1, -1)]
    while pending:
        level, parent = pending.pop()
        node = len(parents)
        parents.append(parent)
        lengths.append(ages[level - 2] - ages[level - 1] if parent >= 0 else 0.0)
        if level > spec.m:
            tip_count += 1
            labels.append(f"{prefix}{tip_count}")
            continue
        labels.append(None)
        pending.extend([(level + 1, node)] * spec.degrees[level - 1])
    return Tree(parents, lengths, labels)


def _level_gaps(ages: Sequence[float], alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """E_{i+1} - E_i for i = 0..m and their alpha derivatives.

    E_i = exp(-2 alpha u_i) with E_0 = 0 and E_{m+1} = 1."""
    ages = np.asarray(ages, dtype=float)
    younger = np.concatenate([ages[1:], [0.0]])
    upper = np.exp(-2.0 * alpha * younger)
    steps = upper * -np.expm1(-2.0 * alpha * (ages - younger))
    gaps = np.concatenate([[np.exp(-2.0 * alpha * ages[0])], steps])
    exps = np.exp(-2.0 * alpha * ages)
    slopes = np.concatenate([[0.0], -2.0 * ages * exps, [0.0]])
    return gaps, slopes[1:] - slopes[:-1]


def _inverse_degrees(degrees: Sequence[Optional[int]]) -> np.ndarray:
    return np.array([0.0 if d is None else 1.0 / d for d in degrees])


def _scaled_lambdas(
    spec_ages: Sequence[float], degrees: Sequence[Optional[int]], alpha: float
) -> Tuple[np.ndarray, np.ndarray]:
    """lambda_k / (d_{k+1} ... d_m) and its alpha derivative for k = 1..m.

    Degrees given as None are taken to infinity, which zeroes every
    term reaching past them."""
    m = len(spec_ages)
    gaps, gap_slopes = _level_gaps(spec_ages, alpha)
    gaps, gap_slopes = gaps[1:], gap_slopes[1:]
    inverse = _inverse_degrees(degrees)
    values = np.zeros(m)
    derivatives = np.zeros(m)
    for k in range(m):
        weight = 1.0
        for i in range(k, m):
            if i > k:
                weight *= inverse[i]
            values[k] += weight * gaps[i]
            derivatives[k] += weight * gap_slopes[i]
    return values, derivatives


@dataclass(frozen=True)
class EigenSystem:
    """Distinct eigenvalues lambda_0 > ... > lambda_m of the correlation matrix."""

    values: Tuple[float, ...]
    multiplicities: Tuple[int, ...]
    alpha: float

    def expanded(self) -> np.ndarray:
        """Every eigenvalue repeated by multiplicity, in increasing order."""
        return np.sort(np.repeat(self.values, self.multiplicities))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k": range(len(self.values)),
                "eigenvalue": self.values,
                "multiplicity": self.multiplicities,
            }
        )


def eigensystem(spec: SymmetricTreeSpec, alpha: float) -> EigenSystem:
    if not alpha > 0:
        raise ModelError(f"The eigensystem needs alpha > 0, got {alpha}")
    return EigenSystem(
        values=tuple(float(v) for v in lambdas(spec, alpha)[0]),
        multiplicities=spec.multiplicities,
        alpha=alpha,
    )


def lambdas(spec: SymmetricTreeSpec, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """lambda_0..lambda_m and their alpha derivatives."""
    gaps, gap_slopes = _level_gaps(spec.ages, alpha)
    m = spec.m
    # below[i] = d_{i+1} ... d_m
    below = np.ones(m + 1)
    for i in range(m - 1, -1, -1):
        below[i] = below[i + 1] * spec.degrees[i]
    terms = below * gaps
    term_slopes = below * gap_slopes
    values = np.cumsum(terms[::-1])[::-1]
    derivatives = np.cumsum(term_slopes[::-1])[::-1]
    return values, derivatives


def lambda_derivatives(spec: SymmetricTreeSpec, alpha: float) -> np.ndarray:
    """d lambda_k / d alpha for k = 0..m."""
    return lambdas(spec, alpha)[1]


def log_lambda_slopes(spec: SymmetricTreeSpec, alpha: float) -> np.ndarray:
    """Lambda_k = lambda_k' / lambda_k for k = 1..m."""
    values, derivatives = lambdas(spec, alpha)
    return derivatives[1:] / values[1:]


def nu_from_gamma(spec: SymmetricTreeSpec, gamma: float, alpha: float) -> float:
    """Smallest covariance eigenvalue gamma * lambda_m."""
    return gamma * -np.expm1(-2.0 * alpha * spec.tip_branch)


def gamma_from_nu(spec: SymmetricTreeSpec, nu: float, alpha: float) -> float:
    return nu / -np.expm1(-2.0 * alpha * spec.tip_branch)


@dataclass(frozen=True)
class FisherInfo:
    """REML information for (nu, alpha) on a symmetric tree."""

    matrix: np.ndarray
    det: float
    Lambda: Tuple[float, ...]
    q: Tuple[float, ...]
    n_tips: int
    n_tilde: int

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @property
    def finite_nu_variance(self) -> float:
        """n times the inverse information for nu."""
        return self.n_tips * float(self.inverse[0, 0])

    @property
    def finite_alpha_variance(self) -> float:
        """n_tilde times the inverse information for alpha."""
        return self.n_tilde * float(self.inverse[1, 1])

    @property
    def correlation(self) -> float:
        inverse = self.inverse
        return float(inverse[0, 1] / np.sqrt(inverse[0, 0] * inverse[1, 1]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "k": range(1, len(self.Lambda) + 1),
                "Lambda": self.Lambda,
                "q": self.q,
            }
        )


def fisher_info(spec: SymmetricTreeSpec, nu: float, alpha: float) -> FisherInfo:
    if spec.m < 2:
        raise ModelError("alpha is not identifiable by REML on a single-level tree")
    if not alpha > 0 or not nu > 0:
        raise ModelError(f"Fisher information needs nu > 0 and alpha > 0, got {nu}, {alpha}")
    slopes = log_lambda_slopes(spec, alpha)
    gaps = slopes - slopes[-1]
    weights = np.asarray(spec.multiplicities[1:], dtype=float)
    n_free = spec.n_tips - 1
    cross = float(np.sum(weights * gaps)) / (2.0 * nu)
    matrix = np.array(
        [
            [n_free / (2.0 * nu ** 2), cross],
            [cross, float(np.sum(weights * gaps ** 2)) / 2.0],
        ]
    )
    q = weights / n_free
    spread = float(np.sum(q * gaps ** 2) - np.sum(q * gaps) ** 2)
    return FisherInfo(
        matrix=matrix,
        det=n_free ** 2 / (4.0 * nu ** 2) * spread,
        Lambda=tuple(float(x) for x in slopes),
        q=tuple(float(x) for x in q),
        n_tips=spec.n_tips,
        n_tilde=spec.n_tilde,
    )


@dataclass(frozen=True)
class GrowthPattern:
    """Symmetric-tree family in which the degrees marked None diverge."""

    degrees: Tuple[Optional[int], ...]
    ages: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.degrees) != len(self.ages):
            raise ModelError("A growth pattern needs one degree per age")
        if len(self.degrees) < 2:
            raise ModelError("A growth pattern needs at least two levels")
        if any(d is not None and d < 2 for d in self.degrees):
            raise ModelError(f"Fixed degrees must be at least 2: {self.degrees}")
        if all(d is not None for d in self.degrees[:-1]):
            raise ModelError("Some degree above the last level must diverge")

    @property
    def s(self) -> int:
        """Largest diverging level below m, counted from 1."""
        return max(k for k, d in enumerate(self.degrees[:-1], start=1) if d is None)

    def age_frequencies(self) -> np.ndarray:
        """Limits p_k of (number of level-k eigenvalues) / n_tilde, k = 1..m-1."""
        inverse = _inverse_degrees(self.degrees)
        m = len(self.degrees)
        p = np.zeros(m - 1)
        for k in range(m - 1):
            p[k] = (1.0 - inverse[k]) * np.prod(inverse[k + 1 : m - 1])
        return p


def v_alpha_limit(pattern: GrowthPattern, alpha: float) -> float:
    """Limiting variance of sqrt(n_tilde) (alpha_hat - alpha) under REML."""
    if not alpha > 0:
        raise ModelError(f"v_alpha needs alpha > 0, got {alpha}")
    values, derivatives = _scaled_lambdas(pattern.ages, pattern.degrees, alpha)
    slopes = derivatives / values
    gaps = slopes[:-1] - slopes[-1]
    p = pattern.age_frequencies()
    spread = float(np.sum(p * gaps ** 2))
    last = pattern.degrees[-1]
    if last is not None:
        spread -= float(np.sum(p * gaps)) ** 2 / last
    if not spread > 0:
        raise ModelError("Degenerate growth pattern: the level slopes do not separate")
    return 2.0 / spread


def nu_limit_variance(nu: float) -> float:
    """Limiting variance of sqrt(n) (nu_hat - nu) under REML."""
    return 2.0 * nu ** 2


def level_sums_of_squares(spec: SymmetricTreeSpec, data: np.ndarray) -> np.ndarray:
    """Squared norms S_0..S_m of the data projected on each eigenspace.

    Data has tips on its last axis in tip-label order of
    build_symmetric_tree; leading axes are kept."""
    data = np.asarray(data, dtype=float)
    if data.shape[-1] != spec.n_tips:
        raise InputError(f"Expected {spec.n_tips} tip values, got shape {data.shape}")
    lead = data.shape[:-1]
    grid = data.reshape(lead + spec.degrees)
    offset = len(lead)
    m = spec.m
    # means[k] are the block means below level-(k + 1) nodes, k = 0..m
    means = [
        grid.mean(axis=tuple(range(offset + k, offset + m)), keepdims=True) for k in range(m)
    ]
    means.append(grid)
    block_sizes = np.cumprod((1,) + spec.degrees[::-1])[::-1]
    sums = [spec.n_tips * np.square(means[0]).reshape(lead)]
    for k in range(1, m + 1):
        diff = means[k] - means[k - 1]
        axes = tuple(range(offset, offset + m))
        sums.append(block_sizes[k] * np.square(diff).sum(axis=axes))
    return np.stack(sums, axis=-1)


def spectral_log_likelihood(
    spec: SymmetricTreeSpec,
    sums: np.ndarray,
    gamma: float,
    alpha: float,
    reml: bool = True,
    centered_sum: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Random-root log-likelihood from level sums of squares.

    For ML, centered_sum replaces S_0 by n (mean - mu)^2."""
    values, _ = lambdas(spec, alpha)
    sums = np.asarray(sums, dtype=float)
    weights = np.asarray(spec.multiplicities, dtype=float)
    scaled = gamma * values
    if reml:
        quad = np.sum(sums[..., 1:] / scaled[1:], axis=-1)
        logdet = float(np.sum(weights[1:] * np.log(scaled[1:])))
        size = spec.n_tips - 1
    else:
        first = sums[..., 0] if centered_sum is None else centered_sum
        quad = first / scaled[0] + np.sum(sums[..., 1:] / scaled[1:], axis=-1)
        logdet = float(np.sum(weights * np.log(scaled)))
        size = spec.n_tips
    return -0.5 * (size * np.log(2.0 * np.pi) + logdet + quad)
