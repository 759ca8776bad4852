from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from ..utils.exceptions import InputError, ModelError, UnmatchedPairError
from .contrasts import ContrastSet
from .ou_covariance import OUParams, covariance
from .symmetric_tree import DenseTipFamily, lambdas
from .tool_functions import LOGGER, cholesky_factor
from .tree_functions import require_ultrametric, tree_metrics
from .tree_objects import Tree

MATCH_RTOL = 1e-9


@dataclass(frozen=True)
class ModelPair:
    """Two random-root OU models on the same tree."""

    theta1: OUParams
    theta2: OUParams
    tree: Tree

    def __post_init__(self) -> None:
        if self.theta1.alpha == 0 or self.theta2.alpha == 0:
            raise ModelError("Both models need alpha > 0")

    def swapped(self) -> "ModelPair":
        return ModelPair(self.theta2, self.theta1, self.tree)


@dataclass(frozen=True)
class WhitenedPair:
    """Coordinates that are independent with unit variance under the first model."""

    variances: np.ndarray
    offsets: np.ndarray


def whiten_pair(pair: ModelPair) -> WhitenedPair:
    first = covariance(pair.tree, pair.theta1)
    second = covariance(pair.tree, pair.theta2)
    factor = cholesky_factor(first.matrix, "first covariance matrix")
    half = linalg.solve_triangular(factor, second.matrix, lower=True)
    whitened = linalg.solve_triangular(factor, half.T, lower=True)
    variances, rotation = linalg.eigh((whitened + whitened.T) / 2.0)
    shift = linalg.solve_triangular(factor, second.mean - first.mean, lower=True)
    return WhitenedPair(variances=variances, offsets=rotation.T @ shift)


def entropy_distance(pair: ModelPair) -> float:
    """Twice the symmetrized Kullback-Leibler divergence between the two models."""
    white = whiten_pair(pair)
    s, m = white.variances, white.offsets
    if np.any(s <= 0):
        raise ModelError("The second covariance matrix is not positive definite")
    return float(0.5 * np.sum(s + 1.0 / s - 2.0 + m ** 2 + m ** 2 / s))


def mean_only_distance(tree: Tree, delta_mu: float, alpha: float, gamma: float) -> float:
    """Entropy distance of two models that differ in mu only."""
    if not alpha > 0:
        raise ModelError("mean_only_distance needs alpha > 0")
    factor = cholesky_factor(np.exp(-alpha * tree_metrics(tree).distances))
    weights = linalg.cho_solve((factor, True), np.ones(tree.n_tips))
    return float(delta_mu ** 2 * np.sum(weights) / gamma)


def f_t(gamma: float, alpha: float, t: float) -> float:
    """gamma (1 - exp(-2 alpha t)) for t > 0 and gamma alpha at t = 0."""
    if t < 0:
        raise ModelError(f"t must be nonnegative, got {t}")
    if t == 0:
        return gamma * alpha
    return float(gamma * -np.expm1(-2.0 * alpha * t))


def contrast_entropy_distance(contrast_set: ContrastSet, pair: ModelPair) -> float:
    """Entropy distance carried by a set of independent contrasts alone."""
    total = 0.0
    for contrast in contrast_set:
        ratio = f_t(pair.theta2.gamma, pair.theta2.alpha, contrast.age) / f_t(
            pair.theta1.gamma, pair.theta1.alpha, contrast.age
        )
        total += 0.5 * (ratio + 1.0 / ratio - 2.0)
    return total


def _matched(first: float, second: float) -> bool:
    return abs(first - second) <= MATCH_RTOL * max(abs(first), abs(second))


def rao_sum_sequence(
    family: DenseTipFamily,
    theta1: OUParams,
    theta2: OUParams,
    m_max: int,
    m_min: int = 2,
) -> pd.DataFrame:
    """z_m for m = m_min..m_max on the dense-tip family.

    The pair must agree on f_t0 (on gamma alpha when t0 = 0)."""
    if theta1.alpha == 0 or theta2.alpha == 0:
        raise ModelError("Both models need alpha > 0")
    if not 1 <= m_min <= m_max:
        raise InputError(f"Need 1 <= m_min <= m_max, got {m_min}, {m_max}")
    t0 = family.t0
    first = f_t(theta1.gamma, theta1.alpha, t0)
    second = f_t(theta2.gamma, theta2.alpha, t0)
    if not _matched(first, second):
        raise UnmatchedPairError(
            f"The pair differs in f_{t0:g}: {first:.6g} against {second:.6g}"
        )
    rows = []
    for m in range(m_min, m_max + 1):
        spec = family.spec(m)
        ratios = (theta1.gamma * lambdas(spec, theta1.alpha)[0]) / (
            theta2.gamma * lambdas(spec, theta2.alpha)[0]
        )
        weights = np.asarray(spec.multiplicities, dtype=float)
        rows.append({"m": m, "z_m": float(np.sum(weights[1:] * (ratios[1:] - 1.0) ** 2))})
    LOGGER.debug("z_m computed up to m=%d (dq2=%.3g)", m_max, family.dq2)
    return pd.DataFrame(rows, columns=["m", "z_m"])


def age_divergence_profile(tree: Tree, t_grid: Iterable[float]) -> pd.DataFrame:
    """Sum over node ages of (T_i - t)^2 at every t of the grid."""
    require_ultrametric(tree)
    ages = np.asarray(tree_metrics(tree).ages)
    grid = np.asarray(list(t_grid), dtype=float)
    values = ((ages[None, :] - grid[:, None]) ** 2).sum(axis=1)
    return pd.DataFrame({"t": grid, "value": values}, columns=["t", "value"])


def age_histogram(tree: Tree, bins: int = 20) -> pd.DataFrame:
    """Counts of node ages, each node counted once per extra child, over [0, height]."""
    if bins < 1:
        raise InputError(f"bins must be at least 1, got {bins}")
    metrics = tree_metrics(tree)
    counts, edges = np.histogram(metrics.ages, bins=bins, range=(0.0, metrics.height))
    return pd.DataFrame(
        {"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts},
        columns=["bin_left", "bin_right", "count"],
    )


def distance_table(tree: Tree, pairs: Sequence[Tuple[OUParams, OUParams]]) -> pd.DataFrame:
    """Entropy distance for each pair, with the parameters of both sides."""
    rows: List[dict] = []
    for index, (first, second) in enumerate(pairs):
        rows.append(
            {
                "pair": index,
                "mu1": first.mu,
                "alpha1": first.alpha,
                "gamma1": first.gamma,
                "mu2": second.mu,
                "alpha2": second.alpha,
                "gamma2": second.gamma,
                "r": entropy_distance(ModelPair(first, second, tree)),
            }
        )
    return pd.DataFrame(rows)
