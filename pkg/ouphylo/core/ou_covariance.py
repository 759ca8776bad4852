from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..utils.exceptions import ModelError
from .tool_functions import LOGGER, log_warning, ordered_map, square_frame
from .tree_functions import require_ultrametric, tree_metrics
from .tree_objects import Tree

# Below this value of alpha * height the fixed-root covariance uses its
# Brownian-motion series.
BM_LIMIT_THRESHOLD = 1e-8
SIMULATION_BLOCK = 1024


class RootMode(str, Enum):
    RANDOM = "random"
    FIXED = "fixed"


@dataclass(frozen=True)
class OUParams:
    """Stationary mean mu, selection strength alpha and stationary variance gamma."""

    mu: float
    alpha: float
    gamma: float

    def __post_init__(self) -> None:
        if not self.gamma > 0 or not np.isfinite(self.gamma):
            raise ModelError(f"gamma must be positive and finite, got {self.gamma}")
        if not self.alpha >= 0 or not np.isfinite(self.alpha):
            raise ModelError(f"alpha must be nonnegative and finite, got {self.alpha}")
        if not np.isfinite(self.mu):
            raise ModelError(f"mu must be finite, got {self.mu}")

    @property
    def sigma2(self) -> float:
        return 2.0 * self.alpha * self.gamma

    @classmethod
    def from_sigma2(cls, mu: float, alpha: float, sigma2: float) -> "OUParams":
        if not alpha > 0:
            raise ModelError("gamma = sigma2 / (2 alpha) needs alpha > 0")
        return cls(mu=mu, alpha=alpha, gamma=sigma2 / (2.0 * alpha))


@dataclass(frozen=True)
class CovarianceMatrix:
    matrix: np.ndarray
    labels: Tuple[str, ...]
    mode: RootMode
    mean: np.ndarray
    singular: bool = False

    def to_frame(self) -> pd.DataFrame:
        return square_frame(self.matrix, self.labels)


def correlation_matrix(tree: Tree, alpha: float) -> np.ndarray:
    """V with V_ij = exp(-alpha d_ij), the random-root correlation."""
    metrics = tree_metrics(tree)
    return np.exp(-alpha * metrics.distances)


def _has_duplicate_tips(distances: np.ndarray) -> bool:
    off_diagonal = distances + np.eye(len(distances))
    return bool(np.any(off_diagonal == 0.0))


def covariance(
    tree: Tree,
    params: OUParams,
    mode: Union[RootMode, str] = RootMode.RANDOM,
    y0: Optional[float] = None,
) -> CovarianceMatrix:
    """Covariance and mean of the tip values under either root treatment."""
    mode = RootMode(mode)
    metrics = tree_metrics(tree)
    alpha, gamma = params.alpha, params.gamma
    distances, shared = metrics.distances, metrics.shared_times

    if mode is RootMode.RANDOM:
        if alpha == 0:
            raise ModelError("The random-root model has no stationary law when alpha = 0")
        matrix = gamma * np.exp(-alpha * distances)
        mean = np.full(metrics.n_tips, params.mu)
    else:
        if y0 is None:
            raise ModelError("The fixed-root model needs a root value y0")
        if alpha * metrics.height < BM_LIMIT_THRESHOLD:
            # sigma2 t (1 - alpha t - alpha d) + O(alpha^2)
            matrix = params.sigma2 * shared * (1.0 - alpha * shared - alpha * distances)
        else:
            matrix = gamma * np.exp(-alpha * distances) * -np.expm1(-2.0 * alpha * shared)
        shrink = np.exp(-alpha * metrics.tip_depths)
        mean = (1.0 - shrink) * params.mu + shrink * y0

    singular = _has_duplicate_tips(distances)
    if singular:
        log_warning(
            "Covariance matrix is singular: some tips are at distance 0",
            details="Zero-length cherries give identical rows",
        )
    return CovarianceMatrix(
        matrix=matrix,
        labels=metrics.labels,
        mode=mode,
        mean=mean,
        singular=singular,
    )


def bm_branch_transform(tree: Tree, alpha: float) -> Tree:
    """Tree on which Brownian motion with unit rate has covariance V.

    A node of age a sits at depth exp(-2 alpha a) below the base of a root
    stem of length exp(-2 alpha T)."""
    if not alpha > 0:
        raise ModelError("The branch transform needs alpha > 0")
    require_ultrametric(tree)
    position = np.exp(-2.0 * alpha * np.asarray(tree.ages))
    lengths = [0.0] + [
        float(position[node] - position[tree.parents[node]]) for node in range(1, len(tree))
    ]
    return tree.with_lengths(lengths, root_length=float(position[0]))


def brownian_covariance(tree: Tree, sigma2: float = 1.0) -> np.ndarray:
    """Brownian covariance: shared path length, root stem included."""
    stem = tree.root_length or 0.0
    return sigma2 * (tree_metrics(tree).shared_times + stem)


def _simulate_block(
    tree: Tree,
    params: OUParams,
    mode: RootMode,
    y0: Optional[float],
    reps: int,
    seed: np.random.SeedSequence,
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    values = np.empty((reps, len(tree)))
    if mode is RootMode.RANDOM:
        values[:, 0] = params.mu + np.sqrt(params.gamma) * rng.standard_normal(reps)
    else:
        values[:, 0] = y0
    alpha, gamma, mu = params.alpha, params.gamma, params.mu
    for node in range(1, len(tree)):
        length = tree.lengths[node]
        shrink = np.exp(-alpha * length)
        spread = np.sqrt(gamma * -np.expm1(-2.0 * alpha * length))
        values[:, node] = (
            mu
            + shrink * (values[:, tree.parents[node]] - mu)
            + spread * rng.standard_normal(reps)
        )
    return values[:, list(tree.tips)]


def simulate_tips(
    tree: Tree,
    params: OUParams,
    mode: Union[RootMode, str] = RootMode.RANDOM,
    y0: Optional[float] = None,
    reps: int = 1,
    seed: Union[int, Sequence[int]] = 0,
    workers: int = 1,
) -> np.ndarray:
    """Exact OU draws at the tips, one row per replicate in tip order.

    Replicates are generated in fixed-size blocks, each with its own child
    seed, so the output depends on the seed only and not on workers."""
    mode = RootMode(mode)
    if reps < 1:
        raise ModelError(f"reps must be at least 1, got {reps}")
    if mode is RootMode.RANDOM and params.alpha == 0:
        raise ModelError("The random-root model has no stationary law when alpha = 0")
    if mode is RootMode.FIXED and y0 is None:
        raise ModelError("The fixed-root model needs a root value y0")

    n_blocks = -(-reps // SIMULATION_BLOCK)
    seeds = np.random.SeedSequence(seed).spawn(n_blocks)
    sizes: List[int] = [SIMULATION_BLOCK] * (n_blocks - 1)
    sizes.append(reps - SIMULATION_BLOCK * (n_blocks - 1))
    LOGGER.debug(
        "Simulating %d replicates on %d tips in %d blocks", reps, tree.n_tips, n_blocks
    )
    blocks = ordered_map(
        lambda task: _simulate_block(tree, params, mode, y0, task[0], task[1]),
        zip(sizes, seeds),
        workers,
    )
    return np.vstack(blocks)


def simulation_frame(tree: Tree, draws: np.ndarray) -> pd.DataFrame:
    """Simulated draws headed by tip labels, one row per replicate."""
    return pd.DataFrame(np.atleast_2d(draws), columns=list(tree.tip_labels))
