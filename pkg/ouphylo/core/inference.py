import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from ..utils.exceptions import DegenerateFitError, InputError, ModelError, NumericalError
from .ou_covariance import OUParams
from .symmetric_tree import (
    SymmetricTreeSpec,
    lambdas,
    level_sums_of_squares,
    nu_from_gamma,
    spectral_log_likelihood,
)
from .tool_functions import (
    LOGGER,
    TipData,
    cholesky_factor,
    log_warning,
    ordered_map,
    tip_values,
)
from .tree_functions import tree_metrics
from .tree_objects import Tree

LOG2PI = float(np.log(2.0 * np.pi))
ALPHA_RANGE = (1e-8, 1e4)
GRID_POINTS = 41
BRENT_XATOL = 1e-7

FIT_COLUMNS = ["mu_hat", "gamma_hat", "alpha_hat", "sigma2_hat", "loglik", "boundary_flag"]


class FitMode(str, Enum):
    ML = "ml"
    REML = "reml"


@dataclass(frozen=True)
class OptimizerTrace:
    grid_points: int
    iterations: int
    evaluations: int
    brackets: Tuple[Tuple[float, float], ...]


@dataclass(frozen=True)
class FitResult:
    mu_hat: Optional[float]
    gamma_hat: float
    alpha_hat: float
    loglik: float
    mode: FitMode
    boundary: bool
    trace: OptimizerTrace
    nu_hat: Optional[float] = None

    @property
    def sigma2_hat(self) -> float:
        return 2.0 * self.alpha_hat * self.gamma_hat

    def to_dict(self) -> dict:
        record = asdict(self)
        record["mode"] = self.mode.value
        record["sigma2_hat"] = self.sigma2_hat
        record["trace"]["brackets"] = [list(b) for b in self.trace.brackets]
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def row(self) -> dict:
        return {
            "mu_hat": self.mu_hat,
            "gamma_hat": self.gamma_hat,
            "alpha_hat": self.alpha_hat,
            "sigma2_hat": self.sigma2_hat,
            "loglik": self.loglik,
            "boundary_flag": self.boundary,
        }


def _correlation(distances: np.ndarray, alpha: float) -> np.ndarray:
    return np.exp(-alpha * distances)


def gls_mean(
    data: TipData, tree: Tree, alpha_star: float, gamma: float = 1.0
) -> Tuple[Union[float, np.ndarray], float]:
    """GLS estimate of mu under a working alpha, and gamma / (1' V^-1 1).

    The variance is exact only when alpha_star is the true alpha."""
    if not alpha_star > 0:
        raise ModelError(f"alpha_star must be positive, got {alpha_star}")
    values = tip_values(tree, data)
    factor = cholesky_factor(_correlation(tree_metrics(tree).distances, alpha_star))
    weights = linalg.cho_solve((factor, True), np.ones(tree.n_tips))
    total = float(np.sum(weights))
    estimate = values @ weights / total
    if np.ndim(estimate) == 0:
        estimate = float(estimate)
    return estimate, gamma / total


def mu_var_lower_bound(T: float, t: float, k: int, alpha: float, sigma2: float) -> float:
    """Lower bound on var(mu_hat) for a tree of height T whose root has k
    children, the shortest root branch having length t. Equality holds only
    for the star with equal branches."""
    if not 0 < t <= T:
        raise ModelError(f"Need 0 < t <= T, got t={t}, T={T}")
    if k < 2:
        raise ModelError(f"The root needs at least two children, got {k}")
    if not alpha > 0:
        raise ModelError(f"alpha must be positive, got {alpha}")
    stationary = sigma2 / (2.0 * alpha)
    return stationary * np.exp(-2.0 * alpha * T) * (1.0 + np.expm1(2.0 * alpha * t) / k)


def tree_mu_var_lower_bound(tree: Tree, alpha: float, sigma2: float) -> float:
    kids = tree.children[0]
    return mu_var_lower_bound(
        T=tree.height,
        t=min(tree.lengths[child] for child in kids),
        k=len(kids),
        alpha=alpha,
        sigma2=sigma2,
    )


def log_likelihood(
    data: TipData,
    tree: Tree,
    params: OUParams,
    mode: Union[FitMode, str] = FitMode.ML,
    basis: Optional[np.ndarray] = None,
) -> float:
    """Random-root Gaussian log-likelihood of one data vector.

    REML is the density of A'Y for an orthonormal basis A of the complement
    of the all-ones vector; any basis gives the same value. Without an
    explicit basis the equivalent determinant identity is used."""
    mode = FitMode(mode)
    if params.alpha == 0:
        raise ModelError("The random-root likelihood needs alpha > 0")
    values = np.asarray(tip_values(tree, data), dtype=float)
    if values.ndim != 1:
        raise InputError("log_likelihood takes one data vector")
    n = len(values)
    cov = params.gamma * _correlation(tree_metrics(tree).distances, params.alpha)

    if mode is FitMode.ML:
        factor = cholesky_factor(cov)
        scaled = linalg.solve_triangular(factor, values - params.mu, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        return -0.5 * (n * LOG2PI + logdet + float(scaled @ scaled))

    if n < 2:
        raise InputError("REML needs at least two tips")
    if basis is not None:
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (n, n - 1):
            raise InputError(f"REML basis must have shape {(n, n - 1)}, got {basis.shape}")
        projected = basis.T @ values
        factor = cholesky_factor(basis.T @ cov @ basis, "projected covariance matrix")
        scaled = linalg.solve_triangular(factor, projected, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        return -0.5 * ((n - 1) * LOG2PI + logdet + float(scaled @ scaled))

    factor = cholesky_factor(cov)
    ones = np.ones(n)
    weights = linalg.cho_solve((factor, True), ones)
    total = float(np.sum(weights))
    residual = values - float(values @ weights) / total
    quad = float(residual @ linalg.cho_solve((factor, True), residual))
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
    return -0.5 * ((n - 1) * LOG2PI + logdet + np.log(total) - np.log(n) + quad)


def complement_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the vectors orthogonal to the all-ones vector."""
    return linalg.null_space(np.ones((1, n)))


@dataclass
class _Profile:
    """Profile log-likelihood in log alpha with its inner maximizers."""

    evaluate: Callable[[float], Tuple[float, float, float]]
    evaluations: int = field(default=0)

    def __call__(self, log_alpha: float) -> float:
        self.evaluations += 1
        try:
            value = self.evaluate(log_alpha)[0]
        except NumericalError:
            return -np.inf
        return value if np.isfinite(value) else -np.inf


def _dense_profile(values: np.ndarray, distances: np.ndarray, mode: FitMode):
    n = len(values)
    ones = np.ones(n)

    def evaluate(log_alpha: float) -> Tuple[float, float, float]:
        factor = cholesky_factor(_correlation(distances, np.exp(log_alpha)))
        weights = linalg.cho_solve((factor, True), ones)
        total = float(np.sum(weights))
        mu = float(values @ weights) / total
        residual = values - mu
        quad = float(residual @ linalg.cho_solve((factor, True), residual))
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        if mode is FitMode.ML:
            gamma = quad / n
            value = -0.5 * (n * LOG2PI + n * np.log(gamma) + logdet + n)
        else:
            gamma = quad / (n - 1)
            value = -0.5 * (
                (n - 1) * LOG2PI
                + (n - 1) * np.log(gamma)
                + logdet
                + np.log(total)
                - np.log(n)
                + (n - 1)
            )
        return value, mu, gamma

    return evaluate


def _spectral_profile(sums: np.ndarray, spec: SymmetricTreeSpec, mode: FitMode, mean: float):
    size = spec.n_tips if mode is FitMode.ML else spec.n_tips - 1

    def evaluate(log_alpha: float) -> Tuple[float, float, float]:
        alpha = float(np.exp(log_alpha))
        eigenvalues = lambdas(spec, alpha)[0]
        if not np.all(eigenvalues > 0):
            raise NumericalError("Non-positive eigenvalue")
        gamma = float(np.sum(sums[1:] / eigenvalues[1:])) / size
        reml = mode is FitMode.REML
        value = float(
            spectral_log_likelihood(spec, sums, gamma, alpha, reml=reml, centered_sum=0.0)
        )
        return value, mean, gamma

    return evaluate


def _maximize(
    profile: _Profile, low: float, high: float
) -> Tuple[float, float, OptimizerTrace]:
    grid = np.linspace(low, high, GRID_POINTS)
    scores = np.array([profile(x) for x in grid])
    if not np.any(np.isfinite(scores)):
        raise DegenerateFitError(
            "The profile likelihood is not finite anywhere on the alpha grid"
        )
    best = int(np.argmax(scores))
    left, right = grid[max(best - 1, 0)], grid[min(best + 1, GRID_POINTS - 1)]
    result = optimize.minimize_scalar(
        lambda x: -profile(x),
        bounds=(left, right),
        method="bounded",
        options={"xatol": BRENT_XATOL, "maxiter": 200},
    )
    if np.isfinite(result.fun) and -result.fun >= scores[best]:
        log_alpha, value = float(result.x), float(-result.fun)
    else:
        log_alpha, value = float(grid[best]), float(scores[best])
    trace = OptimizerTrace(
        grid_points=GRID_POINTS,
        iterations=int(getattr(result, "nit", 0)),
        evaluations=profile.evaluations,
        brackets=((float(low), float(high)), (float(left), float(right))),
    )
    return log_alpha, value, trace


def _search_range(height: float) -> Tuple[float, float]:
    if not height > 0:
        raise InputError("Cannot fit on a tree of zero height")
    return np.log(ALPHA_RANGE[0] / height), np.log(ALPHA_RANGE[1] / height)


def _check_data(values: np.ndarray, mode: FitMode) -> None:
    if values.ndim != 1:
        raise InputError("fit takes one data vector")
    smallest = 3 if mode is FitMode.ML else 2
    if len(values) < smallest:
        raise InputError(
            f"{mode.value.upper()} needs at least {smallest} tips, got {len(values)}"
        )
    if not np.all(np.isfinite(values)):
        raise InputError("Tip values must be finite")
    if np.ptp(values) == 0:
        raise DegenerateFitError("All tip values are equal; gamma_hat would be 0")


def _finish(
    profile: _Profile,
    low: float,
    high: float,
    mode: FitMode,
    spec: Optional[SymmetricTreeSpec] = None,
) -> FitResult:
    log_alpha, value, trace = _maximize(profile, low, high)
    _, mu, gamma = profile.evaluate(log_alpha)
    alpha = float(np.exp(log_alpha))
    # flagged within one grid step of either end
    step = (high - low) / (GRID_POINTS - 1)
    boundary = log_alpha - low <= step or high - log_alpha <= step
    if boundary:
        log_warning(
            f"alpha_hat = {alpha:.6g} is at the edge of the search range",
            details=f"range [{np.exp(low):.3g}, {np.exp(high):.3g}]",
        )
    LOGGER.debug("%s fit: alpha=%.6g gamma=%.6g loglik=%.6f", mode.value, alpha, gamma, value)
    return FitResult(
        mu_hat=mu,
        gamma_hat=gamma,
        alpha_hat=alpha,
        loglik=value,
        mode=mode,
        boundary=bool(boundary),
        trace=trace,
        nu_hat=None if spec is None else nu_from_gamma(spec, gamma, alpha),
    )


def fit(
    data: TipData,
    tree: Tree,
    mode: Union[FitMode, str] = FitMode.ML,
    spec: Optional[SymmetricTreeSpec] = None,
) -> FitResult:
    """ML or REML fit of the random-root OU model by profiling out mu and gamma.

    The profile in log alpha is scanned on a grid spanning
    [1e-8 / T, 1e4 / T] and refined with bounded Brent search around the
    best grid point. With a symmetric tree spec the spectral form is used."""
    mode = FitMode(mode)
    values = np.asarray(tip_values(tree, data), dtype=float)
    if spec is not None:
        if spec.n_tips != tree.n_tips:
            raise InputError(f"Spec has {spec.n_tips} tips, tree has {tree.n_tips}")
        return fit_symmetric(values, spec, mode)
    _check_data(values, mode)
    low, high = _search_range(tree.height)
    profile = _Profile(_dense_profile(values, tree_metrics(tree).distances, mode))
    return _finish(profile, low, high, mode)


def fit_symmetric(
    data: np.ndarray, spec: SymmetricTreeSpec, mode: Union[FitMode, str] = FitMode.REML
) -> FitResult:
    """Fit on a symmetric tree from its level sums of squares; data in tip-label order."""
    mode = FitMode(mode)
    values = np.asarray(data, dtype=float)
    _check_data(values, mode)
    sums = level_sums_of_squares(spec, values)
    low, high = _search_range(spec.height)
    profile = _Profile(_spectral_profile(sums, spec, mode, float(np.mean(values))))
    return _finish(profile, low, high, mode, spec)


def fit_batch(
    draws: np.ndarray,
    tree: Tree,
    mode: Union[FitMode, str] = FitMode.ML,
    spec: Optional[SymmetricTreeSpec] = None,
    workers: int = 1,
) -> List[FitResult]:
    """Fits every row of draws; results keep row order."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    return ordered_map(lambda row: fit(row, tree, mode, spec), list(draws), workers)


def fits_frame(results: Sequence[FitResult]) -> pd.DataFrame:
    return pd.DataFrame([result.row() for result in results], columns=FIT_COLUMNS)


def star_two_depth_variance(n: int, t1: float, t2: float, alpha: float, gamma: float) -> float:
    """var(mu_hat) on a star with n / 2 tips at depth t1 and n / 2 at depth t2."""
    if n < 2 or n % 2:
        raise InputError(f"n must be a positive even number, got {n}")
    if not (t1 > 0 and t2 > 0):
        raise ModelError("Both depths must be positive")
    if not alpha > 0:
        raise ModelError(f"alpha must be positive, got {alpha}")
    half = n / 2.0
    a, b = np.exp(-alpha * t1), np.exp(-alpha * t2)
    A, B = 1.0 / -np.expm1(-2.0 * alpha * t1), 1.0 / -np.expm1(-2.0 * alpha * t2)
    numerator = 1.0 + half * a ** 2 * A + half * b ** 2 * B
    denominator = half * (A + B) + half ** 2 * A * B * (a - b) ** 2
    return float(gamma * numerator / denominator)


def star_two_depth_tree(n: int, t1: float, t2: float, prefix: str = "t") -> Tree:
    """Star whose first n / 2 tips hang at depth t1 and the rest at depth t2."""
    if n < 2 or n % 2:
        raise InputError(f"n must be a positive even number, got {n}")
    half = n // 2
    return Tree(
        [-1] + [0] * n,
        [0.0] + [t1] * half + [t2] * half,
        [None] + [f"{prefix}{i + 1}" for i in range(n)],
    )
