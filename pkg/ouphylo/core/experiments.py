import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..utils.exceptions import ConfigError, InputError
from .inference import FitMode, fit_batch, fit_symmetric, tree_mu_var_lower_bound
from .microergodicity import (
    age_divergence_profile,
    age_histogram,
    distance_table,
    rao_sum_sequence,
)
from .newick import read_newick
from .ou_covariance import OUParams, simulate_tips
from .symmetric_tree import (
    DenseTipFamily,
    GrowthPattern,
    SymmetricTreeSpec,
    build_symmetric_tree,
    fisher_info,
    nu_from_gamma,
    nu_limit_variance,
    v_alpha_limit,
)
from .tool_functions import LOGGER, ordered_map, worker_count, write_frame
from .tree_functions import require_ultrametric, subsample_nested
from .tree_objects import Tree

HASH_LENGTH = 12

RAW_COLUMNS = [
    "config_hash",
    "sequence",
    "size",
    "replicate",
    "mu_hat",
    "gamma_hat",
    "alpha_hat",
    "sigma2_hat",
    "loglik",
    "boundary_flag",
    "bound",
]
SUMMARY_COLUMNS = [
    "config_hash",
    "size",
    "n_fits",
    "mean_mu_hat",
    "sd_mu_hat",
    "var_mu_hat",
    "mean_gamma_hat",
    "sd_gamma_hat",
    "mean_alpha_hat",
    "sd_alpha_hat",
    "mean_sigma2_hat",
    "sd_sigma2_hat",
    "cor_log_alpha_gamma",
    "boundary_fraction",
    "mean_bound",
]
STUDY_RAW_COLUMNS = [
    "config_hash",
    "d_m",
    "replicate",
    "nu_hat",
    "gamma_hat",
    "alpha_hat",
    "boundary_flag",
]
STUDY_SUMMARY_COLUMNS = [
    "config_hash",
    "d_m",
    "n",
    "n_tilde",
    "nu",
    "var_nu_scaled",
    "nu_limit",
    "nu_finite",
    "var_alpha_scaled",
    "v_alpha",
    "alpha_finite",
    "cor_log_gamma_lambda",
    "boundary_fraction",
]


def read_json_argument(text: str, what: str = "JSON") -> Any:
    """Parses a command-line argument holding inline JSON or the path of a JSON file."""
    text = text.strip()
    if not text.startswith(("{", "[")):
        try:
            text = Path(text).read_text(encoding="utf-8")
        except OSError as error:
            raise InputError(f"Cannot read {what} file {text}: {error.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as error:
        raise InputError(f"{what} is not valid JSON: {error}") from None


def load_spec(text: str) -> Tuple[SymmetricTreeSpec, Optional[DenseTipFamily]]:
    """Reads a symmetric spec {m, degrees, ages} or a dense-tip family {d, q, t0, m}.

    The text is either inline JSON or the path of a JSON file."""
    record = read_json_argument(text, "Spec")
    if not isinstance(record, dict):
        raise InputError("Spec JSON must be an object")
    if "degrees" in record:
        return SymmetricTreeSpec.from_dict(record), None
    if "d" in record:
        if "m" not in record:
            raise InputError("A dense-tip spec needs the number of levels m")
        family = DenseTipFamily.from_dict(record)
        return family.spec(int(record["m"])), family
    raise InputError("Spec JSON must hold 'degrees' and 'ages', or 'd', 'q' and 'm'")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str = "results"
    tree_path: Optional[str] = None
    spec: Optional[dict] = None
    mu: float = 0.0
    alpha: float = 0.1
    gamma: float = 1.0
    reps: int = 50
    sequences: int = 10
    sizes: Tuple[int, ...] = ()
    mode: str = "ml"
    dm_grid: Tuple[int, ...] = ()
    diverging_levels: Tuple[int, ...] = (1,)

    @classmethod
    def from_dict(cls, record: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(record) - known)
        problems = [f"{name}: unknown field" for name in unknown]
        if "seed" not in record or record["seed"] is None:
            problems.append("seed: required")
        if problems:
            raise ConfigError(problems)
        values = dict(record)
        for name in ("sizes", "dm_grid", "diverging_levels"):
            if name in values:
                values[name] = tuple(int(v) for v in values[name])
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            record = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as error:
            raise ConfigError([f"config: cannot read {path} ({error})"]) from None
        return cls.from_dict(record)

    def to_dict(self) -> dict:
        record = asdict(self)
        for name in ("sizes", "dm_grid", "diverging_levels"):
            record[name] = list(record[name])
        return record

    def validate(self) -> None:
        problems: List[str] = []
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            problems.append(f"seed: must be an integer, got {self.seed!r}")
        if self.reps < 1:
            problems.append(f"reps: must be at least 1, got {self.reps}")
        if self.sequences < 1:
            problems.append(f"sequences: must be at least 1, got {self.sequences}")
        if (self.tree_path is None) == (self.spec is None):
            problems.append("tree_path: give exactly one of tree_path and spec")
        if not self.gamma > 0:
            problems.append(f"gamma: must be positive, got {self.gamma}")
        if not self.alpha > 0:
            problems.append(f"alpha: must be positive, got {self.alpha}")
        if self.mode not in {mode.value for mode in FitMode}:
            problems.append(f"mode: must be 'ml' or 'reml', got {self.mode!r}")
        if any(size < 2 for size in self.sizes):
            problems.append(f"sizes: every size must be at least 2, got {list(self.sizes)}")
        if any(later >= earlier for earlier, later in zip(self.sizes, self.sizes[1:])):
            problems.append(f"sizes: must be strictly descending, got {list(self.sizes)}")
        if any(d < 2 for d in self.dm_grid):
            problems.append(f"dm_grid: degrees must be at least 2, got {list(self.dm_grid)}")
        if any(level < 1 for level in self.diverging_levels):
            problems.append("diverging_levels: levels are counted from 1")
        if problems:
            raise ConfigError(problems)

    @property
    def params(self) -> OUParams:
        return OUParams(mu=self.mu, alpha=self.alpha, gamma=self.gamma)

    @property
    def config_hash(self) -> str:
        """Digest of everything that shapes the results; the output directory is left out."""
        record = self.to_dict()
        record.pop("out_dir")
        canonical = json.dumps(record, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]

    def load_tree(self) -> Tuple[Tree, Optional[SymmetricTreeSpec]]:
        if self.tree_path is not None:
            return read_newick(self.tree_path), None
        spec, _ = load_spec(json.dumps(self.spec))
        return build_symmetric_tree(spec), spec


def _write_config(config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = config.to_dict()
    record["config_hash"] = config.config_hash
    (out_dir / "config.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _log_correlation(first: np.ndarray, second: np.ndarray) -> float:
    if len(first) < 3:
        return float("nan")
    return float(np.corrcoef(np.log(first), np.log(second))[0, 1])


def summarize_fits(raw: pd.DataFrame, config_hash: str) -> pd.DataFrame:
    """One row per subsample size; log-scale correlations skip boundary fits."""
    rows = []
    for size, group in raw.groupby("size", sort=False):
        inner = group[~group["boundary_flag"].astype(bool)]
        rows.append(
            {
                "config_hash": config_hash,
                "size": int(size),
                "n_fits": len(group),
                "mean_mu_hat": group["mu_hat"].mean(),
                "sd_mu_hat": group["mu_hat"].std(ddof=1),
                "var_mu_hat": group["mu_hat"].var(ddof=1),
                "mean_gamma_hat": group["gamma_hat"].mean(),
                "sd_gamma_hat": group["gamma_hat"].std(ddof=1),
                "mean_alpha_hat": group["alpha_hat"].mean(),
                "sd_alpha_hat": group["alpha_hat"].std(ddof=1),
                "mean_sigma2_hat": group["sigma2_hat"].mean(),
                "sd_sigma2_hat": group["sigma2_hat"].std(ddof=1),
                "cor_log_alpha_gamma": _log_correlation(
                    inner["alpha_hat"].to_numpy(), inner["gamma_hat"].to_numpy()
                ),
                "boundary_fraction": float(group["boundary_flag"].astype(bool).mean()),
                "mean_bound": group.drop_duplicates("sequence")["bound"].mean(),
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def run_subsample_experiment(
    config: ExperimentConfig, workers: Optional[int] = None
) -> Dict[str, pd.DataFrame]:
    """Fits simulated data on nested random subtrees of the source tree.

    Writes fits.csv (one row per replicate) and summary.csv (one row per
    size) into the output directory and returns both tables."""
    config.validate()
    workers = worker_count() if workers is None else workers
    tree, spec = config.load_tree()
    require_ultrametric(tree)
    sizes = list(config.sizes) or [tree.n_tips]
    params = config.params
    mode = FitMode(config.mode)
    digest = config.config_hash
    LOGGER.info(
        "Subsample experiment %s: %d sequences, sizes %s, %d replicates",
        digest,
        config.sequences,
        sizes,
        config.reps,
    )

    frames = []
    for sequence in range(config.sequences):
        subtrees = subsample_nested(
            tree, sizes, seed=np.random.SeedSequence([config.seed, sequence])
        )
        for size_index, subtree in enumerate(subtrees):
            draws = simulate_tips(
                subtree,
                params,
                reps=config.reps,
                seed=[config.seed, sequence, size_index],
                workers=workers,
            )
            full_spec = spec if spec is not None and subtree.n_tips == spec.n_tips else None
            results = fit_batch(draws, subtree, mode, full_spec, workers)
            bound = tree_mu_var_lower_bound(subtree, params.alpha, params.sigma2)
            frame = pd.DataFrame([result.row() for result in results])
            frame.insert(0, "config_hash", digest)
            frame.insert(1, "sequence", sequence)
            frame.insert(2, "size", subtree.n_tips)
            frame.insert(3, "replicate", range(config.reps))
            frame["bound"] = bound
            frames.append(frame)
            LOGGER.debug("Sequence %d size %d done", sequence, subtree.n_tips)

    raw = pd.concat(frames, ignore_index=True)[RAW_COLUMNS]
    summary = summarize_fits(raw, digest)
    out_dir = Path(config.out_dir)
    _write_config(config, out_dir)
    write_frame(raw, out_dir / "fits.csv")
    write_frame(summary, out_dir / "summary.csv")
    return {"fits": raw, "summary": summary}


def _study_point(
    spec: SymmetricTreeSpec, params: OUParams, reps: int, seed: Sequence[int], workers: int
) -> pd.DataFrame:
    tree = build_symmetric_tree(spec)
    draws = simulate_tips(tree, params, reps=reps, seed=list(seed), workers=workers)
    results = ordered_map(
        lambda row: fit_symmetric(row, spec, FitMode.REML), list(draws), workers
    )
    return pd.DataFrame(
        {
            "replicate": range(reps),
            "nu_hat": [result.nu_hat for result in results],
            "gamma_hat": [result.gamma_hat for result in results],
            "alpha_hat": [result.alpha_hat for result in results],
            "boundary_flag": [result.boundary for result in results],
        }
    )


def run_symtree_reml_study(
    config: ExperimentConfig, workers: Optional[int] = None
) -> Dict[str, pd.DataFrame]:
    """REML fits on symmetric trees whose last degree runs over dm_grid.

    Empirical scaled variances are set against their limits and against
    the exact inverse Fisher information of each tree."""
    config.validate()
    if config.spec is None:
        raise ConfigError(["spec: the symmetric tree study needs a symmetric spec"])
    base, _ = load_spec(json.dumps(config.spec))
    if base.m < 2:
        raise ConfigError([f"spec: the study needs at least two levels, got m={base.m}"])
    if any(level >= base.m for level in config.diverging_levels):
        raise ConfigError(["diverging_levels: only levels above the last may diverge"])
    workers = worker_count() if workers is None else workers
    grid = list(config.dm_grid) or [base.degrees[-1]]
    params = config.params
    digest = config.config_hash
    nu = nu_from_gamma(base, params.gamma, params.alpha)
    tip_branch = base.tip_branch

    raw_frames = []
    rows = []
    for index, d_m in enumerate(grid):
        spec = SymmetricTreeSpec(base.degrees[:-1] + (d_m,), base.ages)
        frame = _study_point(spec, params, config.reps, [config.seed, index], workers)
        frame.insert(0, "config_hash", digest)
        frame.insert(1, "d_m", d_m)
        raw_frames.append(frame)

        pattern = GrowthPattern(
            tuple(
                None if level in config.diverging_levels else degree
                for level, degree in enumerate(spec.degrees, start=1)
            ),
            spec.ages,
        )
        info = fisher_info(spec, nu, params.alpha)
        inner = frame[~frame["boundary_flag"]]
        lam_hat = -np.expm1(-2.0 * inner["alpha_hat"].to_numpy() * tip_branch)
        rows.append(
            {
                "config_hash": digest,
                "d_m": d_m,
                "n": spec.n_tips,
                "n_tilde": spec.n_tilde,
                "nu": nu,
                "var_nu_scaled": spec.n_tips * frame["nu_hat"].var(ddof=1),
                "nu_limit": nu_limit_variance(nu),
                "nu_finite": info.finite_nu_variance,
                "var_alpha_scaled": spec.n_tilde * frame["alpha_hat"].var(ddof=1),
                "v_alpha": v_alpha_limit(pattern, params.alpha),
                "alpha_finite": info.finite_alpha_variance,
                "cor_log_gamma_lambda": _log_correlation(
                    inner["gamma_hat"].to_numpy(), lam_hat
                ),
                "boundary_fraction": float(frame["boundary_flag"].mean()),
            }
        )
        LOGGER.info("Study point d_m=%d done (%d tips)", d_m, spec.n_tips)

    raw = pd.concat(raw_frames, ignore_index=True)[STUDY_RAW_COLUMNS]
    summary = pd.DataFrame(rows, columns=STUDY_SUMMARY_COLUMNS)
    out_dir = Path(config.out_dir)
    _write_config(config, out_dir)
    write_frame(raw, out_dir / "study_fits.csv")
    write_frame(summary, out_dir / "study_summary.csv")
    return {"fits": raw, "summary": summary}


def _with_hash(frame: pd.DataFrame, digest: str) -> pd.DataFrame:
    frame = frame.copy()
    frame.insert(0, "config_hash", digest)
    return frame


def micro_report(
    tree: Tree,
    pairs: Sequence[Tuple[OUParams, OUParams]],
    out_dir: Union[str, Path],
    family: Optional[DenseTipFamily] = None,
    m_max: Optional[int] = None,
    bins: int = 20,
    grid_points: int = 51,
) -> Dict[str, pd.DataFrame]:
    """Age histogram, age divergence profile, entropy distances and, for a
    dense-tip family, the z_m sequence of every matched pair."""
    require_ultrametric(tree)
    inputs = {
        "tips": list(tree.tip_labels),
        "parents": list(tree.parents),
        "lengths": list(tree.lengths),
        "pairs": [[asdict(first), asdict(second)] for first, second in pairs],
        "family": None if family is None else family.to_dict(),
        "m_max": m_max,
        "bins": bins,
        "grid_points": grid_points,
    }
    digest = hashlib.sha256(
        json.dumps(inputs, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()[:HASH_LENGTH]

    tables = {
        "age_histogram": age_histogram(tree, bins),
        "age_profile": age_divergence_profile(
            tree, np.linspace(0.0, tree.height, grid_points)
        ),
        "distances": distance_table(tree, pairs),
    }
    if family is not None:
        top = m_max or 12
        sequences = []
        for index, (first, second) in enumerate(pairs):
            sequence = rao_sum_sequence(family, first, second, top)
            sequence.insert(0, "pair", index)
            sequences.append(sequence)
        if sequences:
            tables["z_m"] = pd.concat(sequences, ignore_index=True)
    out_dir = Path(out_dir)
    written = {}
    for name, table in tables.items():
        written[name] = _with_hash(table, digest)
        write_frame(written[name], out_dir / f"{name}.csv")
    LOGGER.info("Micro report %s written to %s", digest, out_dir)
    return written
