import json

import numpy as np
import pandas as pd
import pytest

from ..core.experiments import (
    RAW_COLUMNS,
    STUDY_RAW_COLUMNS,
    STUDY_SUMMARY_COLUMNS,
    SUMMARY_COLUMNS,
    ExperimentConfig,
    load_spec,
    micro_report,
    run_subsample_experiment,
    run_symtree_reml_study,
)
from ..core.ou_covariance import OUParams
from ..core.symmetric_tree import DenseTipFamily
from ..core.tree_objects import Tree
from ..utils.exceptions import ConfigError, InputError

SMALL_SPEC = {"degrees": [2, 4], "ages": [1.0, 0.5]}


def _subsample_config(out_dir, **changes):
    record = {
        "seed": 11,
        "out_dir": str(out_dir),
        "spec": SMALL_SPEC,
        "alpha": 0.5,
        "reps": 3,
        "sequences": 2,
        "sizes": [8, 5, 3],
    }
    record.update(changes)
    return ExperimentConfig.from_dict(record)


def test_config_reports_every_problem():
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_dict({"seed": 1, "spec": SMALL_SPEC, "reps": 0, "gamma": -1.0})
    assert "reps: must be at least 1, got 0" in error.value.problems
    assert any(problem.startswith("gamma:") for problem in error.value.problems)


def test_config_needs_a_seed():
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_dict({"spec": SMALL_SPEC})
    assert error.value.problems == ["seed: required"]


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="colour"):
        ExperimentConfig.from_dict({"seed": 1, "spec": SMALL_SPEC, "colour": "red"})


def test_config_needs_one_tree_source():
    with pytest.raises(ConfigError, match="tree_path"):
        ExperimentConfig.from_dict({"seed": 1})


def test_config_sizes_must_descend():
    with pytest.raises(ConfigError, match="sizes"):
        ExperimentConfig.from_dict({"seed": 1, "spec": SMALL_SPEC, "sizes": [3, 5]})


def test_config_file_round_trip(tmp_path):
    config = _subsample_config(tmp_path / "out")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.to_dict()), encoding="utf-8")
    assert ExperimentConfig.from_file(path) == config
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(path)


def test_config_hash_ignores_output_directory(tmp_path):
    first = _subsample_config(tmp_path / "a")
    second = _subsample_config(tmp_path / "b")
    assert first.config_hash == second.config_hash
    assert len(first.config_hash) == 12
    assert _subsample_config(tmp_path / "a", seed=12).config_hash != first.config_hash


def test_subsample_experiment_is_reproducible(tmp_path):
    config = _subsample_config(tmp_path / "single")
    tables = run_subsample_experiment(config, workers=1)
    pooled = _subsample_config(tmp_path / "pooled")
    run_subsample_experiment(pooled, workers=3)
    again = _subsample_config(tmp_path / "again")
    run_subsample_experiment(again, workers=1)
    for name in ("fits.csv", "summary.csv"):
        reference = (tmp_path / "single" / name).read_bytes()
        assert (tmp_path / "pooled" / name).read_bytes() == reference
        assert (tmp_path / "again" / name).read_bytes() == reference

    fits = tables["fits"]
    assert list(fits.columns) == RAW_COLUMNS
    assert len(fits) == 2 * 3 * 3
    assert (fits["config_hash"] == config.config_hash).all()
    assert sorted(fits["size"].unique()) == [3, 5, 8]
    assert list(tables["summary"].columns) == SUMMARY_COLUMNS
    assert (tables["summary"]["config_hash"] == config.config_hash).all()

    written = json.loads((tmp_path / "single" / "config.json").read_text(encoding="utf-8"))
    assert written["config_hash"] == config.config_hash


def test_subsample_summary_follows_from_the_fits(tmp_path):
    config = _subsample_config(tmp_path)
    run_subsample_experiment(config, workers=1)
    fits = pd.read_csv(tmp_path / "fits.csv", float_precision="round_trip")
    summary = pd.read_csv(tmp_path / "summary.csv", float_precision="round_trip").set_index(
        "size"
    )
    for size, group in fits.groupby("size"):
        row = summary.loc[size]
        assert row["n_fits"] == len(group)
        assert row["var_mu_hat"] == pytest.approx(group["mu_hat"].var(ddof=1), rel=1e-12)
        assert row["mean_sigma2_hat"] == pytest.approx(group["sigma2_hat"].mean(), rel=1e-12)
        inner = group[~group["boundary_flag"]]
        if len(inner) >= 3:
            expected = np.corrcoef(np.log(inner["alpha_hat"]), np.log(inner["gamma_hat"]))[0, 1]
            assert row["cor_log_alpha_gamma"] == pytest.approx(expected, rel=1e-9)
        else:
            assert np.isnan(row["cor_log_alpha_gamma"])
        assert (group["sigma2_hat"] == 2.0 * group["alpha_hat"] * group["gamma_hat"]).all()


def test_subsample_bound_column_matches_the_tree_size(tmp_path):
    tables = run_subsample_experiment(_subsample_config(tmp_path), workers=1)
    fits = tables["fits"]
    per_tree = fits.groupby(["sequence", "size"])["bound"].nunique()
    assert (per_tree == 1).all()
    assert (fits["bound"] > 0).all()


def test_subsample_with_one_fit_per_size(tmp_path):
    config = _subsample_config(tmp_path, reps=1, sequences=1, sizes=[8])
    tables = run_subsample_experiment(config, workers=1)
    assert len(tables["fits"]) == 1
    row = tables["summary"].iloc[0]
    assert row["n_fits"] == 1
    assert np.isnan(row["var_mu_hat"])
    assert np.isnan(row["cor_log_alpha_gamma"])


def test_subsample_on_a_newick_file(tmp_path):
    tree_path = tmp_path / "tree.nwk"
    tree_path.write_text("((A:1,B:1):1,((C:0.5,D:0.5):0.5,E:1):1);", encoding="utf-8")
    config = ExperimentConfig.from_dict(
        {
            "seed": 3,
            "out_dir": str(tmp_path / "out"),
            "tree_path": str(tree_path),
            "reps": 2,
            "sequences": 1,
            "sizes": [5, 4],
            "mode": "reml",
        }
    )
    tables = run_subsample_experiment(config, workers=1)
    assert tables["fits"]["size"].tolist() == [5, 5, 4, 4]


def _study_config(out_dir, **changes):
    record = {
        "seed": 5,
        "out_dir": str(out_dir),
        "spec": {"degrees": [4, 4], "ages": [1.0, 0.5]},
        "alpha": 0.5,
        "reps": 5,
        "dm_grid": [4, 8],
    }
    record.update(changes)
    return ExperimentConfig.from_dict(record)


def test_symtree_study_tables(tmp_path):
    config = _study_config(tmp_path)
    tables = run_symtree_reml_study(config, workers=2)
    fits, summary = tables["fits"], tables["summary"]
    assert list(fits.columns) == STUDY_RAW_COLUMNS
    assert list(summary.columns) == STUDY_SUMMARY_COLUMNS
    assert len(fits) == 10
    assert summary["n"].tolist() == [16, 32]
    assert summary["n_tilde"].tolist() == [4, 4]
    nu = 1.0 * -np.expm1(-0.5)
    np.testing.assert_allclose(summary["nu"], nu)
    np.testing.assert_allclose(summary["nu_limit"], 2.0 * nu ** 2)
    assert (summary["config_hash"] == config.config_hash).all()
    assert (tmp_path / "study_fits.csv").exists()
    assert (tmp_path / "study_summary.csv").exists()


def test_symtree_study_is_reproducible(tmp_path):
    run_symtree_reml_study(_study_config(tmp_path / "a"), workers=1)
    run_symtree_reml_study(_study_config(tmp_path / "b"), workers=4)
    for name in ("study_fits.csv", "study_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_symtree_study_rejects_a_diverging_last_level(tmp_path):
    with pytest.raises(ConfigError, match="diverging_levels"):
        run_symtree_reml_study(_study_config(tmp_path, diverging_levels=[2]), workers=1)


def test_symtree_study_needs_a_spec(tmp_path):
    config = ExperimentConfig.from_dict({"seed": 1, "tree_path": "tree.nwk", "reps": 2})
    with pytest.raises(ConfigError, match="spec"):
        run_symtree_reml_study(config, workers=1)


@pytest.mark.slow
def test_reml_rate_on_growing_last_level(tmp_path):
    config = ExperimentConfig.from_dict(
        {
            "seed": 2024,
            "out_dir": str(tmp_path),
            "spec": {"degrees": [32, 128], "ages": [2.0, 0.5]},
            "alpha": 0.5,
            "gamma": 1.0,
            "reps": 500,
            "dm_grid": [8, 32, 128],
        }
    )
    summary = run_symtree_reml_study(config, workers=4)["summary"]
    largest = summary.iloc[-1]
    assert largest["n"] == 4096
    assert largest["var_nu_scaled"] == pytest.approx(largest["nu_finite"], rel=0.25)
    assert largest["var_alpha_scaled"] == pytest.approx(largest["alpha_finite"], rel=0.35)
    assert largest["cor_log_gamma_lambda"] <= -0.99
    assert largest["nu_finite"] == pytest.approx(largest["nu_limit"], rel=0.05)


def test_load_spec_variants(tmp_path):
    spec, family = load_spec('{"degrees": [2, 3], "ages": [2.0, 1.0]}')
    assert spec.n_tips == 6 and family is None
    spec, family = load_spec('{"d": 2, "q": 0.5, "m": 3}')
    assert family == DenseTipFamily(d=2, q=0.5)
    assert spec.ages == (0.5, 0.25, 0.125)
    path = tmp_path / "spec.json"
    path.write_text('{"m": 1, "degrees": [5], "ages": [1.0]}', encoding="utf-8")
    assert load_spec(str(path))[0].n_tips == 5


@pytest.mark.parametrize(
    "text",
    [
        '{"d": 2, "q": 0.5}',
        '{"degrees": [2]}',
        '{"m": 3, "degrees": [2, 2], "ages": [2.0, 1.0]}',
        '{"size": 4}',
        "{broken",
        "no/such/spec.json",
    ],
)
def test_load_spec_errors(text):
    with pytest.raises(InputError):
        load_spec(text)


def test_micro_report_files(tmp_path, four_tip_tree):
    first = OUParams(mu=0.0, alpha=0.5, gamma=1.0)
    second = OUParams(mu=0.0, alpha=1.0, gamma=0.5)
    tables = micro_report(
        four_tip_tree,
        [(first, first), (first, second)],
        tmp_path,
        family=DenseTipFamily(d=2, q=0.5),
        m_max=5,
        bins=4,
        grid_points=5,
    )
    for name in ("age_histogram", "age_profile", "distances", "z_m"):
        assert (tmp_path / f"{name}.csv").exists()
    digests = set()
    for table in tables.values():
        digests.update(table["config_hash"])
    assert len(digests) == 1
    assert len(tables["z_m"]) == 2 * 4
    assert tables["age_histogram"]["count"].sum() == 3
    assert tables["age_profile"]["t"].tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert tables["distances"]["r"].iloc[0] == pytest.approx(0.0)


def test_micro_report_hash_depends_on_the_topology(tmp_path):
    lengths = [0.0] + [1.0] * 6
    paired = Tree([-1, 0, 1, 1, 0, 4, 4], lengths, [None, None, "A", "B", None, "C", "D"])
    lopsided = Tree([-1, 0, 1, 1, 1, 0, 5], lengths, [None, None, "A", "B", "C", None, "D"])
    assert paired.tip_labels == lopsided.tip_labels
    params = OUParams(mu=0.0, alpha=0.5, gamma=1.0)
    first = micro_report(paired, [(params, params)], tmp_path / "paired")
    second = micro_report(lopsided, [(params, params)], tmp_path / "lopsided")
    assert first["distances"]["config_hash"][0] != second["distances"]["config_hash"][0]


def test_micro_report_without_family(tmp_path, four_tip_tree):
    params = OUParams(mu=0.0, alpha=0.5, gamma=1.0)
    tables = micro_report(four_tip_tree, [(params, params)], tmp_path)
    assert set(tables) == {"age_histogram", "age_profile", "distances"}
    assert not (tmp_path / "z_m.csv").exists()
