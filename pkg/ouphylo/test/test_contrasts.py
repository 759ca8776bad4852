import numpy as np
import pytest

from ..core.contrasts import (
    contrast_matrix,
    contrast_values,
    estimate_f_t,
    invert_two_ages,
    select_contrasts_above,
    select_contrasts_window,
)
from ..core.microergodicity import f_t
from ..core.newick import parse_newick
from ..core.ou_covariance import OUParams, simulate_tips
from ..core.symmetric_tree import SymmetricTreeSpec, build_symmetric_tree
from ..core.tree_functions import random_ultrametric_tree, star_tree, tree_metrics
from ..utils.exceptions import InconsistentInputsError, InputError, ModelError


def _window_sizes(tree, a, b):
    return sum(1 for age in tree_metrics(tree).ages if a < age < b)


def test_window_on_four_tip_tree(four_tip_tree):
    contrasts = select_contrasts_window(four_tip_tree, 0.5, 2.5)
    assert len(contrasts) == 2
    assert [(c.first, c.second) for c in contrasts] == [("t1", "t2"), ("t3", "t4")]
    np.testing.assert_allclose(contrasts.ages, [1.0, 1.0])
    assert contrasts.edges_disjoint()
    assert len(contrasts) >= 0.5 * _window_sizes(four_tip_tree, 0.5, 2.5)


def test_window_takes_the_root_when_children_stay_free(four_tip_tree):
    contrasts = select_contrasts_window(four_tip_tree, 1.5, 2.5)
    assert len(contrasts) == 1
    assert contrasts.contrasts[0].age == pytest.approx(2.0)
    assert contrasts.contrasts[0].path_length == pytest.approx(4.0)


def test_above_on_four_tip_tree(four_tip_tree):
    contrasts = select_contrasts_above(four_tip_tree, 0.0)
    assert len(contrasts) == 1
    (contrast,) = contrasts
    assert (contrast.first, contrast.second) == ("t1", "t3")
    assert contrast.age == pytest.approx(2.0)
    assert np.sum((contrasts.ages - 0.0) ** 2) >= 0.25 * (2.0 ** 2 + 2.0 ** 2 + 1.0 + 1.0)


def test_above_skips_nodes_not_older_than_t(four_tip_tree):
    assert len(select_contrasts_above(four_tip_tree, 2.0)) == 0


def test_window_pairs_children_of_a_star():
    contrasts = select_contrasts_window(star_tree(5), 0.5, 1.5)
    assert len(contrasts) == 2
    assert [(c.first, c.second) for c in contrasts] == [("t1", "t2"), ("t3", "t4")]
    assert contrasts.edges_disjoint()


def test_window_passes_odd_child_upwards():
    spec = SymmetricTreeSpec((2, 3), (2.0, 1.0))
    tree = build_symmetric_tree(spec)
    contrasts = select_contrasts_window(tree, 0.5, 2.5)
    assert [(c.first, c.second) for c in contrasts] == [("t1", "t2"), ("t4", "t5"), ("t3", "t6")]
    assert contrasts.ages.tolist() == [1.0, 1.0, 2.0]
    assert contrasts.edges_disjoint()


def test_window_skips_nodes_whose_children_are_used_up():
    tree = parse_newick("(((A:1,B:1):1,(C:1,D:1):1):1,E:3);")
    contrasts = select_contrasts_window(tree, 0.5, 3.5)
    assert [(c.first, c.second) for c in contrasts] == [("A", "B"), ("C", "D")]
    assert contrasts.edges_disjoint()
    assert len(contrasts) >= 0.5 * _window_sizes(tree, 0.5, 3.5)


def test_window_reaches_past_used_up_subtrees():
    tree = parse_newick("((((A:1,B:1):1,(C:1,D:1):1):1,E:3):1,F:4);")
    contrasts = select_contrasts_window(tree, 0.5, 4.5)
    assert [(c.first, c.second) for c in contrasts] == [("A", "B"), ("C", "D"), ("E", "F")]
    assert contrasts.ages.tolist() == [1.0, 1.0, 4.0]
    assert contrasts.contrasts[-1].path_length == pytest.approx(8.0)
    assert contrasts.edges_disjoint()


def test_window_bounds_are_checked(four_tip_tree):
    with pytest.raises(InputError):
        select_contrasts_window(four_tip_tree, 1.0, 1.0)
    with pytest.raises(InputError):
        select_contrasts_above(four_tip_tree, -1.0)


def test_contrast_frame(four_tip_tree):
    frame = select_contrasts_window(four_tip_tree, 0.5, 2.5).to_frame()
    assert list(frame.columns) == ["tip_i", "tip_j", "T_C", "path_length"]
    assert frame["path_length"].tolist() == [2.0, 2.0]


def test_selection_bounds_hold_on_random_trees():
    rng = np.random.default_rng(2)
    for index in range(1000):
        n_tips = int(rng.integers(2, 65))
        tree = random_ultrametric_tree(n_tips, seed=index, height=1.0)
        ages = np.array(tree_metrics(tree).ages)

        a, b = np.sort(rng.uniform(-0.1, 1.1, size=2))
        window = select_contrasts_window(tree, a, b)
        assert window.edges_disjoint()
        assert len(window) >= 0.5 * np.sum((ages > a) & (ages < b))
        assert np.all((window.ages > a) & (window.ages < b))

        t = float(rng.uniform(0.0, 1.0))
        above = select_contrasts_above(tree, t)
        assert above.edges_disjoint()
        assert np.all(above.ages > t)
        older = ages[ages > t]
        bound = 0.25 * ((tree.height - t) ** 2 + np.sum((older - t) ** 2))
        assert np.sum((above.ages - t) ** 2) >= bound - 1e-12


def test_contrast_values(four_tip_tree):
    contrasts = select_contrasts_window(four_tip_tree, 0.5, 2.5)
    data = {"t1": 1.0, "t2": 0.0, "t3": 3.0, "t4": 1.0}
    assert contrast_values(contrasts, data) == [(1.0, 1.0), (2.0, 1.0)]
    rows = np.array([[1.0, 0.0, 3.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_allclose(contrast_matrix(contrasts, rows), [[1.0, 2.0], [0.0, 0.0]])
    with pytest.raises(InputError):
        contrast_values(contrasts, rows)


def test_estimate_f_t(four_tip_tree):
    contrasts = select_contrasts_window(four_tip_tree, 0.5, 2.5)
    data = np.array([1.0, 0.0, 3.0, 1.0])
    estimate = estimate_f_t(contrasts, data, t0=0.5)
    assert estimate.value == pytest.approx(1.25)
    assert estimate.standard_error == pytest.approx(1.25)
    assert estimate.n_contrasts == 2
    assert estimate_f_t(contrasts, data, t0=0.0).value == pytest.approx(0.625)
    with pytest.raises(InputError):
        estimate_f_t(contrasts, data, t0=0.5, window=(0.0, 0.9))


def test_estimate_f_t_is_close_on_simulated_data():
    spec = SymmetricTreeSpec((64, 2), (3.0, 0.4))
    tree = build_symmetric_tree(spec)
    params = OUParams(mu=0.0, alpha=0.5, gamma=2.0)
    data = simulate_tips(tree, params, reps=1, seed=19)[0]
    contrasts = select_contrasts_window(tree, 0.3, 0.5)
    assert len(contrasts) == 64
    estimate = estimate_f_t(contrasts, data, t0=0.4)
    expected = f_t(params.gamma, params.alpha, 0.4)
    assert abs(estimate.value - expected) < 4 * expected * np.sqrt(2 / 64)


def test_invert_two_ages_recovers_parameters():
    gamma, alpha = 1.0, 0.1
    f1, f2 = f_t(gamma, alpha, 1.0), f_t(gamma, alpha, 3.0)
    assert invert_two_ages(f1, 1.0, f2, 3.0) == pytest.approx((gamma, alpha), rel=1e-8)
    assert invert_two_ages(f2, 3.0, f1, 1.0) == pytest.approx((gamma, alpha), rel=1e-8)


def test_invert_two_ages_with_tip_limit():
    gamma, alpha = 2.5, 0.7
    f1, f0 = f_t(gamma, alpha, 0.8), f_t(gamma, alpha, 0.0)
    assert invert_two_ages(f1, 0.8, f0, 0.0) == pytest.approx((gamma, alpha), rel=1e-8)


def test_invert_two_ages_scales_with_f():
    base = invert_two_ages(0.3, 0.5, 0.5, 2.0)
    scaled = invert_two_ages(3.0, 0.5, 5.0, 2.0)
    assert scaled[0] == pytest.approx(10 * base[0], rel=1e-8)
    assert scaled[1] == pytest.approx(base[1], rel=1e-8)


def test_invert_two_ages_errors():
    with pytest.raises(ModelError):
        invert_two_ages(1.0, 1.0, 2.0, 1.0)
    with pytest.raises(ModelError):
        invert_two_ages(0.0, 1.0, 2.0, 2.0)
    with pytest.raises(InconsistentInputsError):
        invert_two_ages(2.0, 1.0, 1.0, 3.0)


@pytest.mark.slow
def test_selected_contrasts_follow_their_law():
    spec = SymmetricTreeSpec((2, 2, 2, 2), (4.0, 3.0, 2.0, 1.0))
    tree = build_symmetric_tree(spec)
    params = OUParams(mu=1.0, alpha=0.3, gamma=1.5)
    contrasts = select_contrasts_above(tree, 0.0)
    window = select_contrasts_window(tree, 0.5, 4.5)
    draws = simulate_tips(tree, params, reps=100_000, seed=2024, workers=2)
    reps = len(draws)
    for selection in (contrasts, window):
        values = contrast_matrix(selection, draws)
        expected = np.array([2 * f_t(params.gamma, params.alpha, age) for age in selection.ages])
        variances = values.var(axis=0, ddof=1)
        assert np.all(np.abs(variances - expected) < 4.5 * expected * np.sqrt(2 / (reps - 1)))
        correlations = np.corrcoef(values, rowvar=False)
        off = correlations[~np.eye(len(selection), dtype=bool)]
        assert np.all(np.abs(off) < 4.5 / np.sqrt(reps))
