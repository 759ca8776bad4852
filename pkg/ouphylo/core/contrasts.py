from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from ..utils.exceptions import InconsistentInputsError, InputError, ModelError
from .tool_functions import LOGGER, TipData, tip_values
from .tree_functions import require_ultrametric
from .tree_objects import Tree

ALPHA_BRACKET = (1e-10, 1e4)


@dataclass(frozen=True)
class Contrast:
    """Difference of two tips whose most recent common ancestor is node."""

    first: str
    second: str
    node: int
    age: float
    path: FrozenSet[int]
    path_length: float


@dataclass(frozen=True)
class ContrastSet:
    tree: Tree
    contrasts: Tuple[Contrast, ...]

    def __len__(self) -> int:
        return len(self.contrasts)

    def __iter__(self):
        return iter(self.contrasts)

    @property
    def ages(self) -> np.ndarray:
        return np.array([contrast.age for contrast in self.contrasts])

    def edges_disjoint(self) -> bool:
        used = set()
        for contrast in self.contrasts:
            if used & contrast.path:
                return False
            used |= contrast.path
        return True

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "tip_i": [c.first for c in self.contrasts],
                "tip_j": [c.second for c in self.contrasts],
                "T_C": [c.age for c in self.contrasts],
                "path_length": [c.path_length for c in self.contrasts],
            },
            columns=["tip_i", "tip_j", "T_C", "path_length"],
        )


def _smallest_labels(tree: Tree) -> List[str]:
    return [min(tree.tip_labels[c] for c in tips) for tips in tree.descendant_tips]


def _make_contrast(tree: Tree, node: int, first: int, second: int) -> Contrast:
    path = tree.path_edges(first, second)
    return Contrast(
        first=str(tree.labels[first]),
        second=str(tree.labels[second]),
        node=node,
        age=float(tree.ages[node]),
        path=path,
        path_length=float(sum(tree.lengths[edge] for edge in path)),
    )


def select_contrasts_window(tree: Tree, a: float, b: float) -> ContrastSet:
    """Greedy disjoint contrasts at internal nodes aged in the open window (a, b).

    The youngest eligible node is taken first, ties going to the node with
    the smallest tip label below it. A node with k live children gives
    floor(k / 2) contrasts; for odd k the unpaired child stays live and
    can still carry a path for an ancestor."""
    if not a < b:
        raise InputError(f"Window bounds must satisfy a < b, got ({a}, {b})")
    require_ultrametric(tree)
    smallest = _smallest_labels(tree)
    live: Dict[int, List[int]] = {
        node: list(tree.children[node]) for node in tree.internal_nodes
    }
    # smallest tip label still reachable through live edges
    smallest_live = list(smallest)

    def refresh(node: int) -> None:
        while node >= 0 and live[node]:
            label = min(smallest_live[child] for child in live[node])
            if label == smallest_live[node]:
                return
            smallest_live[node] = label
            node = tree.parents[node]

    def drop(node: int) -> None:
        # a node without live children is dead for every ancestor as well
        parent = tree.parents[node]
        while parent >= 0:
            live[parent].remove(node)
            if live[parent]:
                refresh(parent)
                return
            node, parent = parent, tree.parents[parent]

    def reach(node: int) -> int:
        while not tree.is_tip(node):
            node = min(live[node], key=lambda child: smallest_live[child])
        return node

    window = sorted(
        (node for node in tree.internal_nodes if a < tree.ages[node] < b),
        key=lambda node: (tree.ages[node], smallest[node]),
    )
    contrasts: List[Contrast] = []
    for node in window:
        kids = sorted(live[node], key=lambda child: smallest_live[child])
        if len(kids) < 2:
            continue
        for first, second in zip(kids[0::2], kids[1::2]):
            contrasts.append(_make_contrast(tree, node, reach(first), reach(second)))
        if len(kids) % 2:
            live[node] = [kids[-1]]
            refresh(node)
        else:
            live[node] = []
            drop(node)
    LOGGER.debug(
        "Window (%g, %g): %d contrasts from %d nodes", a, b, len(contrasts), len(window)
    )
    return ContrastSet(tree, tuple(contrasts))


def select_contrasts_above(tree: Tree, t: float) -> ContrastSet:
    """Disjoint contrasts at nodes older than t, built from the root down.

    Each contrast joins the two youngest children of a subtree root and
    continues through the youngest child at every junction; the other
    children start new subtrees."""
    if t < 0:
        raise InputError(f"t must be nonnegative, got {t}")
    require_ultrametric(tree)
    smallest = _smallest_labels(tree)

    def order(node: int) -> Tuple[float, str]:
        age = 0.0 if tree.is_tip(node) else float(tree.ages[node])
        return age, smallest[node]

    contrasts: List[Contrast] = []
    roots = [0]
    while roots:
        root = roots.pop()
        if tree.is_tip(root) or not tree.ages[root] > t:
            continue
        kids = sorted(tree.children[root], key=order)
        roots.extend(reversed(kids[2:]))
        ends = []
        for start in kids[:2]:
            node = start
            while not tree.is_tip(node):
                below = sorted(tree.children[node], key=order)
                roots.extend(reversed(below[1:]))
                node = below[0]
            ends.append(node)
        contrasts.append(_make_contrast(tree, root, ends[0], ends[1]))
    contrasts.sort(key=lambda contrast: contrast.node)
    return ContrastSet(tree, tuple(contrasts))


def contrast_matrix(contrast_set: ContrastSet, data: TipData) -> np.ndarray:
    """Contrast values, one column per contrast; leading axes of data are kept."""
    values = tip_values(contrast_set.tree, data)
    index = contrast_set.tree.tip_index
    first = [index[c.first] for c in contrast_set]
    second = [index[c.second] for c in contrast_set]
    return values[..., first] - values[..., second]


def contrast_values(contrast_set: ContrastSet, data: TipData) -> List[Tuple[float, float]]:
    """(C, T_C) for every contrast of a single data vector."""
    values = contrast_matrix(contrast_set, data)
    if values.ndim != 1:
        raise InputError("contrast_values takes one data vector; use contrast_matrix")
    return [(float(value), c.age) for value, c in zip(values, contrast_set)]


@dataclass(frozen=True)
class FtEstimate:
    value: float
    standard_error: float
    n_contrasts: int
    t0: float


def estimate_f_t(
    contrast_set: ContrastSet,
    data: TipData,
    t0: float,
    window: Optional[Tuple[float, float]] = None,
) -> FtEstimate:
    """Moment estimate of f_t0 from contrasts aged near t0.

    For t0 = 0 every squared contrast is scaled by 4 T_C, a first-order
    expansion whose bias grows like alpha T_C."""
    if t0 < 0:
        raise InputError(f"t0 must be nonnegative, got {t0}")
    if not len(contrast_set):
        raise InputError("No contrasts to estimate from")
    ages = contrast_set.ages
    if window is not None and np.any((ages < window[0]) | (ages > window[1])):
        raise InputError(f"Some contrast ages fall outside the window {window}")
    values = np.asarray(contrast_matrix(contrast_set, data), dtype=float)
    if values.ndim != 1:
        raise InputError("estimate_f_t takes one data vector")
    if t0 > 0:
        estimate = float(np.sum(values ** 2) / (2.0 * len(values)))
    else:
        if np.any(ages <= 0):
            raise InputError("Contrasts at age 0 cannot estimate f_0")
        estimate = float(np.mean(values ** 2 / (4.0 * ages)))
    return FtEstimate(
        value=estimate,
        standard_error=estimate * float(np.sqrt(2.0 / len(values))),
        n_contrasts=len(values),
        t0=t0,
    )


def _f_shape(alpha: float, t: float) -> float:
    """f_t / gamma."""
    return alpha if t == 0 else float(-np.expm1(-2.0 * alpha * t))


def invert_two_ages(f1: float, t1: float, f2: float, t2: float) -> Tuple[float, float]:
    """The (gamma, alpha) with f_t1 = f1 and f_t2 = f2."""
    if t1 == t2:
        raise ModelError("The two ages must differ")
    if min(t1, t2) < 0:
        raise ModelError("Ages must be nonnegative")
    if not (f1 > 0 and f2 > 0):
        raise ModelError(f"f values must be positive, got {f1}, {f2}")
    target = np.log(f1) - np.log(f2)

    def mismatch(alpha: float) -> float:
        return np.log(_f_shape(alpha, t1)) - np.log(_f_shape(alpha, t2)) - target

    low, high = ALPHA_BRACKET
    if np.sign(mismatch(low)) == np.sign(mismatch(high)):
        raise InconsistentInputsError(
            f"No alpha in [{low:g}, {high:g}] matches f1={f1:g} at t1={t1:g} "
            f"and f2={f2:g} at t2={t2:g}"
        )
    alpha = optimize.brentq(mismatch, low, high, xtol=1e-14, rtol=1e-14, maxiter=500)
    return f1 / _f_shape(alpha, t1), float(alpha)
