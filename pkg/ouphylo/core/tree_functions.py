from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..utils.exceptions import InputError, SubsampleError, TreeValidationError
from .tool_functions import LOGGER, square_frame
from .tree_objects import Tree, TreeMetrics

DEFAULT_ULTRAMETRIC_TOL = 1e-8
SUBSAMPLE_MAX_TRIES = 10_000


def _read_only(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def tree_metrics(tree: Tree, ultrametric_tol: float = DEFAULT_ULTRAMETRIC_TOL) -> TreeMetrics:
    """Distances, shared times and node ages of a tree.

    An internal node with k children enters the age list k - 1 times, so
    the list always has n_tips - 1 entries."""
    depths = tree.depths
    below = tree.descendant_tips
    tip_depths = np.array([depths[tip] for tip in tree.tips])

    shared = np.zeros((tree.n_tips, tree.n_tips))
    for node in tree.internal_nodes:
        kids = tree.children[node]
        for first in range(len(kids)):
            rows = list(below[kids[first]])
            for second in range(first + 1, len(kids)):
                columns = list(below[kids[second]])
                shared[np.ix_(rows, columns)] = depths[node]
                shared[np.ix_(columns, rows)] = depths[node]
    np.fill_diagonal(shared, tip_depths)

    distances = tip_depths[:, None] + tip_depths[None, :] - 2.0 * shared
    np.fill_diagonal(distances, 0.0)

    ages: List[float] = []
    for node in tree.internal_nodes:
        ages.extend([float(tree.ages[node])] * (len(tree.children[node]) - 1))
    ages.sort(reverse=True)

    height = tree.height
    if height > 0:
        spread = float(np.max(np.abs(tip_depths - height))) / height
    else:
        spread = 0.0
    return TreeMetrics(
        labels=tree.tip_labels,
        distances=_read_only(distances),
        shared_times=_read_only(shared),
        tip_depths=_read_only(tip_depths),
        ages=tuple(ages),
        height=height,
        ultrametric=spread <= ultrametric_tol,
    )


def metrics_frames(metrics: TreeMetrics) -> Dict[str, pd.DataFrame]:
    """CSV-ready tables: square matrices headed by tip labels, plus the ages."""
    return {
        "distances": square_frame(metrics.distances, metrics.labels),
        "shared_times": square_frame(metrics.shared_times, metrics.labels),
        "ages": pd.DataFrame({"age": list(metrics.ages)}),
    }


def require_ultrametric(tree: Tree, ultrametric_tol: float = DEFAULT_ULTRAMETRIC_TOL) -> None:
    height = tree.height
    if height <= 0:
        return
    spread = max(abs(tree.depths[tip] - height) for tip in tree.tips) / height
    if spread > ultrametric_tol:
        raise TreeValidationError(
            f"Tree is not ultrametric: tip depths differ by {spread:.3g} relative to height"
        )


def induced_subtree(tree: Tree, labels: Sequence[str]) -> Tree:
    """Subtree spanned by the given tips, with degree-2 nodes suppressed."""
    wanted = set(labels)
    unknown = wanted - set(tree.tip_labels)
    if unknown:
        raise InputError(f"Unknown tip labels: {sorted(unknown)[:5]}")
    if not wanted:
        raise InputError("Cannot take the subtree of zero tips")

    kept = np.zeros(len(tree), dtype=int)
    for node in tree.postorder():
        if tree.is_tip(node):
            kept[node] = int(tree.labels[node] in wanted)
        else:
            kept[node] = sum(kept[child] for child in tree.children[node])

    def kept_children(node: int) -> List[int]:
        return [child for child in tree.children[node] if kept[child]]

    top = 0
    while not tree.is_tip(top) and len(kept_children(top)) == 1:
        top = kept_children(top)[0]

    parents: List[int] = [-1]
    lengths: List[float] = [0.0]
    names: List[Optional[str]] = [tree.labels[top]]
    pending = [(child, 0) for child in reversed(kept_children(top))]
    while pending:
        node, parent = pending.pop()
        length = tree.lengths[node]
        while not tree.is_tip(node) and len(kept_children(node)) == 1:
            node = kept_children(node)[0]
            length += tree.lengths[node]
        new_id = len(parents)
        parents.append(parent)
        lengths.append(length)
        names.append(tree.labels[node])
        for child in reversed(kept_children(node)):
            pending.append((child, new_id))
    root_length = tree.root_length if top == 0 else None
    return Tree(parents, lengths, names, root_length=root_length)


def subsample_nested(
    tree: Tree,
    sizes: Sequence[int],
    seed: Union[int, np.random.SeedSequence],
    max_tries: int = SUBSAMPLE_MAX_TRIES,
) -> List[Tree]:
    """Nested random subtrees whose tips all have the original root as MRCA.

    Each subset is drawn from the previous one by rejection sampling on the
    root-MRCA condition."""
    require_ultrametric(tree)
    sizes = [int(size) for size in sizes]
    if not sizes:
        raise InputError("At least one subsample size is needed")
    if any(later >= earlier for earlier, later in zip(sizes, sizes[1:])):
        raise InputError(f"Subsample sizes must be strictly descending: {sizes}")
    if sizes[-1] < 2 or sizes[0] > tree.n_tips:
        raise InputError(f"Subsample sizes must lie in [2, {tree.n_tips}]: {sizes}")
    if len(tree.children[0]) < 2:
        raise SubsampleError("The root has a single child; no subset has it as MRCA")

    group = np.empty(tree.n_tips, dtype=int)
    for index, child in enumerate(tree.children[0]):
        group[list(tree.descendant_tips[child])] = index

    rng = np.random.default_rng(seed)
    current = np.arange(tree.n_tips)
    subtrees: List[Tree] = []
    for size in sizes:
        if size < len(current):
            for attempt in range(max_tries):
                chosen = np.sort(rng.choice(current, size=size, replace=False))
                if len(np.unique(group[chosen])) >= 2:
                    break
            else:
                raise SubsampleError(
                    f"No subset of size {size} with the root as MRCA after {max_tries} tries"
                )
            if attempt > 0:
                LOGGER.debug("Subsample of size %d accepted after %d retries", size, attempt)
            current = chosen
        subtrees.append(induced_subtree(tree, [tree.tip_labels[c] for c in current]))
    return subtrees


def star_tree(n_tips: int, height: float = 1.0, prefix: str = "t") -> Tree:
    """Star with equal tip branches."""
    if n_tips < 2:
        raise InputError("A star needs at least two tips")
    return Tree(
        [-1] + [0] * n_tips,
        [0.0] + [height] * n_tips,
        [None] + [f"{prefix}{i + 1}" for i in range(n_tips)],
    )


def random_ultrametric_tree(
    n_tips: int, seed: int, height: float = 1.0, prefix: str = "t"
) -> Tree:
    """Random binary ultrametric tree built by merging random pairs of lineages.

    Merge ages are sorted uniform draws; the last merge is the root at
    the requested height."""
    if n_tips < 2:
        raise InputError("A random tree needs at least two tips")
    rng = np.random.default_rng(seed)
    merge_ages = np.sort(rng.uniform(0.0, height, size=n_tips - 2)).tolist() + [height]

    children: Dict[int, List[int]] = {}
    age = {i: 0.0 for i in range(n_tips)}
    lineages = list(range(n_tips))
    next_id = n_tips
    for merge_age in merge_ages:
        first, second = sorted(rng.choice(len(lineages), size=2, replace=False), reverse=True)
        pair = [lineages.pop(first), lineages.pop(second)]
        children[next_id] = pair
        age[next_id] = merge_age
        lineages.append(next_id)
        next_id += 1
    root = lineages[0]

    parents: List[int] = []
    lengths: List[float] = []
    names: List[Optional[str]] = []
    pending = [(root, -1, root)]
    while pending:
        node, parent, above = pending.pop()
        new_id = len(parents)
        parents.append(parent)
        lengths.append(age[above] - age[node])
        names.append(None if node in children else f"{prefix}{node + 1}")
        for child in reversed(children.get(node, [])):
            pending.append((child, new_id, node))
    return Tree(parents, lengths, names)
