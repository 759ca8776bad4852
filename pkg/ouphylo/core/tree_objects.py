from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import TreeValidationError


class Tree:
    """Rooted tree with branch lengths.

    Nodes are numbered 0..N-1 in preorder: node 0 is the root and every
    parent id is smaller than the ids of its children. lengths[i] is the
    length of the edge above node i; the root entry is ignored by every
    computation and only kept for serialization.
    """

    def __init__(
        self,
        parents: Sequence[int],
        lengths: Sequence[float],
        labels: Sequence[Optional[str]],
        root_length: Optional[float] = None,
    ) -> None:
        self.parents: Tuple[int, ...] = tuple(int(p) for p in parents)
        self.lengths: Tuple[float, ...] = tuple(float(x) for x in lengths)
        self.labels: Tuple[Optional[str], ...] = tuple(labels)
        self.root_length = None if root_length is None else float(root_length)
        self._validate()

    def _validate(self) -> None:
        size = len(self.parents)
        if size == 0:
            raise TreeValidationError("A tree needs at least one node")
        if len(self.lengths) != size or len(self.labels) != size:
            raise TreeValidationError("parents, lengths and labels differ in size")
        if self.parents[0] != -1:
            raise TreeValidationError("Node 0 must be the root")
        for node in range(1, size):
            parent = self.parents[node]
            if not 0 <= parent < node:
                raise TreeValidationError(
                    f"Node {node} has parent {parent}; parents must precede children"
                )
            if not self.lengths[node] >= 0:
                raise TreeValidationError(
                    f"Negative branch length {self.lengths[node]} above node {node}"
                )
        seen = set()
        for tip in self.tips:
            label = self.labels[tip]
            if not label:
                raise TreeValidationError(f"Tip {tip} has no label")
            if label in seen:
                raise TreeValidationError(f"Duplicate tip label '{label}'")
            seen.add(label)

    def __len__(self) -> int:
        return len(self.parents)

    def __repr__(self) -> str:
        return f"Tree(tips={self.n_tips}, nodes={len(self)}, height={self.height:.6g})"

    @cached_property
    def children(self) -> Tuple[Tuple[int, ...], ...]:
        kids: List[List[int]] = [[] for _ in self.parents]
        for node in range(1, len(self)):
            kids[self.parents[node]].append(node)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def tips(self) -> Tuple[int, ...]:
        return tuple(node for node, kids in enumerate(self.children) if not kids)

    @cached_property
    def internal_nodes(self) -> Tuple[int, ...]:
        return tuple(node for node, kids in enumerate(self.children) if kids)

    @property
    def n_tips(self) -> int:
        return len(self.tips)

    @cached_property
    def tip_labels(self) -> Tuple[str, ...]:
        return tuple(str(self.labels[tip]) for tip in self.tips)

    @cached_property
    def tip_index(self) -> Dict[str, int]:
        """Maps a tip label to its column in tip-ordered data."""
        return {label: column for column, label in enumerate(self.tip_labels)}

    @cached_property
    def node_of_label(self) -> Dict[str, int]:
        return {label: tip for tip, label in zip(self.tips, self.tip_labels)}

    def is_tip(self, node: int) -> bool:
        return not self.children[node]

    @cached_property
    def depths(self) -> np.ndarray:
        """Distance from the root to every node."""
        depth = np.zeros(len(self))
        for node in range(1, len(self)):
            depth[node] = depth[self.parents[node]] + self.lengths[node]
        depth.flags.writeable = False
        return depth

    @cached_property
    def height(self) -> float:
        return float(max(self.depths[tip] for tip in self.tips))

    @cached_property
    def ages(self) -> np.ndarray:
        """Node ages measured back from the deepest tip."""
        age = self.height - self.depths
        age[list(self.tips)] = np.maximum(age[list(self.tips)], 0.0)
        age.flags.writeable = False
        return age

    def postorder(self) -> range:
        return range(len(self) - 1, -1, -1)

    @cached_property
    def descendant_tips(self) -> Tuple[Tuple[int, ...], ...]:
        """Tip columns below each node, in tip order."""
        column = {tip: i for i, tip in enumerate(self.tips)}
        below: List[List[int]] = [[] for _ in self.parents]
        for node in self.postorder():
            if self.is_tip(node):
                below[node] = [column[node]]
            else:
                below[node] = [c for child in self.children[node] for c in below[child]]
        return tuple(tuple(b) for b in below)

    def ancestors(self, node: int) -> List[int]:
        """Nodes on the way from node (excluded) up to the root."""
        path = []
        while self.parents[node] != -1:
            node = self.parents[node]
            path.append(node)
        return path

    def mrca(self, first: int, second: int) -> int:
        lineage = set(self.ancestors(first)) | {first}
        node = second
        while node not in lineage:
            node = self.parents[node]
        return node

    def path_edges(self, first: int, second: int) -> frozenset:
        """Edges (named by their lower node) on the path between two nodes."""
        top = self.mrca(first, second)
        edges = set()
        for node in (first, second):
            while node != top:
                edges.add(node)
                node = self.parents[node]
        return frozenset(edges)

    def with_lengths(
        self, lengths: Sequence[float], root_length: Optional[float] = None
    ) -> "Tree":
        return Tree(self.parents, lengths, self.labels, root_length)


@dataclass(frozen=True)
class TreeMetrics:
    labels: Tuple[str, ...]
    distances: np.ndarray
    shared_times: np.ndarray
    tip_depths: np.ndarray
    ages: Tuple[float, ...]
    height: float
    ultrametric: bool

    @property
    def n_tips(self) -> int:
        return len(self.labels)
