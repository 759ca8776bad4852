"""Newick reading and writing.

Dialect: branch lengths are required on every non-root edge, internal
labels are optional and kept, multifurcations are allowed, whitespace
and [bracketed comments] are skipped outside labels, and labels holding
special characters are single-quoted with '' standing for a quote.
"""
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

from ..utils.exceptions import NewickSyntaxError
from .tree_objects import Tree

_PUNCTUATION = "(),:;"
_SPECIAL = set("()[]':;,") | {" ", "\t", "\n", "\r"}
_COMMA = -1


class _Token(NamedTuple):
    kind: str
    text: str
    offset: int


class _Node:
    def __init__(self, offset: int, label: Optional[str] = None) -> None:
        self.offset = offset
        self.label = label
        self.length: Optional[float] = None
        self.children: List["_Node"] = []


def _tokenize(text: str) -> List[_Token]:
    encoded_offsets = _byte_offsets(text)
    tokens: List[_Token] = []
    position = 0
    size = len(text)
    while position < size:
        char = text[position]
        if char.isspace():
            position += 1
        elif char in _PUNCTUATION:
            tokens.append(_Token(char, char, encoded_offsets[position]))
            position += 1
        elif char == "[":
            end = text.find("]", position)
            if end < 0:
                raise NewickSyntaxError("Unterminated comment", encoded_offsets[position])
            position = end + 1
        elif char == "]":
            raise NewickSyntaxError("Unexpected ']'", encoded_offsets[position])
        elif char == "'":
            start = position
            position += 1
            pieces = []
            while True:
                if position >= size:
                    raise NewickSyntaxError(
                        "Unterminated quoted label", encoded_offsets[start]
                    )
                if text[position] == "'":
                    if position + 1 < size and text[position + 1] == "'":
                        pieces.append("'")
                        position += 2
                        continue
                    position += 1
                    break
                pieces.append(text[position])
                position += 1
            tokens.append(_Token("label", "".join(pieces), encoded_offsets[start]))
        else:
            start = position
            while position < size and text[position] not in _SPECIAL:
                position += 1
            tokens.append(_Token("label", text[start:position], encoded_offsets[start]))
    tokens.append(_Token("end", "", encoded_offsets[size]))
    return tokens


def _byte_offsets(text: str) -> List[int]:
    offsets = [0]
    for char in text:
        offsets.append(offsets[-1] + len(char.encode("utf-8")))
    return offsets


def _parse_length(token: _Token) -> float:
    if token.kind != "label":
        raise NewickSyntaxError("Missing branch length after ':'", token.offset)
    try:
        length = float(token.text)
    except ValueError:
        raise NewickSyntaxError(
            f"Branch length '{token.text}' is not a number", token.offset
        ) from None
    if not math.isfinite(length):
        raise NewickSyntaxError(f"Branch length '{token.text}' is not finite", token.offset)
    if length < 0:
        raise NewickSyntaxError(f"Negative branch length {token.text}", token.offset)
    return length


def _attach(parent: _Node, child: _Node, at: _Token) -> None:
    if child.length is None:
        raise NewickSyntaxError("Missing branch length", at.offset)
    parent.children.append(child)


def _parse_tokens(tokens: List[_Token]) -> _Node:
    position = 0
    open_nodes: List[_Node] = []
    while True:
        token = tokens[position]
        if token.kind == "(":
            open_nodes.append(_Node(token.offset))
            position += 1
            continue
        if token.kind != "label":
            raise NewickSyntaxError("Expected '(' or a tip label", token.offset)
        node = _Node(token.offset, token.text)
        position += 1

        while True:
            token = tokens[position]
            if token.kind == ":":
                if node.length is not None:
                    raise NewickSyntaxError("Node has two branch lengths", token.offset)
                node.length = _parse_length(tokens[position + 1])
                position += 2
                token = tokens[position]
            if token.kind == ",":
                if not open_nodes:
                    raise NewickSyntaxError("',' outside parentheses", token.offset)
                _attach(open_nodes[-1], node, token)
                position += 1
                break
            if token.kind == ")":
                if not open_nodes:
                    raise NewickSyntaxError("Unbalanced ')'", token.offset)
                parent = open_nodes.pop()
                _attach(parent, node, token)
                position += 1
                if tokens[position].kind == "label":
                    parent.label = tokens[position].text or None
                    position += 1
                node = parent
                continue
            if token.kind == ";":
                if open_nodes:
                    raise NewickSyntaxError("Unbalanced '('", open_nodes[-1].offset)
                if tokens[position + 1].kind != "end":
                    raise NewickSyntaxError(
                        "Only one tree per text is supported", tokens[position + 1].offset
                    )
                return node
            if token.kind == "end":
                raise NewickSyntaxError("Missing terminating ';'", token.offset)
            raise NewickSyntaxError(f"Unexpected '{token.text}'", token.offset)


def _to_tree(root: _Node) -> Tree:
    parents: List[int] = []
    lengths: List[float] = []
    labels: List[Optional[str]] = []
    seen = {}
    pending = [(root, -1)]
    while pending:
        node, parent = pending.pop()
        node_id = len(parents)
        parents.append(parent)
        lengths.append(node.length if parent >= 0 and node.length is not None else 0.0)
        labels.append(node.label)
        if not node.children:
            if not node.label:
                raise NewickSyntaxError("Empty tip label", node.offset)
            if node.label in seen:
                raise NewickSyntaxError(f"Duplicate tip label '{node.label}'", node.offset)
            seen[node.label] = node_id
        for child in reversed(node.children):
            pending.append((child, node_id))
    return Tree(parents, lengths, labels, root_length=root.length)


def parse_newick(text: str) -> Tree:
    """Parses a single Newick statement ending in ';'."""
    return _to_tree(_parse_tokens(_tokenize(text)))


def read_newick(path: Union[str, Path]) -> Tree:
    return parse_newick(Path(path).read_text(encoding="utf-8"))


def _format_label(label: Optional[str]) -> str:
    if not label:
        return ""
    if any(char in _SPECIAL for char in label):
        return "'" + label.replace("'", "''") + "'"
    return label


def _format_length(length: float) -> str:
    return f"{length:.12g}"


def write_newick(tree: Tree) -> str:
    """Serializes a tree; lengths carry 12 significant digits."""
    pieces: List[str] = []
    pending = [(0, False)]
    while pending:
        node, closing = pending.pop()
        if node == _COMMA:
            pieces.append(",")
            continue
        kids = tree.children[node]
        if kids and not closing:
            pieces.append("(")
            pending.append((node, True))
            for index in range(len(kids) - 1, -1, -1):
                pending.append((kids[index], False))
                if index > 0:
                    pending.append((_COMMA, False))
            continue
        if closing:
            pieces.append(")")
        pieces.append(_format_label(tree.labels[node]))
        if node != 0:
            pieces.append(":" + _format_length(tree.lengths[node]))
        elif tree.root_length is not None:
            pieces.append(":" + _format_length(tree.root_length))
    pieces.append(";")
    return "".join(pieces)


def write_newick_file(tree: Tree, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(write_newick(tree) + "\n", encoding="utf-8")
    return path
