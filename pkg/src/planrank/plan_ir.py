"""Plan-tree intermediate representation.

Parses optimizer EXPLAIN (FORMAT JSON) output into plan trees, rewrites them
into binary form, and encodes every node as a fixed-width feature vector:
a 7-way operator one-hot followed by scaled cost and row-count estimates.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyCorpus, MalformedDocument, UnsupportedArity

# Operators with reserved one-hot slots, in fixed index order 0..6.
# Anything else keeps its name but encodes as the all-zero one-hot.
ONEHOT_OPERATORS = (
    "Nested Loop",
    "Hash Join",
    "Merge Join",
    "Seq Scan",
    "Index Scan",
    "Index Only Scan",
    "Bitmap Index Scan",
)
ONEHOT_INDEX = {name: i for i, name in enumerate(ONEHOT_OPERATORS)}

FEATURE_DIM = 9  # 7 one-hot slots + scaled cost + scaled rows
COST_SLOT = 7
ROWS_SLOT = 8


@dataclass
class PlanNode:
    """One operator of a plan tree as reported by the optimizer."""

    node_type: str
    est_cost: float
    est_rows: float
    relation_name: Optional[str] = None
    index_name: Optional[str] = None
    children: list["PlanNode"] = field(default_factory=list)

    def onehot_slot(self) -> Optional[int]:
        """Index 0..6 for vocabulary operators, None for everything else."""
        return ONEHOT_INDEX.get(self.node_type)


@dataclass
class PlanTree:
    root: PlanNode
    node_count: int
    depth: int

    @classmethod
    def from_root(cls, root: PlanNode) -> "PlanTree":
        count = sum(1 for _ in walk(root))
        return cls(root=root, node_count=count, depth=_depth(root))


def _depth(node: PlanNode) -> int:
    if not node.children:
        return 1
    return 1 + max(_depth(c) for c in node.children)


def walk(node: PlanNode) -> Iterable[PlanNode]:
    """Preorder traversal."""
    yield node
    for child in node.children:
        yield from walk(child)


@dataclass
class BinaryPlanNode:
    """Plan node after binarization; a None child is the zero pseudo-child."""

    node_type: str
    est_cost: float
    est_rows: float
    relation_name: Optional[str] = None
    index_name: Optional[str] = None
    left: Optional["BinaryPlanNode"] = None
    right: Optional["BinaryPlanNode"] = None

    def onehot_slot(self) -> Optional[int]:
        return ONEHOT_INDEX.get(self.node_type)


@dataclass
class BinaryPlanTree:
    root: BinaryPlanNode
    node_count: int  # real (non-pseudo) nodes only
    depth: int


@dataclass
class EncodedNode:
    """Binary node carrying its feature vector; None children encode as zeros."""

    vec: np.ndarray
    left: Optional["EncodedNode"] = None
    right: Optional["EncodedNode"] = None


@dataclass
class EncodedTree:
    root: EncodedNode
    node_count: int


def parse_explain(document) -> PlanTree:
    """Parse EXPLAIN (FORMAT JSON) output into a PlanTree.

    Accepts the raw JSON text or an already-decoded document. The document
    may be the usual one-element list, a {"Plan": ...} object, or a bare
    plan node object.

    Raises MalformedDocument for structural problems and UnsupportedArity
    if any node has more than two children.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"invalid JSON: {exc}") from exc

    if isinstance(document, list):
        if not document:
            raise MalformedDocument("empty top-level list")
        document = document[0]
    if not isinstance(document, dict):
        raise MalformedDocument(f"expected object, got {type(document).__name__}")
    node_obj = document.get("Plan", document)
    if not isinstance(node_obj, dict):
        raise MalformedDocument('"Plan" is not an object')

    root = _parse_node(node_obj)
    return PlanTree.from_root(root)


def _parse_node(obj: dict) -> PlanNode:
    if "Node Type" not in obj:
        raise MalformedDocument('node missing "Node Type"')
    node_type = obj["Node Type"]
    if not isinstance(node_type, str):
        raise MalformedDocument('"Node Type" is not a string')

    cost = _require_number(obj, "Total Cost", node_type)
    rows = _require_number(obj, "Plan Rows", node_type)

    children = []
    subplans = obj.get("Plans", [])
    if not isinstance(subplans, list):
        raise MalformedDocument(f'"Plans" of {node_type} is not a list')
    if len(subplans) > 2:
        raise UnsupportedArity(
            f"node {node_type} has {len(subplans)} children; at most 2 supported"
        )
    for sub in subplans:
        if not isinstance(sub, dict):
            raise MalformedDocument(f"child of {node_type} is not an object")
        children.append(_parse_node(sub))

    return PlanNode(
        node_type=node_type,
        est_cost=cost,
        est_rows=rows,
        relation_name=obj.get("Relation Name"),
        index_name=obj.get("Index Name"),
        children=children,
    )


def _require_number(obj: dict, key: str, node_type: str) -> float:
    if key not in obj:
        raise MalformedDocument(f'node {node_type} missing "{key}"')
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f'"{key}" of {node_type} is not a number')
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise MalformedDocument(f'"{key}" of {node_type} must be finite and >= 0')
    return value


def binarize(tree: PlanTree) -> BinaryPlanTree:
    """Give every one-child node a zero pseudo-child on the right.

    Two-child nodes are kept as-is and leaves stay leaves; during
    convolution absent children read as zero vectors.
    """
    return BinaryPlanTree(
        root=_binarize_node(tree.root),
        node_count=tree.node_count,
        depth=tree.depth,
    )


def _binarize_node(node: PlanNode) -> BinaryPlanNode:
    left = _binarize_node(node.children[0]) if len(node.children) >= 1 else None
    right = _binarize_node(node.children[1]) if len(node.children) == 2 else None
    return BinaryPlanNode(
        node_type=node.node_type,
        est_cost=node.est_cost,
        est_rows=node.est_rows,
        relation_name=node.relation_name,
        index_name=node.index_name,
        left=left,
        right=right,
    )


def strip_nulls(tree: BinaryPlanTree) -> PlanTree:
    """Inverse of binarize: drop pseudo-children, restoring the child list."""
    return PlanTree.from_root(_strip_node(tree.root))


def _strip_node(node: BinaryPlanNode) -> PlanNode:
    children = [_strip_node(c) for c in (node.left, node.right) if c is not None]
    return PlanNode(
        node_type=node.node_type,
        est_cost=node.est_cost,
        est_rows=node.est_rows,
        relation_name=node.relation_name,
        index_name=node.index_name,
        children=children,
    )


@dataclass
class FeatureScaler:
    """Min/max of ln(1+x) for the cost and rows features over a fit corpus.

    Encoding maps a value to (ln(1+x) - min) / (max - min) clamped to [0, 1];
    a degenerate feature (min == max) maps to 0.
    """

    cost_min: float
    cost_max: float
    rows_min: float
    rows_max: float

    def scale_cost(self, value: float) -> float:
        return _scale(math.log1p(value), self.cost_min, self.cost_max)

    def scale_rows(self, value: float) -> float:
        return _scale(math.log1p(value), self.rows_min, self.rows_max)

    def to_dict(self) -> dict:
        return {
            "cost_min": self.cost_min,
            "cost_max": self.cost_max,
            "rows_min": self.rows_min,
            "rows_max": self.rows_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(
            cost_min=float(d["cost_min"]),
            cost_max=float(d["cost_max"]),
            rows_min=float(d["rows_min"]),
            rows_max=float(d["rows_max"]),
        )


def _scale(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


def fit_scaler(trees: Iterable[PlanTree]) -> FeatureScaler:
    """Scan every node of every tree and record ln(1+x) ranges."""
    cost_lo = rows_lo = math.inf
    cost_hi = rows_hi = -math.inf
    seen = False
    for tree in trees:
        for node in walk(tree.root):
            seen = True
            c = math.log1p(node.est_cost)
            r = math.log1p(node.est_rows)
            cost_lo, cost_hi = min(cost_lo, c), max(cost_hi, c)
            rows_lo, rows_hi = min(rows_lo, r), max(rows_hi, r)
    if not seen:
        raise EmptyCorpus("cannot fit a scaler on an empty plan collection")
    return FeatureScaler(cost_lo, cost_hi, rows_lo, rows_hi)


def encode(tree: BinaryPlanTree, scaler: FeatureScaler) -> EncodedTree:
    """Attach the 9-dim feature vector to every node."""
    return EncodedTree(root=_encode_node(tree.root, scaler), node_count=tree.node_count)


def _encode_node(node: BinaryPlanNode, scaler: FeatureScaler) -> EncodedNode:
    vec = np.zeros(FEATURE_DIM, dtype=np.float64)
    slot = node.onehot_slot()
    if slot is not None:
        vec[slot] = 1.0
    vec[COST_SLOT] = scaler.scale_cost(node.est_cost)
    vec[ROWS_SLOT] = scaler.scale_rows(node.est_rows)
    return EncodedNode(
        vec=vec,
        left=_encode_node(node.left, scaler) if node.left is not None else None,
        right=_encode_node(node.right, scaler) if node.right is not None else None,
    )


def fingerprint(tree: PlanTree) -> str:
    """Stable hash of the plan's canonical shape.

    Covers operator kinds, relation/index names, and child order; ignores
    cost and row estimates so replans with drifting statistics dedupe.
    """
    canonical = _canonical(tree.root)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _canonical(node: PlanNode) -> str:
    parts = [node.node_type, node.relation_name or "", node.index_name or ""]
    head = "|".join(parts)
    kids = "".join(_canonical(c) for c in node.children)
    return f"({head}{kids})"
