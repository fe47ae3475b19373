"""Minimal differentiable kernel for the plan scorer.

Dense linear maps, binary tree convolution, per-channel max pooling over
tree nodes, the leaky rectifier, and Adam. Forward passes are paired with
hand-derived backward passes; finite_diff_check verifies any of them
against central differences.

Trees are stored flat: node features in preorder rows plus left/right child
row indices, with -1 standing for an absent (pseudo) child that reads as a
zero vector. Several trees can be packed into one tensor with segment
offsets so a whole mini-batch runs through the kernel in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyTree,
    NonFiniteGradient,
    ShapeMismatch,
)


@dataclass
class TreeTensor:
    """Flattened binary tree(s): preorder feature rows + child indices."""

    feats: np.ndarray  # (n, d) float64
    left: np.ndarray  # (n,) int64, row index or -1
    right: np.ndarray  # (n,) int64
    segments: np.ndarray  # (num_trees + 1,) start offsets; [0, n] for one tree

    @property
    def num_nodes(self) -> int:
        return self.feats.shape[0]

    @property
    def num_trees(self) -> int:
        return len(self.segments) - 1

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats: np.ndarray) -> "TreeTensor":
        """Same structure, new per-node features."""
        return TreeTensor(feats, self.left, self.right, self.segments)


def single_tree(feats: np.ndarray, left, right) -> TreeTensor:
    feats = np.asarray(feats, dtype=np.float64)
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    return TreeTensor(feats, left, right, np.array([0, feats.shape[0]], dtype=np.int64))


def pack_forest(trees: list[TreeTensor]) -> TreeTensor:
    """Concatenate trees into one tensor; child indices are shifted per tree."""
    if not trees:
        raise EmptyTree("cannot pack an empty forest")
    sizes = np.array([t.num_nodes for t in trees], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    feats = np.concatenate([t.feats for t in trees], axis=0)
    left = np.concatenate(
        [np.where(t.left >= 0, t.left + off, -1) for t, off in zip(trees, offsets)]
    )
    right = np.concatenate(
        [np.where(t.right >= 0, t.right + off, -1) for t, off in zip(trees, offsets)]
    )
    return TreeTensor(feats, left, right, offsets)


# --- layers ----------------------------------------------------------------


@dataclass
class TreeConvLayer:
    """Three filter banks: self, left child, right child; plus channel bias."""

    W: np.ndarray  # (d_out, d_in)
    W_l: np.ndarray
    W_r: np.ndarray
    b: np.ndarray  # (d_out,)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def param_count(self) -> int:
        return 3 * self.W.size + self.b.size

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "W_l": self.W_l, "W_r": self.W_r, "b": self.b}


@dataclass
class LinearLayer:
    W: np.ndarray  # (d_out, d_in)
    b: np.ndarray  # (d_out,)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def param_count(self) -> int:
        return self.W.size + self.b.size

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


# --- tree convolution --------------------------------------------------------


@dataclass
class TreeConvCache:
    x: np.ndarray  # node features (n, d_in)
    x_left: np.ndarray  # gathered left-child features, zeros where absent
    x_right: np.ndarray
    left: np.ndarray
    right: np.ndarray


def tree_conv_forward(
    layer: TreeConvLayer, tree: TreeTensor
) -> tuple[TreeTensor, TreeConvCache]:
    """out(v) = W x(v) + W_l x(left) + W_r x(right) + b, zeros for absent kids."""
    if layer.W.shape != layer.W_l.shape or layer.W.shape != layer.W_r.shape:
        raise DimensionMismatch("tree-conv filter banks must share one shape")
    if tree.dim != layer.d_in:
        raise DimensionMismatch(
            f"tree features have dim {tree.dim}, layer expects {layer.d_in}"
        )
    x = tree.feats
    n = x.shape[0]
    padded = np.vstack([x, np.zeros((1, x.shape[1]))])  # row n reads as zeros
    x_left = padded[np.where(tree.left >= 0, tree.left, n)]
    x_right = padded[np.where(tree.right >= 0, tree.right, n)]
    out = x @ layer.W.T + x_left @ layer.W_l.T + x_right @ layer.W_r.T + layer.b
    cache = TreeConvCache(x, x_left, x_right, tree.left, tree.right)
    return tree.with_feats(out), cache


def tree_conv_backward(
    layer: TreeConvLayer, cache: TreeConvCache, upstream: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of tree_conv_forward.

    Returns ({"W", "W_l", "W_r", "b"}, d_input). A node's input gradient
    accumulates what it receives as itself, as a left child, and as a
    right child.
    """
    if upstream.shape != (cache.x.shape[0], layer.d_out):
        raise DimensionMismatch("upstream gradient shape does not match output")
    grads = {
        "W": upstream.T @ cache.x,
        "W_l": upstream.T @ cache.x_left,
        "W_r": upstream.T @ cache.x_right,
        "b": upstream.sum(axis=0),
    }
    dx = upstream @ layer.W
    has_left = cache.left >= 0
    has_right = cache.right >= 0
    np.add.at(dx, cache.left[has_left], (upstream @ layer.W_l)[has_left])
    np.add.at(dx, cache.right[has_right], (upstream @ layer.W_r)[has_right])
    return grads, dx


# --- leaky rectifier ---------------------------------------------------------

LEAKY_SLOPE = 0.01


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(
    x: np.ndarray, upstream: np.ndarray, slope: float = LEAKY_SLOPE
) -> np.ndarray:
    # subgradient at exactly 0 is the slope
    return upstream * np.where(x > 0, 1.0, slope)


# --- dynamic max pooling -------------------------------------------------------


def max_pool_forward(tree: TreeTensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel max over each tree's nodes.

    Returns (pooled (num_trees, d), argmax row indices (num_trees, d)).
    Ties go to the first node in preorder.
    """
    if tree.num_nodes == 0 or np.any(np.diff(tree.segments) < 1):
        raise EmptyTree("max pooling needs at least one node per tree")
    starts = tree.segments[:-1]
    pooled = np.maximum.reduceat(tree.feats, starts, axis=0)
    argmax = np.empty((tree.num_trees, tree.dim), dtype=np.int64)
    for i, (s, e) in enumerate(zip(tree.segments[:-1], tree.segments[1:])):
        argmax[i] = s + np.argmax(tree.feats[s:e], axis=0)
    return pooled, argmax


def max_pool_backward(
    argmax: np.ndarray, upstream: np.ndarray, num_nodes: int
) -> np.ndarray:
    """Route each channel's upstream gradient to its recorded argmax node."""
    dx = np.zeros((num_nodes, upstream.shape[1]))
    cols = np.broadcast_to(np.arange(upstream.shape[1]), argmax.shape)
    np.add.at(dx, (argmax.reshape(-1), cols.reshape(-1)), upstream.reshape(-1))
    return dx


def dynamic_max_pool(tree: TreeTensor) -> tuple[np.ndarray, np.ndarray]:
    """Single-tree pooling: (vector of length d, argmax node index per channel)."""
    pooled, argmax = max_pool_forward(tree)
    if tree.num_trees != 1:
        raise DimensionMismatch("dynamic_max_pool expects a single tree")
    return pooled[0], argmax[0]


# --- dense layer ---------------------------------------------------------------


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """W x + b; accepts a vector (d_in,) or a batch (n, d_in)."""
    if x.shape[-1] != layer.d_in:
        raise DimensionMismatch(
            f"input has dim {x.shape[-1]}, layer expects {layer.d_in}"
        )
    return x @ layer.W.T + layer.b


def linear_backward(
    layer: LinearLayer, x: np.ndarray, upstream: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Returns ({"W", "b"}, dx) for a vector or batch input."""
    if x.ndim == 1:
        grads = {"W": np.outer(upstream, x), "b": upstream.copy()}
    else:
        grads = {"W": upstream.T @ x, "b": upstream.sum(axis=0)}
    return grads, upstream @ layer.W


# --- Adam -----------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators, one entry per parameter array."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Standard bias-corrected Adam update, in place.

    Any non-finite gradient entry aborts before touching params or state.
    """
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads cover different parameter names")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- gradient checking ------------------------------------------------------------


def finite_diff_check(
    loss_and_grad: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    loss_and_grad(params) must return (loss, grads) with grads keyed like
    params. Returns the max over entries of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    _, analytic = loss_and_grad(params)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_and_grad(params)
            flat[i] = orig - step
            down, _ = loss_and_grad(params)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(1e-8, abs(a[i]) + abs(numeric))
            worst = max(worst, abs(a[i] - numeric) / denom)
    return worst
