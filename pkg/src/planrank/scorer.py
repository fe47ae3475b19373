"""The plan ranking model: tree convolutions, max pooling, scoring MLP.

Three tree-conv layers (9 -> 256 -> 128 -> 64 channels) under leaky
rectifiers feed a per-channel max pool that yields a 64-dim plan embedding;
a 64 -> 32 -> 1 MLP turns the embedding into a scalar ranking score. Higher
score means the model predicts a faster plan. Checkpoints round-trip
bit-exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import nn
from .errors import (
    CorruptChecksum,
    DimensionMismatch,
    EmptyCandidates,
    EmptyTree,
    FormatVersionMismatch,
)
from .hints import HintSet
from .plan_ir import EncodedNode, EncodedTree, FeatureScaler, FEATURE_DIM


@dataclass(frozen=True)
class ScorerDims:
    input_dim: int = FEATURE_DIM
    conv_channels: tuple[int, ...] = (256, 128, 64)
    hidden: int = 32

    def validate(self) -> None:
        if not self.conv_channels:
            raise DimensionMismatch("at least one tree-conv layer is required")
        if self.input_dim < 1 or self.hidden < 1 or min(self.conv_channels) < 1:
            raise DimensionMismatch("all layer sizes must be positive")

    @property
    def embed_dim(self) -> int:
        return self.conv_channels[-1]


DEFAULT_DIMS = ScorerDims()


@dataclass
class ScorerParams:
    """All trainable weights plus the feature scaler they were fitted with."""

    convs: list[nn.TreeConvLayer]
    fc1: nn.LinearLayer
    fc2: nn.LinearLayer
    scaler: FeatureScaler
    catalog_hash: str = ""
    seed: int = 0

    @property
    def dims(self) -> ScorerDims:
        return ScorerDims(
            input_dim=self.convs[0].d_in,
            conv_channels=tuple(c.d_out for c in self.convs),
            hidden=self.fc1.d_out,
        )

    def layers(self) -> dict[str, Union[nn.TreeConvLayer, nn.LinearLayer]]:
        named: dict = {f"conv{i + 1}": c for i, c in enumerate(self.convs)}
        named["fc1"] = self.fc1
        named["fc2"] = self.fc2
        return named

    def params_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor (shared, not copied)."""
        flat = {}
        for lname, layer in self.layers().items():
            for pname, arr in layer.params().items():
                flat[f"{lname}.{pname}"] = arr
        return flat

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            convs=[
                nn.TreeConvLayer(c.W.copy(), c.W_l.copy(), c.W_r.copy(), c.b.copy())
                for c in self.convs
            ],
            fc1=nn.LinearLayer(self.fc1.W.copy(), self.fc1.b.copy()),
            fc2=nn.LinearLayer(self.fc2.W.copy(), self.fc2.b.copy()),
            scaler=self.scaler,
            catalog_hash=self.catalog_hash,
            seed=self.seed,
        )


def init_params(
    seed: int,
    scaler: Optional[FeatureScaler] = None,
    catalog_hash: str = "",
    dims: ScorerDims = DEFAULT_DIMS,
) -> ScorerParams:
    """Seeded uniform init, a = sqrt(6 / (fan_in + fan_out)); biases zero.

    Tree-conv layers count fan_in as 3 * d_in since three filter banks feed
    each output channel.
    """
    dims.validate()
    rng = np.random.default_rng(seed)
    convs = []
    d_in = dims.input_dim
    for d_out in dims.conv_channels:
        a = np.sqrt(6.0 / (3 * d_in + d_out))
        convs.append(
            nn.TreeConvLayer(
                W=rng.uniform(-a, a, size=(d_out, d_in)),
                W_l=rng.uniform(-a, a, size=(d_out, d_in)),
                W_r=rng.uniform(-a, a, size=(d_out, d_in)),
                b=np.zeros(d_out),
            )
        )
        d_in = d_out
    fc1 = _init_linear(rng, dims.embed_dim, dims.hidden)
    fc2 = _init_linear(rng, dims.hidden, 1)
    if scaler is None:
        scaler = FeatureScaler(0.0, 0.0, 0.0, 0.0)
    return ScorerParams(
        convs=convs,
        fc1=fc1,
        fc2=fc2,
        scaler=scaler,
        catalog_hash=catalog_hash,
        seed=seed,
    )


def _init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> nn.LinearLayer:
    a = np.sqrt(6.0 / (d_in + d_out))
    return nn.LinearLayer(W=rng.uniform(-a, a, size=(d_out, d_in)), b=np.zeros(d_out))


def param_count(params: ScorerParams) -> int:
    return sum(layer.param_count() for layer in params.layers().values())


# --- forward / backward ------------------------------------------------------


def to_tensor(tree: EncodedTree) -> nn.TreeTensor:
    """Flatten an encoded tree to preorder rows with child indices."""
    feats: list[np.ndarray] = []
    left: list[int] = []
    right: list[int] = []

    def visit(node: EncodedNode) -> int:
        idx = len(feats)
        feats.append(node.vec)
        left.append(-1)
        right.append(-1)
        if node.left is not None:
            left[idx] = visit(node.left)
        if node.right is not None:
            right[idx] = visit(node.right)
        return idx

    visit(tree.root)
    return nn.single_tree(np.asarray(feats, dtype=np.float64), left, right)


@dataclass
class ForwardCache:
    tree: nn.TreeTensor
    conv_pre: list[np.ndarray]
    conv_caches: list[nn.TreeConvCache]
    pooled: np.ndarray
    argmax: np.ndarray
    fc1_pre: np.ndarray
    fc1_act: np.ndarray


def forward_batch(
    params: ScorerParams, forest: nn.TreeTensor
) -> tuple[np.ndarray, ForwardCache]:
    """Scores for every tree in the packed forest, with the training cache."""
    current = forest
    conv_pre = []
    conv_caches = []
    for layer in params.convs:
        current, cache = nn.tree_conv_forward(layer, current)
        conv_pre.append(current.feats)
        conv_caches.append(cache)
        current = current.with_feats(nn.leaky_relu(current.feats))
    pooled, argmax = nn.max_pool_forward(current)
    fc1_pre = nn.linear_forward(params.fc1, pooled)
    fc1_act = nn.leaky_relu(fc1_pre)
    out = nn.linear_forward(params.fc2, fc1_act)
    scores = out[:, 0]
    return scores, ForwardCache(
        tree=forest,
        conv_pre=conv_pre,
        conv_caches=conv_caches,
        pooled=pooled,
        argmax=argmax,
        fc1_pre=fc1_pre,
        fc1_act=fc1_act,
    )


def backward_batch(
    params: ScorerParams, cache: ForwardCache, dscores: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of sum(dscores * scores) for every trainable tensor."""
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(dscores, dtype=np.float64)[:, None]
    fc2_grads, g = nn.linear_backward(params.fc2, cache.fc1_act, g)
    g = nn.leaky_relu_backward(cache.fc1_pre, g)
    fc1_grads, g = nn.linear_backward(params.fc1, cache.pooled, g)
    for name, val in fc2_grads.items():
        grads[f"fc2.{name}"] = val
    for name, val in fc1_grads.items():
        grads[f"fc1.{name}"] = val
    g = nn.max_pool_backward(cache.argmax, g, cache.tree.num_nodes)
    for i in range(len(params.convs) - 1, -1, -1):
        g = nn.leaky_relu_backward(cache.conv_pre[i], g)
        layer_grads, g = nn.tree_conv_backward(
            params.convs[i], cache.conv_caches[i], g
        )
        for name, val in layer_grads.items():
            grads[f"conv{i + 1}.{name}"] = val
    return grads


def embed(params: ScorerParams, tree: EncodedTree) -> np.ndarray:
    """Pooled plan embedding, length = last conv channel count."""
    tensor = to_tensor(tree)
    if tensor.num_nodes == 0:
        raise EmptyTree("cannot embed an empty plan")
    current = tensor
    for layer in params.convs:
        current, _ = nn.tree_conv_forward(layer, current)
        current = current.with_feats(nn.leaky_relu(current.feats))
    pooled, _ = nn.max_pool_forward(current)
    return pooled[0]


def score(params: ScorerParams, tree: EncodedTree) -> float:
    scores, _ = forward_batch(params, to_tensor(tree))
    return float(scores[0])


def score_trees(params: ScorerParams, trees: Sequence[EncodedTree]) -> np.ndarray:
    """Score many plans in one kernel pass."""
    if not trees:
        return np.zeros(0)
    forest = nn.pack_forest([to_tensor(t) for t in trees])
    scores, _ = forward_batch(params, forest)
    return scores


def select_hint(
    params: ScorerParams, candidates: Sequence[tuple[HintSet, EncodedTree]]
) -> HintSet:
    """The hint set whose plan scores highest; exact ties prefer the lowest id."""
    if not candidates:
        raise EmptyCandidates("no candidate plans to choose from")
    scores = score_trees(params, [tree for _, tree in candidates])
    best = 0
    for i in range(1, len(candidates)):
        if scores[i] > scores[best] or (
            scores[i] == scores[best] and candidates[i][0].id < candidates[best][0].id
        ):
            best = i
    return candidates[best][0]


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = "planrank-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ScorerParams
    mode: str = ""
    config_digest: str = ""
    best_validation: Optional[float] = None


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def _payload(ckpt: Checkpoint) -> dict:
    p = ckpt.params
    layers = {}
    for lname, layer in p.layers().items():
        layers[lname] = {k: _encode_array(v) for k, v in layer.params().items()}
    return {
        "dims": {
            "input_dim": p.dims.input_dim,
            "conv_channels": list(p.dims.conv_channels),
            "hidden": p.dims.hidden,
        },
        "layers": layers,
        "scaler": p.scaler.to_dict(),
        "catalog_hash": p.catalog_hash,
        "seed": p.seed,
        "mode": ckpt.mode,
        "config_digest": ckpt.config_digest,
        "best_validation": ckpt.best_validation,
    }


def _digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    payload = _payload(ckpt)
    doc = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "sha256": _digest(payload),
        "payload": payload,
    }
    Path(path).write_text(
        json.dumps(doc, sort_keys=True, separators=(",", ":")), encoding="utf-8"
    )


def load(path: Union[str, Path]) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptChecksum(f"checkpoint is truncated or not JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_MAGIC:
        raise CorruptChecksum("not a planrank checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(
            f"checkpoint version {doc.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    payload = doc.get("payload")
    if not isinstance(payload, dict) or doc.get("sha256") != _digest(payload):
        raise CorruptChecksum("checkpoint checksum does not match contents")

    dims = ScorerDims(
        input_dim=int(payload["dims"]["input_dim"]),
        conv_channels=tuple(payload["dims"]["conv_channels"]),
        hidden=int(payload["dims"]["hidden"]),
    )
    layers = payload["layers"]
    convs = []
    for i in range(len(dims.conv_channels)):
        obj = layers[f"conv{i + 1}"]
        convs.append(
            nn.TreeConvLayer(
                W=_decode_array(obj["W"]),
                W_l=_decode_array(obj["W_l"]),
                W_r=_decode_array(obj["W_r"]),
                b=_decode_array(obj["b"]),
            )
        )
    params = ScorerParams(
        convs=convs,
        fc1=nn.LinearLayer(
            W=_decode_array(layers["fc1"]["W"]), b=_decode_array(layers["fc1"]["b"])
        ),
        fc2=nn.LinearLayer(
            W=_decode_array(layers["fc2"]["W"]), b=_decode_array(layers["fc2"]["b"])
        ),
        scaler=FeatureScaler.from_dict(payload["scaler"]),
        catalog_hash=payload["catalog_hash"],
        seed=int(payload["seed"]),
    )
    return Checkpoint(
        params=params,
        mode=payload["mode"],
        config_digest=payload["config_digest"],
        best_validation=payload["best_validation"],
    )
