"""
Vision transformer forward pass with explicit per-head attention maps.

Blocks are pre-norm (x + MHSA(norm(x)), then + MLP(norm(.))). Layers listed
in ``ModelConfig.mod_pattern`` run capacity-limited token routing instead of
the dense block; that path lives in :mod:`modlab.routing` and is dispatched
from :func:`model_forward`. The batch dimension is handled as a python loop
over samples so every tensor stays two-dimensional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import (
    ContractError,
    IndexSelectionError,
    ShapeError,
    Tensor,
    add,
    add_rowvec,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    record,
    scale,
    scatter_rows,
    slice_cols,
    softmax_rows,
    transpose,
)

LAYER_NORM_EPS = 1e-5

ROUTER_KINDS = ("standard", "attention")
CLS_POLICIES = ("always_process", "compete")


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description, including token-routing placement."""

    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    depth: int = 12
    dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    mod_pattern: tuple[int, ...] = ()
    capacity: float = 1.0
    router: str = "standard"
    cls_policy: str = "always_process"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ContractError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ContractError("dim must be divisible by heads")
        if not 0.0 < self.capacity <= 1.0:
            raise ContractError("capacity must lie in (0, 1]")
        if self.router not in ROUTER_KINDS:
            raise ContractError(f"unknown router kind {self.router!r}")
        if self.cls_policy not in CLS_POLICIES:
            raise ContractError(f"unknown cls policy {self.cls_policy!r}")
        pattern = tuple(sorted(set(int(i) for i in self.mod_pattern)))
        object.__setattr__(self, "mod_pattern", pattern)
        if pattern and (pattern[0] < 0 or pattern[-1] >= self.depth):
            raise ContractError("mod_pattern indices must lie in [0, depth)")
        if pattern and self.router == "attention" and pattern[0] < 1:
            raise ContractError(
                "attention routing needs a preceding layer's maps; "
                "layer 0 cannot be a routed layer"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        # Patches plus the class token.
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def dense_twin(self) -> "ModelConfig":
        """Same architecture with routing disabled."""
        return replace(self, mod_pattern=(), capacity=1.0, router="standard")


def alternating_pattern(depth: int, start: int = 1) -> tuple[int, ...]:
    """Every second layer from ``start`` on; start=1 alternates from the 2nd layer."""
    return tuple(range(start, depth, 2))


@dataclass
class LayerMaps:
    """One layer's attention maps: H row-stochastic (n, n) tensors.

    ``token_indices`` records which sequence positions the maps cover; None
    means the full token set. Routed layers attend only among their processed
    subset, so their maps are smaller than N x N.
    """

    heads: list[Tensor]
    token_indices: np.ndarray | None = None

    def stacked(self) -> np.ndarray:
        """Detached (H, n, n) copy."""
        return np.stack([h.data for h in self.heads])


@dataclass
class BlockOutput:
    """One block's result: updated tokens plus the attention maps it computed."""

    tokens: Tensor
    maps: LayerMaps = field(default_factory=lambda: LayerMaps([]))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map; the name set is exactly this, no more, no less."""
    d = config.dim
    hidden = config.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.channels * config.patch_size**2, d),
        "patch_embed.bias": (1, d),
        "pos_embed": (config.num_tokens, d),
        "cls_token": (1, d),
        "head.weight": (d, config.num_classes),
        "head.bias": (1, config.num_classes),
    }
    for l in range(config.depth):
        shapes[f"blocks.{l}.norm1.gamma"] = (1, d)
        shapes[f"blocks.{l}.norm1.beta"] = (1, d)
        shapes[f"blocks.{l}.attn.wq"] = (d, d)
        shapes[f"blocks.{l}.attn.wk"] = (d, d)
        shapes[f"blocks.{l}.attn.wv"] = (d, d)
        shapes[f"blocks.{l}.attn.wo"] = (d, d)
        shapes[f"blocks.{l}.norm2.gamma"] = (1, d)
        shapes[f"blocks.{l}.norm2.beta"] = (1, d)
        shapes[f"blocks.{l}.mlp.w1"] = (d, hidden)
        shapes[f"blocks.{l}.mlp.b1"] = (1, hidden)
        shapes[f"blocks.{l}.mlp.w2"] = (hidden, d)
        shapes[f"blocks.{l}.mlp.b2"] = (1, d)
    if config.router == "standard":
        for l in config.mod_pattern:
            shapes[f"router.{l}.W_r"] = (d, 1)
    return shapes


ROUTER_INIT_STD = 0.02


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameter set: N(0, 0.02) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".bias", ".beta", ".b1", ".b2")):
            arr = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".gamma"):
            arr = np.ones(shape, dtype=np.float32)
        else:
            arr = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def check_params(params: dict[str, Tensor], config: ModelConfig) -> None:
    """Reject orphan or missing parameter names and shape drift."""
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ContractError(f"parameter name set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if params[name].dims != shape:
            raise ShapeError(f"{name} has shape {params[name].dims}, expected {shape}")


def layer_view(params: dict[str, Tensor], layer: int) -> dict[str, Tensor]:
    """The per-layer slice of the parameter map, keyed by short names."""
    view = {
        short: params[f"blocks.{layer}.{short}"]
        for short in (
            "norm1.gamma",
            "norm1.beta",
            "attn.wq",
            "attn.wk",
            "attn.wv",
            "attn.wo",
            "norm2.gamma",
            "norm2.beta",
            "mlp.w1",
            "mlp.b1",
            "mlp.w2",
            "mlp.b2",
        )
    }
    router_key = f"router.{layer}.W_r"
    if router_key in params:
        view["W_r"] = params[router_key]
    return view


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def patch_embed(image: np.ndarray | Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Image (C, H, W) -> token matrix (N, D): patchify, project, prepend class token, add positions."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    c, p, g = config.channels, config.patch_size, config.grid_size
    if arr.shape != (c, config.image_size, config.image_size):
        raise ShapeError(
            f"image shape {arr.shape} does not match config "
            f"({c},{config.image_size},{config.image_size})"
        )
    # (C, gh, p, gw, p) -> (gh, gw, C, p, p) -> (num_patches, C*p*p), row-major grid.
    patches = (
        arr.reshape(c, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, c * p * p)
    )
    projected = add_rowvec(
        matmul(Tensor(patches.astype(np.float32)), params["patch_embed.weight"]),
        params["patch_embed.bias"],
    )
    n = config.num_tokens
    base = Tensor(np.zeros((n, config.dim), dtype=np.float32))
    tokens = scatter_rows(base, [0], params["cls_token"])
    tokens = scatter_rows(tokens, range(1, n), projected)
    return add(tokens, params["pos_embed"])


def mhsa(tokens: Tensor, layer_params: dict[str, Tensor], config: ModelConfig) -> BlockOutput:
    """Multi-head self-attention; returns the output delta and per-head maps.

    Maps are softmax(Q Kᵀ / sqrt(head_dim)) per head, each row summing to 1.
    The caller adds the residual.
    """
    d = config.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)
    q = matmul(tokens, layer_params["attn.wq"])
    k = matmul(tokens, layer_params["attn.wk"])
    v = matmul(tokens, layer_params["attn.wv"])
    wo = layer_params["attn.wo"]
    out: Tensor | None = None
    maps: list[Tensor] = []
    for h in range(config.heads):
        lo, hi = h * d, (h + 1) * d
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d))
        maps.append(att)
        head_out = matmul(matmul(att, vh), gather_rows(wo, range(lo, hi)))
        out = head_out if out is None else add(out, head_out)
    return BlockOutput(tokens=out, maps=LayerMaps(maps))


def mlp_block(tokens: Tensor, layer_params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """norm -> linear -> GeLU -> linear; residual is added by the caller."""
    xn = layer_norm(
        tokens, layer_params["norm2.gamma"], layer_params["norm2.beta"], LAYER_NORM_EPS
    )
    hidden = gelu(add_rowvec(matmul(xn, layer_params["mlp.w1"]), layer_params["mlp.b1"]))
    return add_rowvec(matmul(hidden, layer_params["mlp.w2"]), layer_params["mlp.b2"])


def block_parts(
    tokens: Tensor, layer_params: dict[str, Tensor], config: ModelConfig
) -> tuple[Tensor, Tensor, Tensor, list[Tensor]]:
    """Shared core of the dense and routed blocks.

    Returns (attn_delta, post_attention_tokens, mlp_delta, maps) so callers can
    assemble either the plain residual output or the score-multiplied variant.
    """
    xn = layer_norm(
        tokens, layer_params["norm1.gamma"], layer_params["norm1.beta"], LAYER_NORM_EPS
    )
    attn = mhsa(xn, layer_params, config)
    h = add(tokens, attn.tokens)
    m = mlp_block(h, layer_params, config)
    return attn.tokens, h, m, attn.maps.heads


def dense_block_forward(
    tokens: Tensor, layer_params: dict[str, Tensor], config: ModelConfig
) -> BlockOutput:
    """Pre-norm transformer block over the full token set."""
    _, h, m, maps = block_parts(tokens, layer_params, config)
    return BlockOutput(tokens=add(h, m), maps=LayerMaps(maps))


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    b, k = logits.dims
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexSelectionError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = Tensor(np.array([-logp[np.arange(b), labels].mean()], dtype=logits.data.dtype))

    def bwd(dout):
        soft = np.exp(logp)
        soft[np.arange(b), labels] -= 1.0
        return ((dout.reshape(-1)[0] / b) * soft,)

    return record(loss, (logits,), bwd)


@dataclass
class RoutingLogEntry:
    """Per-sample routing outcome at one routed layer."""

    layer: int
    scores: np.ndarray  # (B, N)
    selected: list[np.ndarray]  # per sample, strictly increasing competing indices
    k: int
    beta: float


def model_forward(
    batch: np.ndarray | Tensor,
    params: dict[str, Tensor],
    config: ModelConfig,
    force_skip: tuple[int, int] | None = None,
    collect_maps: bool = True,
) -> tuple[Tensor, list[list[np.ndarray]], list[RoutingLogEntry]]:
    """Run the full model over a batch.

    Returns (logits (B, classes), per-sample attention maps as (H, n, n)
    arrays per layer, routing log with one entry per routed layer).
    ``force_skip=(layer, token)`` pushes that token onto the skip path at the
    given routed layer for every sample; used for leave-one-out analysis.
    """
    from .routing import mod_block_forward  # local import: routing builds on this module

    check_params(params, config)
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"batch must be (B, C, H, W), got {arr.shape}")
    bsz = arr.shape[0]
    mod_layers = set(config.mod_pattern)

    logit_rows: list[Tensor] = []
    all_maps: list[list[np.ndarray]] = []
    per_layer_scores: dict[int, list[np.ndarray]] = {l: [] for l in config.mod_pattern}
    per_layer_selected: dict[int, list[np.ndarray]] = {l: [] for l in config.mod_pattern}
    log_meta: dict[int, tuple[int, float]] = {}

    for b in range(bsz):
        tokens = patch_embed(arr[b], params, config)
        prev_maps: LayerMaps | None = None
        sample_maps: list[np.ndarray] = []
        for l in range(config.depth):
            lp = layer_view(params, l)
            if l in mod_layers:
                forced = force_skip[1] if force_skip is not None and force_skip[0] == l else None
                out, decision, scores = mod_block_forward(
                    tokens, lp, prev_maps, config, force_skip_token=forced
                )
                per_layer_scores[l].append(scores.values.reshape(-1))
                per_layer_selected[l].append(decision.selected[0])
                log_meta[l] = (decision.k, decision.beta)
            else:
                out = dense_block_forward(tokens, lp, config)
            tokens = out.tokens
            prev_maps = out.maps
            if collect_maps:
                sample_maps.append(out.maps.stacked())
        cls_row = gather_rows(tokens, [0])
        logit_rows.append(add_rowvec(matmul(cls_row, params["head.weight"]), params["head.bias"]))
        all_maps.append(sample_maps)

    logits = Tensor(np.zeros((bsz, config.num_classes), dtype=np.float32))
    for b, row in enumerate(logit_rows):
        logits = scatter_rows(logits, [b], row)

    routing_log = [
        RoutingLogEntry(
            layer=l,
            scores=np.stack(per_layer_scores[l]),
            selected=per_layer_selected[l],
            k=log_meta[l][0],
            beta=log_meta[l][1],
        )
        for l in config.mod_pattern
    ]
    return logits, all_maps, routing_log
