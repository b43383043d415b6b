"""
Token routing for capacity-limited transformer layers.

Two score sources are implemented. The learned router projects each token to
a scalar with a (D, 1) weight and multiplies the selected tokens' block
contribution by their score so the weight receives gradient. The
attention router is parameter-free: a token's score is the mean over heads
of the attention mass it received in the previous layer (column means of the
row-stochastic maps), and no score multiplication is applied.

Selection takes the top k = max(1, floor(capacity * n_competing)) scores,
breaking ties toward the lower token index. Tokens outside the competing set
(the class token under the default policy) are always processed and do not
count against k. Skipped tokens pass through bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import BlockOutput, LayerMaps, ModelConfig, block_parts, param_shapes
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    gather_rows,
    matmul,
    row_scale,
    scatter_rows,
)

# Guard against float dust in capacity * n (e.g. 0.3 * 10 -> 2.9999...).
_CAPACITY_EPS = 1e-9


@dataclass
class RoutingScores:
    """Per-token importance scores for one or more samples."""

    values: np.ndarray  # (B, N)
    source: str  # "standard" | "attention"
    tensors: tuple[Tensor, ...] = ()  # differentiable (N, 1) columns, standard routing only

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values))


@dataclass
class RoutingDecision:
    """Selected competing indices per sample under capacity C."""

    selected: list[np.ndarray]  # per sample, strictly increasing, length k
    k: int
    beta: float


def standard_scores(tokens: Tensor | Sequence[Tensor], w_r: Tensor) -> RoutingScores:
    """Learned linear scores r = X W_r, one scalar per token."""
    if w_r.data.ndim != 2 or w_r.data.shape[1] != 1:
        raise ShapeError(f"router weight must be (D, 1), got {w_r.data.shape}")
    samples = [tokens] if isinstance(tokens, Tensor) else list(tokens)
    columns = tuple(matmul(x, w_r) for x in samples)
    values = np.stack([c.data.reshape(-1) for c in columns])
    return RoutingScores(values=values, source="standard", tensors=columns)


def attention_scores(
    maps: LayerMaps | Sequence[Tensor] | np.ndarray,
    num_tokens: int | None = None,
) -> RoutingScores:
    """Parameter-free scores from the previous layer's attention maps.

    score_i = mean over heads and map rows of column i's attention weight;
    the scores of a full-coverage map sum to 1. When the maps cover only a
    token subset (previous layer was routed), the subset scores are placed at
    their positions in a ``num_tokens``-long vector and absent tokens score 0.
    """
    token_indices = None
    if isinstance(maps, LayerMaps):
        token_indices = maps.token_indices
        arr = maps.stacked()
    elif isinstance(maps, np.ndarray):
        arr = maps
    else:
        arr = np.stack([m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps])
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"attention maps must be (H, n, n), got {arr.shape}")
    # Column means per head, then head average: 1/(H*n) sum_h sum_j a[h, j, i].
    scores = arr.mean(axis=(0, 1))
    if token_indices is not None:
        if num_tokens is None:
            raise ContractError("num_tokens required to expand subset attention maps")
        full = np.zeros(num_tokens, dtype=scores.dtype)
        full[token_indices] = scores
        scores = full
    elif num_tokens is not None and num_tokens != scores.shape[0]:
        raise ShapeError(f"maps cover {scores.shape[0]} tokens, expected {num_tokens}")
    return RoutingScores(values=scores[None, :], source="attention")


def select_top_k(
    scores: RoutingScores | np.ndarray,
    capacity: float,
    competing: Sequence[int],
) -> RoutingDecision:
    """Pick the k highest-scoring competing tokens per sample.

    k = max(1, floor(capacity * n_competing)); ties break toward the lower
    index, making the decision deterministic and scale-invariant.
    """
    if not 0.0 < capacity <= 1.0:
        raise ContractError("capacity must lie in (0, 1]")
    competing_idx = np.asarray(sorted(int(i) for i in competing), dtype=np.int64)
    if competing_idx.size == 0:
        raise ContractError("competing token set must be nonempty")
    values = scores.values if isinstance(scores, RoutingScores) else np.atleast_2d(scores)
    n_comp = competing_idx.size
    k = max(1, int(math.floor(capacity * n_comp + _CAPACITY_EPS)))
    beta = 1.0 - capacity / n_comp
    selected = []
    for row in values:
        comp_scores = row[competing_idx]
        order = np.lexsort((competing_idx, -comp_scores))
        chosen = competing_idx[order[:k]]
        selected.append(np.sort(chosen))
    return RoutingDecision(selected=selected, k=k, beta=beta)


def mod_block_forward(
    tokens: Tensor,
    layer_params: dict[str, Tensor],
    prev_maps: LayerMaps | None,
    config: ModelConfig,
    force_skip_token: int | None = None,
) -> tuple[BlockOutput, RoutingDecision, RoutingScores]:
    """Capacity-routed transformer block over one sample's tokens (N, D).

    Standard routing multiplies each selected token's block contribution by
    its score before the residual add; attention routing adds the plain
    contribution. Attention among the processed tokens only; skipped rows of
    the output are bit-identical to the input. ``force_skip_token`` drops one
    token from the processed set after selection (selection itself is
    unchanged), which realizes leave-one-out analysis.
    """
    n = tokens.dims[0]
    if config.cls_policy == "always_process":
        competing = list(range(1, n))
        always = [0]
    else:
        competing = list(range(n))
        always = []

    if config.router == "standard":
        scores = standard_scores(tokens, layer_params["W_r"])
        score_column = scores.tensors[0]
    else:
        if prev_maps is None:
            raise ContractError("attention routing requires the previous layer's maps")
        scores = attention_scores(prev_maps, num_tokens=n)
        score_column = None

    decision = select_top_k(scores, config.capacity, competing)
    chosen = decision.selected[0]
    if force_skip_token is not None:
        chosen = chosen[chosen != force_skip_token]
    processed = np.array(sorted(set(chosen.tolist()) | set(always)), dtype=np.int64)

    gathered = gather_rows(tokens, processed)
    attn_delta, h, mlp_delta, maps = block_parts(gathered, layer_params, config)

    if config.router == "attention":
        out_rows = add(h, mlp_delta)
    else:
        contribution = add(attn_delta, mlp_delta)
        r = gather_rows(score_column, processed)
        if always:
            # Always-processed tokens get the plain residual: pin their
            # multiplier to 1 via a constant, which also blocks router
            # gradient through them.
            pos = [int(np.searchsorted(processed, a)) for a in always]
            r = scatter_rows(r, pos, Tensor(np.ones((len(pos), 1), dtype=np.float32)))
        out_rows = add(gathered, row_scale(contribution, r))

    new_tokens = scatter_rows(tokens, processed, out_rows)
    block = BlockOutput(tokens=new_tokens, maps=LayerMaps(maps, token_indices=processed))
    return block, decision, scores


def adapt_dense_checkpoint(
    dense_params: dict[str, Tensor], target_config: ModelConfig, seed: int = 0
) -> dict[str, Tensor]:
    """Turn a dense model's weights into a routed model's weights.

    All dense tensors are copied verbatim. Attention routing adds nothing;
    standard routing adds one freshly initialized (D, 1) router weight per
    routed layer, drawn from N(0, 0.02).
    """
    expected_dense = param_shapes(target_config.dense_twin())
    if set(dense_params) != set(expected_dense):
        missing = sorted(set(expected_dense) - set(dense_params))
        extra = sorted(set(dense_params) - set(expected_dense))
        raise ContractError(
            f"dense checkpoint does not match target architecture: "
            f"missing={missing} extra={extra}"
        )
    for name, shape in expected_dense.items():
        if dense_params[name].dims != shape:
            raise ShapeError(f"{name} has shape {dense_params[name].dims}, expected {shape}")
    adapted = {
        name: Tensor(t.data.copy(), requires_grad=True) for name, t in dense_params.items()
    }
    if target_config.router == "standard":
        rng = np.random.default_rng(seed)
        for l in target_config.mod_pattern:
            w = rng.normal(0.0, 0.02, size=(target_config.dim, 1)).astype(np.float32)
            adapted[f"router.{l}.W_r"] = Tensor(w, requires_grad=True)
    return adapted
