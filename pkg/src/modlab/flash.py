"""
Tiled computation of attention-routing scores without the N x N map.

The kernel walks query blocks in the outer loop and key blocks in the inner
loop, accumulating exponentiated logits into a (block_rows, N) strip with a
running per-row maximum, then folds each strip's normalized column sums into
the score vector. Peak auxiliary memory is O(Br * N) per head; the full
attention matrix is never materialized. Buffers are claimed through
``_alloc`` so tests can pin a hard allocation cap.

Two fidelity toggles exist for comparison against the plainest formulation:
``scale=False`` drops the 1/sqrt(d) logit scaling and ``stabilize=False``
drops the running-max subtraction. Defaults keep both on so the output
matches the model's attention semantics exactly.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .routing import RoutingScores, attention_scores
from .tensor import ContractError, NumericError, ShapeError, Tensor, softmax_rows


@dataclass(frozen=True)
class TileConfig:
    """Row (query) and column (key) block sizes; a smaller final tile is fine."""

    br: int
    bc: int

    def __post_init__(self):
        if self.br < 1 or self.bc < 1:
            raise ContractError("tile sizes must be >= 1")


class AllocationCapExceeded(MemoryError):
    """A kernel buffer exceeded the active allocation cap."""


_CAP = threading.local()


@contextmanager
def allocation_cap(max_elements: int):
    """Fail any single kernel buffer larger than ``max_elements`` elements."""
    previous = getattr(_CAP, "limit", None)
    _CAP.limit = int(max_elements)
    try:
        yield
    finally:
        _CAP.limit = previous


def _alloc(shape: tuple[int, ...], dtype) -> np.ndarray:
    n = int(np.prod(shape))
    limit = getattr(_CAP, "limit", None)
    if limit is not None and n > limit:
        raise AllocationCapExceeded(
            f"buffer of {n} elements (shape {shape}) exceeds cap of {limit}"
        )
    return np.zeros(shape, dtype=dtype)


def _as_qk_array(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be (H, N, d), got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr


def flash_scores(
    q,
    k,
    tiles: TileConfig,
    scale: bool = True,
    stabilize: bool = True,
) -> RoutingScores:
    """Attention-routing scores from Q, K (H, N, d) by blockwise accumulation.

    Equals the column-mean-of-softmax score path without ever holding an
    (N, N) buffer; the result sums to 1 over tokens.
    """
    q = _as_qk_array(q, "Q")
    k = _as_qk_array(k, "K")
    if q.shape != k.shape:
        raise ShapeError(f"Q and K shapes differ: {q.shape} vs {k.shape}")
    heads, n, d = q.shape
    dtype = np.result_type(q, k)
    inv_sqrt_d = 1.0 / math.sqrt(d)

    totals = _alloc((n,), dtype)
    for h in range(heads):
        kh_t = np.ascontiguousarray(k[h].T)  # (d, N), reused across query blocks
        for i0 in range(0, n, tiles.br):
            rows = min(tiles.br, n - i0)
            qi = q[h, i0 : i0 + rows]
            strip = _alloc((rows, n), dtype)
            running_max = np.full(rows, -np.inf, dtype=dtype)
            for j0 in range(0, n, tiles.bc):
                cols = min(tiles.bc, n - j0)
                logits = _alloc((rows, cols), dtype)
                np.matmul(qi, kh_t[:, j0 : j0 + cols], out=logits)
                if scale:
                    logits *= inv_sqrt_d
                if stabilize:
                    new_max = np.maximum(running_max, logits.max(axis=1))
                    if j0:
                        # Rescale what is already accumulated to the new max.
                        strip[:, :j0] *= np.exp(running_max - new_max)[:, None]
                    np.exp(logits - new_max[:, None], out=strip[:, j0 : j0 + cols])
                    running_max = new_max
                else:
                    np.exp(logits, out=strip[:, j0 : j0 + cols])
            normalizer = strip.sum(axis=1)
            np.divide(strip, normalizer[:, None], out=strip)
            totals += strip.sum(axis=0)
    totals /= heads * n
    return RoutingScores(values=totals[None, :], source="attention")


# ---------------------------------------------------------------------------
# Equivalence harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepEntry:
    n: int
    heads: int
    br: int
    bc: int
    trial: int
    deviation: float


@dataclass
class SweepReport:
    tolerance: float
    entries: list[SweepEntry] = field(default_factory=list)

    @property
    def max_abs_deviation(self) -> float:
        return max((e.deviation for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_abs_deviation <= self.tolerance

    def worst(self) -> SweepEntry | None:
        return max(self.entries, key=lambda e: e.deviation, default=None)


def naive_scores(q: np.ndarray, k: np.ndarray) -> RoutingScores:
    """Reference path: materialize softmax(QK^T/sqrt(d)) per head, then Eq.-style column means."""
    heads, _, d = q.shape
    maps = np.stack(
        [softmax_rows(Tensor(q[h] @ k[h].T / math.sqrt(d))).data for h in range(heads)]
    )
    return attention_scores(maps)


def equivalence_sweep(
    n_list: Sequence[int],
    h_list: Sequence[int],
    tile_sizes: Sequence[int],
    trials: int,
    seed: int = 0,
    head_dim: int = 8,
    tolerance: float = 1e-5,
) -> SweepReport:
    """Run tiled vs. naive scores over a grid; all (br, bc) pairs from ``tile_sizes``.

    The report fails if any absolute deviation exceeds ``tolerance``.
    """
    rng = np.random.default_rng(seed)
    report = SweepReport(tolerance=tolerance)
    for n in n_list:
        for heads in h_list:
            for trial in range(trials):
                q = rng.normal(size=(heads, n, head_dim))
                k = rng.normal(size=(heads, n, head_dim))
                reference = naive_scores(q, k).values
                for br in tile_sizes:
                    for bc in tile_sizes:
                        tiled = flash_scores(q, k, TileConfig(br, bc)).values
                        dev = float(np.abs(tiled - reference).max())
                        report.entries.append(
                            SweepEntry(n=n, heads=heads, br=br, bc=bc, trial=trial, deviation=dev)
                        )
    return report
