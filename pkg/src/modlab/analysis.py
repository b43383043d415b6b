"""
Routing-quality analysis: leave-one-out token importance, correlation of
routing scores with importance, and routing-mask export.

"Removing" a token means forcing it onto the residual skip path at one
routed layer while every other routing decision stays as it was; the
importance of the token is the resulting change in that sample's loss.
Correlations are Pearson by default (Spearman behind a flag) with two-sided
p-values from the t statistic evaluated through the regularized incomplete
beta function.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .model import ModelConfig, RoutingLogEntry, cross_entropy, model_forward
from .routing import RoutingScores
from .tensor import ContractError, Tensor


class AnalysisError(ValueError):
    """Base class for analysis failures."""


class InsufficientDataError(AnalysisError):
    """Fewer than three pairs; correlation is undefined."""


class UndefinedCorrelationError(AnalysisError):
    """One of the variables has zero variance."""


@dataclass(frozen=True)
class ImportanceRecord:
    sample: int
    layer: int
    token: int
    delta_loss: float


@dataclass(frozen=True)
class LayerCorrelation:
    layer: int
    r: float
    p_value: float
    n: int
    method: str


# ---------------------------------------------------------------------------
# Leave-one-out importance
# ---------------------------------------------------------------------------


def loo_importance(
    config: ModelConfig,
    params: dict[str, Tensor],
    images: np.ndarray,
    labels: Sequence[int],
    layer: int,
) -> list[ImportanceRecord]:
    """Loss delta per competing token when it is forced to skip ``layer``.

    Tokens that were already skipped yield a delta of exactly zero (the
    forward pass is computationally identical).
    """
    if layer not in config.mod_pattern:
        raise ContractError(f"layer {layer} is not a routed layer in this config")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = config.num_tokens
    competing = range(1, n) if config.cls_policy == "always_process" else range(n)
    records: list[ImportanceRecord] = []
    for b in range(images.shape[0]):
        image = images[b : b + 1]
        label = [int(labels[b])]
        logits, _, _ = model_forward(image, params, config, collect_maps=False)
        base_loss = cross_entropy(logits, label).item()
        for token in competing:
            logits_i, _, _ = model_forward(
                image, params, config, force_skip=(layer, token), collect_maps=False
            )
            delta = cross_entropy(logits_i, label).item() - base_loss
            records.append(ImportanceRecord(sample=b, layer=layer, token=token, delta_loss=delta))
    return records


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def _pearson_with_p(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = x.size
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt((xd**2).sum())
    sy = np.sqrt((yd**2).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance in one of the variables")
    r = float(np.clip((xd * yd).sum() / (sx * sy), -1.0, 1.0))
    df = n - 2
    if 1.0 - r * r < 1e-15:
        return r, 0.0
    t_sq = r * r * df / (1.0 - r * r)
    p = float(betainc(df / 2.0, 0.5, df / (df + t_sq)))
    return r, p


def scores_by_layer(scores) -> dict[int, np.ndarray]:
    """Normalize routing-score carriers to {layer: (B, N) array}."""
    if isinstance(scores, Mapping):
        return {int(l): np.atleast_2d(v) for l, v in scores.items()}
    if isinstance(scores, RoutingScores):
        raise ContractError("bare RoutingScores carries no layer index; pass {layer: values}")
    return {entry.layer: entry.scores for entry in scores}


def correlate(
    scores,
    records: Sequence[ImportanceRecord],
    method: str = "pearson",
) -> list[LayerCorrelation]:
    """Per-layer correlation between routing scores and importance deltas.

    ``scores`` is a routing log (list of per-layer entries), or a mapping
    {layer: (B, N) score array}. Pairs are pooled across samples and tokens
    within each layer, matching on (sample, layer, token).
    """
    if method not in ("pearson", "spearman"):
        raise ContractError(f"unknown correlation method {method!r}")
    table = scores_by_layer(scores)
    by_layer: dict[int, list[ImportanceRecord]] = {}
    for rec in records:
        by_layer.setdefault(rec.layer, []).append(rec)
    reports = []
    for layer in sorted(by_layer):
        if layer not in table:
            raise ContractError(f"no scores supplied for layer {layer}")
        recs = by_layer[layer]
        if len(recs) < 3:
            raise InsufficientDataError(f"layer {layer}: only {len(recs)} pairs")
        x = np.array([table[layer][rec.sample, rec.token] for rec in recs])
        y = np.array([rec.delta_loss for rec in recs])
        if method == "spearman":
            x = rankdata(x)
            y = rankdata(y)
        r, p = _pearson_with_p(x, y)
        reports.append(LayerCorrelation(layer=layer, r=r, p_value=p, n=len(recs), method=method))
    return reports


# ---------------------------------------------------------------------------
# Mask export
# ---------------------------------------------------------------------------


def _write_pgm(path: str, grid: np.ndarray) -> None:
    h, w = grid.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in grid)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"P2\n{w} {h}\n255\n{rows}\n")


def read_pgm(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    if not tokens or tokens[0] != "P2":
        raise AnalysisError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w)
    if maxval != 255:
        raise AnalysisError(f"{path}: unexpected maxval {maxval}")
    return values


def mask_to_selected(grid: np.ndarray, cls_offset: int = 1) -> np.ndarray:
    """Grid of {0, 255} back to strictly increasing token indices."""
    flat = grid.reshape(-1)
    return np.flatnonzero(flat == 255) + cls_offset


def export_routing_masks(
    routing_log: Sequence[RoutingLogEntry],
    config: ModelConfig,
    out_dir: str,
    records: Sequence[ImportanceRecord] = (),
) -> list[str]:
    """Write one P2 graymap per (sample, routed layer) plus a routing CSV.

    Graymaps lay the patch tokens out on the patch grid: 255 processed,
    0 skipped. The CSV lists every competing token with columns
    sample,layer,token,score,selected,delta_loss (delta_loss blank unless a
    matching importance record was supplied).
    """
    os.makedirs(out_dir, exist_ok=True)
    g = config.grid_size
    n = config.num_tokens
    competing = range(1, n) if config.cls_policy == "always_process" else range(n)
    deltas = {(r.sample, r.layer, r.token): r.delta_loss for r in records}
    written: list[str] = []
    csv_lines = ["sample,layer,token,score,selected,delta_loss"]
    for entry in routing_log:
        for sample in range(entry.scores.shape[0]):
            selected = set(int(i) for i in entry.selected[sample])
            grid = np.zeros((g, g), dtype=np.int64)
            for token in range(1, n):
                if token in selected:
                    cell = token - 1
                    grid[cell // g, cell % g] = 255
            path = os.path.join(out_dir, f"mask_s{sample:03d}_l{entry.layer:02d}.pgm")
            _write_pgm(path, grid)
            written.append(path)
            for token in competing:
                delta = deltas.get((sample, entry.layer, token))
                csv_lines.append(
                    f"{sample},{entry.layer},{token},"
                    f"{entry.scores[sample, token]:.8g},"
                    f"{1 if token in selected else 0},"
                    f"{'' if delta is None else f'{delta:.8g}'}"
                )
    csv_path = os.path.join(out_dir, "routing.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(csv_lines) + "\n")
    written.append(csv_path)
    return written
