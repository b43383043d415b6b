"""
Analytic multiply-accumulate cost model for dense and token-routed models.

Counts are MACs and are reported as "FLOPs" (1 MAC = 1 FLOP); this is the
convention under which the standard model presets land on their published
compute figures (e.g. 4.61G for the small 384-dim model), so it is used
throughout. Norms, softmax and activations are excluded as negligible.

Per block, with n processed tokens, D width, d head width, H heads and
F hidden width: 4nD^2 (QKV + output projections) + 2n^2 dH (QK^T and AV)
+ 2nDF (the two MLP matmuls). Routed layers use n = k (+1 when the class
token is always processed) instead of the full token count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .model import ModelConfig, alternating_pattern
from .tensor import ContractError

_CAPACITY_EPS = 1e-9


class InfeasibleError(ValueError):
    """No layer count satisfies the requested compute target."""


@dataclass(frozen=True)
class LayerCost:
    layer: int
    kind: str  # "dense" | "mod"
    mac: int


@dataclass(frozen=True)
class FlopReport:
    embed_mac: int
    head_mac: int
    layers: tuple[LayerCost, ...]

    @property
    def total(self) -> int:
        return self.embed_mac + self.head_mac + sum(e.mac for e in self.layers)


def _block_mac(n: int, config: ModelConfig) -> int:
    d_model = config.dim
    proj = 4 * n * d_model * d_model
    attn = 2 * n * n * config.head_dim * config.heads
    mlp = 2 * n * d_model * config.mlp_hidden
    return proj + attn + mlp


def routed_tokens(config: ModelConfig) -> int:
    """Tokens processed inside a routed layer: top-k plus the pinned class token."""
    cls_always = config.cls_policy == "always_process"
    n_competing = config.num_tokens - 1 if cls_always else config.num_tokens
    k = max(1, int(math.floor(config.capacity * n_competing + _CAPACITY_EPS)))
    return k + (1 if cls_always else 0)


def count_model(config: ModelConfig) -> FlopReport:
    """Per-block MAC breakdown for one forward pass of a single image."""
    n_full = config.num_tokens
    n_routed = routed_tokens(config)
    mod_layers = set(config.mod_pattern)
    layers = tuple(
        LayerCost(
            layer=l,
            kind="mod" if l in mod_layers else "dense",
            mac=_block_mac(n_routed if l in mod_layers else n_full, config),
        )
        for l in range(config.depth)
    )
    embed = config.num_patches * (config.channels * config.patch_size**2) * config.dim
    head = config.dim * config.num_classes
    return FlopReport(embed_mac=embed, head_mac=head, layers=layers)


def build_isoflop(dense_config: ModelConfig, target_mac: int) -> ModelConfig:
    """Dense config whose layer count brings its total closest to ``target_mac``.

    Matching is nearest-total (ties toward fewer layers): a compute-matched
    baseline may land slightly above or below the target, since whole layers
    are the only knob.
    """
    dense = dense_config.dense_twin()
    full = count_model(dense).total
    if target_mac > full:
        raise ContractError(f"target {target_mac} exceeds the dense total {full}")
    totals = {
        depth: count_model(replace(dense, depth=depth)).total
        for depth in range(1, dense.depth + 1)
    }
    if target_mac < totals[1]:
        raise InfeasibleError(f"target {target_mac} is below a 1-layer model ({totals[1]})")
    best = min(totals, key=lambda depth: (abs(totals[depth] - target_mac), depth))
    return replace(dense, depth=best)


# ---------------------------------------------------------------------------
# Standard model presets
# ---------------------------------------------------------------------------


def deit_tiny(**overrides) -> ModelConfig:
    base = dict(image_size=224, patch_size=16, channels=3, depth=12, dim=192, heads=3)
    base.update(overrides)
    return ModelConfig(**base)


def deit_small(**overrides) -> ModelConfig:
    base = dict(image_size=224, patch_size=16, channels=3, depth=12, dim=384, heads=6)
    base.update(overrides)
    return ModelConfig(**base)


def vit_base(**overrides) -> ModelConfig:
    base = dict(image_size=224, patch_size=16, channels=3, depth=12, dim=768, heads=12)
    base.update(overrides)
    return ModelConfig(**base)


def vit_large_384(**overrides) -> ModelConfig:
    # The published compute figure for this model corresponds to 384 px input.
    base = dict(image_size=384, patch_size=16, channels=3, depth=24, dim=1024, heads=16)
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {
    "deit_tiny": deit_tiny,
    "deit_small": deit_small,
    "vit_base": vit_base,
    "vit_large_384": vit_large_384,
}


def with_alternating_mod(
    config: ModelConfig, capacity: float, router: str = "attention", start: int = 1
) -> ModelConfig:
    """Routed variant: every second layer from ``start`` on becomes a routed layer."""
    return replace(
        config,
        mod_pattern=alternating_pattern(config.depth, start),
        capacity=capacity,
        router=router,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def format_report(report: FlopReport, title: str = "model") -> str:
    lines = [
        f"FLOP report: {title}",
        f"{'component':<12} {'kind':<6} {'MACs':>16}",
        f"{'patch embed':<12} {'':<6} {report.embed_mac:>16,}",
    ]
    for entry in report.layers:
        lines.append(f"{'layer ' + str(entry.layer):<12} {entry.kind:<6} {entry.mac:>16,}")
    lines.append(f"{'head':<12} {'':<6} {report.head_mac:>16,}")
    lines.append(f"{'total':<12} {'':<6} {report.total:>16,}")
    lines.append(f"total: {report.total / 1e9:.3f} GMACs")
    return "\n".join(lines)


def report_csv(report: FlopReport) -> str:
    rows = ["component,kind,mac"]
    rows.append(f"patch_embed,,{report.embed_mac}")
    for entry in report.layers:
        rows.append(f"layer_{entry.layer},{entry.kind},{entry.mac}")
    rows.append(f"head,,{report.head_mac}")
    rows.append(f"total,,{report.total}")
    return "\n".join(rows) + "\n"
