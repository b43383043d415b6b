"""Analytic compute model: published totals, routed savings, layer matching."""

from dataclasses import replace

import pytest

from modlab.flops import (
    InfeasibleError,
    build_isoflop,
    count_model,
    deit_small,
    deit_tiny,
    format_report,
    report_csv,
    routed_tokens,
    vit_base,
    vit_large_384,
    with_alternating_mod,
)
from modlab.model import ModelConfig
from modlab.tensor import ContractError


def within(value, target, rel=0.05):
    return abs(value - target) <= rel * target


# ---------------------------------------------------------------------------
# published totals
# ---------------------------------------------------------------------------


def test_dense_preset_totals_match_published_figures():
    assert within(count_model(deit_tiny()).total, 1.26e9)
    assert within(count_model(deit_small()).total, 4.61e9)
    assert within(count_model(vit_base()).total, 17.58e9)
    assert within(count_model(vit_large_384()).total, 191.21e9)


def test_routed_tiny_totals_match_published_figures():
    mod50 = with_alternating_mod(deit_tiny(), capacity=0.5)
    mod125 = with_alternating_mod(deit_tiny(), capacity=0.125)
    assert within(count_model(mod50).total, 0.92e9)
    assert within(count_model(mod125).total, 0.71e9)


def test_routed_token_count():
    cfg = with_alternating_mod(deit_tiny(), capacity=0.125)
    assert routed_tokens(cfg) == 24 + 1  # floor(0.125 * 196) plus the class token


def test_hand_counted_toy_total():
    cfg = ModelConfig(
        image_size=2, patch_size=2, channels=1, depth=1, dim=2, heads=1, num_classes=3
    )
    report = count_model(cfg)
    # embed 1*(1*4)*2 = 8; block 4*2*4 + 2*4*2 + 2*2*2*8 = 112; head 2*3 = 6.
    assert report.embed_mac == 8
    assert report.layers[0].mac == 112
    assert report.head_mac == 6
    assert report.total == 126


def test_report_total_is_sum_of_parts():
    report = count_model(with_alternating_mod(deit_tiny(), capacity=0.5))
    assert report.total == report.embed_mac + report.head_mac + sum(e.mac for e in report.layers)
    kinds = [e.kind for e in report.layers]
    assert kinds == ["dense", "mod"] * 6


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


def test_count_is_monotone_in_each_knob():
    base = ModelConfig(
        image_size=32,
        patch_size=16,
        channels=3,
        depth=4,
        dim=64,
        heads=4,
        num_classes=10,
        mod_pattern=(1, 3),
        capacity=0.5,
        router="attention",
    )
    t0 = count_model(base).total
    assert count_model(replace(base, depth=5)).total >= t0
    assert count_model(replace(base, dim=128)).total >= t0
    assert count_model(replace(base, image_size=64)).total >= t0
    assert count_model(replace(base, capacity=0.75)).total >= t0
    assert count_model(replace(base, num_classes=100)).total >= t0


def test_full_capacity_equals_dense_exactly():
    cfg = with_alternating_mod(deit_tiny(), capacity=1.0)
    assert count_model(cfg).total == count_model(cfg.dense_twin()).total


# ---------------------------------------------------------------------------
# layer-matched baseline
# ---------------------------------------------------------------------------


def test_isoflop_for_half_capacity_routed_tiny():
    target = count_model(with_alternating_mod(deit_tiny(), capacity=0.5)).total
    iso = build_isoflop(deit_tiny(), target)
    assert iso.depth == 9
    assert iso.mod_pattern == ()
    assert within(count_model(iso).total, 0.95e9)


def test_isoflop_exact_targets():
    dense = deit_tiny()
    assert build_isoflop(dense, count_model(dense).total).depth == dense.depth
    report = count_model(dense)
    three_layers = report.embed_mac + report.head_mac + 3 * report.layers[0].mac
    assert build_isoflop(dense, three_layers).depth == 3


def test_isoflop_is_nearest_layer_count():
    dense = deit_tiny()
    per_layer = count_model(dense).layers[0].mac
    target = count_model(with_alternating_mod(dense, capacity=0.5)).total
    best = build_isoflop(dense, target)
    chosen = count_model(best).total
    for depth in (best.depth - 1, best.depth + 1):
        other = count_model(replace(dense, depth=depth)).total
        assert abs(chosen - target) <= abs(other - target)
    assert per_layer > 0


def test_isoflop_errors():
    dense = deit_tiny()
    with pytest.raises(ContractError):
        build_isoflop(dense, count_model(dense).total + 1)
    with pytest.raises(InfeasibleError):
        build_isoflop(dense, 1000)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_text_and_csv():
    report = count_model(deit_tiny())
    text = format_report(report, "tiny")
    assert "total" in text and "GMACs" in text
    csv = report_csv(report)
    lines = csv.strip().split("\n")
    assert lines[0] == "component,kind,mac"
    assert lines[-1] == f"total,,{report.total}"
