from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilt_lab import adapters as ad
from lilt_lab import encoders, freeze, trainer
from lilt_lab.encoders import DualEncoder
from lilt_lab.freeze import FreezePlan

# (preset, reported "% Trained", tolerance)
REPORTED_PERCENTS = [
    ("frozen", 0.00, 0.02),
    ("ln_only", 0.04, 0.02),
    ("projection_only", 0.20, 0.02),
    ("lilt_ln", 0.24, 0.02),
    ("lilt_bf", 0.31, 0.02),
    ("lilt_da_noln", 6.96, 0.15),
    ("lilt_da", 6.99, 0.15),
    ("lilt_lwa_noln", 6.97, 0.15),
    ("lilt_lwa", 7.01, 0.15),
    ("lilt_lwa_bitfit", 7.09, 0.15),
    ("lilt_da_bitfit", 7.06, 0.15),
    ("lit", 56.01, 0.15),
    pytest.param(
        "lit_reversed", 43.99, 0.15,
        marks=pytest.mark.xfail(strict=True, reason="reported value equals image tower alone over the total; see ledger"),
    ),
    pytest.param(
        "lit_plus_lilt_da", 65.87, 0.15,
        marks=pytest.mark.xfail(strict=True, reason="no adapter targeting reproduces the reported value; see ledger"),
    ),
    ("lit_plus_lilt_lwa", 57.57, 0.15),
    ("clip", 100.0, 0.15),
]


@pytest.mark.parametrize("name,expected,tol", REPORTED_PERCENTS)
def test_base_percent_trained(name, expected, tol):
    acc = freeze.count_preset(name, "base")
    assert abs(round(acc.percent_trained, 2) - expected) <= tol + 1e-9


def test_reported_percents_recorded_on_recipes():
    for row in REPORTED_PERCENTS:
        name, expected = (row.values[:2] if hasattr(row, "values") else row[:2])
        assert freeze.preset(name).reported_percent == expected


@pytest.mark.parametrize(
    "name,count",
    [("lilt_da", 14.65e6), ("lilt_lwa", 14.67e6), ("lit", 109.28e6), ("clip", 195.13e6)],
)
def test_reported_trainable_counts(name, count):
    acc = freeze.count_preset(name, "base")
    assert abs(acc.trainable_params - count) / count < 0.01


def test_exact_derived_counts():
    assert freeze.count_preset("lilt_lwa", "base").trainable_params == 14_671_872 + 1  # + temperature
    assert freeze.count_preset("clip", "base").total_params == 195_129_601
    assert freeze.count_preset("lilt_da", "base").percent_trained_host == pytest.approx(7.5057, abs=1e-4)


def test_schema_count_runs_without_allocation_for_large():
    acc = freeze.count_preset("lilt_lwa", "large")
    assert acc.trainable_params == 51_179_521


# ---------------------------------------------------------------------------
# pattern language


@pytest.mark.parametrize(
    "pattern,path,hit",
    [
        ("*.ln*.gamma", "text.layer.3.ln1.gamma", True),  # unrooted patterns match as suffixes
        ("ln*.gamma", "text.layer.3.attn.q.weight", False),
        ("layer.*.gamma", "text.layer.3.ln1.gamma", False),  # '*' spans exactly one segment
        ("layer.*.ln*.gamma", "text.layer.3.ln1.gamma", True),
        ("**.ln*.gamma", "text.layer.3.ln1.gamma", True),
        ("**.ln*.gamma", "image.ln_final.gamma", True),
        ("**.bias", "image.layer.0.mlp.fc1.bias", True),
        ("bias", "image.layer.0.mlp.fc1.bias", True),
        ("head.*", "head.image_proj", True),
        ("head.*", "text.head.x", False),
        ("text.**", "text.embed.token", True),
        ("text.**", "image.embed.patch.weight", False),
        ("image.layer.1?.ln1.beta", "image.layer.11.ln1.beta", True),
    ],
)
def test_match_pattern(pattern, path, hit):
    assert freeze.match_pattern(pattern, path) is hit


@pytest.mark.parametrize("bad", ["", "a..b", "text.ln(1)", "text. ln"])
def test_malformed_patterns(bad):
    with pytest.raises(freeze.PlanError):
        FreezePlan((bad,))


def test_unmatched_pattern_diagnostic_and_strict():
    paths = ["text.layer.0.ln1.gamma"]
    trainable, diags = freeze.resolve(FreezePlan(("**.nothing",)), paths)
    assert not trainable and diags[0]["kind"] == "unmatched_unlocked_pattern"
    with pytest.raises(freeze.PlanError):
        freeze.resolve(FreezePlan(("**.nothing",)), paths, strict=True)


def test_unknown_preset():
    with pytest.raises(freeze.PlanError):
        freeze.preset("lora")


def test_ln_only_matches_exactly_layer_norm_vectors():
    m = DualEncoder.create("tiny")
    freeze.apply_plan(m, freeze.preset("ln_only").plan)
    trainable = set(m.trainable_paths()) - {"head.log_tau"}
    depth = 4
    assert len(trainable) == 2 * 2 * depth * 2 + 2 * 2  # + text.ln_embed and image.ln_final
    assert all(p.endswith((".gamma", ".beta")) for p in trainable)


def test_frozen_plan_gives_no_gradients(rng):
    m = freeze.build_model(freeze.preset("frozen"))
    assert m.trainable_paths() == []
    from lilt_lab import contrastive, tensor as T

    z = contrastive.similarity(m.embed_image(rng.uniform(-1, 1, (2, 3, 32, 32))), m.embed_text(np.ones((2, 16), int)))
    T.backward(contrastive.total_loss(z, log_tau=m.log_tau()))
    assert all(t.grad is None for t in m.params.values())


def test_lit_keeps_image_tower_frozen_and_text_trainable():
    m = freeze.build_model(freeze.preset("lit"))
    tr = set(m.trainable_paths())
    assert not any(p.startswith("image.") for p in tr)
    assert all(p in tr for p in m.params if p.startswith("text."))
    assert {"head.image_proj", "head.text_proj"} <= tr


def test_temperature_trainability():
    assert "head.log_tau" in freeze.preset("lilt_ln").plan.unlocked_patterns
    assert "head.log_tau" in freeze.preset("frozen").plan.locked_patterns
    lit_plan = freeze.preset("clip", paper_literal=True).plan
    assert freeze.resolve(lit_plan, ["head.log_tau"])[0] == set()


@settings(max_examples=40, deadline=None)
@given(
    unlocked=st.lists(st.sampled_from(["**.gamma", "**.bias", "head.*", "text.**", "image.layer.0.**", "**.ln1.*"]), max_size=4),
    locked=st.lists(st.sampled_from(["**.beta", "text.layer.*.**", "head.log_tau", "image.**"]), max_size=3),
)
def test_apply_plan_partition_and_idempotence(unlocked, locked):
    m = DualEncoder.create("tiny")
    ad.insert(m, ad.AdapterSpec("layerwise", target="image"))
    plan = FreezePlan(tuple(unlocked), tuple(locked))
    freeze.apply_plan(m, plan)
    first = {p: t.requires_grad for p, t in m.params.items()}
    freeze.apply_plan(m, plan)
    assert first == {p: t.requires_grad for p, t in m.params.items()}
    trainable = set(m.trainable_paths())
    frozen = {p for p, t in m.params.items() if not t.requires_grad}
    assert trainable | frozen == set(m.params) and not trainable & frozen
    assert all(p in trainable for p in m.params if ad.is_adapter_path(p))
    expected, _ = freeze.resolve(plan, m.params)
    assert trainable == expected


# ---------------------------------------------------------------------------
# conservation


def test_verify_frozen_zero_steps():
    m = freeze.build_model(freeze.preset("lilt_lwa"))
    snap = {p: t.data.copy() for p, t in m.params.items()}
    rep = freeze.verify_frozen(snap, m, set(m.trainable_paths()))
    assert rep.changed_groups == []


def test_verify_frozen_names_violating_path():
    m = freeze.build_model(freeze.preset("lilt_ln"))
    snap = {p: t.data.copy() for p, t in m.params.items()}
    m.params["text.layer.2.attn.q.weight"].data = m.params["text.layer.2.attn.q.weight"].data + np.float32(1e-7)
    with pytest.raises(freeze.ConservationViolation, match="text.layer.2.attn.q.weight"):
        freeze.verify_frozen(snap, m, freeze.preset("lilt_ln").plan)


def _short_run(preset):
    cfg = trainer.TrainConfig(preset=preset, batch_size=8, epochs=2, warmup_epochs=0, max_steps=100)
    return trainer.train(cfg, write=False, evaluate=False)


def test_lilt_ln_changes_only_ln_projection_temperature():
    res = _short_run("lilt_ln")
    rep = freeze.verify_frozen(res.initial_state, res.model, freeze.preset("lilt_ln").plan)
    assert rep.changed_groups == ["ln", "projection", "temperature"]


def test_clip_changes_every_group():
    res = _short_run("clip")
    rep = freeze.verify_frozen(res.initial_state, res.model, set(res.model.trainable_paths()))
    assert rep.changed_groups == ["bias", "ln", "projection", "temperature", "tower"]
    assert rep.n_frozen == 0


def test_accounting_groups_sum_to_totals():
    acc = freeze.count_preset("lilt_lwa_bitfit", "base")
    assert sum(g["total"] for g in acc.groups.values()) == acc.total_params
    assert sum(g["trainable"] for g in acc.groups.values()) == acc.trainable_params
    assert acc.trainable_params <= acc.total_params


def test_model_accounting_matches_schema_for_tiny():
    for name in ("lilt_lwa", "lilt_da", "lit"):
        recipe = freeze.preset(name)
        m = freeze.build_model(recipe)
        a, b = freeze.model_accounting(m), freeze.schema_count(encoders.size_preset("tiny"), recipe.plan, recipe.adapters)
        assert a.to_dict() == b.to_dict()
