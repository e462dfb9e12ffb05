import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import pam.pruning as pruning
from pam.errors import ConfigurationError, InputError, StateError, StructuralError
from pam.model import AdaptationModule, instantiate_module
from pam.pruning import (
    PruningPlan,
    apply_plan,
    build_pruning_plan,
    channel_saliency,
    compact,
    kept_param_count,
    masked_parameters,
    num_to_drop,
    prunable_layers,
)
from pam.resnet import BasicBlock, get_variant, make_stage

from conftest import tiny_session

weights4d = arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 4), st.sampled_from([1, 3]),
                                         st.sampled_from([1, 3])),
                   elements=st.floats(-4, 4, width=32))
# scaling by 2**e is exact only while results stay normal float32 numbers
normal4d = arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 4), st.just(3), st.just(3)),
                  elements=st.floats(-4, 4, width=32).filter(lambda v: v == 0 or abs(v) >= 2.0 ** -100))


def fresh_module(variant="rn10-c8", seed=0):
    s = tiny_session(variant, seed=seed)
    return instantiate_module(s.template, "pretrained", task_id=0), s


def randomize_bn(module, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.copy_(torch.rand(m.weight.shape, generator=g) + 0.5)
                m.bias.copy_(torch.randn(m.bias.shape, generator=g) * 0.1)
                m.running_mean.copy_(torch.randn(m.running_mean.shape, generator=g) * 0.1)
                m.running_var.copy_(torch.rand(m.running_var.shape, generator=g) + 0.5)


# ---------------------------------------------------------------- saliency


@settings(max_examples=80, deadline=None)
@given(weights4d)
@example(np.array([1.0, 7.2302796e-16, 7.2302796e-16], dtype=np.float32).reshape(1, 3, 1, 1))
def test_saliency_equals_brute_force_abs_sum(w):
    scores = channel_saliency(torch.from_numpy(w)).scores
    for c in range(w.shape[0]):
        assert float(scores[c]) == math.fsum(abs(float(v)) for v in w[c].ravel())


def test_saliency_random_block_oracle():
    w = torch.randn(8, 4, 3, 3, generator=torch.Generator().manual_seed(1))
    s = channel_saliency(w).scores
    ref = [math.fsum(abs(float(v)) for v in w[c].flatten()) for c in range(8)]
    assert s.tolist() == ref and s.dtype == torch.float64


def test_saliency_zero_channel_and_errors():
    w = torch.randn(3, 2, 3, 3)
    w[1] = 0
    s = channel_saliency(w).scores
    assert s[1] == 0 and bool((s[[0, 2]] > 0).all())
    with pytest.raises(InputError):
        channel_saliency(torch.zeros(0, 2, 3, 3))
    with pytest.raises(InputError):
        channel_saliency(torch.zeros(4, 4))


@settings(max_examples=80, deadline=None)
@given(normal4d, st.integers(-6, 6))
def test_ranking_invariant_under_power_of_two_scaling(w, e):
    # powers of two scale floats exactly, so the comparison can be exact
    k = 2.0 ** e
    base = channel_saliency(torch.from_numpy(w))
    scaled = channel_saliency(torch.from_numpy(w) * k)
    assert base.ranking() == scaled.ranking()
    assert torch.equal(scaled.scores, base.scores * k)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=2, max_size=12, unique=True),
       st.floats(0.01, 100))
def test_ranking_invariant_under_positive_scaling(levels, k):
    # well separated scores so the positive factor cannot reorder them through rounding
    w = torch.tensor(levels, dtype=torch.float32).view(-1, 1, 1, 1) + 1.0
    base = channel_saliency(w)
    scaled = channel_saliency(w * k)
    assert base.ranking() == scaled.ranking()
    assert np.argsort(base.scores.numpy(), kind="stable").tolist() == \
        np.argsort(scaled.scores.numpy(), kind="stable").tolist()


def test_ranking_ties_drop_higher_index_first():
    s = pruning.SaliencyScores("x", torch.tensor([1.0, 1.0, 0.5, 1.0], dtype=torch.float64))
    assert s.ranking() == [2, 3, 1, 0]


# ---------------------------------------------------------------- plans


def test_num_to_drop_uses_exact_decimal():
    assert num_to_drop(0.29, 100) == 29
    assert num_to_drop(0.96, 512) == 491
    assert num_to_drop(0.0, 7) == 0
    assert num_to_drop(0.5, 4) == 2


def test_plan_hand_oracle_scores_4_1_3_2():
    var = get_variant("rn10-c8")
    module = AdaptationModule(make_stage(BasicBlock, 32, 64, 1, 2, [4]), var)
    with torch.no_grad():
        module.stage[0].conv1.weight.zero_()
        for c, v in enumerate([4.0, 1.0, 3.0, 2.0]):
            module.stage[0].conv1.weight[c, 0, 0, 0] = v
    plan = build_pruning_plan(module, 0.5)
    assert plan.dropped("layer4.0.conv1") == [1, 3]
    assert plan.kept("layer4.0.conv1") == [0, 2]


def test_plan_fraction_and_scope_basic():
    module, _ = fresh_module()
    plan = build_pruning_plan(module, 0.96, epoch=1)
    assert plan.scope == ["layer4.0.conv1"]
    mask = plan.per_layer_masks["layer4.0.conv1"]
    assert len(mask) - sum(mask) == math.floor(0.96 * 64)
    assert plan.created_at_epoch == 1


def test_plan_scope_bottleneck_two_layers_per_block():
    module, _ = fresh_module("bn-tiny")
    plan = build_pruning_plan(module, 0.5)
    assert plan.scope == ["layer4.0.conv1", "layer4.0.conv2", "layer4.1.conv1", "layer4.1.conv2"]
    for lid in plan.scope:
        m = plan.per_layer_masks[lid]
        assert len(m) - sum(m) == len(m) // 2


def test_plan_errors():
    module, _ = fresh_module()
    with pytest.raises(ConfigurationError):
        build_pruning_plan(module, 1.0)
    with pytest.raises(ConfigurationError):
        build_pruning_plan(module, -0.1)
    apply_plan(module, build_pruning_plan(module, 0.5))
    with pytest.raises(StateError):
        build_pruning_plan(module, 0.5)


def test_plan_clamp_keeps_one_channel(monkeypatch):
    # floor(m*C) < C for every m < 1, so the guard is reached only by forcing the count
    module, _ = fresh_module()
    monkeypatch.setattr(pruning, "num_to_drop", lambda m, c: c)
    with pytest.warns(UserWarning, match="keeping 1"):
        plan = build_pruning_plan(module, 0.9)
    assert sum(plan.per_layer_masks["layer4.0.conv1"]) == 1
    assert plan.warnings


def test_plan_deterministic_and_monotone():
    module, _ = fresh_module(seed=3)
    mags = [0.0, 0.25, 0.5, 0.75, 0.96]
    plans = [build_pruning_plan(copy.deepcopy(module), m) for m in mags]
    again = [build_pruning_plan(copy.deepcopy(module), m) for m in mags]
    assert [p.per_layer_masks for p in plans] == [p.per_layer_masks for p in again]
    for a, b in zip(plans, plans[1:]):
        for lid in a.scope:
            assert set(a.dropped(lid)) <= set(b.dropped(lid))


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.sampled_from([f"layer4.{i}.conv{j}" for i in range(3) for j in (1, 2)]),
                       st.lists(st.booleans(), min_size=1, max_size=40), min_size=1),
       st.floats(0, 0.999), st.integers(0, 50))
def test_plan_text_round_trip(masks, mag, epoch):
    plan = PruningPlan(masks, mag, sorted(masks), epoch, ["note a"])
    back = PruningPlan.from_text(plan.to_text())
    assert back == plan
    assert back.to_text() == plan.to_text()


def test_plan_text_rejects_garbage():
    with pytest.raises(InputError):
        PruningPlan.from_text("magnitude 0.5\nbogus line\n")
    with pytest.raises(InputError):
        PruningPlan.from_text("layer layer4.0.conv1 2 0\n")


# ---------------------------------------------------------------- masking


def test_apply_all_keep_is_identity():
    module, _ = fresh_module()
    randomize_bn(module)
    module.eval()
    x = torch.randn(4, 32, 4, 4)
    before = module(x)
    apply_plan(module, build_pruning_plan(module, 0.0))
    assert torch.equal(module(x), before)


def test_apply_scope_mismatch():
    module, _ = fresh_module()
    plan = PruningPlan({"layer4.0.conv2": [True] * 64}, 0.5, ["layer4.0.conv2"])
    with pytest.raises(StructuralError):
        apply_plan(module, plan)
    plan = PruningPlan({"layer4.0.conv1": [True] * 3}, 0.5, ["layer4.0.conv1"])
    with pytest.raises(StructuralError):
        apply_plan(module, plan)


@pytest.mark.parametrize("variant", ["rn10-c8", "bn-tiny"])
def test_masked_forward_invariant_to_values_in_dropped_channels(variant):
    module, _ = fresh_module(variant)
    randomize_bn(module)
    apply_plan(module, build_pruning_plan(module, 0.75))
    module.eval()
    x = torch.randn(6, module.in_channels, 4, 4)
    ref = module(x)
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p, keep in masked_parameters(module):
            p[~keep] = torch.randn(int((~keep).sum()), generator=g) * 100
    assert torch.equal(module(x), ref)


@pytest.mark.parametrize("variant", ["rn10-c8", "bn-tiny"])
def test_masked_weights_get_zero_gradient_and_stay_zero(variant):
    module, _ = fresh_module(variant)
    apply_plan(module, build_pruning_plan(module, 0.75))
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=1e-2)
    for _ in range(3):
        out = module(torch.randn(4, module.in_channels, 4, 4))
        opt.zero_grad()
        out.pow(2).sum().backward()
        for p, keep in masked_parameters(module):
            assert torch.count_nonzero(p.grad[~keep]) == 0
        opt.step()
    for p, keep in masked_parameters(module):
        assert torch.count_nonzero(p[~keep]) == 0


def sliced_reference(module, x):
    """Forward with dropped channels removed by slicing, built independently of compact()."""
    out = x
    for block in module.stage:
        identity = out
        keep = {conv: getattr(block, mask).bool() for conv, _, mask in block.prunable}
        h = out
        names = ["conv1", "conv2"] + (["conv3"] if hasattr(block, "conv3") else [])
        prev_keep = None
        for name in names:
            conv = getattr(block, name)
            bn = getattr(block, "bn" + name[-1])
            w = conv.weight
            if prev_keep is not None:
                w = w[:, prev_keep]
            k = keep.get(name)
            if k is not None:
                w = w[k]
            h = torch.nn.functional.conv2d(h, w, stride=conv.stride, padding=conv.padding)
            sel = k if k is not None else slice(None)
            h = torch.nn.functional.batch_norm(h, bn.running_mean[sel], bn.running_var[sel],
                                               bn.weight[sel], bn.bias[sel], False, 0.0, bn.eps)
            if name != names[-1]:
                h = torch.relu(h)
            prev_keep = k
        if block.downsample is not None:
            identity = block.downsample(out)
        out = torch.relu(h + identity)
    return torch.flatten(module.pool(out), 1)


@pytest.mark.parametrize("variant", ["rn10-c8", "bn-tiny"])
def test_masked_equals_slice_oracle_and_compacted(variant):
    module, _ = fresh_module(variant, seed=4)
    randomize_bn(module, seed=4)
    apply_plan(module, build_pruning_plan(module, 0.6))
    module.eval()
    small = compact(module)
    x = torch.randn(100, module.in_channels, 4, 4, generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        a, b, c = module(x), small(x), sliced_reference(module, x)
    scale = a.abs().max()
    assert float((a - b).abs().max() / scale) < 1e-5
    assert float((a - c).abs().max() / scale) < 1e-5


@pytest.mark.parametrize("variant,mag", [("rn10-c8", 0.96), ("bn-tiny", 0.5), ("rn10-c8", 0.0)])
def test_compacted_count_equals_mask_cardinality(variant, mag):
    module, _ = fresh_module(variant)
    apply_plan(module, build_pruning_plan(module, mag))
    small = compact(module)
    assert sum(p.numel() for p in small.parameters()) == kept_param_count(module)
    assert small.dense_param_count == sum(p.numel() for p in module.parameters())
    for lid, block, conv, _, _ in prunable_layers(small):
        assert getattr(block, conv).out_channels == sum(module.plan.per_layer_masks[lid])


def test_compact_all_keep_structurally_identical():
    module, _ = fresh_module()
    apply_plan(module, build_pruning_plan(module, 0.0))
    small = compact(module)
    assert {k: v.shape for k, v in small.state_dict().items() if not k.endswith("mask1")} == \
        {k: v.shape for k, v in module.state_dict().items() if not k.endswith("mask1")}


def test_compact_needs_plan():
    module, _ = fresh_module()
    with pytest.raises(StateError):
        compact(module)


def test_rn18_stage4_96_percent_prunes_to_600k_order():
    s = tiny_session("rn18", size=32)
    module = instantiate_module(s.template, "pretrained")
    apply_plan(module, build_pruning_plan(module, 0.96))
    n = kept_param_count(module)
    assert n == 472_916
    assert 300_000 <= n <= 1_200_000


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.99), st.integers(0, 1000))
def test_kept_count_monotone_in_magnitude(mag, seed):
    module, _ = fresh_module(seed=seed % 7)
    lo = copy.deepcopy(module)
    apply_plan(lo, build_pruning_plan(lo, mag / 2))
    apply_plan(module, build_pruning_plan(module, mag))
    assert kept_param_count(module) <= kept_param_count(lo)
