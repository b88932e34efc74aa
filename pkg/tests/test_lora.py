import numpy as np
import pytest

from mcdit import tensor as T
from mcdit.errors import ConfigurationError, DimensionError
from mcdit.lora import (
    ConditionType,
    LoraAdapter,
    LoraRegistry,
    linear_with_lora,
    merge_weights,
    switch_select,
)


def make_registry(types, rank=4, seed=0):
    registry = LoraRegistry()
    for i, ct in enumerate(types):
        registry.register(ct, LoraAdapter([("blk/q", 8, 8)], rank=rank,
                                          rng=np.random.default_rng(seed + i)))
    return registry


def test_switch_select_returns_registered_adapter():
    registry = make_registry([ConditionType.CANNY, ConditionType.DEPTH])
    adapter = switch_select(ConditionType.DEPTH, registry)
    assert adapter is registry.condition_adapters[ConditionType.DEPTH]
    assert registry.selection_gate(ConditionType.DEPTH) == [0, 1]


def test_switch_select_missing_type_errors():
    registry = make_registry([ConditionType.CANNY, ConditionType.DEPTH])
    with pytest.raises(ConfigurationError, match="SUBJECT"):
        switch_select(ConditionType.SUBJECT, registry)


def test_same_type_branches_share_one_adapter():
    registry = make_registry([ConditionType.CANNY])
    a1 = switch_select(ConditionType.CANNY, registry)
    a2 = switch_select(ConditionType.CANNY, registry)
    assert a1 is a2


def test_condition_type_parse():
    assert ConditionType.parse("mask-fill") is ConditionType.MASK_FILL
    assert ConditionType.parse("CANNY") is ConditionType.CANNY
    with pytest.raises(ConfigurationError):
        ConditionType.parse("sketch")


def test_zero_init_adapter_is_exact_identity():
    rng = np.random.default_rng(1)
    adapter = LoraAdapter([("blk/q", 6, 6)], rank=4, rng=rng)
    x = T.Tensor(rng.standard_normal((5, 6)))
    w = T.Tensor(rng.standard_normal((6, 6)))
    b = T.Tensor(rng.standard_normal(6))
    base = linear_with_lora(x, w, b).data
    adapted = linear_with_lora(x, w, b, adapter.delta("blk/q")).data
    assert np.array_equal(base, adapted)


def test_linear_without_adapter_is_base():
    rng = np.random.default_rng(2)
    x = T.Tensor(rng.standard_normal((3, 4)))
    w = T.Tensor(rng.standard_normal((5, 4)))
    out = linear_with_lora(x, w).data
    assert np.max(np.abs(out - x.data @ w.data.T)) < 1e-6


def test_adapted_linear_matches_merged_weights():
    rng = np.random.default_rng(3)
    adapter = LoraAdapter([("blk/q", 7, 9)], rank=4, rng=rng)
    a, b = adapter.weights["blk/q"]
    b.data = rng.standard_normal(b.shape).astype(b.data.dtype) * 0.3
    x = T.Tensor(rng.standard_normal((5, 7)))
    w = T.Tensor(rng.standard_normal((9, 7)))
    via_adapter = linear_with_lora(x, w, None, adapter.delta("blk/q")).data
    merged = merge_weights(w, adapter.delta("blk/q"))
    via_merged = linear_with_lora(x, merged).data
    assert np.max(np.abs(via_adapter - via_merged)) < 1e-5


def test_merge_zero_adapter_keeps_weights():
    rng = np.random.default_rng(4)
    adapter = LoraAdapter([("blk/q", 5, 5)], rank=2, rng=rng)
    w = T.Tensor(rng.standard_normal((5, 5)))
    assert np.array_equal(merge_weights(w, adapter.delta("blk/q")).data, w.data)


def test_merge_then_subtract_restores_weights():
    rng = np.random.default_rng(5)
    adapter = LoraAdapter([("blk/q", 6, 6)], rank=3, rng=rng)
    a, b = adapter.weights["blk/q"]
    b.data = rng.standard_normal(b.shape).astype(b.data.dtype)
    w = T.Tensor(rng.standard_normal((6, 6)))
    merged = merge_weights(w, adapter.delta("blk/q"))
    delta = adapter.scale * (b.data @ a.data)
    restored = merged.data - delta
    assert np.max(np.abs(restored - w.data)) < 1e-6


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(6)
    adapter = LoraAdapter([("blk/q", 4, 4)], rank=2, rng=rng)
    x = T.Tensor(rng.standard_normal((3, 5)))
    w = T.Tensor(rng.standard_normal((5, 5)))
    with pytest.raises(DimensionError):
        linear_with_lora(x, w, None, adapter.delta("blk/q"))
    with pytest.raises(DimensionError):
        merge_weights(w, adapter.delta("blk/q"))


def test_alpha_over_rank_scaling():
    rng = np.random.default_rng(7)
    adapter = LoraAdapter([("blk/q", 4, 4)], rank=2, alpha=8.0, rng=rng)
    assert adapter.scale == 4.0
    default = LoraAdapter([("blk/q", 4, 4)], rank=4, rng=rng)
    assert default.scale == 1.0  # alpha defaults to rank


def test_param_count_bound():
    # <= 2 * rank * (in + out) per target
    targets = [(f"b{i}/q", 16, 16) for i in range(6)]
    adapter = LoraAdapter(targets, rank=4)
    assert adapter.num_params() == sum(4 * 16 + 16 * 4 for _ in targets)
    assert adapter.num_params() <= 2 * 4 * (16 + 16) * len(targets)


def test_freeze_marks_params_untrainable():
    adapter = LoraAdapter([("blk/q", 4, 4)], rank=2)
    before = adapter.state_bytes()
    adapter.set_frozen(True)
    assert all(not p.requires_grad for p in adapter.parameters().values())
    assert adapter.state_bytes() == before
    adapter.set_frozen(False)
    assert all(p.requires_grad for p in adapter.parameters().values())
