import numpy as np
import pytest

from mcdit import tensor as T
from mcdit.attention import (
    FULL_SCALE_2COND,
    FULL_SCALE_NUM_BLOCKS,
    MODE_CMMDIT,
    MODE_MMDIT,
    AttentionInputs,
    AttentionRecorder,
    BranchLayout,
    assemble_sequence,
    count_attn_ops,
    masked_attention,
    scope_mask,
    scoped_attention,
)
from mcdit.errors import ContractError, DimensionError


def random_inputs(rng, layout, head_dim=8, heads=2):
    n = layout.total
    q = T.Tensor(rng.standard_normal((heads, n, head_dim)))
    k = T.Tensor(rng.standard_normal((heads, n, head_dim)))
    v = T.Tensor(rng.standard_normal((heads, n, head_dim)))
    return AttentionInputs(q, k, v, head_dim)


# -- sequence assembly ------------------------------------------------------------


def test_assemble_no_conditions():
    t = T.Tensor(np.ones((2, 4)))
    x = T.Tensor(np.ones((3, 4)))
    seq, layout = assemble_sequence(t, x, [])
    assert seq.tokens.shape == (5, 4)
    assert (layout.len_t, layout.len_x, layout.len_c) == (2, 3, ())


def test_assemble_offsets():
    d = 4
    blocks = [np.full((n, d), i) for i, n in enumerate([2, 3, 4, 5])]
    seq, layout = assemble_sequence(
        T.Tensor(blocks[0]), T.Tensor(blocks[1]),
        [T.Tensor(blocks[2]), T.Tensor(blocks[3])],
    )
    assert layout.total == 14
    assert layout.offsets() == [0, 2, 5, 9]
    assert np.array_equal(seq.cond(1).data, blocks[3].astype(np.float32))


def test_assemble_rejects_mixed_widths():
    with pytest.raises(DimensionError):
        assemble_sequence(T.Tensor(np.ones((2, 4))), T.Tensor(np.ones((3, 5))), [])


def test_layout_rejects_empty_branch():
    with pytest.raises(DimensionError):
        BranchLayout(0, 3, ())
    with pytest.raises(DimensionError):
        BranchLayout(1, 1, (0,))


# -- scope mask --------------------------------------------------------------------


def test_scope_mask_unit_example():
    mask = scope_mask(BranchLayout(1, 1, (1, 1)))
    expected = np.array(
        [
            [1, 1, 1, 1],
            [1, 1, 1, 1],
            [1, 1, 1, 0],
            [1, 1, 0, 1],
        ],
        dtype=bool,
    )
    assert np.array_equal(mask, expected)


def test_scope_mask_no_conditions_all_ones():
    mask = scope_mask(BranchLayout(3, 4, ()))
    assert mask.all()


def test_scope_mask_row_semantics_with_two_conditions():
    # condition rows exclude each other while T/X rows keep a global view;
    # note the resulting boolean matrix is nevertheless symmetric, since
    # both the C1<->C2 exclusion and the TX<->C visibility are mutual
    layout = BranchLayout(2, 2, (2, 2))
    mask = scope_mask(layout)
    c1 = slice(*layout.cond_span(0))
    c2 = slice(*layout.cond_span(1))
    assert mask[: layout.tx_end, :].all()
    assert not mask[c1, c2].any()
    assert not mask[c2, c1].any()
    assert mask[c1, : layout.tx_end].all() and mask[c1, c1].all()
    assert np.array_equal(mask, mask.T)


# -- masked oracle ------------------------------------------------------------------


def manual_full_attention(q, k, v, head_dim):
    s = (q @ k.swapaxes(-1, -2)) / np.sqrt(head_dim)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return p @ v


def test_masked_all_ones_is_plain_attention():
    rng = np.random.default_rng(0)
    layout = BranchLayout(2, 3, (2,))
    inputs = random_inputs(rng, layout)
    out = masked_attention(inputs, np.ones((7, 7), dtype=bool)).data
    ref = manual_full_attention(
        inputs.q.data.astype(np.float64), inputs.k.data.astype(np.float64),
        inputs.v.data.astype(np.float64), inputs.head_dim)
    assert np.max(np.abs(out - ref)) < 1e-5


def test_masked_identity_diagonal_returns_values():
    rng = np.random.default_rng(1)
    layout = BranchLayout(2, 2, ())
    inputs = random_inputs(rng, layout)
    out = masked_attention(inputs, np.eye(4, dtype=bool)).data
    assert np.max(np.abs(out - inputs.v.data)) < 1e-6


def test_masked_rejects_empty_row():
    rng = np.random.default_rng(2)
    inputs = random_inputs(rng, BranchLayout(1, 2, ()))
    mask = np.ones((3, 3), dtype=bool)
    mask[1, :] = False
    with pytest.raises(ContractError):
        masked_attention(inputs, mask)


# -- scoped vs oracle ---------------------------------------------------------------


def random_layout(rng, n_conditions):
    return BranchLayout(
        int(rng.integers(1, 5)),
        int(rng.integers(1, 9)),
        tuple(int(rng.integers(1, 7)) for _ in range(n_conditions)),
    )


def test_scoped_matches_oracle_reference_layout():
    rng = np.random.default_rng(5)
    layout = BranchLayout(4, 8, (6, 6))
    inputs = random_inputs(rng, layout, head_dim=8, heads=2)
    got = scoped_attention(inputs, layout).data
    ref = masked_attention(inputs, scope_mask(layout)).data
    assert np.max(np.abs(got - ref)) < 1e-5


@pytest.mark.parametrize("n_conditions", [0, 1, 2, 3])
def test_scoped_matches_masked_oracle_float32(n_conditions):
    rng = np.random.default_rng(10 + n_conditions)
    for _ in range(6):
        layout = random_layout(rng, n_conditions)
        inputs = random_inputs(rng, layout)
        got = scoped_attention(inputs, layout).data
        ref = masked_attention(inputs, scope_mask(layout)).data
        assert np.max(np.abs(got - ref)) < 1e-5


def test_scoped_matches_masked_oracle_float64():
    with T.use_dtype(np.float64):
        rng = np.random.default_rng(20)
        for n_conditions in (1, 2, 3):
            layout = random_layout(rng, n_conditions)
            inputs = random_inputs(rng, layout)
            got = scoped_attention(inputs, layout).data
            ref = masked_attention(inputs, scope_mask(layout)).data
            assert np.max(np.abs(got - ref)) < 1e-10


def test_scoped_no_conditions_equals_plain_attention():
    rng = np.random.default_rng(30)
    layout = BranchLayout(3, 5, ())
    inputs = random_inputs(rng, layout)
    got = scoped_attention(inputs, layout).data
    ref = manual_full_attention(
        inputs.q.data.astype(np.float64), inputs.k.data.astype(np.float64),
        inputs.v.data.astype(np.float64), inputs.head_dim)
    assert np.max(np.abs(got - ref)) < 1e-5


def test_condition_rows_isolated_exactly():
    """Changing C2's q/k/v leaves C1's output rows bit-identical."""
    rng = np.random.default_rng(40)
    layout = BranchLayout(2, 4, (3, 3))
    inputs = random_inputs(rng, layout)
    base = scoped_attention(inputs, layout).data

    lo, hi = layout.cond_span(1)
    q2, k2, v2 = (arr.data.copy() for arr in (inputs.q, inputs.k, inputs.v))
    for arr in (q2, k2, v2):
        arr[:, lo:hi, :] += rng.standard_normal((arr.shape[0], hi - lo, arr.shape[2]))
    perturbed = scoped_attention(
        AttentionInputs(T.Tensor(q2), T.Tensor(k2), T.Tensor(v2), inputs.head_dim), layout
    ).data

    c1_lo, c1_hi = layout.cond_span(0)
    assert np.array_equal(base[:, c1_lo:c1_hi, :], perturbed[:, c1_lo:c1_hi, :])
    # T and X rows do change: they see C2
    assert not np.array_equal(base[:, : layout.tx_end, :], perturbed[:, : layout.tx_end, :])


def test_condition_query_equals_single_conditional_bitwise():
    """C_i rows under extra conditions == the single-conditional run."""
    rng = np.random.default_rng(50)
    layout = BranchLayout(2, 4, (3, 5))
    inputs = random_inputs(rng, layout)
    multi = scoped_attention(inputs, layout).data
    lo, hi = layout.cond_span(0)
    keep = np.r_[0:layout.tx_end, lo:hi]
    single_layout = BranchLayout(2, 4, (3,))
    single_inputs = AttentionInputs(
        T.Tensor(inputs.q.data[:, keep, :]),
        T.Tensor(inputs.k.data[:, keep, :]),
        T.Tensor(inputs.v.data[:, keep, :]),
        inputs.head_dim,
    )
    single = scoped_attention(single_inputs, single_layout).data
    assert np.array_equal(multi[:, lo:hi, :], single[:, layout.tx_end:, :])


def test_condition_order_invariance():
    rng = np.random.default_rng(60)
    layout = BranchLayout(2, 4, (3, 5))
    inputs = random_inputs(rng, layout)
    out = scoped_attention(inputs, layout).data

    # swap the two condition blocks (keys/values/queries move together)
    l0, h0 = layout.cond_span(0)
    l1, h1 = layout.cond_span(1)
    perm = np.r_[0:layout.tx_end, l1:h1, l0:h0]
    swapped_layout = BranchLayout(2, 4, (5, 3))
    swapped = scoped_attention(
        AttentionInputs(
            T.Tensor(inputs.q.data[:, perm, :]),
            T.Tensor(inputs.k.data[:, perm, :]),
            T.Tensor(inputs.v.data[:, perm, :]),
            inputs.head_dim,
        ),
        swapped_layout,
    ).data
    assert np.max(np.abs(out[:, : layout.tx_end, :] - swapped[:, : layout.tx_end, :])) < 1e-6
    assert np.max(np.abs(out[:, perm, :] - swapped)) < 1e-6


def test_scoped_never_materializes_full_score_matrix():
    rng = np.random.default_rng(70)
    layout = BranchLayout(2, 3, (4, 5))
    inputs = random_inputs(rng, layout)
    rec = AttentionRecorder()
    scoped_attention(inputs, layout, recorder=rec)
    total = layout.total
    assert rec.score_shapes, "recorder captured nothing"
    for shape in rec.score_shapes:
        assert shape[-2:] != (total, total)


def test_scoped_attention_is_differentiable():
    layout = BranchLayout(1, 2, (2,))

    def f(x):
        q = x[0:1].reshape(1, layout.total, 3)
        k = x[1:2].reshape(1, layout.total, 3)
        v = x[2:3].reshape(1, layout.total, 3)
        out = scoped_attention(AttentionInputs(q, k, v, 3), layout)
        return (out * out).sum()

    x = T.Tensor(np.random.default_rng(80).standard_normal((3, layout.total, 3)))
    assert T.grad_check(f, x, 1e-5) < 1e-4


# -- op counting --------------------------------------------------------------------


def test_count_attn_ops_reference_layout():
    assert count_attn_ops(FULL_SCALE_2COND, FULL_SCALE_NUM_BLOCKS, MODE_MMDIT) == 732_168_192
    assert count_attn_ops(FULL_SCALE_2COND, FULL_SCALE_NUM_BLOCKS, MODE_CMMDIT) == 612_630_528


def test_count_attn_ops_no_conditions_equal():
    layout = BranchLayout(7, 11, ())
    full = count_attn_ops(layout, 3, MODE_MMDIT)
    scoped = count_attn_ops(layout, 3, MODE_CMMDIT)
    assert full == scoped == (7 + 11) ** 2 * 3


def test_count_scaling_scoped_affine_full_quadratic():
    t, x, c, blocks = 4, 16, 8, 5
    scoped = [count_attn_ops(BranchLayout(t, x, (c,) * n), blocks, MODE_CMMDIT)
              for n in range(9)]
    full = [count_attn_ops(BranchLayout(t, x, (c,) * n), blocks, MODE_MMDIT)
            for n in range(9)]
    d1_scoped = np.diff(scoped)
    assert len(set(d1_scoped.tolist())) == 1  # exactly affine in N
    d2_full = np.diff(full, n=2)
    assert len(set(d2_full.tolist())) == 1 and d2_full[0] != 0  # exactly quadratic
    assert np.diff(full, n=3).tolist() == [0] * 6


def test_count_scoped_never_exceeds_full():
    rng = np.random.default_rng(90)
    for _ in range(50):
        layout = random_layout(rng, int(rng.integers(0, 5)))
        full = count_attn_ops(layout, 2, MODE_MMDIT)
        scoped = count_attn_ops(layout, 2, MODE_CMMDIT)
        assert scoped <= full
        # equality exactly when at most one condition block exists
        assert (scoped == full) == (layout.num_conditions <= 1)


def test_count_rejects_bad_args():
    with pytest.raises(ContractError):
        count_attn_ops(BranchLayout(1, 1, ()), 0, MODE_MMDIT)
    with pytest.raises(ContractError):
        count_attn_ops(BranchLayout(1, 1, ()), 1, "dense")
