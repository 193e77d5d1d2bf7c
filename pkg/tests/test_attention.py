import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dynedit.attention import (
    CrossAttentionMap,
    SelfAttentionMap,
    TokenAttention,
    aggregate,
    compute_attention,
    token_map,
)
from dynedit.backends.base import AttentionRecord
from dynedit.errors import NotFoundError


def make_record(probs, kind="cross", resolution=None, layer="L0", t=1):
    probs = torch.as_tensor(probs, dtype=torch.float64)
    res = resolution or int(np.sqrt(probs.shape[-2]))
    return AttentionRecord(layer_id=layer, kind=kind, resolution=res,
                           num_heads=probs.shape[0] if probs.dim() == 3 else 1,
                           timestep=t, probs=probs)


class TestComputeAttention:
    def test_zero_logits_give_uniform_rows(self):
        q = torch.zeros(5, 3, dtype=torch.float64)
        k = torch.zeros(4, 3, dtype=torch.float64)
        out = compute_attention(q, k, dim=3)
        assert torch.allclose(out.values, torch.full((5, 4), 0.25, dtype=torch.float64))

    def test_single_token_rows_are_one(self):
        q = torch.randn(4, 2, dtype=torch.float64)
        k = torch.randn(1, 2, dtype=torch.float64)
        out = compute_attention(q, k, dim=2)
        assert torch.allclose(out.values, torch.ones(4, 1, dtype=torch.float64))

    def test_matches_brute_force_softmax(self):
        gen = torch.Generator().manual_seed(4)
        q = torch.randn(9, 2, generator=gen, dtype=torch.float64)
        k = torch.randn(3, 2, generator=gen, dtype=torch.float64)
        out = compute_attention(q, k, dim=2)
        logits = (q @ k.T / np.sqrt(2)).numpy()
        expected = oracles.softmax_rows(logits)
        np.testing.assert_allclose(out.values.numpy(), expected, atol=1e-6)

    def test_monotone_in_logits(self):
        q = torch.eye(4, dtype=torch.float64)[:1]
        k = torch.eye(4, dtype=torch.float64)[:3]
        base = compute_attention(q, k, dim=4).values[0]
        k2 = k.clone()
        k2[1] = k2[1] + q[0]  # raise token 1's logit for this query
        bumped = compute_attention(q, k2, dim=4).values[0]
        assert bumped[1] > base[1]

    def test_dimension_validation(self):
        q = torch.zeros(2, 3, dtype=torch.float64)
        k = torch.zeros(2, 4, dtype=torch.float64)
        with pytest.raises(ValueError, match="inner dimensions"):
            compute_attention(q, k, dim=3)
        with pytest.raises(ValueError, match="dim"):
            compute_attention(q, q, dim=0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_sum_to_one(self, seed):
        gen = torch.Generator().manual_seed(seed)
        q = torch.randn(6, 3, generator=gen, dtype=torch.float64)
        k = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        out = compute_attention(q, k, dim=3)
        assert torch.allclose(out.values.sum(dim=-1),
                              torch.ones(6, dtype=torch.float64), atol=1e-6)
        assert (out.values >= 0).all()


class TestAggregate:
    def test_single_record_identity(self):
        probs = torch.softmax(torch.randn(2, 4, 3, dtype=torch.float64), dim=-1)
        record = make_record(probs, resolution=2)
        out = aggregate([record], 2, "cross")
        assert torch.allclose(out.values, probs.mean(dim=0))

    def test_two_identical_records_equal_either(self):
        probs = torch.softmax(torch.randn(1, 4, 3, dtype=torch.float64), dim=-1)
        r1 = make_record(probs, resolution=2, layer="a")
        r2 = make_record(probs, resolution=2, layer="b")
        out = aggregate([r1, r2], 2, "cross")
        assert torch.allclose(out.values, probs[0])

    def test_entrywise_mean(self):
        a = torch.full((1, 4, 2), 0.5, dtype=torch.float64)
        b = torch.zeros(1, 4, 2, dtype=torch.float64)
        b[..., 0] = 1.0
        out = aggregate([make_record(a, resolution=2), make_record(b, resolution=2)],
                        2, "cross")
        expected = torch.tensor([0.75, 0.25], dtype=torch.float64).expand(4, 2)
        assert torch.allclose(out.values, expected)

    def test_permutation_invariant(self):
        gen = torch.Generator().manual_seed(0)
        records = [
            make_record(torch.softmax(torch.randn(2, 4, 3, generator=gen,
                                                  dtype=torch.float64), dim=-1),
                        resolution=2, layer=f"l{i}")
            for i in range(4)
        ]
        forward = aggregate(records, 2, "cross")
        backward = aggregate(list(reversed(records)), 2, "cross")
        assert torch.allclose(forward.values, backward.values)

    def test_mean_preserves_row_stochasticity(self):
        gen = torch.Generator().manual_seed(2)
        records = [
            make_record(torch.softmax(torch.randn(3, 9, 5, generator=gen,
                                                  dtype=torch.float64), dim=-1),
                        resolution=3, layer=f"l{i}")
            for i in range(3)
        ]
        out = aggregate(records, 3, "cross")
        sums = out.values.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_missing_resolution_raises_not_found(self):
        record = make_record(torch.full((1, 4, 2), 0.5, dtype=torch.float64), resolution=2)
        with pytest.raises(NotFoundError):
            aggregate([record], 16, "cross")
        with pytest.raises(NotFoundError):
            aggregate([record], 2, "self")


class TestTokenMap:
    def test_constant_column(self):
        values = torch.full((256, 4), 0.5, dtype=torch.float64)
        cam = CrossAttentionMap(values=values, timestep=1)
        tm = token_map(cam, 2)
        assert tm.map.shape == (16, 16)
        assert torch.all(tm.map == 0.5)

    def test_flatten_is_inverse_of_reshape(self):
        gen = torch.Generator().manual_seed(9)
        values = torch.softmax(torch.randn(64, 5, generator=gen, dtype=torch.float64), dim=-1)
        cam = CrossAttentionMap(values=values, timestep=0)
        tm = token_map(cam, 3)
        assert torch.equal(tm.flatten(), values[:, 3])

    def test_index_arithmetic(self):
        values = torch.zeros(16, 2, dtype=torch.float64)
        values[:, 0] = torch.arange(16, dtype=torch.float64)
        tm = token_map(CrossAttentionMap(values=values, timestep=0), 0)
        # row-major reshape: pixel (i, j) = column entry i*res + j
        assert tm.map[1, 2] == 6.0
        assert tm.map[3, 0] == 12.0

    def test_out_of_range_position(self):
        cam = CrossAttentionMap(values=torch.full((4, 2), 0.5, dtype=torch.float64),
                                timestep=0)
        with pytest.raises(ValueError, match="position"):
            token_map(cam, 2)


def test_map_shape_validation():
    ragged = CrossAttentionMap(values=torch.zeros(3, 2, dtype=torch.float64), timestep=0)
    with pytest.raises(ValueError, match="perfect square"):
        ragged.resolution
    with pytest.raises(ValueError, match="square"):
        SelfAttentionMap(values=torch.zeros(4, 5, dtype=torch.float64), timestep=0)
    with pytest.raises(ValueError, match="square"):
        TokenAttention(map=torch.zeros(4, 5, dtype=torch.float64), token_position=0)
