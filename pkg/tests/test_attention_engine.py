import math
import time

import pytest
import torch

from source.attention_engine import (
    STREAM_FULL,
    STREAM_INTRANS,
    AttentionMapSet,
    QKInputs,
    aggregate_token_map,
    apply_inverse_mask,
    compute_attention,
    eliminate_overlap,
    inverse_mask,
    merge_cross_attention,
    merge_self_attention,
    normalize_map,
)
from source.errors import ResolutionMismatch, ShapeMismatch, ValueOutOfRange


def _random_set(g, positions=16, tokens=6, step=3, stream=STREAM_FULL, layers=("cross_4",)):
    cross = {layer: torch.softmax(torch.randn(positions, tokens, generator=g, dtype=torch.float64), dim=-1)
             for layer in layers}
    return AttentionMapSet.captured(cross, {}, step, stream)


def test_softmax_symmetry():
    a = compute_attention(QKInputs(Q=torch.tensor([[0.0]]), K=torch.tensor([[0.0], [0.0]]), d=1))
    assert a.tolist() == [[0.5, 0.5]]


def test_softmax_hand_value():
    a = compute_attention(QKInputs(Q=torch.tensor([[1.0]], dtype=torch.float64),
                                   K=torch.tensor([[1.0], [0.0]], dtype=torch.float64), d=1))
    e = math.e
    assert a[0, 0].item() == pytest.approx(e / (e + 1), rel=1e-12)
    assert a[0, 1].item() == pytest.approx(1 / (e + 1), rel=1e-12)


def test_softmax_oracle_on_random_inputs():
    g = torch.Generator().manual_seed(0)
    start = time.perf_counter()
    for _ in range(1000):
        p = int(torch.randint(1, 17, (1,), generator=g))
        n = int(torch.randint(1, 9, (1,), generator=g))
        d = int(torch.randint(1, 9, (1,), generator=g))
        q = torch.randn(p, d, generator=g, dtype=torch.float64)
        k = torch.randn(n, d, generator=g, dtype=torch.float64)
        a = compute_attention(QKInputs(Q=q, K=k, d=d))

        assert torch.allclose(a.sum(dim=-1), torch.ones(p, dtype=torch.float64), atol=1e-6)
        scores = (q @ k.T) / math.sqrt(d)
        naive = torch.exp(scores) / torch.exp(scores).sum(dim=-1, keepdim=True)
        assert torch.allclose(a, naive, rtol=1e-9, atol=0.0)
    assert time.perf_counter() - start < 5.0


def test_qk_inputs_validate_width():
    with pytest.raises(ShapeMismatch):
        QKInputs(Q=torch.zeros(2, 3), K=torch.zeros(2, 4), d=3)
    with pytest.raises(ValueOutOfRange):
        QKInputs(Q=torch.tensor([[float("nan")]]), K=torch.zeros(1, 1), d=1)


def test_merge_takes_aligned_columns_from_intransitive_stream():
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        full = _random_set(g, tokens=6)
        intrans = _random_set(g, tokens=4, stream=STREAM_INTRANS)
        alignment = {0: 0, 1: 1, 2: 2, 3: 3}
        merged = merge_cross_attention(full, intrans, alignment)
        a, b, m = full.cross["cross_4"], intrans.cross["cross_4"], merged.cross["cross_4"]
        for i, j in alignment.items():
            assert torch.equal(m[:, i], b[:, j])
        for i in (4, 5):
            assert torch.equal(m[:, i], a[:, i])
        assert merged.provenance["cross_4"] == (STREAM_INTRANS,) * 4 + (STREAM_FULL,) * 2
        again = merge_cross_attention(merged, intrans, alignment)
        assert torch.equal(again.cross["cross_4"], m)


def test_merge_with_random_monotone_alignments():
    g = torch.Generator().manual_seed(2)
    for _ in range(100):
        full = _random_set(g, tokens=7)
        intrans = _random_set(g, tokens=4, stream=STREAM_INTRANS)
        keep = sorted(torch.randperm(7, generator=g)[:4].tolist())
        alignment = {i: j for j, i in enumerate(keep)}
        m = merge_cross_attention(full, intrans, alignment).cross["cross_4"]
        for i in range(7):
            src = intrans.cross["cross_4"][:, alignment[i]] if i in alignment else full.cross["cross_4"][:, i]
            assert torch.equal(m[:, i], src)


def test_empty_alignment_is_identity():
    g = torch.Generator().manual_seed(3)
    full, intrans = _random_set(g), _random_set(g, stream=STREAM_INTRANS)
    assert merge_cross_attention(full, intrans, {}) is full


def test_merge_rejects_layer_and_shape_mismatches():
    g = torch.Generator().manual_seed(4)
    full = _random_set(g)
    with pytest.raises(ResolutionMismatch):
        merge_cross_attention(full, _random_set(g, layers=("other",)), {0: 0})
    with pytest.raises(ResolutionMismatch):
        merge_cross_attention(full, _random_set(g, positions=64), {0: 0})


def test_self_attention_gate_sweep():
    full = torch.zeros(4, 4, dtype=torch.float64)
    intrans = torch.ones(4, 4, dtype=torch.float64)
    active = [t for t in range(0, 21) if merge_self_attention(full, intrans, t, gamma=5) is intrans]
    assert active == list(range(6, 21))
    assert merge_self_attention(full, intrans, 5, gamma=5) is full


def test_inverse_mask_values():
    assert torch.equal(inverse_mask(torch.zeros(2, 2)), torch.ones(2, 2))
    assert torch.equal(inverse_mask(torch.ones(2, 2)), torch.zeros(2, 2))
    assert inverse_mask(torch.tensor([[0.3]], dtype=torch.float64)).item() == pytest.approx(0.7)
    with pytest.raises(ValueOutOfRange):
        inverse_mask(torch.tensor([[1.5]]))


def test_normalize_map():
    v = torch.tensor([[0.0, 2.0], [1.0, 4.0]], dtype=torch.float64)
    assert normalize_map(v).max().item() == 1.0
    assert torch.equal(normalize_map(torch.zeros(2, 2)), torch.zeros(2, 2))


def test_inverse_mask_properties_on_random_sets():
    g = torch.Generator().manual_seed(5)
    for _ in range(500):
        maps = _random_set(g, positions=16, tokens=5)
        m = int(torch.randint(0, 5, (1,), generator=g))
        mask = torch.rand(4, 4, generator=g, dtype=torch.float64)
        out = apply_inverse_mask(mask, maps, m).cross["cross_4"]
        a = maps.cross["cross_4"]
        for n in range(5):
            if n == m:
                assert torch.equal(out[:, n], a[:, n])
            else:
                assert bool((out[:, n] <= a[:, n]).all())
        ones = apply_inverse_mask(torch.ones(4, 4, dtype=torch.float64), maps, m).cross["cross_4"]
        assert torch.equal(ones, a)


def test_zero_mask_cell_annihilates_other_tokens():
    g = torch.Generator().manual_seed(6)
    maps = _random_set(g)
    mask = torch.ones(4, 4, dtype=torch.float64)
    mask[1, 2] = 0.0
    out = apply_inverse_mask(mask, maps, object_index=5).cross["cross_4"]
    cell = 1 * 4 + 2
    assert all(out[cell, n].item() == 0.0 for n in range(5))
    assert out[cell, 5].item() == maps.cross["cross_4"][cell, 5].item()


def test_mask_shape_must_match_positions():
    g = torch.Generator().manual_seed(7)
    with pytest.raises(ShapeMismatch):
        apply_inverse_mask(torch.ones(3, 3), _random_set(g), 0)


def test_eliminate_overlap_keeps_object_column():
    g = torch.Generator().manual_seed(8)
    maps = _random_set(g)
    out = eliminate_overlap(maps, object_index=2)
    assert torch.equal(out.cross["cross_4"][:, 2], maps.cross["cross_4"][:, 2])
    peak = int(maps.cross["cross_4"][:, 2].argmax())
    assert all(out.cross["cross_4"][peak, n].item() == 0.0 for n in range(6) if n != 2)


def test_aggregate_token_map_averages_coarsest_layers():
    g = torch.Generator().manual_seed(9)
    maps = _random_set(g, layers=("a", "b"))
    agg = aggregate_token_map(maps, 1)
    expected = (maps.cross["a"][:, 1] + maps.cross["b"][:, 1]).reshape(4, 4) / 2
    assert torch.allclose(agg, expected, rtol=0, atol=1e-15)
    with pytest.raises(ResolutionMismatch):
        aggregate_token_map(maps, 1, resolution=8)


def test_token_map_averages_heads():
    a = torch.softmax(torch.randn(2, 16, 3, generator=torch.Generator().manual_seed(10)), dim=-1)
    maps = AttentionMapSet.captured({"l": a}, {}, 1, STREAM_FULL)
    tm = maps.token_map("l", 0)
    assert tm.resolution == 4
    assert torch.allclose(tm.values, a[..., 0].mean(dim=0).reshape(4, 4))
    maps.check_stochastic()
