import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from centroid_uda.centroids import (
    CentroidSet,
    MemoryBank,
    compute_centroids,
    onehot,
    partition_centroids,
    partition_prediction,
    random_partition,
    target_soft_mask,
    update_bank,
)
from oracles import centroids_loop


def test_constant_feature_full_mask():
    f = torch.full((2, 3, 4, 4), 2.5)
    m = torch.zeros(2, 2, 4, 4)
    m[:, 1] = 1
    c = compute_centroids(f, m)
    assert torch.allclose(c.values[1], torch.full((3,), 2.5))
    assert c.present.tolist() == [False, True]


def test_hand_arithmetic_two_by_two():
    f = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    m = torch.zeros(1, 2, 2, 2)
    m[0, 0, 0, :] = 1
    m[0, 1, 1, :] = 1
    c = compute_centroids(f, m)
    assert c.values[0, 0].item() == 1.5
    assert c.values[1, 0].item() == 3.5


def test_absent_class_flagged_and_zero():
    f = torch.randn(1, 3, 4, 4)
    m = torch.zeros(1, 3, 4, 4)
    m[:, 0] = 1
    c = compute_centroids(f, m)
    assert c.present.tolist() == [True, False, False]
    assert torch.all(c.values[1:] == 0)


@settings(max_examples=30, deadline=None)
@given(
    b=st.integers(1, 3), c=st.integers(1, 5), h=st.integers(1, 6), w=st.integers(1, 6), k=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1), soft=st.booleans(),
)
def test_matches_pixel_loop(b, c, h, w, k, seed, soft):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(b, c, h, w, generator=g, dtype=torch.float64)
    if soft:
        m = torch.softmax(torch.randn(b, k, h, w, generator=g, dtype=torch.float64), 1)
    else:
        m = onehot(torch.randint(k, (b, h, w), generator=g), k, torch.float64)
    got = compute_centroids(f, m)
    want, mass = centroids_loop(f.numpy(), m.numpy())
    np.testing.assert_allclose(got.values.numpy(), want, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(got.mass.numpy(), mass, rtol=1e-12)
    # mass conservation
    assert got.mass.sum().item() == pytest.approx(m.sum().item(), rel=1e-12)


def test_soft_mass_equals_pixel_count():
    m = target_soft_mask(torch.randn(2, 4, 5, 5, dtype=torch.float64))
    c = compute_centroids(torch.randn(2, 3, 5, 5, dtype=torch.float64), m)
    assert c.mass.sum().item() == pytest.approx(50.0, rel=1e-12)


def test_gradients_reach_features_and_mask():
    f = torch.randn(1, 2, 3, 3, requires_grad=True)
    logits = torch.randn(1, 3, 3, 3, requires_grad=True)
    compute_centroids(f, target_soft_mask(logits)).values.pow(2).sum().backward()
    assert f.grad.abs().sum() > 0 and logits.grad.abs().sum() > 0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        compute_centroids(torch.randn(1, 2, 3, 3), torch.ones(1, 2, 4, 4))


def test_soft_mask_examples():
    assert target_soft_mask(torch.zeros(1, 2, 1, 1)).flatten().tolist() == [0.5, 0.5]
    np.testing.assert_allclose(target_soft_mask(torch.full((1, 3, 1, 1), 7.0)).flatten(), [1 / 3] * 3, rtol=1e-6)
    out = target_soft_mask(torch.tensor([np.log(3.0), 0.0], dtype=torch.float64).view(1, 2, 1, 1)).flatten()
    np.testing.assert_allclose(out, [0.75, 0.25], rtol=1e-12)
    s = target_soft_mask(torch.randn(3, 5, 4, 4) * 10).sum(1)
    assert torch.allclose(s, torch.ones_like(s), atol=1e-6)


def _bank(values, init=True, rho=0.9, weight_fresh=True):
    v = torch.tensor(values, dtype=torch.float64)
    return MemoryBank(v, torch.full((v.shape[0],), init), rho, weight_fresh)


def _fresh(values, present=None):
    v = torch.tensor(values, dtype=torch.float64)
    mass = torch.ones(v.shape[0], dtype=torch.float64) if present is None else torch.tensor(present, dtype=torch.float64)
    return CentroidSet(v, mass)


def test_ema_weights_fresh_value_by_rho():
    assert update_bank(_bank([[0.0]]), _fresh([[1.0]])).values.item() == 0.9


def test_ema_componentwise():
    out = update_bank(_bank([[1.0, 1.0]]), _fresh([[2.0, 0.0]]))
    np.testing.assert_allclose(out.values.numpy(), [[1.9, 0.1]], rtol=1e-12)


def test_ema_conventional_orientation_flag():
    out = update_bank(_bank([[0.0]], weight_fresh=False), _fresh([[1.0]]))
    assert out.values.item() == pytest.approx(0.1)


def test_ema_absent_class_unchanged():
    out = update_bank(_bank([[1.0], [2.0]]), _fresh([[5.0], [5.0]], present=[1.0, 0.0]))
    assert out.values[1].item() == 2.0


def test_ema_first_observation_overwrites():
    bank = MemoryBank.empty(2, 3, dtype=torch.float64)
    out = update_bank(bank, _fresh([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], present=[1.0, 0.0]))
    assert out.values[0].tolist() == [1.0, 2.0, 3.0]
    assert out.initialized.tolist() == [True, False]
    assert out.snapshot().present.tolist() == [True, False]


def test_ema_fixpoint():
    bank = _bank(np.random.default_rng(0).normal(size=(4, 6)).tolist())
    out = update_bank(bank, _fresh(bank.values.tolist()))
    np.testing.assert_allclose(out.values.numpy(), bank.values.numpy(), rtol=1e-15)


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        update_bank(MemoryBank.empty(2, 3), CentroidSet(torch.zeros(3, 3), torch.ones(3)))


def test_snapshot_is_a_copy():
    bank = _bank([[1.0]])
    snap = bank.snapshot()
    snap.values += 1
    assert bank.values.item() == 1.0


def test_partition_sizes_ten_pixels_four_parts():
    sizes = np.bincount(random_partition(10, 4, np.random.default_rng(0)), minlength=4)
    assert sorted(sizes.tolist(), reverse=True) == [3, 3, 2, 2]


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 8), w=st.integers(1, 8), p=st.integers(1, 64), seed=st.integers(0, 10**6))
def test_partition_reconstruction_and_balance(h, w, p, seed):
    if p > h * w:
        with pytest.raises(ValueError):
            partition_prediction(torch.rand(1, 2, h, w), p, seed)
        return
    soft = target_soft_mask(torch.randn(2, 3, h, w, generator=torch.Generator().manual_seed(seed)))
    parts, assign = partition_prediction(soft, p, seed)
    assert len(parts) == p
    assert torch.equal(sum(parts), soft)
    sizes = assign.sizes()
    assert sizes.sum(1).tolist() == [h * w] * 2
    assert (sizes.max(1) - sizes.min(1) <= 1).all()


def test_single_partition_is_identity_and_full_split_is_pixels():
    soft = target_soft_mask(torch.randn(1, 3, 2, 3))
    parts, _ = partition_prediction(soft, 1, 0)
    assert torch.equal(parts[0], soft)
    _, assign = partition_prediction(soft, 6, 0)
    assert (assign.sizes() == 1).all()


def test_partition_out_of_range():
    with pytest.raises(ValueError):
        partition_prediction(torch.rand(1, 2, 2, 2), 0, 0)


def test_partitions_drawn_per_image():
    _, assign = partition_prediction(torch.rand(2, 2, 8, 8), 4, 1)
    assert not np.array_equal(assign.pixel_to_partition[0], assign.pixel_to_partition[1])


def test_whole_image_centroid_is_mass_weighted_average_of_partitions():
    g = torch.Generator().manual_seed(5)
    f = torch.randn(2, 4, 6, 6, generator=g, dtype=torch.float64)
    soft = target_soft_mask(torch.randn(2, 3, 6, 6, generator=g, dtype=torch.float64))
    whole = compute_centroids(f, soft)
    cps = partition_centroids(f, partition_prediction(soft, 4, 2)[0])
    num = sum(c.values * c.mass[:, None] for c in cps)
    den = sum(c.mass for c in cps)
    np.testing.assert_allclose((num / den[:, None]).numpy(), whole.values.numpy(), rtol=1e-10)
