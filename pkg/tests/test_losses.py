import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fundusnet.errors import MissingGroundTruth, ShapeMismatch
from fundusnet.losses import LossWeights, bce, dice_loss, soft_dice, total_loss


def set_overlap_dice(a, b):
    """Independent oracle: classical 2|A∩B|/(|A|+|B|), empty-empty = 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * (a & b).sum() / denom


def finite_difference_grad(fn, x, h=1e-6):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2.0 * h)
        it.iternext()
    return grad


def all_binary_masks_3x3():
    n = 2**9
    masks = ((np.arange(n)[:, None] >> np.arange(9)) & 1).astype(float)
    return masks.reshape(n, 3, 3)


class TestSoftDice:
    def test_identity_binary(self):
        y = np.array([[1.0, 0.0], [1.0, 1.0]])
        assert abs(soft_dice(y, y) - 1.0) < 1e-6

    def test_disjoint(self):
        r = np.array([[1.0, 0.0], [0.0, 0.0]])
        y = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert soft_dice(r, y) < 1e-6

    def test_hand_half(self):
        r = np.array([[1.0, 1.0], [0.0, 0.0]])
        y = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert soft_dice(r, y) == pytest.approx(0.5, abs=1e-6)

    def test_hand_two_thirds(self):
        n = 16
        r = np.full((4, 4), 0.5)
        y = np.ones((4, 4))
        assert soft_dice(r, y) == pytest.approx(2.0 / 3.0, abs=1e-6)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3))
        assert soft_dice(z, z) == pytest.approx(1.0)

    def test_symmetric_on_binary(self, rng):
        r = (rng.random((6, 6)) > 0.5).astype(float)
        y = (rng.random((6, 6)) > 0.5).astype(float)
        assert soft_dice(r, y) == pytest.approx(soft_dice(y, r), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            soft_dice(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_matches_set_overlap_on_sampled_pairs(self, rng):
        masks = all_binary_masks_3x3()
        idx = rng.integers(0, len(masks), size=(300, 2))
        for i, j in idx:
            got = float(soft_dice(masks[i], masks[j]))
            assert got == pytest.approx(set_overlap_dice(masks[i], masks[j]), abs=1e-6)

    def test_range(self, rng):
        for _ in range(20):
            r = rng.random((5, 5))
            y = (rng.random((5, 5)) > 0.5).astype(float)
            assert 0.0 <= float(soft_dice(r, y)) <= 1.0

    def test_monotone_in_true_pixels(self, rng):
        y = (rng.random((6, 6)) > 0.5).astype(float)
        y.flat[0] = 1.0
        r = rng.random((6, 6))
        before = float(soft_dice(r, y))
        r2 = r.copy()
        r2.flat[0] = min(1.0, r.flat[0] + 0.3)
        assert float(soft_dice(r2, y)) >= before - 1e-12

    def test_torch_tensors_supported(self):
        r = torch.rand(4, 4, dtype=torch.float64)
        y = (torch.rand(4, 4) > 0.5).double()
        np_val = soft_dice(r.numpy(), y.numpy())
        assert float(soft_dice(r, y)) == pytest.approx(float(np_val), abs=1e-12)


class TestDiceLoss:
    def test_perfect_is_zero(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert float(dice_loss(y, y)) == pytest.approx(0.0, abs=1e-6)

    def test_disjoint_is_one(self):
        r = np.eye(3)
        y = 1.0 - np.eye(3)
        assert float(dice_loss(r, y)) == pytest.approx(1.0, abs=1e-6)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(10):
            y = (rng.random((8, 8)) > 0.5).astype(np.float64)
            r0 = rng.uniform(0.05, 0.95, (8, 8))

            r = torch.tensor(r0, requires_grad=True, dtype=torch.float64)
            loss = dice_loss(r, torch.tensor(y))
            loss.backward()
            analytic = r.grad.numpy()

            fd = finite_difference_grad(lambda a: float(dice_loss(a, y)), r0)
            denom = np.maximum(np.abs(analytic), np.abs(fd))
            mask = denom > 1e-10
            rel = np.abs(analytic - fd)[mask] / denom[mask]
            assert rel.max() < 1e-4


class TestBce:
    def test_half(self):
        assert bce(0.5, 1) == pytest.approx(np.log(2.0), abs=1e-9)
        assert bce(0.5, 0) == pytest.approx(np.log(2.0), abs=1e-9)

    def test_exact_prediction_near_zero(self):
        assert bce(1.0, 1) < 1e-6
        assert bce(0.0, 0) < 1e-6

    def test_hand_value(self):
        assert bce(0.9, 0) == pytest.approx(-np.log(0.1), abs=1e-9)

    def test_convex_midpoint(self, rng):
        for _ in range(100):
            p1, p2 = rng.uniform(0.01, 0.99, 2)
            lab = int(rng.integers(0, 2))
            mid = bce(0.5 * (p1 + p2), lab)
            assert mid <= 0.5 * (bce(p1, lab) + bce(p2, lab)) + 1e-12

    def test_gradient(self, rng):
        for _ in range(20):
            p0 = float(rng.uniform(0.05, 0.95))
            lab = float(rng.integers(0, 2))
            p = torch.tensor(p0, requires_grad=True, dtype=torch.float64)
            bce(p, lab).backward()
            h = 1e-7
            fd = (bce(p0 + h, lab) - bce(p0 - h, lab)) / (2 * h)
            assert float(p.grad) == pytest.approx(fd, rel=1e-4)


class TestTotalLoss:
    def _random_inputs(self, rng, batch=3, side=8):
        od = rng.uniform(0.05, 0.95, (batch, side, side))
        oc = rng.uniform(0.05, 0.95, (batch, side, side))
        p = rng.uniform(0.05, 0.95, batch)
        y_od = (rng.random((batch, side, side)) > 0.5).astype(float)
        y_oc = (rng.random((batch, side, side)) > 0.5).astype(float)
        y = rng.integers(0, 2, batch).astype(float)
        return (od, oc, p), (y_od, y_oc, y)

    def test_perfect_outputs_near_zero(self):
        y_od = np.zeros((2, 4, 4))
        y_od[:, 1:3, 1:3] = 1.0
        y_oc = np.zeros((2, 4, 4))
        y_oc[:, 2, 2] = 1.0
        y = np.array([0.0, 1.0])
        bd = total_loss((y_od, y_oc, y), (y_od, y_oc, y))
        assert float(bd.total) < 1e-5

    def test_weight_masking(self, rng):
        outputs, targets = self._random_inputs(rng)
        bd = total_loss(outputs, targets, LossWeights(1.0, 0.0, 0.0))
        assert float(bd.total) == pytest.approx(float(bd.l_od), abs=1e-12)

    def test_total_is_weighted_sum(self, rng):
        outputs, targets = self._random_inputs(rng)
        w = LossWeights(0.7, 1.3, 2.1)
        bd = total_loss(outputs, targets, w)
        expected = w.w_od * float(bd.l_od) + w.w_cp * float(bd.l_cp) + w.w_cls * float(bd.l_cls)
        assert float(bd.total) == pytest.approx(expected, abs=1e-12)

    def test_missing_ground_truth(self, rng):
        outputs, targets = self._random_inputs(rng)
        with pytest.raises(MissingGroundTruth):
            total_loss(outputs, (targets[0], None, targets[2]))

    def test_gradients_match_finite_differences(self, rng):
        (od0, oc0, p0), targets = self._random_inputs(rng, batch=2, side=8)
        od = torch.tensor(od0, requires_grad=True)
        oc = torch.tensor(oc0, requires_grad=True)
        p = torch.tensor(p0, requires_grad=True)
        bd = total_loss((od, oc, p), targets, LossWeights(1.0, 1.0, 1.0))
        bd.total.backward()

        def f(od_arr):
            return float(total_loss((od_arr, oc0, p0), targets).total)

        fd = finite_difference_grad(f, od0)
        analytic = od.grad.numpy()
        denom = np.maximum(np.abs(analytic), np.abs(fd))
        mask = denom > 1e-10
        assert (np.abs(analytic - fd)[mask] / denom[mask]).max() < 1e-4

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0, 1.0)


@given(st.integers(0, 2**9 - 1), st.integers(0, 2**9 - 1))
def test_soft_dice_equals_set_overlap(i, j):
    masks = all_binary_masks_3x3()
    assert float(soft_dice(masks[i], masks[j])) == pytest.approx(
        set_overlap_dice(masks[i], masks[j]), abs=1e-6
    )
