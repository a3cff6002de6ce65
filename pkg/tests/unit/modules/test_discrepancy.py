import logging
import math

import numpy as np
import numpy.testing as npt
import pytest

from modules.discrepancy import (KernelFamily, class_weights, elmmsd, hard_class_weights, kernel_matrix,
                                 lambda_sda, lmmd_baseline, mmsd_biased, mmsd_discrepancy, one_hot,
                                 sda_loss, smooth_labels, smoothed_ce)
from modules.errors import TensorError
from modules.tensor import Tensor, grad_check

SMOOTH = KernelFamily(bandwidths=(1.0, 3.0))


def kernel(a, b, family, squared):
    d = float(np.sum((a - b) ** 2))
    k = sum(mu * math.exp(-d / (2.0 * s * s)) for s, mu in zip(family.bandwidths, family.mixture_weights))
    return k * k if squared else k


def mmsd_oracle(xs, xt, family):
    ss = sum(kernel(a, b, family, True) for a in xs for b in xs) / len(xs) ** 2
    tt = sum(kernel(a, b, family, True) for a in xt for b in xt) / len(xt) ** 2
    st = sum(kernel(a, b, family, True) for a in xs for b in xt) / (len(xs) * len(xt))
    return ss + tt - 2.0 * st


def weighted_oracle(xs, xt, ws, wt, family, squared):
    total = 0.0
    for c in range(ws.shape[1]):
        if ws[:, c].sum() == 0 or wt[:, c].sum() == 0:
            continue
        for i in range(len(xs)):
            for j in range(len(xs)):
                total += ws[i, c] * ws[j, c] * kernel(xs[i], xs[j], family, squared)
        for i in range(len(xt)):
            for j in range(len(xt)):
                total += wt[i, c] * wt[j, c] * kernel(xt[i], xt[j], family, squared)
        for i in range(len(xs)):
            for j in range(len(xt)):
                total -= 2.0 * ws[i, c] * wt[j, c] * kernel(xs[i], xt[j], family, squared)
    return total / ws.shape[1]


def soft_rows(rng, n, n_classes):
    logits = rng.normal(size=(n, n_classes))
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def make_batch(rng, n=12):
    '''n + n samples of 5 features over 3 classes, source labels hard, target soft.'''
    xs = rng.normal(size=(n, 5))
    xt = rng.normal(loc=0.3, size=(n, 5))
    ys = np.arange(n) % 3
    yt = soft_rows(rng, n, 3)
    return xs, xt, ys, yt


@pytest.fixture
def batch(rng):
    return make_batch(rng)


RANDOM_BATCHES = range(100)


class TestKernelFamily:

    def test_uniform_default_weights(self):
        family = KernelFamily()

        assert family.bandwidths == (0.001, 0.01, 1.0, 10.0, 100.0)
        npt.assert_allclose(family.mixture_weights, [0.2] * 5)

    @pytest.mark.parametrize("kwargs", [
        {'bandwidths': ()},
        {'bandwidths': (1.0, -1.0)},
        {'bandwidths': (1.0, float('inf'))},
        {'bandwidths': (1.0, 2.0), 'mixture_weights': (1.0,)},
        {'bandwidths': (1.0, 2.0), 'mixture_weights': (0.7, 0.7)},
        {'bandwidths': (1.0, 2.0), 'mixture_weights': (1.5, -0.5)},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            KernelFamily(**kwargs)


class TestKernelMatrix:

    def test_unit_diagonal(self, rng):
        x = rng.normal(size=(6, 3))

        npt.assert_allclose(np.diag(kernel_matrix(x, x, KernelFamily()).data), 1.0)
        npt.assert_allclose(np.diag(kernel_matrix(x, x, KernelFamily(), squared=True).data), 1.0)

    def test_single_bandwidth_closed_form(self):
        sigma = 2.0
        family = KernelFamily(bandwidths=(sigma,))
        a, b = np.array([[0.0, 0.0]]), np.array([[sigma, 0.0]])

        assert kernel_matrix(a, b, family).item() == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert kernel_matrix(a, b, family, squared=True).item() == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_swapping_arguments_transposes(self, rng):
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(7, 3))
        npt.assert_array_equal(kernel_matrix(x, y, SMOOTH).data, kernel_matrix(y, x, SMOOTH).data.T)

    def test_matches_loop(self, rng):
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        expected = [[kernel(a, b, SMOOTH, False) for b in y] for a in x]
        npt.assert_allclose(kernel_matrix(x, y, SMOOTH).data, expected, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(TensorError):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), SMOOTH)


class TestMmsd:

    def test_identical_samples(self, rng):
        x = rng.normal(size=(10, 4))
        assert abs(mmsd_biased(x, x.copy(), KernelFamily()).item()) < 1e-12

    def test_single_pair(self):
        a, b = np.array([[0.0, 1.0]]), np.array([[1.0, 2.0]])
        expected = 2.0 - 2.0 * kernel(a[0], b[0], SMOOTH, True)
        assert mmsd_biased(a, b, SMOOTH).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", RANDOM_BATCHES)
    def test_matches_triple_loop(self, seed):
        r = np.random.default_rng(seed)
        xs = r.normal(size=(int(r.integers(1, 10)), 3))
        xt = r.normal(loc=0.5, size=(int(r.integers(1, 10)), 3))
        for family in (SMOOTH, KernelFamily()):
            assert mmsd_biased(xs, xt, family).item() == pytest.approx(mmsd_oracle(xs, xt, family), abs=1e-12)

    @pytest.mark.parametrize("seed", RANDOM_BATCHES)
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        xs, xt = r.normal(size=(int(r.integers(1, 8)), 2)), r.normal(size=(int(r.integers(1, 8)), 2))
        for family in (SMOOTH, KernelFamily()):
            assert mmsd_biased(xs, xt, family).item() >= -1e-12

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            mmsd_biased(np.zeros((0, 3)), np.zeros((2, 3)), SMOOTH)

    def test_class_blind_adapter(self, batch):
        xs, xt, ys, yt = batch
        out = mmsd_discrepancy(xs, xt, class_weights(one_hot(ys, 3)), class_weights(yt), SMOOTH)
        assert out.item() == mmsd_biased(xs, xt, SMOOTH).item()

    def test_gradient(self, rng):
        xt = Tensor(rng.normal(size=(5, 3)))
        assert grad_check(lambda xs: mmsd_biased(xs, xt, SMOOTH), Tensor(rng.normal(size=(4, 3)))).passed


class TestClassWeights:

    def test_hard_labels(self):
        w = class_weights(one_hot([0, 1], 2))
        npt.assert_array_equal(w.values, [[1.0, 0.0], [0.0, 1.0]])

    def test_identical_soft_rows(self):
        w = class_weights(np.full((4, 2), 0.5))
        npt.assert_array_equal(w.values, np.full((4, 2), 0.25))

    def test_columns_sum_to_one(self, rng):
        w = class_weights(soft_rows(rng, 9, 4))

        npt.assert_allclose(w.values.sum(axis=0), 1.0)
        assert w.present.all()

    def test_absent_class(self):
        w = class_weights(one_hot([0, 0, 2], 3))

        npt.assert_array_equal(w.present, [True, False, True])
        npt.assert_array_equal(w.values[:, 1], 0.0)

    def test_hard_weights_take_lowest_index_on_ties(self):
        w = hard_class_weights([[0.5, 0.5], [0.2, 0.8]])
        npt.assert_array_equal(w.values, [[1.0, 0.0], [0.0, 1.0]])

    @pytest.mark.parametrize("rows, n_classes", [
        ([[0.5, 0.6]], None),
        ([[1.5, -0.5]], None),
        ([0.5, 0.5], None),
        ([[0.5, 0.5]], 3),
    ])
    def test_rejected(self, rows, n_classes):
        with pytest.raises(ValueError):
            class_weights(rows, n_classes)

    def test_one_hot_range(self):
        with pytest.raises(ValueError):
            one_hot([0, 3], 3)


class TestSmoothing:

    def test_zero_epsilon_keeps_one_hot(self):
        npt.assert_array_equal(smooth_labels([2, 0], 0.0, 3).values, one_hot([2, 0], 3))

    def test_ten_classes(self):
        npt.assert_allclose(smooth_labels([0], 0.1, 10).values[0], [0.91] + [0.01] * 9)

    def test_near_one_is_near_uniform(self):
        npt.assert_allclose(smooth_labels([1], 0.999, 4).values[0], 0.25, atol=1e-3)

    def test_rows_sum_to_one_and_keep_argmax(self, rng):
        labels = rng.integers(0, 5, size=20)
        smoothed = smooth_labels(labels, 0.3, 5).values

        npt.assert_allclose(smoothed.sum(axis=1), 1.0)
        npt.assert_array_equal(smoothed.argmax(axis=1), labels)
        assert smoothed.min() >= 0.3 / 5 - 1e-15

    @pytest.mark.parametrize("epsilon", [-0.1, 1.0, 1.5])
    def test_rejected(self, epsilon):
        with pytest.raises(ValueError):
            smooth_labels([0], epsilon, 3)


class TestSmoothedCe:

    def test_zero_epsilon_is_cross_entropy(self, rng):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -log_p[np.arange(6), labels].mean()

        assert smoothed_ce(Tensor(logits), labels, 0.0).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("epsilon", [0.0, 0.1, 0.5])
    def test_uniform_logits(self, epsilon):
        assert smoothed_ce(Tensor(np.zeros((3, 5))), [0, 1, 4], epsilon).item() == pytest.approx(math.log(5))

    def test_entropy_floor(self, rng):
        labels = rng.integers(0, 3, size=8)
        target = smooth_labels(labels, 0.2, 3).values
        floor = -(target * np.log(target)).sum(axis=1).mean()

        assert smoothed_ce(Tensor(rng.normal(size=(8, 3))), labels, 0.2).item() >= floor - 1e-12

    def test_gradient(self, rng):
        labels = rng.integers(0, 4, size=5)
        assert grad_check(lambda z: smoothed_ce(z, labels, 0.1), Tensor(rng.normal(size=(5, 4)))).passed


class TestElmmsd:

    def test_identical_batches(self, rng):
        x = rng.normal(size=(9, 4))
        w = class_weights(one_hot(np.arange(9) % 3, 3))
        assert abs(elmmsd(x, x, w, w, KernelFamily()).item()) < 1e-12

    def test_one_sample_per_class(self):
        xs, xt = np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([[0.5, 0.0], [2.0, 1.0]])
        w = class_weights(one_hot([0, 1], 2))
        expected = sum(2.0 - 2.0 * kernel(xs[c], xt[c], SMOOTH, True) for c in range(2)) / 2

        assert elmmsd(xs, xt, w, w, SMOOTH).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", RANDOM_BATCHES)
    def test_matches_weighted_loops(self, seed):
        xs, xt, ys, yt = make_batch(np.random.default_rng(seed), n=8)
        ws, wt = class_weights(smooth_labels(ys, 0.1, 3).values), class_weights(yt)
        for family in (SMOOTH, KernelFamily()):
            expected = weighted_oracle(xs, xt, ws.values, wt.values, family, squared=True)
            assert elmmsd(xs, xt, ws, wt, family).item() == pytest.approx(expected, abs=1e-12)

    def test_absent_class_adds_nothing(self, rng):
        xs, xt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        ws = class_weights(one_hot([0, 0, 1, 1], 3))
        wt = class_weights(one_hot([0, 2, 2, 0], 3))
        expected = weighted_oracle(xs, xt, ws.values, wt.values, SMOOTH, squared=True)

        assert elmmsd(xs, xt, ws, wt, SMOOTH).item() == pytest.approx(expected, abs=1e-12)

    def test_no_shared_class(self, rng, caplog):
        ws = class_weights(one_hot([0, 0], 2))
        wt = class_weights(one_hot([1, 1], 2))
        with caplog.at_level(logging.WARNING, logger="kavi.discrepancy"):
            out = elmmsd(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), ws, wt, SMOOTH)

        assert out.item() == 0.0
        assert "no class shared" in caplog.text

    def test_permutation_invariance(self, batch, rng):
        xs, xt, ys, yt = batch
        ws, wt = class_weights(one_hot(ys, 3)), class_weights(yt)
        ps, pt = rng.permutation(12), rng.permutation(12)
        permuted = elmmsd(xs[ps], xt[pt], class_weights(one_hot(ys[ps], 3)), class_weights(yt[pt]), SMOOTH)

        assert permuted.item() == pytest.approx(elmmsd(xs, xt, ws, wt, SMOOTH).item(), abs=1e-12)

    def test_batch_size_mismatch(self, batch):
        xs, xt, ys, yt = batch
        with pytest.raises(ValueError):
            elmmsd(xs[:5], xt, class_weights(one_hot(ys, 3)), class_weights(yt), SMOOTH)

    def test_class_count_mismatch(self, batch):
        xs, xt, ys, yt = batch
        with pytest.raises(ValueError):
            elmmsd(xs, xt, class_weights(one_hot(ys, 4)), class_weights(yt), SMOOTH)

    def test_gradient(self, batch):
        xs, xt, ys, yt = batch
        ws, wt = class_weights(one_hot(ys, 3)), class_weights(yt)
        report = grad_check(lambda f: elmmsd(f, Tensor(xt), ws, wt, SMOOTH), Tensor(xs))

        assert report.passed


class TestLmmdBaseline:

    def test_identical_batches(self, rng):
        x = rng.normal(size=(6, 2))
        w = class_weights(one_hot(np.arange(6) % 2, 2))
        assert abs(lmmd_baseline(x, x, w, w, SMOOTH).item()) < 1e-12

    @pytest.mark.parametrize("seed", RANDOM_BATCHES)
    def test_reduces_to_unsquared_elmmsd(self, seed):
        xs, xt, ys, yt = make_batch(np.random.default_rng(seed), n=8)
        ws, wt = class_weights(one_hot(ys, 3)), hard_class_weights(yt)

        assert lmmd_baseline(xs, xt, ws, wt, SMOOTH).item() == elmmsd(xs, xt, ws, wt, SMOOTH, squared=False).item()

    def test_binary_kernel_values(self):
        family = KernelFamily(bandwidths=(0.001,))
        xs = np.array([[0.0], [1.0], [2.0], [3.0]])
        xt = np.array([[0.0], [5.0], [2.0], [7.0]])
        w = class_weights(one_hot([0, 1, 0, 1], 2))

        assert lmmd_baseline(xs, xt, w, w, family).item() == pytest.approx(elmmsd(xs, xt, w, w, family).item())

    @pytest.mark.parametrize("seed", RANDOM_BATCHES)
    def test_matches_weighted_loops(self, seed):
        xs, xt, ys, yt = make_batch(np.random.default_rng(seed), n=8)
        ws, wt = class_weights(one_hot(ys, 3)), hard_class_weights(yt)
        expected = weighted_oracle(xs, xt, ws.values, wt.values, SMOOTH, squared=False)

        assert lmmd_baseline(xs, xt, ws, wt, SMOOTH).item() == pytest.approx(expected, abs=1e-12)


class TestSdaLoss:

    @pytest.fixture
    def parts(self, rng, batch):
        xs, xt, ys, yt = batch
        return {
            'logits_s': Tensor(rng.normal(size=(12, 3))),
            'labels_s': ys,
            'fc1_s': Tensor(xs), 'fc1_t': Tensor(xt),
            'fc2_s': Tensor(xs[:, :3]), 'fc2_t': Tensor(xt[:, :3]),
            'weights_s': class_weights(smooth_labels(ys, 0.1, 3).values),
            'weights_t': class_weights(yt),
            'family': SMOOTH,
            'epsilon': 0.1,
        }

    def test_zero_weight_is_classification_only(self, parts):
        loss, terms = sda_loss(**parts, lambda_sda=0.0)

        assert loss.item() == smoothed_ce(parts['logits_s'], parts['labels_s'], 0.1).item()
        assert terms.lambda_sda == 0.0

    def test_sum_of_parts(self, parts):
        loss, terms = sda_loss(**parts, lambda_sda=1.3)
        cls = smoothed_ce(parts['logits_s'], parts['labels_s'], 0.1).item()
        d1 = elmmsd(parts['fc1_s'], parts['fc1_t'], parts['weights_s'], parts['weights_t'], SMOOTH).item()
        d2 = elmmsd(parts['fc2_s'], parts['fc2_t'], parts['weights_s'], parts['weights_t'], SMOOTH).item()

        assert loss.item() == pytest.approx(cls + 1.3 * (d1 + d2), abs=1e-12)
        assert (terms.cls, terms.d_z1, terms.d_z2) == pytest.approx((cls, d1, d2), abs=1e-12)
        assert terms.sda == loss.item()
        assert terms.shared_classes == 3

    def test_missing_layer_adds_zero(self, parts):
        parts.update(fc2_s=None, fc2_t=None)
        loss, terms = sda_loss(**parts, lambda_sda=1.0)

        assert terms.d_z2 == 0.0
        assert loss.item() == pytest.approx(terms.cls + terms.d_z1, abs=1e-12)

    def test_perfect_identical_domains(self, rng):
        x = rng.normal(size=(6, 4))
        labels = np.arange(6) % 3
        w = class_weights(one_hot(labels, 3))
        logits = Tensor(one_hot(labels, 3) * 30.0)
        loss, terms = sda_loss(logits, labels, Tensor(x), Tensor(x), Tensor(x), Tensor(x), w, w,
                               SMOOTH, epsilon=0.0, lambda_sda=1.0)

        assert abs(terms.d_z1) < 1e-12
        assert abs(terms.d_z2) < 1e-12
        assert loss.item() < 1e-10

    def test_alternative_discrepancy(self, parts):
        loss, terms = sda_loss(**parts, lambda_sda=1.0, discrepancy=lmmd_baseline)
        expected = lmmd_baseline(parts['fc1_s'], parts['fc1_t'], parts['weights_s'], parts['weights_t'], SMOOTH)

        assert terms.d_z1 == expected.item()


class TestLambdaSda:

    def test_start(self):
        assert lambda_sda(0, 10) == 0.0

    def test_upper_asymptote(self):
        assert lambda_sda(11, 10) == pytest.approx(2.0)

    def test_last_epoch(self):
        assert lambda_sda(3, 3) == pytest.approx(1.8564, abs=1e-4)

    def test_monotone_and_bounded(self):
        values = [lambda_sda(e, 50) for e in range(51)]

        assert all(a <= b for a, b in zip(values, values[1:]))
        assert 0.0 <= min(values) and max(values) < 2.0

    @pytest.mark.parametrize("epoch, max_epochs", [(0, 0), (1, -3), (-1, 5)])
    def test_rejected(self, epoch, max_epochs):
        with pytest.raises(ValueError):
            lambda_sda(epoch, max_epochs)
