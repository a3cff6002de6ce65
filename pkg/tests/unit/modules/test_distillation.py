import math

import numpy as np
import numpy.testing as npt
import pytest

from modules.discrepancy import smoothed_ce
from modules.distillation import (DistillationConfig, kd_source_loss, kd_target_loss, lambda_e, temp_softmax,
                                  total_loss)
from modules.tensor import Tensor, grad_check


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def kl_rows(p, q):
    return float((p * np.log(p / q)).sum(axis=1).mean())


class TestDistillationConfig:

    def test_defaults(self):
        cfg = DistillationConfig()
        assert (cfg.tau, cfg.lambda_cls, cfg.alpha1, cfg.alpha2) == (20.0, 0.8, 0.1, 0.9)
        assert cfg.tau_squared and not cfg.kl_reverse

    @pytest.mark.parametrize("kwargs", [
        {'tau': 0.0},
        {'lambda_cls': 1.2},
        {'alpha1': 0.0},
        {'alpha1': 0.9, 'alpha2': 0.1},
        {'alpha2': 1.0},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            DistillationConfig(**kwargs)


class TestTempSoftmax:

    def test_symmetric_logits(self):
        npt.assert_allclose(temp_softmax(Tensor([[0.0, 0.0]]), 7.0).data, [[0.5, 0.5]])

    def test_temperature_two(self):
        npt.assert_allclose(temp_softmax(Tensor([[2.0, 0.0]]), 2.0).data, [[0.7311, 0.2689]], atol=1e-4)

    def test_unit_temperature_is_softmax(self, rng):
        z = rng.normal(size=(4, 5))
        npt.assert_allclose(temp_softmax(Tensor(z), 1.0).data, softmax(z), atol=1e-12)

    def test_huge_temperature_is_uniform(self, rng):
        npt.assert_allclose(temp_softmax(Tensor(rng.normal(size=(3, 4))), 1e6).data, 0.25, atol=1e-3)

    def test_argmax_does_not_depend_on_temperature(self, rng):
        z = Tensor(rng.normal(size=(10, 6)))
        for tau in (0.5, 1.0, 20.0):
            npt.assert_array_equal(temp_softmax(z, tau).data.argmax(axis=1), z.data.argmax(axis=1))

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(ValueError):
            temp_softmax(Tensor([[1.0, 0.0]]), 0.0)


class TestKdTargetLoss:

    def test_identical_logits(self, rng):
        z = rng.normal(size=(5, 3))
        assert abs(kd_target_loss(Tensor(z), Tensor(z), 20.0).item()) < 1e-12

    def test_two_class_case(self):
        student, teacher = Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]])
        p = np.array([[1.0, 1.0 / math.e]]) / (1.0 + 1.0 / math.e)
        expected = kl_rows(p, np.array([[0.5, 0.5]]))

        assert expected == pytest.approx(0.111, abs=1e-3)
        assert kd_target_loss(student, teacher, 1.0).item() == pytest.approx(expected, abs=1e-12)
        assert kd_target_loss(student * 2.0, teacher, 2.0).item() == pytest.approx(4.0 * expected, abs=1e-12)
        assert kd_target_loss(student * 2.0, teacher, 2.0, tau_squared=False).item() == pytest.approx(expected, abs=1e-12)

    def test_direction(self, rng):
        zs, zt = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        p, q = softmax(zs / 3.0), softmax(zt / 3.0)
        forward = kd_target_loss(Tensor(zs), Tensor(zt), 3.0, tau_squared=False).item()
        reverse = kd_target_loss(Tensor(zs), Tensor(zt), 3.0, tau_squared=False, kl_reverse=True).item()

        assert forward == pytest.approx(kl_rows(p, q), abs=1e-12)
        assert reverse == pytest.approx(kl_rows(q, p), abs=1e-12)

    def test_nonnegative(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            zs, zt = Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=(4, 3)))
            assert kd_target_loss(zs, zt, 4.0).item() >= -1e-12
            assert kd_target_loss(zs, zt, 4.0, kl_reverse=True).item() >= -1e-12

    @pytest.mark.parametrize("reverse", [False, True])
    def test_gradient(self, rng, reverse):
        zt = Tensor(rng.normal(size=(4, 3)))
        report = grad_check(lambda z: kd_target_loss(z, zt, 2.0, kl_reverse=reverse), Tensor(rng.normal(size=(4, 3))))

        assert report.passed

    def test_teacher_receives_no_gradient(self, rng):
        student = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        teacher = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        kd_target_loss(student, teacher, 20.0).backward()

        assert student.grad is not None
        assert teacher.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_target_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 1.0)


class TestKdSourceLoss:

    def test_identical_logits_without_classification(self, rng):
        z = Tensor(rng.normal(size=(4, 3)))
        assert abs(kd_source_loss(z, z, [0, 1, 2, 0], 20.0, 0.0, 0.1).item()) < 1e-12

    def test_identical_logits_is_classification(self, rng):
        z = Tensor(rng.normal(size=(4, 3)))
        labels = [0, 1, 2, 0]
        out = kd_source_loss(z, z, labels, 20.0, 1.0, 0.1).item()

        assert out == pytest.approx(smoothed_ce(z, labels, 0.1).item(), abs=1e-12)

    def test_sum_of_parts(self, rng):
        zs, zt = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3)))
        labels = rng.integers(0, 3, size=5)
        expected = kd_target_loss(zs, zt, 20.0).item() + 0.8 * smoothed_ce(zs, labels, 0.1).item()

        assert kd_source_loss(zs, zt, labels, 20.0, 0.8, 0.1).item() == pytest.approx(expected, abs=1e-12)


class TestTotalLoss:

    def test_endpoints(self):
        assert total_loss(1.0, 0.2, 0.4, 0.0) == 1.0
        assert total_loss(1.0, 0.2, 0.4, 1.0) == pytest.approx(0.6)

    def test_convex_combination(self):
        assert total_loss(1.0, 0.2, 0.4, 0.3) == pytest.approx(0.88)

    def test_tensors(self):
        out = total_loss(Tensor(1.0), Tensor(0.2), Tensor(0.4), 0.3)
        assert out.item() == pytest.approx(0.88)

    @pytest.mark.parametrize("weight", [-0.1, 1.1])
    def test_rejected(self, weight):
        with pytest.raises(ValueError):
            total_loss(1.0, 0.2, 0.4, weight)


class TestLambdaE:

    def test_endpoints_are_exact(self):
        assert lambda_e(0, 100) == 0.1
        assert lambda_e(100, 100) == 0.9

    def test_midpoint(self):
        assert lambda_e(50, 100) == pytest.approx(0.3)

    def test_monotone_and_bounded(self):
        values = [lambda_e(e, 40, 0.2, 0.7) for e in range(41)]

        assert all(a < b for a, b in zip(values, values[1:]))
        assert values[0] == pytest.approx(0.2) and values[-1] == pytest.approx(0.7)

    def test_equal_bounds_are_constant(self):
        assert [lambda_e(e, 5, 0.4, 0.4) for e in range(6)] == pytest.approx([0.4] * 6)

    @pytest.mark.parametrize("args", [(0, 0), (11, 10), (-1, 10), (0, 10, 0.0, 0.9), (0, 10, 0.9, 0.1)])
    def test_rejected(self, args):
        with pytest.raises(ValueError):
            lambda_e(*args)
