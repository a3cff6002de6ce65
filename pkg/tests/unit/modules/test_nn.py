import numpy as np
import numpy.testing as npt
import pytest

from modules.errors import TensorError
from modules.nn import SGD, BatchNorm, Conv1d, Linear, MaxPool1d, Module, ReLU
from modules.tensor import Tensor, grad_check


class TwoLayer(Module):

    def __init__(self, rng):
        super().__init__()
        self.first = Linear(4, 3, rng)
        self.norm = BatchNorm(3)
        self.second = Linear(3, 2, rng)

    def forward(self, x):
        return self.second(self.norm(self.first(x)).relu())


@pytest.fixture
def sut(rng):
    return TwoLayer(rng)


class TestModule:

    def test_parameter_names_follow_assignment_order(self, sut):
        names = [name for name, _ in sut.named_parameters()]

        assert names == ['first.weight', 'first.bias', 'norm.weight', 'norm.bias', 'second.weight', 'second.bias']

    def test_state_dict_includes_buffers(self, sut):
        state = sut.state_dict()

        assert 'norm.running_mean' in state
        assert 'norm.running_var' in state

    def test_state_round_trip(self, sut, rng):
        other = TwoLayer(np.random.default_rng(99))
        other.load_state_dict(sut.state_dict())
        x = Tensor(rng.normal(size=(5, 4)))
        sut.eval()
        other.eval()

        npt.assert_array_equal(sut(x).data, other(x).data)

    @pytest.mark.parametrize("mutate", [
        lambda s: s.pop('first.bias'),
        lambda s: s.update({'extra': np.zeros(1)}),
        lambda s: s.update({'first.weight': np.zeros((3, 4))}),
    ])
    def test_load_rejects_mismatched_state(self, sut, mutate):
        state = dict(sut.state_dict())
        mutate(state)
        with pytest.raises(TensorError):
            sut.load_state_dict(state)

    def test_train_eval_reach_submodules(self, sut):
        sut.eval()
        assert not sut.norm.training
        sut.train()
        assert sut.norm.training

    def test_num_parameters(self, sut):
        assert sut.num_parameters() == 4 * 3 + 3 + 3 + 3 + 3 * 2 + 2


class TestLinear:

    def test_cost_convention(self, rng):
        cost = Linear(256, 128, rng).cost((256,))

        assert cost.params == 256 * 128 + 128
        assert cost.flops == 2 * 256 * 128 + 128

    def test_bias_starts_at_zero(self, rng):
        npt.assert_array_equal(Linear(3, 2, rng).bias.data, np.zeros(2))


class TestConv1d:

    def test_same_padding_halves_length(self, rng):
        conv = Conv1d(1, 16, 3, 2, rng)
        out = conv(Tensor(rng.normal(size=(2, 1, 1024))))

        assert conv.padding == 1
        assert out.shape == (2, 16, 512)
        assert conv.out_length(1024) == 512

    def test_cost(self, rng):
        cost = Conv1d(1, 16, 3, 2, rng).cost((1, 1024))

        assert cost.params == 16 * 3 + 16
        assert cost.flops == 2 * 3 * 16 * 512 + 16 * 512
        assert cost.out_shape == (16, 512)


class TestBatchNorm:

    def test_training_normalizes_batch(self, rng):
        bn = BatchNorm(3)
        out = bn(Tensor(rng.normal(loc=5.0, scale=3.0, size=(64, 3))))

        npt.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-10)
        npt.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-4)

    def test_running_stats_update_only_in_training(self, rng):
        bn = BatchNorm(2)
        x = Tensor(rng.normal(loc=2.0, size=(16, 2)))
        bn(x)
        after_train = bn._buffers['running_mean'].copy()
        bn.eval()
        bn(x)

        assert not np.allclose(after_train, 0.0)
        npt.assert_array_equal(bn._buffers['running_mean'], after_train)

    def test_momentum(self):
        bn = BatchNorm(1, momentum=0.1)
        bn(Tensor([[1.0], [3.0]]))

        npt.assert_allclose(bn._buffers['running_mean'], [0.2])
        # unbiased batch variance 2.0
        npt.assert_allclose(bn._buffers['running_var'], [0.9 + 0.1 * 2.0])

    def test_inference_uses_frozen_statistics(self, rng):
        bn = BatchNorm(2).eval()
        x = rng.normal(size=(4, 2))
        out = bn(Tensor(x))

        npt.assert_allclose(out.data, x / np.sqrt(1.0 + bn.eps))

    def test_channel_axis_of_3d_input(self, rng):
        bn = BatchNorm(4)
        out = bn(Tensor(rng.normal(size=(3, 4, 10))))

        npt.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-10)

    def test_gradient(self, rng):
        bn = BatchNorm(3)
        w = Tensor(rng.normal(size=(6, 3)))
        report = grad_check(lambda x: (bn(x) * w).sum(), Tensor(rng.normal(size=(6, 3))))

        assert report.passed


class TestLayers:

    def test_relu_cost(self):
        assert ReLU().cost((16, 512)).flops == 16 * 512

    def test_max_pool_shape(self, rng):
        out = MaxPool1d()(Tensor(rng.normal(size=(2, 16, 512))))
        assert out.shape == (2, 16, 256)


class TestSGD:

    def test_step_moves_registered_parameters_only(self, sut, rng):
        outsider = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        before = outsider.data.copy()
        x = Tensor(rng.normal(size=(8, 4)))
        (sut(x).sum() + (outsider * 2.0).sum()).backward()
        weight_before = sut.first.weight.data.copy()
        opt = SGD(sut.parameters(), lr=0.1)
        opt.step()

        npt.assert_array_equal(outsider.data, before)
        npt.assert_allclose(sut.first.weight.data, weight_before - 0.1 * sut.first.weight.grad)

    def test_parameters_without_grad_are_untouched(self, sut):
        before = sut.first.weight.data.copy()
        SGD(sut.parameters(), lr=0.1).step()
        npt.assert_array_equal(sut.first.weight.data, before)

    def test_zero_grad(self, sut, rng):
        sut(Tensor(rng.normal(size=(4, 4)))).sum().backward()
        opt = SGD(sut.parameters(), lr=0.1)
        opt.zero_grad()

        assert all(p.grad is None for p in sut.parameters())

    @pytest.mark.parametrize("lr", [0.0, -0.1])
    def test_rejects_non_positive_rate(self, sut, lr):
        with pytest.raises(ValueError):
            SGD(sut.parameters(), lr)
