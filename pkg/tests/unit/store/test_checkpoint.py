import struct

import numpy as np
import numpy.testing as npt
import pytest

from modules.errors import DataError, TensorError
from modules.models import build_student, build_teacher
from modules.tensor import Tensor
from store.checkpoint import MAGIC, load_checkpoint, load_model, save_checkpoint, save_model


@pytest.fixture
def state(rng):
    return {'conv.weight': rng.normal(size=(4, 1, 3)), 'conv.bias': rng.normal(size=4),
            'bn.running_var': np.ones(4), 'scalar': np.array(2.5)}


class TestCheckpoint:

    def test_round_trip(self, state, tmp_path):
        save_checkpoint(tmp_path / 'x.ckpt', state)
        loaded = load_checkpoint(tmp_path / 'x.ckpt')

        assert list(loaded) == list(state)
        for name, value in state.items():
            assert loaded[name].tobytes() == value.tobytes()
            assert loaded[name].shape == value.shape

    def test_header(self, state, tmp_path):
        save_checkpoint(tmp_path / 'x.ckpt', state)
        raw = (tmp_path / 'x.ckpt').read_bytes()

        assert raw[:4] == MAGIC
        assert struct.unpack('<II', raw[4:12]) == (1, 4)

    @pytest.mark.parametrize("model", [
        lambda: build_student(3, input_len=32),
        lambda: build_teacher(3, nodes=8, input_len=32),
    ])
    def test_forward_is_bit_identical(self, model, tmp_path, rng):
        original = model()
        x = Tensor(rng.normal(size=(6, 32)))
        original(x)
        original.eval()
        save_model(tmp_path / 'm.ckpt', original)
        restored = load_model(tmp_path / 'm.ckpt', model().eval())

        npt.assert_array_equal(restored(x).logits.data, original(x).logits.data)

    def test_architecture_mismatch(self, tmp_path):
        save_model(tmp_path / 'm.ckpt', build_student(3, input_len=32))
        with pytest.raises(TensorError):
            load_model(tmp_path / 'm.ckpt', build_student(4, input_len=32))

    @pytest.mark.parametrize("mutate", [
        lambda raw: raw[:-3],
        lambda raw: raw + b'\x00',
        lambda raw: b'NOPE' + raw[4:],
        lambda raw: raw[:4] + struct.pack('<I', 9) + raw[8:],
    ])
    def test_corrupt(self, state, tmp_path, mutate):
        path = tmp_path / 'x.ckpt'
        save_checkpoint(path, state)
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / 'absent.ckpt')
