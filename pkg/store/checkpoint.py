import logging
import struct
from pathlib import Path

import numpy as np

from modules.errors import DataError
from modules.nn import Module

logger = logging.getLogger("kavi.store")

MAGIC = b'KAVI'
VERSION = 1


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]):
    '''Header (magic, version, tensor count), then per tensor: name length, utf-8 name,
    rank, dims, raw little-endian float64 values. Integers are little-endian u32,
    dims u64.'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<II', VERSION, len(state)))
        for name, value in state.items():
            arr = np.ascontiguousarray(value, dtype='<f8')
            encoded = name.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<I', arr.ndim))
            f.write(struct.pack(f'<{arr.ndim}Q', *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror}") from None
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise DataError(f"checkpoint {path} is truncated")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    if take(4) != MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    version, count = struct.unpack('<II', take(8))
    if version != VERSION:
        raise DataError(f"checkpoint version {version} not supported (expected {VERSION})")
    state = {}
    for _ in range(count):
        name_len, = struct.unpack('<I', take(4))
        name = take(name_len).decode('utf-8')
        rank, = struct.unpack('<I', take(4))
        shape = struct.unpack(f'<{rank}Q', take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * size), dtype='<f8').reshape(shape).astype(np.float64)
    if offset != len(buf):
        raise DataError(f"checkpoint {path} has {len(buf) - offset} trailing bytes")
    return state


def save_model(path: str | Path, model: Module):
    save_checkpoint(path, model.state_dict())
    logger.debug("saved %s (%d tensors) to %s", type(model).__name__, len(model.state_dict()), path)


def load_model(path: str | Path, model: Module) -> Module:
    model.load_state_dict(load_checkpoint(path))
    return model
