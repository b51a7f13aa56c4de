"""CUSW0001 weight export for the inference engine.

Container: magic "CUSW0001", record_count u32, grid_h u32, grid_w u32, then
per tensor record (fixed topological order): name_len u16 + utf-8 name,
dtype u8 (0 = f32), ndim u8, dims u32 each, row-major little-endian data.
Dropout carries no state and is not exported. Written independently from the
engine against the documented format.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from cusense_trainer.model import GridLocalizer

MAGIC = b"CUSW0001"

# (record name, torch module path within GridLocalizer, attribute)
_BN_FIELDS = (("gamma", "weight"), ("beta", "bias"),
              ("running_mean", "running_mean"), ("running_var", "running_var"))


def _ordered_tensors(model: GridLocalizer) -> list[tuple[str, torch.Tensor]]:
    def conv_bn(prefix: str, conv: torch.nn.Conv1d, bn: torch.nn.BatchNorm1d):
        conv_name, bn_name = prefix
        yield f"{conv_name}.weight", conv.weight
        yield f"{conv_name}.bias", conv.bias
        for rec, attr in _BN_FIELDS:
            yield f"{bn_name}.{rec}", getattr(bn, attr)

    out: list[tuple[str, torch.Tensor]] = []
    out += conv_bn(("conv0", "bn0"), model.stem[0], model.stem[1])
    for b, block in ((1, model.block1), (2, model.block2), (3, model.block3)):
        out += conv_bn((f"block{b}.conv1", f"block{b}.bn1"), block[0], block[1])
        out += conv_bn((f"block{b}.conv2", f"block{b}.bn2"), block[3], block[4])
    for name, layer in (("fc1", model.head[0]), ("fc2", model.head[3]),
                        ("fc3", model.head[6])):
        out.append((f"{name}.weight", layer.weight))
        out.append((f"{name}.bias", layer.bias))
    return out


def save_weights(model: GridLocalizer, path) -> None:
    records = _ordered_tensors(model)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", len(records), model.grid_h, model.grid_w))
        for name, tensor in records:
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_weights(path) -> tuple[tuple[int, int], dict[str, np.ndarray]]:
    """Parse a CUSW0001 file back; used for round-trip checks."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    count, grid_h, grid_w = struct.unpack_from("<III", data, 8)
    pos = 20
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dtype_id, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype_id != 0:
            raise ValueError(f"record {name!r}: expected f32 records")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) * 4
        out[name] = np.frombuffer(data[pos:pos + n], dtype="<f4").reshape(dims).copy()
        pos += n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return (grid_h, grid_w), out


def load_into_model(path, in_channels: int = 4) -> GridLocalizer:
    (grid_h, grid_w), records = read_weights(path)
    model = GridLocalizer(in_channels, grid_h, grid_w)
    expected = _ordered_tensors(model)
    if len(records) != len(expected):
        raise ValueError(f"{path}: {len(records)} records, expected {len(expected)}")
    with torch.no_grad():
        for name, tensor in expected:
            if name not in records:
                raise ValueError(f"{path}: missing record {name!r}")
            arr = records[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ValueError(f"record {name!r}: dims {arr.shape} vs model "
                                 f"{tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(arr))
    return model
