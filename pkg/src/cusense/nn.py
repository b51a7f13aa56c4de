"""Forward-pass engine for the localization network, with a portable weight file.

Topology (fixed): Conv1d(A->64, k=7, s=1, p=3) + BN + ReLU + MaxPool(2,2),
three plain conv blocks with channel ladder 64->128->256->512 (first conv of
each block k=3 s=2 p=1, second k=3 s=1 p=1, BN+ReLU after each), adaptive
average pooling to one tap, then Linear(512->512)+ReLU, Linear(512->256)+ReLU,
Linear(256->H*W), softmax. Dropout is identity at inference and carries no
state in the weight file.

Inference runs in single precision; softmax accumulates in double. Layer
output lengths follow l_out = (l + 2p - k) // s + 1; variable-length inputs
are legal as long as no stage collapses to zero length.

Weight file ("CUSW0001"): header magic 8s, record_count u32, grid_h u32,
grid_w u32; then per tensor record, in the fixed topological order below:
name_len u16 + name utf-8, dtype u8 (0 = f32), ndim u8, dims u32 each,
row-major little-endian data. Loading rejects any record whose name or dims
disagree with the declared architecture, naming the offender.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

WEIGHT_MAGIC = b"CUSW0001"
BN_EPS = 1e-5
CHANNEL_LADDER = (64, 128, 256, 512)
DEFAULT_GRID = (32, 32)
MIN_INPUT_LEN = 16

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<c8"),
    3: np.dtype("<c16"),
    4: np.dtype("<i8"),
}
_DTYPE_IDS = {v: k for k, v in _DTYPES.items()}


class NNError(Exception):
    pass


class WeightFileError(NNError):
    pass


def write_tensor_records(path, magic: bytes, extras: tuple[int, int],
                         records: list[tuple[str, np.ndarray]]) -> None:
    """Container shared by weight and background files: magic 8s,
    record_count u32, two u32 header extras, then named tensor records."""
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", len(records), extras[0], extras[1]))
        for name, arr in records:
            arr = np.ascontiguousarray(arr)
            dtype_id = _DTYPE_IDS.get(arr.dtype.newbyteorder("<"))
            if dtype_id is None:
                raise WeightFileError(f"record {name!r}: unsupported dtype {arr.dtype}")
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw_name)) + raw_name)
            f.write(struct.pack("<BB", dtype_id, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_tensor_records(path, magic: bytes) -> tuple[tuple[int, int],
                                                     list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != magic:
        raise WeightFileError(f"{path}: bad magic {data[:8]!r}")
    pos = 8
    try:
        count, extra0, extra1 = struct.unpack_from("<III", data, pos)
        pos += 12
        records = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            try:
                name = data[pos:pos + name_len].decode("utf-8")
            except UnicodeDecodeError:
                raise WeightFileError(f"{path}: corrupt record name at offset {pos}") from None
            pos += name_len
            dtype_id, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype_id not in _DTYPES:
                raise WeightFileError(f"record {name!r}: unknown dtype id {dtype_id}")
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = _DTYPES[dtype_id]
            nbytes = int(np.prod(dims)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise WeightFileError(f"record {name!r}: file truncated")
            records.append((name, np.frombuffer(data[pos:pos + nbytes],
                                                dtype=dtype).reshape(dims).copy()))
            pos += nbytes
    except struct.error:
        raise WeightFileError(f"{path}: file truncated") from None
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    return (extra0, extra1), records


# -- layer kernels -------------------------------------------------------------

def l_out(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """[C_in, L] -> [C_out, L_out] cross-correlation via an im2col matmul."""
    c_in, length = x.shape
    c_out, w_cin, k = weight.shape
    if w_cin != c_in:
        raise NNError(f"conv1d channel mismatch: input {c_in}, weight {w_cin}")
    n_out = l_out(length, k, stride, pad)
    if n_out < 1:
        raise NNError(f"conv1d output collapsed: L={length}, k={k}, s={stride}, p={pad}")
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)[:, ::stride, :]
    cols = windows.transpose(1, 0, 2).reshape(n_out, c_in * k)  # [L_out, C_in*k]
    out = cols @ weight.reshape(c_out, c_in * k).T + bias
    return np.ascontiguousarray(out.T, dtype=np.float32)


def batchnorm_inference(x: np.ndarray, gamma, beta, running_mean, running_var,
                        eps: float = BN_EPS) -> np.ndarray:
    scale = (gamma / np.sqrt(running_var + eps)).astype(np.float32)
    shift = (beta - running_mean * scale).astype(np.float32)
    return x * scale[:, None] + shift[:, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool1d(x: np.ndarray, kernel: int = 2, stride: int = 2) -> np.ndarray:
    c, length = x.shape
    n_out = l_out(length, kernel, stride, 0)
    if n_out < 1:
        raise NNError(f"maxpool1d output collapsed: L={length}, k={kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)[:, ::stride, :]
    return windows.max(axis=2)


def adaptive_avg_pool(x: np.ndarray) -> np.ndarray:
    """Global average over the length axis: [C, L] -> [C]."""
    return x.mean(axis=1, dtype=np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weight.shape[1] != x.shape[0]:
        raise NNError(f"linear dim mismatch: input {x.shape[0]}, weight {weight.shape}")
    return (weight @ x + bias).astype(np.float32)


def softmax(v: np.ndarray) -> np.ndarray:
    shifted = v.astype(np.float64) - float(v.max())
    exps = np.exp(shifted)
    return (exps / exps.sum()).astype(np.float32)


def argmax_location(grid: np.ndarray) -> tuple[int, int]:
    """Grid cell of highest probability; ties break to lowest i, then lowest j."""
    i, j = np.unravel_index(int(np.argmax(grid)), grid.shape)
    return int(i), int(j)


# -- architecture -----------------------------------------------------------------

def parameter_specs(in_channels: int, grid_h: int, grid_w: int) -> list[tuple[str, tuple[int, ...]]]:
    """(name, dims) for every tensor, in weight-file order."""
    specs: list[tuple[str, tuple[int, ...]]] = []

    def conv_bn(prefix: str, cin: int, cout: int, k: int) -> None:
        conv, bn = prefix
        specs.append((f"{conv}.weight", (cout, cin, k)))
        specs.append((f"{conv}.bias", (cout,)))
        for p in ("gamma", "beta", "running_mean", "running_var"):
            specs.append((f"{bn}.{p}", (cout,)))

    conv_bn(("conv0", "bn0"), in_channels, CHANNEL_LADDER[0], 7)
    for b in (1, 2, 3):
        cin, cout = CHANNEL_LADDER[b - 1], CHANNEL_LADDER[b]
        conv_bn((f"block{b}.conv1", f"block{b}.bn1"), cin, cout, 3)
        conv_bn((f"block{b}.conv2", f"block{b}.bn2"), cout, cout, 3)
    top = CHANNEL_LADDER[-1]
    specs.append(("fc1.weight", (top, top)))
    specs.append(("fc1.bias", (top,)))
    specs.append(("fc2.weight", (top // 2, top)))
    specs.append(("fc2.bias", (top // 2,)))
    specs.append(("fc3.weight", (grid_h * grid_w, top // 2)))
    specs.append(("fc3.bias", (grid_h * grid_w,)))
    return specs


@dataclass
class ModelGraph:
    """Immutable parameter set for the fixed topology; shareable across threads."""

    in_channels: int
    grid_h: int
    grid_w: int
    params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        for name, dims in parameter_specs(self.in_channels, self.grid_h, self.grid_w):
            if name not in self.params:
                raise NNError(f"missing parameter {name!r}")
            got = self.params[name].shape
            if tuple(got) != dims:
                raise NNError(f"parameter {name!r} has dims {tuple(got)}, expected {dims}")

    def p(self, name: str) -> np.ndarray:
        return self.params[name]

    def _bn(self, x: np.ndarray, prefix: str) -> np.ndarray:
        return batchnorm_inference(x, self.p(f"{prefix}.gamma"), self.p(f"{prefix}.beta"),
                                   self.p(f"{prefix}.running_mean"),
                                   self.p(f"{prefix}.running_var"))

    def forward(self, x: np.ndarray, trace: list[tuple[str, int]] | None = None) -> np.ndarray:
        """[A, K_v] features -> [H, W] probability grid (nonnegative, sums to 1)."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] != self.in_channels:
            raise NNError(f"input must be [{self.in_channels}, K_v], got {x.shape}")
        if x.shape[1] < MIN_INPUT_LEN:
            raise NNError(f"input length {x.shape[1]} below minimum {MIN_INPUT_LEN}")

        def note(tag: str, arr: np.ndarray) -> np.ndarray:
            if trace is not None:
                trace.append((tag, arr.shape[-1] if arr.ndim == 2 else 1))
            return arr

        h = note("conv0", conv1d(x, self.p("conv0.weight"), self.p("conv0.bias"),
                                 stride=1, pad=3))
        h = relu(self._bn(h, "bn0"))
        h = note("pool0", maxpool1d(h, 2, 2))
        for b in (1, 2, 3):
            h = note(f"block{b}.conv1",
                     conv1d(h, self.p(f"block{b}.conv1.weight"),
                            self.p(f"block{b}.conv1.bias"), stride=2, pad=1))
            h = relu(self._bn(h, f"block{b}.bn1"))
            h = note(f"block{b}.conv2",
                     conv1d(h, self.p(f"block{b}.conv2.weight"),
                            self.p(f"block{b}.conv2.bias"), stride=1, pad=1))
            h = relu(self._bn(h, f"block{b}.bn2"))
        v = adaptive_avg_pool(h)
        v = relu(linear(v, self.p("fc1.weight"), self.p("fc1.bias")))
        v = relu(linear(v, self.p("fc2.weight"), self.p("fc2.bias")))
        logits = linear(v, self.p("fc3.weight"), self.p("fc3.bias"))
        return softmax(logits).reshape(self.grid_h, self.grid_w)


def expected_lengths(k_v: int) -> list[tuple[str, int]]:
    """The l_out chain for an input of K_v bins, layer by layer."""
    chain = [("conv0", l_out(k_v, 7, 1, 3))]
    chain.append(("pool0", l_out(chain[-1][1], 2, 2, 0)))
    for b in (1, 2, 3):
        chain.append((f"block{b}.conv1", l_out(chain[-1][1], 3, 2, 1)))
        chain.append((f"block{b}.conv2", l_out(chain[-1][1], 3, 1, 1)))
    return chain


def random_model(seed: int = 0, in_channels: int = 4,
                 grid_h: int = DEFAULT_GRID[0], grid_w: int = DEFAULT_GRID[1]) -> ModelGraph:
    """Fan-in-scaled random weights with identity batchnorm statistics."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, dims in parameter_specs(in_channels, grid_h, grid_w):
        if name.endswith(".weight") and len(dims) > 1:
            fan_in = int(np.prod(dims[1:]))
            params[name] = (rng.standard_normal(dims) / np.sqrt(fan_in)).astype(np.float32)
        elif name.endswith(".running_var") or name.endswith(".gamma"):
            params[name] = np.ones(dims, dtype=np.float32)
        else:  # biases, beta, running_mean
            params[name] = np.zeros(dims, dtype=np.float32)
    return ModelGraph(in_channels, grid_h, grid_w, params)


# -- weight file -------------------------------------------------------------------

def save_weights(model: ModelGraph, path) -> None:
    specs = parameter_specs(model.in_channels, model.grid_h, model.grid_w)
    records = [(name, np.ascontiguousarray(model.params[name], dtype="<f4"))
               for name, _dims in specs]
    write_tensor_records(path, WEIGHT_MAGIC, (model.grid_h, model.grid_w), records)


def load_weights(path, in_channels: int = 4) -> ModelGraph:
    (grid_h, grid_w), records = read_tensor_records(path, WEIGHT_MAGIC)
    specs = parameter_specs(in_channels, grid_h, grid_w)
    if len(records) != len(specs):
        raise WeightFileError(f"{path}: {len(records)} records, expected {len(specs)}")
    params: dict[str, np.ndarray] = {}
    for (name, arr), (expect_name, expect_dims) in zip(records, specs):
        if name != expect_name:
            raise WeightFileError(f"record {name!r} out of order, expected {expect_name!r}")
        if arr.dtype != np.float32:
            raise WeightFileError(f"record {name!r}: weights must be f32, got {arr.dtype}")
        if arr.shape != expect_dims:
            raise WeightFileError(
                f"record {name!r} has dims {arr.shape}, expected {expect_dims}")
        params[name] = arr
    return ModelGraph(in_channels, grid_h, grid_w, params)
