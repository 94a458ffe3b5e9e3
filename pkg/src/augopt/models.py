"""Network definitions, weight initialization, and checkpoint serialization.

Four small networks share one convolutional vocabulary (3x3 convs, stride 1,
padding 1, ReLU, 2x2 max-pool, global average pooling):

  Encoder          - feature extractor, two convs per block, doubling widths
  ProjectionHead   - two dense layers mapping features to the contrastive
                     embedding space
  LinearClassifier - one dense layer plus sigmoid, emits P(label = 1)
  TransformNet     - one conv per block, then a dense layer and a sigmoid,
                     emits a [B, 7] matrix of augmentation strengths in (0, 1)

Widths and depths are constructor arguments so tests can build reduced
variants; the defaults match the experiment configuration.

Checkpoints are a flat binary table: magic "AUGD", version 1, entry count,
then per entry a length-prefixed UTF-8 name, rank, dims, and float64 payload
in row-major order, all integers little-endian u32.  Optimizer moments are
stored as extra entries named <param>.m and <param>.v, and the shared Adam
step counter as "optimizer.step"; loading back into a matching set of
networks is bit-exact.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d, dense, global_avg_pool, max_pool2

__all__ = [
    "ParameterStore",
    "init_weights",
    "Encoder",
    "ProjectionHead",
    "LinearClassifier",
    "TransformNet",
    "CheckpointError",
    "CheckpointIOError",
    "CheckpointFormatError",
    "CheckpointMismatchError",
    "save_checkpoint",
    "load_checkpoint",
    "restore_stores",
]


class ParameterStore:
    """Insertion-ordered mapping of names to trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())


def init_weights(store: ParameterStore, rng) -> None:
    """He-uniform fill for weights, zeros for biases, in insertion order.

    Bound is sqrt(6 / fan_in); fan_in is input channels times kernel area
    for convs and the input width for dense layers.
    """
    for name, t in store.items():
        if t.data.ndim >= 2:
            fan_in = int(np.prod(t.data.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            t.data = rng.uniform(-bound, bound, t.data.shape, dtype=t.data.dtype).data
        else:
            t.data = np.zeros_like(t.data)


class Encoder:
    """Feature extractor: per block two 3x3 convs (stride 1, pad 1) with
    ReLU and a 2x2 max-pool, then global average pooling to [B, widths[-1]].

    Spatial size must be divisible by 2 ** len(widths).
    """

    def __init__(self, in_channels: int = 1, widths=(16, 32, 64, 128), dtype=np.float64):
        self.widths = tuple(widths)
        self.store = ParameterStore()
        prev = in_channels
        for i, w in enumerate(self.widths, 1):
            self.store.add(f"block{i}.conv1.w", np.zeros((w, prev, 3, 3), dtype=dtype))
            self.store.add(f"block{i}.conv1.b", np.zeros(w, dtype=dtype))
            self.store.add(f"block{i}.conv2.w", np.zeros((w, w, 3, 3), dtype=dtype))
            self.store.add(f"block{i}.conv2.b", np.zeros(w, dtype=dtype))
            prev = w

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        H = x.data.shape[2]
        need = 2 ** len(self.widths)
        if H % need != 0:
            raise ValueError(f"spatial size {H} not divisible by {need}")
        out = x
        for i in range(1, len(self.widths) + 1):
            out = conv2d(out, self.store[f"block{i}.conv1.w"], self.store[f"block{i}.conv1.b"], padding=1).relu()
            out = conv2d(out, self.store[f"block{i}.conv2.w"], self.store[f"block{i}.conv2.b"], padding=1).relu()
            out = max_pool2(out)
        return global_avg_pool(out)


class ProjectionHead:
    """Two dense layers with a ReLU between, mapping features to embeddings."""

    def __init__(self, in_dim: int = 128, hidden: int = 128, out_dim: int = 64, dtype=np.float64):
        self.store = ParameterStore()
        self.store.add("fc1.w", np.zeros((hidden, in_dim), dtype=dtype))
        self.store.add("fc1.b", np.zeros(hidden, dtype=dtype))
        self.store.add("fc2.w", np.zeros((out_dim, hidden), dtype=dtype))
        self.store.add("fc2.b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        h = dense(x, self.store["fc1.w"], self.store["fc1.b"]).relu()
        return dense(h, self.store["fc2.w"], self.store["fc2.b"])


class LinearClassifier:
    """One dense layer plus sigmoid; returns [B] probabilities."""

    def __init__(self, in_dim: int = 128, dtype=np.float64):
        self.store = ParameterStore()
        self.store.add("fc.w", np.zeros((1, in_dim), dtype=dtype))
        self.store.add("fc.b", np.zeros(1, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out = dense(x, self.store["fc.w"], self.store["fc.b"])
        return out.reshape(out.data.shape[0]).sigmoid()


class TransformNet:
    """Augmentation-strength network: one 3x3 conv (stride 1, pad 1) with
    ReLU and 2x2 max-pool per block, global average pooling, one dense layer,
    sigmoid.  With all-zero weights every output is exactly 0.5.

    Spatial size must be divisible by 2 ** len(widths).
    """

    def __init__(self, in_channels: int = 1, widths=(8, 16), n_out: int = 7, dtype=np.float64):
        self.widths = tuple(widths)
        self.n_out = n_out
        self.store = ParameterStore()
        prev = in_channels
        for i, w in enumerate(self.widths, 1):
            self.store.add(f"block{i}.conv.w", np.zeros((w, prev, 3, 3), dtype=dtype))
            self.store.add(f"block{i}.conv.b", np.zeros(w, dtype=dtype))
            prev = w
        self.store.add("head.w", np.zeros((n_out, prev), dtype=dtype))
        self.store.add("head.b", np.zeros(n_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        H = x.data.shape[2]
        need = 2 ** len(self.widths)
        if H % need != 0:
            raise ValueError(f"spatial size {H} not divisible by {need}")
        out = x
        for i in range(1, len(self.widths) + 1):
            out = conv2d(out, self.store[f"block{i}.conv.w"], self.store[f"block{i}.conv.b"], padding=1).relu()
            out = max_pool2(out)
        out = global_avg_pool(out)
        return dense(out, self.store["head.w"], self.store["head.b"]).sigmoid()


# -- checkpoint i/o -----------------------------------------------------------

_MAGIC = b"AUGD"
_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointIOError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


def _u32(n: int) -> bytes:
    return int(n).to_bytes(4, "little")


def save_checkpoint(path, stores: dict[str, ParameterStore],
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write all parameters (prefixed by their store name) and any extra
    arrays (optimizer moments, step counter) as float64 entries."""
    entries: list[tuple[str, np.ndarray]] = []
    for prefix, store in stores.items():
        for name, t in store.items():
            entries.append((f"{prefix}.{name}", t.data))
    for name, arr in (extra or {}).items():
        entries.append((name, np.asarray(arr)))

    blob = bytearray()
    blob += _MAGIC
    blob += _u32(_VERSION)
    blob += _u32(len(entries))
    for name, arr in entries:
        nm = name.encode("utf-8")
        blob += _u32(len(nm)) + nm
        blob += _u32(arr.ndim)
        for d in arr.shape:
            blob += _u32(d)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(blob)
    except OSError as e:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> float64 array mapping."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {e}") from e

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint {path} at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return int.from_bytes(take(4), "little")

    if take(4) != _MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version = u32()
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} in {path}")
    count = u32()
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(n * 8), dtype="<f8").reshape(shape).copy()
        if name in entries:
            raise CheckpointFormatError(f"duplicate entry {name!r} in {path}")
        entries[name] = arr
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes in {path}")
    return entries


def restore_stores(entries: dict[str, np.ndarray], stores: dict[str, ParameterStore]) -> dict[str, np.ndarray]:
    """Assign checkpoint entries into stores (cast to each store's dtype);
    returns the leftover entries (optimizer state and counters)."""
    used = set()
    for prefix, store in stores.items():
        for name, t in store.items():
            full = f"{prefix}.{name}"
            if full not in entries:
                raise CheckpointMismatchError(f"checkpoint is missing tensor {full!r}")
            arr = entries[full]
            if arr.shape != t.data.shape:
                raise CheckpointMismatchError(
                    f"tensor {full!r} has shape {arr.shape}, expected {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
            used.add(full)
    return {k: v for k, v in entries.items() if k not in used}
