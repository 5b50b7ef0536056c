"""Named-tensor store: feed/fetch, the shared discard sink, memory accounting.

Every tensor lives in exactly one workspace under a unique name and can be
fed or fetched by any graph, operator or frontend call. Writes to the
reserved name "ignore" land in one shared sink that grows to the largest
value ever written and is never read back.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .graph import IGNORE, check_name

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODE = {"f32": 0, "f64": 1}
_CODE_DTYPE = {0: "f32", 1: "f64"}


class ExecError(Exception):
    """Runtime failure: missing feed, unknown tensor, shape or dtype conflict."""


def dtype_name(arr) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ExecError(f"unsupported dtype {arr.dtype}")


@dataclass
class Tensor:
    """Runtime value: name, shape, element type and a row-major data buffer."""

    name: str
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray

    @property
    def nbytes(self):
        return self.data.nbytes


class Workspace:
    """Owner of all named tensors and compiled graphs (single-writer).

    ``seed`` is the base key of the counter-based RNG; per-op seed arguments
    offset it (see ExecContext.rng).
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.graphs: dict = {}
        self._tensors: dict[str, Tensor] = {}
        self._ignore_capacity = 0

    def has(self, name: str) -> bool:
        return name in self._tensors

    def feed(self, name: str, values, shape=None, dtype: str | None = None):
        """Create or overwrite a tensor. Existing consumers see the new data."""
        check_name(name)
        if name == IGNORE:
            raise ExecError(f"cannot feed the reserved sink '{IGNORE}'")
        if dtype is not None and dtype not in DTYPES:
            raise ExecError(f"unknown dtype '{dtype}'")
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(DTYPES[dtype])
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            n = 1
            for d in shape:
                n *= d
            if arr.size != n:
                raise ExecError(
                    f"feed '{name}': {arr.size} values do not fill shape {list(shape)}")
            arr = arr.reshape(shape)
        self.set_array(name, arr)

    def set_array(self, name: str, arr: np.ndarray):
        """Bind name to arr; writes to the sink only grow its capacity."""
        if name == IGNORE:
            self._ignore_capacity = max(self._ignore_capacity, arr.nbytes)
            return
        if not arr.flags["C_CONTIGUOUS"]:
            # np.ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(arr, order="C")
        self._tensors[name] = Tensor(name, arr.shape, dtype_name(arr), arr)

    def get(self, name: str) -> np.ndarray:
        """Internal view of the stored array (no copy)."""
        t = self._tensors.get(name)
        if t is None:
            raise ExecError(f"unknown tensor '{name}'")
        return t.data

    def fetch(self, name: str) -> np.ndarray:
        """Deep copy of a tensor's value; caller mutation cannot leak back."""
        if name == IGNORE:
            raise ExecError(f"'{IGNORE}' holds no fetchable data")
        return self.get(name).copy()

    def tensor(self, name: str) -> Tensor:
        t = self._tensors.get(name)
        if t is None:
            raise ExecError(f"unknown tensor '{name}'")
        return t

    def reset(self, name: str | None = None):
        """Drop one tensor (or all); producing ops re-materialize it on next run."""
        if name is None:
            self._tensors.clear()
            self._ignore_capacity = 0
        else:
            self._tensors.pop(name, None)

    def names(self):
        return list(self._tensors)

    def memory_report(self) -> dict:
        """Per-tensor bytes plus total and count; the sink is counted once."""
        tensors = {name: t.nbytes for name, t in self._tensors.items()}
        if self._ignore_capacity:
            tensors[IGNORE] = self._ignore_capacity
        return {
            "tensors": tensors,
            "count": len(tensors),
            "total_bytes": sum(tensors.values()),
        }


def stash_name(anchor: str, slot: str) -> str:
    """Workspace name for an operator-stashed tensor; no anchor = global."""
    return f"{anchor}/{slot}" if anchor else slot


class ExecContext:
    """Per-op execution services: seeded RNG, anchor stash, slot bootstrap."""

    def __init__(self, ws: Workspace, op):
        self.ws = ws
        self.op = op

    def rng(self) -> np.random.Generator:
        """Fresh counter-based generator keyed on (workspace seed, op seed).

        Ops without a seed argument key on their anchor, so draws never
        depend on execution order or how often other ops ran.
        """
        seed = self.op.args.get("seed")
        if seed is None:
            seed = zlib.crc32(self.op.anchor.encode("utf-8"))
        key = (int(self.ws.seed) & 0xFFFFFFFFFFFFFFFF) * (1 << 64) + (int(seed) & 0xFFFFFFFFFFFFFFFF)
        return np.random.Generator(np.random.Philox(key=key))

    def stash(self, slot: str, value: np.ndarray):
        self.ws.set_array(stash_name(self.op.anchor, slot), value)

    def fetch_or_zeros(self, name: str, like: np.ndarray) -> np.ndarray:
        if self.ws.has(name):
            return self.ws.get(name)
        return np.zeros_like(like)


# ---------------------------------------------------------------------------
# binary tensor files
# ---------------------------------------------------------------------------

_MAGIC = b"DTEN"


def write_dten(path, values, dtype: str | None = None):
    """Write an array as a .dten file: magic, dtype code, rank, u32 LE dims, data."""
    arr = np.asarray(values)
    if dtype is None:
        dtype = dtype_name(arr) if arr.dtype in (np.float32, np.float64) else "f64"
    if dtype not in DTYPES:
        raise ExecError(f"unknown dtype '{dtype}'")
    arr = arr.astype("<f4" if dtype == "f32" else "<f8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", _DTYPE_CODE[dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_dten(path) -> np.ndarray:
    """Read a .dten file back into an array (bit-exact round trip)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ExecError(f"{path}: not a tensor file (bad magic)")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPE:
        raise ExecError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    np_dtype = "<f4" if code == 0 else "<f8"
    n = 1
    for d in dims:
        n *= d
    start = 6 + 4 * rank
    itemsize = 4 if code == 0 else 8
    if len(blob) - start != n * itemsize:
        raise ExecError(f"{path}: payload size does not match header")
    arr = np.frombuffer(blob, dtype=np_dtype, count=n, offset=start)
    return arr.reshape(dims).astype(DTYPES[_CODE_DTYPE[code]])
