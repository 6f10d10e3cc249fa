"""Named-tensor checkpoints and their binary container.

Container layout (little-endian)::

    [u64 header length][UTF-8 JSON header][row-major f32 payload]

The header maps every tensor name to ``{"dtype": "f32", "shape": [...],
"offset_begin": b, "offset_end": e}`` (offsets relative to the payload start)
and carries a ``"__meta__"`` string map. Tensors are laid out in lexicographic
name order, so saving the same checkpoint twice yields identical bytes.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from pathlib import Path

import numpy as np

META_KEY = "__meta__"


class CheckpointError(ValueError):
    """Raised for malformed checkpoints or container files."""


class IncompatibleCheckpoints(CheckpointError):
    """Raised when checkpoints differ in tensor names or shapes."""


def _as_tensor(name: str, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim not in (1, 2):
        raise CheckpointError(f"tensor {name!r}: rank must be 1 or 2, got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise CheckpointError(f"tensor {name!r}: dimensions must be positive, got {list(arr.shape)}")
    out = np.array(arr, dtype=np.float32, order="C")
    if not np.isfinite(out).all():
        raise CheckpointError(f"tensor {name!r}: contains non-finite values")
    out.setflags(write=False)
    return out


class Checkpoint(Mapping):
    """Immutable ordered map of tensor name -> float32 array (rank 1 or 2).

    ``entries`` may be a mapping or an iterable of ``(name, array)`` pairs; a
    repeated name in the pair form is rejected. Iteration is lexicographic.
    """

    def __init__(self, entries: Mapping | Iterable | None = None, meta: Mapping[str, str] | None = None):
        items = entries.items() if isinstance(entries, Mapping) else (entries or [])
        tensors: dict[str, np.ndarray] = {}
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"tensor names must be non-empty strings, got {name!r}")
            if name == META_KEY:
                raise CheckpointError(f"{META_KEY!r} is reserved")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = _as_tensor(name, value)
        self._tensors = {k: tensors[k] for k in sorted(tensors)}
        self.meta = {str(k): str(v) for k, v in sorted((meta or {}).items())}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{list(v.shape)}" for k, v in self._tensors.items())
        return f"Checkpoint({shapes})"

    def __eq__(self, other) -> bool:
        """Bit-exact equality of names, shapes, values and metadata."""
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self) != list(other) or self.meta != other.meta:
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    __hash__ = None

    def same_tensors(self, other: Checkpoint) -> bool:
        """Bit-exact equality ignoring metadata."""
        return Checkpoint(self) == Checkpoint(other)

    def with_meta(self, **extra: str) -> Checkpoint:
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in extra.items()})
        return Checkpoint(self._tensors, meta)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._tensors.items()}

    def to_float64(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self._tensors.items()}

    @classmethod
    def zeros_like(cls, other: Checkpoint) -> Checkpoint:
        return cls({k: np.zeros(v.shape, dtype=np.float32) for k, v in other.items()})


def assert_compatible(ckpts: list[Checkpoint]) -> None:
    """Raise unless every checkpoint shares the first one's names and shapes."""
    if not ckpts:
        raise CheckpointError("assert_compatible needs at least one checkpoint")
    ref = ckpts[0]
    ref_names = set(ref)
    for i, other in enumerate(ckpts[1:], start=1):
        names = set(other)
        if names != ref_names:
            first = sorted(names ^ ref_names)[0]
            raise IncompatibleCheckpoints(f"name-set mismatch between checkpoint 0 and {i}: {first!r}")
        for name in ref:
            if ref[name].shape != other[name].shape:
                raise IncompatibleCheckpoints(
                    f"shape mismatch on {name!r}: {list(ref[name].shape)} vs {list(other[name].shape)}"
                )


def axpy_scale(dst: Checkpoint, src: Checkpoint, a: float) -> Checkpoint:
    """Return ``dst + a * src`` per element (accumulated in float64)."""
    assert_compatible([dst, src])
    a = float(a)
    out = {}
    for k in dst:
        d = dst[k].astype(np.float64)
        term = a * src[k].astype(np.float64)
        # a zero term leaves the entry untouched, so -0.0 survives bit-exact
        out[k] = np.where(term == 0.0, d, d + term)
    return Checkpoint(out, dst.meta)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header: dict = {META_KEY: dict(ckpt.meta)}
    chunks = []
    offset = 0
    for name, arr in ckpt.items():
        if not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r}: contains non-finite values")
        raw = arr.astype("<f4").tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset_begin": offset,
            "offset_end": offset + len(raw),
        }
        offset += len(raw)
        chunks.append(raw)
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise CheckpointError("file too short for header length prefix")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise CheckpointError(f"header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: not a JSON object")
    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise CheckpointError("malformed header: __meta__ must be a string map")
    payload = memoryview(data)[8 + hlen :]
    entries = []
    for name, info in header.items():
        try:
            dtype, shape = info["dtype"], info["shape"]
            begin, end = int(info["offset_begin"]), int(info["offset_end"])
        except (TypeError, KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed header entry for {name!r}") from exc
        if dtype != "f32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if not isinstance(shape, list) or not 1 <= len(shape) <= 2 or not all(
            isinstance(d, int) and d > 0 for d in shape
        ):
            raise CheckpointError(f"tensor {name!r}: invalid shape {shape!r}")
        expected = math.prod(shape) * 4
        if end - begin != expected or begin < 0:
            raise CheckpointError(
                f"tensor {name!r}: length mismatch, shape {shape} needs {expected} bytes, header declares {end - begin}"
            )
        if end > len(payload):
            raise CheckpointError(f"tensor {name!r}: truncated payload ({len(payload)} bytes, needs {end})")
        arr = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r}: NaN or infinite values in payload")
        entries.append((name, arr))
    return Checkpoint(entries, meta)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise CheckpointError(f"parent directory does not exist: {path.parent}")
    path.write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
