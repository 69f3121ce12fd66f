"""Deterministic numerics substrate.

Tensors are ``torch.Tensor`` values; the autograd tape plays the role of the
reverse-mode gradient recorder. All randomness flows through numpy's PCG64
bit generator seeded via ``SeedSequence`` so every draw is reproducible
across platforms.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Callable

import numpy as np
import torch

RNG_ALGORITHM = "numpy.PCG64 seeded by SeedSequence(entropy=[seed, *stream])"

_DTYPES = {
    "f32": (np.float32, torch.float32),
    "f64": (np.float64, torch.float64),
    "i64": (np.int64, torch.int64),
}


class EmptyDomainError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional integer stream path.

    ``make_rng(s, i)`` and ``make_rng(s, j)`` are independent for ``i != j``.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def seeded_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` (0-based)."""
    if n <= 0:
        raise EmptyDomainError("permutation of an empty domain")
    return rng.permutation(n)


def torch_dtype(name: str) -> torch.dtype:
    return _DTYPES[name][1]


def normal(rng: np.random.Generator, shape, std: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) * std).to(dtype)


def uniform(rng: np.random.Generator, shape, low=0.0, high=1.0, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=shape)).to(dtype)


def finite_difference_gradient(
    f: Callable[[torch.Tensor], float | torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-5,
    indices=None,
) -> torch.Tensor:
    """Central-difference gradient of a scalar function.

    If ``indices`` (flat positions) is given only those entries are probed and
    the rest of the returned tensor is NaN.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.full_like(flat, float("nan") if indices is not None else 0.0)
    probe = range(flat.numel()) if indices is None else indices
    for i in probe:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value while probing element {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(x)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    denom = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / denom


# --- checkpoint container -------------------------------------------------

MANIFEST = "manifest"
BLOB = "blob.bin"


def _dtype_name(t) -> str:
    dt = t.dtype
    for name, (npd, thd) in _DTYPES.items():
        if dt == thd or dt == npd:
            return name
    raise TypeError(f"unsupported dtype {dt}")


def save_container(path, tensors: dict, meta: dict | None = None) -> Path:
    """Write ``tensors`` as a manifest + raw little-endian blob directory.

    Tensor order is the dict's insertion order. ``meta`` is any JSON-able
    mapping stored verbatim in the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, t in tensors.items():
            kind = _dtype_name(t)
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            arr = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[kind][0]).newbyteorder("<"))
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries.append(
                {"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
            )
            offset += len(raw)
    doc = {"format": "ditmoe-container/1", "tensors": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_container(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    doc = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    out = {}
    for e in doc["tensors"]:
        npd = np.dtype(_DTYPES[e["dtype"]][0]).newbyteorder("<")
        n = e["count"] * npd.itemsize
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + n], dtype=npd).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(npd.newbyteorder("="), copy=True))
    return out, doc.get("meta", {})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_hash(tensors) -> str:
    """Content hash over an iterable of (name, tensor) pairs."""
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def set_workers(n: int | None = None) -> int:
    n = n or int(os.environ.get("DITMOE_WORKERS", "1"))
    torch.set_num_threads(max(1, n))
    return n
