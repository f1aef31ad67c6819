"""Versioned flat-text model files.

Layout::

    flowclass-model 1 kind=<kind> key=value ...
    tensor <name> <dtype> <dim0> <dim1> ...
    <whitespace-separated values>
    ...

Floats are written with 17 significant digits, which round-trips float64
exactly.  Header values must not contain whitespace.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "flowclass-model"
FORMAT_VERSION = 1
_DTYPES = {"float64": np.float64, "int64": np.int64}


class ModelFormatError(ValueError):
    pass


def _fmt_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return "x".join(str(int(a)) for a in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    text = str(v)
    if not text or any(c.isspace() for c in text):
        raise ModelFormatError(f"header value {v!r} is empty or contains whitespace")
    return text


def dumps(kind: str, header: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> str:
    lines = [" ".join([MAGIC, str(FORMAT_VERSION), f"kind={kind}"]
                      + [f"{k}={_fmt_value(v)}" for k, v in header.items()])]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            dtype, body = "int64", " ".join(str(int(v)) for v in arr.ravel())
        else:
            arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"tensor {name} holds non-finite values")
            dtype, body = "float64", " ".join(format(v, ".17g") for v in arr.ravel().tolist())
        lines.append(" ".join(["tensor", name, dtype] + [str(d) for d in arr.shape]))
        lines.append(body)
    return "\n".join(lines) + "\n"


def loads(text: str) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    lines = text.splitlines()
    if not lines:
        raise ModelFormatError("empty model file")
    head = lines[0].split()
    if len(head) < 3 or head[0] != MAGIC:
        raise ModelFormatError("not a flowclass model file")
    if int(head[1]) != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {head[1]}")
    header = dict(tok.split("=", 1) for tok in head[2:])
    kind = header.pop("kind")
    tensors = {}
    k = 1
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        parts = lines[k].split()
        if parts[0] != "tensor" or len(parts) < 3 or parts[2] not in _DTYPES:
            raise ModelFormatError(f"line {k + 1}: expected a tensor block header")
        name, dtype = parts[1], _DTYPES[parts[2]]
        shape = tuple(int(d) for d in parts[3:])
        body = lines[k + 1] if k + 1 < len(lines) else ""
        values = np.array(body.split(), dtype=np.float64 if dtype is np.float64 else np.int64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ModelFormatError(f"tensor {name}: {values.size} values for shape {shape}")
        tensors[name] = values.reshape(shape)
        k += 2
    return kind, header, tensors


def save(path: str | Path, kind: str, header: Mapping[str, object],
         tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(kind, header, tensors))


def load(path: str | Path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    return loads(Path(path).read_text())


def parse_pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("*", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"expected an AxB pair, got {text!r}")
    return int(parts[0]), int(parts[1])
