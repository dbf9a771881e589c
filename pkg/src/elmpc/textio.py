"""Plain-text matrix container used for model and QP dumps.

File layout (UTF-8, one record per line)::

    # <magic>
    scalar <name> <value>
    matrix <name> <rows> <cols>
    <row 0 values, space separated>
    ...
    vector <name> <length>
    <values, space separated, single line>

Floats are written with ``repr`` which round-trips IEEE doubles exactly, so a
load after a save reproduces every array bit-for-bit. Matrices are row-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_blocks(path, magic: str, scalars: dict, arrays: dict) -> None:
    lines = [f"# {magic}"]
    for name, value in scalars.items():
        lines.append(f"scalar {name} {value!r}")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            lines.append(f"vector {name} {arr.size}")
            lines.append(_fmt(arr))
        elif arr.ndim == 2:
            lines.append(f"matrix {name} {arr.shape[0]} {arr.shape[1]}")
            lines.extend(_fmt(row) for row in arr)
        else:
            raise ValueError(f"{name}: only 1-D and 2-D arrays are supported")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("True", "False"):
        return text == "True"
    return text.strip("'\"")


def read_blocks(path, magic: str) -> tuple[dict, dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"# {magic}":
        raise ValueError(f"{path}: expected header '# {magic}'")
    scalars: dict = {}
    arrays: dict = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        kind, name, *rest = line.split()
        if kind == "scalar":
            scalars[name] = _parse_scalar(" ".join(rest))
        elif kind == "vector":
            n = int(rest[0])
            vals = lines[i].split() if n else []
            i += 1
            if len(vals) != n:
                raise ValueError(f"{path}: vector {name} has {len(vals)} values, expected {n}")
            arrays[name] = np.array([float(v) for v in vals], dtype=float)
        elif kind == "matrix":
            r, c = int(rest[0]), int(rest[1])
            rows = [[float(v) for v in lines[i + k].split()] for k in range(r)]
            i += r
            arr = np.array(rows, dtype=float).reshape(r, c)
            arrays[name] = arr
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    return scalars, arrays
