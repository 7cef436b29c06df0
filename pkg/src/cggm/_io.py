"""Deterministic JSON output with 17 significant digits for floats."""

from __future__ import annotations

import json
import math

import numpy as np


def _emit(obj, indent, level, out):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," if indent else ", "
    if isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        out.append("%.17g" % x if math.isfinite(x) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                out.append(sep)
            out.append(pad + json.dumps(str(key)) + ": ")
            _emit(val, indent, level + 1, out)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if len(seq) == 0:
            out.append("[]")
            return
        out.append("[")
        for i, val in enumerate(seq):
            if i:
                out.append(sep)
            out.append(pad)
            _emit(val, indent, level + 1, out)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    out: list[str] = []
    _emit(obj, indent, 0, out)
    return "".join(out) + "\n"


def dump(obj, path, indent: int = 1) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj, indent))


def load(path):
    with open(path) as fh:
        return json.load(fh)
