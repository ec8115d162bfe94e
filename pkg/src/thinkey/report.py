"""JSON report documents.

Floats are written with 17 significant digits so every value round-trips
exactly; key order is preserved. ``provenance.timestamp`` is the only field
that differs between two runs with identical inputs.
"""
from __future__ import annotations

import datetime as _dt
import json
import math
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from ._backend import BACKEND

SCHEMA_VERSION = "1.0"


def build_id() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        v = version("artifact")
    except PackageNotFoundError:
        v = "dev"
    return f"thinkey-{v}-{BACKEND}"


def make_report(command: str, inputs: dict, results, seed=None, extra_provenance: dict | None = None,
                timestamp: str | None = None) -> dict:
    prov = {"seed": seed, "build_id": build_id()}
    if extra_provenance:
        prov.update(extra_provenance)
    prov["timestamp"] = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "inputs": inputs,
        "results": results,
        "provenance": prov,
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating, Fraction)):
        return float(obj)
    return obj


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite number {x}")
    s = format(x, ".17g")
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, float):
        return _fmt_float(obj)
    return json.dumps(obj)


def dumps(doc: dict, indent: int = 2) -> str:
    return _encode(_plain(doc), indent, 0) + "\n"


def write(path, doc: dict) -> None:
    Path(path).write_text(dumps(doc))


def strip_timestamp(doc: dict) -> dict:
    doc = json.loads(json.dumps(doc))
    doc.get("provenance", {}).pop("timestamp", None)
    return doc


def load_schema() -> dict:
    return json.loads(resources.files("thinkey").joinpath("schema/report.schema.json").read_text())
