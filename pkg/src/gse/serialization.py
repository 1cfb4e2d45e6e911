"""Versioned on-disk formats.

Weight files (``gse-matrix/1``) are plain text::

    gse-matrix/1
    <rows> <cols>
    <row 0: cols values, %.17g, space separated>
    ...

Adapter snapshots are JSON objects whose first key is ``"schema"``. Floats are
written with Python's shortest round-trip repr, so reloading is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from gse.baselines import FullFineTune, GseAdapter, LowRankAdapter
from gse.core import GeneralizedExpert, GseConfig, GseLayer, Router, SpecializedExpert

__all__ = [
    "MATRIX_SCHEMA",
    "SNAPSHOT_SCHEMA",
    "from_snapshot",
    "load_snapshot",
    "read_matrix",
    "save_snapshot",
    "to_snapshot",
    "write_matrix",
]

MATRIX_SCHEMA = "gse-matrix/1"
SNAPSHOT_SCHEMA = "gse-snapshot/1"


def write_matrix(path, w: np.ndarray) -> None:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {w.shape}")
    lines = [MATRIX_SCHEMA, f"{w.shape[0]} {w.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in w]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    text = Path(path).read_text().split("\n")
    if not text or text[0].strip() != MATRIX_SCHEMA:
        raise ValueError(f"{path}: missing schema tag {MATRIX_SCHEMA!r}")
    try:
        rows, cols = (int(t) for t in text[1].split())
        values = [float(t) for line in text[2 : 2 + rows] for t in line.split()]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed matrix file ({exc})") from exc
    if len(values) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(values)}")
    w = np.array(values, dtype=np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{path}: non-finite values")
    return w


def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _dec(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def to_snapshot(adapter) -> dict:
    if isinstance(adapter, GseLayer):
        adapter = GseAdapter(adapter)
    if isinstance(adapter, GseAdapter):
        layer = adapter.layer
        return {
            "schema": SNAPSHOT_SCHEMA,
            "kind": "gse",
            "config": layer.config.to_dict(),
            "top_k": layer.top_k,
            "w0_original": _enc(layer.w0_original),
            "w0_adjusted": _enc(layer.w0_adjusted),
            "generalized": {
                "b": _enc(layer.generalized.b),
                "a": _enc(layer.generalized.a),
                "scale": layer.generalized.scale,
            },
            "specialized": [
                {"b": _enc(e.b), "a": _enc(e.a), "scale": e.scale, "trace_sigma": e.trace_sigma}
                for e in layer.specialized
            ],
            "router": None if layer.router is None else _enc(layer.router.w_z),
        }
    if isinstance(adapter, LowRankAdapter):
        return {
            "schema": SNAPSHOT_SCHEMA,
            "kind": adapter.kind,
            "backbone": _enc(adapter.backbone),
            "b": _enc(adapter.b),
            "a": _enc(adapter.a),
            "scale": adapter.scale,
        }
    if isinstance(adapter, FullFineTune):
        return {"schema": SNAPSHOT_SCHEMA, "kind": "full_ft", "w": _enc(adapter.w)}
    raise TypeError(f"cannot snapshot {type(adapter).__name__}")


def from_snapshot(snap: dict):
    if snap.get("schema") != SNAPSHOT_SCHEMA:
        raise ValueError(f"unsupported snapshot schema {snap.get('schema')!r}")
    kind = snap["kind"]
    if kind == "gse":
        gen = snap["generalized"]
        layer = GseLayer(
            w0_adjusted=_dec(snap["w0_adjusted"]),
            w0_original=_dec(snap["w0_original"]),
            generalized=GeneralizedExpert(_dec(gen["b"]), _dec(gen["a"]), gen["scale"]),
            specialized=tuple(
                SpecializedExpert(_dec(e["b"]), _dec(e["a"]), e["scale"], e["trace_sigma"])
                for e in snap["specialized"]
            ),
            router=None if snap["router"] is None else Router(_dec(snap["router"])),
            config=GseConfig(**snap["config"]),
            top_k=snap["top_k"],
        )
        return GseAdapter(layer)
    if kind in ("lora", "pissa_style"):
        return LowRankAdapter(
            _dec(snap["backbone"]), _dec(snap["b"]), _dec(snap["a"]), snap["scale"], kind
        )
    if kind == "full_ft":
        return FullFineTune(_dec(snap["w"]))
    raise ValueError(f"unknown adapter kind {kind!r} in snapshot")


def save_snapshot(path, adapter) -> None:
    Path(path).write_text(json.dumps(to_snapshot(adapter)))


def load_snapshot(path):
    return from_snapshot(json.loads(Path(path).read_text()))
