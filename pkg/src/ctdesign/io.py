"""On-disk formats: raw float arrays with text sidecars, CSV tables, configs.

Arrays are stored as raw little-endian 64-bit floats (``<f8``, C order)
next to a ``.meta`` text sidecar holding the shape and any provenance
fields. Config files use a flat ``key = value`` text format with typed
values (int, float, bool, string, comma list); every run copies its
resolved config into the output directory.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

__all__ = [
    "save_array",
    "load_array",
    "save_theta",
    "load_theta",
    "write_manifest",
    "read_manifest",
    "write_csv",
    "read_csv",
    "format_config",
    "parse_config",
    "write_config",
    "read_config",
    "spec_hash",
]

_SIDECAR_SUFFIX = ".meta"


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + _SIDECAR_SUFFIX)


def save_array(path, array: np.ndarray, **fields) -> None:
    """Raw ``<f8`` dump plus a sidecar with shape and provenance fields."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    path.write_bytes(arr.tobytes())
    meta = {"shape": ",".join(str(s) for s in arr.shape), "dtype": "<f8"}
    meta.update({k: _format_value(v) for k, v in fields.items()})
    lines = [f"{k} = {v}" for k, v in meta.items()]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def load_array(path):
    """Returns (array, sidecar fields)."""
    path = Path(path)
    meta = parse_config(_sidecar(path).read_text())
    raw_shape = meta["shape"]
    shape = tuple(int(s) for s in
                  (raw_shape if isinstance(raw_shape, list) else [raw_shape]))
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).copy()
    return arr, meta


def spec_hash(spec) -> str:
    """Short stable hash of an object's public fields, for sidecars."""
    items = sorted((k, repr(v)) for k, v in vars(spec).items()
                   if not k.startswith("_"))
    digest = hashlib.sha256(repr(items).encode()).hexdigest()
    return digest[:16]


def save_theta(path, theta: np.ndarray, net_spec, seed: int, iterations: int) -> None:
    save_array(path, np.asarray(theta, dtype=float).ravel(),
               spec_hash=spec_hash(net_spec), seed=int(seed),
               iterations=int(iterations))


def load_theta(path, net_spec=None):
    """Returns (theta, sidecar fields); verifies the spec hash when given."""
    theta, meta = load_array(path)
    if net_spec is not None and meta.get("spec_hash") != spec_hash(net_spec):
        raise ValueError(f"checkpoint {path} was written for a different network spec")
    return theta, meta


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    """Returns (header, rows) with rows as lists of strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def write_manifest(path, entries) -> None:
    """Dataset manifest: one row per image (id, seed, preferential direction)."""
    write_csv(path, ["image_id", "seed", "direction_deg"],
              [[e["image_id"], e["seed"], repr(float(e["direction_deg"]))]
               for e in entries])


def read_manifest(path):
    _, rows = read_csv(path)
    return [{"image_id": int(r[0]), "seed": int(r[1]),
             "direction_deg": float(r[2])} for r in rows]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def format_config(mapping: dict) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in mapping.items()]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` comments and blank lines skipped."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {ln}: empty key")
        out[key] = _parse_value(value)
    return out


def write_config(path, mapping: dict) -> None:
    Path(path).write_text(format_config(mapping))


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())
