"""Flat-binary persistence: gridded containers, checkpoints, metric logs.

Everything on disk is raw little-endian float32 plus a canonical JSON
sidecar, so artifacts can be parsed in any language without third-party
format libraries.  Manifest/header hashing is canonical (sorted keys,
compact separators): key order and whitespace never change a hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

MANIFEST_NAME = "manifest.json"
HEADER_NAME = "header.json"
PARAMS_NAME = "params.bin"

METRICS_COLUMNS = ["run_id", "stage", "epoch", "split", "metric", "value"]

_VAR_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class StoreError(Exception):
    """Base class for persistence failures."""


class ValidationError(StoreError):
    pass


class IntegrityError(StoreError):
    pass


class SchemaVersionError(StoreError):
    pass


class IncompatibleCheckpointError(StoreError):
    def __init__(self, message: str, names: list[str] | None = None):
        super().__init__(message)
        self.names = list(names or [])


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace; rejects NaN/Inf."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _as_le_f32(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr), dtype="<f4")


def params_digest(params: dict[str, np.ndarray]) -> str:
    """Content hash of a named-tensor set, independent of insertion order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = _as_le_f32(params[name])
        h.update(name.encode())
        h.update(canonical_json(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# GridPack: one directory per gridded sample

def write_gridpack(
    variables: dict[str, np.ndarray],
    meta: dict,
    path: str | Path,
    units: dict[str, str] | None = None,
) -> str:
    """Write named grids + metadata to a directory; returns the manifest hash."""
    if not variables:
        raise ValidationError("gridpack needs at least one variable")
    units = units or {}
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries = []
    for name in sorted(variables):
        if not _VAR_NAME_RE.match(name):
            raise ValidationError(f"invalid variable name: {name!r}")
        arr = _as_le_f32(variables[name])
        data = arr.tobytes()
        (path / f"{name}.bin").write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "units": units.get(name, "1"),
                "sha256": sha256_hex(data),
            }
        )

    manifest = {"schema_version": SCHEMA_VERSION, "variables": entries, "meta": meta}
    blob = canonical_json(manifest).encode()
    (path / MANIFEST_NAME).write_bytes(blob)
    return sha256_hex(blob)


def read_gridpack(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a gridpack, verifying every content hash before returning."""
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise IntegrityError(f"missing {MANIFEST_NAME} in {path}")
    manifest = json.loads(mpath.read_bytes())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported gridpack schema_version: {version!r}")

    grids: dict[str, np.ndarray] = {}
    for entry in manifest["variables"]:
        name = entry["name"]
        if entry.get("dtype") != "float32":
            raise SchemaVersionError(f"unsupported dtype for {name}: {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        fpath = path / f"{name}.bin"
        if not fpath.is_file():
            raise IntegrityError(f"variable file missing: {name}")
        data = fpath.read_bytes()
        if len(data) != expected:
            raise IntegrityError(
                f"variable {name}: expected {expected} bytes, found {len(data)}"
            )
        if sha256_hex(data) != entry["sha256"]:
            raise IntegrityError(f"variable {name}: content hash mismatch")
        grids[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return grids, manifest.get("meta", {})


def gridpack_digest(path: str | Path) -> str:
    return sha256_hex((Path(path) / MANIFEST_NAME).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints: header.json + one concatenated params.bin

def save_checkpoint(params: dict[str, np.ndarray], header: dict, path: str | Path) -> str:
    """Persist named parameter tensors; returns the checkpoint (header) hash.

    `header` carries the caller's provenance fields (kind, task, model echo,
    stage, epoch, seed, parent).  The parameter index and content hash are
    appended here so the returned hash is content-addressed.
    """
    if not params:
        raise ValidationError("checkpoint needs at least one parameter tensor")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    names = sorted(params)
    blobs = [_as_le_f32(params[n]).tobytes() for n in names]
    payload = b"".join(blobs)

    full = dict(header)
    full["schema_version"] = SCHEMA_VERSION
    full["params"] = [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names]
    full["params_sha256"] = sha256_hex(payload)

    blob = canonical_json(full).encode()
    (path / PARAMS_NAME).write_bytes(payload)
    (path / HEADER_NAME).write_bytes(blob)
    return sha256_hex(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load a checkpoint, verifying payload length and content hash."""
    path = Path(path)
    hpath = path / HEADER_NAME
    if not hpath.is_file():
        raise IntegrityError(f"missing {HEADER_NAME} in {path}")
    header = json.loads(hpath.read_bytes())
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"unsupported checkpoint schema_version: {header.get('schema_version')!r}"
        )
    payload = (path / PARAMS_NAME).read_bytes()
    if sha256_hex(payload) != header["params_sha256"]:
        raise IntegrityError("checkpoint payload hash mismatch")

    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise IntegrityError(f"checkpoint payload truncated at {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(payload):
        raise IntegrityError("checkpoint payload has trailing bytes")
    return params, header


def checkpoint_digest(path: str | Path) -> str:
    return sha256_hex((Path(path) / HEADER_NAME).read_bytes())


def match_param_spec(
    params: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]], context: str = "model"
) -> None:
    """Raise IncompatibleCheckpointError unless name/shape sets agree exactly."""
    problems = []
    for name in sorted(set(expected) - set(params)):
        problems.append(f"missing:{name}")
    for name in sorted(set(params) - set(expected)):
        problems.append(f"unexpected:{name}")
    for name in sorted(set(params) & set(expected)):
        got = tuple(np.asarray(params[name]).shape)
        if got != tuple(expected[name]):
            problems.append(f"shape:{name}:{got}!={tuple(expected[name])}")
    if problems:
        raise IncompatibleCheckpointError(
            f"checkpoint incompatible with {context}: " + ", ".join(problems), problems
        )


# ---------------------------------------------------------------------------
# Metrics log: append-only CSV

def _format_value(value) -> str:
    if value is None:
        return "nan"
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        raise ValidationError("metric values must be finite or nan")
    return repr(v)


class MetricsLog:
    """Append-only CSV log with a fixed `run_id,stage,epoch,split,metric,value` header."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRICS_COLUMNS)

    def append(self, run_id: str, stage: str, epoch: int, split: str, metric: str, value) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [run_id, stage, int(epoch), split, metric, _format_value(value)]
            )

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                row["epoch"] = int(row["epoch"])
                row["value"] = float(row["value"])
                rows.append(row)
        return rows
