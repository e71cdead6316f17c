"""Run directories: binary model/embedding codecs, canonical manifest, verification.

Layout::

    manifest.json            canonical JSON, written last (marks completion)
    dataset.csv
    models/<idx>.pdmlp       PDMLP1 checkpoint
    embeddings/<idx>.pdemb   PDEMB1 embedding trace
    logs/<idx>.csv           learning curves
    logs/<idx>_checkpoints.csv  tracked predictions per checkpoint
    metrics/*.csv
    members/<idx>.json       per-member completion record (resume)
"""

import hashlib
import json
import math
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mlp import EmbeddingTrace, MlpModel

SCHEMA_VERSION = 1
MODEL_MAGIC = b"PDMLP1"
MODEL_VERSION = 1
TRACE_MAGIC = b"PDEMB1"


class RunStoreError(Exception):
    pass


class MissingArtifact(RunStoreError):
    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


class DigestMismatch(RunStoreError):
    def __init__(self, path):
        super().__init__(f"digest mismatch: {path}")
        self.path = path


class SchemaVersionError(RunStoreError):
    pass


class FormatError(RunStoreError):
    pass


# -- binary codecs ---------------------------------------------------------

def encode_model(model):
    out = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(model.widths)),
           struct.pack(f"<{len(model.widths)}I", *model.widths)]
    for w, b in zip(model.weights, model.biases):
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def decode_model(buf):
    if buf[:6] != MODEL_MAGIC:
        raise FormatError("not a PDMLP1 checkpoint")
    try:
        version, count = struct.unpack_from("<HI", buf, 6)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        widths = struct.unpack_from(f"<{count}I", buf, 12)
    except struct.error as exc:
        raise FormatError("truncated checkpoint header") from exc
    pos = 12 + 4 * count
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            size = int(np.prod(shape)) * 4
            if pos + size > len(buf):
                raise FormatError("truncated checkpoint payload")
            arr = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr.astype(np.float32))
            pos += size
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return MlpModel(tuple(widths), weights, biases)


def encode_trace(trace):
    out = [TRACE_MAGIC, struct.pack("<I", len(trace.probes))]
    for p in trace.probes:
        out.append(struct.pack("<II", *p.shape))
        out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def decode_trace(buf):
    if buf[:6] != TRACE_MAGIC:
        raise FormatError("not a PDEMB1 embedding trace")
    try:
        (count,) = struct.unpack_from("<I", buf, 6)
        pos = 10
        probes = []
        for _ in range(count):
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            size = rows * cols * 4
            if pos + size > len(buf):
                raise FormatError("truncated embedding payload")
            probes.append(np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos)
                          .reshape(rows, cols).astype(np.float32))
            pos += size
    except struct.error as exc:
        raise FormatError("truncated embedding header") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes in embedding trace")
    return EmbeddingTrace(probes)


# -- CSV -------------------------------------------------------------------

def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def csv_bytes(header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return ("\n".join(lines) + "\n").encode()


def int_matrix_csv_bytes(header, leading, matrix):
    """Rows ``[leading[r], *matrix[r]]`` of plain integers; same bytes as ``csv_bytes``."""
    body = [",".join(map(str, [a] + row)) for a, row in zip(np.asarray(leading).tolist(),
                                                            np.asarray(matrix).tolist())]
    return ("\n".join([",".join(header)] + body) + "\n").encode()


def read_csv(buf):
    text = buf.decode() if isinstance(buf, bytes) else buf
    lines = text.strip("\n").split("\n")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


# -- manifest --------------------------------------------------------------

def _canon(obj):
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(json.dumps(k) + ":" + _canon(v) for k, v in items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return json.dumps(str(v))
        return format(v, ".16e")
    return json.dumps(str(obj))


def canonical_json(obj):
    """Sorted keys, no whitespace, floats with 17 significant digits."""
    return (_canon(obj) + "\n").encode()


def sha256_bytes(buf):
    return hashlib.sha256(buf).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_artifact(root, relpath, data):
    path = Path(root) / relpath
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return sha256_bytes(data)


def finalize_manifest(root, manifest, relpaths):
    """Digest ``relpaths`` into ``manifest['files']`` and write ``manifest.json``."""
    manifest = dict(manifest)
    manifest["schema_version"] = SCHEMA_VERSION
    manifest["files"] = {rel: sha256_file(Path(root) / rel) for rel in sorted(relpaths)}
    write_artifact(root, "manifest.json", canonical_json(manifest))
    return manifest


def write_run(root, manifest, artifacts):
    """Write every ``relpath -> bytes`` artifact, then the manifest."""
    for rel, data in artifacts.items():
        write_artifact(root, rel, data)
    return finalize_manifest(root, manifest, artifacts.keys())


class RunFiles(Mapping):
    """Lazy ``relpath -> bytes`` view over a run's inventory; every read is digest-checked."""

    def __init__(self, root, inventory):
        self.root = Path(root)
        self._inventory = dict(inventory)

    def __getitem__(self, rel):
        if rel not in self._inventory:
            raise KeyError(rel)
        path = self.root / rel
        if not path.exists():
            raise MissingArtifact(rel)
        data = path.read_bytes()
        if sha256_bytes(data) != self._inventory[rel]:
            raise DigestMismatch(rel)
        return data

    def __contains__(self, rel):
        return rel in self._inventory

    def __iter__(self):
        return iter(sorted(self._inventory))

    def __len__(self):
        return len(self._inventory)


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise MissingArtifact("manifest.json")
    manifest = json.loads(path.read_bytes())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema version {version}, expected {SCHEMA_VERSION}")
    return manifest


def read_run(root):
    manifest = read_manifest(root)
    return manifest, RunFiles(root, manifest.get("files", {}))


@dataclass
class VerifyReport:
    missing: list = field(default_factory=list)
    mismatched: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    rederived: object = None

    @property
    def ok(self):
        return not (self.missing or self.mismatched or self.errors)

    def lines(self):
        out = [f"missing: {p}" for p in self.missing]
        out += [f"digest mismatch: {p}" for p in self.mismatched]
        out += [f"error: {e}" for e in self.errors]
        if self.rederived is not None:
            out.append(f"re-derived member {self.rederived}: {'ok' if not self.errors else 'FAILED'}")
        return out


def check_digests(root, files):
    report = VerifyReport()
    for rel, digest in sorted(files.items()):
        path = Path(root) / rel
        if not path.exists():
            report.missing.append(rel)
        elif sha256_file(path) != digest:
            report.mismatched.append(rel)
    return report


def verify_run(root, rederive=True, member=None):
    """Check every digest; if intact, re-derive one member's metrics bit-exactly."""
    try:
        manifest = read_manifest(root)
    except (RunStoreError, ValueError) as exc:
        return VerifyReport(errors=[str(exc)])
    report = check_digests(root, manifest.get("files", {}))
    if report.ok and rederive and manifest.get("kind") == "ensemble":
        from .experiment import rederive_member

        try:
            report.rederived, problems = rederive_member(root, manifest, member)
            report.errors.extend(problems)
        except Exception as exc:  # surfaced as a verification failure, not a crash
            report.errors.append(f"re-derivation failed: {exc!r}")
    return report
