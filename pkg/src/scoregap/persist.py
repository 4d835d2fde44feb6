"""Reproducible run manifests and model checkpoints.

Both formats are text so they diff cleanly: the manifest is plain JSON,
a checkpoint is one JSON header line followed by the flat parameter
arrays hex-encoded (float64, little-endian), in layer order W1 b1 W2 b2
... . The header carries a sha256 of the parameter block, so any flipped
byte is a hash mismatch, never a silently wrong model.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import MlpScoreModel

TOOL_VERSION = "0.1.0"
MANIFEST_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1


class PersistError(Exception):
    """Base for persistence failures."""


class CorruptArtifactError(PersistError):
    """File cannot be parsed as its format at all."""


class VersionMismatchError(PersistError):
    """File declares a format version this build does not support."""


class HashMismatchError(PersistError):
    """Content hash does not match the recorded one."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


@dataclass
class RunManifest:
    """Everything needed to rerun a command and verify its outputs."""

    config: dict
    master_seed: int
    format_version: int = MANIFEST_FORMAT_VERSION
    tool_version: str = TOOL_VERSION
    created: str = ""
    outputs: dict[str, str] = field(default_factory=dict)  # relpath -> sha256

    def __post_init__(self):
        if not self.created:
            self.created = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def record_output(self, path, base_dir) -> None:
        rel = str(Path(path).resolve().relative_to(Path(base_dir).resolve()))
        self.outputs[rel] = sha256_file(path)


def save_manifest(m: RunManifest, path) -> Path:
    path = Path(path)
    doc = {
        "format_version": m.format_version,
        "tool_version": m.tool_version,
        "created": m.created,
        "master_seed": m.master_seed,
        "config": m.config,
        "outputs": m.outputs,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest(path, verify: bool = True) -> RunManifest:
    """Load a manifest; with verify=True, re-hash every listed output file.

    Output paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptArtifactError(f"{path} is not valid manifest JSON: {exc}") from exc
    version = doc.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has manifest format version {version!r}; "
            f"this build supports {MANIFEST_FORMAT_VERSION}"
        )
    try:
        m = RunManifest(
            config=doc["config"],
            master_seed=doc["master_seed"],
            format_version=version,
            tool_version=doc.get("tool_version", "unknown"),
            created=doc.get("created", ""),
            outputs=dict(doc.get("outputs", {})),
        )
    except KeyError as exc:
        raise CorruptArtifactError(f"{path} is missing manifest field {exc}") from exc
    if verify:
        for rel, recorded in m.outputs.items():
            target = path.parent / rel
            if not target.exists():
                raise HashMismatchError(f"manifest output {rel} is missing next to {path}")
            actual = sha256_file(target)
            if actual != recorded:
                raise HashMismatchError(
                    f"manifest output {rel}: recorded sha256 {recorded[:12]}..., "
                    f"file hashes to {actual[:12]}..."
                )
    return m


def save_checkpoint(model: MlpScoreModel, path) -> Path:
    path = Path(path)
    arrays = []
    for W, b in zip(model.weights, model.biases):
        arrays.extend([W, b])
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "widths": model.widths,
        "d": model.d,
        "n_classes": model.n_classes,
        "hidden": list(model.hidden),
        "activation": model.activation,
        "embedding": {"kind": "sinusoidal", "n_freq": model.n_freq},
        "seed": model.seed,
        "p_uncond": model.p_uncond,
        "param_sha256": sha256_bytes(blob),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(blob.hex() + "\n")
    return path


def load_checkpoint(path) -> MlpScoreModel:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if len(lines) < 2:
        raise CorruptArtifactError(f"{path} is not a checkpoint (expected header + body)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"{path} has an unparseable checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has checkpoint format version {version!r}; "
            f"this build supports {CHECKPOINT_FORMAT_VERSION}"
        )
    try:
        blob = bytes.fromhex(lines[1].strip())
    except ValueError as exc:
        raise CorruptArtifactError(f"{path} parameter block is not valid hex: {exc}") from exc
    actual = sha256_bytes(blob)
    if actual != header.get("param_sha256"):
        raise HashMismatchError(
            f"{path}: parameter block hashes to {actual[:12]}..., header says "
            f"{str(header.get('param_sha256'))[:12]}..."
        )
    try:
        model = MlpScoreModel(
            d=header["d"],
            n_classes=header["n_classes"],
            hidden=tuple(header["hidden"]),
            n_freq=header["embedding"]["n_freq"],
            seed=header["seed"],
            p_uncond=header["p_uncond"],
            activation=header["activation"],
        )
    except KeyError as exc:
        raise CorruptArtifactError(f"{path} header is missing field {exc}") from exc

    flat = np.frombuffer(blob, dtype="<f8")
    widths = model.widths
    expected = sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))
    if flat.size != expected:
        raise CorruptArtifactError(
            f"{path} holds {flat.size} parameters, header widths imply {expected}"
        )
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        model.weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        model.biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    return model
