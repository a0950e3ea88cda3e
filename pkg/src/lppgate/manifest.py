"""Run manifests and atomic artifact writes.

Every artifact-writing command emits exactly one manifest that hash-chains
the outputs to their inputs (sha256 of each input file plus the effective
configuration), so a pipeline run is auditable end to end. Artifacts are
written atomically (temp file + rename) and contain no timestamps, so
re-running with identical inputs overwrites byte-identical files; timing
lives only in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Mapping, Sequence

__all__ = [
    "sha256_file",
    "sha256_obj",
    "write_text_atomic",
    "write_json_atomic",
    "build_manifest",
    "MANIFEST_VERSION",
]

MANIFEST_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_obj(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_text_atomic(path, text: str) -> None:
    path = str(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json_atomic(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_manifest(
    command: str,
    config: Mapping,
    inputs: Mapping[str, str] | Sequence[str],
    outputs: Sequence[str],
    timing_s: float,
    extra: Mapping | None = None,
) -> dict:
    """Inputs may be pre-hashed ({path: sha256}) so the recorded hash is the
    file as read, even when a command rewrites one of its own inputs."""
    if not isinstance(inputs, Mapping):
        inputs = {str(p): sha256_file(p) for p in inputs}
    manifest = {
        "version": MANIFEST_VERSION,
        "command": command,
        "config": dict(config),
        "config_hash": sha256_obj(config),
        "inputs": dict(inputs),
        "outputs": sorted(str(p) for p in outputs),
        "timing_s": timing_s,
    }
    if extra:
        manifest["extra"] = dict(extra)
    return manifest
