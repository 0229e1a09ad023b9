"""On-disk artifact helpers: atomic writes, checksums and run manifests."""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List

from pydantic import BaseModel, Field

from .errors import MissingInputError


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """Write to a temporary sibling and rename into place only on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def atomic_write_json(path: Path, payload) -> Path:
    return atomic_write_text(path, canonical_json(payload) + "\n")


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for block in iter(lambda: fh.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def require(path: Path, hint: str = "") -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, hint)
    return path


class RunManifest(BaseModel):
    """Everything needed to audit or re-run one stage"""

    stage: str
    tool_version: str
    config_hash: str
    config: Dict = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    flops: float = 0.0
    notes: Dict = Field(default_factory=dict)
    stages: List[str] = Field(default_factory=list)

    def record_inputs(self, paths) -> None:
        for path in paths:
            self.inputs[str(path)] = sha256_file(path)

    def record_outputs(self, paths) -> None:
        for path in paths:
            self.outputs[str(path)] = sha256_file(path)

    def merge(self, other: "RunManifest") -> None:
        """Fold a stage manifest into an aggregate (pipeline) manifest"""
        self.stages.append(other.stage)
        self.seeds.update({f"{other.stage}.{k}": v for k, v in other.seeds.items()})
        self.timings.update({f"{other.stage}.{k}": v for k, v in other.timings.items()})
        self.inputs.update(other.inputs)
        self.outputs.update(other.outputs)
        self.flops += other.flops
        if other.notes:
            self.notes[other.stage] = other.notes

    def write(self, path: Path) -> Path:
        return atomic_write_json(path, self.model_dump())
