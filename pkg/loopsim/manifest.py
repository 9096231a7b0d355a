"""Run manifests: everything needed to reproduce an emitted artifact."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def manifest_path(artifact: Path | str) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + MANIFEST_SUFFIX)


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seeds: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    @classmethod
    def for_inputs(
        cls,
        command: str,
        config: dict[str, Any],
        inputs: list[Path],
        *,
        seeds: dict[str, Any] | None = None,
        notes: dict[str, str] | None = None,
    ) -> RunManifest:
        return cls(
            command=command,
            config=dict(config),
            seeds=dict(seeds or {}),
            inputs={str(p): sha256_file(p) for p in inputs},
            notes=dict(notes or {}),
        )

    def write(self, artifact: Path | str) -> Path:
        """Write the manifest next to ``artifact`` and return its path."""
        target = manifest_path(artifact)
        target.write_text(
            json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info("manifest_written path=%s command=%s", target.name, self.command)
        return target

    @classmethod
    def read(cls, path: Path | str) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))
