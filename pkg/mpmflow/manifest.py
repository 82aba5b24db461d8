"""
Run Manifests and Config Files

Every CLI command records what produced its outputs: the command, seed,
echoed configuration, SHA-256 hashes of its input files and the library
versions in use. Also hosts the JSON-with-comments reader shared by scene,
prior and suite files.

Usage:
    from mpmflow.manifest import RunManifest, read_jsonc

    manifest = RunManifest.new("simulate", seed=0, config=config.to_dict())
    manifest.add_input(scene_path)
    manifest.save(out_dir)
"""

import hashlib
import json
import logging
import platform
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger("mpmflow.manifest")

MANIFEST_NAME = "manifest.json"


class ConfigFileError(ValueError):
    """Raised when a JSON config file cannot be parsed."""
    pass


def strip_jsonc_comments(text: str) -> str:
    """Drop full-line ``//`` comments, keeping line numbers intact."""
    return "\n".join(
        "" if line.strip().startswith("//") else line for line in text.splitlines()
    )


def read_jsonc(path: Union[str, Path]) -> Any:
    """Parse a JSON file that may contain full-line ``//`` comments."""
    path = Path(path)
    with open(path) as f:
        content = strip_jsonc_comments(f.read())
    try:
        return json.loads(content)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def library_versions() -> Dict[str, str]:
    import numpy
    import pydantic

    from . import __version__

    return {
        "mpmflow": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "pydantic": pydantic.VERSION,
    }


@dataclass
class RunManifest:
    """
    Provenance record written next to a command's outputs.

    Stored as ``manifest.json`` in the output directory.
    """
    run_id: str
    command: str
    seed: Optional[int] = None
    created_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    status: str = "running"
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    versions: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def new(cls, command: str, seed: Optional[int] = None,
            config: Optional[Dict[str, Any]] = None) -> "RunManifest":
        """Start a manifest with a fresh ``run_<timestamp>_<hex>`` id."""
        run_id = f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}_{uuid.uuid4().hex[:6]}"
        return cls(
            run_id=run_id,
            command=command,
            seed=seed,
            config=config or {},
            versions=library_versions(),
        )

    def add_input(self, path: Union[str, Path]) -> str:
        """Record an input file by content hash."""
        digest = file_sha256(path)
        self.inputs[str(path)] = digest
        return digest

    def add_output(self, path: Union[str, Path]):
        self.outputs.append(str(path))

    def finish(self, status: str = "ok"):
        self.status = status
        self.finished_at = datetime.now().isoformat()

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "run_id": self.run_id,
            "command": self.command,
            "seed": self.seed,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": self.versions,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        return cls(
            run_id=data["run_id"],
            command=data["command"],
            seed=data.get("seed"),
            created_at=data.get("created_at", datetime.now().isoformat()),
            finished_at=data.get("finished_at"),
            status=data.get("status", "unknown"),
            config=data.get("config", {}),
            inputs=data.get("inputs", {}),
            outputs=data.get("outputs", []),
            versions=data.get("versions", {}),
            extra=data.get("extra", {}),
        )

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.debug(f"Manifest saved: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path) as f:
            return cls.from_dict(json.load(f))


__all__: List[str] = [
    "MANIFEST_NAME",
    "ConfigFileError",
    "RunManifest",
    "strip_jsonc_comments",
    "read_jsonc",
    "file_sha256",
    "library_versions",
]
