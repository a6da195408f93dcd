import asyncio
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import aiofiles
import pandas as pd

from performance_profiler import ComponentProfiler

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "python-dotenv", "aiofiles", "scikit-learn", "lifelines")

Payload = Union[str, pd.DataFrame, Dict[str, Any], List[Any]]


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Everything needed to re-run a CLI command bit-exactly."""
    command: str
    config: Dict[str, Any]
    seed: int
    input_hashes: Dict[str, str] = field(default_factory=dict)
    package_versions: Dict[str, str] = field(default_factory=package_versions)
    started_at: str = field(default_factory=_utc_now)
    finished_at: Optional[str] = None
    exit_code: Optional[int] = None
    artifacts: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def record_input(self, path: Optional[str]):
        if path and Path(path).is_file():
            self.input_hashes[str(path)] = sha256_file(path)

    def finish(self, exit_code: int):
        self.exit_code = exit_code
        self.finished_at = _utc_now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=2, default=str)

    def to_text(self) -> str:
        lines = [
            f"command: {self.command}",
            f"seed: {self.seed}",
            f"started_at: {self.started_at}",
            f"finished_at: {self.finished_at}",
            f"exit_code: {self.exit_code}",
        ]
        lines += [f"input: {path} sha256={digest}" for path, digest in sorted(self.input_hashes.items())]
        lines += [f"package: {name}=={version}" for name, version in sorted(self.package_versions.items())]
        lines += [f"artifact: {name}" for name in self.artifacts]
        lines += [f"note: {note}" for note in self.notes]
        lines.append("config:")
        lines.append(json.dumps(self.config, indent=2, sort_keys=True, default=str))
        return "\n".join(lines) + "\n"


class ArtifactWriter:
    """Writes run outputs (CSV, JSON, text) into one output directory."""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []
        self.callbacks: List[Callable[[Path], None]] = []

    def add_callback(self, callback: Callable[[Path], None]):
        """Called with the path of every artifact after it is written."""
        self.callbacks.append(callback)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    @staticmethod
    def _render(payload: Payload) -> str:
        if isinstance(payload, pd.DataFrame):
            return payload.to_csv(index=False)
        if isinstance(payload, (dict, list)):
            return json.dumps(payload, ensure_ascii=False, indent=2, default=str)
        return str(payload)

    async def write(self, name: str, payload: Payload) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        text = self._render(payload)
        with ComponentProfiler("artifacts", "write", {"name": name, "bytes": len(text)}):
            async with aiofiles.open(target, "w", encoding="utf-8") as f:
                await f.write(text)
        self.written.append(name)
        for callback in self.callbacks:
            try:
                callback(target)
            except Exception as e:
                logger.error(f"Artifact callback failed for {name}: {e}")
        logger.debug(f"Wrote {target}")
        return target

    async def write_many(self, items: Dict[str, Payload]) -> List[Path]:
        return list(await asyncio.gather(*(self.write(name, payload) for name, payload in items.items())))

    async def write_manifest(self, manifest: RunManifest):
        manifest.artifacts = sorted(set(manifest.artifacts) | set(self.written))
        await self.write_many({"manifest.txt": manifest.to_text(), "manifest.json": manifest.to_json()})

    def save(self, items: Dict[str, Payload]) -> List[Path]:
        """Synchronous wrapper for library callers outside an event loop."""
        return asyncio.run(self.write_many(items))

    def save_manifest(self, manifest: RunManifest):
        asyncio.run(self.write_manifest(manifest))
