"""
Artifact storage with async operations, chunked writes and path validation.
Each command run gets its own directory of artifacts plus a manifest; the local filesystem
backend is the only one, behind an abstract interface.
"""
import hashlib
import json
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

import aiofiles

from bitsplit.config import CHUNK_SIZE, settings
from bitsplit.exceptions import ArtifactNotFoundError, InvalidPathError
from bitsplit.schemas import ArtifactInfo, RunManifest

MANIFEST_KEY = "manifest.json"


class ArtifactStore(ABC):
    """Abstract base class for artifact stores."""

    @abstractmethod
    async def create_run(self, run: str) -> None:
        """Create a run directory; an existing run is reused."""
        pass

    @abstractmethod
    async def run_exists(self, run: str) -> bool:
        pass

    @abstractmethod
    async def put_bytes(self, run: str, key: str, data: bytes) -> ArtifactInfo:
        """Store an artifact and return its size and etag."""
        pass

    @abstractmethod
    async def put_text(self, run: str, key: str, text: str) -> ArtifactInfo:
        pass

    @abstractmethod
    async def get_bytes(self, run: str, key: str) -> bytes:
        pass

    @abstractmethod
    async def list_artifacts(self, run: str, prefix: Optional[str] = None) -> list[ArtifactInfo]:
        """List artifacts in a run, sorted by key."""
        pass


class LocalArtifactStore(ArtifactStore):
    """
    Local filesystem implementation.
    - Runs are top-level directories
    - Artifacts are files within runs; keys may contain '/'
    - ETags are MD5 checksums computed while writing or on listing
    """

    def __init__(self, base_path: Path):
        self.base_path = Path(base_path)
        self.base_path.mkdir(parents=True, exist_ok=True)

    def _validate_run_name(self, run: str) -> str:
        """Validate run name to prevent path traversal."""
        if not run or ".." in run or "/" in run or "\\" in run:
            raise InvalidPathError(run)
        # alphanumeric, hyphens, underscores and dots only
        if not run.replace("-", "").replace("_", "").replace(".", "").isalnum():
            raise InvalidPathError(run)
        return run

    def _validate_key(self, key: str) -> str:
        """Validate and normalize an artifact key."""
        if not key or ".." in key:
            raise InvalidPathError(key)
        key = key.replace("\\", "/").lstrip("/")
        if not key:
            raise InvalidPathError("Empty key after normalization")
        return key

    def _run_path(self, run: str) -> Path:
        run_path = self.base_path / self._validate_run_name(run)
        if not run_path.resolve().is_relative_to(self.base_path.resolve()):
            raise InvalidPathError(run)
        return run_path

    def _artifact_path(self, run: str, key: str) -> Path:
        run_path = self._run_path(run)
        path = run_path / self._validate_key(key)
        if not path.resolve().is_relative_to(run_path.resolve()):
            raise InvalidPathError(key)
        return path

    async def create_run(self, run: str) -> None:
        self._run_path(run).mkdir(parents=True, exist_ok=True)

    async def run_exists(self, run: str) -> bool:
        """Raises InvalidPathError for invalid names."""
        path = self._run_path(run)
        return path.exists() and path.is_dir()

    async def put_bytes(self, run: str, key: str, data: bytes) -> ArtifactInfo:
        """Write in chunks, computing the MD5 etag on the way."""
        if not await self.run_exists(run):
            await self.create_run(run)
        path = self._artifact_path(run, key)
        path.parent.mkdir(parents=True, exist_ok=True)

        md5_hash = hashlib.md5()
        async with aiofiles.open(path, "wb") as f:
            for start in range(0, len(data), CHUNK_SIZE):
                chunk = data[start:start + CHUNK_SIZE]
                md5_hash.update(chunk)
                await f.write(chunk)
        return ArtifactInfo(key=self._validate_key(key), size=len(data), etag=md5_hash.hexdigest())

    async def put_text(self, run: str, key: str, text: str) -> ArtifactInfo:
        return await self.put_bytes(run, key, text.encode("utf-8"))

    async def get_bytes(self, run: str, key: str) -> bytes:
        path = self._artifact_path(run, key)
        if not path.is_file():
            raise ArtifactNotFoundError(run, key)
        async with aiofiles.open(path, "rb") as f:
            return await f.read()

    async def _etag(self, path: Path) -> str:
        md5_hash = hashlib.md5()
        async with aiofiles.open(path, "rb") as f:
            while chunk := await f.read(CHUNK_SIZE):
                md5_hash.update(chunk)
        return md5_hash.hexdigest()

    async def list_artifacts(self, run: str, prefix: Optional[str] = None) -> list[ArtifactInfo]:
        if not await self.run_exists(run):
            raise ArtifactNotFoundError(run, prefix or "")
        run_path = self._run_path(run)
        artifacts = []
        for file_path in sorted(run_path.rglob("*")):
            if not file_path.is_file():
                continue
            key = str(file_path.relative_to(run_path)).replace(os.sep, "/")
            if prefix and not key.startswith(prefix):
                continue
            artifacts.append(ArtifactInfo(key=key, size=file_path.stat().st_size, etag=await self._etag(file_path)))
        return sorted(artifacts, key=lambda a: a.key)


async def write_manifest(store: ArtifactStore, run: str, manifest: RunManifest) -> ArtifactInfo:
    """Store manifest.json listing every other artifact of the run."""
    artifacts = [a for a in await store.list_artifacts(run) if a.key != MANIFEST_KEY]
    manifest = manifest.model_copy(update={"artifacts": artifacts})
    text = json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
    return await store.put_text(run, MANIFEST_KEY, text)


async def read_manifest(store: ArtifactStore, run: str) -> RunManifest:
    return RunManifest.model_validate_json(await store.get_bytes(run, MANIFEST_KEY))


def run_name(command: str, config_hash: str, seed: Optional[int] = None) -> str:
    """<command>-<hash prefix>[-s<seed>]"""
    name = f"{command}-{config_hash[:10]}"
    return name if seed is None else f"{name}-s{seed}"


def get_artifact_store(base_path: Optional[Path] = None) -> ArtifactStore:
    """Local store at base_path, or at the configured output directory; created on first use."""
    return LocalArtifactStore(base_path if base_path is not None else settings.get_output_path())
