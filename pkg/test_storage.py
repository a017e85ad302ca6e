"""
Artifact store, run manifests and settings.
"""
import asyncio
import hashlib
import os
import subprocess
import sys
from pathlib import Path

import pytest

from bitsplit.config import Settings, settings
from bitsplit.exceptions import ArtifactNotFoundError, InvalidPathError
from bitsplit.schemas import RunManifest
from bitsplit.storage import (
    MANIFEST_KEY,
    LocalArtifactStore,
    get_artifact_store,
    read_manifest,
    run_name,
    write_manifest,
)


@pytest.fixture
def store(tmp_path):
    return LocalArtifactStore(tmp_path / "runs")


def test_put_and_get_round_trip(store):
    async def scenario():
        info = await store.put_bytes("account-abc", "tables/size.csv", b"module,bytes\npooler,8\n")
        assert info.key == "tables/size.csv"
        assert info.size == 22
        assert info.etag == hashlib.md5(b"module,bytes\npooler,8\n").hexdigest()
        assert await store.run_exists("account-abc")
        assert await store.get_bytes("account-abc", "tables/size.csv") == b"module,bytes\npooler,8\n"
        text = await store.put_text("account-abc", "notes.txt", "ok ✅")
        assert text.size == len("ok ✅".encode("utf-8"))

    asyncio.run(scenario())


def test_chunked_write_keeps_etag(store, monkeypatch):
    monkeypatch.setattr("bitsplit.storage.CHUNK_SIZE", 7)
    data = bytes(range(256)) * 3

    async def scenario():
        info = await store.put_bytes("run1", "weights.bin", data)
        listed = await store.list_artifacts("run1")
        assert info.etag == listed[0].etag == hashlib.md5(data).hexdigest()
        assert await store.get_bytes("run1", "weights.bin") == data

    asyncio.run(scenario())


def test_listing_is_sorted_and_filtered(store):
    async def scenario():
        await store.create_run("sweep")
        for key in ("b.csv", "curves/stage3.csv", "a.json", "curves/stage1.csv"):
            await store.put_text("sweep", key, key)
        keys = [a.key for a in await store.list_artifacts("sweep")]
        assert keys == ["a.json", "b.csv", "curves/stage1.csv", "curves/stage3.csv"]
        curves = await store.list_artifacts("sweep", prefix="curves/")
        assert [a.key for a in curves] == ["curves/stage1.csv", "curves/stage3.csv"]

    asyncio.run(scenario())


def test_missing_artifacts_and_runs(store):
    async def scenario():
        await store.create_run("plan-1")
        with pytest.raises(ArtifactNotFoundError):
            await store.get_bytes("plan-1", "plan.json")
        with pytest.raises(ArtifactNotFoundError):
            await store.list_artifacts("nothing-here")
        assert not await store.run_exists("nothing-here")

    asyncio.run(scenario())


@pytest.mark.parametrize("run", ["../../../etc", "a/b", "", "bad name", "..\\up"])
def test_run_names_reject_traversal(store, run):
    with pytest.raises(InvalidPathError):
        asyncio.run(store.run_exists(run))


@pytest.mark.parametrize("key", ["../secret", "", "/", "a/../../b"])
def test_keys_reject_traversal(store, key):
    with pytest.raises(InvalidPathError):
        asyncio.run(store.put_text("safe", key, "x"))


def test_leading_slash_is_normalized(store):
    info = asyncio.run(store.put_text("safe", "/report.json", "{}"))
    assert info.key == "report.json"


def test_manifest_lists_other_artifacts(store):
    manifest = RunManifest(command="account", config_hash="f" * 64, seeds=[0, 1], versions={"bitsplit": "1.0.0"})

    async def scenario():
        await store.put_text("account-ffff", "size.csv", "x")
        await store.put_text("account-ffff", "flops.csv", "yy")
        await write_manifest(store, "account-ffff", manifest)
        # a rewrite does not list the old manifest
        await write_manifest(store, "account-ffff", manifest)
        return await read_manifest(store, "account-ffff"), await store.list_artifacts("account-ffff")

    loaded, listed = asyncio.run(scenario())
    assert [a.key for a in loaded.artifacts] == ["flops.csv", "size.csv"]
    assert loaded.seeds == [0, 1]
    assert MANIFEST_KEY in [a.key for a in listed]


def test_run_name():
    assert run_name("sweep-bits", "0123456789abcdef") == "sweep-bits-0123456789"
    assert run_name("pipeline", "0123456789abcdef", seed=3) == "pipeline-0123456789-s3"


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BITSPLIT_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    settings = Settings()
    assert settings.get_output_path() == (tmp_path / "elsewhere").resolve()
    assert settings.get_output_path().is_dir()


def test_import_leaves_torch_and_working_directory_alone(tmp_path):
    env = {key: value for key, value in os.environ.items() if not key.startswith("BITSPLIT_")}
    env["PYTHONPATH"] = str(Path(__file__).resolve().parent)
    code = "import torch, bitsplit.main; print(torch.get_default_dtype())"
    result = subprocess.run([sys.executable, "-c", code], cwd=tmp_path, env=env, capture_output=True, text=True, check=True)
    assert result.stdout.strip() == "torch.float32"
    assert list(tmp_path.iterdir()) == []


def test_artifact_store_defaults_to_configured_output(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "configured"))
    assert get_artifact_store().base_path == (tmp_path / "configured").resolve()
    explicit = get_artifact_store(tmp_path / "explicit")
    assert explicit.base_path == tmp_path / "explicit"
    assert explicit.base_path.is_dir()
