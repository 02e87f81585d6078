"""Shared fixtures: the toy corpus and a pretrained codec, both cached across sessions."""
from pathlib import Path

import pytest

from d3sr.dataio import CheckpointError, DatasetSpec, make_toy_corpus
from d3sr.trainer import load_codec, pretrain_codec, save_codec

CODEC_STEPS = 1500


def _cache_dir(config) -> Path:
    return Path(config.cache.mkdir("d3sr"))


@pytest.fixture(scope="session")
def toy_root(pytestconfig) -> Path:
    root = _cache_dir(pytestconfig) / "toy"
    if not (root / "val").is_dir():
        make_toy_corpus(root)
    return root


@pytest.fixture(scope="session")
def codec_path(pytestconfig, toy_root) -> Path:
    """Codec pretrained on the toy corpus; retrained if the cached file is unusable."""
    path = _cache_dir(pytestconfig) / f"codec_{CODEC_STEPS}.ckpt"
    if path.exists():
        try:
            load_codec(path)
            return path
        except CheckpointError:
            path.unlink()
    codec = pretrain_codec(DatasetSpec(root=str(toy_root)), steps=CODEC_STEPS, seed=0)
    save_codec(codec, path, {"steps": CODEC_STEPS, "seed": 0})
    return path


@pytest.fixture
def codec(codec_path):
    return load_codec(codec_path)


# --------------------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(n: int, passed: bool, detail: str) -> None:
        _CRITERIA[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
