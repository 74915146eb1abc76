from pathlib import Path

import pytest

from glandseg.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run_cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"glandseg {' '.join(map(str, argv))} exited with {code}"


def smoke_pipeline(root, config=CONFIGS / "smoke.cfg", extra=()):
    """synth -> train -> segment with the smoke config; returns the directories."""
    root = Path(root)
    data, models, seg = root / "data", root / "models", root / "seg"
    run_cli("synth", "--config", config, "--out", data, *extra)
    run_cli("train", "--config", config, "--manifest", data / "train" / "manifest.txt", "--out", models, *extra)
    run_cli("segment", "--config", config, "--manifest", data / "test" / "manifest.txt",
            "--object-ckpt", models / "object.ckpt", "--separator-ckpt", models / "separator.ckpt",
            "--out", seg, *extra)
    return data, models, seg


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    return smoke_pipeline(tmp_path_factory.mktemp("smoke"))
