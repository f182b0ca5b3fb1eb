import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TINY_CONFIG = {
    "sim": {"T": 16, "seed": 5, "kp": 0.5, "kd": 1.42},
    "model": {"d": 2, "T": 16, "K": 2, "m": 4, "embed_dim": 8, "encoder_depth": 1,
              "encoder_heads": 2, "decoder_layers": 1, "decoder_heads": 2, "t_max": 16},
    "train": {"epochs": 2, "batch_size": 16, "checkpoint_every_steps": 0, "xi_kl": 8.0},
}


@pytest.fixture(scope="session")
def tiny_cfg_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return str(p)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_cfg_file):
    from motiongen.cli import main

    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "--config", tiny_cfg_file, "--out", str(out),
               "--n-train", "32", "--n-val", "8", "--n-test", "8", "--force"])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_cfg_file, tiny_dataset_dir):
    from motiongen.cli import main

    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(tiny_dataset_dir), "--out", str(out),
               "--config", tiny_cfg_file, "--quiet", "--force"])
    assert rc == 0
    return out / "checkpoint.mgck"
