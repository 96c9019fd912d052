import numpy as np
import pytest

from protodiff import pipeline
from protodiff.config import load_config

MICRO_INI = """\
[data]
n = 20
size = 16
seed = 3

[diffusion]
timesteps = 8
epochs = 2
batch_size = 6
traj_stride = 3

[prototypes]
m = 3
epochs = 6
extractor_epochs = 3

[output]
dir = {out}
"""


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def micro_config_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    path = root / "micro.ini"
    path.write_text(MICRO_INI.format(out=(root / "out").as_posix()),
                    encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def micro_run(micro_config_path):
    """One full pipeline pass on a tiny config, shared across test modules."""
    cfg = load_config(micro_config_path)
    results = {"gen-data": pipeline.cmd_gen_data(cfg),
               "train-diffusion": pipeline.cmd_train_diffusion(cfg),
               "sample": pipeline.cmd_sample(cfg, count=3),
               "trajectory": pipeline.cmd_trajectory(cfg)}
    for head in ("ppnet", "eppnet", "protopool"):
        results[f"train-proto:{head}"] = pipeline.cmd_train_proto(cfg, head)
    results["explain"] = pipeline.cmd_explain(cfg, "eppnet")
    results["evaluate"] = pipeline.cmd_evaluate(cfg)
    results["compare"] = pipeline.cmd_compare(cfg)
    return {"cfg": cfg, "config_path": micro_config_path,
            "root": cfg.out_dir, "results": results}
