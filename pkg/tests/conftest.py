import numpy as np
import pytest

from greenseg.config import RunConfig
from greenseg.data import generate_phantoms, split_by_patient
from greenseg.models import ArchSpec, Family


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_phantoms():
    return generate_phantoms(64, 32, seed=0)


def learn_config(out_dir) -> RunConfig:
    """Attention-Squeeze-UNet base 8 on 256 phantoms, 30 epochs, lr_find on."""
    cfg = RunConfig()
    cfg.model = ArchSpec(Family.ATTN_SQUEEZE_UNET, base_channels=8, depth=4)
    cfg.data.n, cfg.data.side = 256, 64
    cfg.training.max_epochs = 30
    cfg.training.lr_find = True
    cfg.energy.mode = "modeled"
    cfg.output.dir = str(out_dir)
    cfg.output.run_name = "attn8"
    return cfg


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One full training run shared by the learnability, pruning,
    quantization and energy checks."""
    import time

    from greenseg.training import load_slices, train

    out = tmp_path_factory.mktemp("trained")
    cfg = learn_config(out)
    t0 = time.perf_counter()
    runlog = train(cfg)
    seconds = time.perf_counter() - t0
    train_set, val_set, test_set = split_by_patient(load_slices(cfg), seed=cfg.data.split_seed)
    return dict(cfg=cfg, runlog=runlog, model=runlog.model, seconds=seconds, out=out,
                train=train_set, val=val_set, test=test_set)
