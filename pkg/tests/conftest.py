import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from abloop.denoiser import (  # noqa: E402
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    load_params,
    save_params,
    train,
)
from abloop.diffusion import make_schedule  # noqa: E402
from abloop.synthetic import make_synthetic_dataset  # noqa: E402

# Desk-scale training setup shared by the acceptance suite (spec numbers:
# 5000 steps, 200 synthetic complexes).
TRAIN_STEPS = 5000
TRAIN_COMPLEXES = 200
TRAIN_SEED = 42
DATASET_SEED = 100
HOLDOUT_SEED = 999

_SRC = Path(__file__).resolve().parents[1] / "src" / "abloop"
_CACHE = Path(__file__).resolve().parent / ".cache"


@pytest.fixture(scope="session")
def tiny_sched():
    # all betas >= 0.05 keep the SO(3) tables small and cheap
    return make_schedule(8, "linear", 0.05, 0.4)


@pytest.fixture(scope="session")
def tiny_model(tiny_sched):
    return Denoiser(DenoiserConfig(d=16, n_blocks=2, t_max=tiny_sched.t_max),
                    init_seed=3)


@pytest.fixture(scope="session")
def complexes():
    return make_synthetic_dataset(4, seed=11)


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in ("so3.py", "structio.py", "diffusion.py", "denoiser.py",
                 "synthetic.py"):
        h.update((_SRC / name).read_bytes())
    h.update(f"{TRAIN_STEPS}/{TRAIN_COMPLEXES}/{TRAIN_SEED}/{DATASET_SEED}"
             .encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_setup():
    """Desk-scale trained model, cached on disk keyed by source content.

    The first run trains for real (several minutes); unchanged reruns
    load the cached parameters and loss table.
    """
    sched = make_schedule(100, "cosine")
    dataset = make_synthetic_dataset(TRAIN_COMPLEXES, seed=DATASET_SEED)
    _CACHE.mkdir(exist_ok=True)
    tag = _source_digest()
    params_path = _CACHE / f"trained_{tag}.bin"
    losses_path = _CACHE / f"losses_{tag}.npy"
    if params_path.exists() and losses_path.exists():
        model = load_params(params_path)
        loss_table = [tuple(row) for row in np.load(losses_path)]
    else:
        for stale in _CACHE.glob("trained_*.bin"):
            stale.unlink()
        for stale in _CACHE.glob("losses_*.npy"):
            stale.unlink()
        result = train(dataset, sched, TrainConfig(steps=TRAIN_STEPS,
                                                   seed=TRAIN_SEED))
        model = result.model
        loss_table = result.loss_table
        save_params(model, params_path)
        np.save(losses_path, np.array(loss_table))
    return {"model": model, "sched": sched, "dataset": dataset,
            "loss_table": loss_table}
