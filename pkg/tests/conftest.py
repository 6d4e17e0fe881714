import time
from dataclasses import dataclass

import numpy as np
import pytest

from distillseg.preprocess import normalize_case
from distillseg.volume_io import generate_phantom


@pytest.fixture(scope="session")
def phantom_case():
    return generate_phantom(7, (32, 32, 32))


@pytest.fixture(scope="session")
def normalized_case(phantom_case):
    return normalize_case(phantom_case)


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(21, (16, 16, 16))


def random_nested_regions(rng: np.random.Generator, shape=(8, 8, 8)) -> np.ndarray:
    """Random binary (3, *shape) mask satisfying ET ⊆ TC ⊆ WT."""
    wt = (rng.random(shape) < 0.4).astype(np.uint8)
    tc = wt * (rng.random(shape) < 0.6).astype(np.uint8)
    et = tc * (rng.random(shape) < 0.6).astype(np.uint8)
    return np.stack([et, tc, wt])


@dataclass
class SmokeResult:
    trained: object
    cases: list
    steps: int
    elapsed_s: float


@pytest.fixture(scope="session")
def overfit_smoke():
    """Deliberate 200-step overfit of the desk UNet on two phantoms.

    Shared between the trainability gate and the sliding-window
    self-consistency check so the model is trained once per session.
    """
    from distillseg.models import NetworkKind, default_network_config
    from distillseg.training import OptimizerKind, OptimizerSpec, TrainConfig, train_model

    cases = [normalize_case(generate_phantom(s, (32, 32, 32))) for s in (11, 12)]
    config = TrainConfig(
        epochs=10,
        batch_size=2,
        patch_size=32,
        steps_per_epoch=20,
        optimizer=OptimizerSpec(OptimizerKind.ADAM, 5e-3, 1.0, 10),
        seed=0,
        augmentation=None,
        checkpoint_every=100,
        validate_every=100,
    )
    start = time.monotonic()
    trained = train_model(
        NetworkKind.UNET3D,
        cases,
        [],
        config,
        network_config=default_network_config(NetworkKind.UNET3D, scale="desk"),
    )
    elapsed = time.monotonic() - start
    return SmokeResult(trained=trained, cases=cases, steps=200, elapsed_s=elapsed)
