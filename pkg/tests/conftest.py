import functools

import numpy as np
import pytest

from busvid import synthgen, trainer


@functools.lru_cache(maxsize=32)
def small_case(label=1, seed=42, noise=0.0, motion=0.0):
    """Cached: treat the returned arrays as read-only."""
    spec = synthgen.default_case_spec(label, seed=seed, noise_sigma=noise,
                                      motion_amplitude=motion)
    video, truth = synthgen.generate_case(spec)
    return spec, video, truth


@pytest.fixture(scope="session")
def micro_config():
    return trainer.TrainConfig(epochs=2, warmup_epochs=0.5, micro=True, seed=3)


@pytest.fixture(scope="session")
def prepared_cases(micro_config):
    """Eight preprocessed micro cases shared by trainer-level tests."""
    cases = []
    for i in range(8):
        spec, video, truth, clinical = synthgen.make_case(i, i % 2, seed=77)
        case = synthgen.Case(video=video, truth=truth,
                             manifest={"class_label": i % 2, "clinical": clinical})
        cases.append(trainer.prepare_case(case, micro_config, case_id=f"case{i}"))
    return cases
