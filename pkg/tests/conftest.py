import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wavepress import audio_io, compression, model, training


@pytest.fixture(scope="session")
def paper_cfg():
    return model.ModelConfig()


@pytest.fixture(scope="session")
def paper_params(paper_cfg):
    return model.build(paper_cfg, init_seed=7)


@pytest.fixture(scope="session")
def desk_cfg():
    return model.desk_config()


@pytest.fixture(scope="session")
def tiny_cfg():
    return model.ModelConfig(skip_channels=8, residual_channels=4, audio_channels=16,
                             layers=2, dilation_cycle=2, mel_bins=6,
                             upsample_kernel=40, upsample_stride=10, sample_rate=1000)


@pytest.fixture(scope="session")
def desk_dataset():
    return audio_io.synth_dataset(seed=11, n_clips=3, duration=0.4)


@pytest.fixture(scope="session")
def overfit_result(desk_cfg, desk_dataset):
    """500 steps on a single clip; shared by training and precision tests."""
    import time

    cfg = training.TrainConfig(batch_size=1, segment_samples=1600,
                               total_steps=500, seed=21)
    start = time.time()
    result = training.train(desk_cfg, cfg, desk_dataset[:1])
    result.wall_time = time.time() - start
    return result


@pytest.fixture(scope="session")
def prune_run(desk_cfg, desk_dataset):
    """1000-step run with a cubic schedule to 75% sparsity, events every 10."""
    import time

    cfg = training.TrainConfig(batch_size=1, segment_samples=1600,
                               total_steps=1000, seed=23)
    schedules = compression.make_schedules(desk_cfg, final_sparsity=0.75,
                                           total_steps=1000, delta=10)
    start = time.time()
    result = training.train(desk_cfg, cfg, desk_dataset, schedules=schedules)
    result.wall_time = time.time() - start
    return result, schedules


@pytest.fixture(scope="session")
def two4_run(desk_cfg, desk_dataset):
    """Dense train, one-shot 2:4 prune, fixed-mask retrain."""
    cfg = training.TrainConfig(batch_size=1, segment_samples=1600,
                               total_steps=80, seed=29)
    dense, retrained = compression.one_shot_2to4_procedure(desk_cfg, cfg, desk_dataset[:1])
    return dense, retrained
