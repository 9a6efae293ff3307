from dataclasses import dataclass

import numpy as np
import pytest

from diffinf import diffusion as dm


@dataclass
class TinySetup:
    """A small trained 3-cluster world shared by influence/eval tests."""

    sched: dm.Schedule
    means: np.ndarray
    dataset: dm.Dataset
    heldout: dm.Dataset
    model: dm.DenoiserModel
    epochs: int
    avg_lr: float


@pytest.fixture(scope="session")
def tiny():
    sched = dm.make_schedule(200)
    means = dm.make_cluster_means(3, 8, 3.0, seed=5)
    dataset = dm.gen_clusters(dm.ClusterSpec(3, 40, 8, means, 0.25, seed=7))
    heldout = dm.gen_clusters(dm.ClusterSpec(3, 4, 8, means, 0.25, seed=8))
    result = dm.train(
        dm.init_model(8, 32, 3, seed=11), dataset,
        epochs=80, lr=0.08, batch=32, sched=sched, seed=13,
    )
    return TinySetup(sched, means, dataset, heldout, result.model,
                     result.epochs, result.avg_lr)
