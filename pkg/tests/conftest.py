from __future__ import annotations

import numpy as np
import pytest

from tubelabel.synth import NoiseConfig, SynthConfig, generate
from tubelabel.tensor_io import SoftSegMap

PROPERTY_CASES = 1000
"""Randomized cases per invariant property test."""


def random_softseg(rng: np.random.Generator, K: int, H: int, W: int) -> SoftSegMap:
    """A valid random soft map (normalized, peaked)."""
    logits = rng.random((K, H, W)) * 6.0
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    return SoftSegMap(p.astype(np.float32))


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """A pool of small generated datasets with varied configs.

    Returns (out_dir, manifests, cfg) triples; shared by the tests
    that sweep many generated maps.
    """
    root = tmp_path_factory.mktemp("corpus")
    datasets = []
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        cfg = SynthConfig(
            seed=i,
            num_clips=2,
            frames_per_clip=5,
            height=16,
            width=int(rng.integers(16, 25)),
            num_classes=int(rng.integers(2, 6)),
            shape_count=int(rng.integers(1, 4)),
            velocity_range=float(rng.integers(0, 3)),
            noise=NoiseConfig(
                label_flip_prob=float(rng.uniform(0, 0.4)),
                softmax_temperature=float(rng.uniform(0.05, 0.8)),
                flicker_prob=float(rng.uniform(0, 0.3)),
            ),
        )
        out = root / f"ds_{i:03d}"
        datasets.append((out, generate(cfg, out), cfg))
    return datasets
