"""Deterministic synthetic benchmark: cluster data, staged features, flawed model.

Class-separated Gaussian clusters are pushed through a fixed chain of random
affine+tanh stages; each stage's output is dumped with per-stage observation
noise that shrinks with depth, so early layers are weakly informative and deep
layers strongly informative. A configurable number of stages is replaced by
label-independent noise. Predictions come from a deliberately imperfect
classifier: true labels flipped to a random other class at a configured rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feature_store import FeatureTensorSet, LayerMatrix, save_feature_dump


@dataclass(eq=False)
class SynthBench:
    train: FeatureTensorSet
    valid: FeatureTensorSet
    test: FeatureTensorSet
    noise_layers: list[int]
    seed: int
    error_rate: float

    @property
    def splits(self) -> dict[str, FeatureTensorSet]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def noise_layer_positions(n_layers: int, count: int) -> list[int]:
    """Evenly spread noise-stage indices; deterministic in the sizes alone."""
    return [((j + 1) * n_layers) // (count + 1) - 1 for j in range(count)]


def synth_bench(
    seed: int,
    n_per_class: int = 2000,
    n_classes: int = 3,
    n_layers: int = 6,
    noise_layer_count: int = 1,
    error_rate: float = 0.12,
    base_dim: int = 8,
    hidden_dim: int = 10,
    separation: float = 3.5,
    input_noise: float = 1.0,
    obs_noise_first: float = 2.0,
    obs_noise_last: float = 0.2,
) -> SynthBench:
    """Generate train/valid/test feature sets, fully deterministic per seed."""
    if n_classes < 2 or n_layers < 2:
        raise ValueError("need n_classes >= 2 and n_layers >= 2")
    if not 0 <= noise_layer_count < n_layers:
        raise ValueError("noise_layer_count must be in [0, n_layers)")
    if not 0.0 <= error_rate < 1.0:
        raise ValueError("error_rate must be in [0, 1)")

    rng = np.random.default_rng(seed)

    # Cluster centers: orthonormal directions when the base space allows.
    raw = rng.standard_normal((base_dim, max(n_classes, 2)))
    q, _ = np.linalg.qr(raw)
    if n_classes <= base_dim:
        centers = separation * q[:, :n_classes].T
    else:
        dirs = rng.standard_normal((n_classes, base_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = separation * dirs

    def semi_orthogonal(a: int, b: int) -> np.ndarray:
        # Distance-preserving a x b map so class margins survive the chain.
        g = rng.standard_normal((max(a, b), min(a, b)))
        qm, _ = np.linalg.qr(g)
        return qm.T if a <= b else qm

    dims = [base_dim] + [hidden_dim] * n_layers
    stages = [
        (
            semi_orthogonal(dims[l], dims[l + 1]),
            rng.standard_normal(dims[l + 1]) * 0.05,
        )
        for l in range(n_layers)
    ]
    noise_layers = noise_layer_positions(n_layers, noise_layer_count)
    # Geometric decay keeps several deep layers comparably strong, so layer
    # combinations (not a single dominant layer) win the selection searches.
    if obs_noise_first > 0 and obs_noise_last > 0:
        obs_sigma = np.geomspace(obs_noise_first, obs_noise_last, n_layers)
    else:
        obs_sigma = np.linspace(obs_noise_first, obs_noise_last, n_layers)

    def make_split(tag: str) -> FeatureTensorSet:
        n = n_per_class * n_classes
        labels = rng.permutation(np.repeat(np.arange(n_classes), n_per_class))
        x = centers[labels] + input_noise * rng.standard_normal((n, base_dim))

        layers = []
        signal = x
        for l, (w, b) in enumerate(stages):
            signal = np.tanh(signal @ w + b)
            if l in noise_layers:
                data = rng.standard_normal((n, dims[l + 1]))
            else:
                data = signal + obs_sigma[l] * rng.standard_normal((n, dims[l + 1]))
            layers.append(
                LayerMatrix(f"stage{l:02d}", "dense", data.astype(np.float32))
            )

        flip = rng.random(n) < error_rate
        offsets = rng.integers(1, n_classes, size=n)
        predictions = np.where(flip, (labels + offsets) % n_classes, labels)

        return FeatureTensorSet(
            split_tag=tag,
            layers=tuple(layers),
            labels=labels.astype(np.int64),
            predictions=predictions.astype(np.int64),
            n_classes=n_classes,
        )

    return SynthBench(
        train=make_split("train"),
        valid=make_split("valid"),
        test=make_split("test"),
        noise_layers=noise_layers,
        seed=seed,
        error_rate=error_rate,
    )


def save_synth_bench(bench: SynthBench, out_dir: str | Path) -> dict[str, str]:
    """Write the three dumps under ``out_dir``; returns split -> path."""
    out_dir = Path(out_dir)
    paths = {}
    for tag, fset in bench.splits.items():
        split_dir = out_dir / tag
        save_feature_dump(fset, split_dir)
        paths[tag] = str(split_dir)
    return paths
