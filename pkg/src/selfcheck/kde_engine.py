"""Per-(layer, class) Gaussian kernel density estimation and layer inference.

For every layer/class pair we keep the class's training vectors (columns with
variance below a threshold dropped), whiten them by a Cholesky factor of the
regularized sample covariance, and evaluate a product Gaussian kernel whose
width is the Scott factor m**(-1/(d+4)). Densities are handled in log space
throughout; the inferred class of a layer is the argmax over class densities.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .feature_store import FeatureTensorSet

_F64 = np.dtype("<f8")

_LOG_2PI = float(np.log(2.0 * np.pi))

_QUERY_CHUNK = 1024


@dataclass(eq=False)
class KdeCell:
    """Fitted density estimate for one (layer, class) pair."""

    kept_indices: np.ndarray  # sorted column indices surviving the variance filter
    samples: np.ndarray  # m x d float64, already restricted to kept_indices
    bandwidth_factor: float  # Scott factor m**(-1/(d+4))
    whitening: np.ndarray  # d x d lower-triangular, strictly positive diagonal
    log_norm_const: float

    _whitened: np.ndarray | None = field(default=None, repr=False)
    _mean: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def sample_mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self.samples.mean(axis=0)
        return self._mean

    def whitened_samples(self) -> np.ndarray:
        # Centering by the sample mean keeps the pairwise-distance expansion
        # numerically stable when the data sits far from the origin.
        if self._whitened is None:
            self._whitened = solve_triangular(
                self.whitening, (self.samples - self.sample_mean()).T, lower=True
            ).T
        return self._whitened


@dataclass(eq=False)
class KdeBundle:
    """All fitted cells for one model, indexed by (layer, class)."""

    t_var: float
    n_classes: int
    layer_names: list[str]
    layer_dims: list[int]
    cells: dict[tuple[int, int], KdeCell]

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)

    def cell(self, layer: int, cls: int) -> KdeCell:
        return self.cells[(layer, cls)]


@dataclass(frozen=True)
class LayerInference:
    """Per-layer verdict for one instance: densities for all classes + argmax."""

    inferred_class: int
    log_densities: np.ndarray  # length n_classes


@dataclass(eq=False)
class InferenceResult:
    """Layer inferences for a whole split: classes (n, L) and densities (n, L, C)."""

    classes: np.ndarray
    log_densities: np.ndarray
    layer_names: list[str]

    @property
    def n_instances(self) -> int:
        return self.classes.shape[0]

    @property
    def n_layers(self) -> int:
        return self.classes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.log_densities.shape[2]

    def at(self, instance: int, layer: int) -> LayerInference:
        return LayerInference(
            inferred_class=int(self.classes[instance, layer]),
            log_densities=self.log_densities[instance, layer],
        )


def _n_workers() -> int:
    raw = os.environ.get("SELFCHECK_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _scott_factor(m: int, dim: int) -> float:
    return float(m) ** (-1.0 / (dim + 4))


def _whitening_factor(samples: np.ndarray, mode: str) -> np.ndarray:
    """Lower-triangular factor of the regularized sample covariance.

    Degenerate cells (m < 2, or zero covariance) fall back to the identity.
    """
    m, dim = samples.shape
    if m < 2:
        return np.eye(dim)
    if mode == "diag":
        var = samples.var(axis=0, ddof=1)
        mean_var = float(var.mean())
        if mean_var <= 0.0:
            return np.eye(dim)
        return np.diag(np.sqrt(var + 1e-6 * mean_var))
    cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    mean_diag = float(np.trace(cov)) / dim
    if mean_diag <= 0.0:
        return np.eye(dim)
    lam = 1e-6 * mean_diag
    for _ in range(4):
        try:
            return np.linalg.cholesky(cov + lam * np.eye(dim))
        except np.linalg.LinAlgError:
            lam *= 100.0
    return np.eye(dim)


def _fit_cell(
    layer_name: str, cls: int, class_rows: np.ndarray, t_var: float, mode: str
) -> KdeCell:
    variances = class_rows.var(axis=0)
    kept = np.flatnonzero(variances >= t_var)
    if kept.size == 0:
        # Dead cell: every column is (near-)constant for this class. Keep the
        # single highest-variance column so the pipeline stays total.
        kept = np.array([int(np.argmax(variances))])
        warnings.warn(
            f"layer {layer_name!r} class {cls}: all {class_rows.shape[1]} columns "
            f"below variance threshold {t_var}; keeping column {kept[0]}",
            stacklevel=3,
        )
    samples = np.ascontiguousarray(class_rows[:, kept])
    m, dim = samples.shape
    h = _scott_factor(m, dim)
    whitening = _whitening_factor(samples, mode)
    log_det = float(np.log(np.diag(whitening)).sum())
    log_norm = -(np.log(m) + dim * np.log(h) + log_det + 0.5 * dim * _LOG_2PI)
    return KdeCell(
        kept_indices=kept.astype(np.int64),
        samples=samples,
        bandwidth_factor=h,
        whitening=whitening,
        log_norm_const=float(log_norm),
    )


def fit_kde(
    train: FeatureTensorSet, t_var: float = 1e-5, covariance_mode: str = "full"
) -> KdeBundle:
    """Fit one density cell per (layer, class) from labeled training activations."""
    if train.split_tag != "train":
        raise ValueError(f"expected the train split, got {train.split_tag!r}")
    if train.labels is None:
        raise ValueError("training set must carry labels")
    if covariance_mode not in ("full", "diag"):
        raise ValueError(f"unknown covariance_mode {covariance_mode!r}")

    counts = np.bincount(train.labels, minlength=train.n_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"classes absent from training set: {missing.tolist()}")

    class_masks = [train.labels == c for c in range(train.n_classes)]
    jobs = [
        (l, c, layer.layer_name, layer.data[class_masks[c]].astype(np.float64))
        for l, layer in enumerate(train.layers)
        for c in range(train.n_classes)
    ]

    def run(job):
        l, c, name, rows = job
        return (l, c), _fit_cell(name, c, rows, t_var, covariance_mode)

    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(run, jobs))
    else:
        fitted = [run(job) for job in jobs]

    return KdeBundle(
        t_var=float(t_var),
        n_classes=train.n_classes,
        layer_names=train.layer_names,
        layer_dims=[layer.dim for layer in train.layers],
        cells=dict(fitted),
    )


def _cell_log_density(cell: KdeCell, queries: np.ndarray) -> np.ndarray:
    """Log density of already-projected queries (k x d) under one cell."""
    a = solve_triangular(
        cell.whitening, (queries - cell.sample_mean()).T, lower=True
    ).T
    b = cell.whitened_samples()
    sq = (
        (a * a).sum(axis=1)[:, None]
        + (b * b).sum(axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(sq, 0.0, out=sq)
    h2 = cell.bandwidth_factor**2
    return logsumexp(-0.5 * sq / h2, axis=1) + cell.log_norm_const


def log_density(bundle: KdeBundle, layer: int, cls: int, v: np.ndarray) -> float:
    """Log of the estimated density of a full-dimension layer vector ``v``."""
    v = np.asarray(v, dtype=np.float64)
    expected = bundle.layer_dims[layer]
    if v.shape != (expected,):
        raise ValueError(
            f"layer {layer} expects a vector of dimension {expected}, got {v.shape}"
        )
    cell = bundle.cell(layer, cls)
    return float(_cell_log_density(cell, v[cell.kept_indices][None, :])[0])


def infer_layers(bundle: KdeBundle, fset: FeatureTensorSet) -> InferenceResult:
    """Evaluate all cells on every instance; per layer, infer the argmax class.

    Density-argmax ties resolve to the lowest class id.
    """
    if fset.layer_names != bundle.layer_names:
        raise ValueError(
            f"layer names differ from the fitted bundle: "
            f"{fset.layer_names} vs {bundle.layer_names}"
        )
    for l, layer in enumerate(fset.layers):
        if layer.dim != bundle.layer_dims[l]:
            raise ValueError(
                f"layer {layer.layer_name!r}: dimension {layer.dim} != fitted "
                f"{bundle.layer_dims[l]}"
            )

    n, L, C = fset.n_instances, bundle.n_layers, bundle.n_classes
    dens = np.empty((n, L, C), dtype=np.float64)

    def run(job):
        l, c = job
        cell = bundle.cell(l, c)
        full = fset.layers[l].data
        out = np.empty(n, dtype=np.float64)
        for start in range(0, n, _QUERY_CHUNK):
            stop = min(start + _QUERY_CHUNK, n)
            queries = full[start:stop, cell.kept_indices].astype(np.float64)
            out[start:stop] = _cell_log_density(cell, queries)
        return l, c, out

    jobs = [(l, c) for l in range(L) for c in range(C)]
    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for l, c, out in results:
        dens[:, l, c] = out

    classes = dens.argmax(axis=2).astype(np.int64) if n else np.empty((0, L), np.int64)
    return InferenceResult(
        classes=classes, log_densities=dens, layer_names=list(bundle.layer_names)
    )


# -- persistence ---------------------------------------------------------


def save_kde_bundle(bundle: KdeBundle, path: str | Path) -> None:
    """Persist a bundle as bundle.json plus raw little-endian float64 files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cell_entries = []
    for l in range(bundle.n_layers):
        for c in range(bundle.n_classes):
            cell = bundle.cell(l, c)
            stem = f"cell_{l:03d}_{c:03d}"
            (path / f"{stem}_samples.f64").write_bytes(
                np.ascontiguousarray(cell.samples, dtype=_F64).tobytes()
            )
            (path / f"{stem}_whitening.f64").write_bytes(
                np.ascontiguousarray(cell.whitening, dtype=_F64).tobytes()
            )
            cell_entries.append(
                {
                    "layer": l,
                    "class": c,
                    "m": cell.m,
                    "dim": cell.dim,
                    "bandwidth_factor": cell.bandwidth_factor,
                    "log_norm_const": cell.log_norm_const,
                    "kept_indices": cell.kept_indices.tolist(),
                    "samples_file": f"{stem}_samples.f64",
                    "whitening_file": f"{stem}_whitening.f64",
                }
            )
    meta = {
        "t_var": bundle.t_var,
        "n_classes": bundle.n_classes,
        "layer_names": bundle.layer_names,
        "layer_dims": bundle.layer_dims,
        "cells": cell_entries,
    }
    (path / "bundle.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_kde_bundle(path: str | Path) -> KdeBundle:
    path = Path(path)
    meta = json.loads((path / "bundle.json").read_text(encoding="utf-8"))
    cells = {}
    for entry in meta["cells"]:
        m, dim = entry["m"], entry["dim"]
        samples = np.frombuffer(
            (path / entry["samples_file"]).read_bytes(), dtype=_F64
        ).reshape(m, dim)
        whitening = np.frombuffer(
            (path / entry["whitening_file"]).read_bytes(), dtype=_F64
        ).reshape(dim, dim)
        cells[(entry["layer"], entry["class"])] = KdeCell(
            kept_indices=np.asarray(entry["kept_indices"], dtype=np.int64),
            samples=samples.copy(),
            bandwidth_factor=float(entry["bandwidth_factor"]),
            whitening=whitening.copy(),
            log_norm_const=float(entry["log_norm_const"]),
        )
    return KdeBundle(
        t_var=float(meta["t_var"]),
        n_classes=int(meta["n_classes"]),
        layer_names=list(meta["layer_names"]),
        layer_dims=[int(d) for d in meta["layer_dims"]],
        cells=cells,
    )


def save_inference(result: InferenceResult, path: str | Path) -> None:
    """Persist an inference matrix (classes + log densities) for later stages."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "classes.u32").write_bytes(result.classes.astype("<u4").tobytes())
    (path / "log_densities.f64").write_bytes(
        np.ascontiguousarray(result.log_densities, dtype=_F64).tobytes()
    )
    meta = {
        "n": result.n_instances,
        "n_layers": result.n_layers,
        "n_classes": result.n_classes,
        "layer_names": result.layer_names,
        "classes_file": "classes.u32",
        "log_densities_file": "log_densities.f64",
    }
    (path / "inference.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_inference(path: str | Path) -> InferenceResult:
    path = Path(path)
    meta = json.loads((path / "inference.json").read_text(encoding="utf-8"))
    n, L, C = meta["n"], meta["n_layers"], meta["n_classes"]
    classes = (
        np.frombuffer((path / meta["classes_file"]).read_bytes(), dtype="<u4")
        .astype(np.int64)
        .reshape(n, L)
    )
    dens = (
        np.frombuffer((path / meta["log_densities_file"]).read_bytes(), dtype=_F64)
        .reshape(n, L, C)
        .copy()
    )
    return InferenceResult(
        classes=classes, log_densities=dens, layer_names=list(meta["layer_names"])
    )
