"""On-disk activation dump format and in-memory dataset types.

A dump is a directory with a ``manifest.json``, one raw ``.f32`` tensor file
per layer (little-endian float32, row-major, no header), and raw ``.u32``
label/prediction files. All integers are little-endian; tensor files carry
sha256 checksums in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")
LAYER_KINDS = ("dense", "conv_pooled")

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class DumpError(ValueError):
    """A dump directory is missing, malformed, or internally inconsistent."""


@dataclass(frozen=True)
class LayerMatrix:
    """Per-layer activation matrix for one dataset split: n rows, d_l columns."""

    layer_name: str
    kind: str
    data: np.ndarray  # n x d_l, float32

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DumpError(f"layer {self.layer_name!r}: unknown kind {self.kind!r}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DumpError(f"layer {self.layer_name!r}: data must be 2-D, got {data.ndim}-D")
        if data.shape[1] < 1:
            raise DumpError(f"layer {self.layer_name!r}: dimension must be >= 1")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class FeatureTensorSet:
    """Activation matrices for every layer of one split, plus labels/predictions.

    ``labels`` may be None (unlabeled deployment data); ``predictions`` is the
    model's output class per instance and is always present.
    """

    split_tag: str
    layers: tuple[LayerMatrix, ...]
    labels: np.ndarray | None  # n, int64 in [0, n_classes)
    predictions: np.ndarray  # n, int64 in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise DumpError(f"unknown split {self.split_tag!r}")
        if self.n_classes < 1:
            raise DumpError("n_classes must be positive")
        layers = tuple(self.layers)
        if not layers:
            raise DumpError("a feature set needs at least one layer")
        names = [l.layer_name for l in layers]
        if len(set(names)) != len(names):
            raise DumpError("layer names must be unique")
        n = layers[0].n_rows
        for l in layers:
            if l.n_rows != n:
                raise DumpError(
                    f"row-count mismatch: layer {l.layer_name!r} has {l.n_rows} "
                    f"rows, expected {n}"
                )
        preds = np.ascontiguousarray(self.predictions, dtype=np.int64)
        _check_class_ids("predictions", preds, n, self.n_classes)
        object.__setattr__(self, "predictions", preds)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            _check_class_ids("labels", labels, n, self.n_classes)
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "layers", layers)

    @property
    def n_instances(self) -> int:
        return self.layers[0].n_rows

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def layer_names(self) -> list[str]:
        return [l.layer_name for l in self.layers]


def _check_class_ids(what: str, ids: np.ndarray, n: int, n_classes: int) -> None:
    if ids.ndim != 1 or len(ids) != n:
        raise DumpError(f"{what} length {len(ids)} != instance count {n}")
    if n and (ids.min() < 0 or ids.max() >= n_classes):
        raise DumpError(f"{what}: class-id out of range [0, {n_classes})")


def _reject_nonfinite(name: str, data: np.ndarray) -> None:
    finite_rows = np.isfinite(data).all(axis=1)
    if not finite_rows.all():
        row = int(np.flatnonzero(~finite_rows)[0])
        raise DumpError(f"layer {name!r}: NaN/Inf entry at row {row}")


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_feature_dump(fset: FeatureTensorSet, path: str | Path) -> None:
    """Write ``fset`` to ``path`` so that a load round-trips bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    layer_entries = []
    for layer in fset.layers:
        fname = _safe_filename(layer.layer_name) + ".f32"
        raw = np.ascontiguousarray(layer.data, dtype=_F32).tobytes()
        (path / fname).write_bytes(raw)
        layer_entries.append(
            {
                "name": layer.layer_name,
                "kind": layer.kind,
                "dim": layer.dim,
                "file": fname,
                "sha256": _sha256(raw),
            }
        )

    labels_file = None
    if fset.labels is not None:
        labels_file = "labels.u32"
        (path / labels_file).write_bytes(fset.labels.astype(_U32).tobytes())
    (path / "predictions.u32").write_bytes(fset.predictions.astype(_U32).tobytes())

    manifest = {
        "format_version": FORMAT_VERSION,
        "split": fset.split_tag,
        "n": fset.n_instances,
        "n_classes": fset.n_classes,
        "layers": layer_entries,
        "labels_file": labels_file,
        "predictions_file": "predictions.u32",
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_feature_dump(path: str | Path) -> FeatureTensorSet:
    """Load and validate a dump directory written by :func:`save_feature_dump`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DumpError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DumpError(f"unreadable manifest {manifest_path}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DumpError(f"unsupported format_version {version!r}")
    n = int(manifest["n"])
    n_classes = int(manifest["n_classes"])

    layers = []
    for entry in manifest["layers"]:
        raw = _read_file(path, entry["file"])
        if entry.get("sha256") and _sha256(raw) != entry["sha256"]:
            raise DumpError(f"checksum mismatch for layer file {entry['file']!r}")
        dim = int(entry["dim"])
        values = np.frombuffer(raw, dtype=_F32)
        if dim < 1 or values.size % dim:
            raise DumpError(
                f"layer {entry['name']!r}: file holds {values.size} values, "
                f"not a multiple of dim {dim}"
            )
        data = values.reshape(-1, dim).copy()
        if data.shape[0] != n:
            raise DumpError(
                f"row-count mismatch: layer {entry['name']!r} has {data.shape[0]} "
                f"rows, manifest says n={n}"
            )
        _reject_nonfinite(entry["name"], data)
        layers.append(LayerMatrix(entry["name"], entry["kind"], data))

    labels = None
    if manifest.get("labels_file"):
        labels = _read_u32(path, manifest["labels_file"], n, "labels")
    predictions = _read_u32(path, manifest["predictions_file"], n, "predictions")

    return FeatureTensorSet(
        split_tag=manifest["split"],
        layers=tuple(layers),
        labels=labels,
        predictions=predictions,
        n_classes=n_classes,
    )


def _read_file(path: Path, fname: str) -> bytes:
    fpath = path / fname
    if not fpath.is_file():
        raise DumpError(f"missing file {fpath}")
    return fpath.read_bytes()


def _read_u32(path: Path, fname: str, n: int, what: str) -> np.ndarray:
    values = np.frombuffer(_read_file(path, fname), dtype=_U32).astype(np.int64)
    if len(values) != n:
        raise DumpError(f"{what} length {len(values)} != instance count {n}")
    return values


def mean_pool(block: np.ndarray) -> np.ndarray:
    """Reduce an n x H x W x Ch activation block to per-channel spatial means.

    Accumulates in float64; output is n x Ch float64.
    """
    block = np.asarray(block)
    if block.ndim != 4:
        raise ValueError(f"expected an n x H x W x Ch block, got {block.ndim}-D")
    n, h, w, ch = block.shape
    if h < 1 or w < 1 or ch < 1:
        raise ValueError(f"zero-sized spatial/channel dimension in shape {block.shape}")
    return block.astype(np.float64).mean(axis=(1, 2))
