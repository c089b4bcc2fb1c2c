#!/usr/bin/env python3
"""Dump per-layer activations of a trained Keras model in the checker's format.

Runs the model over one dataset split and writes a dump directory holding
manifest.json, one raw little-endian float32 file per layer, and raw uint32
label/prediction files, exactly as the checking pipeline consumes them.
Convolutional (rank >= 3) layer outputs are mean-pooled over their spatial
axes to one value per channel; predictions are the argmax of the model's
output layer.

Usage:
    extract.py --model model.keras --data data.npz --split train --out DIR
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")


class ExtractError(ValueError):
    """Bad model/dataset/layer-filter combination."""


@dataclass
class ExtractorSpec:
    model_path: str
    data_path: str
    split: str
    out_dir: str
    layer_names: list[str] | None = None  # None: every non-input layer
    batch_size: int = 32
    limit: int | None = None  # optional cap on the split size


def _load_split(data_path: str, split: str, limit: int | None):
    """Dataset file: .npz with x_<split>/y_<split> arrays (or plain x/y)."""
    archive = np.load(data_path)
    x_key = f"x_{split}" if f"x_{split}" in archive else "x"
    y_key = f"y_{split}" if f"y_{split}" in archive else "y"
    if x_key not in archive:
        raise ExtractError(f"dataset {data_path} has no array {x_key!r}")
    x = archive[x_key].astype(np.float32)
    y = archive[y_key].astype(np.int64) if y_key in archive else None
    if limit is not None:
        x = x[:limit]
        y = y[:limit] if y is not None else None
    if y is not None and len(y) != len(x):
        raise ExtractError(f"{len(y)} labels for {len(x)} inputs")
    return x, y


def _pick_layers(model, names: list[str] | None):
    from keras import layers as klayers

    candidates = [l for l in model.layers if not isinstance(l, klayers.InputLayer)]
    if names is None:
        return candidates
    by_name = {l.name: l for l in candidates}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ExtractError(
            f"layer names not found: {missing}; model has {sorted(by_name)}"
        )
    return [by_name[n] for n in names]


def _pool_block(block: np.ndarray) -> tuple[np.ndarray, str]:
    """Rank-2 outputs pass through; higher ranks get per-channel spatial means."""
    if block.ndim == 2:
        return block.astype(np.float32), "dense"
    if block.ndim < 2:
        raise ExtractError(f"cannot dump a rank-{block.ndim} layer output")
    spatial_axes = tuple(range(1, block.ndim - 1))
    pooled = block.astype(np.float32).mean(axis=spatial_axes, dtype=np.float32)
    return pooled, "conv_pooled"


def _safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def extract(spec: ExtractorSpec) -> dict:
    """Run the model over the split and write one dump directory."""
    import keras

    if spec.split not in SPLITS:
        raise ExtractError(f"split must be one of {SPLITS}, got {spec.split!r}")
    model = keras.models.load_model(spec.model_path)
    x, y = _load_split(spec.data_path, spec.split, spec.limit)
    layers = _pick_layers(model, spec.layer_names)
    if not layers:
        raise ExtractError("no layers left after filtering")

    tap = keras.Model(inputs=model.inputs, outputs=[l.output for l in layers])
    outputs = tap.predict(x, batch_size=spec.batch_size, verbose=0)
    if len(layers) == 1:
        outputs = [outputs]

    final = model.predict(x, batch_size=spec.batch_size, verbose=0)
    if final.ndim != 2:
        raise ExtractError(f"output layer must be rank 2, got shape {final.shape}")
    n_classes = final.shape[1]
    predictions = final.argmax(axis=1).astype(np.int64)
    if y is not None and len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise ExtractError(f"labels outside [0, {n_classes})")

    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer, block in zip(layers, outputs):
        if block.shape[0] != len(x):
            raise ExtractError(
                f"layer {layer.name!r}: {block.shape[0]} rows for {len(x)} inputs"
            )
        pooled, kind = _pool_block(np.asarray(block))
        fname = _safe_filename(layer.name) + ".f32"
        raw = np.ascontiguousarray(pooled, dtype="<f4").tobytes()
        (out_dir / fname).write_bytes(raw)
        entries.append(
            {
                "name": layer.name,
                "kind": kind,
                "dim": int(pooled.shape[1]),
                "file": fname,
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )

    labels_file = None
    if y is not None:
        labels_file = "labels.u32"
        (out_dir / labels_file).write_bytes(y.astype("<u4").tobytes())
    (out_dir / "predictions.u32").write_bytes(predictions.astype("<u4").tobytes())

    manifest = {
        "format_version": FORMAT_VERSION,
        "split": spec.split,
        "n": int(len(x)),
        "n_classes": int(n_classes),
        "layers": entries,
        "labels_file": labels_file,
        "predictions_file": "predictions.u32",
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return {
        "out": str(out_dir),
        "split": spec.split,
        "n": int(len(x)),
        "n_layers": len(entries),
        "n_classes": int(n_classes),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Dump per-layer activations in the checker's format."
    )
    parser.add_argument("--model", required=True, help="trained .keras model file")
    parser.add_argument("--data", required=True, help=".npz with x_<split>/y_<split>")
    parser.add_argument("--split", required=True, choices=SPLITS)
    parser.add_argument("--out", required=True, help="dump directory to write")
    parser.add_argument(
        "--layers", default=None, help="comma-separated layer names (default: all)"
    )
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--limit", type=int, default=None)
    args = parser.parse_args(argv)

    spec = ExtractorSpec(
        model_path=args.model,
        data_path=args.data,
        split=args.split,
        out_dir=args.out,
        layer_names=args.layers.split(",") if args.layers else None,
        batch_size=args.batch_size,
        limit=args.limit,
    )
    try:
        summary = extract(spec)
    except (ExtractError, OSError) as exc:
        print(f"extract: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
