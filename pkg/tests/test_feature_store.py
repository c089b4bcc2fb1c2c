import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfcheck import (
    DumpError,
    FeatureTensorSet,
    LayerMatrix,
    load_feature_dump,
    mean_pool,
    save_feature_dump,
    synth_bench,
)


def make_set(n=10, dims=(3, 5), n_classes=10, split="train", seed=0, labels=True):
    rng = np.random.default_rng(seed)
    layers = tuple(
        LayerMatrix(f"layer{i}", "dense", rng.standard_normal((n, d)).astype(np.float32))
        for i, d in enumerate(dims)
    )
    return FeatureTensorSet(
        split_tag=split,
        layers=layers,
        labels=rng.integers(0, n_classes, n) if labels else None,
        predictions=rng.integers(0, n_classes, n),
        n_classes=n_classes,
    )


def assert_sets_equal(a, b):
    assert a.split_tag == b.split_tag
    assert a.n_classes == b.n_classes
    assert a.layer_names == b.layer_names
    for la, lb in zip(a.layers, b.layers):
        assert la.kind == lb.kind
        assert la.data.tobytes() == lb.data.tobytes()
    if a.labels is None:
        assert b.labels is None
    else:
        assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.predictions, b.predictions)


def test_round_trip_three_layers(tmp_path):
    fset = make_set(n=10, dims=(3, 4, 5))
    save_feature_dump(fset, tmp_path / "d")
    loaded = load_feature_dump(tmp_path / "d")
    assert loaded.n_instances == 10
    assert loaded.n_layers == 3
    assert_sets_equal(fset, loaded)


def test_row_count_mismatch_across_layers(tmp_path):
    fset = make_set(n=10, dims=(3, 4))
    save_feature_dump(fset, tmp_path / "d")
    # Truncate one layer file to 9 rows and fix its checksum so the row check fires.
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    entry = manifest["layers"][1]
    fpath = tmp_path / "d" / entry["file"]
    raw = fpath.read_bytes()[: 9 * 4 * 4]
    fpath.write_bytes(raw)
    import hashlib

    entry["sha256"] = hashlib.sha256(raw).hexdigest()
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DumpError, match="row-count mismatch"):
        load_feature_dump(tmp_path / "d")


def test_empty_test_split(tmp_path):
    fset = FeatureTensorSet(
        split_tag="test",
        layers=(LayerMatrix("l0", "dense", np.empty((0, 3), np.float32)),),
        labels=None,
        predictions=np.empty(0, np.int64),
        n_classes=2,
    )
    save_feature_dump(fset, tmp_path / "d")
    assert (tmp_path / "d" / "manifest.json").is_file()
    assert (tmp_path / "d" / "l0.f32").stat().st_size == 0
    loaded = load_feature_dump(tmp_path / "d")
    assert loaded.n_instances == 0


def test_single_value_is_four_le_bytes(tmp_path):
    fset = FeatureTensorSet(
        split_tag="train",
        layers=(LayerMatrix("only", "dense", np.array([[0.5]], np.float32)),),
        labels=np.array([0]),
        predictions=np.array([0]),
        n_classes=1,
    )
    save_feature_dump(fset, tmp_path / "d")
    raw = (tmp_path / "d" / "only.f32").read_bytes()
    assert raw == struct.pack("<f", 0.5)
    assert len(raw) == 4


def test_double_round_trip_byte_identical(tmp_path):
    fset = make_set(n=17, dims=(2, 6), seed=3)
    save_feature_dump(fset, tmp_path / "d1")
    once = load_feature_dump(tmp_path / "d1")
    save_feature_dump(once, tmp_path / "d2")
    twice = load_feature_dump(tmp_path / "d2")
    for name in ("manifest.json", "layer0.f32", "layer1.f32", "labels.u32"):
        assert (tmp_path / "d1" / name).read_bytes() == (
            tmp_path / "d2" / name
        ).read_bytes()
    assert_sets_equal(once, twice)


def test_negative_zero_round_trips_bit_exact(tmp_path):
    data = np.array([[-0.0, 0.0], [np.float32(1e-44), -np.float32(3.4e38)]], np.float32)
    fset = FeatureTensorSet(
        split_tag="train",
        layers=(LayerMatrix("z", "dense", data),),
        labels=np.array([0, 1]),
        predictions=np.array([0, 1]),
        n_classes=2,
    )
    save_feature_dump(fset, tmp_path / "d")
    loaded = load_feature_dump(tmp_path / "d")
    assert loaded.layers[0].data.tobytes() == data.tobytes()


@settings(max_examples=25, deadline=None)
@given(
    data=arrays(
        np.float32,
        st.tuples(st.integers(1, 6), st.integers(1, 4)),
        elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
    )
)
def test_round_trip_any_finite_float32(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("dump")
    n = data.shape[0]
    fset = FeatureTensorSet(
        split_tag="valid",
        layers=(LayerMatrix("a", "conv_pooled", data),),
        labels=np.zeros(n, np.int64),
        predictions=np.zeros(n, np.int64),
        n_classes=1,
    )
    save_feature_dump(fset, path / "d")
    loaded = load_feature_dump(path / "d")
    assert loaded.layers[0].data.tobytes() == np.ascontiguousarray(data).tobytes()


def test_synthetic_net_dump_round_trip(tmp_path):
    bench = synth_bench(seed=11, n_per_class=200, n_classes=3, n_layers=4)
    save_feature_dump(bench.train, tmp_path / "train")
    loaded = load_feature_dump(tmp_path / "train")
    assert loaded.n_layers == 4
    assert loaded.n_classes == 3
    assert loaded.n_instances == 600
    assert_sets_equal(bench.train, loaded)


def test_missing_manifest(tmp_path):
    with pytest.raises(DumpError, match="missing manifest"):
        load_feature_dump(tmp_path)


def test_nan_rejected_with_layer_and_row(tmp_path):
    fset = make_set(n=5, dims=(3,))
    save_feature_dump(fset, tmp_path / "d")
    data = fset.layers[0].data.copy()
    data[3, 1] = np.nan
    raw = data.tobytes()
    (tmp_path / "d" / "layer0.f32").write_bytes(raw)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    import hashlib

    manifest["layers"][0]["sha256"] = hashlib.sha256(raw).hexdigest()
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DumpError, match=r"layer0.*row 3"):
        load_feature_dump(tmp_path / "d")


def test_checksum_mismatch_detected(tmp_path):
    fset = make_set(n=4, dims=(2,))
    save_feature_dump(fset, tmp_path / "d")
    raw = bytearray((tmp_path / "d" / "layer0.f32").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "d" / "layer0.f32").write_bytes(bytes(raw))
    with pytest.raises(DumpError, match="checksum mismatch"):
        load_feature_dump(tmp_path / "d")


def test_labels_length_mismatch_rejected(tmp_path):
    fset = make_set(n=6, dims=(2,))
    save_feature_dump(fset, tmp_path / "d")
    (tmp_path / "d" / "labels.u32").write_bytes(
        fset.labels[:5].astype("<u4").tobytes()
    )
    with pytest.raises(DumpError, match="labels length"):
        load_feature_dump(tmp_path / "d")


def test_class_id_out_of_range_rejected(tmp_path):
    fset = make_set(n=6, dims=(2,), n_classes=4)
    save_feature_dump(fset, tmp_path / "d")
    bad = fset.labels.copy()
    bad[0] = 4
    (tmp_path / "d" / "labels.u32").write_bytes(bad.astype("<u4").tobytes())
    with pytest.raises(DumpError, match="out of range"):
        load_feature_dump(tmp_path / "d")


def test_constructor_rejects_row_mismatch():
    with pytest.raises(DumpError, match="row-count mismatch"):
        FeatureTensorSet(
            split_tag="train",
            layers=(
                LayerMatrix("a", "dense", np.zeros((10, 2), np.float32)),
                LayerMatrix("b", "dense", np.zeros((9, 2), np.float32)),
            ),
            labels=np.zeros(10, np.int64),
            predictions=np.zeros(10, np.int64),
            n_classes=2,
        )


# -- mean pooling ------------------------------------------------------------


def test_mean_pool_two_by_two():
    block = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])  # 1x2x2x1
    np.testing.assert_allclose(mean_pool(block), [[2.5]])


def test_mean_pool_identity_on_single_pixel():
    block = np.array([[[[1.5, -2.0, 0.25]]]])  # 1x1x1x3
    np.testing.assert_allclose(mean_pool(block), [[1.5, -2.0, 0.25]])


def test_mean_pool_matches_naive_loop():
    rng = np.random.default_rng(5)
    block = rng.standard_normal((5, 4, 4, 8)).astype(np.float32)
    pooled = mean_pool(block)
    expected = np.zeros((5, 8))
    for i in range(5):
        for c in range(8):
            acc = 0.0
            for yy in range(4):
                for xx in range(4):
                    acc += float(block[i, yy, xx, c])
            expected[i, c] = acc / 16.0
    np.testing.assert_allclose(pooled, expected, rtol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mean_pool_spatial_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    block = rng.standard_normal((2, 3, 5, 4))
    flat = block.reshape(2, 15, 4)
    perm = rng.permutation(15)
    permuted = flat[:, perm, :].reshape(2, 3, 5, 4)
    np.testing.assert_allclose(mean_pool(block), mean_pool(permuted), rtol=1e-12)


def test_mean_pool_rejects_zero_spatial():
    with pytest.raises(ValueError, match="zero-sized"):
        mean_pool(np.empty((2, 0, 3, 4)))
