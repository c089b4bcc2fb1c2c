import numpy as np
import pytest

from selfcheck import fit_kde, infer_layers, save_synth_bench, synth_bench
from selfcheck.synth import noise_layer_positions


def test_same_seed_gives_byte_identical_dumps(tmp_path):
    for sub in ("a", "b"):
        bench = synth_bench(seed=7, n_per_class=40, n_classes=3, n_layers=4)
        save_synth_bench(bench, tmp_path / sub)
    for split in ("train", "valid", "test"):
        dir_a = tmp_path / "a" / split
        dir_b = tmp_path / "b" / split
        names = sorted(p.name for p in dir_a.iterdir())
        assert names == sorted(p.name for p in dir_b.iterdir())
        for name in names:
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    b1 = synth_bench(seed=1, n_per_class=30)
    b2 = synth_bench(seed=2, n_per_class=30)
    assert not np.array_equal(b1.train.layers[0].data, b2.train.layers[0].data)


def test_error_rate_close_to_configured():
    bench = synth_bench(
        seed=5,
        n_per_class=3334,  # ~10k instances
        n_classes=3,
        noise_layer_count=0,
        error_rate=0.12,
        separation=6.0,
    )
    for fset in (bench.train, bench.valid, bench.test):
        err = np.mean(fset.labels != fset.predictions)
        assert err == pytest.approx(0.12, abs=0.02)


def test_split_shapes_and_labels():
    bench = synth_bench(seed=3, n_per_class=25, n_classes=4, n_layers=5)
    for tag, fset in bench.splits.items():
        assert fset.split_tag == tag
        assert fset.n_instances == 100
        assert fset.n_layers == 5
        assert fset.n_classes == 4
        assert set(np.unique(fset.labels)) == {0, 1, 2, 3}
        assert np.bincount(fset.labels).tolist() == [25] * 4


def test_noise_layer_positions_rule():
    assert noise_layer_positions(6, 0) == []
    assert noise_layer_positions(6, 1) == [2]
    assert noise_layer_positions(6, 2) == [1, 3]
    assert noise_layer_positions(8, 1) == [3]


def test_noise_layer_agreement_near_chance():
    bench = synth_bench(seed=11, n_per_class=400, n_classes=3, n_layers=4)
    bundle = fit_kde(bench.train, t_var=1e-5)
    result = infer_layers(bundle, bench.valid)
    noise = bench.noise_layers[0]
    agreement = np.mean(result.classes[:, noise] == bench.valid.labels)
    assert agreement == pytest.approx(1 / 3, abs=0.05)
    # Informative deep layers track the label far better than chance.
    deep = np.mean(result.classes[:, -1] == bench.valid.labels)
    assert deep > 0.8


def test_invalid_sizes_rejected():
    with pytest.raises(ValueError):
        synth_bench(seed=0, n_classes=1)
    with pytest.raises(ValueError):
        synth_bench(seed=0, n_layers=1)
    with pytest.raises(ValueError):
        synth_bench(seed=0, noise_layer_count=6, n_layers=6)
    with pytest.raises(ValueError):
        synth_bench(seed=0, error_rate=1.0)
