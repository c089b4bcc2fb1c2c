import numpy as np
import pytest

from selfcheck import (
    AdviceConfig,
    SearchOptions,
    select_advice_layers,
    select_alarm_layers,
    subset_vote_classes,
)

from oracles import brute_force_advice_select, random_inference_case


def build_configs(classes, dens, labels, preds, n_classes, opts=SearchOptions()):
    alarm = select_alarm_layers(classes, labels, preds, n_classes, opts)
    advice = select_advice_layers(
        classes, labels, preds, alarm, n_classes, opts, log_densities=dens
    )
    return alarm, advice


def assert_matches_oracle(cfg, alarm, classes, dens, labels, preds, n_classes):
    alarm_layers = [alarm.layers_for(c) for c in range(n_classes)]
    pos, neg, w_pos, w_neg = brute_force_advice_select(
        classes, labels, preds, alarm_layers, n_classes, dens=dens
    )
    for cp in range(n_classes):
        for ct in range(n_classes):
            assert cfg.pos_layers[cp][ct] == tuple(pos[cp][ct]), (cp, ct)
            assert cfg.neg_layers[cp][ct] == tuple(neg[cp][ct]), (cp, ct)
            assert cfg.w_pos[cp, ct] == w_pos[cp][ct], (cp, ct)
            assert cfg.w_neg[cp, ct] == w_neg[cp][ct], (cp, ct)


def test_single_class_weight_collapses_to_accuracy():
    n = 12
    classes = np.zeros((n, 3), dtype=np.int64)  # every layer infers the lone class
    dens = np.zeros((n, 3, 1))
    labels = np.zeros(n, dtype=np.int64)
    preds = np.zeros(n, dtype=np.int64)
    alarm, advice = build_configs(classes, dens, labels, preds, 1)
    # All layers agree everywhere: nothing alarms, so the positive branch is
    # empty (weight 0) and the negative branch covers everything with acc 1.
    assert advice.w_pos.shape == (1, 1)
    assert advice.w_pos[0, 0] == 0.0
    assert advice.w_neg[0, 0] == 1.0
    assert advice.pos_layers[0][0] == alarm.layers_for(0)


def test_two_class_positive_branch_matches_exhaustive():
    rng = np.random.default_rng(17)
    n, L, C = 120, 3, 2
    labels = rng.integers(0, C, n)
    flip = rng.random(n) < 0.3
    preds = np.where(flip, 1 - labels, labels)
    dens = rng.standard_normal((n, L, C))
    # Two informative layers, one noise layer.
    for l, err in ((0, 0.1), (1, 0.2)):
        wrong = rng.random(n) < err
        target = np.where(wrong, 1 - labels, labels)
        dens[np.arange(n), l, :] = -np.abs(dens[np.arange(n), l, :])
        dens[np.arange(n), l, target] = 1.0
    classes = dens.argmax(axis=2)
    alarm, advice = build_configs(classes, dens, labels, preds, C)
    assert_matches_oracle(advice, alarm, classes, dens, labels, preds, C)


@pytest.mark.filterwarnings("ignore:no validation instance")
def test_weight_doubles_with_member_count():
    # Branch composition fixed at 4 alarmed instances; the number of them whose
    # true label is 1 doubles from 2 to 4 while accuracy stays 1.
    C, L = 3, 1

    def scenario(n_label1):
        labels = np.array([1] * n_label1 + [2] * (4 - n_label1))
        preds = np.zeros(4, dtype=np.int64)
        classes = labels[:, None].copy()  # the single layer infers the label
        alarm = select_alarm_layers(classes, labels, preds, C)
        advice = select_advice_layers(classes, labels, preds, alarm, C)
        return advice.w_pos[0, 1]

    assert scenario(4) == pytest.approx(2 * scenario(2))


@pytest.mark.filterwarnings("ignore:no validation instance")
def test_empty_member_set_gets_alarm_layers_and_zero_weight():
    # No validation instance with true label 2 anywhere.
    classes, dens, labels, preds = random_inference_case(2, n=40, n_classes=3)
    labels = labels % 2
    preds = preds % 2
    alarm, advice = build_configs(classes, dens, labels, preds, 3)
    for cp in range(3):
        assert advice.w_pos[cp, 2] == 0.0
        assert advice.w_neg[cp, 2] == 0.0
        assert advice.pos_layers[cp][2] == alarm.layers_for(cp)


@pytest.mark.parametrize("seed", range(10))
def test_full_config_matches_brute_force(seed):
    classes, dens, labels, preds = random_inference_case(
        seed, n=45, n_layers=5, n_classes=3
    )
    alarm, advice = build_configs(classes, dens, labels, preds, 3)
    assert_matches_oracle(advice, alarm, classes, dens, labels, preds, 3)


def test_without_densities_ties_take_lowest_class():
    classes, dens, labels, preds = random_inference_case(33, n=40, n_layers=4)
    alarm = select_alarm_layers(classes, labels, preds, 3)
    advice = select_advice_layers(classes, labels, preds, alarm, 3)
    alarm_layers = [alarm.layers_for(c) for c in range(3)]
    pos, neg, w_pos, w_neg = brute_force_advice_select(
        classes, labels, preds, alarm_layers, 3, dens=None
    )
    for cp in range(3):
        for ct in range(3):
            assert advice.pos_layers[cp][ct] == tuple(pos[cp][ct])
            assert advice.w_pos[cp, ct] == w_pos[cp][ct]


def test_weights_shift_invariant_under_density_scaling():
    # Multiplying all of a layer's densities by a positive constant adds a
    # per-layer constant in log space; votes and tie-breaks are unchanged.
    classes, dens, labels, preds = random_inference_case(11, n=50, n_layers=4)
    shifted = dens + np.array([0.7, -2.0, 3.1, 0.0])[None, :, None]
    assert (shifted.argmax(axis=2) == classes).all()
    alarm, advice = build_configs(classes, dens, labels, preds, 3)
    alarm2, advice2 = build_configs(classes, shifted, labels, preds, 3)
    assert alarm2 == alarm
    np.testing.assert_array_equal(advice2.w_pos, advice.w_pos)
    assert advice2.pos_layers == advice.pos_layers
    assert advice2.neg_layers == advice.neg_layers


def test_determinism_and_round_trip(tmp_path):
    classes, dens, labels, preds = random_inference_case(21)
    _, advice_a = build_configs(classes, dens, labels, preds, 3)
    _, advice_b = build_configs(classes, dens, labels, preds, 3)
    assert advice_a.to_json() == advice_b.to_json()
    advice_a.save(tmp_path / "advice.json")
    loaded = AdviceConfig.load(tmp_path / "advice.json")
    assert loaded.to_json() == advice_a.to_json()


def test_class_permutation_equivariance():
    classes, dens, labels, preds = random_inference_case(13, n=70, n_layers=4)
    perm = np.array([1, 2, 0])
    alarm, advice = build_configs(classes, dens, labels, preds, 3)
    dens_p = dens[:, :, np.argsort(perm)]
    alarm_p, advice_p = build_configs(
        perm[classes], dens_p, perm[labels], perm[preds], 3
    )
    for cp in range(3):
        for ct in range(3):
            assert advice_p.pos_layers[perm[cp]][perm[ct]] == advice.pos_layers[cp][ct]
            assert advice_p.w_pos[perm[cp], perm[ct]] == advice.w_pos[cp, ct]
            assert advice_p.w_neg[perm[cp], perm[ct]] == advice.w_neg[cp, ct]


def test_subset_vote_classes_majority_and_tiebreak():
    classes = np.array([[0, 0, 1], [2, 1, 1], [0, 1, 2]])
    dens = np.zeros((3, 3, 3))
    dens[2, :, 2] = 5.0  # ties in row 2 resolve toward class 2
    votes = subset_vote_classes(classes, [0, 1, 2], dens)
    assert votes.tolist() == [0, 1, 2]
    votes_no_dens = subset_vote_classes(classes, [0, 1, 2])
    assert votes_no_dens.tolist() == [0, 1, 0]


def test_exhaustive_refuses_beyond_layer_limit():
    from selfcheck import AlarmConfig
    from selfcheck.alarm_selection import ClassAlarmChoice

    classes = np.zeros((5, 21), dtype=np.int64)
    labels = np.zeros(5, dtype=np.int64)
    alarm = AlarmConfig(n_layers=21, classes=(ClassAlarmChoice((0,), 0.0, 0),))
    with pytest.raises(ValueError, match="greedy"):
        select_advice_layers(classes, labels, labels, alarm, 1)


def test_config_invariants_enforced():
    with pytest.raises(ValueError, match="non-empty"):
        AdviceConfig(
            pos_layers=(((),),),
            neg_layers=(((0,),),),
            w_pos=np.zeros((1, 1)),
            w_neg=np.zeros((1, 1)),
        )
    with pytest.raises(ValueError, match="non-negative"):
        AdviceConfig(
            pos_layers=(((0,),),),
            neg_layers=(((0,),),),
            w_pos=np.array([[-0.5]]),
            w_neg=np.zeros((1, 1)),
        )
