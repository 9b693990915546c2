import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afif4.fusion import (
    ALL_LABELS,
    FACE,
    LOCAL_LABELS,
    BoostEnsemble,
    FeatureScore,
    FusionFormatError,
    alpha_from_error,
    enumerate_combinations,
    fusion_from_bytes,
    fusion_to_bytes,
    load_fusion,
    predict_adaboost,
    predict_adaboost_batch,
    predict_fusion,
    predict_fusion_batch,
    save_fusion,
    score_map,
    signed_score,
    train_adaboost,
    train_fusion,
    train_lda,
    training_error_bound,
)
from afif4.imagecore import FEMALE, MALE
from oracles import best_stump_error, boost_vote, power_set_nonempty


def ensemble(stumps, dim):
    comps, thrs, pols, alphas = zip(*stumps)
    return BoostEnsemble(dim, np.array(comps), np.array(thrs, float), np.array(pols),
                         np.array(alphas, float), np.full(len(stumps), 0.3))


def random_scores(rng, n, informative=None, labels=None):
    """Per-sample score dicts; ``informative`` names the label that follows the class."""
    out = []
    for i in range(n):
        d = {}
        for label in ALL_LABELS:
            c = int(rng.choice([MALE, FEMALE]))
            if label == informative:
                c = labels[i]
            d[label] = FeatureScore(label, c, float(rng.uniform(0.5, 1.0)))
        out.append(d)
    return out


class TestScores:
    @pytest.mark.parametrize("c,s,expected", [(1, 0.9, 0.9), (-1, 0.87, -0.87), (1, 0.5, 0.5)])
    def test_signed_score(self, c, s, expected):
        assert signed_score(c, s) == expected
        assert FeatureScore("nose", c, s).S == expected

    @pytest.mark.parametrize("c,s", [(1, 0.49), (-1, 1.01), (0, 0.7)])
    def test_invalid(self, c, s):
        with pytest.raises(ValueError):
            signed_score(c, s)

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            FeatureScore("ear", 1, 0.7)

    def test_score_map_order_free(self):
        scores = [FeatureScore(l, 1, 0.5 + 0.1 * i) for i, l in enumerate(ALL_LABELS)]
        assert score_map(scores) == score_map(list(reversed(scores)))
        with pytest.raises(KeyError):
            score_map(scores[:-1])


class TestCombinations:
    @pytest.mark.parametrize("n,count", [(1, 1), (3, 7), (4, 15)])
    def test_counts(self, n, count):
        assert len(enumerate_combinations([f"l{i}" for i in range(n)])) == count

    def test_power_set_oracle(self):
        for n in range(1, 11):
            labels = [f"l{i}" for i in range(n)]
            combos = enumerate_combinations(labels)
            assert len(combos) == 2 ** n - 1 == sum(math.comb(n, j) for j in range(1, n + 1))
            assert sorted(c.subset for c in combos) == sorted(power_set_nonempty(labels))
            assert [c.index for c in combos] == list(range(1, 2 ** n))

    def test_face_first_and_canonical(self):
        scores = {label: 0.1 * (i + 5) for i, label in enumerate(ALL_LABELS)}
        for comb in enumerate_combinations(LOCAL_LABELS):
            assert comb.layout[0] == FACE
            v = comb.vector(scores)
            assert v[0] == scores[FACE]
            assert list(comb.subset) == [l for l in LOCAL_LABELS if l in comb.subset]

    def test_errors(self):
        with pytest.raises(ValueError):
            enumerate_combinations([])
        with pytest.raises(ValueError):
            enumerate_combinations(["a", "a"])
        with pytest.raises(ValueError):
            enumerate_combinations([str(i) for i in range(17)])


class TestAdaBoost:
    def test_alpha_quarter(self):
        assert abs(alpha_from_error(0.25) - 0.5 * math.log(3)) < 1e-12

    def test_alpha_clamped(self):
        assert math.isfinite(alpha_from_error(0.0)) and math.isfinite(alpha_from_error(1.0))

    def test_separable_one_dimensional(self, rng):
        x = np.concatenate([rng.uniform(-1, -0.1, 20), rng.uniform(0.1, 1, 20)])
        y = np.where(x > 0, MALE, FEMALE)
        ens = train_adaboost(x[:, None], y, T=1)
        assert np.all(predict_adaboost_batch(ens, x[:, None]) == y)
        assert -0.1 < ens.thresholds[0] < 0.1

    def test_first_round_matches_exhaustive_search(self, rng):
        x = rng.normal(size=30)
        y = np.where(rng.random(30) < 0.5, MALE, FEMALE)
        y[:2] = [MALE, FEMALE]
        ens = train_adaboost(x[:, None], y, T=1)
        assert abs(ens.epsilons[0] - best_stump_error(x, y, np.full(30, 1 / 30))) < 1e-12

    def test_error_bound_random_data(self, rng):
        for _ in range(20):
            n, d = int(rng.integers(20, 80)), int(rng.integers(1, 6))
            X = rng.normal(size=(n, d))
            y = np.where(rng.random(n) < 0.5, MALE, FEMALE)
            y[:2] = [MALE, FEMALE]
            ens = train_adaboost(X, y, T=int(rng.integers(1, 30)))
            err = np.mean(predict_adaboost_batch(ens, X) != y)
            assert err <= training_error_bound(ens) + 1e-12

    def test_tie_breaks(self):
        # Both components separate the data perfectly; component 0 must win.
        X = np.array([[0.0, 0.0], [1.0, 1.0]])
        ens = train_adaboost(X, [FEMALE, MALE], T=1)
        assert ens.components[0] == 0 and ens.polarities[0] == 1

    def test_deterministic(self, rng):
        X = rng.normal(size=(40, 3))
        y = np.where(X[:, 0] + rng.normal(size=40) > 0, MALE, FEMALE)
        assert train_adaboost(X, y, 20).equals(train_adaboost(X, y, 20))

    def test_errors(self):
        with pytest.raises(ValueError):
            train_adaboost([[1.0], [2.0]], [MALE, MALE])
        with pytest.raises(ValueError):
            train_adaboost([[1.0], [2.0]], [MALE, 0])
        with pytest.raises(ValueError):
            train_adaboost([[1.0], [2.0]], [MALE, FEMALE], T=0)

    def test_predict_examples(self):
        assert predict_adaboost(ensemble([(0, 0.0, 1, 1.0)], 1), [0.5]) == MALE
        tie = ensemble([(0, 0.0, 1, 0.6), (0, 0.0, -1, 0.6)], 1)
        assert predict_adaboost(tie, [0.5]) == MALE
        with pytest.raises(ValueError):
            predict_adaboost(tie, [0.5, 0.1])

    def test_scalar_oracle(self, rng):
        for _ in range(20):
            dim, T = int(rng.integers(1, 6)), int(rng.integers(1, 10))
            stumps = [(int(rng.integers(dim)), float(rng.normal()), int(rng.choice([-1, 1])),
                       float(rng.uniform(0.01, 2))) for _ in range(T)]
            ens = ensemble(stumps, dim)
            v = rng.normal(size=dim)
            assert predict_adaboost(ens, v) == boost_vote(stumps, v)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100))
    def test_alpha_scale_invariance(self, k):
        rng = np.random.default_rng(3)
        stumps = [(int(rng.integers(3)), float(rng.normal()), int(rng.choice([-1, 1])),
                   float(rng.uniform(0.1, 1))) for _ in range(7)]
        scaled = [(c, t, p, a * k) for c, t, p, a in stumps]
        X = rng.normal(size=(50, 3))
        assert np.array_equal(predict_adaboost_batch(ensemble(stumps, 3), X),
                              predict_adaboost_batch(ensemble(scaled, 3), X))


class TestLDA:
    def test_separated_component(self, rng):
        y = np.where(rng.random(60) < 0.5, MALE, FEMALE)
        Y = np.where(rng.random((60, 15)) < 0.5, 1.0, -1.0)
        Y[:, 4] = y
        lda = train_lda(Y, y)
        assert np.all(lda.predict(Y) == y)

    @pytest.mark.xfail(strict=True, reason="15 noise features on 200 samples give about 61% "
                                           "training accuracy from in-sample optimism")
    def test_identical_distributions(self, rng):
        accs = []
        for _ in range(5):
            Y = np.where(rng.random((200, 15)) < 0.5, 1.0, -1.0)
            y = np.where(rng.random(200) < 0.5, MALE, FEMALE)
            lda = train_lda(Y, y)
            assert np.all(np.isfinite(lda.weights))
            accs.append(np.mean(lda.predict(Y) == y))
        assert all(0.4 <= a <= 0.6 for a in accs)

    def test_identical_distributions_held_out(self, rng):
        for _ in range(5):
            Y = np.where(rng.random((400, 15)) < 0.5, 1.0, -1.0)
            y = np.where(rng.random(400) < 0.5, MALE, FEMALE)
            lda = train_lda(Y[:200], y[:200])
            assert np.all(np.isfinite(lda.weights))
            assert 0.4 <= np.mean(lda.predict(Y[200:]) == y[200:]) <= 0.6

    def test_collinear_inputs(self, rng):
        y = np.where(rng.random(30) < 0.5, MALE, FEMALE)
        Y = np.tile(np.where(rng.random(30) < 0.5, 1.0, -1.0)[:, None], (1, 15))
        assert np.all(np.isfinite(train_lda(Y, y).weights))

    def test_full_shrinkage_is_mean_difference(self, rng):
        Y = rng.normal(size=(50, 15))
        y = np.where(rng.random(50) < 0.5, MALE, FEMALE)
        lda = train_lda(Y, y, shrinkage=1.0)
        mp = Y[y == MALE].mean(axis=0)
        mn = Y[y == FEMALE].mean(axis=0)
        assert np.max(np.abs(lda.weights - (mp - mn))) < 1e-12
        assert abs(lda.bias + 0.5 * (mp - mn) @ (mp + mn)) < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            train_lda(np.ones((3, 15)), [MALE] * 3)
        with pytest.raises(ValueError):
            train_lda(np.ones((2, 15)), [MALE, FEMALE], shrinkage=1.5)


class TestFusion:
    def test_face_only_informative(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 80)]
        scores = random_scores(rng, 80, FACE, y)
        model = train_fusion(scores, y, T=10)
        assert len(model.ensembles) == 15
        assert np.all(predict_fusion_batch(model, scores) == y)
        probe = {l: 0.6 for l in ALL_LABELS}
        probe[FACE] = 0.99
        assert predict_fusion(model, probe) == MALE

    @pytest.mark.xfail(strict=True, reason="50 stumps per ensemble memorise random labels on "
                                           "200 samples; training accuracy lands near 80%")
    def test_random_labels_bounded(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 200)]
        scores = random_scores(rng, 200)
        model = train_fusion(scores, y)
        acc = np.mean(predict_fusion_batch(model, scores) == y)
        assert 0.40 <= acc <= 0.75

    def test_random_labels_held_out_is_chance(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 400)]
        scores = random_scores(rng, 400)
        model = train_fusion(scores[:200], y[:200])
        acc = np.mean(predict_fusion_batch(model, scores[200:]) == y[200:])
        assert 0.35 <= acc <= 0.65

    def test_deterministic(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 60)]
        scores = random_scores(rng, 60, "nose", y)
        assert train_fusion(scores, y, T=8).equals(train_fusion(scores, y, T=8))

    def test_order_invariance(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 40)]
        scores = random_scores(rng, 40, "mouth", y)
        model = train_fusion(scores, y, T=5)
        one = list(scores[3].values())
        preds = {predict_fusion(model, list(p)) for p in permutations(one)}
        assert len(preds) == 1

    def test_compositional_oracle(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 50)]
        scores = random_scores(rng, 50, "eye-left", y)
        model = train_fusion(scores, y, T=6)
        for s in scores[:10]:
            m = score_map(s)
            votes = [predict_adaboost(e, c.vector(m))
                     for c, e in zip(enumerate_combinations(), model.ensembles)]
            d = model.discriminant
            expect = MALE if float(np.dot(d.weights, votes) + d.bias) >= 0 else FEMALE
            assert predict_fusion(model, s) == expect

    def test_missing_score(self, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 20)]
        scores = random_scores(rng, 20, FACE, y)
        model = train_fusion(scores, y, T=3)
        partial = dict(scores[0])
        del partial["nose"]
        with pytest.raises(KeyError):
            predict_fusion(model, partial)

    def test_serialization(self, tmp_path, rng):
        y = [int(v) for v in rng.choice([MALE, FEMALE], 30)]
        scores = random_scores(rng, 30, FACE, y)
        model = train_fusion(scores, y, T=4)
        save_fusion(model, tmp_path / "f.affu")
        assert load_fusion(tmp_path / "f.affu").equals(model)
        data = fusion_to_bytes(model)
        with pytest.raises(FusionFormatError):
            fusion_from_bytes(b"NOPE" + data[4:])
        with pytest.raises(FusionFormatError):
            fusion_from_bytes(data[:-5])
        with pytest.raises(FusionFormatError):
            fusion_from_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
