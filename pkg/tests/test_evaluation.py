import math

import numpy as np
import pytest
import torch

from globalrep.data import ClassId, LabeledSample, bayes_oracle_accuracy, make_synthetic_gaussian
from globalrep.errors import ContractError, IntegrityError
from globalrep.evaluation import (
    NearestTrueMeanOracle, StandardEvalConfig, evaluate_generalized, evaluate_standard,
    generalized_metrics, heldout_registration_accuracy, predict_episode, predict_generalized,
    summarize,
)
from globalrep.features import IdentityExtractor
from globalrep.registration import RegistrationModule
from globalrep.synthesis import SynthesisConfig
from globalrep.trainer import GlobalRepModel

from miniature import naive_generalized_counts, random_generalized_fixture


class PerfectStub:
    def predict_episode(self, split, classes, support, query_rows, rng):
        return np.repeat(np.arange(len(classes)), len(query_rows[0]))


def identity_model(table, ids, ablation="FULL"):
    reg = RegistrationModule(torch.as_tensor(table, dtype=torch.float64), ids, embedding="identity")
    return GlobalRepModel(IdentityExtractor(len(table[0])), reg, ablation, SynthesisConfig(k_t=5)).double()


def test_perfect_predictor(small_gaussian):
    res = evaluate_standard(PerfectStub(), small_gaussian, StandardEvalConfig(n_test=2, n_few=3, episodes=20))
    assert res.mean == 1.0 and res.std == 0.0 and res.ci95 == 0.0


def test_summary_by_hand():
    res = summarize([1.0, 0.5, 0.75])
    assert res.mean == 0.75
    assert res.std == pytest.approx(math.sqrt((0.25 ** 2 * 2) / 3))
    assert res.ci95 == pytest.approx(1.96 * res.std / math.sqrt(3))


def test_generalized_metrics_fixture():
    # base classes 0, 1; novel class 2
    y_true = [0, 0, 1, 1, 2, 2]
    y_pred = [0, 0, 1, 2, 2, 0]
    m = generalized_metrics(y_true, y_pred, ["base", "base", "novel"])
    assert (m.acc_b, m.acc_n) == (0.75, 0.5)
    assert m.acc_a == pytest.approx(4 / 6)
    assert m.counts() == (3, 4, 1, 2)
    assert m.confusion[1, 2] == 1 and m.confusion.sum() == 6


def test_generalized_metrics_no_novel_is_nan():
    m = generalized_metrics([0, 1], [0, 0], ["base", "base"])
    assert math.isnan(m.acc_n) and m.acc_b == 0.5
    with pytest.raises(ContractError):
        generalized_metrics([], [], ["base"])


@pytest.mark.parametrize("ablation", ["FULL", "B"])
def test_generalized_matches_naive_loop(ablation):
    for seed in range(100):
        model, split = random_generalized_fixture(seed, ablation)
        assert evaluate_generalized(model, split).counts() == naive_generalized_counts(model, split)


def test_predict_generalized_distances_one_two_three():
    model = identity_model([[0.0, 2.0], [1.0, 0.0], [-3.0, 0.0]], ["a", "b", "c"])
    assert predict_generalized(model, np.zeros((1, 1, 1, 2))).tolist() == [1]


def test_predict_generalized_without_registration_uses_prototypes():
    model = identity_model([[0.0, 0.0], [1.0, 0.0]], ["a", "b"], ablation="B")
    protos = torch.tensor([[5.0, 0.0], [-5.0, 0.0]], dtype=torch.float64)
    x = np.array([[4.0, 0.0], [-1.0, 0.0]]).reshape(2, 1, 1, 2)
    assert predict_generalized(model, x, protos).tolist() == [0, 1]
    with pytest.raises(ContractError):
        predict_generalized(model, x)


def test_evaluate_generalized_class_mismatch(small_gaussian):
    model = identity_model([[0.0] * 6] * 3, ["x", "y", "z"])
    with pytest.raises(ContractError):
        evaluate_generalized(model, small_gaussian)


def test_two_way_hand_episode():
    model = identity_model([[0.0, 0.0], [10.0, 0.0]], ["a", "b"], ablation="B")
    support = [[LabeledSample(np.array([[[0.0, 0.0]]]), ClassId("a", "novel"), "a0")],
               [LabeledSample(np.array([[[10.0, 0.0]]]), ClassId("b", "novel"), "b0")]]
    q = np.array([[1.0, 0.0], [9.0, 1.0], [4.0, 0.0], [6.0, 0.0]]).reshape(4, 1, 1, 2)
    assert predict_episode(model, support, q, np.random.default_rng(0)).tolist() == [0, 1, 0, 1]
    bad = [[LabeledSample(np.zeros((1, 1, 2)), ClassId("zz", "novel"), "z0")]]
    with pytest.raises(ContractError):
        predict_episode(model, bad, q, np.random.default_rng(0))


def test_standard_eval_reproducible_and_seed_sensitive(small_gaussian):
    model = identity_model(np.array(small_gaussian.meta["means"]), small_gaussian.class_names)
    cfg = StandardEvalConfig(n_test=2, n_few=3, n_q_test=3, episodes=30, rng_seed=1)
    a = evaluate_standard(model, small_gaussian, cfg)
    b = evaluate_standard(model, small_gaussian, cfg)
    np.testing.assert_array_equal(a.accuracies, b.accuracies)
    c = evaluate_standard(model, small_gaussian, StandardEvalConfig(2, 3, 3, 30, rng_seed=2))
    assert not np.array_equal(a.accuracies, c.accuracies)


def test_standard_eval_errors(small_gaussian):
    with pytest.raises(ContractError):
        evaluate_standard(PerfectStub(), small_gaussian, StandardEvalConfig(n_test=5))
    with pytest.raises(IntegrityError):
        evaluate_standard(PerfectStub(), small_gaussian, StandardEvalConfig(n_test=2, n_q_test=50))
    with pytest.raises(ContractError):
        StandardEvalConfig(episodes=0)


def test_oracle_agrees_with_direct_bayes_accuracy():
    split = make_synthetic_gaussian(3, 2, 4, 10, 2, 200, 2.0, rng_seed=4)
    oracle = NearestTrueMeanOracle(split.meta["means"])
    res = evaluate_standard(oracle, split, StandardEvalConfig(n_test=2, n_few=2, n_q_test=200, episodes=1))
    assert res.mean == pytest.approx(bayes_oracle_accuracy(split, split.novel_indices))


def test_heldout_registration_on_true_means():
    split = make_synthetic_gaussian(3, 2, 8, 10, 5, 40, 12.0, rng_seed=0)
    model = identity_model(np.array(split.meta["means"]), split.class_names)
    assert heldout_registration_accuracy(model, split) == 1.0
