import math

import numpy as np
import pytest
import torch

from globalrep.data import make_synthetic_gaussian
from globalrep.errors import ConfigError, ContractError, IntegrityError, NumericalAbort
from globalrep.features import IdentityExtractor, build_extractor
from globalrep.checkpoint import state_checksum, table_checksum
from globalrep.synthesis import SynthesisConfig, draw_convex, synthesize
from globalrep.trainer import (
    TrainingConfig, build_episode, build_model, classification_loss, episode_loss,
    episodic_representations, extend_new_classes, init_global_representations, train,
)

from conftest import make_vector_split
from fdcheck import check_all
from miniature import NOVEL_DRAW, gradient_model, gradient_split, hand_episode, hand_loss, hand_model


def cfg(**kw):
    base = dict(n_train=3, n_s=2, n_q=2, n_few=3, total_episodes=5,
                synthesis=SynthesisConfig(k_t=6, augmenters=("feature_jitter",)))
    base.update(kw)
    return TrainingConfig(**base)


# --- episodes -----------------------------------------------------------------


@pytest.mark.parametrize("n_train,n_s,n_q,expect", [(60, 1, 5, (60, 300)), (20, 5, 5, (100, 100))])
def test_episode_sizes_of_paper_configs(n_train, n_s, n_q, expect):
    split = make_synthetic_gaussian(50, 20, 2, 12, 1, 1, 3.0, rng_seed=0)
    config = TrainingConfig(n_train=n_train, n_s=n_s, n_q=n_q, n_few=1,
                            synthesis=SynthesisConfig(k_t=20))
    ep = build_episode(split, config, np.random.default_rng(0))
    assert (len(ep.support_x), len(ep.query_x)) == expect
    assert np.bincount(ep.support_y).tolist() == [n_s] * n_train
    assert np.bincount(ep.query_y).tolist() == [n_q] * n_train


def test_novel_one_shot_split_five_five():
    split = make_synthetic_gaussian(2, 1, 3, 12, 1, 1, 3.0, rng_seed=0)
    config = TrainingConfig(n_train=3, n_s=5, n_q=5, n_few=1, synthesis=SynthesisConfig(k_t=20))
    ep = build_episode(split, config, np.random.default_rng(1), classes=[2, 0, 1])
    sup = {i for i, y in zip(ep.support_ids, ep.support_y) if y == 0}
    qry = {i for i, y in zip(ep.query_ids, ep.query_y) if y == 0}
    assert len(sup) == 5 and len(qry) == 5 and not sup & qry


def test_support_query_disjoint_over_many_episodes():
    split = make_synthetic_gaussian(6, 4, 3, 15, 2, 1, 3.0, rng_seed=3)
    rng = np.random.default_rng(0)
    for ablation in ("FULL", "B"):
        config = cfg(n_train=6, n_s=3, n_q=3, n_few=2, ablation=ablation)
        for _ in range(500):
            ep = build_episode(split, config, rng)
            assert not set(ep.support_ids) & set(ep.query_ids)
            assert len(set(ep.classes.tolist())) == 6


def test_build_episode_errors():
    split = make_synthetic_gaussian(2, 1, 3, 3, 1, 1, 3.0, rng_seed=0)
    with pytest.raises(ConfigError):
        build_episode(split, cfg(n_train=4), np.random.default_rng(0))
    with pytest.raises(IntegrityError):
        build_episode(split, cfg(n_train=3, n_s=2, n_q=2), np.random.default_rng(0))


def test_class_sampling_uniform():
    split = make_synthetic_gaussian(4, 2, 2, 6, 1, 1, 3.0, rng_seed=0)
    rng = np.random.default_rng(0)
    counts = np.zeros(6)
    config = cfg(n_train=2, n_s=1, n_q=1, n_few=1)
    for _ in range(3000):
        counts[build_episode(split, config, rng).classes] += 1
    np.testing.assert_allclose(counts / counts.sum(), 1 / 6, atol=0.015)


# --- representations and losses -------------------------------------------------


def test_base_mean_and_constant_novel():
    feats = torch.tensor([[0.0, 0.0], [2.0, 2.0], [3.0, 1.0], [3.0, 1.0], [3.0, 1.0]], dtype=torch.float64)
    reps, draws = episodic_representations(feats, [0, 0, 1, 1, 1], [False, True], True, np.random.default_rng(0))
    np.testing.assert_allclose(reps[0].numpy(), [1.0, 1.0])
    np.testing.assert_allclose(reps[1].numpy(), [3.0, 1.0], atol=1e-12)
    assert draws[0] is None and draws[1] is not None


def test_novel_synthesis_replays_recorded_draw():
    rng = np.random.default_rng(12)
    feats = torch.randn(5, 3, dtype=torch.float64)
    reps, draws = episodic_representations(feats, [0] * 5, [True], True, np.random.default_rng(7))
    replay = np.random.default_rng(7)
    draw = draw_convex(5, replay)
    by_hand = sum(w * feats[i] for w, i in zip(draw.weights, draw.selected_indices))
    np.testing.assert_allclose(reps[0].numpy(), by_hand.numpy(), atol=1e-14)
    np.testing.assert_array_equal(draws[0].selected_indices, draw.selected_indices)
    # without convex synthesis the novel class falls back to the mean
    mean_reps, _ = episodic_representations(feats, [0] * 5, [True], False, rng)
    np.testing.assert_allclose(mean_reps[0].numpy(), feats.mean(0).numpy())


def test_classification_loss_cases():
    far = torch.tensor([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], dtype=torch.float64)
    assert classification_loss(torch.zeros(2, dtype=torch.float64), 0, far).item() <= 1e-3
    angles = np.linspace(0, 2 * np.pi, 5, endpoint=False)
    ring = torch.as_tensor(np.stack([np.cos(angles), np.sin(angles)], 1))
    assert classification_loss(torch.zeros(2, dtype=torch.float64), 2, ring).item() == pytest.approx(math.log(5))
    two = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    expected = -math.log(1 / (1 + math.exp(-1)))
    assert classification_loss(torch.zeros(2, dtype=torch.float64), 0, two).item() == pytest.approx(expected, abs=1e-10)
    with pytest.raises(ContractError):
        classification_loss(torch.zeros(3, dtype=torch.float64), 0, two)
    with pytest.raises(ContractError):
        classification_loss(torch.zeros(2, dtype=torch.float64), 2, two)


def test_episode_loss_matches_hand_computation():
    model = hand_model()
    out = episode_loss(model, hand_episode(), np.random.default_rng(0), draws=[None, NOVEL_DRAW])
    l_reg, l_fsl, total = hand_loss()
    assert out.reg.item() == pytest.approx(l_reg, abs=1e-8)
    assert out.fsl.item() == pytest.approx(l_fsl, abs=1e-8)
    assert out.total.item() == pytest.approx(total, abs=1e-8)


def test_ablation_without_registration_has_only_classification_terms():
    out = episode_loss(hand_model("B_S1_S2"), hand_episode(), np.random.default_rng(0), draws=[None, NOVEL_DRAW])
    _, l_fsl, total = hand_loss(with_registration=False)
    assert out.reg.item() == 0.0
    assert out.total.item() == pytest.approx(l_fsl, abs=1e-8)


def test_perfect_fit_episode_has_tiny_loss():
    import torch
    from globalrep.registration import RegistrationModule
    from globalrep.trainer import Episode, GlobalRepModel

    table = torch.tensor([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]], dtype=torch.float64)
    reg = RegistrationModule(table, ["a", "b", "c"], embedding="identity")
    model = GlobalRepModel(IdentityExtractor(2), reg, "FULL").double()
    pts = np.array([[0.0, 0.0], [50.0, 0.0]])
    ep = Episode(np.array([0, 1]), np.array([False, False]), pts.reshape(2, 1, 1, 2), np.array([0, 1]),
                 ["s0", "s1"], np.full(2, -1), pts.reshape(2, 1, 1, 2), np.array([0, 1]), ["q0", "q1"],
                 np.full(2, -1))
    out = episode_loss(model, ep, np.random.default_rng(0))
    assert out.reg.item() <= 1e-3 and out.fsl.item() <= 1e-3


def test_ablation_b_equals_prototypical_oracle():
    split = make_synthetic_gaussian(5, 2, 4, 10, 2, 1, 3.0, rng_seed=1)
    config = cfg(n_train=4, n_s=2, n_q=3, n_few=2, ablation="B")
    torch.manual_seed(0)
    model = build_model(build_extractor("synthetic", split.image_shape), split, config, dtype=torch.float64)
    rng = np.random.default_rng(3)
    for _ in range(5):
        ep = build_episode(split, config, rng)
        loss = episode_loss(model, ep, rng, mode="eval").total.item()
        # independent nearest-mean softmax cross-entropy in numpy
        with torch.no_grad():
            model.extractor.eval()
            s = model.extractor(torch.as_tensor(ep.support_x, dtype=torch.float64)).numpy()
            q = model.extractor(torch.as_tensor(ep.query_x, dtype=torch.float64)).numpy()
        protos = np.stack([s[ep.support_y == k].mean(0) for k in range(ep.n_way)])
        d = np.sqrt(((q[:, None] - protos[None]) ** 2).sum(-1) + 1e-12)
        logits = -d
        lse = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
        oracle = float(np.sum(lse - logits[np.arange(len(q)), ep.query_y]))
        assert loss == pytest.approx(oracle, abs=1e-10)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_episode_loss_gradients_match_finite_differences(mode):
    model = gradient_model()
    split = gradient_split()
    config = TrainingConfig(n_train=2, n_s=2, n_q=1, n_few=1, synthesis=model.synthesis)
    rng = np.random.default_rng(5)
    ep = build_episode(split, config, rng, classes=[2, 0])
    draws = episode_loss(model, ep, np.random.default_rng(1), mode=mode).draws
    tensors = dict(model.named_parameters())

    def f():
        return episode_loss(model, ep, None, draws=draws, mode=mode).total

    errs = check_all(f, tensors)
    assert max(errs.values()) < 1e-4, errs


def test_loss_nonnegative_and_finite():
    split = make_synthetic_gaussian(4, 2, 4, 10, 2, 2, 3.0, rng_seed=2)
    config = cfg(n_train=4, n_s=2, n_q=2, n_few=2)
    model = build_model(build_extractor("synthetic", split.image_shape), split, config)
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = episode_loss(model, build_episode(split, config, rng), rng)
        assert torch.isfinite(out.total) and out.total.item() >= 0


# --- initialization and training ---------------------------------------------


def test_init_global_representations():
    split = make_vector_split(
        {"a": [[1.0, 2.0]], "b": [[1.0, -1.0], [-1.0, 1.0]], "c": [[0.0, 0.0], [3.0, 3.0], [6.0, 0.0]]})
    table = init_global_representations(IdentityExtractor(2), split).numpy()
    np.testing.assert_allclose(table, [[1, 2], [0, 0], [3, 1]], atol=1e-6)


def _trained(ablation="FULL", episodes=20, seed=0):
    split = make_synthetic_gaussian(4, 2, 4, 12, 2, 4, 4.0, rng_seed=seed)
    config = cfg(n_train=4, n_s=2, n_q=2, n_few=2, ablation=ablation, total_episodes=episodes, rng_seed=seed)
    torch.manual_seed(seed)
    model = build_model(build_extractor("synthetic", split.image_shape), split, config)
    return split, config, model


def test_zero_episodes_is_identity():
    split, config, model = _trained(episodes=0)
    before = state_checksum(model)
    train(model, split, config)
    assert state_checksum(model) == before


def test_training_updates_all_table_rows_and_logs(tmp_path):
    split, config, model = _trained(episodes=30)
    t0 = model.table.detach().clone()
    _, rows, state = train(model, split, config, log_path=tmp_path / "log.csv")
    assert state.episode == 30 and len(rows) == 30
    assert (model.table.detach() != t0).any(1).all()
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "episode,L_reg,L_fsl,L_total,lr,wall_time"


def test_learning_rate_schedule():
    from globalrep.trainer import OptimizerConfig

    opt = OptimizerConfig()
    assert opt.lr_at(0) == 0.001 and opt.lr_at(2999) == 0.001
    assert opt.lr_at(3000) == pytest.approx(1e-4) and opt.lr_at(6000) == pytest.approx(1e-5)


def test_resume_reproduces_trajectory(tmp_path):
    from globalrep.checkpoint import load_checkpoint, save_checkpoint

    split, config, model = _trained(episodes=12, seed=4)
    _, straight, _ = train(model, split, config)

    split, config, model = _trained(episodes=12, seed=4)
    _, first, state = train(model, split, config, stop_at=5)
    save_checkpoint(tmp_path / "mid", model, state)
    model2, state2 = load_checkpoint(tmp_path / "mid", config)
    _, rest, _ = train(model2, split, config, state=state2)
    assert [r["L_total"] for r in first + rest] == [r["L_total"] for r in straight]


def test_non_finite_loss_aborts_with_dump():
    split, config, model = _trained(episodes=3)
    with torch.no_grad():
        model.table[0] = float("nan")
    with pytest.raises(NumericalAbort) as exc:
        train(model, split, config)
    assert "classes" in exc.value.dump and "rng_state" in exc.value.dump


def test_extend_zero_episodes_initializes_from_shot_mean():
    split, config, model = _trained(episodes=5)
    train(model, split, config)
    new = make_synthetic_gaussian(1, 0, 4, 3, 1, 2, 4.0, rng_seed=99)
    new = type(new)([type(new.classes[0])("extra0", "novel")], new.train_x, new.train_y, new.train_ids,
                    new.test_x, new.test_y, new.test_ids, n_few=3)
    before = state_checksum(model)
    ext_config = cfg(n_train=4, n_s=2, n_q=2, n_few=3, total_episodes=0)
    from globalrep.features import extract_batched

    shot_mean = extract_batched(model.extractor, new.train_x).mean(0)
    model, merged, _ = extend_new_classes(model, split, new, ext_config)
    assert model.class_ids[-1] == "extra0" and merged.n_classes == split.n_classes + 1
    np.testing.assert_allclose(model.table[-1].detach().numpy(), shot_mean, rtol=1e-6)
    assert state_checksum(model, exclude_table_rows_from=split.n_classes) == before


def test_extend_freezes_everything_old():
    split, config, model = _trained(episodes=5)
    train(model, split, config)
    n_old = split.n_classes
    before = state_checksum(model)
    old_rows = table_checksum(model)
    new = make_synthetic_gaussian(1, 1, 4, 3, 2, 2, 4.0, rng_seed=98)
    from globalrep.data import ClassId, DatasetSplit

    new = DatasetSplit([ClassId("x0", "novel"), ClassId("x1", "novel")],
                       new.train_x[-2:].repeat(2, 0), [0, 0, 1, 1], ["x0/a", "x0/b", "x1/a", "x1/b"],
                       new.test_x[:4], [0, 0, 1, 1], ["x0/t0", "x0/t1", "x1/t0", "x1/t1"], n_few=2)
    ext_config = cfg(n_train=4, n_s=2, n_q=2, n_few=2, total_episodes=40)
    t_new = None
    model, _, rows = extend_new_classes(model, split, new, ext_config)
    assert len(rows) == 40
    assert state_checksum(model, exclude_table_rows_from=n_old) == before
    assert table_checksum(model, rows=n_old) == old_rows
    # the new rows did move
    assert model.table.shape[0] == n_old + 2


def test_extend_collision_is_contract_error():
    split, config, model = _trained(episodes=0)
    with pytest.raises(ContractError):
        extend_new_classes(model, split, split, config)
