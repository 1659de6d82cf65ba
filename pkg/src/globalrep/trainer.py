"""Episodic joint base/novel training of the global representation model."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import synthesis as syn
from .data import NOVEL, LabeledSample, merge_splits
from .errors import ConfigError, ContractError, IntegrityError, NumericalAbort
from .features import as_input, extract_batched
from .registration import RegistrationModule, pairwise_distance, similarity

logger = logging.getLogger(__name__)

# ablation -> (step-one augmentation, convex synthesis, registration)
ABLATIONS = {
    "B": (False, False, False),
    "B_S1": (True, False, False),
    "B_S1_S2": (True, True, False),
    "B_R": (False, False, True),
    "B_S1_R": (True, False, True),
    "FULL": (True, True, True),
}
ABLATION_LABELS = {"B": "B", "B_S1": "B+S1", "B_S1_S2": "B+S1+S2", "B_R": "B+R",
                   "B_S1_R": "B+S1+R", "FULL": "B+S1+S2+R"}


def ablation_flags(ablation):
    try:
        return ABLATIONS[ablation]
    except KeyError:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}") from None


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    decay_every: int = 3000
    decay_factor: float = 0.1

    def lr_at(self, episode):
        return self.base_lr * self.decay_factor ** (episode // self.decay_every)


@dataclass(frozen=True)
class TrainingConfig:
    n_train: int = 20
    n_s: int = 5
    n_q: int = 5
    n_few: int = 5
    synthesis: syn.SynthesisConfig = field(default_factory=syn.SynthesisConfig)
    ablation: str = "FULL"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_episodes: int = 1000
    rng_seed: int = 0
    embed_width: int = 512
    init_std: float = 0.01
    checkpoint_every: int = 1000

    def __post_init__(self):
        ablation_flags(self.ablation)
        if self.n_s < 1 or self.n_q < 1:
            raise ConfigError("n_s and n_q must be >= 1")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if self.n_s + self.n_q > max(self.synthesis.k_t, self.n_few):
            raise ConfigError(
                f"n_s + n_q = {self.n_s + self.n_q} exceeds the novel-class pool k_t = {self.synthesis.k_t}")

    @property
    def use_s1(self):
        return ABLATIONS[self.ablation][0]

    @property
    def use_s2(self):
        return ABLATIONS[self.ablation][1]

    @property
    def use_registration(self):
        return ABLATIONS[self.ablation][2]

    def step_one_config(self, k_t):
        """Augmenters actually used for novel classes under this ablation."""
        if self.use_s1:
            return replace(self.synthesis, k_t=k_t)
        return replace(self.synthesis, k_t=k_t, augmenters=("copy",))


@dataclass
class Episode:
    """One training or test episode.

    ``classes`` holds global class indices; ``support_y``/``query_y`` index
    into ``classes``. ``*_jitter`` is -1 where no feature jitter applies.
    """

    classes: np.ndarray
    novel: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    support_ids: list
    support_jitter: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    query_ids: list
    query_jitter: np.ndarray

    @property
    def n_way(self):
        return len(self.classes)


class LossBreakdown(NamedTuple):
    reg: torch.Tensor
    fsl: torch.Tensor
    total: torch.Tensor
    reps: torch.Tensor
    selected: torch.Tensor
    draws: list


class GlobalRepModel(nn.Module):
    """Feature extractor, registration module (with the table) and the settings
    that decide how episodic representations are built."""

    def __init__(self, extractor, registration, ablation="FULL", synthesis=None, feature_std=None,
                 profile="synthetic"):
        super().__init__()
        self.extractor = extractor
        self.registration = registration
        self.ablation = ablation
        self.synthesis = synthesis or syn.SynthesisConfig()
        self.profile = profile
        std = torch.ones(registration.dim) if feature_std is None else torch.as_tensor(feature_std)
        self.register_buffer("feature_std", std.to(registration.table.dtype))

    @property
    def class_ids(self):
        return self.registration.class_ids

    @property
    def table(self):
        return self.registration.table

    @property
    def use_registration(self):
        return ABLATIONS[self.ablation][2]

    def jitter_scale(self):
        return self.synthesis.jitter_std * self.feature_std.detach().double().numpy()

    def features(self, x, jitter=None, mode="train"):
        self.extractor.train(mode == "train")
        feats = self.extractor(as_input(x, self.extractor))
        if jitter is not None:
            feats = syn.apply_jitter(feats, jitter, self.jitter_scale())
        return feats


# ---------------------------------------------------------------------------
# episodes


def _pack(items):
    x = np.stack([s.image for s in items])
    ids = [s.sample_id for s in items]
    jit = np.array([-1 if s.jitter_seed is None else s.jitter_seed for s in items], dtype=np.int64)
    return x, ids, jit


def novel_pool(split, class_index, size, config, rng):
    """The ``n_few`` originals of a novel class grown (or subsampled) to ``size`` samples."""
    rows = split.train_indices(class_index)
    if len(rows) == 0:
        raise IntegrityError(f"novel class {split.classes[class_index].id!r} has no training samples")
    originals = [LabeledSample(split.train_x[r], split.classes[class_index], str(split.train_ids[r]))
                 for r in rows]
    if len(originals) >= size:
        keep = rng.choice(len(originals), size, replace=False)
        return [originals[i] for i in keep]
    return syn.augment_step1(originals, config.step_one_config(size), rng)


def build_episode(split, config, rng, classes=None):
    """Sample an episode: ``n_train`` classes, ``n_s`` support and ``n_q`` query each.

    Base classes draw ``n_s + n_q`` distinct training samples. Novel classes
    grow their shots to ``n_s + n_q`` samples (step-one augmentation, or plain
    copies when the ablation disables it) and split the pool disjointly.
    """
    n = split.n_classes
    if classes is None:
        if config.n_train > n:
            raise ConfigError(f"n_train={config.n_train} exceeds the {n} available classes")
        classes = rng.choice(n, config.n_train, replace=False)
    classes = np.asarray(classes, dtype=np.int64)
    need = config.n_s + config.n_q
    sup, qry, sy, qy = [], [], [], []
    novel = np.zeros(len(classes), dtype=bool)
    for local, c in enumerate(classes):
        cls = split.classes[c]
        if cls.partition == NOVEL:
            novel[local] = True
            pool = novel_pool(split, c, need, config, rng)
            order = rng.permutation(len(pool))
            pool = [pool[i] for i in order]
        else:
            rows = split.train_indices(c)
            if len(rows) < need:
                raise IntegrityError(f"base class {cls.id!r} has {len(rows)} samples, episode needs {need}")
            pick = rng.choice(rows, need, replace=False)
            pool = [LabeledSample(split.train_x[r], cls, str(split.train_ids[r])) for r in pick]
        sup += pool[:config.n_s]
        qry += pool[config.n_s:need]
        sy += [local] * config.n_s
        qy += [local] * config.n_q
    sx, sid, sj = _pack(sup)
    qx, qid, qj = _pack(qry)
    return Episode(classes, novel, sx, np.array(sy), sid, sj, qx, np.array(qy), qid, qj)


# ---------------------------------------------------------------------------
# losses


def episodic_representations(support_features, support_y, novel, use_s2, rng, draws=None):
    """One representation per episode class from its support features.

    Base classes (and novel classes without convex synthesis) use the mean.
    Novel classes with synthesis use one random convex combination. ``draws``
    may supply pre-recorded ConvexDraws (by class position) to replay an
    episode; returns ``(reps, draws_used)``.
    """
    support_y = np.asarray(support_y)
    reps, used = [], []
    for local in range(len(novel)):
        mask = torch.as_tensor(support_y == local)
        feats = support_features[mask]
        if len(feats) == 0:
            raise ContractError(f"episode class {local} has no support features")
        if novel[local] and use_s2:
            draw = draws[local] if draws is not None else syn.draw_convex(len(feats), rng)
            reps.append(syn.synthesize(feats, draw))
            used.append(draw)
        else:
            reps.append(feats.mean(0))
            used.append(None)
    return torch.stack(reps), used


def classification_loss(query_features, true_index, selected, reduction="sum"):
    """Cross-entropy of a softmax over negative raw-space Euclidean distances
    from each query feature to the selected class references."""
    q = torch.as_tensor(query_features)
    single = q.ndim == 1
    if single:
        q = q[None]
    selected = torch.as_tensor(selected, dtype=q.dtype)
    if q.shape[-1] != selected.shape[-1]:
        raise ContractError(f"query dim {q.shape[-1]} != reference dim {selected.shape[-1]}")
    target = torch.as_tensor(np.atleast_1d(np.asarray(true_index)), dtype=torch.long)
    if (target >= len(selected)).any() or (target < 0).any():
        raise ContractError("true_index out of range")
    logits = -pairwise_distance(q, selected)
    return F.cross_entropy(logits, target, reduction=reduction)


def episode_loss(model, episode, rng, draws=None, mode="train"):
    """Loss of one episode: registration of every episodic representation plus
    classification of every query against the selected global representations.

    Without registration (ablations B, B_S1, B_S1_S2) the episodic
    representations themselves are the class references and the registration
    term is zero.
    """
    _, use_s2, use_r = ABLATIONS[model.ablation]
    x = np.concatenate([episode.support_x, episode.query_x])
    jit = np.concatenate([episode.support_jitter, episode.query_jitter])
    feats = model.features(x, jit, mode=mode)
    ns = len(episode.support_x)
    s_feats, q_feats = feats[:ns], feats[ns:]
    reps, used = episodic_representations(s_feats, episode.support_y, episode.novel, use_s2, rng, draws)
    if use_r:
        model.registration.train(mode == "train")
        sim = similarity(reps, model.registration)
        l_reg = F.nll_loss(sim.log_probs, torch.as_tensor(episode.classes), reduction="sum")
        selected = sim.probs @ model.registration.table
    else:
        l_reg = torch.zeros((), dtype=feats.dtype)
        selected = reps
    l_fsl = classification_loss(q_feats, episode.query_y, selected)
    return LossBreakdown(l_reg, l_fsl, l_reg + l_fsl, reps, selected, used)


# ---------------------------------------------------------------------------
# initialization


def class_feature_means(extractor, split):
    """Mean eval-mode feature of every class's training samples, as (N, d)."""
    feats = extract_batched(extractor, split.train_x)
    counts = np.bincount(split.train_y, minlength=split.n_classes)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise IntegrityError(f"class {split.classes[empty[0]].id!r} has no training samples")
    sums = np.zeros((split.n_classes, feats.shape[1]))
    np.add.at(sums, split.train_y, feats)
    return sums / counts[:, None], feats


def init_global_representations(extractor, split):
    """Initial table: per-class mean of extracted training features."""
    means, _ = class_feature_means(extractor, split)
    return torch.as_tensor(means, dtype=torch.float32)


def build_model(extractor, split, config, dtype=torch.float32, embedding="learned"):
    """Assemble a trainable model around a (pretrained) extractor."""
    means, feats = class_feature_means(extractor, split)
    base_rows = np.isin(split.train_y, split.base_indices)
    ref = feats[base_rows] if base_rows.any() else feats
    feature_std = ref.std(0) if len(ref) > 1 else np.ones(feats.shape[1])
    torch.manual_seed(config.rng_seed)
    reg = RegistrationModule(torch.as_tensor(means, dtype=dtype), split.class_names,
                             width=config.embed_width, init_std=config.init_std, embedding=embedding)
    model = GlobalRepModel(extractor, reg, config.ablation, config.synthesis, feature_std,
                           profile=split.profile)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# training loop

LOG_COLUMNS = ("episode", "L_reg", "L_fsl", "L_total", "lr", "wall_time")


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    episode: int
    rng: np.random.Generator
    optimizer: torch.optim.Optimizer


def make_optimizer(params, config):
    return torch.optim.SGD(params, lr=config.optimizer.base_lr, momentum=config.optimizer.momentum)


def train(model, split, config, log_path=None, checkpoint_dir=None, state=None, eval_fn=None,
          eval_every=0, stop_at=None):
    """Run ``config.total_episodes`` episodes of momentum SGD on the summed loss.

    Updates the extractor, both embeddings and every table row. Returns
    ``(model, log_rows, state)``; ``state`` can be passed back in to resume.
    ``stop_at`` ends the loop early at that episode count (used to simulate
    an interrupted run).
    """
    if state is None:
        state = TrainState(0, np.random.default_rng(config.rng_seed),
                           make_optimizer(model.parameters(), config))
    return _run(model, split, config, state, log_path, checkpoint_dir, eval_fn, eval_every, stop_at)


def _run(model, split, config, state, log_path, checkpoint_dir, eval_fn, eval_every, stop_at,
         mode="train"):
    from .checkpoint import save_checkpoint

    rows = []
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or state.episode == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    end = config.total_episodes if stop_at is None else min(stop_at, config.total_episodes)
    try:
        while state.episode < end:
            lr = config.optimizer.lr_at(state.episode)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            rng_before = state.rng.bit_generator.state
            episode = build_episode(split, config, state.rng)
            out = episode_loss(model, episode, state.rng, mode=mode)
            if not torch.isfinite(out.total):
                dump = {"episode": state.episode, "classes": episode.classes.tolist(),
                        "rng_state": rng_before, "L_reg": out.reg.item(), "L_fsl": out.fsl.item()}
                raise NumericalAbort(f"non-finite loss at episode {state.episode}", dump)
            state.optimizer.zero_grad()
            out.total.backward()
            state.optimizer.step()
            state.episode += 1
            row = {"episode": state.episode, "L_reg": out.reg.item(), "L_fsl": out.fsl.item(),
                   "L_total": out.total.item(), "lr": lr, "wall_time": time.perf_counter() - t0}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_COLUMNS])
            if checkpoint_dir is not None and config.checkpoint_every and \
                    state.episode % config.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.episode:06d}", model, state)
            if eval_fn is not None and eval_every and state.episode % eval_every == 0:
                eval_fn(model, state.episode)
    finally:
        if writer is not None:
            fh.close()
    model.eval()
    return model, rows, state


def extend_new_classes(model, split, new_split, config, log_path=None):
    """Add the classes of ``new_split`` and learn only their table rows.

    The extractor, both embeddings (including normalization statistics) and
    every pre-existing table row stay bit-identical. New rows start at the
    mean feature of their shots. Returns ``(model, merged_split, log_rows)``.
    """
    if not model.use_registration:
        raise ConfigError(f"ablation {model.ablation} has no registration module to extend")
    merged = merge_splits(split, new_split)  # raises on class-id collision
    n_old = model.registration.n_classes
    if split.class_names != model.class_ids:
        raise ContractError("split classes do not match the model's table")
    new_feats = extract_batched(model.extractor, new_split.train_x)
    counts = np.bincount(new_split.train_y, minlength=new_split.n_classes)
    if (counts == 0).any():
        raise IntegrityError("every new class needs at least one shot")
    sums = np.zeros((new_split.n_classes, new_feats.shape[1]))
    np.add.at(sums, new_split.train_y, new_feats)
    model.registration.enlarge(sums / counts[:, None], new_split.class_names)
    model.registration.freeze_rows(n_old)
    for p in model.parameters():
        p.requires_grad_(False)
    model.registration.table.requires_grad_(True)
    state = TrainState(0, np.random.default_rng(config.rng_seed),
                       make_optimizer([model.registration.table], config))
    model, rows, _ = _run(model, merged, config, state, log_path, None, None, 0, None, mode="eval")
    return model, merged, rows
