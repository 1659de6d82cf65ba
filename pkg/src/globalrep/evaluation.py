"""Standard and generalized few-shot evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import synthesis as syn
from .data import BASE, NOVEL, LabeledSample, nearest_true_mean
from .errors import ContractError, IntegrityError
from .features import extract_batched
from .registration import pairwise_distance, select_global, select_global_hard, similarity
from .trainer import ABLATIONS, GlobalRepModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StandardEvalConfig:
    n_test: int = 5
    n_few: int = 5
    n_q_test: int = 5
    episodes: int = 600
    rng_seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractError("episodes must be >= 1")


@dataclass
class StandardResult:
    mean: float
    std: float
    ci95: float
    accuracies: np.ndarray = field(repr=False)


@dataclass
class GeneralizedMetrics:
    acc_a: float
    acc_b: float
    acc_n: float
    confusion: np.ndarray = field(repr=False)
    partitions: list = field(repr=False)

    def counts(self):
        """(correct_base, total_base, correct_novel, total_novel)."""
        diag = np.diag(self.confusion)
        tot = self.confusion.sum(1)
        b = np.array([p == BASE for p in self.partitions])
        return int(diag[b].sum()), int(tot[b].sum()), int(diag[~b].sum()), int(tot[~b].sum())


def summarize(accuracies):
    """Mean, population std and 95% normal-approximation half-width."""
    acc = np.asarray(accuracies, dtype=np.float64)
    std = float(acc.std())
    return StandardResult(float(acc.mean()), std, 1.96 * std / math.sqrt(len(acc)), acc)


# ---------------------------------------------------------------------------
# standard episodes


def _pool_features(model, shots, rng):
    """Features of a novel class's test-time support pool (step one if enabled)."""
    use_s1 = ABLATIONS[model.ablation][0]
    if use_s1 and model.synthesis.k_t > len(shots):
        shots = syn.augment_step1(shots, model.synthesis, rng)
    x = np.stack([s.image for s in shots])
    jit = [s.jitter_seed for s in shots]
    with torch.no_grad():
        return model.features(x, jit, mode="eval")


def episode_references(model, class_pools, rng, selection="soft", novel=None):
    """Class references for an episode from per-class support feature pools.

    Returns ``(references, episodic_reps, similarity_probs_or_None)``.
    """
    _, use_s2, use_r = ABLATIONS[model.ablation]
    novel = [True] * len(class_pools) if novel is None else novel
    reps = []
    for feats, is_novel in zip(class_pools, novel):
        if is_novel and use_s2:
            reps.append(syn.synthesize(feats, syn.draw_convex(len(feats), rng)))
        else:
            reps.append(feats.mean(0))
    reps = torch.stack(reps)
    if not use_r:
        return reps, reps, None
    model.registration.eval()
    with torch.no_grad():
        probs = similarity(reps, model.registration).probs
        table = model.registration.table
        refs = select_global(probs, table) if selection == "soft" else select_global_hard(probs, table)
    return refs, reps, probs


def nearest_reference(query_features, references):
    q = torch.as_tensor(query_features, dtype=references.dtype)
    return pairwise_distance(q, references).argmin(-1).numpy()


def predict_episode(model, support, query_x, rng, selection="soft"):
    """Predict episode-local class indices for ``query_x``.

    ``support`` is a list (one entry per episode class) of LabeledSample
    lists, the few shots of that class.
    """
    for shots in support:
        for s in shots:
            if s.label.id not in model.class_ids:
                raise ContractError(f"support class {s.label.id!r} is not in the table")
    pools = [_pool_features(model, shots, rng) for shots in support]
    refs, _, _ = episode_references(model, pools, rng, selection)
    with torch.no_grad():
        q = model.features(np.asarray(query_x), mode="eval")
    return nearest_reference(q, refs)


class _FeatureCache:
    def __init__(self, model, split):
        self.model = model
        self.test = torch.as_tensor(extract_batched(model.extractor, split.test_x),
                                    dtype=model.registration.table.dtype)


def _sample_episode(split, cfg, rng):
    novel = split.novel_indices
    if cfg.n_test > len(novel):
        raise ContractError(f"n_test={cfg.n_test} exceeds the {len(novel)} novel classes")
    classes = rng.choice(novel, cfg.n_test, replace=False)
    support, query_rows = [], []
    for c in classes:
        rows = split.train_indices(c)
        support.append([LabeledSample(split.train_x[r], split.classes[c], str(split.train_ids[r]))
                        for r in rows])
        test_rows = split.test_indices(c)
        if len(test_rows) < cfg.n_q_test:
            raise IntegrityError(
                f"novel class {split.classes[c].id!r} has {len(test_rows)} test samples, need {cfg.n_q_test}")
        query_rows.append(rng.choice(test_rows, cfg.n_q_test, replace=False))
    return classes, support, query_rows


def evaluate_standard(model, split, config, selection="soft"):
    """Mean/std accuracy over independently sampled ``n_test``-way test episodes.

    Episode ``e`` draws from its own generator seeded by ``(rng_seed, e)`` so
    results do not depend on evaluation order. ``model`` is a GlobalRepModel
    or any object with ``predict_episode(split, classes, support, query_rows, rng)``.
    """
    cache = _FeatureCache(model, split) if isinstance(model, GlobalRepModel) else None
    accs = np.empty(config.episodes)
    for e in range(config.episodes):
        rng = np.random.default_rng([config.rng_seed, e])
        classes, support, query_rows = _sample_episode(split, config, rng)
        truth = np.repeat(np.arange(len(classes)), config.n_q_test)
        rows = np.concatenate(query_rows)
        if cache is None:
            pred = model.predict_episode(split, classes, support, query_rows, rng)
        else:
            pools = [_pool_features(model, shots, rng) for shots in support]
            refs, _, _ = episode_references(model, pools, rng, selection)
            pred = nearest_reference(cache.test[rows], refs)
        accs[e] = np.mean(np.asarray(pred) == truth)
    return summarize(accs)


class NearestTrueMeanOracle:
    """Bayes-optimal episode predictor for the synthetic Gaussian benchmark."""

    def __init__(self, means):
        self.means = np.asarray(means)

    def predict_episode(self, split, classes, support, query_rows, rng):
        x = split.test_x[np.concatenate(query_rows)]
        labels = nearest_true_mean(x, self.means, classes)
        pos = {c: i for i, c in enumerate(classes)}
        return np.array([pos[c] for c in labels])


# ---------------------------------------------------------------------------
# generalized setting


def class_prototypes(model, split):
    """Mean eval-mode training feature per class (nearest-mean baselines)."""
    feats = extract_batched(model.extractor, split.train_x)
    counts = np.bincount(split.train_y, minlength=split.n_classes)
    sums = np.zeros((split.n_classes, feats.shape[1]))
    np.add.at(sums, split.train_y, feats)
    return torch.as_tensor(sums / np.maximum(counts, 1)[:, None], dtype=model.registration.table.dtype)


def predict_generalized(model, x, prototypes=None, use_episodic_means=False, features=None):
    """Class index in the full label space for each sample.

    Models with registration take the argmax of the similarity against the
    whole table. Models without it (and ``use_episodic_means``) need
    ``prototypes``, per-class training feature means: without registration
    the nearest prototype wins; with ``use_episodic_means`` prototypes are
    registered, softly mapped onto the table and the nearest result wins.
    """
    if features is None:
        features = torch.as_tensor(extract_batched(model.extractor, np.asarray(x)),
                                   dtype=model.registration.table.dtype)
    use_r = model.use_registration
    with torch.no_grad():
        if use_r and not use_episodic_means:
            model.registration.eval()
            return similarity(features, model.registration).distances.argmax(-1).numpy()
        if prototypes is None:
            raise ContractError("prototypes are required for this prediction path")
        refs = prototypes
        if use_r:
            model.registration.eval()
            probs = similarity(prototypes, model.registration).probs
            refs = select_global(probs, model.registration.table)
        return nearest_reference(features, refs)


def generalized_metrics(y_true, y_pred, partitions):
    """acc_a / acc_b / acc_n and the confusion matrix over all classes."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = len(partitions)
    if len(y_true) == 0:
        raise ContractError("no test samples to evaluate")
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    is_base = np.array([p == BASE for p in partitions])[y_true]
    hit = y_true == y_pred

    def acc(mask):
        return float(hit[mask].mean()) if mask.any() else float("nan")

    return GeneralizedMetrics(acc(np.ones_like(hit)), acc(is_base), acc(~is_base), conf, list(partitions))


def evaluate_generalized(model, split, use_episodic_means=False):
    """Classify every test sample over all classes of ``split``."""
    if len(split.test_y) == 0:
        raise ContractError("generalized evaluation needs test samples")
    if split.class_names != model.class_ids:
        raise ContractError("split classes do not match the model's table")
    need_protos = use_episodic_means or not model.use_registration
    protos = class_prototypes(model, split) if need_protos else None
    pred = predict_generalized(model, split.test_x, protos, use_episodic_means)
    return generalized_metrics(split.test_y, pred, [c.partition for c in split.classes])


def heldout_registration_accuracy(model, split, shots=None, reps_per_class=20, rng_seed=0,
                                  classes=None):
    """Registration accuracy of mean representations built from test samples.

    Each representation averages ``shots`` random test samples of one class.
    """
    from .registration import registration_accuracy

    rng = np.random.default_rng(rng_seed)
    shots = shots or split.n_few
    feats = extract_batched(model.extractor, split.test_x)
    classes = range(split.n_classes) if classes is None else classes
    reps, labels = [], []
    for c in classes:
        rows = split.test_indices(c)
        for _ in range(reps_per_class):
            reps.append(feats[rng.choice(rows, min(shots, len(rows)), replace=False)].mean(0))
            labels.append(c)
    model.registration.eval()
    return registration_accuracy(np.array(reps), labels, model.registration)
