"""scikit-learn style wrapper around pretraining, episodic training and
generalized prediction."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import BASE, NOVEL, ClassId, DatasetSplit
from .errors import ContractError
from .evaluation import class_prototypes, predict_generalized
from .features import build_extractor, extract_batched, pretrain_base_classifier
from .registration import similarity
from .synthesis import SynthesisConfig
from .trainer import OptimizerConfig, TrainingConfig, build_model, train


class GlobalRepClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Few-shot classifier over base and novel classes jointly.

    ``X`` is either a 2-D array of vectors (synthetic profile) or a 4-D NHWC
    image array. Classes listed in ``novel_classes`` at fit time are treated
    as few-shot classes and must share the same number of samples.
    """

    def __init__(self, profile="synthetic", ablation="FULL", n_train=5, n_s=5, n_q=5, k_t=20,
                 augmenters=("feature_jitter",), jitter_std=1.0, total_episodes=1000,
                 learning_rate=0.001, momentum=0.9, embed_width=512, pretrain_epochs=5,
                 random_state=0):
        self.profile = profile
        self.ablation = ablation
        self.n_train = n_train
        self.n_s = n_s
        self.n_q = n_q
        self.k_t = k_t
        self.augmenters = augmenters
        self.jitter_std = jitter_std
        self.total_episodes = total_episodes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.embed_width = embed_width
        self.pretrain_epochs = pretrain_epochs
        self.random_state = random_state

    def _as_images(self, X):
        X = np.asarray(X)
        return X.reshape(len(X), 1, 1, -1) if X.ndim == 2 else X

    def _split(self, X, y, novel_classes):
        self.classes_ = unique_labels(y)
        novel = set(np.asarray(novel_classes if novel_classes is not None else []).tolist())
        unknown = novel - set(self.classes_.tolist())
        if unknown:
            raise ContractError(f"novel_classes not present in y: {sorted(unknown)}")
        labels = np.searchsorted(self.classes_, y)
        counts = np.bincount(labels, minlength=len(self.classes_))
        few = {int(counts[i]) for i, c in enumerate(self.classes_) if c in novel}
        if len(few) > 1:
            raise ContractError(f"novel classes must have equal sample counts, got {sorted(few)}")
        classes = [ClassId(str(c), NOVEL if c in novel else BASE) for c in self.classes_]
        ids = [f"{c}/{i}" for i, c in enumerate(y)]
        x = self._as_images(X)
        empty = np.zeros((0,) + x.shape[1:])
        return DatasetSplit(classes, x, labels, ids, empty, [], [], n_few=few.pop() if few else 1,
                            profile=self.profile).check()

    def fit(self, X, y, novel_classes=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        split = self._split(X, y, novel_classes)
        config = TrainingConfig(
            n_train=min(self.n_train, split.n_classes), n_s=self.n_s, n_q=self.n_q, n_few=split.n_few,
            synthesis=SynthesisConfig(k_t=self.k_t, augmenters=tuple(self.augmenters),
                                      jitter_std=self.jitter_std),
            ablation=self.ablation,
            optimizer=OptimizerConfig(self.learning_rate, self.momentum),
            total_episodes=self.total_episodes, rng_seed=self.random_state,
            embed_width=self.embed_width,
        )
        torch.manual_seed(self.random_state)
        ext = build_extractor(self.profile, split.image_shape, split=split)
        if len(split.base_indices):
            pretrain_base_classifier(ext, split, epochs=self.pretrain_epochs, rng_seed=self.random_state)
        self.model_ = build_model(ext, split, config)
        _, self.log_, _ = train(self.model_, split, config)
        self.prototypes_ = None if self.model_.use_registration else class_prototypes(self.model_, split)
        self.n_features_in_ = int(np.prod(split.image_shape))
        return self

    def _features(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        x = self._as_images(X)
        if int(np.prod(x.shape[1:])) != self.n_features_in_:
            raise ContractError(f"X has {int(np.prod(x.shape[1:]))} features, expected {self.n_features_in_}")
        return x, torch.as_tensor(extract_batched(self.model_.extractor, x),
                                  dtype=self.model_.table.dtype)

    def transform(self, X):
        """Extracted features, one row per sample."""
        return self._features(X)[1].numpy().astype(np.float64)

    def predict(self, X):
        x, feats = self._features(X)
        idx = predict_generalized(self.model_, x, self.prototypes_, features=feats)
        return self.classes_[idx]

    def predict_proba(self, X):
        _, feats = self._features(X)
        with torch.no_grad():
            if self.model_.use_registration:
                self.model_.registration.eval()
                return similarity(feats, self.model_.registration).probs.numpy()
            d = torch.cdist(feats, self.prototypes_)
            return torch.softmax(-d, -1).numpy()
