"""Registration of class representations against a global representation table.

Similarity between a (feature or episodic) representation ``r`` and class
``j`` is ``-||theta(r) - phi(g_j)||_2`` where ``theta`` and ``phi`` are
independent Linear/BatchNorm/ReLU embeddings; a softmax over all classes
turns the distances into a probability vector.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError

DIST_EPS = 1e-12


class Embedding(nn.Module):
    def __init__(self, in_dim, width=512, init_std=0.01):
        super().__init__()
        self.fc = nn.Linear(in_dim, width)
        self.bn = nn.BatchNorm1d(width)
        nn.init.normal_(self.fc.weight, 0.0, init_std)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return F.relu(self.bn(self.fc(x)))


class Similarity(NamedTuple):
    probs: torch.Tensor
    distances: torch.Tensor
    log_probs: torch.Tensor


def pairwise_distance(a, b):
    """Unsquared Euclidean distance matrix, smoothed at zero for finite gradients."""
    diff = a[:, None, :] - b[None, :, :]
    return torch.sqrt((diff * diff).sum(-1) + DIST_EPS)


class RegistrationModule(nn.Module):
    """The global representation table plus the two embeddings.

    Row ``i`` of ``table`` belongs to ``class_ids[i]`` for the lifetime of the
    module. ``embedding="identity"`` replaces both embeddings by the identity,
    which is only meant for hand-checkable fixtures.
    """

    def __init__(self, table, class_ids, width=512, init_std=0.01, embedding="learned"):
        super().__init__()
        table = torch.as_tensor(table)
        if table.ndim != 2 or len(class_ids) != len(table):
            raise ContractError("table must be (n_classes, dim) with one class id per row")
        if len(set(class_ids)) != len(class_ids):
            raise ContractError("duplicate class ids in table")
        self.class_ids = list(class_ids)
        self.table = nn.Parameter(table.clone())
        self.embedding = embedding
        if embedding == "learned":
            self.theta = Embedding(table.shape[1], width, init_std)
            self.phi = Embedding(table.shape[1], width, init_std)
        elif embedding == "identity":
            self.theta = nn.Identity()
            self.phi = nn.Identity()
        else:
            raise ValueError(f"unknown embedding {embedding!r}")
        self.frozen_rows = 0
        self._hook = None

    @property
    def n_classes(self):
        return self.table.shape[0]

    @property
    def dim(self):
        return self.table.shape[1]

    def index_of(self, cls):
        if isinstance(cls, (int, np.integer)):
            if not 0 <= cls < self.n_classes:
                raise ContractError(f"class index {cls} out of range")
            return int(cls)
        key = getattr(cls, "id", cls)
        try:
            return self.class_ids.index(key)
        except ValueError:
            raise ContractError(f"unknown class {key!r}") from None

    def embed_table(self):
        return self.phi(self.table)

    def forward(self, reps):
        return similarity(reps, self)

    def freeze_rows(self, n):
        """Stop gradients from reaching the first ``n`` table rows."""
        self.frozen_rows = n
        if self._hook is not None:
            self._hook.remove()
        mask = torch.ones_like(self.table)
        mask[:n] = 0
        self._hook = self.table.register_hook(lambda g: g * mask)

    def enlarge(self, new_rows, new_ids):
        """Append rows for new classes; existing rows and ids keep their position."""
        clash = set(new_ids) & set(self.class_ids)
        if clash:
            raise ContractError(f"class ids already in the table: {sorted(clash)[:5]}")
        new_rows = torch.as_tensor(new_rows, dtype=self.table.dtype)
        with torch.no_grad():
            self.table = nn.Parameter(torch.cat([self.table.detach(), new_rows]))
        self.class_ids = self.class_ids + list(new_ids)
        self._hook = None
        self.frozen_rows = 0


def _as_batch(reps, module):
    reps = torch.as_tensor(reps, dtype=module.table.dtype)
    single = reps.ndim == 1
    if single:
        reps = reps[None]
    if reps.shape[-1] != module.dim:
        raise ContractError(f"representation dim {reps.shape[-1]} != table dim {module.dim}")
    return reps, single


def similarity(reps, module):
    """Similarity vectors of ``reps`` (d,) or (B, d) against every table row."""
    reps, single = _as_batch(reps, module)
    emb_r = module.theta(reps)
    emb_g = module.embed_table()
    dist = -pairwise_distance(emb_r, emb_g)
    log_p = F.log_softmax(dist, dim=-1)
    out = Similarity(log_p.exp(), dist, log_p)
    if single:
        out = Similarity(*(t[0] for t in out))
    return out


def registration_loss(reps, true_classes, module, reduction="sum"):
    """Cross-entropy of the similarity vector against the true class.

    ``true_classes`` is a class index, a class id (or ClassId), or a sequence
    of those matching a (B, d) batch. Batches are summed by default.
    """
    reps, _ = _as_batch(reps, module)
    if isinstance(true_classes, (list, tuple, np.ndarray, torch.Tensor)):
        targets = [module.index_of(c.item() if torch.is_tensor(c) else c) for c in true_classes]
    else:
        targets = [module.index_of(true_classes)]
    if len(targets) != len(reps):
        raise ContractError("one true class per representation required")
    sim = similarity(reps, module)
    return F.nll_loss(sim.log_probs, torch.as_tensor(targets), reduction=reduction)


def select_global(probs, table):
    """Soft selection: probability-weighted sum of table rows."""
    probs = torch.as_tensor(probs)
    table = torch.as_tensor(table)
    if probs.shape[-1] != table.shape[0]:
        raise ContractError(f"similarity length {probs.shape[-1]} != table size {table.shape[0]}")
    return probs.to(table.dtype) @ table


def select_global_hard(probs, table):
    """Argmax selection, the non-differentiable counterpart of select_global."""
    probs = torch.as_tensor(probs)
    table = torch.as_tensor(table)
    return table[probs.argmax(-1)]


def registration_accuracy(reps, true_classes, module):
    """Fraction of ``reps`` whose most similar table row is their own class."""
    reps, _ = _as_batch(reps, module)
    if len(reps) == 0:
        raise ContractError("registration_accuracy needs at least one representation")
    targets = np.array([module.index_of(c) for c in np.asarray(true_classes).tolist()])
    with torch.no_grad():
        pred = similarity(reps, module).distances.argmax(-1).numpy()
    return float(np.mean(pred == targets))
