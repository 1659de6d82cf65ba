"""Feature extractors and their base-class pretraining."""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)


def conv_block(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(),
        nn.MaxPool2d(2),
    )


class Conv4(nn.Module):
    """Four conv/BN/ReLU/max-pool blocks, flattened.

    28x28 inputs give 64 output dims, 84x84 inputs give 1600.
    """

    def __init__(self, in_channels=1, hidden=64, image_size=28, n_blocks=4,
                 channel_mean=None, channel_std=None):
        super().__init__()
        chans = [in_channels] + [hidden] * n_blocks
        self.encoder = nn.Sequential(*[conv_block(a, b) for a, b in zip(chans, chans[1:])])
        self.image_shape = (image_size, image_size, in_channels)
        side = image_size
        for _ in range(n_blocks):
            side //= 2
        if side < 1:
            raise ConfigError(f"{n_blocks} pooling blocks do not fit a {image_size}px image")
        self.out_dim = hidden * side * side
        mean = torch.zeros(in_channels) if channel_mean is None else torch.as_tensor(channel_mean)
        std = torch.ones(in_channels) if channel_std is None else torch.as_tensor(channel_std)
        self.register_buffer("channel_mean", mean.float().view(1, -1, 1, 1))
        self.register_buffer("channel_std", std.float().view(1, -1, 1, 1))
        self.spec = {"kind": "conv4", "in_channels": in_channels, "hidden": hidden,
                     "image_size": image_size, "n_blocks": n_blocks}

    def forward(self, x):
        # x is NHWC in [0, 1]
        x = x.permute(0, 3, 1, 2)
        x = (x - self.channel_mean) / self.channel_std
        return self.encoder(x).flatten(1)


class MLPExtractor(nn.Module):
    """Two fully-connected layers mapping a d-vector to a d-vector.

    With ``residual=True`` the output is ``x + net(x)`` and the second layer
    starts at zero, so the untrained extractor is the identity.
    """

    def __init__(self, dim, hidden=64, residual=True):
        super().__init__()
        self.image_shape = (1, 1, dim)
        self.out_dim = dim
        self.residual = residual
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        if residual:
            nn.init.zeros_(self.net[2].weight)
            nn.init.zeros_(self.net[2].bias)
        self.spec = {"kind": "mlp", "dim": dim, "hidden": hidden, "residual": residual}

    def forward(self, x):
        x = x.reshape(len(x), -1)
        return x + self.net(x) if self.residual else self.net(x)


class IdentityExtractor(nn.Module):
    """Returns the flattened input; used by hand-checkable fixtures."""

    def __init__(self, dim):
        super().__init__()
        self.image_shape = (1, 1, dim)
        self.out_dim = dim
        self.spec = {"kind": "identity", "dim": dim}
        # carries the dtype through .to()/.double()
        self.register_buffer("dtype_probe", torch.zeros(()))

    def forward(self, x):
        return x.reshape(len(x), -1)


def extractor_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    cls = {"conv4": Conv4, "mlp": MLPExtractor, "identity": IdentityExtractor}[kind]
    return cls(**spec)


def build_extractor(profile, image_shape=None, hidden=None, split=None):
    """Construct the extractor for ``profile``.

    For image profiles the per-channel mean/std of ``split.train_x`` is baked
    into the module as input normalization.
    """
    mean = std = None
    if split is not None and profile in ("omniglot", "miniimagenet") and len(split.train_x):
        flat = split.train_x.reshape(-1, split.train_x.shape[-1])
        mean, std = flat.mean(0), flat.std(0) + 1e-6
    if profile == "omniglot":
        return Conv4(1, hidden or 64, 28, channel_mean=mean, channel_std=std)
    if profile == "miniimagenet":
        return Conv4(3, hidden or 64, 84, channel_mean=mean, channel_std=std)
    if profile == "synthetic":
        if image_shape is None:
            raise ConfigError("synthetic profile needs the input shape")
        return MLPExtractor(int(np.prod(image_shape)), hidden or 64)
    if profile == "identity":
        return IdentityExtractor(int(np.prod(image_shape)))
    raise ConfigError(f"unknown profile {profile!r}")


def _param_dtype(module):
    for p in module.parameters():
        return p.dtype
    for b in module.buffers():
        if b.is_floating_point():
            return b.dtype
    return torch.get_default_dtype()


def as_input(images, module):
    x = images if torch.is_tensor(images) else torch.from_numpy(np.array(images))
    return x.to(_param_dtype(module))


def extract(extractor, images, mode="eval"):
    """Features for a batch of HWC images, one row per image, order kept.

    In ``"train"`` mode batch normalization uses batch statistics and the
    result carries gradients; ``"eval"`` mode is a pure function of the
    parameters and the input.
    """
    if len(images) == 0:
        raise ContractError("extract needs a nonempty batch")
    shape = tuple(np.shape(images)[1:])
    if shape != tuple(extractor.image_shape):
        raise ContractError(f"image shape {shape} does not match extractor input {extractor.image_shape}")
    x = as_input(images, extractor)
    if mode == "train":
        extractor.train()
        return extractor(x)
    if mode != "eval":
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    extractor.eval()
    with torch.no_grad():
        return extractor(x)


def extract_batched(extractor, images, batch_size=512):
    """Eval-mode features for an arbitrarily large array, as float64 numpy."""
    out = [extract(extractor, images[i:i + batch_size]).double().numpy()
           for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, extractor.out_dim))
    return np.concatenate(out)


def pretrain_base_classifier(extractor, split, epochs=5, lr=1e-3, batch_size=64, rng_seed=0):
    """Supervised softmax pretraining on base classes only.

    A temporary linear head is trained jointly with ``extractor`` (in place)
    and then discarded. Returns ``(extractor, per_epoch_mean_losses)``.
    """
    base = split.base_indices
    if len(base) == 0:
        raise ConfigError("pretraining needs at least one base class")
    rows = np.flatnonzero(np.isin(split.train_y, base))
    if len(rows) == 0:
        raise ConfigError("no base-class training samples")
    remap = np.full(split.n_classes, -1)
    remap[base] = np.arange(len(base))
    targets = remap[split.train_y[rows]]

    torch.manual_seed(rng_seed)
    head = nn.Linear(extractor.out_dim, len(base)).to(_param_dtype(extractor))
    opt = torch.optim.Adam(list(extractor.parameters()) + list(head.parameters()), lr=lr)
    rng = np.random.default_rng(rng_seed)
    losses = []
    for epoch in range(epochs):
        extractor.train()
        order = rng.permutation(len(rows))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            x = as_input(split.train_x[rows[idx]], extractor)
            y = torch.as_tensor(targets[idx])
            loss = F.cross_entropy(head(extractor(x)), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(rows))
        logger.info("pretrain epoch %d: loss %.4f", epoch + 1, losses[-1])
    extractor.eval()
    return extractor, losses
