"""Datasets, base/novel splits and the synthetic Gaussian benchmark.

Images are kept as float32 arrays of shape (n, height, width, channels) with
pixel values in [0, 1]. Synthetic vectors are stored as 1x1xd images so every
downstream module can treat all profiles alike.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, IntegrityError

logger = logging.getLogger(__name__)

BASE = "base"
NOVEL = "novel"
PARTITIONS = (BASE, NOVEL)

PROFILES = {
    "omniglot": (28, 28, 1),
    "miniimagenet": (84, 84, 3),
}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}
MANIFEST = "split.txt"


@dataclass(frozen=True)
class ClassId:
    id: str
    partition: str

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")


@dataclass(frozen=True)
class LabeledSample:
    """One image with its class.

    ``jitter_seed`` is set on variants produced by the feature-space jitter
    augmenter; the noise itself is applied after feature extraction.
    """

    image: np.ndarray
    label: ClassId
    sample_id: str
    jitter_seed: int | None = None


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass
class DatasetSplit:
    """Train/test samples over a fixed class ordering.

    Labels are integer indices into ``classes``; that ordering is the one the
    global representation table uses.
    """

    classes: list
    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_ids: np.ndarray
    n_few: int
    profile: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classes = list(self.classes)
        self.train_x = _frozen(np.asarray(self.train_x, dtype=np.float32))
        self.test_x = _frozen(np.asarray(self.test_x, dtype=np.float32))
        self.train_y = _frozen(np.asarray(self.train_y, dtype=np.int64))
        self.test_y = _frozen(np.asarray(self.test_y, dtype=np.int64))
        self.train_ids = _frozen(np.asarray(self.train_ids, dtype=str))
        self.test_ids = _frozen(np.asarray(self.test_ids, dtype=str))
        self._by_class = None

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def image_shape(self):
        x = self.train_x if len(self.train_x) else self.test_x
        return tuple(x.shape[1:])

    @property
    def class_names(self):
        return [c.id for c in self.classes]

    @property
    def base_indices(self):
        return np.array([i for i, c in enumerate(self.classes) if c.partition == BASE], dtype=np.int64)

    @property
    def novel_indices(self):
        return np.array([i for i, c in enumerate(self.classes) if c.partition == NOVEL], dtype=np.int64)

    def train_indices(self, class_index):
        """Row indices of ``train_x`` belonging to ``class_index``."""
        if self._by_class is None:
            order = np.argsort(self.train_y, kind="stable")
            bounds = np.searchsorted(self.train_y[order], np.arange(self.n_classes + 1))
            self._by_class = [order[bounds[i]:bounds[i + 1]] for i in range(self.n_classes)]
        return self._by_class[class_index]

    def test_indices(self, class_index):
        return np.flatnonzero(self.test_y == class_index)

    def samples(self, subset="train"):
        x, y, ids = (self.train_x, self.train_y, self.train_ids) if subset == "train" else (
            self.test_x, self.test_y, self.test_ids)
        for img, lab, sid in zip(x, y, ids):
            yield LabeledSample(img, self.classes[lab], str(sid))

    def check(self):
        """Verify split invariants; raises IntegrityError on violation."""
        names = self.class_names
        if len(set(names)) != len(names):
            raise IntegrityError("class ids are not unique")
        overlap = set(self.train_ids.tolist()) & set(self.test_ids.tolist())
        if overlap:
            raise IntegrityError(f"{len(overlap)} sample ids appear in both train and test")
        counts = np.bincount(self.train_y, minlength=self.n_classes)
        for i in self.novel_indices:
            if counts[i] != self.n_few:
                raise IntegrityError(
                    f"novel class {names[i]!r} has {counts[i]} training samples, expected {self.n_few}")
        return self


# ---------------------------------------------------------------------------
# image datasets


def read_manifest(path):
    """Parse ``split.txt``: ``class_name<TAB>partition<TAB>train|val|test``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"split manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        name, partition, split = parts
        if partition not in PARTITIONS:
            raise ConfigError(f"{path}:{lineno}: partition must be base or novel, got {partition!r}")
        if split not in ("train", "val", "test"):
            raise ConfigError(f"{path}:{lineno}: split must be train, val or test, got {split!r}")
        rows.append((name, partition, split))
    return rows


def _decode(path, profile):
    from PIL import Image

    h, w, c = PROFILES[profile]
    try:
        with Image.open(path) as im:
            im = im.convert("L" if c == 1 else "RGB")
            im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc
    return arr.reshape(h, w, c)


def rotate_images(images, quarter_turns):
    """Rotate a stack of HWC images counter-clockwise by ``quarter_turns`` x 90 degrees."""
    return np.rot90(images, k=quarter_turns, axes=(1, 2))


def load_image_dataset(root, profile, n_few=5, rng_seed=0, include_val=False, workers=8):
    """Load ``<root>/<class>/<images>`` according to ``<root>/split.txt``.

    Base classes put every image in the training set. Novel classes put
    ``n_few`` randomly chosen images (seeded) in the training set and the rest
    in the test set. With the omniglot profile every class is expanded into
    four classes, one per 90 degree rotation.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown image profile {profile!r}")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root not found: {root}")
    rows = read_manifest(root / MANIFEST)
    rows = [r for r in rows if include_val or r[2] != "val"]

    files = {}
    for name, _, _ in rows:
        cdir = root / name
        if not cdir.is_dir():
            raise IntegrityError(f"class directory missing: {cdir}")
        files[name] = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    flat = [p for name, _, _ in rows for p in files[name]]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        decoded = dict(zip(flat, pool.map(lambda p: _decode(p, profile), flat)))

    rng = np.random.default_rng(rng_seed)
    rotations = (0, 1, 2, 3) if profile == "omniglot" else (0,)
    classes, tr_x, tr_y, tr_id, te_x, te_y, te_id = [], [], [], [], [], [], []
    for name, partition, _ in rows:
        paths = files[name]
        need = 1 if partition == BASE else n_few + 1
        if len(paths) < need:
            raise IntegrityError(
                f"class {name!r} has {len(paths)} images, {partition} classes need at least {need}")
        imgs = np.stack([decoded[p] for p in paths])
        ids = [f"{name}/{p.name}" for p in paths]
        if partition == NOVEL:
            shot_mask = np.zeros(len(paths), dtype=bool)
            shot_mask[rng.choice(len(paths), n_few, replace=False)] = True
        else:
            shot_mask = np.ones(len(paths), dtype=bool)
        for k in rotations:
            label = len(classes)
            suffix = f"/rot{90 * k}" if len(rotations) > 1 else ""
            classes.append(ClassId(name + suffix, partition))
            rot = rotate_images(imgs, k)
            for j in range(len(paths)):
                sid = ids[j] + suffix
                if shot_mask[j]:
                    tr_x.append(rot[j]), tr_y.append(label), tr_id.append(sid)
                else:
                    te_x.append(rot[j]), te_y.append(label), te_id.append(sid)

    shape = PROFILES[profile]
    split = DatasetSplit(
        classes,
        np.stack(tr_x) if tr_x else np.zeros((0, *shape), np.float32), tr_y, tr_id,
        np.stack(te_x) if te_x else np.zeros((0, *shape), np.float32), te_y, te_id,
        n_few=n_few, profile=profile, meta={"root": str(root)},
    )
    logger.info("loaded %s: %d classes, %d train / %d test images",
                profile, split.n_classes, len(tr_y), len(te_y))
    return split.check()


# ---------------------------------------------------------------------------
# generalized split


def make_generalized_split(dataset, n_few, per_base_train, per_class_test, rng_seed):
    """Resample ``dataset`` (train and test pooled) into a generalized split.

    Every class gets ``per_class_test`` test samples. Base classes keep
    ``per_base_train`` training samples, novel classes keep ``n_few``.
    """
    rng = np.random.default_rng(rng_seed)
    x = np.concatenate([dataset.train_x, dataset.test_x])
    y = np.concatenate([dataset.train_y, dataset.test_y])
    ids = np.concatenate([dataset.train_ids, dataset.test_ids])
    tr, te = [], []
    for label, cls in enumerate(dataset.classes):
        rows = np.flatnonzero(y == label)
        n_train = per_base_train if cls.partition == BASE else n_few
        if n_train + per_class_test > len(rows):
            raise IntegrityError(
                f"class {cls.id!r} has {len(rows)} samples, needs {n_train} train + {per_class_test} test")
        # sort by id first so the draw does not depend on pooling order
        rows = rows[np.argsort(ids[rows], kind="stable")]
        pick = rng.permutation(len(rows))
        tr.append(rows[pick[:n_train]])
        te.append(rows[pick[n_train:n_train + per_class_test]])
    tr = np.concatenate(tr) if tr else np.zeros(0, np.int64)
    te = np.concatenate(te) if te else np.zeros(0, np.int64)
    return DatasetSplit(
        dataset.classes, x[tr], y[tr], ids[tr], x[te], y[te], ids[te],
        n_few=n_few, profile=dataset.profile, meta=dict(dataset.meta, generalized=True),
    ).check()


# ---------------------------------------------------------------------------
# synthetic Gaussian benchmark


def make_synthetic_gaussian(n_base, n_novel, dim, samples_per_base, n_few, test_per_class,
                            class_separation, rng_seed):
    """Isotropic unit-variance Gaussian classes with means drawn in a scaled hypercube.

    Means are ``class_separation * U(-0.5, 0.5)^dim``. The means are kept in
    ``split.meta["means"]`` so the Bayes-optimal nearest-true-mean rule can be
    evaluated on any subset of classes.
    """
    counts = dict(n_base=n_base, dim=dim, samples_per_base=samples_per_base, n_few=n_few,
                  test_per_class=test_per_class)
    for k, v in counts.items():
        if v < 1:
            raise ValueError(f"{k} must be positive, got {v}")
    if n_novel < 0:
        raise ValueError("n_novel must be non-negative")
    if not class_separation > 0:
        raise ValueError("class_separation must be > 0")

    rng = np.random.default_rng(rng_seed)
    n = n_base + n_novel
    means = class_separation * rng.uniform(-0.5, 0.5, size=(n, dim))
    classes = [ClassId(f"base{i:03d}", BASE) for i in range(n_base)]
    classes += [ClassId(f"novel{i:03d}", NOVEL) for i in range(n_novel)]

    def draw(label, count, tag):
        pts = means[label] + rng.standard_normal((count, dim))
        ids = [f"{classes[label].id}/{tag}{j:05d}" for j in range(count)]
        return pts, np.full(count, label), ids

    tr = [draw(c, samples_per_base if c < n_base else n_few, "tr") for c in range(n)]
    te = [draw(c, test_per_class, "te") for c in range(n)]

    def cat(parts):
        x = np.concatenate([p[0] for p in parts]).reshape(-1, 1, 1, dim)
        return x, np.concatenate([p[1] for p in parts]), sum((p[2] for p in parts), [])

    return DatasetSplit(
        classes, *cat(tr), *cat(te), n_few=n_few, profile="synthetic",
        meta={"means": means.tolist(), "class_separation": class_separation, "rng_seed": rng_seed},
    ).check()


def nearest_true_mean(x, means, candidates=None):
    """Bayes-optimal labels for equal-prior unit-variance Gaussians."""
    means = np.asarray(means, dtype=np.float64)
    cand = np.arange(len(means)) if candidates is None else np.asarray(candidates)
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    d = ((x[:, None, :] - means[cand][None]) ** 2).sum(-1)
    return cand[np.argmin(d, axis=1)]


def bayes_oracle_accuracy(split, candidates=None, subset="test"):
    """Accuracy of the nearest-true-mean rule on ``subset`` restricted to ``candidates``."""
    if "means" not in split.meta:
        raise ValueError("split carries no class means")
    x, y = (split.test_x, split.test_y) if subset == "test" else (split.train_x, split.train_y)
    if candidates is not None:
        keep = np.isin(y, candidates)
        x, y = x[keep], y[keep]
    pred = nearest_true_mean(x, split.meta["means"], candidates)
    return float(np.mean(pred == y))


# ---------------------------------------------------------------------------
# serialization


def save_split(split, path):
    """Write ``path`` (.npz arrays) and ``path`` + ``.json`` (metadata sidecar)."""
    path = Path(path)
    np.savez_compressed(
        path, train_x=split.train_x, train_y=split.train_y, train_ids=split.train_ids,
        test_x=split.test_x, test_y=split.test_y, test_ids=split.test_ids,
    )
    meta = {
        "classes": [[c.id, c.partition] for c in split.classes],
        "n_few": split.n_few,
        "profile": split.profile,
        "meta": split.meta,
    }
    Path(_sidecar(path)).write_text(json.dumps(meta, indent=1))


def load_split(path):
    path = Path(path)
    npz = path if path.suffix == ".npz" else path.with_name(path.name + ".npz")
    if not npz.is_file():
        raise ConfigError(f"split file not found: {npz}")
    meta = json.loads(Path(_sidecar(npz)).read_text())
    with np.load(npz) as arr:
        return DatasetSplit(
            [ClassId(i, p) for i, p in meta["classes"]],
            arr["train_x"], arr["train_y"], arr["train_ids"],
            arr["test_x"], arr["test_y"], arr["test_ids"],
            n_few=meta["n_few"], profile=meta["profile"], meta=meta["meta"],
        )


def _sidecar(path):
    p = os.fspath(path)
    if not p.endswith(".npz"):
        p += ".npz"
    return p[:-4] + ".json"


def merge_splits(old, new):
    """Append the classes and samples of ``new`` after those of ``old``."""
    clash = set(old.class_names) & set(new.class_names)
    if clash:
        from .errors import ContractError

        raise ContractError(f"class ids already present: {sorted(clash)[:5]}")
    off = old.n_classes
    meta = dict(old.meta)
    if "means" in old.meta and "means" in new.meta:
        meta["means"] = list(old.meta["means"]) + list(new.meta["means"])
    return DatasetSplit(
        old.classes + new.classes,
        np.concatenate([old.train_x, new.train_x]), np.concatenate([old.train_y, new.train_y + off]),
        np.concatenate([old.train_ids, new.train_ids]),
        np.concatenate([old.test_x, new.test_x]), np.concatenate([old.test_y, new.test_y + off]),
        np.concatenate([old.test_ids, new.test_ids]),
        n_few=new.n_few, profile=old.profile, meta=meta,
    )
