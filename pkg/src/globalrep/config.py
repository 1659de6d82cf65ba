"""INI experiment configuration: schema, validation and the resolved copy."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .evaluation import StandardEvalConfig
from .synthesis import AUGMENTERS, SynthesisConfig
from .trainer import ABLATIONS, OptimizerConfig, TrainingConfig

DATA_ROOT_ENV = "GLOBALREP_DATA_ROOT"
REQUIRED = object()

# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "seed": (int, REQUIRED),
        "out": (str, ""),
        "dtype": (str, "float32"),
    },
    "dataset": {
        "profile": (str, "synthetic"),
        "root": (str, ""),
        "n_few": (int, 5),
        "include_val": (bool, False),
        "generalized": (bool, False),
        "per_base_train": (int, 500),
        "per_class_test": (int, 100),
        # synthetic profile only
        "n_base": (int, 7),
        "n_novel": (int, 3),
        "dim": (int, 16),
        "samples_per_base": (int, 200),
        "test_per_class": (int, 50),
        "class_separation": (float, 3.5),
    },
    "model": {
        "hidden": (int, 64),
        "embed_width": (int, 512),
        "init_std": (float, 0.01),
    },
    "pretrain": {
        "epochs": (int, 5),
        "lr": (float, 1e-3),
        "batch_size": (int, 64),
    },
    "training": {
        "ablation": (str, "FULL"),
        "n_train": (int, 5),
        "n_s": (int, 5),
        "n_q": (int, 5),
        "total_episodes": (int, 6000),
        "lr": (float, 0.001),
        "momentum": (float, 0.9),
        "decay_every": (int, 3000),
        "decay_factor": (float, 0.1),
        "checkpoint_every": (int, 1000),
        "eval_every": (int, 0),
        "eval_episodes": (int, 100),
    },
    "synthesis": {
        "k_t": (int, 20),
        "augmenters": (tuple, ("feature_jitter",)),
        "jitter_std": (float, 1.0),
        "crop_pad": (int, 0),
    },
    "eval": {
        "n_test": (int, 5),
        "n_q_test": (int, 5),
        "episodes": (int, 600),
        "selection": (str, "soft"),
        "standard": (bool, True),
        "generalized": (bool, True),
        "use_episodic_means": (bool, False),
    },
    "ablate": {
        "variants": (tuple, tuple(ABLATIONS)),
    },
    "extend": {
        "root": (str, ""),
        "class_prefix": (str, "new"),
        "n_new": (int, 2),
        "seed": (int, 1000),
        "total_episodes": (int, 1000),
    },
}

# keys that only matter when step-one augmentation is on
_S1_KEYS = ("augmenters", "jitter_std", "crop_pad")


def _convert(kind, raw, where):
    raw = raw.strip()
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if kind is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict
    explicit: dict
    source: Path | None = None

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    @property
    def profile(self):
        return self.values["dataset"]["profile"]

    def training(self, ablation=None, total_episodes=None):
        t, s, m = self["training"], self["synthesis"], self["model"]
        return TrainingConfig(
            n_train=t["n_train"], n_s=t["n_s"], n_q=t["n_q"], n_few=self["dataset"]["n_few"],
            synthesis=self.synthesis(),
            ablation=ablation or t["ablation"],
            optimizer=OptimizerConfig(t["lr"], t["momentum"], t["decay_every"], t["decay_factor"]),
            total_episodes=t["total_episodes"] if total_episodes is None else total_episodes,
            rng_seed=self.seed, embed_width=m["embed_width"], init_std=m["init_std"],
            checkpoint_every=t["checkpoint_every"],
        )

    def synthesis(self):
        s = self["synthesis"]
        return SynthesisConfig(k_t=s["k_t"], augmenters=s["augmenters"], jitter_std=s["jitter_std"],
                               crop_pad=s["crop_pad"] or None)

    def standard_eval(self, episodes=None):
        e = self["eval"]
        return StandardEvalConfig(n_test=e["n_test"], n_few=self["dataset"]["n_few"], n_q_test=e["n_q_test"],
                                  episodes=episodes or e["episodes"], rng_seed=self.seed)

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            cp[section] = {k: _render(v) for k, v in keys.items()}
        return cp

    def write_resolved(self, path):
        with open(path, "w") as fh:
            fh.write("# every setting of this run, defaults included\n")
            self.to_ini().write(fh)


def load_config(path, out_override=None, env=None):
    """Parse and validate ``path``; defaults are filled in, unknown keys rejected."""
    env = os.environ if env is None else env
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values, explicit = {}, {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        unknown = set(cp[section]) - set(SCHEMA[section])
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    for section, keys in SCHEMA.items():
        values[section], explicit[section] = {}, set()
        for key, (kind, default) in keys.items():
            if cp.has_option(section, key):
                values[section][key] = _convert(kind, cp[section][key], f"[{section}] {key}")
                explicit[section].add(key)
            elif default is REQUIRED:
                raise ConfigError(f"[{section}] {key} is required")
            else:
                values[section][key] = default
    if env.get(DATA_ROOT_ENV):
        values["dataset"]["root"] = env[DATA_ROOT_ENV]
    if out_override:
        values["run"]["out"] = str(out_override)
    config = ExperimentConfig(values, explicit, path)
    validate(config)
    return config


def validate(config):
    v = config.values
    if not v["run"]["out"]:
        raise ConfigError("no output directory: set [run] out or pass --out")
    if v["run"]["dtype"] not in ("float32", "float64"):
        raise ConfigError("[run] dtype must be float32 or float64")
    profile = v["dataset"]["profile"]
    if profile not in ("synthetic", "omniglot", "miniimagenet"):
        raise ConfigError(f"[dataset] profile {profile!r} is not one of synthetic, omniglot, miniimagenet")
    if profile != "synthetic":
        root = v["dataset"]["root"]
        if not root:
            raise ConfigError(f"[dataset] root is required for {profile} (or set {DATA_ROOT_ENV})")
        if not Path(root).is_dir():
            raise ConfigError(f"dataset root does not exist: {root}")
    if v["extend"]["root"] and not Path(v["extend"]["root"]).is_dir():
        raise ConfigError(f"[extend] root does not exist: {v['extend']['root']}")
    for name in (v["training"]["ablation"],) + v["ablate"]["variants"]:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    bad = [a for a in v["synthesis"]["augmenters"] if a not in AUGMENTERS]
    if bad:
        raise ConfigError(f"unknown augmenter(s) {bad}; choose from {', '.join(AUGMENTERS)}")
    if v["eval"]["selection"] not in ("soft", "hard"):
        raise ConfigError("[eval] selection must be soft or hard")
    ablation = v["training"]["ablation"]
    if not ABLATIONS[ablation][0]:
        given = sorted(config.explicit["synthesis"] & set(_S1_KEYS))
        if given:
            raise ConfigError(
                f"ablation {ablation} disables step-one augmentation but [synthesis] sets {', '.join(given)}; "
                "remove those keys or pick an ablation with S1")
    # surfaces n_s/n_q/k_t contradictions with a message
    config.training()
    return config
