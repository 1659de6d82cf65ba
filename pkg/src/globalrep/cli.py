"""Command line runner: ``globalrep <command> --config run.ini [--checkpoint F] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 data or contract error,
4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint, table_checksum
from .config import load_config
from .data import NOVEL, DatasetSplit, load_image_dataset, make_generalized_split, make_synthetic_gaussian
from .errors import ConfigError, ContractError, GlobalRepError, IngestionError, IntegrityError, NumericalAbort
from .evaluation import evaluate_generalized, evaluate_standard, heldout_registration_accuracy
from .features import build_extractor, extractor_from_spec, pretrain_base_classifier
from .trainer import ABLATION_LABELS, LOG_COLUMNS, build_model, extend_new_classes, train

logger = logging.getLogger("globalrep")

COMMANDS = ("pretrain", "train", "eval", "ablate", "extend")
RESULT_COLUMNS = ("setting", "way", "shot", "episodes", "mean_acc", "std", "ci95", "acc_a", "acc_b", "acc_n",
                  "checkpoint_id", "seed")
EXIT_CODES = {ConfigError: 2, IngestionError: 3, IntegrityError: 3, ContractError: 3, NumericalAbort: 4}


# ---------------------------------------------------------------------------
# data


def load_data(config):
    d = config["dataset"]
    if config.profile == "synthetic":
        return make_synthetic_gaussian(d["n_base"], d["n_novel"], d["dim"], d["samples_per_base"], d["n_few"],
                                       d["test_per_class"], d["class_separation"], rng_seed=config.seed)
    split = load_image_dataset(d["root"], config.profile, d["n_few"], config.seed, d["include_val"])
    if d["generalized"]:
        split = make_generalized_split(split, d["n_few"], d["per_base_train"], d["per_class_test"], config.seed)
    return split


def novel_only(split, prefix=None):
    """Keep only the novel classes of ``split``, optionally renaming them ``<prefix>NNN``."""
    from .data import ClassId

    keep = split.novel_indices
    remap = np.full(split.n_classes, -1)
    remap[keep] = np.arange(len(keep))
    names = [f"{prefix}{i:03d}" if prefix else split.classes[c].id for i, c in enumerate(keep)]
    classes = [ClassId(n, NOVEL) for n in names]
    tr, te = np.isin(split.train_y, keep), np.isin(split.test_y, keep)

    def ids(arr, y):
        return [f"{names[remap[c]]}/{s.split('/', 1)[-1]}" for s, c in zip(arr, y)]

    meta = {}
    if "means" in split.meta:
        meta["means"] = [split.meta["means"][c] for c in keep]
    return DatasetSplit(classes, split.train_x[tr], remap[split.train_y[tr]], ids(split.train_ids[tr], split.train_y[tr]),
                        split.test_x[te], remap[split.test_y[te]], ids(split.test_ids[te], split.test_y[te]),
                        n_few=split.n_few, profile=split.profile, meta=meta)


def load_new_classes(config):
    e, d = config["extend"], config["dataset"]
    if config.profile == "synthetic":
        fresh = make_synthetic_gaussian(1, e["n_new"], d["dim"], 1, d["n_few"], d["test_per_class"],
                                        d["class_separation"], rng_seed=e["seed"])
        return novel_only(fresh, e["class_prefix"])
    if not e["root"]:
        raise ConfigError("[extend] root is required for image datasets")
    fresh = load_image_dataset(e["root"], config.profile, d["n_few"], e["seed"], d["include_val"])
    return novel_only(fresh, e["class_prefix"] or None)


# ---------------------------------------------------------------------------
# outputs


def checkpoint_id(path):
    npz = Path(path).with_suffix(".npz") if Path(path).suffix in (".npz", ".json") else Path(str(path) + ".npz")
    digest = hashlib.sha256(npz.read_bytes()).hexdigest()[:12]
    return f"{npz.stem}@{digest}"


def write_results(path, rows):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in RESULT_COLUMNS})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(log_csv, path):
    with open(log_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    plt = _plt()
    ep = [int(r["episode"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_total", "L_reg", "L_fsl"):
        ax.plot(ep, [float(r[key]) for r in rows], label=key, lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy(episodes, accs, path, xlabel="training episode"):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(episodes, accs, marker="o" if len(accs) < 50 else None)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation_bars(rows, path):
    """Grouped bars: standard accuracy and generalized acc_n per variant."""
    plt = _plt()
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(rows)), 4))
    ax.bar(x - 0.2, [r["standard"] for r in rows], 0.4, label="standard", yerr=[r["ci95"] for r in rows])
    ax.bar(x + 0.2, [r["acc_n"] for r in rows], 0.4, label="generalized acc_n")
    ax.set_xticks(x, labels)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# shared steps


def _dtype(config):
    return getattr(torch, config["run"]["dtype"])


def pretrained_extractor(config, split, out, checkpoint=None):
    """Extractor from ``checkpoint`` if given, else pretrained here on base classes."""
    if checkpoint:
        model, _ = load_checkpoint(checkpoint)
        return model.extractor
    torch.manual_seed(config.seed)
    ext = build_extractor(config.profile, split.image_shape, config["model"]["hidden"], split=split)
    p = config["pretrain"]
    _, losses = pretrain_base_classifier(ext, split, p["epochs"], p["lr"], p["batch_size"], config.seed)
    with open(out / "pretrain_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "loss"))
        w.writerows((i + 1, f"{v:.6f}") for i, v in enumerate(losses))
    return ext


def evaluate_rows(model, split, config, setting_prefix="", ckpt_id=""):
    """Standard and/or generalized result rows for ``model``."""
    e = config["eval"]
    rows = []
    seed = config.seed
    if e["standard"] and len(split.novel_indices):
        ec = config.standard_eval()
        ec = type(ec)(min(ec.n_test, len(split.novel_indices)), ec.n_few, ec.n_q_test, ec.episodes, ec.rng_seed)
        res = evaluate_standard(model, split, ec, e["selection"])
        rows.append(dict(setting=setting_prefix + "standard", way=ec.n_test, shot=ec.n_few, episodes=ec.episodes,
                         mean_acc=res.mean, std=res.std, ci95=res.ci95, checkpoint_id=ckpt_id, seed=seed,
                         _accs=res.accuracies))
    if e["generalized"] and len(split.test_y):
        g = evaluate_generalized(model, split, e["use_episodic_means"])
        rows.append(dict(setting=setting_prefix + "generalized", way=split.n_classes, shot=split.n_few,
                         episodes=1, mean_acc=g.acc_a, acc_a=g.acc_a, acc_b=g.acc_b, acc_n=g.acc_n,
                         checkpoint_id=ckpt_id, seed=seed))
    return rows


def train_variant(config, split, extractor, out, ablation, state=None, model=None, tag="train"):
    """Train one ablation variant; writes its log, checkpoints and loss curve under ``out``."""
    tc = config.training(ablation=ablation)
    if model is None:
        model = build_model(extractor, split, tc, dtype=_dtype(config))
    t = config["training"]
    curve = []

    def eval_fn(m, episode):
        res = evaluate_standard(m, split, config.standard_eval(t["eval_episodes"]), config["eval"]["selection"])
        curve.append((episode, res.mean))
        m.train()

    log = out / f"{tag}_log.csv"
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    model, _, state = train(model, split, tc, log_path=log, checkpoint_dir=ckpt_dir, state=state,
                            eval_fn=eval_fn if len(split.novel_indices) else None, eval_every=t["eval_every"])
    plot_loss_curve(log, out / f"{tag}_loss_curve.png")
    if curve:
        with open(out / f"{tag}_accuracy_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("episode", "mean_acc"))
            w.writerows((ep, f"{a:.6f}") for ep, a in curve)
        plot_accuracy(*zip(*curve), out / f"{tag}_accuracy_vs_episode.png")
    final = save_checkpoint(out / f"{tag}_final", model, state)
    return model, state, final


# ---------------------------------------------------------------------------
# commands


def run_pretrain(config, out, checkpoint=None):
    split = load_data(config)
    ext = pretrained_extractor(config, split, out)
    tc = config.training()
    model = build_model(ext, split, tc, dtype=_dtype(config))
    path = save_checkpoint(out / "pretrained", model)
    losses = [r.split(",")[1] for r in (out / "pretrain_log.csv").read_text().split()[1:]]
    print(f"pretrained extractor saved to {path}; final loss {losses[-1] if losses else 'n/a'}")
    return 0


def run_train(config, out, checkpoint=None):
    split = load_data(config)
    ablation = config["training"]["ablation"]
    state = model = None
    extractor = None
    if checkpoint and "episode" in read_manifest(checkpoint):
        # resume an interrupted run
        model, state = load_checkpoint(checkpoint, config.training())
        if model.ablation != ablation:
            raise ConfigError(f"checkpoint ablation {model.ablation} differs from config {ablation}")
        if model.class_ids != split.class_names:
            raise ContractError("checkpoint classes do not match the dataset")
        model.train()
        logger.info("resuming from episode %d", state.episode)
    else:
        extractor = pretrained_extractor(config, split, out, checkpoint)
    model, state, final = train_variant(config, split, extractor, out, ablation, state, model)
    rows = evaluate_rows(model, split, config, ckpt_id=checkpoint_id(final))
    write_results(out / "results.csv", rows)
    for r in rows:
        print(f"{r['setting']}: {r['mean_acc']:.4f}")
    print(f"final checkpoint {final}")
    return 0


def run_eval(config, out, checkpoint=None):
    if not checkpoint:
        raise ConfigError("eval needs --checkpoint")
    split = load_data(config)
    model, _ = load_checkpoint(checkpoint)
    if model.class_ids != split.class_names:
        raise ContractError("checkpoint classes do not match the dataset")
    rows = evaluate_rows(model, split, config, ckpt_id=checkpoint_id(checkpoint))
    if model.use_registration:
        reg = heldout_registration_accuracy(model, split, rng_seed=config.seed)
        print(f"held-out registration accuracy: {reg:.4f}")
    write_results(out / "results.csv", rows)
    for r in rows:
        if "_accs" in r:
            accs = r["_accs"]
            running = np.cumsum(accs) / np.arange(1, len(accs) + 1)
            plot_accuracy(np.arange(1, len(accs) + 1), running, out / "eval_accuracy_vs_episode.png",
                          xlabel="test episode (running mean)")
        print(f"{r['setting']}: {r['mean_acc']:.4f}")
    return 0


def run_ablate(config, out, checkpoint=None):
    split = load_data(config)
    extractor = pretrained_extractor(config, split, out, checkpoint)
    spec = extractor.spec
    state_dict = {k: v.clone() for k, v in extractor.state_dict().items()}
    bars, all_rows = [], []
    for variant in config["ablate"]["variants"]:
        label = ABLATION_LABELS[variant]
        ext = extractor_from_spec(spec)
        ext.load_state_dict(state_dict)
        vout = out / f"ablation_{variant}"
        vout.mkdir(exist_ok=True)
        model, _, final = train_variant(config, split, ext, vout, variant)
        rows = evaluate_rows(model, split, config, f"{label}:", checkpoint_id(final))
        all_rows += rows
        by = {r["setting"].split(":")[1]: r for r in rows}
        bars.append(dict(label=label, standard=by.get("standard", {}).get("mean_acc", np.nan),
                         ci95=by.get("standard", {}).get("ci95", 0.0),
                         acc_n=by.get("generalized", {}).get("acc_n", np.nan)))
        print(f"{label}: " + ", ".join(f"{r['setting'].split(':')[1]} {r['mean_acc']:.4f}" for r in rows))
    write_results(out / "results.csv", all_rows)
    plot_ablation_bars(bars, out / "ablation_bars.png")
    return 0


def run_extend(config, out, checkpoint=None):
    if not checkpoint:
        raise ConfigError("extend needs --checkpoint")
    split = load_data(config)
    model, _ = load_checkpoint(checkpoint)
    if model.class_ids != split.class_names:
        raise ContractError("checkpoint classes do not match the dataset")
    new = load_new_classes(config)
    n_old = model.registration.n_classes
    before = table_checksum(model, rows=n_old)
    print(f"old-table checksum before: {before}")
    tc = config.training(total_episodes=config["extend"]["total_episodes"])
    model, merged, _ = extend_new_classes(model, split, new, tc, log_path=out / "extend_log.csv")
    after = table_checksum(model, rows=n_old)
    print(f"old-table checksum after:  {after}")
    if after != before:
        raise IntegrityError("pre-existing table rows changed during extension")
    plot_loss_curve(out / "extend_log.csv", out / "extend_loss_curve.png")
    final = save_checkpoint(out / "extended", model, extra={"extended_from": str(checkpoint),
                                                            "old_table_sha256": before})
    g = evaluate_generalized(model, merged, config["eval"]["use_episodic_means"])
    write_results(out / "results.csv", [dict(
        setting="extended:generalized", way=merged.n_classes, shot=merged.n_few, episodes=1, mean_acc=g.acc_a,
        acc_a=g.acc_a, acc_b=g.acc_b, acc_n=g.acc_n, checkpoint_id=checkpoint_id(final), seed=config.seed)])
    print(f"{'classes':>10} {'acc_a':>8} {'acc_b':>8} {'acc_n':>8}")
    print(f"{merged.n_classes:>10} {g.acc_a:>8.4f} {g.acc_b:>8.4f} {g.acc_n:>8.4f}")
    return 0


RUNNERS = {"pretrain": run_pretrain, "train": run_train, "eval": run_eval, "ablate": run_ablate,
           "extend": run_extend}


def build_parser():
    p = argparse.ArgumentParser(prog="globalrep", description="few-shot learning with global class representations")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--checkpoint", help="checkpoint to start from (.npz or stem)")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _setup_logging(out, verbose):
    root = logging.getLogger("globalrep")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out / "run.log")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    root.addHandler(fh)
    root.addHandler(sh)


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = None
    try:
        config = load_config(args.config, args.out)
        if args.checkpoint and not Path(args.checkpoint).with_suffix(".json").is_file() \
                and not Path(args.checkpoint + ".json").is_file():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        out = Path(config["run"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        _setup_logging(out, args.verbose)
        config.write_resolved(out / f"resolved_{args.command}.ini")
        torch.manual_seed(config.seed)
        t0 = time.perf_counter()
        code = RUNNERS[args.command](config, out, args.checkpoint)
        logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return code
    except GlobalRepError as exc:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), 1)
        if isinstance(exc, NumericalAbort) and out is not None:
            (out / "numerical_abort.json").write_text(json.dumps(exc.dump, indent=1, default=str))
        print(f"globalrep {args.command}: error: {exc}", file=sys.stderr)
        return code
    finally:
        for h in list(logging.getLogger("globalrep").handlers):
            h.close()
            logging.getLogger("globalrep").removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
