"""Checkpoints: one ``.npz`` of named arrays plus a ``.json`` manifest.

Arrays are keyed by parameter/buffer name (``model/...``), momentum buffers
by ``optim/<param name>``. The manifest records architecture, class order,
ablation, synthesis settings, episode counter and the episode rng state.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .features import extractor_from_spec
from .registration import RegistrationModule
from .synthesis import SynthesisConfig


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".npz", ".json") else path
    return stem.with_name(stem.name + ".npz"), stem.with_name(stem.name + ".json")


def _to_numpy(t):
    return t.detach().cpu().numpy()


def save_checkpoint(path, model, state=None, extra=None):
    npz_path, json_path = _paths(path)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": _to_numpy(v) for k, v in model.state_dict().items()}
    manifest = {
        "extractor": model.extractor.spec,
        "profile": model.profile,
        "class_ids": list(model.class_ids),
        "embedding": model.registration.embedding,
        "embed_width": _embed_width(model),
        "ablation": model.ablation,
        "synthesis": asdict(model.synthesis),
        "dtype": str(model.registration.table.dtype).replace("torch.", ""),
        "image_shape": list(model.extractor.image_shape),
        "feature_dim": model.registration.dim,
    }
    if state is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}"] = _to_numpy(buf)
        manifest["episode"] = state.episode
        manifest["rng_state"] = state.rng.bit_generator.state
        manifest["lr"] = state.optimizer.param_groups[0]["lr"]
    if extra:
        manifest.update(extra)
    np.savez(npz_path, **arrays)
    json_path.write_text(json.dumps(manifest, indent=1, default=_json_default))
    return npz_path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _embed_width(model):
    theta = model.registration.theta
    return theta.fc.out_features if hasattr(theta, "fc") else None


def load_checkpoint(path, config=None):
    """Rebuild the model (and, with ``config``, the resumable TrainState)."""
    from .trainer import GlobalRepModel, TrainState, make_optimizer

    npz_path, json_path = _paths(path)
    if not npz_path.is_file() or not json_path.is_file():
        raise ConfigError(f"checkpoint not found: {npz_path}")
    manifest = json.loads(json_path.read_text())
    dtype = getattr(torch, manifest["dtype"])
    with np.load(npz_path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    table = torch.as_tensor(arrays["model/registration.table"])
    extractor = extractor_from_spec(manifest["extractor"])
    reg = RegistrationModule(table, manifest["class_ids"], width=manifest["embed_width"] or 512,
                             embedding=manifest["embedding"])
    model = GlobalRepModel(extractor, reg, manifest["ablation"], SynthesisConfig(**manifest["synthesis"]),
                           profile=manifest["profile"]).to(dtype)
    model.load_state_dict({k[6:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("model/")})
    model.eval()
    if config is None or "episode" not in manifest:
        return model, None
    opt = make_optimizer(model.parameters(), config)
    params = dict(model.named_parameters())
    for k, v in arrays.items():
        if k.startswith("optim/"):
            opt.state[params[k[6:]]]["momentum_buffer"] = torch.as_tensor(v).clone()
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    return model, TrainState(manifest["episode"], rng, opt)


def read_manifest(path):
    return json.loads(_paths(path)[1].read_text())


def table_checksum(model, rows=None):
    """SHA-256 over the raw bytes of (a slice of) the global table."""
    t = model.registration.table.detach().cpu().numpy()
    if rows is not None:
        t = t[:rows]
    return hashlib.sha256(np.ascontiguousarray(t).tobytes()).hexdigest()


def state_checksum(model, exclude_table_rows_from=None):
    """SHA-256 over every parameter and buffer; optionally over only the first
    ``exclude_table_rows_from`` rows of the table."""
    h = hashlib.sha256()
    for name, v in sorted(model.state_dict().items()):
        a = v.detach().cpu().numpy()
        if name == "registration.table" and exclude_table_rows_from is not None:
            a = a[:exclude_table_rows_from]
        h.update(name.encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
