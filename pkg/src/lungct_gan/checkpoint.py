"""Self-describing checkpoint container for generators and discriminators."""
from __future__ import annotations

from pathlib import Path

import torch

from .config import DiscriminatorConfig, GeneratorConfig
from .discriminator import build_discriminator
from .generators import build_generator

FORMAT = "lungct-gan-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _gen_entry(gen):
    cfg = gen.config
    return {"family": cfg.family, "width_multiplier": str(cfg.width_multiplier), "seed": cfg.seed,
            "state_dict": {k: v.detach().cpu().clone() for k, v in gen.state_dict().items()}}


def _disc_entry(disc):
    cfg = disc.config
    return {"use_mdmin": cfg.use_mdmin, "width_multiplier": str(cfg.width_multiplier), "seed": cfg.seed,
            "state_dict": {k: v.detach().cpu().clone() for k, v in disc.state_dict().items()}}


def checkpoint_payload(gen, disc=None, extra: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "generator": _gen_entry(gen),
        "discriminator": _disc_entry(disc) if disc is not None else None,
        "extra": extra or {},
    }


def save_checkpoint(path, gen, disc=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint_payload(gen, disc, extra), path)
    return path


def restore(payload: dict):
    """(generator, discriminator or None, extra) from a payload dict."""
    if payload.get("format") != FORMAT:
        raise CheckpointError("not a lungct-gan checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    g = payload["generator"]
    gen = build_generator(GeneratorConfig(g["family"], g["width_multiplier"], g["seed"]))
    gen.load_state_dict(g["state_dict"])
    disc = None
    if payload.get("discriminator"):
        d = payload["discriminator"]
        disc = build_discriminator(DiscriminatorConfig(d["use_mdmin"], d["width_multiplier"], d["seed"]))
        disc.load_state_dict(d["state_dict"])
    return gen, disc, payload.get("extra", {})


def load_checkpoint(source):
    """Accepts a path or an in-memory payload."""
    if isinstance(source, dict):
        return restore(source)
    path = Path(source)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return restore(torch.load(path, map_location="cpu", weights_only=False))
