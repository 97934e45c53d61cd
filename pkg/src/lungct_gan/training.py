"""Adversarial training loop, per-epoch bookkeeping and best-model selection."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_payload, save_checkpoint
from .config import (MINIBATCHES_PER_SCAN, DiscriminatorConfig, GeneratorConfig, LargeEbsConfig,
                     TrainConfig, flatten_config, format_config)
from .discriminator import build_discriminator
from .evaluation import compute_fid
from .extractors import FeatureExtractor, get_extractor
from .generators import StyleGAN3DGenerator, build_generator, generate, mixed_styles
from .losses import LOSS_FUNCTIONS
from .minibatch import largeebs_select
from .patches import PatchDataset, epoch_plan

# name -> (family, MDmin, largeEBS)
METHODS = {
    "DCGAN3D-base": ("dcgan3d", False, False),
    "DCGAN3D-MDmin": ("dcgan3d", True, False),
    "DCGAN3D-MDmin-largeEBS": ("dcgan3d", True, True),
    "styleGAN3D-base": ("stylegan3d", False, False),
    "styleGAN3D-MDmin": ("stylegan3d", True, False),
    "styleGAN3D-MDmin-largeEBS": ("stylegan3d", True, True),
    "bigGAN3D-base": ("biggan3d", False, False),
    "bigGAN3D-MDmin": ("biggan3d", True, False),
    "bigGAN3D-MDmin-largeEBS": ("biggan3d", True, True),
}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; snapshot: {json.dumps(snapshot)}")
        self.snapshot = snapshot


@dataclass
class TrainedRun:
    config: TrainConfig
    fid: list[float] = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # paths, or payload dicts without a run dir
    loss_trace: list[tuple[int, float, float]] = field(default_factory=list)
    epoch_losses: list[tuple[float, float]] = field(default_factory=list)
    selection_iterations: list[int] = field(default_factory=list)
    iterations: int = 0
    iterations_per_epoch: int = 0
    seed: int = 0
    wall_clock: dict = field(default_factory=dict)
    out_dir: Path | None = None
    generator: torch.nn.Module | None = field(default=None, repr=False)
    discriminator: torch.nn.Module | None = field(default=None, repr=False)

    @property
    def min_fid(self) -> float:
        finite = [f for f in self.fid if not math.isnan(f)]
        if not finite:
            raise ValueError("run has no FID entries")
        return min(finite)


@dataclass
class BestModel:
    checkpoint: object
    fid: float
    run_index: int
    epoch: int
    per_run_minima: list[float]


def method_config(name: str, width_multiplier=1, seed: int = 0, **overrides) -> TrainConfig:
    if name not in METHODS:
        raise KeyError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
    family, mdmin, ebs = METHODS[name]
    base = dict(
        generator=GeneratorConfig(family, width_multiplier, seed),
        discriminator=DiscriminatorConfig(mdmin, width_multiplier, seed),
        largeebs=replace(overrides.pop("largeebs", LargeEbsConfig()), enabled=ebs),
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


def iterations_per_epoch(n_scans: int) -> int:
    return MINIBATCHES_PER_SCAN * n_scans


def _grad_norm(module) -> float:
    sq = [p.grad.detach().double().pow(2).sum() for p in module.parameters() if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def _scores(t: torch.Tensor) -> list[float]:
    return [float(v) for v in t.detach().flatten()[:8]]


def _check(loss, name, it, epoch, d_real, d_fake, gen, disc):
    if torch.isfinite(loss):
        return
    snapshot = {"iteration": it, "epoch": epoch, "loss": name, "value": loss.item(),
                "d_real": _scores(d_real), "d_fake": _scores(d_fake),
                "grad_norm_g": _grad_norm(gen), "grad_norm_d": _grad_norm(disc)}
    raise TrainingDivergedError(f"non-finite {name} at iteration {it}", snapshot)


@torch.no_grad()
def _fake_patches(gen, n: int, generator: torch.Generator, batch: int = 64) -> np.ndarray:
    out = []
    for i in range(0, n, batch):
        z = torch.randn(min(batch, n - i), gen.latent_dim, generator=generator)
        out.append(generate(gen, z).cpu().numpy())
    return np.concatenate(out)


def _configure_determinism(on: bool):
    torch.use_deterministic_algorithms(on, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = on
        torch.backends.cudnn.benchmark = not on


def train(config: TrainConfig, dataset: PatchDataset, out_dir=None,
          extractor: FeatureExtractor | None = None, device: str = "cpu") -> TrainedRun:
    """Alternate one discriminator and one generator update per real minibatch."""
    if len(dataset) == 0:
        raise ValueError("training needs at least one kept scan")
    _configure_determinism(config.deterministic)
    start = time.time()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    latent_rng = torch.Generator().manual_seed(config.seed + 1)
    fid_rng = np.random.default_rng([config.seed, 7])
    fid_latents = torch.Generator().manual_seed(config.seed + 2)

    gen = build_generator(config.generator).to(device)
    disc = build_discriminator(config.discriminator).to(device)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=betas)
    loss_fn = LOSS_FUNCTIONS[config.loss]
    relativistic = config.loss == "relativistic"
    is_style = isinstance(gen, StyleGAN3DGenerator)
    ebs = config.largeebs
    if config.fid.enabled and extractor is None:
        extractor = get_extractor(config.fid.extractor, config.fid.weights)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(flatten_config(config)))
        (out / "seed.txt").write_text(f"{config.seed}\n")

    run = TrainedRun(config, seed=config.seed, out_dir=out,
                     iterations_per_epoch=iterations_per_epoch(len(dataset)))
    B, P = config.batch_size, config.patches_per_scan
    B_lat = gen.latent_dim
    it = 0
    done = False

    def fakes(use_ebs: bool):
        if use_ebs:
            sel = largeebs_select(gen, disc, ebs, generator=latent_rng)
            run.selection_iterations.append(it)
            return sel.latents.to(device)
        return torch.randn(B, B_lat, generator=latent_rng).to(device)

    for epoch in range(1, config.epochs + 1):
        use_ebs = ebs.enabled and epoch > ebs.warmup_epochs
        d_losses, g_losses = [], []
        pool = None
        for scan_id, mb in epoch_plan(dataset.scan_ids, rng):
            if mb == 0:
                pool = torch.from_numpy(dataset.sample(scan_id, P, rng)).to(device)
            it += 1

            # discriminator step
            real = pool[mb * B : (mb + 1) * B]
            z = fakes(use_ebs)
            with torch.no_grad():
                fake = gen(z)
            d_real, d_fake = disc(real), disc(fake)
            loss_d, _ = loss_fn(d_real, d_fake)
            _check(loss_d, "d_loss", it, epoch, d_real, d_fake, gen, disc)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            # generator step on a fresh fake batch and a fresh real draw from the scan pool
            real_g = pool[torch.from_numpy(rng.choice(P, B, replace=False))]
            z = fakes(use_ebs)
            if is_style and not use_ebs and rng.random() < config.style_mixing_probability:
                z2 = torch.randn(B, B_lat, generator=latent_rng).to(device)
                depth = int(rng.integers(1, gen.num_style_sites))
                fake_g = gen.synthesis(mixed_styles(gen.mapping(z), gen.mapping(z2), depth, gen.num_style_sites))
            else:
                fake_g = gen(z)
            disc.requires_grad_(False)
            if relativistic:
                d_real_g = disc(real_g)
            else:
                with torch.no_grad():
                    d_real_g = disc(real_g)
            d_fake_g = disc(fake_g)
            _, loss_g = loss_fn(d_real_g, d_fake_g)
            _check(loss_g, "g_loss", it, epoch, d_real_g, d_fake_g, gen, disc)
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            disc.requires_grad_(True)

            d_losses.append(loss_d.item())
            g_losses.append(loss_g.item())
            if it % config.log_every == 0:
                run.loss_trace.append((it, d_losses[-1], g_losses[-1]))
            if config.max_iterations is not None and it >= config.max_iterations:
                done = True
                break

        run.epoch_losses.append((float(np.mean(d_losses)), float(np.mean(g_losses))))
        fid = float("nan")
        if config.fid.enabled:
            n = config.fid.n_samples
            res = compute_fid(dataset.sample_any(n, fid_rng), _fake_patches(gen, n, fid_latents),
                              extractor, n, config.fid.batch_size)
            fid = res.value
        run.fid.append(fid)
        extra = {"epoch": epoch, "iteration": it, "fid": fid, "config": flatten_config(config)}
        if out is not None:
            run.checkpoints.append(save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", gen, disc, extra))
        else:
            run.checkpoints.append(checkpoint_payload(gen, disc, extra))
        if done:
            break

    run.iterations = it
    run.generator, run.discriminator = gen, disc
    run.wall_clock = {"started": start, "seconds": time.time() - start}
    if out is not None:
        _write_run_files(run, out)
    return run


def _write_run_files(run: TrainedRun, out: Path):
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fid", "d_loss", "g_loss"])
        for e, (fid, (dl, gl)) in enumerate(zip(run.fid, run.epoch_losses), start=1):
            w.writerow([e, repr(fid), repr(dl), repr(gl)])
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "d_loss", "g_loss"])
        w.writerows((i, repr(d), repr(g)) for i, d, g in run.loss_trace)
    (out / "run.json").write_text(json.dumps({
        "seed": run.seed, "iterations": run.iterations, "iterations_per_epoch": run.iterations_per_epoch,
        "selection_iterations": run.selection_iterations, "wall_clock": run.wall_clock,
        "checkpoints": [str(p) for p in run.checkpoints],
    }, indent=2))


def read_metrics(run_dir) -> list[float]:
    """FID series from a run directory's metrics.csv."""
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return [float(row["fid"]) for row in csv.DictReader(fh)]


def select_best_model(runs) -> BestModel:
    """Lowest FID over every (run, epoch); the earliest pair wins ties.

    Accepts TrainedRun objects or bare FID series (checkpoint is then None).
    """
    runs = list(runs)
    if not runs:
        raise ValueError("select_best_model needs at least one run")
    best = None
    minima = []
    for r, run in enumerate(runs):
        series = run.fid if isinstance(run, TrainedRun) else list(run)
        finite = [(f, e) for e, f in enumerate(series) if not math.isnan(f)]
        if not finite:
            raise ValueError(f"run {r} has no FID entries")
        minima.append(min(f for f, _ in finite))
        for f, e in finite:
            if best is None or f < best[0]:
                best = (f, r, e)
    f, r, e = best
    ckpt = runs[r].checkpoints[e] if isinstance(runs[r], TrainedRun) else None
    return BestModel(ckpt, f, r, e + 1, minima)
