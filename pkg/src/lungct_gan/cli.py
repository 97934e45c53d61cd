"""Command-line entry point: ``lungct-gan <command> [--config FILE] [flags]``.

Settings resolve as flag > config file > default. Every command writes
``manifest.json`` into ``--out`` holding the fully resolved argv, so a run can
be repeated with ``lungct-gan $(jq -r '.argv | join(" ")' manifest.json)``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, config_hash, read_config_file, train_config_from_flat

VERSION = "0.1.0"
DEVICE_ENV = "LUNGCT_GAN_DEVICE"

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    argv: list[str]
    artifacts: list[str] = field(default_factory=list)
    version: str = VERSION
    config_hash: str = ""
    created: float = field(default_factory=time.time)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str))
        return path


class UsageError(Exception):
    pass


# --- option tables --------------------------------------------------------------
# Each command lists (key, type, default, help). Keys double as flag names
# (underscores -> dashes) and as config-file keys.

_COMMON = [
    ("seed", int, 0, "single seed all randomness derives from"),
    ("out", str, None, "artifact directory"),
    ("deterministic", bool, True, "deterministic kernels"),
]

OPTIONS = {
    "train": [
        ("method", str, None, "one of the nine method names, sets family / MDmin / largeEBS"),
        ("family", str, None, "generator family"),
        ("mdmin", bool, None, "append the MDmin channel in D"),
        ("largeebs", bool, None, "enable largeEBS selection"),
        ("width", str, None, "channel width multiplier for G and D, e.g. 1/8"),
        ("epochs", int, None, None),
        ("batch_size", int, None, "also sets patches_per_scan to 14x"),
        ("data_dir", str, None, "directory of <scan>.mhd volumes with lung/nodule masks"),
        ("manifest", str, None, "split manifest (one scan id per line)"),
        ("annotations", str, None, "nodule annotation CSV"),
        ("phantoms", int, 0, "train on N synthetic phantom scans instead of --data-dir"),
        ("set", list, None, "extra key=value training overrides (repeatable)"),
    ],
    "sample": [
        ("checkpoint", str, None, None),
        ("n", int, 16, "number of samples"),
        ("columns", int, 8, "grid columns"),
    ],
    "fid": [
        ("real_dir", str, None, "directory of .npy patch arrays"),
        ("fake_dir", str, None, None),
        ("n", int, 10_000, None),
        ("extractor", str, "random2d", None),
        ("weights", str, None, None),
        ("batch_size", int, 50, None),
    ],
    "fid3d": [
        ("real_dir", str, None, None),
        ("fake_dir", str, None, None),
        ("n", int, 10_000, None),
        ("extractor", str, "resnet10_3d", None),
        ("weights", str, None, None),
        ("batch_size", int, 50, None),
    ],
    "interpolate": [
        ("checkpoint", str, None, None),
        ("steps", int, 8, None),
        ("pairs", int, 4, None),
    ],
    "skeleton-roc": [
        ("table", str, None, "branch table CSV (patch_id, source, count)"),
        ("real_dir", str, None, None),
        ("fake_dir", str, None, None),
        ("threshold", float, 0.0, "binarisation threshold on [-1, 1] intensities"),
        ("n", int, 10_000, "patches per source"),
        ("n_boot", int, 1000, None),
        ("mip_examples", int, 0, "write rotating MIP strips for this many patches per source"),
    ],
    "umap-export": [
        ("checkpoint", str, None, None),
        ("n_embed", int, 50_000, None),
        ("n_label", int, 1000, None),
        ("reducer", str, "umap", "umap or pca"),
        ("threshold", float, 0.0, None),
    ],
    "observer-export": [
        ("real_dir", str, None, None),
        ("fake_dir", str, None, None),
        ("per_class", int, 100, None),
        ("repeats", int, 3, None),
    ],
    "compare-runs": [
        ("a", list, None, "FID minima file or run directories for method A"),
        ("b", list, None, "FID minima file or run directories for method B"),
    ],
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _coerce(key, raw, typ):
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if typ is list:
            return raw.split()
        if raw.lower() == "none":
            return None
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}", key) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lungct-gan", description="3D lung CT patch GAN experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        for key, typ, _default, help_ in _COMMON + opts:
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_)
            elif typ is list:
                p.add_argument(flag, dest=key, nargs="+", action="extend", default=None, help=help_)
            else:
                p.add_argument(flag, dest=key, type=str, default=None, help=help_)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    table = {k: (t, d) for k, t, d, _ in _COMMON + OPTIONS[command]}
    values = {k: d for k, (_t, d) in table.items()}
    extra: dict[str, str] = {}
    if args.config:
        try:
            file_values = read_config_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}", "config") from exc
        for key, raw in file_values.items():
            if key in table:
                values[key] = _coerce(key, raw, table[key][0])
            elif command == "train":
                extra[key] = raw  # dotted training keys, validated later
            else:
                raise ConfigError(f"unknown config key {key!r} for {command}", key)
    for key, (typ, _d) in table.items():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _coerce(key, flag, typ)
    if command == "train":
        for item in values.pop("set") or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}", item)
            k, v = item.split("=", 1)
            extra[k.strip()] = v.strip()
        values["train"] = extra
    return values


def _argv_from(command: str, values: dict) -> list[str]:
    """Canonical argv reproducing ``values`` without a config file."""
    argv = [command]
    table = {k: t for k, t, _d, _h in _COMMON + OPTIONS[command]}
    for key, value in values.items():
        if key == "train":
            if value:
                argv += ["--set"] + [f"{k}={v}" for k, v in value.items()]
            continue
        if value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if table[key] is bool:
            argv.append(flag if value else "--no-" + key.replace("_", "-"))
        elif table[key] is list:
            argv += [flag, *map(str, value)]
        else:
            argv += [flag, str(value)]
    return argv


def _require(values, *keys):
    for k in keys:
        if values.get(k) in (None, "", []):
            raise ConfigError(f"missing required setting {k!r}", k)


def _device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def _load_patch_dir(path, n: int | None = None) -> np.ndarray:
    """Concatenate every .npy array under ``path`` (sorted by name)."""
    path = Path(path)
    files = sorted(path.glob("*.npy")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .npy patch arrays in {path}")
    parts, have = [], 0
    for f in files:
        arr = np.load(f, mmap_mode="r")
        arr = arr[None] if arr.ndim == 3 else arr
        parts.append(np.asarray(arr[: None if n is None else n - have], dtype=np.float32))
        have += len(parts[-1])
        if n is not None and have >= n:
            break
    return np.concatenate(parts)


def _latent_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _latents_from_seeds(seeds, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng(s).standard_normal(dim) for s in seeds]).astype(np.float32)


def _grid(images: np.ndarray, columns: int) -> np.ndarray:
    """Row-major tiling of (N, H, W) uint8 images with a 2-pixel border."""
    n, h, w = images.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    grid = np.zeros((rows * (h + 2), columns * (w + 2)), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[r * (h + 2) + 1 : r * (h + 2) + 1 + h, c * (w + 2) + 1 : c * (w + 2) + 1 + w] = img
    return grid


def _save_png(path, array):
    from PIL import Image

    Image.fromarray(array, mode="L" if array.ndim == 2 else "RGB").save(path)


# --- commands -------------------------------------------------------------------

def cmd_train(v, out: Path) -> list[str]:
    from .patches import PatchDataset
    from .phantoms import phantom_dataset
    from .training import METHODS, train

    flat = dict(v["train"])
    if v["method"]:
        if v["method"] not in METHODS:
            raise ConfigError(f"unknown method {v['method']!r}", "method")
        family, mdmin, ebs = METHODS[v["method"]]
        flat.setdefault("generator.family", family)
        flat.setdefault("discriminator.use_mdmin", str(mdmin))
        flat.setdefault("largeebs.enabled", str(ebs))
    for key, target in (("family", ["generator.family"]), ("mdmin", ["discriminator.use_mdmin"]),
                        ("largeebs", ["largeebs.enabled"]), ("epochs", ["epochs"]),
                        ("width", ["generator.width_multiplier", "discriminator.width_multiplier"])):
        if v[key] is not None:
            for t in target:
                flat[t] = str(v[key])
    if v["batch_size"] is not None:
        flat["batch_size"] = str(v["batch_size"])
    if "batch_size" in flat:
        b = int(flat["batch_size"])
        flat.setdefault("patches_per_scan", str(14 * b))
        # largeEBS keeps exactly one minibatch out of 4x as many candidates
        flat.setdefault("largeebs.keep_count", str(b))
        flat.setdefault("largeebs.candidate_count", str(4 * b))
    flat["seed"] = str(v["seed"])
    flat.setdefault("generator.seed", str(v["seed"]))
    flat.setdefault("discriminator.seed", str(v["seed"]))
    flat["deterministic"] = str(v["deterministic"])
    config = train_config_from_flat(flat)

    if v["phantoms"]:
        dataset = PatchDataset(phantom_dataset(v["phantoms"], seed=v["seed"]))
    else:
        _require(v, "data_dir")
        dataset = PatchDataset.from_directory(v["data_dir"], v["manifest"], v["annotations"])
    run = train(config, dataset, out_dir=out, device=_device())
    print(json.dumps({"iterations": run.iterations, "fid": run.fid}))
    return ["config.txt", "seed.txt", "metrics.csv", "losses.csv", "run.json"] + \
        [str(Path(p).relative_to(out)) for p in run.checkpoints]


def cmd_sample(v, out: Path) -> list[str]:
    from .checkpoint import load_checkpoint
    from .evaluation import central_slice, to_uint8
    from .generators import generate

    _require(v, "checkpoint")
    gen, _, _ = load_checkpoint(v["checkpoint"])
    seeds = _latent_seeds(v["seed"], v["n"])
    patches = generate(gen, _latents_from_seeds(seeds, gen.latent_dim)).numpy()
    _save_png(out / "grid.png", _grid(to_uint8(central_slice(patches)), v["columns"]))
    np.save(out / "patches.npy", patches)
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "latent_seed"])
        w.writerows(enumerate(seeds))
    return ["grid.png", "patches.npy", "seeds.csv"]


def _fid(v, out: Path, rank: int) -> list[str]:
    from .evaluation import compute_fid
    from .extractors import get_extractor

    _require(v, "real_dir", "fake_dir")
    extractor = get_extractor(v["extractor"], v["weights"])
    if extractor.rank != rank:
        raise ConfigError(f"extractor {v['extractor']!r} is {extractor.rank}D", "extractor")
    real, fake = _load_patch_dir(v["real_dir"], v["n"]), _load_patch_dir(v["fake_dir"], v["n"])
    n = min(v["n"], len(real), len(fake))
    result = compute_fid(real, fake, extractor, n, v["batch_size"])
    (out / "fid.json").write_text(result.to_json())
    print(f"FID {result.value:.6g} (n={n}, extractor={extractor.name})")
    return ["fid.json"]


def cmd_fid(v, out):
    return _fid(v, out, 2)


def cmd_fid3d(v, out):
    return _fid(v, out, 3)


def cmd_interpolate(v, out: Path) -> list[str]:
    from .checkpoint import load_checkpoint
    from .evaluation import central_slice, interpolation_path, to_uint8
    from .generators import StyleGAN3DGenerator, generate_from_native, native_latents

    _require(v, "checkpoint")
    gen, _, _ = load_checkpoint(v["checkpoint"])
    style = isinstance(gen, StyleGAN3DGenerator)
    seeds = _latent_seeds(v["seed"], 2 * v["pairs"])
    codes = native_latents(gen, _latents_from_seeds(seeds, gen.latent_dim)).numpy()
    rows = []
    for p in range(v["pairs"]):
        path = interpolation_path(codes[2 * p], codes[2 * p + 1], v["steps"], spherical=not style)
        patches = generate_from_native(gen, path.astype(np.float32)).numpy()
        rows.append(to_uint8(central_slice(patches)))
    _save_png(out / "interpolation.png", _grid(np.concatenate(rows), v["steps"]))
    with open(out / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "start_seed", "end_seed", "space", "path"])
        for p in range(v["pairs"]):
            w.writerow([p, seeds[2 * p], seeds[2 * p + 1], "w" if style else "z", "lerp" if style else "slerp"])
    return ["interpolation.png", "seeds.csv"]


def cmd_skeleton_roc(v, out: Path) -> list[str]:
    from .structure import (binarize, branch_count_roc, count_branch_points, patch_branch_count,
                            read_branch_table, render_mip, save_mip_strip, skeletonize,
                            write_branch_table, write_roc_report)

    artifacts = ["roc.json", "roc.png"]
    if v["table"]:
        counts = read_branch_table(v["table"])
    else:
        _require(v, "real_dir", "fake_dir")
        counts, rows = {}, []
        for source in ("real", "fake"):
            patches = _load_patch_dir(v[f"{source}_dir"], v["n"])
            counts[source] = [patch_branch_count(p, v["threshold"]) for p in patches]
            rows += [(i, source, c) for i, c in enumerate(counts[source])]
            for i in range(min(v["mip_examples"], len(patches))):
                skel = skeletonize(binarize(patches[i], v["threshold"]))
                name = f"mip_{source}_{i}.png"
                save_mip_strip(render_mip(skel, range(0, 360, 45), count_branch_points(skel)[1]), out / name)
                artifacts.append(name)
        write_branch_table(out / "branch_counts.csv", rows)
        artifacts.append("branch_counts.csv")
    curve = branch_count_roc(counts["real"], counts["fake"], v["n_boot"], np.random.default_rng(v["seed"]))
    write_roc_report(curve, out)
    print(f"AUC {curve.auc:.4f} +- {curve.auc_sd:.4f} (95% CI {curve.auc_ci[0]:.4f}-{curve.auc_ci[1]:.4f})")
    return artifacts


def cmd_umap_export(v, out: Path) -> list[str]:
    from .checkpoint import load_checkpoint
    from .latent import (embed_latents, get_reducer, label_with_branch_counts, plot_embedding,
                         save_latents, write_embedding_csv)

    _require(v, "checkpoint")
    gen, _, _ = load_checkpoint(v["checkpoint"])
    rng = np.random.default_rng(v["seed"])
    points = embed_latents(gen, v["n_embed"], get_reducer(v["reducer"], v["seed"]), rng)
    labelled = {p.latent_id: p for p in label_with_branch_counts(gen, points, v["threshold"], v["n_label"])}
    points = [labelled.get(p.latent_id, p) for p in points]
    write_embedding_csv(out / "embedding.csv", points)
    save_latents(out / "latents.npy", points)
    plot_embedding(points, out / "embedding.png")
    return ["embedding.csv", "latents.npy", "embedding.png"]


def cmd_observer_export(v, out: Path) -> list[str]:
    from .evaluation import export_observer_study

    _require(v, "real_dir", "fake_dir")
    real, fake = _load_patch_dir(v["real_dir"]), _load_patch_dir(v["fake_dir"])
    manifest = export_observer_study(real, fake, np.random.default_rng(v["seed"]), out,
                                     v["per_class"], v["repeats"])
    return ["key.csv", "stimuli_manifest.json"] + [f"stimuli/{s}" for s in manifest["stimuli"]] + \
        [f"reading_order_{r + 1}.txt" for r in range(v["repeats"])]


def _minima(sources: list[str]) -> list[float]:
    """FID minima from a text file of numbers, or one minimum per run directory."""
    from .training import read_metrics

    values = []
    for s in sources:
        p = Path(s)
        if p.is_dir():
            fids = [f for f in read_metrics(p) if f == f]
            if not fids:
                raise ValueError(f"run directory {p} has no FID values")
            values.append(min(fids))
        else:
            values += [float(tok) for tok in p.read_text().replace(",", " ").split()]
    return values


def cmd_compare_runs(v, out: Path) -> list[str]:
    from .stats import welch_t_test

    _require(v, "a", "b")
    a, b = _minima(v["a"]), _minima(v["b"])
    res = welch_t_test(a, b)
    report = {"a": a, "b": b, "mean_a": float(np.mean(a)), "mean_b": float(np.mean(b)),
              "t": res.statistic, "p": res.pvalue, "df": res.df, "test": "welch"}
    (out / "compare.json").write_text(json.dumps(report, indent=2))
    print(f"t = {res.statistic:.4f}, df = {res.df:.2f}, p = {res.pvalue:.3g}")
    return ["compare.json"]


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "fid": cmd_fid,
    "fid3d": cmd_fid3d,
    "interpolate": cmd_interpolate,
    "skeleton-roc": cmd_skeleton_roc,
    "umap-export": cmd_umap_export,
    "observer-export": cmd_observer_export,
    "compare-runs": cmd_compare_runs,
}


def _fail(code: int, kind: str, message: str, key: str | None = None) -> int:
    err = {"error": kind, "message": message, "exit_code": code}
    if key is not None:
        err["key"] = key
    print(json.dumps(err), file=sys.stderr)
    return code


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    try:
        values = resolve(args.command, args)
        out = Path(values["out"] or f"runs/{args.command}-{values['seed']}")
        out.mkdir(parents=True, exist_ok=True)
        if values["deterministic"]:
            import torch

            torch.use_deterministic_algorithms(True, warn_only=True)
        artifacts = COMMANDS[args.command](values, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.key)
    except Exception as exc:  # runtime failures map to one exit code
        if os.environ.get("LUNGCT_GAN_TRACEBACK"):
            traceback.print_exc()
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    resolved = {k: val for k, val in values.items() if k != "out"}
    manifest = RunManifest(args.command, resolved, values["seed"], _argv_from(args.command, values),
                           artifacts, config_hash=config_hash(resolved))
    manifest.write(out)
    return EXIT_OK


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
