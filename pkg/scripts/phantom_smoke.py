"""End-to-end run on synthetic phantoms: train, sample, branch-count ROC, latent embedding.

    python scripts/phantom_smoke.py --out runs/smoke [--method styleGAN3D-MDmin] [--iterations 200]
"""
import argparse
import time
from pathlib import Path

import numpy as np

from lungct_gan.cli import run_command
from lungct_gan.patches import PatchDataset
from lungct_gan.phantoms import phantom_dataset


def step(name, argv):
    start = time.time()
    code = run_command(argv)
    print(f"{name:<12} exit={code} {time.time() - start:6.1f}s")
    if code:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--method", default="DCGAN3D-MDmin")
    ap.add_argument("--scans", type=int, default=4)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)

    step("train", ["train", "--method", args.method, "--phantoms", str(args.scans), "--width", "1/8",
                   "--batch-size", "2", "--epochs", "2", "--seed", str(args.seed), "--out", str(out / "train"),
                   "--set", f"max_iterations={args.iterations}", "fid.n_samples=64", "largeebs.warmup_epochs=1"])
    ckpt = sorted((out / "train" / "checkpoints").glob("*.ckpt"))[-1]
    step("sample", ["sample", "--checkpoint", str(ckpt), "--n", "16", "--seed", str(args.seed),
                    "--out", str(out / "sample")])
    step("fake-bank", ["sample", "--checkpoint", str(ckpt), "--n", "8", "--seed", str(args.seed + 1),
                       "--out", str(out / "fake")])
    # real patches come straight from the phantom scans the model was trained on
    (out / "real").mkdir(parents=True, exist_ok=True)
    data = PatchDataset(phantom_dataset(args.scans, seed=args.seed))
    np.save(out / "real" / "patches.npy", data.sample_any(8, np.random.default_rng(args.seed)))
    step("skeleton-roc", ["skeleton-roc", "--real-dir", str(out / "real"), "--fake-dir", str(out / "fake"),
                          "--n-boot", "200", "--mip-examples", "1", "--out", str(out / "roc")])
    step("embed", ["umap-export", "--checkpoint", str(ckpt), "--reducer", "pca", "--n-embed", "200",
                   "--n-label", "8", "--out", str(out / "embed")])


if __name__ == "__main__":
    main()
