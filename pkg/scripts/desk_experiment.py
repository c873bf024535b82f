"""Desk-scale denoising run: phantoms -> noise -> train -> test metrics.

    python scripts/desk_experiment.py --arch unet --epochs 30 --out runs/desk
"""
import argparse
import time
from pathlib import Path

from ddpdenoise.data import (DatasetManifest, NoiseSpec, corrupt_manifest,
                             gen_synthetic_phantoms, split_dataset, write_clean_set)
from ddpdenoise.metrics import evaluate_testset, noisy_baseline, table_row
from ddpdenoise.trainer import TrainConfig, train


def make_dataset(root: Path, count: int, size: int, sigma: float, seed: int = 0) -> DatasetManifest:
    root.mkdir(parents=True, exist_ok=True)
    phantoms = gen_synthetic_phantoms(count, size, seed)
    rows = write_clean_set(phantoms, root / "clean", root)
    manifest = DatasetManifest(rows, split_dataset([p.id for p in phantoms], seed=seed), size, seed)
    manifest.root = root
    manifest = corrupt_manifest(manifest, NoiseSpec(0.1, sigma, seed))
    manifest.save(root / "manifest.json")
    return manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="unet", choices=["unet", "unetpp"])
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--base-ch", type=int, default=8)
    ap.add_argument("--depth", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--mode", default="single")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--amp", action="store_true")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    out = Path(args.out)
    manifest = make_dataset(out / "data", args.count, args.size, args.sigma)
    cfg = TrainConfig(arch=args.arch, base_ch=args.base_ch, depth=args.depth, mode=args.mode,
                      workers=args.workers, amp=args.amp, epochs=args.epochs,
                      batch_per_worker=args.batch, out_dir=str(out / args.arch))
    t0 = time.perf_counter()
    result = train(manifest, cfg)
    elapsed = time.perf_counter() - t0
    for st in result.stats:
        print(f"epoch {st.epoch:3d} train {st.train_loss:.5f} val {st.val_loss:.5f} {st.wall_seconds:.1f}s")
    print(table_row("noisy input", noisy_baseline(manifest)))
    print(table_row(args.arch, evaluate_testset(result.graph, manifest)))
    print(f"training wall clock {elapsed:.1f}s")


if __name__ == "__main__":
    main()
