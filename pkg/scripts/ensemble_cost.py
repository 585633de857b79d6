"""Time snapshot ensembling against independent ensembling on a toy dataset.

One training run yields N snapshots; independent ensembling trains N runs.
The printed ratio should sit near N.
"""
import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from volres.dataset import Split, VoxelDataset
from volres.train import TrainConfig, train, train_independent


def toy_dataset(seed: int, classes: int = 2, per_class: int = 4, dims=(30, 30, 30)) -> VoxelDataset:
    rng = np.random.default_rng(seed)

    def split(n):
        labels = np.repeat(np.arange(classes), n)
        return Split((rng.random((len(labels),) + dims) < 0.1).astype(np.uint8), labels)

    return VoxelDataset([f"c{i}" for i in range(classes)], {"train": split(per_class), "test": split(1)})


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--members", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = toy_dataset(args.seed)
    cfg = TrainConfig(k=1, batch_size=8, epochs=args.epochs, augment=False, deterministic=False, seed=args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        t0 = time.perf_counter()
        res = train(None, data, cfg, Path(tmp) / "snapshot")
        snap = time.perf_counter() - t0
        t0 = time.perf_counter()
        train_independent(data, cfg, args.members, Path(tmp) / "independent")
        indep = time.perf_counter() - t0
    print(f"snapshot ensemble:    {snap:7.2f}s for {len(res.snapshots)} snapshots")
    print(f"independent ensemble: {indep:7.2f}s for {args.members} members")
    print(f"ratio: {indep / snap:.2f} (members = {args.members})")


if __name__ == "__main__":
    main()
