"""Command-line entry point: ``volres {voxelize,train,eval,gradcheck,sweep}``.

Exit codes: 0 success, 1 input error, 2 training divergence, 3 verification
failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import dataclasses
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .checkpoint import atomic_write, load_checkpoint
from .dataset import (
    DatasetIndex,
    load_cache_dir,
    scan_modelnet,
    write_voxel_cache,
    SPLITS,
)
from .errors import DivergenceError, VolresError
from .mesh import normalize_mesh, read_off
from .optim import OptimizerConfig, PlateauSchedule
from .train import (
    Ensemble,
    TrainConfig,
    evaluate,
    sweep,
    train,
)
from .voxelize import voxelize

log = logging.getLogger("volres")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
MAX_SKIP_FRACTION = 0.01


def worker_count() -> int:
    """Worker cap from ``VOLRES_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("VOLRES_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise VolresError(f"VOLRES_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    data: Optional[str] = None
    out: Optional[str] = None
    k: int = 1
    batch_size: int = 64
    epochs: int = 10
    lr: float = 2e-4
    optimizer: str = "nadam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.04
    dropout: float = 0.3
    snapshot_every: int = 1
    seed: int = 0
    augment: bool = True
    deterministic: bool = True
    dtype: str = "float32"
    plateau_factor: float = 0.02
    plateau_patience: int = 3
    plateau_min_lr: float = 1e-7
    plateau_threshold: float = 1e-4
    plateau_reading: str = "multiply"
    grid: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise VolresError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise VolresError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def override(self, **flags) -> "RunConfig":
        """Flags win over file values; ``None`` means 'not given'."""
        return dataclasses.replace(self, **{k: v for k, v in flags.items() if v is not None})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            k=self.k,
            batch_size=self.batch_size,
            epochs=self.epochs,
            optimizer=OptimizerConfig(
                kind=self.optimizer,
                lr=self.lr,
                momentum=self.momentum,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
                schedule_decay=self.schedule_decay,
            ),
            schedule=PlateauSchedule(
                factor=self.plateau_factor,
                patience=self.plateau_patience,
                min_lr=self.plateau_min_lr,
                threshold=self.plateau_threshold,
                reading=self.plateau_reading,
            ),
            dropout_rate=self.dropout,
            seed=self.seed,
            snapshot_every=self.snapshot_every,
            augment=self.augment,
            deterministic=self.deterministic,
            dtype=self.dtype,
        )

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.json"
        atomic_write(path, (json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


def _resolve(args, keys) -> RunConfig:
    base = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    return base.override(**{k: getattr(args, k, None) for k in keys})


# -- commands ------------------------------------------------------------------

def _voxelize_one(path, dims):
    mesh = normalize_mesh(read_off(path))
    return voxelize(mesh, dims)


def cmd_voxelize(args) -> int:
    out = Path(args.output)
    dims = (args.dims,) * 3
    index = scan_modelnet(args.input_dir)
    entries = index.entries
    results = [None] * len(entries)
    skipped = []
    with cf.ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futs = {pool.submit(_voxelize_one, e.path, dims): i for i, e in enumerate(entries)}
        for fut in cf.as_completed(futs):
            i = futs[fut]
            try:
                results[i] = fut.result()
            except (VolresError, OSError, ValueError) as e:
                skipped.append((entries[i].path, f"{type(e).__name__}: {e}"))
    skipped.sort()
    kept = DatasetIndex(index.classes, [e for e, g in zip(entries, results) if g is not None])
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        rows = [(e.label, g) for e, g in zip(entries, results) if g is not None and e.split == split]
        grids = np.stack([g for _, g in rows]) if rows else np.zeros((0,) + dims, np.uint8)
        write_voxel_cache(out / f"{split}.voxl", grids, [y for y, _ in rows])
    meta = kept.to_json()
    meta.update(dims=list(dims), seed=args.seed, skipped=len(skipped))
    atomic_write(out / "index.json", (json.dumps(meta, indent=1) + "\n").encode())
    atomic_write(out / "skipped.txt", "".join(f"{p}\t{r}\n" for p, r in skipped).encode())
    sizes = kept.split_sizes()
    print(f"classes {len(kept.classes)}  train {sizes['train']}  test {sizes['test']}  skipped {len(skipped)}")
    if entries and len(skipped) / len(entries) > MAX_SKIP_FRACTION:
        print(f"error: {len(skipped)} of {len(entries)} meshes skipped (see skipped.txt)", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


TRAIN_KEYS = (
    "data", "out", "k", "batch_size", "lr", "optimizer", "dropout", "epochs",
    "snapshot_every", "seed", "augment", "deterministic", "dtype",
)


def cmd_train(args) -> int:
    rc = _resolve(args, TRAIN_KEYS)
    if not rc.data or not rc.out:
        raise VolresError("train needs --data (voxel cache directory) and --out")
    cfg = rc.train_config()
    data = load_cache_dir(rc.data, with_meshes=cfg.augment)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    try:
        res = train(None, data, cfg, out)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    last = res.records[-1]
    print(
        f"epochs {len(res.records)}  train_acc {last.train_acc:.4f}  val_acc {last.val_acc:.4f}  "
        f"snapshots {len(res.snapshots)}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = sorted(glob.glob(args.checkpoints))
    if not paths:
        print(f"error: no checkpoints match {args.checkpoints!r}", file=sys.stderr)
        return EXIT_INPUT
    data = load_cache_dir(args.data, with_meshes=False)
    split = data[args.split]
    report = Path(args.report_dir) if args.report_dir else None
    nets = [load_checkpoint(p) for p in paths]
    rows = []
    for p, net in zip(paths, nets):
        ev = evaluate(net, split, classes=data.classes)
        rows.append((p, ev))
    if args.ensemble == "none":
        for p, ev in rows:
            print(f"{ev.accuracy:.4f}  {p}")
        best_path, best = max(rows, key=lambda r: r[1].accuracy)
        if len(rows) > 1:
            print(f"best single member: {best.accuracy:.4f}  {best_path}")
        if report is not None:
            best.confusion.write(report)
        return EXIT_OK
    ens = Ensemble(nets, args.ensemble.replace("-", "_"))
    ev = evaluate(ens, split, classes=data.classes)
    for p, mev in rows:
        print(f"member {mev.accuracy:.4f}  {p}")
    print(f"ensemble ({args.ensemble}, {len(nets)} members): {ev.accuracy:.4f}")
    if report is not None:
        ev.confusion.write(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed)
    for r in results:
        print(f"{r.op:18s} max_rel_err {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


SWEEP_KEYS = ("data", "out")


def cmd_sweep(args) -> int:
    rc = _resolve(args, SWEEP_KEYS)
    if not rc.grid:
        raise VolresError("sweep config needs a non-empty 'grid' mapping")
    if not rc.data or not rc.out:
        raise VolresError("sweep needs 'data' and 'out' (config keys or flags)")
    cfg = rc.train_config()
    data = load_cache_dir(rc.data, with_meshes=cfg.augment)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_resolved(out)
    rows = sweep(rc.grid, cfg, data, out)
    for r in rows:
        print(f"{r.get('val_acc', float('nan')):.4f}  {r['cell']}  {r['status']}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volres", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="convert a ModelNet tree into voxel caches")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--dims", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train", help="train one network and save per-epoch snapshots")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["nadam", "sgd-nesterov"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    _bool_flag(p, "augment", "random single-axis rotation augmentation")
    _bool_flag(p, "deterministic", "fixed-order accumulation (slower)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints or an ensemble of them")
    p.add_argument("--checkpoints", required=True, help="glob pattern")
    p.add_argument("--data", required=True)
    p.add_argument("--ensemble", choices=["mean-softmax", "weight-average", "none"], default="none")
    p.add_argument("--split", default="test")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="grid search over training hyperparameters")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        from threadpoolctl import threadpool_limits

        limit = worker_count() if os.environ.get("VOLRES_THREADS") else None
        with threadpool_limits(limits=limit):
            return args.func(args)
    except VolresError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
