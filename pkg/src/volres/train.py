"""Training loop, evaluation metrics, ensembling and hyperparameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import tensor
from .checkpoint import atomic_write, checkpoint_fingerprint, load_checkpoint, save_checkpoint
from .dataset import Split, VoxelDataset, batch_iter
from .errors import ConfigError, DivergenceError, SpecMismatchError, VolresError
from .network import Network, NetworkSpec, build
from .optim import OptimizerConfig, Optimizer, PlateauSchedule

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds")


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary hashable parts."""
    blob = json.dumps([str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=4).digest(), "little") & 0x7FFFFFFF


@dataclass
class TrainConfig:
    k: int = 1
    batch_size: int = 64
    epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: PlateauSchedule = field(default_factory=PlateauSchedule)
    dropout_rate: float = 0.3
    seed: int = 0
    snapshot_every: int = 1
    augment: bool = True
    deterministic: bool = True
    dtype: str = "float32"
    val_split: Optional[str] = "test"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.snapshot_every < 0:
            raise ConfigError(f"snapshot_every must be >= 0, got {self.snapshot_every}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def network_spec(self, num_classes: int, input_dims=(30, 30, 30)) -> NetworkSpec:
        return NetworkSpec(k=self.k, num_classes=num_classes, input_dims=tuple(input_dims), dropout_rate=self.dropout_rate)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = {k: v for k, v in d["schedule"].items() if k not in ("best_loss", "epochs_since_best", "drops")}
        return d

    def replace(self, **changes) -> "TrainConfig":
        """Copy with overrides; ``optimizer.lr``-style dotted keys reach nested configs."""
        top, opt, sched = {}, {}, {}
        for key, val in changes.items():
            if key.startswith("optimizer."):
                opt[key.split(".", 1)[1]] = val
            elif key.startswith("schedule."):
                sched[key.split(".", 1)[1]] = val
            elif key == "lr":
                opt["lr"] = val
            elif key in {f.name for f in dataclasses.fields(self)}:
                top[key] = val
            else:
                raise ConfigError(f"unknown training config key {key!r}")
        o = dataclasses.replace(self.optimizer, **opt)
        s = PlateauSchedule(**{**self.to_dict()["schedule"], **sched})
        return dataclasses.replace(self, optimizer=o, schedule=s, **top)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class Snapshot:
    epoch: int
    path: Path


@dataclass
class TrainResult:
    net: Network
    records: list
    snapshots: list
    losses: list = field(default_factory=list)  # per-batch training losses


def _append_metrics(path: Path, rec: EpochRecord) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(METRICS_FIELDS)
        w.writerow([getattr(rec, k) for k in METRICS_FIELDS])


def train(
    net: Optional[Network],
    data: VoxelDataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    train_split: str = "train",
    on_epoch: Optional[Callable[[EpochRecord], bool]] = None,
) -> TrainResult:
    """Train ``net`` (built from ``cfg`` when None) and collect per-epoch snapshots.

    Snapshots are written to ``out_dir/snapshots/epoch_XXX.vrck`` and
    per-epoch metrics appended to ``out_dir/metrics.csv``. ``on_epoch`` sees
    every record and may return True to stop early.
    """
    split = data[train_split]
    dtype = np.dtype(cfg.dtype)
    if net is None:
        net = build(cfg.network_spec(data.num_classes, split.dims), dtype=dtype, seed=cfg.seed)
    dtype = net.dtype
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
    params = net.parameters()
    opt = Optimizer(params, cfg.optimizer)
    sched = PlateauSchedule(**cfg.to_dict()["schedule"])
    val_name = cfg.val_split if cfg.val_split and data.has(cfg.val_split) else None
    records, snapshots, losses = [], [], []
    dropout_rng = np.random.default_rng([cfg.seed, 7])
    step = 0
    with tensor.ordered(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            tot_loss = 0.0
            correct = 0
            seen = 0
            for b, (x, y) in enumerate(
                batch_iter(split, cfg.batch_size, augment=cfg.augment, seed=cfg.seed, epoch=epoch, dtype=dtype)
            ):
                opt.zero_grad()
                logits = net.forward(x, train=True, rng=dropout_rng)
                loss, probs = ad.softmax_xent(logits, y)
                lval = float(loss.data)
                if not math.isfinite(lval):
                    raise DivergenceError(f"training loss is {lval}", epoch=epoch, batch=b)
                ad.backward(loss)
                opt.step()
                step += 1
                losses.append(lval)
                tot_loss += lval * len(y)
                correct += int((probs.argmax(axis=1) == y).sum())
                seen += len(y)
            val_loss = val_acc = float("nan")
            if val_name is not None:
                ev = evaluate(net, data[val_name], batch_size=cfg.batch_size)
                val_loss, val_acc = ev.loss, ev.accuracy
                opt.lr = sched.update(val_loss, opt.lr, epoch=epoch)
            rec = EpochRecord(
                epoch, tot_loss / seen, correct / seen, val_loss, val_acc, opt.lr, time.perf_counter() - t0
            )
            records.append(rec)
            log.info(
                "epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.3g",
                epoch, rec.train_loss, rec.train_acc, val_loss, val_acc, opt.lr,
            )
            if out is not None:
                _append_metrics(out / "metrics.csv", rec)
                if cfg.snapshot_every and epoch % cfg.snapshot_every == 0:
                    p = save_checkpoint(
                        net, out / "snapshots" / f"epoch_{epoch:03d}.vrck", step, opt.state_arrays()
                    )
                    snapshots.append(Snapshot(epoch, p))
            if on_epoch is not None and on_epoch(rec):
                break
    return TrainResult(net, records, snapshots, losses)


# -- evaluation -------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[true, predicted]
    classes: list

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes) -> "ConfusionMatrix":
        k = len(classes)
        m = np.zeros((k, k), dtype=np.int64)
        np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(m, list(classes))

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")

    def normalized(self) -> np.ndarray:
        tot = self.totals[:, None].astype(np.float64)
        return np.divide(self.counts, tot, out=np.zeros(self.counts.shape), where=tot > 0)

    def to_json(self) -> str:
        return json.dumps({"classes": self.classes, "matrix": self.counts.tolist()}, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["true\\pred"] + self.classes)
        for name, row in zip(self.classes, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()

    def write(self, report_dir, stem="confusion") -> None:
        d = Path(report_dir)
        atomic_write(d / f"{stem}.json", self.to_json().encode())
        atomic_write(d / f"{stem}.csv", self.to_csv().encode())


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: ConfusionMatrix
    probs: np.ndarray


def predict_proba(model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if isinstance(model, Ensemble):
        return model.predict_proba(x, batch_size)
    return model.predict_proba(np.asarray(x, dtype=model.dtype), batch_size)


def evaluate(model, split: Split, batch_size: int = 64, classes: Optional[Sequence[str]] = None) -> EvalResult:
    """Eval-mode accuracy, mean cross-entropy and confusion matrix on ``split``."""
    dtype = model.dtype
    x = split.grids[:, None].astype(dtype)
    probs = predict_proba(model, x, batch_size)
    y = split.labels
    pred = probs.argmax(axis=1)
    p_true = probs[np.arange(len(y)), y]
    loss = float(-np.mean(np.log(np.maximum(p_true, np.finfo(probs.dtype).tiny))))
    k = probs.shape[1]
    names = list(classes) if classes is not None else [str(i) for i in range(k)]
    cm = ConfusionMatrix.from_predictions(y, pred, names)
    return EvalResult(cm.accuracy, loss, cm, probs)


# -- ensembles ----------------------------------------------------------------------

MEAN_SOFTMAX = "mean_softmax"
WEIGHT_AVERAGE = "weight_average"


@dataclass
class EnsembleSpec:
    members: list
    combine: str = MEAN_SOFTMAX
    provenance: str = "snapshot"

    def __post_init__(self):
        self.combine = self.combine.replace("-", "_")
        if self.combine not in (MEAN_SOFTMAX, WEIGHT_AVERAGE):
            raise ConfigError(f"unknown combine rule {self.combine!r}")
        if self.provenance not in ("snapshot", "independent"):
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")


class Ensemble:
    """Loaded ensemble; all members must share one network fingerprint."""

    def __init__(self, nets: Sequence[Network], combine: str = MEAN_SOFTMAX):
        if not nets:
            raise ConfigError("an ensemble needs at least one member")
        fps = {n.spec.fingerprint() for n in nets}
        if len(fps) != 1:
            raise SpecMismatchError(f"ensemble members have {len(fps)} different network fingerprints")
        self.members = list(nets)
        self.combine = combine
        self.dtype = nets[0].dtype
        if combine == WEIGHT_AVERAGE:
            self._avg = _average_weights(self.members)

    @classmethod
    def load(cls, spec: EnsembleSpec) -> "Ensemble":
        fps = {checkpoint_fingerprint(p) for p in spec.members}
        if len(fps) != 1:
            raise SpecMismatchError(f"ensemble members have {len(fps)} different network fingerprints")
        return cls([load_checkpoint(p) for p in spec.members], spec.combine)

    def predict_proba(self, x, batch_size=64) -> np.ndarray:
        if self.combine == WEIGHT_AVERAGE:
            return self._avg.predict_proba(x, batch_size)
        # running mean: identical members reproduce the single model bitwise
        mean = None
        for i, net in enumerate(self.members, start=1):
            p = net.predict_proba(x, batch_size)
            mean = p if mean is None else mean + (p - mean) / i
        return mean


def _average_weights(nets: Sequence[Network]) -> Network:
    avg = build(nets[0].spec, dtype=nets[0].dtype, seed=None)
    sds = [n.state_dict() for n in nets]
    for s in sds[1:]:
        for name, arr in s.items():
            if arr.shape != sds[0][name].shape:
                raise SpecMismatchError(f"member shape mismatch for {name}")
    avg.load_state_dict({k: sum(s[k] for s in sds) / len(sds) for k in sds[0]})
    return avg


def ensemble_predict(spec: Union[EnsembleSpec, Ensemble], batch: np.ndarray) -> np.ndarray:
    ens = spec if isinstance(spec, Ensemble) else Ensemble.load(spec)
    return ens.predict_proba(np.asarray(batch, dtype=ens.dtype))


def train_independent(
    data: VoxelDataset, cfg: TrainConfig, members: int, out_dir: Union[str, Path]
) -> list:
    """Train ``members`` models from derived seeds; returns final-epoch checkpoint paths."""
    out = Path(out_dir)
    paths = []
    for i in range(members):
        mcfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "member", i), snapshot_every=0)
        res = train(None, data, mcfg, out / f"member_{i:02d}")
        paths.append(save_checkpoint(res.net, out / f"member_{i:02d}" / "final.vrck"))
    return paths


# -- sweeps ------------------------------------------------------------------------------

def grid_cells(grid: dict) -> list:
    """Cartesian product of the grid axes as a list of ``{axis: value}`` dicts."""
    if not grid:
        return [{}]
    axes = sorted(grid)
    for a in axes:
        if not isinstance(grid[a], (list, tuple)) or not grid[a]:
            raise ConfigError(f"grid axis {a!r} needs a non-empty list of values")
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_id(cell: dict) -> str:
    return "__".join(f"{k}={cell[k]}" for k in sorted(cell)) or "base"


def sweep(
    grid: dict,
    base: TrainConfig,
    data: VoxelDataset,
    out_dir: Union[str, Path],
    train_fn: Callable = train,
) -> list:
    """Train every grid cell under a derived seed; resumable via per-cell records.

    Returns result rows sorted by validation accuracy (descending) and writes
    ``sweep.csv``. A diverging cell is recorded with its error, not raised.
    """
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for cell in grid_cells(grid):
        cid = cell_id(cell)
        rec_path = cells_dir / f"{cid}.json"
        if rec_path.exists():
            rows.append(json.loads(rec_path.read_text()))
            continue
        seed = derive_seed(base.seed, cid)
        row = {"cell": cid, **cell, "seed": seed, "status": "ok", "error": ""}
        try:
            cfg = base.replace(**cell, seed=seed)
            res = train_fn(None, data, cfg, out / "runs" / cid)
            last = res.records[-1]
            row.update(
                train_loss=last.train_loss, train_acc=last.train_acc,
                val_loss=last.val_loss, val_acc=last.val_acc, epochs=len(res.records),
            )
        except (VolresError, FloatingPointError) as e:
            row.update(status="failed", error=str(e), val_acc=float("nan"))
        atomic_write(rec_path, json.dumps(row).encode())
        rows.append(row)

    def key(r):
        v = r.get("val_acc")
        return -v if isinstance(v, (int, float)) and math.isfinite(v) else math.inf

    rows.sort(key=key)
    fields = ["cell", *sorted({k for r in rows for k in r} - {"cell"})]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields)
    w.writeheader()
    for r in rows:
        w.writerow(r)
    atomic_write(out / "sweep.csv", buf.getvalue().encode())
    return rows
