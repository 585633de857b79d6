"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from volres import autodiff as ad
from volres import cli
from volres import gradcheck as gc
from volres import kernels as K
from volres import tensor as T
from volres.checkpoint import checkpoint_fingerprint, load_checkpoint
from volres.dataset import MODELNET40_COUNTS, scan_modelnet
from volres.mesh import RotationSpec, normalize_mesh, random_rotation, rotate_mesh
from volres.network import NetworkSpec, build, count_parameters_for
from volres.optim import PlateauSchedule
from volres.train import EnsembleSpec, TrainConfig, ensemble_predict, train, train_independent
from volres.voxelize import voxelize

from meshgen import box, octahedron, random_dataset, surface_blob, write_tree
from oracles import pairwise_distances, point_sample_voxelize

# published trainable-parameter counts per widening factor
PUBLISHED_COUNTS = {1: 122_032, 2: 341_688, 4: 1_081_672, 8: 3_764_328, 16: 14_826_408}
LN40 = math.log(40)


def test_c01_gradient_suite(criterion):
    with criterion(1, "gradient suite") as c:
        t0 = time.perf_counter()
        results = gc.run_suite(seed=0)
        elapsed = time.perf_counter() - t0
        by_op = {r.op: r for r in results}
        for op in ("conv3d", "batchnorm3d", "relu", "maxpool3d", "avgpool3d_global", "dense", "softmax_xent"):
            c.check(by_op[op].max_rel_error <= 1e-5, f"{op} {by_op[op].max_rel_error:.1e}")
        net = by_op["network"].max_rel_error
        c.check(net <= 1e-4, f"k=1 network {net:.1e} (tol 1e-4)")
        c.check(elapsed < 120, f"{elapsed:.0f}s (< 120s)")


def test_c02_conv_lowerings_bitwise(criterion):
    with criterion(2, "im2col == direct conv, bitwise f64") as c:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        mismatches = 0
        with T.ordered(True):
            for _ in range(50):
                k = int(rng.choice([1, 3]))
                stride = int(rng.integers(1, 3))
                pad = int(rng.integers(0, 2)) if k == 3 else 0
                dims = rng.integers(k, k + 7, 3)
                x = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(1, 6)), *dims))
                w = rng.standard_normal((int(rng.integers(1, 6)), x.shape[1], k, k, k))
                a = K.conv3d_im2col(x, w, stride, pad)
                b = K.conv3d_direct(x, w, stride, pad)
                mismatches += a.tobytes() != b.tobytes()
        elapsed = time.perf_counter() - t0
        c.check(mismatches == 0, f"{50 - mismatches}/50 shapes bitwise equal")
        c.check(elapsed < 60, f"{elapsed:.1f}s (< 60s)")


@pytest.mark.parametrize("k, batch", [(1, 16), (8, 8)])
def test_c03_init_loss(criterion, k, batch):
    with criterion(3, f"init loss k={k}") as c:
        rng = np.random.default_rng(k)
        net = build(NetworkSpec(k=k), seed=k)
        x = (rng.random((batch, 1, 30, 30, 30)) < 0.1).astype(np.float32)
        y = rng.integers(0, 40, batch)
        with ad.no_grad():
            loss, _ = ad.softmax_xent(net.forward(x, train=True, rng=rng), y)
        val = float(loss.data)
        c.check(abs(val - LN40) <= 0.15, f"{val:.4f} vs ln40 {LN40:.4f} +/- 0.15")


def test_c04_parameter_scaling(criterion):
    with criterion(4, "parameter-count scaling") as c:
        ks = sorted(PUBLISHED_COUNTS)
        ours = {k: count_parameters_for(k).trainable for k in ks}
        ratios = [ours[b] / ours[a] for a, b in zip(ks, ks[1:])]
        c.check(all(ours[b] > ours[a] for a, b in zip(ks, ks[1:])), "strictly increasing")
        c.check(all(2.5 <= r < 4.0 for r in ratios), "ratios " + "/".join(f"{r:.3f}" for r in ratios))
        c.check(all(b >= a for a, b in zip(ratios, ratios[1:])), "ratios non-decreasing")
        print("\n  k   ours        published     ours/published")
        for k in ks:
            print(f"  {k:<3} {ours[k]:>10,}  {PUBLISHED_COUNTS[k]:>12,}   {ours[k] / PUBLISHED_COUNTS[k]:.3f}")


def test_c05_overfit_capacity(criterion):
    with criterion(5, "overfit 2 classes x 10 samples") as c:
        data = random_dataset(seed=0, classes=2, per_class=10, test_per_class=0)
        cfg = TrainConfig(k=1, batch_size=20, epochs=200, augment=False, deterministic=False, val_split=None, seed=0)
        t0 = time.perf_counter()
        res = train(None, data, cfg, on_epoch=lambda rec: rec.train_acc == 1.0)
        elapsed = time.perf_counter() - t0
        last = res.records[-1]
        c.check(last.train_acc == 1.0, f"train accuracy {last.train_acc:.2f} at epoch {last.epoch} (<= 200)")
        c.check(elapsed < 600, f"{elapsed:.0f}s (< 600s)")


def test_c06_voxelizer_oracle(criterion):
    with criterion(6, "voxelizer vs point-sampling oracle") as c:
        rng = np.random.default_rng(6)
        agree = []
        for _ in range(20):
            m = rotate_mesh(normalize_mesh(surface_blob(rng)), random_rotation(rng))
            agree.append(float(np.mean(voxelize(m) == point_sample_voxelize(m, per_triangle=1000))))
        c.check(min(agree) >= 0.995, f"min agreement {min(agree):.4f}, mean {np.mean(agree):.4f} over 20 meshes")
        exact = 0
        # half-extents avoid cell boundaries so no voxel sits on a tie
        solids = [box((-0.31, -0.17, -0.405), (0.31, 0.17, 0.405)), box((-0.23, -0.29, -0.37), (0.23, 0.29, 0.37)), octahedron(0.43)]
        axes = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
        for m in solids:
            g = voxelize(m)
            for axis in range(3):
                plane = [a for a in range(3) if a != axis]
                for q in (1, 2, 3):
                    r = voxelize(rotate_mesh(m, RotationSpec(axes[axis], q * math.pi / 2)))
                    exact += np.array_equal(r, np.rot90(g, k=q, axes=(plane[1], plane[0])))
        c.check(exact == 27, f"{exact}/27 quarter-turn grids exactly permuted")


def test_c07_rotation_isometry(criterion):
    with criterion(7, "rotation isometry") as c:
        rng = np.random.default_rng(7)
        m = normalize_mesh(surface_blob(rng, 200))
        d0 = pairwise_distances(m.vertices)
        n0 = np.linalg.norm(m.vertices, axis=1)
        worst = 0.0
        for _ in range(100):
            r = rotate_mesh(m, random_rotation(rng))
            worst = max(worst, np.abs(np.linalg.norm(r.vertices, axis=1) - n0).max())
            worst = max(worst, np.abs(pairwise_distances(r.vertices) - d0).max())
        c.check(worst <= 1e-10, f"max deviation {worst:.1e} over 100 rotations")
        same = rotate_mesh(m, RotationSpec((0.0, 0.0, 1.0), 0.0))
        c.check(same.vertices.tobytes() == m.vertices.tobytes(), "angle 0 bitwise identity")


def test_c08_ensemble_identities(criterion, tmp_path):
    with criterion(8, "ensemble identities") as c:
        data = random_dataset(seed=8, classes=3, per_class=2, test_per_class=1)
        cfg = TrainConfig(k=1, batch_size=8, epochs=10, augment=False, deterministic=False, seed=8)
        res = train(None, data, cfg, tmp_path / "run")
        paths = sorted((tmp_path / "run" / "snapshots").glob("*.vrck"))
        fps = {checkpoint_fingerprint(p) for p in paths}
        loaded = [load_checkpoint(p) for p in paths]
        c.check(len(paths) == 10 and len(loaded) == 10, f"{len(paths)} snapshots over 10 epochs, all loadable")
        c.check(fps == {res.net.spec.fingerprint()}, "one shared fingerprint")
        x = data["test"].grids[:, None].astype(np.float32)
        single = loaded[-1].predict_proba(x)
        same = ensemble_predict(EnsembleSpec([paths[-1]] * 7), x)
        c.check(np.array_equal(same, single), "mean-softmax of 7 identical members bitwise == single model")


def test_c09_ensembling_cost(criterion, tmp_path):
    with criterion(9, "independent vs snapshot ensembling cost") as c:
        data = random_dataset(seed=9, classes=2, per_class=4, test_per_class=1)
        cfg = TrainConfig(k=1, batch_size=8, epochs=4, augment=False, deterministic=False, seed=9)
        n = 5
        t0 = time.perf_counter()
        train(None, data, cfg, tmp_path / "snap")
        snap = time.perf_counter() - t0
        t0 = time.perf_counter()
        train_independent(data, cfg, n, tmp_path / "indep")
        indep = time.perf_counter() - t0
        ratio = indep / snap
        c.check(0.8 * n <= ratio <= 1.2 * n, f"ratio {ratio:.2f} (target {n} +/- 20%; {indep:.1f}s vs {snap:.1f}s)")


def test_c10_determinism(criterion, tmp_path):
    with criterion(10, "determinism") as c:
        data = random_dataset(seed=10, classes=2, per_class=3, test_per_class=1)
        cfg = TrainConfig(k=1, batch_size=4, epochs=3, augment=False, deterministic=True, dtype="float64", seed=10)
        a, b = train(None, data, cfg), train(None, data, cfg)
        c.check(a.losses == b.losses and len(a.losses) == 6, f"{len(a.losses)}-step loss trajectories bitwise equal")
        root = write_tree(tmp_path / "tree", {"bench": (2, 1), "cup": (2, 1)})
        for d in ("v1", "v2"):
            assert cli.main(["voxelize", "--input-dir", str(root), "--output", str(tmp_path / d), "--seed", "1"]) == 0
        same = all(
            (tmp_path / "v1" / f).read_bytes() == (tmp_path / "v2" / f).read_bytes()
            for f in ("train.voxl", "test.voxl", "index.json")
        )
        c.check(same, "voxel caches byte-identical")


def test_c11_scheduler(criterion):
    with criterion(11, "plateau scheduler") as c:
        s = PlateauSchedule(patience=3)
        lr, lrs = 2e-4, []
        for epoch in range(1, 7):
            lr = s.update(1.0, lr, epoch=epoch)
            lrs.append(lr)
        c.check(len(s.drops) == 1, f"{len(s.drops)} drop over 6 constant epochs")
        ep, old, new = s.drops[0]
        c.check(ep == 4 and abs(new - old * 0.02) <= 1e-18, f"epoch {ep} (3 stalled epochs after the baseline): {old:g} -> {new:g}")
        s = PlateauSchedule(patience=3)
        lr = 2e-4
        for epoch, loss in enumerate(np.geomspace(3.0, 0.1, 50), start=1):
            lr = s.update(float(loss), lr, epoch=epoch)
        c.check(lr == 2e-4 and not s.drops, "improving stream never drops")


def test_c12_dataset_accounting(criterion, tmp_path):
    with criterion(12, "dataset accounting") as c:
        root = tmp_path / "mirror"
        for cls, (n_train, n_test) in MODELNET40_COUNTS.items():
            for split, n in (("train", n_train), ("test", n_test)):
                d = root / cls / split
                d.mkdir(parents=True)
                for i in range(n):
                    (d / f"{cls}_{i:04d}.off").write_bytes(b"OFF\n")
        idx = scan_modelnet(root)
        sizes = idx.split_sizes()
        c.check(
            (len(idx.classes), sizes["train"], sizes["test"]) == (40, 9843, 2468),
            f"published-count mirror: {len(idx.classes)} classes, {sizes['train']} train, {sizes['test']} test, "
            f"{sizes['train'] + sizes['test']} total",
        )
        tiny = write_tree(tmp_path / "tiny", {"a": (3, 2), "b": (1, 4), "c": (2, 2)})
        out = tmp_path / "tiny_cache"
        assert cli.main(["voxelize", "--input-dir", str(tiny), "--output", str(out)]) == 0
        import json

        meta = json.loads((out / "index.json").read_text())
        c.check(
            meta["counts"] == {"train": {"a": 3, "b": 1, "c": 2}, "test": {"a": 2, "b": 4, "c": 2}},
            "fixture tree counts exact",
        )
        real = os.environ.get("MODELNET40_ROOT")
        if real:
            ridx = scan_modelnet(real)
            rs = ridx.split_sizes()
            c.check((len(ridx.classes), rs["train"], rs["test"]) == (40, 9843, 2468), f"real corpus at {real}: {rs}")
        else:
            c.check(True, "real corpus not checked (set MODELNET40_ROOT)")


def test_c13_smoke_run_documented(criterion):
    with criterion(13, "overnight smoke run (non-gating)") as c:
        readme = Path(__file__).resolve().parents[1] / "README.md"
        text = readme.read_text() if readme.exists() else ""
        c.check("--k 2 --epochs 10" in text, "documented in README")
