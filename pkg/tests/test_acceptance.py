"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary section lists the
outcome of every criterion. Criterion 5 trains the full-size network on 700
images across ten folds and takes about an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from dexpression import cli
from dexpression import frameselect as F
from dexpression import layers as L
from dexpression import network as N
from dexpression import training as T
from dexpression.data import LabeledDataset, write_class_directory_dataset
from dexpression.synthetic import make_expression_dataset, make_toy_dataset
from oracles import replay_oracle

from PIL import Image

TABLE = {
    "Convolution 1": (64, 112, 112),
    "Pooling 1": (64, 56, 56),
    "LRN 1": (64, 56, 56),
    "Convolution 2a": (96, 56, 56),
    "Convolution 2b": (208, 56, 56),
    "Pooling 2a": (64, 56, 56),
    "Convolution 2c": (64, 56, 56),
    "Concat 2": (272, 56, 56),
    "Pooling 2b": (272, 28, 28),
    "Convolution 3a": (96, 28, 28),
    "Convolution 3b": (208, 28, 28),
    "Pooling 3a": (272, 28, 28),
    "Convolution 3c": (64, 28, 28),
    "Concat 3": (272, 28, 28),
    "Pooling 3b": (272, 14, 14),
}


def test_criterion_1_shape_conformance(acceptance):
    t0 = time.perf_counter()
    shapes = N.infer_shapes(N.build_dexpression(7))
    elapsed = time.perf_counter() - t0
    wrong = [n for n, s in TABLE.items() if shapes[n] != s]
    ok = (not wrong and shapes["Data"][1:] == (224, 224) and shapes["Classifier"] == (7,)
          and elapsed < 1.0)
    acceptance(1, "shape conformance", ok, f"{len(TABLE) + 2} rows, mismatches {wrong}, {elapsed:.3f}s")
    assert ok


def test_criterion_2_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for kind in L.LAYER_KINDS:
        reports = [L.check_layer(kind, seed=s, tolerance=1e-4, eps=1e-3) for s in range(5)]
        worst[kind] = max(r.max_rel_error for r in reports)
        failed = [str(r) for r in reports if not r.passed]
        assert not failed, failed
    net = N.check_network_gradients(input_size=16, tolerance=1e-3, eps=1e-3)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and net.passed and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance(2, "gradient correctness", ok,
               f"{detail}; network {net.max_rel_error:.1e} over {net.checked} coords; {elapsed:.0f}s")
    assert ok


def test_criterion_3_softmax_identities(acceptance):
    rng = np.random.default_rng(3)
    max_sum_err = 0.0
    shift_ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        # logits on a 2^-20 grid and integer shifts keep x + c exact
        x = np.round(rng.uniform(-50, 50, n) * 2**20) / 2**20
        p = L.softmax(x)
        max_sum_err = max(max_sum_err, abs(float(p.sum()) - 1))
        c = float(rng.integers(-1000, 1000))
        shift_ok &= L.softmax(x + c).tobytes() == p.tobytes()
    loss_err = abs(T.cross_entropy(np.zeros(7), 0) - math.log(7))
    ok = max_sum_err <= 1e-6 and shift_ok and loss_err <= 1e-9
    acceptance(3, "softmax/loss identities", ok,
               f"sum err {max_sum_err:.1e}, shift bitwise {shift_ok}, ln7 err {loss_err:.1e}")
    assert ok


def _first_perfect_epoch(history):
    return next((s.epoch for s in history if s.accuracy == 1.0), None)


def test_criterion_4_overfit_capacity(acceptance):
    t0 = time.perf_counter()
    small = N.build_dexpression(2, input_size=16)
    toy = make_toy_dataset(8, size=16, seed=0)
    cfg = T.TrainConfig(learning_rate=0.01, epochs=200, batch_size=8, lr_step_epochs=1000, seed=0)
    params, hist = T.train(small, toy, cfg)
    toy_epoch = _first_perfect_epoch(hist)
    toy_final = T.evaluate(small, params, toy).accuracy

    full = N.build_dexpression(7)
    faces = make_expression_dataset(2, size=224, seed=11)
    eight = faces.subset([0, 1, 3, 5, 7, 8, 10, 12])
    cfg = T.TrainConfig(learning_rate=0.01, epochs=50, batch_size=8, lr_step_epochs=1000, seed=0)
    params, hist = T.train(full, eight, cfg)
    full_epoch = _first_perfect_epoch(hist)
    full_final = T.evaluate(full, params, eight).accuracy
    elapsed = time.perf_counter() - t0

    ok = toy_epoch is not None and full_epoch is not None and elapsed < 600
    acceptance(4, "overfit capacity", ok,
               f"shrunken graph 100% at epoch {toy_epoch}/200 (final {toy_final:.2f}), "
               f"full graph 100% at epoch {full_epoch}/50 (final {full_final:.2f}), {elapsed:.0f}s")
    assert ok


# Picked from a short sweep on a 140/70 split, then sanity-checked on one fold.
CROSSVAL_CONFIG = T.TrainConfig(learning_rate=0.02, momentum=0.9, weight_decay=5e-4, epochs=3,
                                batch_size=8, lr_step_factor=0.1, lr_step_epochs=2, seed=0)


@pytest.mark.slow
def test_criterion_5_synthetic_crossval(acceptance):
    t0 = time.perf_counter()
    ds = make_expression_dataset(100, size=224, seed=0)
    assert len(ds) == 700 and ds.num_classes == 7 and ds.images.shape[2:] == (224, 224)
    g = N.build_dexpression(7)
    result = T.cross_validate(g, ds, CROSSVAL_CONFIG, k=10)
    elapsed = time.perf_counter() - t0
    mean = result.mean_accuracy
    ok = mean >= 0.95 and elapsed < 2 * 3600
    folds = " ".join(f"{a:.3f}" for a in result.fold_accuracies)
    acceptance(5, "synthetic 7-class 10-fold", ok, f"mean {mean:.4f} [{folds}], {elapsed / 60:.1f} min")
    print(result.confusion.format())
    assert ok


def test_criterion_6_crossval_hygiene(acceptance):
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(10, 3000))
        k = int(rng.integers(2, 11))
        plan = T.make_folds(n, k, seed=int(rng.integers(2**32)))
        sizes = plan.sizes()
        bad += int(sizes.max() - sizes.min() > 1)
        for f in range(k):
            bad += int(np.intersect1d(plan.train_indices(f), plan.test_indices(f)).size > 0)
            bad += int(len(plan.train_indices(f)) + len(plan.test_indices(f)) != n)
    published = T.make_folds(5870, 10, seed=0).sizes().tolist()
    ok = bad == 0 and published == [587] * 10
    acceptance(6, "cross-validation hygiene", ok, f"{bad} violations in 100 plans, 5870/10 -> {set(published)}")
    assert ok


def _session(n, seed):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, (1, 48, 40))
    frames = [np.clip(base + 0.02 * i * rng.uniform(-1, 1, base.shape), 0, 1).astype(np.float32)
              for i in range(n)]
    return F.FrameSequence(frames, f"s{seed}")


def test_criterion_7_frame_selection(acceptance):
    counts = [len(F.extract_mmi_style(_session(n, seed)).images)
              for seed, n in enumerate([21, 30, 45, 80, 150])]
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(20, 201))
        d = rng.integers(0, 5, n).astype(float) if trial % 4 == 0 else rng.uniform(0, 1, n)
        mismatches += int(F.select_from_scores(d, 20) != replay_oracle(d, 20))
    ok = all(c == 18 for c in counts) and mismatches == 0
    acceptance(7, "frame selection", ok, f"images per session {counts}, {mismatches}/1000 oracle mismatches")
    assert ok


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".dxpr", ".csv", ".png")}


def test_criterion_8_determinism(acceptance, tmp_path):
    data = tmp_path / "data"
    write_class_directory_dataset(make_toy_dataset(8, size=16, seed=0), data)
    frames = tmp_path / "frames" / "S1"
    frames.mkdir(parents=True)
    for i, f in enumerate(_session(30, 1).frames):
        Image.fromarray((f[0] * 255).astype(np.uint8)).save(frames / f"{i}.png")

    def run_all(out):
        common = ["--data", str(data), "--input-size", "16", "--epochs", "2", "--batch-size", "4",
                  "--lr", "0.05", "--seed", "5"]
        codes = [
            cli.main(["--threads", "1", "train", "--out", str(out / "train"), *common]),
            cli.main(["--threads", "1", "crossval", "--out", str(out / "cv"), "--k", "2", *common]),
            cli.main(["--threads", "1", "evaluate", "--checkpoint", str(out / "train" / "checkpoint.dxpr"),
                      "--data", str(data), "--out", str(out / "eval")]),
            cli.main(["--threads", "1", "extract", "--frames", str(tmp_path / "frames"),
                      "--out", str(out / "extract"), "--input-size", "32"]),
        ]
        return codes, _tree_bytes(out)

    codes_a, a = run_all(tmp_path / "a")
    codes_b, b = run_all(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = codes_a == codes_b == [0, 0, 0, 0] and a.keys() == b.keys() and not differing
    acceptance(8, "determinism", ok, f"{len(a)} checkpoint/CSV/image files compared, differing {differing}")
    assert ok


def test_criterion_9_confusion_semantics(acceptance):
    rng = np.random.default_rng(9)
    ok = True
    for _ in range(200):
        c = int(rng.integers(2, 8))
        true = rng.integers(0, c, int(rng.integers(1, 300)))
        pred = np.where(rng.uniform(size=len(true)) < 0.7, true, rng.integers(0, c, len(true)))
        cm = T.ConfusionMatrix.from_predictions(true, pred, [f"c{i}" for i in range(c)])
        ok &= np.trace(cm.counts) / cm.total == pytest.approx(np.mean(true == pred), abs=1e-12)
        ok &= cm.counts.sum(axis=1).tolist() == np.bincount(true, minlength=c).tolist()
        pct = cm.row_normalized() * 100
        present = np.bincount(true, minlength=c) > 0
        ok &= bool(np.allclose(pct.sum(axis=1)[present], 100))
    small = N.build_dexpression(2, input_size=16)
    ds = LabeledDataset(np.random.default_rng(0).uniform(0, 1, (6, 1, 16, 16)), [0, 0, 0, 1, 1, 1], ["a", "b"])
    res = T.evaluate(small, N.init_params(small), ds)
    ok &= res.confusion.accuracy == res.accuracy
    cm = T.ConfusionMatrix.from_predictions([0, 0, 0, 0, 1], [0, 0, 0, 1, 1], ["anger", "fear"])
    lines = cm.format().splitlines()
    ok &= lines[1].split()[1:] == ["75.00", "25.00"] and lines[2].split()[1:] == ["0.00", "100.00"]
    acceptance(9, "confusion-matrix semantics", bool(ok), "trace/total, row sums, per-true-class percentages")
    assert ok
