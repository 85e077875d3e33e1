"""Acceptance criteria, one test each.

Every test prints a ``PASS``/``FAIL`` line with the measured quantity; the
lines are repeated in a summary section at the end of the pytest run.
Run alone with ``pytest tests/test_acceptance.py -s``.
"""
import re
import time

import numpy as np
import pytest

from mffunet import blocks, cli, ops
from mffunet.checkpoint import load_checkpoint, save_checkpoint
from mffunet.data import Sample, resize_nearest, synth_dataset, to_sample
from mffunet.gradcheck import DEFAULT_TOL
from mffunet.metrics import evaluate_dataset, hard_dsc, jaccard, soft_dice_loss
from mffunet.model import ModelConfig, build_model, model_forward
from mffunet.tensor import Tensor
from mffunet.trainer import TrainConfig, split_dataset, train

import oracles
from conftest import make_block

RESULTS = []
N_ORACLE = 100


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_gradient_suite(capsys):
    start = time.perf_counter()
    code = cli.main(["gradcheck", "--ops", "all"])
    out = capsys.readouterr().out
    rows = re.findall(r"^(\S+)\s+([0-9.e+-]+)\s+(PASS|FAIL)$", out, flags=re.M)
    worst = max(float(e) for _, e, _ in rows)
    secs = time.perf_counter() - start
    report("gradient suite", code == 0 and len(rows) >= 22 and worst < DEFAULT_TOL,
           f"{len(rows)} checks, max rel error {worst:.2e} (< {DEFAULT_TOL:g}), {secs:.0f}s")


def _cca_case(r):
    c = int(r.integers(1, 7))
    p, raw = make_block(blocks.init_cca, c, seed=int(r.integers(2 ** 31)))
    x = r.standard_normal((int(r.integers(1, 3)), c, int(r.integers(1, 5)), int(r.integers(1, 5))))
    return np.abs(blocks.cca_forward(t64(x), p).data - oracles.cca(x, raw)[0]).max()


def _mff_case(r):
    c_in, c_out = int(r.integers(1, 4)), int(r.choice([4, 8]))
    p, raw = make_block(blocks.init_mff, c_in, c_out, seed=int(r.integers(2 ** 31)))
    x = r.standard_normal((int(r.integers(1, 3)), c_in, int(r.integers(2, 6)), int(r.integers(2, 6))))
    return np.abs(blocks.mff_forward(t64(x), p, "train").data - oracles.mff(x, raw)).max()


def _skip_case(r):
    c = int(r.integers(1, 4))
    p, raw = make_block(blocks.init_skip, c, seed=int(r.integers(2 ** 31)))
    x = r.standard_normal((int(r.integers(1, 3)), c, int(r.integers(1, 6)), int(r.integers(1, 6))))
    return np.abs(blocks.augmented_skip_forward(t64(x), p).data - oracles.augmented_skip(x, raw)).max()


def _dice_case(r):
    n, k, h, w = int(r.integers(1, 3)), int(r.integers(2, 4)), int(r.integers(1, 5)), int(r.integers(1, 5))
    z = 2.0 * r.standard_normal((n, k, h, w))
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    target = r.integers(0, k, (n, h, w))
    return abs(soft_dice_loss(t64(probs), target).item() - oracles.soft_dice_loss(probs, target))


class _PresetModel:
    def __init__(self, probs, k):
        self.queue = list(probs)
        self.config = ModelConfig(base_width=4, num_classes=k, input_size=16)
        self.params = {"w": Tensor(np.zeros(1))}

    def forward(self, x, mode="eval"):
        return Tensor(self.queue.pop(0))


def _evaluate_case(r):
    k, n, h, bs = int(r.integers(2, 4)), int(r.integers(1, 5)), int(r.integers(1, 6)), int(r.integers(1, 3))
    masks = [r.integers(0, k, (h, h)) for _ in range(n)]
    probs = r.random((n, k, h, h))
    samples = [Sample(np.zeros((1, h, h), dtype=np.float32), m, f"c{i}_000") for i, m in enumerate(masks)]
    batches = [probs[i:i + bs] for i in range(0, n, bs)]
    rep = evaluate_dataset(_PresetModel(batches, k), samples, batch_size=bs)
    inter, pred, true = oracles.overlap_counts(list(probs.argmax(axis=1)), masks, k)
    err = 0.0
    for c in range(k):
        assert (rep.intersection[c], rep.pred_size[c], rep.true_size[c]) == (inter[c], pred[c], true[c])
        d, j = oracles.dice_and_jaccard(inter[c], pred[c], true[c])
        err = max(err, abs(rep.dsc[c] - d), abs(rep.ji[c] - j))
    return err


def _resize_case(r):
    h, w, oh, ow = (int(v) for v in r.integers(1, 65, 4))
    img = r.integers(0, 256, (h, w))
    return float(np.abs(resize_nearest(img, oh, ow) - oracles.resize_nearest(img, oh, ow)).max())


@pytest.mark.parametrize("name,case,tol", [
    ("cca_forward", _cca_case, 1e-5),
    ("mff_forward", _mff_case, 1e-5),
    ("augmented_skip_forward", _skip_case, 1e-5),
    ("soft_dice_loss", _dice_case, 1e-5),
    ("evaluate_dataset", _evaluate_case, 1e-12),
    ("resize_nearest", _resize_case, 0.0),
])
def test_oracle_suite(name, case, tol):
    r = np.random.default_rng(2024)
    worst = max(case(r) for _ in range(N_ORACLE))
    report(f"oracle suite / {name}", worst <= tol, f"{N_ORACLE} instances, max abs error {worst:.2e} (<= {tol:g})")


def test_adjointness():
    r = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, ci, co, h = (int(v) for v in r.integers(1, 5, 4))
        w = r.standard_normal((co, ci, 2, 2))
        x = r.standard_normal((n, ci, 2 * h, 2 * h))
        y = r.standard_normal((n, co, h, h))
        lhs = np.vdot(ops.conv2d(t64(x), t64(w), stride=2, padding=0).data, y)
        rhs = np.vdot(x, ops.conv_transpose2d(t64(y), t64(w)).data)
        worst = max(worst, abs(lhs - rhs))
    report("adjointness", worst < 1e-5, f"100 trials, max |<Ax,y> - <x,A'y>| = {worst:.2e} (< 1e-5)")


def test_metric_identities():
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(int(v) for v in r.integers(1, 16, 2))
        a = r.random(shape) < r.random()
        b = r.random(shape) < r.random()
        d = hard_dsc(a, b)
        worst = max(worst, abs(jaccard(a, b) - d / (2 - d)))
        if a.any():
            worst = max(worst, abs(hard_dsc(a, a) - 1.0))
            disjoint = ~a & (r.random(shape) < 0.5)
            if disjoint.any():
                worst = max(worst, abs(hard_dsc(a, disjoint)))
    report("metric identities", worst <= 1e-12, f"1000 pairs, max deviation {worst:.1e} (<= 1e-12)")


def test_shape_contract():
    m = build_model(ModelConfig())
    trace = {}
    out = model_forward(m, np.random.default_rng(0).random((1, 1, 256, 256), dtype=np.float32), "eval", trace)
    enc = tuple(trace[f"enc{i}.skip"][1] for i in range(4))
    dec = tuple(trace[f"dec{i}"][1] for i in range(4))
    ok = (out.shape == (1, 3, 256, 256) and enc == (32, 64, 128, 256) and trace["bridge"][1] == 512
          and dec == (256, 128, 64, 32) and np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6))
    report("shape contract", ok, f"output {out.shape}, encoders {enc}, bridge {trace['bridge'][1]}, decoders {dec}")


@pytest.mark.slow
def test_overfit_training_curve():
    samples = [to_sample(r) for r in synth_dataset(8, 64, 1)]
    model = build_model(ModelConfig(base_width=8, input_size=64))
    cfg = TrainConfig(epochs=300, batch_size=2, lr=1e-4, patience=300, target_train_dsc=0.99)
    start = time.perf_counter()
    hist, _ = train(model, samples, samples, cfg)
    best = max(hist.train_dsc)
    report("overfit training curve", best >= 0.99,
           f"train soft-DSC {best:.4f} after {hist.epochs_run} epochs (target 0.99 within 300), "
           f"{time.perf_counter() - start:.0f}s")


def test_split_arithmetic():
    sizes = tuple(map(len, split_dataset(list(range(16336)), (0.6, 0.2, 0.2), seed=0)))
    report("split arithmetic", sizes == (9801, 3267, 3268), f"16336 -> {sizes}")


def _pipeline(root):
    steps = [
        ["synth", "--out", root / "raw", "--n", 8, "--size", 64, "--seed", 1],
        ["preprocess", "--input", root / "raw", "--output", root / "pre", "--size", 64],
        ["train", "--data", root / "pre", "--epochs", 5, "--base-width", 8, "--seed", 3,
         "--checkpoint", root / "model.ckpt", "--history", root / "history.csv"],
        ["evaluate", "--data", root / "pre", "--checkpoint", root / "model.ckpt", "--report", root / "report.txt"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return {f: (root / f).read_bytes() for f in ("model.ckpt", "history.csv", "report.txt")}


def test_end_to_end_determinism(tmp_path):
    a = _pipeline(tmp_path / "run1")
    b = _pipeline(tmp_path / "run2")
    same = [f for f in a if a[f] == b[f]]
    report("determinism", len(same) == 3, f"byte-identical: {', '.join(same) or 'none'}")


def test_checkpoint_round_trip(tmp_path):
    m = build_model(ModelConfig(seed=5))
    x = np.random.default_rng(1).random((1, 1, 256, 256), dtype=np.float32)
    before = m.forward(x, mode="eval").data
    save_checkpoint(m, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    same_bytes = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    same_out = np.array_equal(loaded.forward(x, mode="eval").data, before)
    report("checkpoint round-trip", same_bytes and same_out,
           f"save-load-save identical: {same_bytes}; forward bitwise equal: {same_out}")
