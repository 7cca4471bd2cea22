"""Exit criteria. Run with ``pytest -m acceptance -s tests/test_acceptance.py``.

Each test is named ``test_criterion_NN`` and records a one-line detail; the
terminal summary prints PASS/FAIL per criterion. Criteria 8-11 train networks on
synthetic data and take minutes to about an hour and a half.
"""

import hashlib
import os
import time
import zlib

import numpy as np
import pytest

from gradcheck import check_op, max_rel_error
from neutrocaps.autodiff import Tensor, precision
from neutrocaps.autodiff import functional as F
from neutrocaps.capsnet import (
    CapsConfig,
    CapsTrainConfig,
    CapsuleNet,
    bce_loss,
    dynamic_routing,
    predict_patches,
    train_patch_classifier,
)
from neutrocaps.cli import main
from neutrocaps.config import RunConfig
from neutrocaps.metrics import precision_recall_f1_acc, roc_and_auc
from neutrocaps.morphology import fill_holes, postprocess, remove_small_components
from neutrocaps.pipeline import balance_patches, build_patch_set, crossval, k_sweep, stratified_split
from neutrocaps.superpixels import slic
from neutrocaps.synth import SynthConfig, generate_dataset
from neutrocaps.unet import (
    UNet,
    UNetConfig,
    dice_coefficient,
    seg_loss,
    segment,
    train_segmenter,
)

from test_capsnet import caps_param_formula, routing_oracle
from test_metrics import pairwise_auc
from test_morphology import area_oracle, flood_fill_holes
from test_superpixels import components_per_label

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------- 1
BCE_LABELS = np.array([1.0, 0.0, 0.0, 1.0, 1.0, 0.0])


def _op_cases():
    """(name, build, array shapes, input transform) for every differentiable op."""
    pos = lambda a: np.abs(a) + 0.5
    away = lambda a: np.where(np.abs(a) < 0.05, 0.3, a)  # keep relu/clip off their kinks
    return [
        ("add", F.add, [(3, 4), (3, 4)], None),
        ("sub", F.sub, [(3, 4), (3, 4)], None),
        ("neg", F.neg, [(5,)], None),
        ("mul", F.mul, [(3, 4), (3, 4)], None),
        ("div", F.div, [(3, 4), (3, 4)], pos),
        ("exp", F.exp, [(4,)], None),
        ("log", F.log, [(4,)], pos),
        ("clip", lambda a: F.clip(a, -0.5, 0.5), [(6,)], lambda a: np.where(np.abs(np.abs(a) - 0.5) < 0.05, 0.2, a)),
        ("relu", F.relu, [(3, 4)], away),
        ("sigmoid", F.sigmoid, [(3, 4)], None),
        ("softmax", lambda a: F.softmax(a, axis=1), [(3, 4)], None),
        ("sum", lambda a: F.sum(a, axis=1), [(3, 4)], None),
        ("mean", lambda a: F.mean(a, axis=0, keepdims=True), [(3, 4)], None),
        ("reshape", lambda a: F.reshape(a, (4, 3)), [(3, 4)], None),
        ("transpose", lambda a: F.transpose(a, (2, 0, 1)), [(2, 3, 4)], None),
        ("getitem", lambda a: F.getitem(a, (slice(1, None), slice(None, None, 2))), [(3, 4)], None),
        ("concat", F.concat_channels, [(1, 2, 3, 3), (1, 3, 3, 3)], None),
        ("einsum", lambda a, b: F.einsum("nij,jk->nik", a, b), [(2, 3, 4), (4, 5)], None),
        ("conv2d", lambda x, k, b: F.conv2d(x, k, b, stride=2, padding=1), [(2, 2, 6, 5), (3, 2, 3, 3), (3,)], None),
        ("maxpool2d", lambda x: F.maxpool2d(x, 2)[0], [(1, 2, 4, 6)], None),
        ("upsample", lambda x: F.upsample2d_nearest(x, 2), [(1, 2, 3, 2)], None),
        ("squash", lambda a: F.squash(a, axis=-1), [(4, 5)], None),
        ("norm", lambda a: F.vector_norm(a, axis=-1), [(4, 5)], None),
        ("topk", lambda a: F.topk_average(a, 3), [(2, 7)], None),
        ("bce", lambda p: F.binary_cross_entropy(p, BCE_LABELS), [(6,)], lambda a: 1 / (1 + np.exp(-a))),
    ]


def _tiny_unet_loss_error(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        model = UNet(UNetConfig(depth=1, base_filters=2, train_size=(8, 8)), seed=seed)
        x = rng.random((1, 3, 8, 8))
        y = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
        return _param_check(model, lambda: seg_loss(model(Tensor(x)), y), rng)


def _tiny_caps_loss_error(seed):
    rng = np.random.default_rng(seed)
    cfg = CapsConfig(stem=((3, 3, 2),), capsule_types=3, capsule_dim=2, secondary_dim=3, K=2,
                     patch_size=17)
    with precision(np.float64):
        model = CapsuleNet(cfg, seed=seed)
        x = rng.random((2, 3, 17, 17))
        y = np.array([1.0, 0.0])
        return _param_check(model, lambda: bce_loss(model(Tensor(x))[1], y), rng)


def _param_check(model, loss_fn, rng, per_tensor=6):
    """Finite differences on a random subset of entries of every parameter tensor.

    Zero-initialised biases put a conv over an all-zero window exactly on the relu
    kink, where finite differences average two one-sided slopes; jittering every
    parameter moves the check to a generic point.
    """
    for p in model.parameters():
        p.data = p.data.astype(np.float64) + rng.normal(scale=0.05, size=p.data.shape)
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in model.parameters():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, min(per_tensor, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + 1e-5
            up = loss_fn().item()
            flat[i] = orig - 1e-5
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / 2e-5
            worst = max(worst, max_rel_error(np.array([p.grad.reshape(-1)[i]]), np.array([num])))
    return worst


def test_criterion_01_gradients(record_property):
    start = time.perf_counter()
    worst, instances = 0.0, 0
    for name, build, shapes, transform in _op_cases():
        for rep in range(2):
            rng = np.random.default_rng(zlib.crc32(f"{name}{rep}".encode()))
            arrays = [rng.normal(size=s) for s in shapes]
            if transform is not None:
                arrays = [transform(a) for a in arrays]
            worst = max(worst, check_op(build, arrays))
            instances += 1
    for seed in range(3):
        worst = max(worst, _tiny_unet_loss_error(seed), _tiny_caps_loss_error(seed))
        instances += 2
    elapsed = time.perf_counter() - start
    record_property("detail", f"{instances} instances, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert instances >= 20 and worst < 1e-4 and elapsed < 120


# ---------------------------------------------------------------- 2
def test_criterion_02_routing(record_property):
    rng = np.random.default_rng(2)
    worst_sum, worst_len, worst_single = 0.0, 0.0, 0.0
    with precision(np.float64):
        for trial in range(20):
            j = 1 if trial % 2 else 3
            u_hat = rng.normal(scale=0.7, size=(4, 5, 16, j, 8))
            v, cs = dynamic_routing(Tensor(u_hat), 3)
            for c in cs:
                worst_sum = max(worst_sum, float(np.max(np.abs(c.sum(axis=-1) - 1.0))))
            worst_len = max(worst_len, float(np.linalg.norm(v.data, axis=-1).max()))
            if j == 1:
                v1, _ = dynamic_routing(Tensor(u_hat), 1)
                s = u_hat[..., 0, :].sum(axis=-2)  # every coupling is exactly 1
                n2 = (s * s).sum(-1, keepdims=True)
                ref = s * np.sqrt(n2) / (1 + n2)
                worst_single = max(worst_single, float(np.max(np.abs(v1.data[..., 0, :] - ref))))
        # squash lengths on the primary capsules of a real forward pass
        model = CapsuleNet(CapsConfig(), seed=0)
        caps = model.primary_capsules(Tensor(rng.random((1, 3, 224, 224))))
        worst_len = max(worst_len, float(np.linalg.norm(caps.data, axis=-1).max()))
        # loop oracle agreement on a 3-output rig
        u = rng.normal(size=(16, 3, 8))
        v, _ = dynamic_routing(Tensor(u), 3)
        oracle_err = float(np.max(np.abs(v.data - routing_oracle(u, 3)[0])))
    record_property("detail", f"max |sum c - 1| {worst_sum:.1e}, max len {worst_len:.4f}, "
                              f"single-capsule err {worst_single:.1e}, oracle err {oracle_err:.1e}")
    assert worst_sum <= 1e-12 and worst_len < 1.0 and worst_single <= 1e-12 and oracle_err < 1e-12


# ---------------------------------------------------------------- 3
def test_criterion_03_parameter_count(record_property):
    cfg = CapsConfig()
    count = CapsuleNet(cfg).count_parameters()
    formula = caps_param_formula(cfg)
    record_property("detail", f"count {count}, closed form {formula}")
    assert count == formula and 50_000 <= count <= 200_000


# ---------------------------------------------------------------- 4
def test_criterion_04_dice(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        m = (rng.random((20, 20)) > 0.5).astype(float)
        m[0, 0] = 1
        worst = max(worst, abs(dice_coefficient(m, m) - 1.0), dice_coefficient(m, 1 - m))
    gt = np.array([[1, 1], [0, 0]], float)
    pred = np.array([[1, 0], [1, 0]], float)
    worst = max(worst, abs(dice_coefficient(pred, gt) - 0.5))
    record_property("detail", f"max deviation {worst:.1e}")
    assert worst < 1e-3


# ---------------------------------------------------------------- 5
def test_criterion_05_slic(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    ok_partition = ok_connected = True
    for i in range(10):
        img = rng.integers(0, 256, (60, 80, 3), dtype=np.uint8)
        k = int(rng.integers(10, 60))
        lab = slic(img, k).labels
        ids = np.unique(lab)
        ok_partition &= lab.shape == (60, 80) and ids.tolist() == list(range(len(ids)))
        ok_partition &= len(ids) <= 1.5 * k
        ok_connected &= all(v == 1 for v in components_per_label(lab).values())
    ratios = []
    for k, shape in ((30, (60, 80)), (100, (120, 160)), (12, (50, 50))):
        lab = slic(np.full(shape + (3,), 150, np.uint8), k, compactness=10).labels
        areas = np.bincount(lab.ravel()) / (shape[0] * shape[1] / k)
        ratios += [areas.min(), areas.max()]
    elapsed = time.perf_counter() - start
    record_property("detail", f"partition {ok_partition}, connected {ok_connected}, "
                              f"uniform area ratios [{min(ratios):.2f}, {max(ratios):.2f}], {elapsed:.1f}s")
    assert ok_partition and ok_connected and 0.2 <= min(ratios) and max(ratios) <= 5 and elapsed < 60


# ---------------------------------------------------------------- 6
def test_criterion_06_morphology(record_property):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(500):
        m = (rng.random((32, 32)) < rng.uniform(0.3, 0.75)).astype(np.uint8)
        frac = float(rng.choice([0.0, 0.002, 0.01, 0.05]))
        mismatches += not np.array_equal(fill_holes(m), flood_fill_holes(m))
        mismatches += not np.array_equal(remove_small_components(m, frac), area_oracle(m, frac))
        once = postprocess(m, frac)
        mismatches += not np.array_equal(postprocess(once, frac), once)
    record_property("detail", f"500 masks, {mismatches} mismatches")
    assert mismatches == 0


# ---------------------------------------------------------------- 7
def test_criterion_07_auc(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding makes ties
        labels = rng.random(n) < 0.5
        labels[0], labels[-1] = True, False
        worst = max(worst, abs(roc_and_auc(scores, labels).auc - pairwise_auc(scores.tolist(), labels.tolist())))
    record_property("detail", f"100 vectors, max |trapezoid - pairwise| {worst:.1e}")
    assert worst < 1e-9


# ---------------------------------------------------------------- 8
def test_criterion_08_segmentation(record_property):
    records = generate_dataset(SynthConfig(seed=808), 80, 1 / 3)
    train, test = records[:60], records[60:]
    cfg = RunConfig()
    tr, va = stratified_split([r.positive for r in train], cfg.pipeline.seg_val_fraction,
                              np.random.default_rng(8))
    start = time.perf_counter()
    model, _ = train_segmenter([(train[i].image, train[i].sc_mask) for i in tr],
                               [(train[i].image, train[i].sc_mask) for i in va],
                               cfg.unet, cfg.seg, seed=8)
    dices = [dice_coefficient(postprocess(segment(model, r.image), cfg.pipeline.min_area_fraction), r.sc_mask)
             for r in test]
    elapsed = time.perf_counter() - start
    record_property("detail", f"held-out dice {np.mean(dices):.4f} (min {np.min(dices):.4f}), "
                              f"{elapsed / 60:.1f} min")
    assert np.mean(dices) >= 0.80 and elapsed <= 20 * 60


# ---------------------------------------------------------------- 9 and 10
@pytest.fixture(scope="module")
def patch_data():
    cfg = RunConfig()
    p = cfg.pipeline
    rng = np.random.default_rng(9)
    train_recs = generate_dataset(SynthConfig(seed=909), 40, 1 / 3)
    test_recs = generate_dataset(SynthConfig(seed=910), 15, 1 / 3)
    pool = balance_patches(build_patch_set(train_recs, p.patch_superpixels, cfg),
                           p.max_train_patches, p.neg_ratio, rng)
    tr, va = stratified_split(pool.labels > 0.5, p.caps_val_fraction, rng)
    test = balance_patches(build_patch_set(test_recs, p.patch_superpixels, cfg),
                           p.max_train_patches, p.neg_ratio, rng)
    return pool.subset(tr), pool.subset(va), test


CAPS_TRAIN = CapsTrainConfig(epochs=10, batch_size=16, lr=1e-3)


def test_criterion_09_patch_classifier(patch_data, record_property):
    train, val, test = patch_data
    start = time.perf_counter()
    model, _ = train_patch_classifier((train.patches, train.labels), (val.patches, val.labels),
                                      CapsConfig(K=5), CAPS_TRAIN, seed=9)
    probs = predict_patches(model, test.patches).astype(np.float64)
    elapsed = time.perf_counter() - start
    truth = test.labels > 0.5
    acc = precision_recall_f1_acc(probs >= 0.5, truth)["accuracy"]
    auc = roc_and_auc(probs, truth).auc
    record_property("detail", f"{len(train)} train / {len(test)} test patches, accuracy {acc:.4f}, "
                              f"AUC {auc:.4f}, {elapsed / 60:.1f} min")
    assert len(train) >= 600 and len(test) >= 200
    assert acc >= 0.90 and auc >= 0.95 and elapsed <= 30 * 60


def test_criterion_10_k_sweep(patch_data, record_property, tmp_path):
    train, val, _ = patch_data
    sweep = k_sweep(train, val, (1, 3, 5, 7, 9), CapsConfig(), CAPS_TRAIN, seed=10)
    aucs = sweep.aucs
    from neutrocaps.report import plot_roc

    png = tmp_path / "roc.png"
    plot_roc(png, sweep.rocs, "K sweep")
    best = max(sorted(aucs), key=lambda k: (aucs[k], -k))
    record_property("detail", " ".join(f"K={k}:{a:.4f}" for k, a in sorted(aucs.items()))
                    + f", selected K={sweep.best_k}")
    assert sorted(sweep.rocs) == [1, 3, 5, 7, 9]
    assert all(a > 0.5 for a in aucs.values())
    assert sweep.best_k == best and png.stat().st_size > 0


# ---------------------------------------------------------------- 11
def test_criterion_11_wsi_strategies(record_property):
    records = generate_dataset(SynthConfig(seed=11), 90, 1 / 3)
    assert sum(r.positive for r in records) == 30
    cfg = RunConfig()
    start = time.perf_counter()
    results = crossval(records, cfg)
    elapsed = time.perf_counter() - start
    parts, ok = [], True
    for n_sp in (300, 500, 700):
        acc = float(np.mean([r.wsi_metrics[n_sp]["acc_I"] for r in results]))
        tnr = float(np.mean([r.wsi_metrics[n_sp]["tnr_II"] for r in results]))
        rec = float(np.mean([r.wsi_metrics[n_sp]["recall_II"] for r in results]))
        parts.append(f"sp{n_sp}: acc_I {acc:.4f} tnr_II {tnr:.4f} recall_II {rec:.4f}")
        ok &= acc >= 0.85 and tnr >= 0.95 and rec > 0
    record_property("detail", "; ".join(parts) + f"; {elapsed / 60:.1f} min")
    assert ok and elapsed <= 3 * 3600


# ---------------------------------------------------------------- 12
TINY = """
seed = 2
superpixels = 20, 30
patch_superpixels = 30
patch_size = 32
caps.stem = 4:3:2
caps.K = 2
caps.k_values = 1, 3
caps.epochs = 2
caps.batch_size = 8
caps.max_train_patches = 60
unet.depth = 1
unet.base_filters = 2
unet.train_size = 32x48
seg.epochs = 2
synth.height = 96
synth.width = 128
synth.band_thickness = 0.15, 0.2
synth.tissue_top = 0.1, 0.2
synth.neutrophil_radius = 2, 3
"""


def _run_all(root, cfg):
    data, out = root / "data", root / "out"
    out.mkdir()
    assert main(["synth", "--out", str(data), "--num", "12", "--positive-frac", "0.5", "--seed", "5",
                 "--config", str(cfg)]) == 0
    assert main(["train-seg", "--data", str(data), "--config", str(cfg), "--out", str(out / "seg.cdmm")]) == 0
    assert main(["train-caps", "--data", str(data), "--config", str(cfg), "--out", str(out / "caps.cdmm")]) == 0
    assert main(["crossval", "--data", str(data), "--config", str(cfg), "--out", str(out / "cv"),
                 "--no-plots"]) == 0
    digests = {}
    for base in (data, out):
        for dirpath, _, files in os.walk(base):
            for name in files:
                if name.endswith((".csv", ".cdmm", ".json")) or dirpath.endswith(("images", "masks")):
                    path = os.path.join(dirpath, name)
                    with open(path, "rb") as fh:
                        digests[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return digests


def test_criterion_12_determinism(tmp_path, record_property):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _run_all(tmp_path / "a", cfg)
    second = _run_all(tmp_path / "b", cfg)
    differing = sorted(k for k in first if first[k] != second.get(k))
    record_property("detail", f"{len(first)} files compared, {len(differing)} differ")
    assert first.keys() == second.keys() and not differing
