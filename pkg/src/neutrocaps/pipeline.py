"""Slide-level diagnosis and the k-fold evaluation harness."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .capsnet import CapsConfig, CapsTrainConfig, CapsuleNet, predict_patches, train_patch_classifier
from .config import RunConfig
from .errors import DataError
from .metrics import (
    RocCurve,
    choose_cutoff,
    precision_recall_f1_acc,
    roc_and_auc,
    select_threshold_T,
    tnr,
    wsi_decisions,
)
from .morphology import postprocess
from .superpixels import PatchSpec, centroid_windows, crop, select_patches, slic
from .synth import SynthRecord, derive_patch_labels
from .unet import UNet, dice_coefficient, segment, train_segmenter

logger = logging.getLogger(__name__)


@dataclass
class WsiDiagnosis:
    image_id: str
    positive_patch_count: int
    threshold: int
    decision: str  # "positive" or "negative"
    probabilities: list[float] = field(default_factory=list)
    patches: list[PatchSpec] = field(default_factory=list)
    cutoff: float = 0.5
    empty_sc: bool = False

    @property
    def positive(self) -> bool:
        return self.decision == "positive"

    def summary_line(self) -> str:
        flag = "empty_sc" if self.empty_sc else "ok"
        return (f"id={self.image_id} count={self.positive_patch_count} "
                f"patches={len(self.patches)} T={self.threshold} decision={self.decision} "
                f"flag={flag}")


# ----------------------------------------------------------------------------
# single-slide stages
# ----------------------------------------------------------------------------
def segment_wsi(seg_model: UNet, image: np.ndarray, min_area_fraction: float = 0.001) -> np.ndarray:
    return postprocess(segment(seg_model, image), min_area_fraction)


def patch_windows(image: np.ndarray, sc_mask: np.ndarray, n_superpixels: int,
                  patch_size: int = 224, compactness: float = 10.0,
                  iterations: int = 10) -> list[PatchSpec]:
    if not np.any(sc_mask):
        return []
    labeling = slic(image, n_superpixels, compactness, iterations)
    return select_patches(labeling, sc_mask, patch_size)


def classify_windows(caps_model: CapsuleNet, image: np.ndarray,
                     specs: Sequence[PatchSpec], batch_size: int = 32) -> np.ndarray:
    if not specs:
        return np.zeros(0, dtype=np.float64)
    patches = np.stack([crop(image, s) for s in specs])
    return predict_patches(caps_model, patches, batch_size).astype(np.float64)


def decide(probabilities: np.ndarray, cutoff: float, threshold: int) -> tuple[int, str]:
    count = int(np.sum(np.asarray(probabilities) >= cutoff))
    return count, "positive" if count > threshold else "negative"


def diagnose_wsi(
    image: np.ndarray,
    seg_model: UNet,
    caps_model: CapsuleNet,
    n_superpixels: int,
    cutoff: float,
    threshold: int,
    image_id: str = "",
    config: RunConfig | None = None,
    sc_mask: np.ndarray | None = None,
) -> WsiDiagnosis:
    """segment -> clean up -> SLIC -> centroid patches -> classify -> count vs T.

    ``sc_mask`` skips segmentation when given. An empty SC mask yields a negative
    call with zero patches and ``empty_sc`` set.
    """
    cfg = config or RunConfig()
    p = cfg.pipeline
    mask = segment_wsi(seg_model, image, p.min_area_fraction) if sc_mask is None else sc_mask
    specs = patch_windows(image, mask, n_superpixels, caps_model.config.patch_size,
                          p.compactness, p.slic_iterations)
    probs = classify_windows(caps_model, image, specs)
    count, decision = decide(probs, cutoff, threshold)
    return WsiDiagnosis(image_id, count, int(threshold), decision, probs.tolist(), specs,
                        float(cutoff), empty_sc=not np.any(mask))


# ----------------------------------------------------------------------------
# patch datasets
# ----------------------------------------------------------------------------
@dataclass
class PatchSet:
    patches: np.ndarray  # [N, S, S, 3] uint8
    labels: np.ndarray  # [N] float {0, 1}
    source: list[tuple[int, int]]  # (record index, superpixel id)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.patches[idx], self.labels[idx], [self.source[i] for i in idx])


class CentroidCache:
    """SLIC centroids per (record index, superpixel count).

    Centroids depend only on the image, so one SLIC run serves every mask and fold.
    """

    def __init__(self, compactness: float = 10.0, iterations: int = 10):
        self.compactness = compactness
        self.iterations = iterations
        self._store: dict[tuple[int, int], np.ndarray] = {}

    def centroids(self, rec: SynthRecord, n_superpixels: int) -> np.ndarray:
        key = (int(rec.index), int(n_superpixels))
        if key not in self._store:
            lab = slic(rec.image, n_superpixels, self.compactness, self.iterations)
            self._store[key] = lab.centroids
        return self._store[key]

    def windows(self, rec: SynthRecord, mask: np.ndarray, n_superpixels: int,
                patch_size: int) -> list[PatchSpec]:
        if not np.any(mask):
            return []
        return centroid_windows(self.centroids(rec, n_superpixels), rec.image.shape[:2], mask,
                                patch_size)


def build_patch_set(records: Sequence[SynthRecord], n_superpixels: int, config: RunConfig,
                    masks: Sequence[np.ndarray] | None = None,
                    cache: CentroidCache | None = None) -> PatchSet:
    """Centroid patches from every record, labelled by neutrophil-centre containment."""
    p = config.pipeline
    cache = cache or CentroidCache(p.compactness, p.slic_iterations)
    patches, labels, source = [], [], []
    for pos, rec in enumerate(records):
        mask = rec.sc_mask if masks is None else masks[pos]
        specs = cache.windows(rec, mask, n_superpixels, p.patch_size)
        flags = derive_patch_labels(rec.neutrophils, [s.window for s in specs])
        for spec, flag in zip(specs, flags):
            patches.append(crop(rec.image, spec))
            labels.append(float(flag))
            source.append((rec.index, spec.superpixel))
    size = p.patch_size
    arr = np.stack(patches) if patches else np.zeros((0, size, size, 3), np.uint8)
    return PatchSet(arr, np.asarray(labels, dtype=np.float32), source)


def balance_patches(ps: PatchSet, max_patches: int, neg_ratio: float,
                    rng: np.random.Generator) -> PatchSet:
    """Keep at most ``neg_ratio`` negatives per positive and ``max_patches`` overall."""
    pos = np.flatnonzero(ps.labels > 0.5)
    neg = np.flatnonzero(ps.labels <= 0.5)
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]
    n_pos = min(len(pos), int(max_patches / (1.0 + neg_ratio)) if len(neg) else max_patches)
    n_neg = min(len(neg), int(round(n_pos * neg_ratio)) if n_pos else max_patches, max_patches - n_pos)
    keep = np.sort(np.concatenate([pos[:n_pos], neg[:n_neg]]))
    return ps.subset(keep)


def stratified_split(labels, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, holdout_idx) with ``fraction`` of each class held out."""
    labels = np.asarray(labels).astype(bool)
    hold = []
    for cls in (True, False):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        hold.extend(idx[: int(round(fraction * len(idx)))].tolist())
    hold = np.sort(np.asarray(hold, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), hold)
    return train, hold


# ----------------------------------------------------------------------------
# folds
# ----------------------------------------------------------------------------
@dataclass
class FoldPlan:
    folds: list[np.ndarray]  # record positions per fold

    def train_indices(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != k]))

    def test_indices(self, k: int) -> np.ndarray:
        return np.sort(self.folds[k])


def make_folds(labels, n_folds: int = 3, seed: int = 0) -> FoldPlan:
    """Stratified assignment: shuffle each class, deal positives then negatives round-robin.

    Negatives continue dealing where positives stopped so fold sizes differ by at most one.
    """
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos < n_folds or n_neg < n_folds:
        raise DataError(f"need at least {n_folds} slides of each class for {n_folds} folds")
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(y)[rng.permutation(n_pos)]
    neg = np.flatnonzero(~y)[rng.permutation(n_neg)]
    members: list[list[int]] = [[] for _ in range(n_folds)]
    for i, idx in enumerate(np.concatenate([pos, neg])):
        members[i % n_folds].append(int(idx))
    return FoldPlan([np.sort(np.asarray(m, dtype=np.int64)) for m in members])


# ----------------------------------------------------------------------------
# K sweep
# ----------------------------------------------------------------------------
@dataclass
class KSweepResult:
    models: dict[int, CapsuleNet]
    rocs: dict[int, RocCurve]
    histories: dict[int, list[dict]]
    best_k: int

    @property
    def aucs(self) -> dict[int, float]:
        return {k: r.auc for k, r in self.rocs.items()}


def k_sweep(train: PatchSet, val: PatchSet, k_values: Sequence[int], caps: CapsConfig,
            train_config: CapsTrainConfig, seed: int = 0) -> KSweepResult:
    """Train one network per K (everything else fixed) and keep the best validation AUC.

    Ties go to the smaller K.
    """
    if len(val) == 0 or val.labels.min() == val.labels.max():
        raise DataError("K selection needs a validation set with both classes")
    models, rocs, histories = {}, {}, {}
    for k in sorted(set(int(k) for k in k_values)):
        model, hist = train_patch_classifier((train.patches, train.labels),
                                             (val.patches, val.labels),
                                             replace(caps, K=k), train_config, seed=seed)
        models[k], histories[k] = model, hist
        rocs[k] = roc_and_auc(predict_patches(model, val.patches), val.labels)
        logger.info("K=%d validation AUC %.4f", k, rocs[k].auc)
    best = max(sorted(rocs), key=lambda k: (rocs[k].auc, -k))
    return KSweepResult(models, rocs, histories, best)


# ----------------------------------------------------------------------------
# cross validation
# ----------------------------------------------------------------------------
@dataclass
class FoldResult:
    fold: int
    seg_history: list[dict]
    caps_histories: dict[int, list[dict]]
    rocs: dict[int, RocCurve]
    selected_k: int
    cutoff: float
    seg_metrics: dict[str, float]
    patch_metrics: dict[str, float]
    wsi_metrics: dict[int, dict[str, float]]
    test_ids: list[int]
    diagnoses: dict[int, list[WsiDiagnosis]] = field(default_factory=dict)
    seg_model: UNet | None = None
    caps_model: CapsuleNet | None = None


class _ProbabilityCache:
    """Patch probabilities of one classifier keyed by (record, superpixel count, superpixel)."""

    def __init__(self, model: CapsuleNet, centroids: CentroidCache):
        self.model = model
        self.centroids = centroids
        self._store: dict[tuple[int, int, int], float] = {}

    def diagnose(self, rec: SynthRecord, mask: np.ndarray, n_sp: int, cutoff: float) -> WsiDiagnosis:
        specs = self.centroids.windows(rec, mask, n_sp, self.model.config.patch_size)
        missing = [s for s in specs if (rec.index, n_sp, s.superpixel) not in self._store]
        if missing:
            probs = classify_windows(self.model, rec.image, missing)
            for s, pr in zip(missing, probs):
                self._store[(rec.index, n_sp, s.superpixel)] = float(pr)
        probs = np.array([self._store[(rec.index, n_sp, s.superpixel)] for s in specs])
        count, _ = decide(probs, cutoff, 0)
        return WsiDiagnosis(rec.ident, count, -1, "negative", probs.tolist(), specs, cutoff,
                            empty_sc=not np.any(mask))


def run_fold(records: Sequence[SynthRecord], plan: FoldPlan, k: int, cfg: RunConfig,
             keep_models: bool = False, cache: CentroidCache | None = None) -> FoldResult:
    p = cfg.pipeline
    cache = cache or CentroidCache(p.compactness, p.slic_iterations)
    seed = cfg.seed * 1000 + k
    rng = np.random.default_rng(seed)
    train_idx, test_idx = plan.train_indices(k), plan.test_indices(k)
    train_recs = [records[i] for i in train_idx]
    test_recs = [records[i] for i in test_idx]
    logger.info("fold %d: %d train / %d test slides", k + 1, len(train_recs), len(test_recs))

    # stage 1: segmentation, 10% of training slides held out for model selection
    tr, va = stratified_split([r.positive for r in train_recs], p.seg_val_fraction, rng)
    seg_model, seg_hist = train_segmenter(
        [(train_recs[i].image, train_recs[i].sc_mask) for i in tr],
        [(train_recs[i].image, train_recs[i].sc_mask) for i in va],
        cfg.unet, cfg.seg, seed=seed,
    )
    raw = [segment(seg_model, r.image) for r in test_recs]
    test_masks = [postprocess(m, p.min_area_fraction) for m in raw]
    seg_metrics = {
        "dice_raw": float(np.mean([dice_coefficient(m, r.sc_mask) for m, r in zip(raw, test_recs)])),
        "dice_post": float(np.mean([dice_coefficient(m, r.sc_mask) for m, r in zip(test_masks, test_recs)])),
    }
    train_masks = [segment_wsi(seg_model, r.image, p.min_area_fraction) for r in train_recs]

    # stage 2: patch classifier on ground-truth SC patches, 20% held out
    pool = balance_patches(build_patch_set(train_recs, p.patch_superpixels, cfg, cache=cache),
                           p.max_train_patches, p.neg_ratio, rng)
    ptr, pva = stratified_split(pool.labels > 0.5, p.caps_val_fraction, rng)
    sweep = k_sweep(pool.subset(ptr), pool.subset(pva), cfg.k_values, cfg.caps, cfg.caps_train,
                    seed=seed)
    caps_model = sweep.models[sweep.best_k]
    cutoff = choose_cutoff(sweep.rocs[sweep.best_k])

    test_patches = build_patch_set(test_recs, p.patch_superpixels, cfg, cache=cache)
    probs = predict_patches(caps_model, test_patches.patches).astype(np.float64)
    truth = test_patches.labels > 0.5
    patch_metrics = precision_recall_f1_acc(probs >= cutoff, truth)
    patch_metrics["auc"] = roc_and_auc(probs, truth).auc if 0 < truth.sum() < len(truth) else float("nan")
    patch_metrics["patches"] = int(len(truth))
    patch_metrics["positives"] = int(truth.sum())

    # stage 3: slide thresholds from training slides, applied to the held-out fold
    wsi_metrics: dict[int, dict[str, float]] = {}
    diagnoses: dict[int, list[WsiDiagnosis]] = {}
    y_train = np.array([r.positive for r in train_recs])
    y_test = np.array([r.positive for r in test_recs])
    probs_cache = _ProbabilityCache(caps_model, cache)
    for n_sp in p.superpixels:
        train_counts = [probs_cache.diagnose(r, m, n_sp, cutoff).positive_patch_count
                        for r, m in zip(train_recs, train_masks)]
        diags = [probs_cache.diagnose(r, m, n_sp, cutoff) for r, m in zip(test_recs, test_masks)]
        test_counts = [d.positive_patch_count for d in diags]
        t1 = select_threshold_T(train_counts, y_train, "I")
        t2 = select_threshold_T(train_counts, y_train, "II")
        d1 = wsi_decisions(test_counts, t1)
        d2 = wsi_decisions(test_counts, t2)
        m2 = precision_recall_f1_acc(d2, y_test)
        wsi_metrics[n_sp] = {
            "T_I": int(t1),
            "acc_I": precision_recall_f1_acc(d1, y_test)["accuracy"],
            "T_II": int(t2),
            "tnr_II": tnr(d2, y_test),
            "precision_II": m2["precision"],
            "recall_II": m2["recall"],
        }
        for d, flag in zip(diags, d1):
            d.threshold = t1
            d.decision = "positive" if flag else "negative"
        diagnoses[n_sp] = diags
        logger.info("fold %d sp %d: T_I=%d acc=%.3f T_II=%d tnr=%.3f", k + 1, n_sp, t1,
                    wsi_metrics[n_sp]["acc_I"], t2, wsi_metrics[n_sp]["tnr_II"])

    return FoldResult(
        fold=k + 1,
        seg_history=seg_hist,
        caps_histories=sweep.histories,
        rocs=sweep.rocs,
        selected_k=sweep.best_k,
        cutoff=float(cutoff),
        seg_metrics=seg_metrics,
        patch_metrics=patch_metrics,
        wsi_metrics=wsi_metrics,
        test_ids=[int(records[i].index) for i in test_idx],
        diagnoses=diagnoses,
        seg_model=seg_model if keep_models else None,
        caps_model=caps_model if keep_models else None,
    )


def _run_fold_job(args):
    records, plan, k, cfg, cache = args
    return run_fold(records, plan, k, cfg, cache=cache)


def crossval(records: Sequence[SynthRecord], config: RunConfig | None = None,
             keep_models: bool = False) -> list[FoldResult]:
    """Train and evaluate on every fold; results are ordered by fold."""
    cfg = (config or RunConfig()).validate()
    p = cfg.pipeline
    if len(records) < 2 * p.folds:
        raise DataError(f"{len(records)} slides are too few for {p.folds}-fold evaluation")
    plan = make_folds([r.positive for r in records], p.folds, cfg.seed)
    cache = CentroidCache(p.compactness, p.slic_iterations)
    for rec in records:
        for n_sp in sorted(set(p.superpixels) | {p.patch_superpixels}):
            cache.centroids(rec, n_sp)
    logger.info("superpixels computed for %d slides", len(records))
    if p.jobs > 1 and not keep_models:
        with ProcessPoolExecutor(max_workers=p.jobs) as pool:
            jobs = [(records, plan, k, cfg, cache) for k in range(len(plan.folds))]
            return list(pool.map(_run_fold_job, jobs))
    return [run_fold(records, plan, k, cfg, keep_models, cache) for k in range(len(plan.folds))]
