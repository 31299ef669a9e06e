"""Evaluation protocols: leave-one-marker-out virtual staining,
uncertainty-error correlation, Gaussian coverage, paired nonparametric
statistics, single-cell embeddings, and a linear probe.

Errors are aggregated per (image, channel): pixel-level squared/absolute
errors are averaged within each image channel, and those aggregates are
what the calibration scatter and the paired tests consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateStatisticError, StratificationError
from .markers import MarkerSet
from .masking import build_mask_plan, apply_mask
from .preprocess import center_crop


@dataclass
class StainRow:
    """Image-channel aggregate of reconstruction quality."""

    image_id: str
    marker: int
    mse: float
    mae: float
    mean_var: float
    split: str  # "active" (marker was an encoder input) or "masked"


@dataclass
class CalibrationReport:
    r_active: float
    r_masked: float
    active_points: np.ndarray  # [n,2] (log mean var, log mean mae)
    masked_points: np.ndarray
    coverage: float = None


def pearson_r(x, y):
    """Plain Pearson correlation; degenerate if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("expected two equal-length vectors")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(np.dot(xc, xc))
    vy = float(np.dot(yc, yc))
    if vx == 0.0 or vy == 0.0:
        raise DegenerateStatisticError("zero variance makes the correlation undefined")
    return float(np.dot(xc, yc) / math.sqrt(vx * vy))


def virtual_stain_loo(model, image, panel, image_id="image"):
    """Leave-one-marker-out staining: for every marker, encode the rest
    of the panel (no spatial mask) and score the held-out channel.

    ``image`` is a [C,H,W] raster in panel order, already sized for the
    encoder.  Returns one StainRow per marker (split="masked").
    """
    panel = MarkerSet(panel)
    data = np.asarray(image)
    if data.ndim != 3 or data.shape[0] != len(panel):
        raise ValueError("image channels must match the panel")
    items = []
    for j in panel:
        in_set = panel.without(j)
        items.append((data[in_set.positions_in(panel)], in_set, MarkerSet([j])))
    preds = model.forward_batch(items)
    rows = []
    for pos, (j, pred) in enumerate(zip(panel, preds)):
        target = data[pos]
        err = pred.mean.data[0] - target
        rows.append(StainRow(
            image_id=image_id, marker=int(j),
            mse=float((err * err).mean()),
            mae=float(np.abs(err).mean()),
            mean_var=float(np.exp(pred.log_var.data[0]).mean()),
            split="masked"))
    return rows


def masked_pass_rows(model, image, panel, mask_cfg, rng, image_id="image"):
    """One masked-modelling evaluation pass: sample a plan, predict the
    full target set, and emit per-channel rows tagged active (channel was
    an encoder input) or masked (fully dropped)."""
    panel = MarkerSet(panel)
    data = np.asarray(image)
    h, w = data.shape[1:]
    plan = build_mask_plan(panel, mask_cfg, h, w, rng)
    x_in = apply_mask(data[plan.in_set.positions_in(panel)], plan)
    pred = model.forward_masked(x_in, plan.in_set, plan.tgt_set)
    rows = []
    tgt_pos = plan.tgt_set.positions_in(panel)
    for i, j in enumerate(plan.tgt_set):
        target = data[tgt_pos[i]]
        err = pred.mean.data[i] - target
        rows.append(StainRow(
            image_id=image_id, marker=int(j),
            mse=float((err * err).mean()),
            mae=float(np.abs(err).mean()),
            mean_var=float(np.exp(pred.log_var.data[i]).mean()),
            split="active" if j in plan.in_set else "masked"))
    return rows, pred, plan


def uncertainty_correlation(rows):
    """Pearson r between log(mean variance) and log(mean MAE) across
    image-channel aggregates, separately for active and masked splits."""
    pts = {"active": [], "masked": []}
    for row in rows:
        pts[row.split].append((math.log(row.mean_var), math.log(max(row.mae, 1e-12))))
    for split, p in pts.items():
        if len(p) < 3:
            raise ValueError(f"need at least 3 points in the {split} split, got {len(p)}")
    act = np.array(pts["active"])
    msk = np.array(pts["masked"])
    return CalibrationReport(
        r_active=pearson_r(act[:, 0], act[:, 1]),
        r_masked=pearson_r(msk[:, 0], msk[:, 1]),
        active_points=act, masked_points=msk)


def coverage_check(target, pred, z=1.96):
    """Fraction of pixels whose error lies within z predicted sigmas."""
    tgt = np.asarray(target)
    mean = pred.mean.data if isinstance(pred.mean, T.Tensor) else np.asarray(pred.mean)
    log_var = pred.log_var.data if isinstance(pred.log_var, T.Tensor) else np.asarray(pred.log_var)
    if tgt.shape != mean.shape:
        raise ValueError("target and prediction shapes differ")
    sigma = np.exp(0.5 * log_var)
    return float((np.abs(tgt - mean) <= z * sigma).mean())


# ---------------------------------------------------------------------
# paired statistics
# ---------------------------------------------------------------------

def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b):
    """Two-sided paired signed-rank test.

    Zero differences are dropped.  For n <= 12 the null distribution is
    enumerated exactly (midranks handle ties); larger n uses the normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("expected two equal-length score vectors")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateStatisticError("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 nonzero differences, got {n}")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= 12:
        # subset-sum DP over doubled ranks (integers even with midrank ties)
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in doubled:
            nxt = counts.copy()
            nxt[r:] += counts[:counts.size - r]
            counts = nxt
        w2 = int(round(2.0 * w_plus))
        total = float(2 ** n)
        c_le = float(counts[:w2 + 1].sum())
        c_ge = float(counts[w2:].sum())
        return min(1.0, 2.0 * min(c_le, c_ge) / total)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        raise DegenerateStatisticError("zero variance in the rank sum")
    num = w_plus - mean
    num -= 0.5 * np.sign(num)  # continuity correction toward the mean
    z = num / math.sqrt(var)
    return float(math.erfc(abs(z) / math.sqrt(2.0)))


def bh_fdr(pvals):
    """Benjamini-Hochberg step-up q-values, in input order."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty vector of p-values")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m, dtype=np.float64)
    q[order] = q_sorted
    return q


# ---------------------------------------------------------------------
# single-cell embeddings and the linear probe
# ---------------------------------------------------------------------

def extract_cell_embedding(image, panel, cell_mask, centroid, model, crop=32):
    """Embed one segmented cell: crop a window centred on the mask
    centroid (zero-padded at borders), zero everything outside the cell
    mask, encode with the image's panel, and average the latent map."""
    data = np.asarray(image)
    mask = np.asarray(cell_mask, dtype=bool)
    if mask.shape != data.shape[1:]:
        raise ValueError("cell mask must match the image spatial dims")
    if not mask.any():
        raise ValueError("empty cell mask")
    cy, cx = int(round(centroid[0])), int(round(centroid[1]))
    half = crop // 2
    out = np.zeros((data.shape[0], crop, crop), dtype=np.float32)
    y0, x0 = cy - half, cx - half
    iy0, ix0 = max(y0, 0), max(x0, 0)
    iy1 = min(y0 + crop, data.shape[1])
    ix1 = min(x0 + crop, data.shape[2])
    if iy1 > iy0 and ix1 > ix0:
        patch = data[:, iy0:iy1, ix0:ix1] * mask[iy0:iy1, ix0:ix1]
        out[:, iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0] = patch
    z = model.encode(out, MarkerSet(panel))
    return z.data.mean(axis=(1, 2))


def probe_loss_grad(w, x, y_onehot, l2):
    """Multinomial logistic loss and gradient (weights include the bias
    row; x is assumed to carry a trailing column of ones)."""
    logits = x @ w
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    n = x.shape[0]
    eps = 1e-12
    loss = -np.log(probs[y_onehot.astype(bool)] + eps).mean() + 0.5 * l2 * float((w * w).sum())
    grad = x.T @ (probs - y_onehot) / n + l2 * w
    return float(loss), grad


def _f1_per_class(y_true, y_pred, n_classes):
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        f1[c] = 2.0 * tp / denom if denom else 0.0
    return f1


@dataclass
class ProbeReport:
    classes: list
    f1_mean: dict
    f1_ci: dict
    macro_f1: float
    fold_f1: np.ndarray = field(repr=False, default=None)  # [folds, classes]


def linear_probe_cv(embeddings, labels, folds=10, l2=1e-3, lr=0.5, iters=300, seed=0):
    """Stratified k-fold evaluation of a multinomial logistic probe fit
    by full-batch gradient descent with an L2 penalty.

    Returns per-class F1 mean with a normal-approximation confidence
    halfwidth (1.96 * sd / sqrt(folds)).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    class_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([class_idx[v] for v in labels])
    n_classes = len(classes)
    rng = np.random.default_rng(seed)

    fold_of = np.empty(len(y), dtype=int)
    for c in range(n_classes):
        members = np.nonzero(y == c)[0]
        if len(members) < folds:
            raise StratificationError(
                f"class {classes[c]!r} has {len(members)} samples; needs >= {folds}")
        members = members[rng.permutation(len(members))]
        fold_of[members] = np.arange(len(members)) % folds

    fold_scores = np.zeros((folds, n_classes))
    for k in range(folds):
        train_mask = fold_of != k
        xt, yt = x[train_mask], y[train_mask]
        mu = xt.mean(axis=0)
        sd = xt.std(axis=0)
        sd[sd == 0] = 1.0
        xt = np.hstack([(xt - mu) / sd, np.ones((len(xt), 1))])
        xv = np.hstack([(x[~train_mask] - mu) / sd, np.ones(((~train_mask).sum(), 1))])
        y_onehot = np.eye(n_classes)[yt]
        w = np.zeros((xt.shape[1], n_classes))
        for _ in range(iters):
            _, grad = probe_loss_grad(w, xt, y_onehot, l2)
            w -= lr * grad
        pred = np.argmax(xv @ w, axis=1)
        fold_scores[k] = _f1_per_class(y[~train_mask], pred, n_classes)

    means = fold_scores.mean(axis=0)
    sds = fold_scores.std(axis=0, ddof=1)
    ci = 1.96 * sds / math.sqrt(folds)
    return ProbeReport(
        classes=classes,
        f1_mean={c: float(means[i]) for i, c in enumerate(classes)},
        f1_ci={c: float(ci[i]) for i, c in enumerate(classes)},
        macro_f1=float(means.mean()),
        fold_f1=fold_scores)


# ---------------------------------------------------------------------
# dataset-level orchestration
# ---------------------------------------------------------------------

def run_loo_eval(model, dataset, max_images=None):
    """LOO staining over a cohort: center-crops each image to the model's
    crop size and scores every marker."""
    crop = model.config.crop_size
    rows = []
    for rec in dataset.images[:max_images]:
        img = center_crop(rec.data, min(crop, *rec.data.shape[1:]))
        rows.extend(virtual_stain_loo(model, img, rec.panel, image_id=rec.name))
    return rows


def run_calibration_eval(model, dataset, mask_cfg, seed=0, z=1.96, max_images=None):
    """Masked-pass calibration over a cohort: per-channel aggregates plus
    pixelwise Gaussian coverage at the given z."""
    crop = model.config.crop_size
    rng = np.random.default_rng(seed)
    rows = []
    inside = 0
    total = 0
    for rec in dataset.images[:max_images]:
        img = center_crop(rec.data, min(crop, *rec.data.shape[1:]))
        img_rows, pred, plan = masked_pass_rows(
            model, img, rec.panel, mask_cfg, rng, image_id=rec.name)
        rows.extend(img_rows)
        target = img[plan.tgt_set.positions_in(rec.panel)]
        sigma = np.exp(0.5 * pred.log_var.data)
        inside += int((np.abs(target - pred.mean.data) <= z * sigma).sum())
        total += target.size
    report = uncertainty_correlation(rows)
    report.coverage = inside / total if total else float("nan")
    return rows, report
