"""Scalar scores over classifier outputs, similarity pairs and regression predictions."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise MetricError("expected a non-empty (n_samples, n_classes) probability matrix")
    return p


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    nz = x > 0
    out[nz] = x[nz] * np.log(y[nz])
    return out


def inception_score(p_yx) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` with ``p(y)`` the mean prediction."""
    p = _probs(p_yx)
    p_y = np.broadcast_to(p.mean(axis=0, keepdims=True), p.shape)
    kl = (_xlogy(p, p) - _xlogy(p, p_y)).sum(axis=1)
    return float(np.exp(kl.mean()))


def entropy_metrics(p_yx) -> tuple[float, float]:
    """Returns ``(H(y|x), H(y))`` in nats: mean per-sample entropy and entropy of the marginal."""
    p = _probs(p_yx)
    h_cond = float(-_xlogy(p, p).sum(axis=1).mean())
    m = p.mean(axis=0)
    h_marg = float(-_xlogy(m, m).sum())
    return h_cond, h_marg


def accuracy(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or pred.size == 0:
        raise MetricError("accuracy needs aligned, non-empty arrays")
    return float((pred == target).mean())


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise MetricError("mae needs aligned, non-empty arrays")
    return float(np.abs(pred - target).mean())


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels must be aligned")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise MetricError("need both positive and negative examples")
    return s, y, n_pos


def _roc_points(s, y):
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one ROC point per distinct score (ties move together)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp


def auroc(scores, labels) -> float:
    s, y, n_pos = _binary(scores, labels)
    tp, fp = _roc_points(s, y)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / (len(y) - n_pos)]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auprc(scores, labels) -> float:
    """Step-wise area under precision-recall (average precision)."""
    s, y, n_pos = _binary(scores, labels)
    tp, fp = _roc_points(s, y)
    recall = np.r_[0.0, tp / n_pos]
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(recall) * precision))


def downstream_metric(pred, target, kind: str) -> float:
    if kind == "auroc":
        return auroc(pred, target)
    if kind == "auprc":
        return auprc(pred, target)
    if kind == "mae":
        return mae(pred, target)
    if kind == "accuracy":
        return accuracy(pred, target)
    raise MetricError(f"unknown metric kind {kind!r}")


def cosine_similarity(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(-1) / np.maximum(na * nb, 1e-12)


def eer(scores, same) -> float:
    """Equal error rate of the rule ``score >= threshold  =>  same``.

    Thresholds sweep the observed scores; the crossing of the false-accept
    and false-reject curves is interpolated linearly between neighbours.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(same).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels must be aligned")
    if y.all() or not y.any():
        raise MetricError("EER needs at least one same pair and one different pair")
    pos, neg = np.sort(s[y]), np.sort(s[~y])
    thr = np.unique(np.r_[s, s.max() + 1.0])
    # false accept: different pairs at or above threshold; false reject: same pairs below
    far = 1.0 - np.searchsorted(neg, thr, side="left") / len(neg)
    frr = np.searchsorted(pos, thr, side="left") / len(pos)
    diff = far - frr
    k = int(np.argmax(diff <= 0))  # first threshold where rejects catch up; diff[-1] < 0 always
    if diff[k] == 0 or k == 0:
        return float((far[k] + frr[k]) / 2.0)
    w = diff[k - 1] / (diff[k - 1] - diff[k])
    far_x = far[k - 1] + w * (far[k] - far[k - 1])
    frr_x = frr[k - 1] + w * (frr[k] - frr[k - 1])
    return float((far_x + frr_x) / 2.0)
