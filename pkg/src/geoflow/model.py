"""Propagated-feature linear softmax classifier with analytic gradients.

Features are smoothed ``hops`` times with the symmetric-normalized adjacency
(self-loops added) before a linear softmax head. Labels use ``UNLABELED = -1``
for nodes without a training label; their per-node loss is imputed as the mean
of the labeled losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from .errors import DimensionMismatch, EmptyMask, NoLabeledNodes
from .graph import WeightedGraph

UNLABELED = -1


@dataclass(frozen=True)
class PropagationConfig:
    hops: int = 2
    self_loop_weight: float = 1.0


@dataclass
class ClassifierParams:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.weight.copy(), self.bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    @classmethod
    def from_flat(cls, vec, num_classes: int, dim: int) -> "ClassifierParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: num_classes * dim].reshape(num_classes, dim).copy(), vec[num_classes * dim:].copy())

    def to_json(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ClassifierParams":
        return cls(np.asarray(obj["weight"], dtype=np.float64), np.asarray(obj["bias"], dtype=np.float64))


@dataclass(frozen=True)
class Metrics:
    acc: float
    balanced_acc: float
    macro_f1: float
    roc_auc: float | None = None

    def as_dict(self) -> dict:
        return {"acc": self.acc, "balanced_acc": self.balanced_acc, "macro_f1": self.macro_f1, "roc_auc": self.roc_auc}


def init_params(dim: int, num_classes: int, seed: int) -> ClassifierParams:
    """Glorot-uniform weights, zero bias."""
    rng = np.random.default_rng(seed)
    s = np.sqrt(6.0 / (dim + num_classes))
    return ClassifierParams(rng.uniform(-s, s, size=(num_classes, dim)), np.zeros(num_classes))


def normalized_adjacency(g: WeightedGraph, self_loop_weight: float = 1.0) -> sps.csr_matrix:
    a = g.adjacency + self_loop_weight * sps.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sps.diags(inv_sqrt)
    return (d @ a @ d).tocsr()


def propagate_features(x, g: WeightedGraph, cfg: PropagationConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.num_nodes:
        raise DimensionMismatch(f"features have shape {x.shape}, graph has {g.num_nodes} nodes")
    if cfg.hops == 0:
        return x.copy()
    s = normalized_adjacency(g, cfg.self_loop_weight)
    for _ in range(cfg.hops):
        x = s @ x
    return x


def _check_shapes(params: ClassifierParams, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise DimensionMismatch(f"features {x.shape} incompatible with weight {params.weight.shape}")
    if y.shape != (x.shape[0],):
        raise DimensionMismatch(f"labels {y.shape} incompatible with {x.shape[0]} nodes")
    if np.any(y >= params.num_classes) or np.any(y < UNLABELED):
        raise DimensionMismatch("label outside [0, C) and not UNLABELED")
    labeled = y != UNLABELED
    if not labeled.any():
        raise NoLabeledNodes("no labeled nodes")
    return x, y, labeled


def logits(params: ClassifierParams, x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ params.weight.T + params.bias


def per_node_loss(params: ClassifierParams, x, y) -> np.ndarray:
    """Cross-entropy per node; unlabeled nodes get the mean labeled loss."""
    x, y, labeled = _check_shapes(params, x, y)
    z = logits(params, x)
    loss = np.empty(x.shape[0])
    idx = np.flatnonzero(labeled)
    loss[idx] = logsumexp(z[idx], axis=1) - z[idx, y[idx]]
    loss[~labeled] = loss[idx].mean()
    return loss


def gradient_coefficients(q, y, impute_grad: bool = True) -> np.ndarray:
    """Per-node weight each labeled node's loss gradient receives in ``grad sum(q * loss)``."""
    q = np.asarray(q, dtype=np.float64)
    labeled = np.asarray(y) != UNLABELED
    coef = np.where(labeled, q, 0.0)
    if impute_grad:
        coef[labeled] += q[~labeled].sum() / labeled.sum()
    return coef


def weighted_loss_gradient(params: ClassifierParams, x, y, q, impute_grad: bool = True) -> ClassifierParams:
    """Gradient of ``sum_i q_i loss_i`` with respect to weight and bias.

    With ``impute_grad`` the imputed entries pass gradient through the mean of
    the labeled losses; otherwise they are treated as constants.
    """
    x, y, labeled = _check_shapes(params, x, y)
    coef = gradient_coefficients(q, y, impute_grad)
    idx = np.flatnonzero(labeled)
    resid = softmax(logits(params, x[idx]), axis=1)
    resid[np.arange(idx.size), y[idx]] -= 1.0
    resid *= coef[idx, None]
    return ClassifierParams(resid.T @ x[idx], resid.sum(axis=0))


def sgd_step(params: ClassifierParams, grad: ClassifierParams, gamma: float) -> ClassifierParams:
    return ClassifierParams(params.weight - gamma * grad.weight, params.bias - gamma * grad.bias)


def predict(params: ClassifierParams, x) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


def roc_auc_score(y_true, scores) -> float | None:
    """Mann-Whitney AUC; ties count one half. ``None`` if a class is absent."""
    y_true = np.asarray(y_true)
    pos = y_true == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(y_true, y_pred, num_classes: int, pos_scores=None) -> Metrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise EmptyMask("no nodes to evaluate")
    acc = float(np.mean(y_true == y_pred))
    recalls, f1s = [], []
    for c in range(num_classes):
        tp = int(np.sum((y_true == c) & (y_pred == c)))
        n_true = int(np.sum(y_true == c))
        n_pred = int(np.sum(y_pred == c))
        if n_true:
            recalls.append(tp / n_true)
        if n_true or n_pred:
            # harmonic mean of precision and recall, 0 when tp == 0
            f1s.append(2 * tp / (n_true + n_pred))
    auc = roc_auc_score(y_true, pos_scores) if num_classes == 2 and pos_scores is not None else None
    return Metrics(acc, float(np.mean(recalls)), float(np.mean(f1s)), auc)


def evaluate(params: ClassifierParams, x, y_true, mask) -> Metrics:
    mask = np.asarray(sorted(set(int(i) for i in mask)), dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("evaluation mask is empty")
    y = np.asarray(y_true)[mask]
    if np.any(y == UNLABELED):
        raise NoLabeledNodes("evaluation mask contains unlabeled nodes")
    z = logits(params, np.asarray(x)[mask])
    scores = softmax(z, axis=1)[:, 1] if params.num_classes == 2 else None
    return classification_metrics(y, np.argmax(z, axis=1), params.num_classes, scores)
