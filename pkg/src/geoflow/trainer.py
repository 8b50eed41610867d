"""Outer minimax loop: reweight nodes, then take a full-batch gradient step.

Methods:

* ``tar``: weights from the geometric Wasserstein flow on the data graph.
* ``tar-n``: the same flow on the graph with labeled-node shortcut edges.
* ``erm``: uniform weights.
* ``kl-tilt``: ``softmax(loss / beta)`` over all nodes, ignoring the graph.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import ConfigInvalid, EmptyGroup
from .flow import FlowConfig, run_flow, softmax, uniform_density
from .graph import WeightedGraph, reconnect_labeled
from .model import (
    UNLABELED,
    ClassifierParams,
    PropagationConfig,
    evaluate,
    init_params,
    per_node_loss,
    predict,
    propagate_features,
    sgd_step,
    weighted_loss_gradient,
)

METHODS = ("tar", "tar-n", "erm", "kl-tilt")
T_IN_GRID = (1, 3, 5, 10, 30, 100)
BETA_GRID = (1.0, 0.1, 0.01, 0.001, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    gamma: float = 0.5
    flow: FlowConfig = field(default_factory=FlowConfig)
    prop: PropagationConfig = field(default_factory=PropagationConfig)
    method: str = "tar"
    k: int = 3
    seed: int = 0
    eval_every: int = 1
    impute_grad: bool = True
    q_warm_start: bool = False
    select_metric: str = "acc"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigInvalid(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be >= 1")
        if not self.gamma > 0:
            raise ConfigInvalid("gamma must be > 0")
        if self.eval_every < 1:
            raise ConfigInvalid("eval_every must be >= 1")
        if self.method == "tar-n" and self.k < 1:
            raise ConfigInvalid("tar-n needs k >= 1")
        if self.method == "kl-tilt" and self.flow.beta <= 0:
            raise ConfigInvalid("kl-tilt needs beta > 0")
        if self.select_metric not in ("acc", "balanced_acc", "macro_f1", "roc_auc"):
            raise ConfigInvalid(f"unknown select_metric {self.select_metric!r}")

    def echo(self) -> dict:
        out = asdict(self)
        out["flow"] = asdict(self.flow)
        out["prop"] = asdict(self.prop)
        return out


@dataclass
class TrainReport:
    method: str
    records: list[dict]
    best_params: ClassifierParams
    final_params: ClassifierParams
    best_epoch: int
    best_val: float
    test_at_best_val: float
    worst_group_acc: float | None
    config: TrainConfig
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "test_at_best_val": self.test_at_best_val,
            "worst_group_acc": self.worst_group_acc,
            "config_echo": self.config.echo(),
        }

    def same_trajectory(self, other: "TrainReport") -> bool:
        """Bitwise equality of everything except the method name and wall-clock timings."""
        return (
            self.records == other.records
            and np.array_equal(self.best_params.flat(), other.best_params.flat())
            and np.array_equal(self.final_params.flat(), other.final_params.flat())
            and self.best_epoch == other.best_epoch
            and self.best_val == other.best_val
            and self.test_at_best_val == other.test_at_best_val
            and self.worst_group_acc == other.worst_group_acc
        )


def training_labels(y, train_mask) -> np.ndarray:
    """Labels visible to the trainer: train nodes only, all others UNLABELED."""
    out = np.full(len(y), UNLABELED, dtype=np.int64)
    train_mask = np.asarray(train_mask, dtype=np.int64)
    out[train_mask] = np.asarray(y)[train_mask]
    return out


def entropy(q: np.ndarray) -> float:
    q = q[q > 0]
    return float(-np.dot(q, np.log(q)))


def worst_group_accuracy(params: ClassifierParams, x, y, groups) -> float:
    """Minimum accuracy over the given node groups."""
    if not groups:
        raise EmptyGroup("no groups given")
    pred = predict(params, x)
    y = np.asarray(y)
    accs = []
    for grp in groups:
        grp = np.asarray(grp, dtype=np.int64)
        if grp.size == 0:
            raise EmptyGroup("group is empty")
        accs.append(float(np.mean(pred[grp] == y[grp])))
    return min(accs)


def reweight(method: str, loss: np.ndarray, g: WeightedGraph, cfg: FlowConfig, q0=None):
    """Sample weights for one epoch and the trajectory action that produced them."""
    n = loss.size
    if method == "erm":
        return uniform_density(n), 0.0
    if method == "kl-tilt":
        return softmax(loss / cfg.beta), 0.0
    trace = run_flow(q0, loss, g, cfg)
    return trace.final, trace.cumulative_gw2


def _metric(m, name):
    value = getattr(m, name)
    return float("nan") if value is None else value


def train(g: WeightedGraph, x, y, masks: dict, cfg: TrainConfig, groups=None) -> TrainReport:
    """Run the alternating reweight/descend loop and keep the best-validation parameters."""
    t_start = time.perf_counter()
    masks = {k: np.asarray(sorted(int(i) for i in v), dtype=np.int64) for k, v in masks.items()}
    if masks["train"].size == 0:
        raise ConfigInvalid("train mask is empty")
    y = np.asarray(y, dtype=np.int64)
    h = propagate_features(x, g, cfg.prop)
    y_train = training_labels(y, masks["train"])
    num_classes = int(y[y != UNLABELED].max()) + 1
    flow_graph = reconnect_labeled(g, masks["train"], cfg.k) if cfg.method == "tar-n" else g
    cfg.flow.check_floor(g.num_nodes)

    params = init_params(h.shape[1], num_classes, cfg.seed)
    best = (-np.inf, -1, params.copy(), float("nan"))
    records: list[dict] = []
    q_prev = None
    t_flow = 0.0
    for epoch in range(cfg.epochs):
        loss = per_node_loss(params, h, y_train)
        t0 = time.perf_counter()
        q, gw2 = reweight(cfg.method, loss, flow_graph, cfg.flow, q_prev)
        t_flow += time.perf_counter() - t0
        if cfg.q_warm_start and cfg.method in ("tar", "tar-n"):
            q_prev = q
        grad = weighted_loss_gradient(params, h, y_train, q, cfg.impute_grad)
        train_loss = float(np.dot(q, loss))
        params = sgd_step(params, grad, cfg.gamma)

        if epoch % cfg.eval_every and epoch != cfg.epochs - 1:
            continue
        val = evaluate(params, h, y, masks["val"]) if masks["val"].size else None
        test = evaluate(params, h, y, masks["test"]) if masks["test"].size else None
        records.append({
            "epoch": epoch,
            "train_loss_weighted": train_loss,
            "val": None if val is None else val.as_dict(),
            "test": None if test is None else test.as_dict(),
            "cumulative_gw2": gw2,
            "q_max": float(q.max()),
            "q_entropy": entropy(q),
        })
        score = _metric(val, cfg.select_metric) if val is not None else -train_loss
        if score > best[0]:
            best = (score, epoch, params.copy(), _metric(test, cfg.select_metric) if test is not None else float("nan"))

    best_val, best_epoch, best_params, test_at_best = best
    wga = worst_group_accuracy(best_params, h, y, groups) if groups else None
    return TrainReport(
        method=cfg.method,
        records=records,
        best_params=best_params,
        final_params=params,
        best_epoch=best_epoch,
        best_val=float(best_val),
        test_at_best_val=float(test_at_best),
        worst_group_acc=wga,
        config=cfg,
        timings={"total_s": time.perf_counter() - t_start, "flow_s": t_flow},
    )


def train_dataset(ds: Dataset, cfg: TrainConfig) -> TrainReport:
    return train(ds.graph, ds.features, ds.labels, ds.masks, cfg, groups=ds.groups)


@dataclass
class SweepCell:
    t_in: int
    beta: float
    report: TrainReport

    def row(self) -> dict:
        return {
            "t_in": self.t_in,
            "beta": self.beta,
            "val_metric": self.report.best_val,
            "test_metric": self.report.test_at_best_val,
            "worst_group": self.report.worst_group_acc,
        }


def _sweep_cell(args):
    g, x, y, masks, cfg, groups = args
    return train(g, x, y, masks, cfg, groups=groups)


def sweep(g: WeightedGraph, x, y, masks, base_cfg: TrainConfig,
          t_in_grid=T_IN_GRID, beta_grid=BETA_GRID, groups=None, jobs: int = 1) -> list[SweepCell]:
    """Train once per ``(t_in, beta)`` cell, all with ``base_cfg.seed``; output in grid order."""
    t_in_grid, beta_grid = list(t_in_grid), list(beta_grid)
    if not t_in_grid or not beta_grid:
        raise ConfigInvalid("sweep grids must be non-empty")
    cells = [(t, b) for t in t_in_grid for b in beta_grid]
    cfgs = [replace(base_cfg, flow=replace(base_cfg.flow, t_in=int(t), beta=float(b))) for t, b in cells]
    tasks = [(g, x, y, masks, c, groups) for c in cfgs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_sweep_cell, tasks))
    else:
        reports = [_sweep_cell(t) for t in tasks]
    return [SweepCell(int(t), float(b), r) for (t, b), r in zip(cells, reports)]

