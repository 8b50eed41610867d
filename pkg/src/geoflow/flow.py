"""Gradient flow of sample densities in the discrete geometric Wasserstein space.

The flow ascends the free energy ``sum(q * loss) - beta * sum(q * log q)`` while
mass only moves along graph edges. Velocities live on the canonical undirected
edges of a :class:`~geoflow.graph.WeightedGraph` (``heads[e] < tails[e]``):
``v[e]`` is ``v_ij`` with ``i = heads[e]``; the reverse orientation is ``-v[e]``.

Densities are plain float arrays summing to one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteLoss, NonPositiveDensity, StepShrinkExhausted, ZeroBeta
from .graph import WeightedGraph, connected_components

# renormalize only when drift exceeds this; skipping it keeps untouched nodes bit-stable
RENORM_TOL = 1e-13


@dataclass(frozen=True)
class FlowConfig:
    """Inner-loop settings. ``tau`` is the Euler time step; the proximal weight is ``1/(2 tau)``."""

    beta: float = 0.01
    tau: float = 0.01
    t_in: int = 10
    positivity_floor: float = 1e-12
    max_step_shrinks: int = 40

    def __post_init__(self):
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be finite and > 0, got {self.tau}")
        if int(self.t_in) != self.t_in or self.t_in < 0:
            raise ValueError(f"t_in must be a non-negative integer, got {self.t_in}")
        if not self.positivity_floor > 0:
            raise ValueError("positivity_floor must be > 0")
        if self.max_step_shrinks < 0:
            raise ValueError("max_step_shrinks must be >= 0")

    def check_floor(self, num_nodes: int) -> None:
        if self.positivity_floor * num_nodes >= 1:
            raise ValueError(f"positivity_floor * N must be < 1 (N={num_nodes})")


@dataclass
class FlowTrace:
    densities: list[np.ndarray]
    step_actions: list[float] = field(default_factory=list)
    free_energies: list[float] = field(default_factory=list)
    effective_taus: list[float] = field(default_factory=list)

    @property
    def cumulative_gw2(self) -> float:
        """Trajectory action, the running estimate of GW^2 from the start density."""
        return math.fsum(self.step_actions)

    @property
    def final(self) -> np.ndarray:
        return self.densities[-1]

    def write_csv(self, path, every: int = 1) -> None:
        """Write ``step,node_id,q`` rows for every ``every``-th step (final step always)."""
        last = len(self.densities) - 1
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "node_id", "q"])
            for step, q in enumerate(self.densities):
                if step % every and step != last:
                    continue
                for i, qi in enumerate(q.tolist()):
                    w.writerow([step, i, repr(qi)])

    def summary(self) -> dict:
        return {
            "cumulative_gw2": self.cumulative_gw2,
            "free_energies": list(self.free_energies),
            "effective_taus": list(self.effective_taus),
            "step_actions": list(self.step_actions),
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary()) + "\n", encoding="utf-8")


def uniform_density(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_inputs(loss, q, g: WeightedGraph | None = None):
    loss = np.asarray(loss, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if g is not None and (loss.shape != (g.num_nodes,) or q.shape != (g.num_nodes,)):
        raise ValueError(f"loss and q must have shape ({g.num_nodes},)")
    if not np.all(np.isfinite(loss)):
        raise NonFiniteLoss("loss contains non-finite entries")
    if not np.all(q > 0):
        raise NonPositiveDensity("density must be strictly positive")
    return loss, q


def _velocity(loss_drop: np.ndarray, logq: np.ndarray | None, g: WeightedGraph, beta: float) -> np.ndarray:
    # loss_drop[e] = loss[head] - loss[tail]
    if not beta:
        return loss_drop.copy()
    return loss_drop + beta * (logq[g.tails] - logq[g.heads])


def velocity(loss, q, g: WeightedGraph, beta: float) -> np.ndarray:
    """Per-edge velocity ``v_ij = l_i - l_j + beta (log q_j - log q_i)``."""
    loss, q = _check_inputs(loss, q, g)
    return _velocity(loss[g.heads] - loss[g.tails], np.log(q) if beta else None, g, beta)


def _upwind(q: np.ndarray, v: np.ndarray, g: WeightedGraph) -> np.ndarray:
    # v_ij > 0 pulls mass from j into i, so j is the donor
    return np.where(v > 0, q[g.tails], q[g.heads])


def upwind_flux(q, v, g: WeightedGraph) -> np.ndarray:
    """``xi_ij(q) * v_ij`` per canonical edge, with ``xi`` taken from the donor node."""
    q = np.asarray(q, dtype=np.float64)
    return _upwind(q, v, g) * v


def _divergence(flux: np.ndarray, g: WeightedGraph) -> np.ndarray:
    n = g.num_nodes
    return np.bincount(g.heads, flux, n) - np.bincount(g.tails, flux, n)


def density_derivative(q, loss, g: WeightedGraph, beta: float) -> np.ndarray:
    """``dq_i/dt = sum_j w_ij v_ij xi_ij(q)``; sums to zero up to rounding."""
    q = np.asarray(q, dtype=np.float64)
    v = velocity(loss, q, g, beta)
    return _divergence(g.weights * v * _upwind(q, v, g), g)


def _advance(q, logq, loss_drop, g: WeightedGraph, cfg: FlowConfig):
    """One guarded Euler step on pre-validated inputs: ``(q_next, action, tau_eff)``."""
    v = _velocity(loss_drop, logq, g, cfg.beta)
    flux = g.weights * v * _upwind(q, v, g)
    dq = _divergence(flux, g)
    floor = cfg.positivity_floor
    tau = cfg.tau
    q_next = q + tau * dq
    shrinks = 0
    while q_next.min() < floor and shrinks < cfg.max_step_shrinks:
        tau *= 0.5
        shrinks += 1
        q_next = q + tau * dq
    if q_next.min() < floor:
        # nodes sitting on the floor with net outflow: clamp, but only a sliver below it
        if not (np.all(np.isfinite(q_next)) and q_next.min() > 0):
            raise StepShrinkExhausted(
                f"density left the simplex interior after {shrinks} halvings (tau_eff={tau:g})"
            )
        q_next = np.maximum(q_next, floor)
        q_next /= q_next.sum()
    elif abs(q_next.sum() - 1.0) > RENORM_TOL:
        q_next /= q_next.sum()
    # w * xi * v**2 == flux * v
    action = 0.5 * tau * tau * float(np.dot(flux, v))
    return q_next, action, tau


def euler_step(q, loss, g: WeightedGraph, cfg: FlowConfig) -> tuple[np.ndarray, float, float]:
    """One explicit Euler step with step halving to respect the positivity floor.

    Returns ``(q_next, step_action, effective_tau)``. The step action is
    ``tau_eff**2 / 2 * sum_e w_e xi_e v_e**2``, the constant-velocity action of
    the step rescaled to unit time.
    """
    loss, q = _check_inputs(loss, q, g)
    logq = np.log(q) if cfg.beta else None
    return _advance(q, logq, loss[g.heads] - loss[g.tails], g, cfg)


def free_energy(q, loss, beta: float) -> float:
    """``sum(q * loss) - beta * sum(q * log q)``."""
    loss, q = _check_inputs(loss, q)
    value = float(np.dot(q, loss))
    if beta:
        value -= beta * float(np.dot(q, np.log(q)))
    return value


def run_flow(q0, loss, g: WeightedGraph, cfg: FlowConfig) -> FlowTrace:
    """Integrate the flow for ``cfg.t_in`` Euler steps from ``q0`` (uniform when ``None``)."""
    cfg.check_floor(g.num_nodes)
    q = uniform_density(g.num_nodes) if q0 is None else np.array(q0, dtype=np.float64)
    loss, q = _check_inputs(loss, q, g)
    beta = cfg.beta
    loss_drop = loss[g.heads] - loss[g.tails]
    logq = np.log(q) if beta else None
    energy = float(np.dot(q, loss)) - (beta * float(np.dot(q, logq)) if beta else 0.0)
    trace = FlowTrace(densities=[q], free_energies=[energy])
    for _ in range(cfg.t_in):
        q, action, tau = _advance(q, logq, loss_drop, g, cfg)
        energy = float(np.dot(q, loss))
        if beta:
            logq = np.log(q)
            energy -= beta * float(np.dot(q, logq))
        trace.densities.append(q)
        trace.step_actions.append(action)
        trace.effective_taus.append(tau)
        trace.free_energies.append(energy)
    return trace


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def gibbs_stationary(loss, beta: float, g: WeightedGraph, q0=None) -> np.ndarray:
    """Fixed point of the flow: ``softmax(loss / beta)`` inside each component, scaled to its initial mass."""
    if beta <= 0:
        raise ZeroBeta("the Gibbs fixed point needs beta > 0")
    loss = np.asarray(loss, dtype=np.float64)
    q0 = uniform_density(g.num_nodes) if q0 is None else np.asarray(q0, dtype=np.float64)
    out = np.empty(g.num_nodes)
    for comp in connected_components(g):
        idx = np.fromiter(sorted(comp), dtype=np.int64)
        out[idx] = q0[idx].sum() * softmax(loss[idx] / beta)
    return out
