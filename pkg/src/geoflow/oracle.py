"""Brute-force reference computations used to verify the flow, the model and the theory.

Nothing here shares code paths with the quantities it checks: the fine-step
reference integrates the flow with dense matrices, the two-node transport
distance is minimized numerically over piecewise-constant velocity schedules,
and gradients are checked by central differences.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from . import flow, model
from .errors import DisconnectedGraph, NonConvergence
from .graph import build_graph, connected_components, from_arrays, hop_distance

# ---------------------------------------------------------------------------
# two-node geometric Wasserstein distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoNodeInstance:
    w: float
    p0: tuple[float, float]
    p1: tuple[float, float]

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError("edge weight must be > 0")
        for p in (self.p0, self.p1):
            if len(p) != 2 or not (0 < p[0] < 1 and 0 < p[1] < 1) or abs(p[0] + p[1] - 1) > 1e-12:
                raise ValueError(f"{p} is not an interior two-node density")


def _donor_masses(inst: TwoNodeInstance) -> tuple[float, float]:
    # the node losing mass is the donor of every upwind flux along a monotone path
    donor = 0 if inst.p1[0] < inst.p0[0] else 1
    return inst.p0[donor], inst.p1[donor]


def gw2_two_node_closed_form(inst: TwoNodeInstance) -> float:
    """``(2 / w) * (sqrt(a) - sqrt(b))**2`` with ``a, b`` the donor's start and end mass."""
    a, b = _donor_masses(inst)
    return 2.0 / inst.w * (math.sqrt(a) - math.sqrt(b)) ** 2


def _phi_terms(a, b):
    """``phi(a, b) = (a - b) * log(a / b)`` with first and second partials."""
    r = np.log(a / b)
    val = (a - b) * r
    da = r + 1.0 - b / a
    db = -r + 1.0 - a / b
    daa = 1.0 / a + b / a**2
    dbb = 1.0 / b + a / b**2
    dab = -1.0 / a - 1.0 / b
    return val, da, db, daa, dbb, dab


def gw2_two_node_numeric(inst: TwoNodeInstance, time_steps: int = 1000, tol: float = 1e-14,
                         max_iter: int = 200) -> float:
    """Minimal action over ``time_steps`` slices of constant velocity.

    On one slice of length ``1/K`` with constant velocity the donor mass decays
    exponentially; integrating the action exactly gives
    ``K / (2 w) * (m_k - m_{k+1}) * log(m_k / m_{k+1})``. The sum is convex in
    the intermediate masses and is minimized by damped Newton iterations on its
    tridiagonal Hessian, starting from a straight line in mass.
    """
    if time_steps < 10:
        raise ValueError("time_steps must be >= 10")
    a, b = _donor_masses(inst)
    if a == b:
        return 0.0
    k = time_steps
    scale = k / (2.0 * inst.w)
    m = np.linspace(a, b, k + 1)

    def action(m):
        return scale * float(np.sum((m[:-1] - m[1:]) * np.log(m[:-1] / m[1:])))

    current = action(m)
    for _ in range(max_iter):
        _, da, db, daa, dbb, dab = _phi_terms(m[:-1], m[1:])
        grad = scale * (da[1:] + db[:-1])
        diag = scale * (daa[1:] + dbb[:-1])
        off = scale * dab[1:-1]
        if np.max(np.abs(grad)) * np.max(np.abs(m)) < tol * max(current, 1e-300):
            return current
        ab = np.zeros((3, k - 1))
        ab[0, 1:] = off
        ab[1] = diag
        ab[2, :-1] = off
        step = solve_banded((1, 1), ab, -grad)
        t = 1.0
        while True:
            trial = m.copy()
            trial[1:-1] += t * step
            if np.all(trial > 0):
                value = action(trial)
                if value <= current + 1e-4 * t * float(grad @ step):
                    break
            t *= 0.5
            if t < 1e-20:
                # no descent left at machine precision
                return current
        m, previous, current = trial, current, value
        if previous - current <= tol * current:
            return current
    raise NonConvergence(f"Newton iterations did not converge in {max_iter} steps")


# ---------------------------------------------------------------------------
# proximal-step and convergence checks
# ---------------------------------------------------------------------------


def _two_node_free_energy(q1: np.ndarray, loss, beta: float) -> np.ndarray:
    q0 = 1.0 - q1
    val = q0 * loss[0] + q1 * loss[1]
    if beta:
        val = val - beta * (q0 * np.log(q0) + q1 * np.log(q1))
    return val


def _two_node_gw2_grid(p, q1: np.ndarray, w: float) -> np.ndarray:
    # donor is node 1 where node 1 loses mass, else node 0
    p_1 = p[1]
    out = np.where(q1 < p_1, (np.sqrt(p_1) - np.sqrt(q1)) ** 2,
                   (np.sqrt(1.0 - p_1) - np.sqrt(1.0 - q1)) ** 2)
    return 2.0 / w * out


def check_theorem1_two_node(loss, p, beta: float, tau: float, grid: int = 10_000,
                            w: float = 1.0, floor: float = 1e-12) -> dict:
    """Compare the proximal maximizer with the worst case inside its own transport ball.

    Returns the two maximizing values of ``q[1]`` and the ball radius ``epsilon``.
    """
    if grid < 1000:
        raise ValueError("grid must be >= 1000")
    loss = np.asarray(loss, dtype=np.float64)
    q1 = np.linspace(floor, 1.0 - floor, grid)
    energy = _two_node_free_energy(q1, loss, beta)
    dist = _two_node_gw2_grid(p, q1, w)
    k_star = int(np.argmax(energy - dist / (2.0 * tau)))
    eps = float(dist[k_star])
    feasible = dist <= eps
    k_ball = int(np.argmax(np.where(feasible, energy, -np.inf)))
    return {"lhs_argmax": float(q1[k_star]), "rhs_argmax": float(q1[k_ball]), "epsilon": eps}


def check_theorem2_trend(g, loss, beta: float, cfg: flow.FlowConfig, checkpoints) -> list[float]:
    """Fraction of the free-energy gap to the Gibbs maximizer closed after each checkpoint step count."""
    if len(connected_components(g)) != 1:
        raise DisconnectedGraph("the trend check needs a connected graph")
    loss = np.asarray(loss, dtype=np.float64)
    checkpoints = sorted(int(c) for c in checkpoints)
    run_cfg = flow.FlowConfig(beta=beta, tau=cfg.tau, t_in=checkpoints[-1],
                              positivity_floor=cfg.positivity_floor, max_step_shrinks=cfg.max_step_shrinks)
    trace = flow.run_flow(None, loss, g, run_cfg)
    base = trace.free_energies[0]
    target = flow.free_energy(flow.gibbs_stationary(loss, beta, g), loss, beta)
    return [(trace.free_energies[c] - base) / (target - base) for c in checkpoints]


# ---------------------------------------------------------------------------
# gradients and fine-step reference
# ---------------------------------------------------------------------------


def finite_diff_gradient(fn: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` at ``params`` (any shape), one coordinate at a time."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    flat, gflat = params.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        up = flat.copy()
        dn = flat.copy()
        up[k] += eps
        dn[k] -= eps
        gflat[k] = (fn(up.reshape(params.shape)) - fn(dn.reshape(params.shape))) / (2 * eps)
    return grad


def dense_derivative(q, loss, weights: np.ndarray, beta: float) -> np.ndarray:
    """Dense-matrix evaluation of ``dq_i/dt`` straight from the per-pair formula."""
    q = np.asarray(q, dtype=np.float64)
    loss = np.asarray(loss, dtype=np.float64)
    v = loss[:, None] - loss[None, :]
    if beta:
        logq = np.log(q)
        v = v + beta * (logq[None, :] - logq[:, None])
    xi = np.where(v > 0, q[None, :], q[:, None])
    return np.sum(weights * v * xi, axis=1)


def fine_step_reference(q0, loss, g, beta: float, total_time: float, steps: int) -> np.ndarray:
    """Plain Euler integration with ``tau = total_time / steps`` on the dense weight matrix."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    weights = g.adjacency.toarray()
    q = flow.uniform_density(g.num_nodes) if q0 is None else np.array(q0, dtype=np.float64)
    tau = total_time / steps
    for _ in range(steps):
        q = q + tau * dense_derivative(q, loss, weights, beta)
        if np.any(q <= 0):
            raise NonConvergence("reference integration left the simplex interior; use more steps")
    return q


# ---------------------------------------------------------------------------
# battery
# ---------------------------------------------------------------------------


def _path(n: int):
    return build_graph(n, [(i, i + 1, 1.0) for i in range(n - 1)])


def _random_graph(rng, n, p=0.3):
    heads, tails = np.triu_indices(n, 1)
    keep = rng.random(heads.size) < p
    return from_arrays(n, heads[keep], tails[keep], rng.uniform(0.5, 2.0, int(keep.sum())))


def _random_density(rng, n):
    q = rng.uniform(0.2, 1.0, n)
    return q / q.sum()


def check_mass_conservation(instances: int = 1000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 51))
        g = _random_graph(rng, n)
        q = _random_density(rng, n)
        loss = rng.uniform(0, 3, n)
        beta = float(rng.choice([0.0, 0.01, 0.1, 1.0]))
        cfg = flow.FlowConfig(beta=beta, tau=float(rng.uniform(1e-3, 0.1)), t_in=1)
        q_next, _, tau = flow.euler_step(q, loss, g, cfg)
        raw = q + tau * flow.density_derivative(q, loss, g, beta)
        worst = max(worst, abs(raw.sum() - q.sum()), abs(q_next.sum() - 1.0))
    return {"passed": worst <= 1e-12, "max_mass_error": worst}


def check_gibbs_fixed_point(seed: int = 0, tau: float = 0.01, t_in: int = 25_000) -> dict:
    rng = np.random.default_rng(seed)
    g = _path(5)
    loss = rng.uniform(0, 1, 5)
    beta = 0.5
    q = flow.run_flow(None, loss, g, flow.FlowConfig(beta=beta, tau=tau, t_in=t_in)).final
    gibbs = flow.gibbs_stationary(loss, beta, g)
    err = float(np.max(np.abs(q - gibbs)))
    resid = float(np.max(np.abs(flow.density_derivative(gibbs, loss, g, beta))))
    return {"passed": err <= 1e-6 and resid <= 1e-10, "linf_to_gibbs": err, "derivative_at_gibbs": resid}


def check_monotone_free_energy(instances: int = 100, seed: int = 0, tau: float = 1e-3, steps: int = 200) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 21))
        g = _random_graph(rng, n)
        loss = rng.uniform(0, 3, n)
        beta = float(rng.choice([0.0, 0.01, 0.1, 0.5, 1.0]))
        trace = flow.run_flow(None, loss, g, flow.FlowConfig(beta=beta, tau=tau, t_in=steps))
        worst = min(worst, float(np.min(np.diff(trace.free_energies))))
    return {"passed": worst >= -1e-10, "most_negative_increment": worst}


def check_skew_symmetry(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    n = 12
    g = _random_graph(rng, n, 0.5)
    q = _random_density(rng, n)
    loss = rng.uniform(0, 2, n)
    v = flow.velocity(loss, q, g, 0.3)
    # the formula evaluated with every edge reversed must be the exact negation
    rev = loss[g.tails] - loss[g.heads] + 0.3 * (np.log(q[g.heads]) - np.log(q[g.tails]))
    ok = bool(np.array_equal(v, -rev))
    ref = dense_derivative(q, loss, g.adjacency.toarray(), 0.3)
    err = float(np.max(np.abs(flow.density_derivative(q, loss, g, 0.3) - ref)))
    return {"passed": ok and err <= 1e-12, "derivative_vs_dense": err}


def first_differing_step(g, loss_a, loss_b, cfg: flow.FlowConfig) -> np.ndarray:
    """Per node, the first step at which two flows differ bitwise (``-1`` if never)."""
    ta = flow.run_flow(None, loss_a, g, cfg)
    tb = flow.run_flow(None, loss_b, g, cfg)
    first = np.full(g.num_nodes, -1)
    for step, (qa, qb) in enumerate(zip(ta.densities, tb.densities)):
        newly = (qa != qb) & (first < 0)
        first[newly] = step
    return first


def check_locality(n: int = 10, node: int = 3, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    g = _path(n)
    loss = rng.uniform(0, 1, n)
    bumped = loss.copy()
    bumped[node] += 0.5
    cfg = flow.FlowConfig(beta=0.1, tau=0.01, t_in=n + 2)
    first = first_differing_step(g, loss, bumped, cfg)
    expected = np.maximum(hop_distance(g, [node]), 1).astype(int)
    return {"passed": bool(np.array_equal(first, expected)), "first_change": first.tolist(),
            "expected": expected.tolist()}


def check_first_order(seed: int = 0, tau: float = 0.02, steps: int = 50) -> dict:
    rng = np.random.default_rng(seed)
    g = _path(6)
    loss = rng.uniform(0, 1, 6)
    beta = 0.3
    total = tau * steps
    coarse = flow.run_flow(None, loss, g, flow.FlowConfig(beta=beta, tau=tau, t_in=steps)).final
    mid = flow.run_flow(None, loss, g, flow.FlowConfig(beta=beta, tau=tau / 10, t_in=steps * 10)).final
    e1 = float(np.max(np.abs(coarse - fine_step_reference(None, loss, g, beta, total, steps * 10))))
    e2 = float(np.max(np.abs(mid - fine_step_reference(None, loss, g, beta, total, steps * 100))))
    ratio = e1 / e2
    return {"passed": 5.0 <= ratio <= 20.0, "err_coarse": e1, "err_fine": e2, "ratio": ratio}


def check_gradients(instances: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 21))
        d = int(rng.integers(1, 6))
        c = int(rng.integers(2, 5))
        x = rng.standard_normal((n, d))
        y = rng.integers(0, c, n)
        y[rng.random(n) < 0.3] = model.UNLABELED
        if np.all(y == model.UNLABELED):
            y[0] = 0
        q = _random_density(rng, n)
        params = model.ClassifierParams(rng.standard_normal((c, d)), rng.standard_normal(c))
        analytic = model.weighted_loss_gradient(params, x, y, q).flat()

        def objective(theta):
            p = model.ClassifierParams.from_flat(theta, c, d)
            return float(np.dot(q, model.per_node_loss(p, x, y)))

        numeric = finite_diff_gradient(objective, params.flat(), 1e-5)
        rel = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
        worst = max(worst, rel)
    return {"passed": worst < 1e-5, "max_relative_error": worst}


def check_theorem1(instances: int = 100, grid: int = 10_000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        loss = rng.uniform(0, 2, 2)
        p1 = float(rng.uniform(0.05, 0.95))
        res = check_theorem1_two_node(loss, (1 - p1, p1), float(rng.uniform(0.01, 1.0)),
                                      float(rng.uniform(0.01, 1.0)), grid, w=float(rng.uniform(0.5, 2.0)))
        worst = max(worst, abs(res["lhs_argmax"] - res["rhs_argmax"]))
    return {"passed": worst <= 2.0 / grid, "max_argmax_gap": worst}


def check_theorem2(seed: int = 0, tau: float = 0.02, beta: float = 0.5,
                   checkpoints=(0, 1, 3, 10, 30, 100, 1000)) -> dict:
    rng = np.random.default_rng(seed)
    g = _path(5)
    loss = rng.uniform(0, 1, 5)
    ratios = check_theorem2_trend(g, loss, beta, flow.FlowConfig(beta=beta, tau=tau), checkpoints)
    monotone = all(b >= a - 1e-10 for a, b in zip(ratios, ratios[1:]))
    return {"passed": monotone and ratios[-1] >= 0.99 and ratios[0] == 0.0, "ratios": ratios}


def random_two_node_instance(rng) -> TwoNodeInstance:
    a, b = rng.uniform(0.01, 0.99, 2)
    return TwoNodeInstance(float(rng.uniform(0.25, 4.0)), (1 - a, a), (1 - b, b))


def check_gw2(instances: int = 100, time_steps: int = 1000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    refine_ok = True
    for k in range(instances):
        inst = random_two_node_instance(rng)
        closed = gw2_two_node_closed_form(inst)
        numeric = gw2_two_node_numeric(inst, time_steps)
        worst = max(worst, abs(numeric - closed) / closed)
        if k < 5:
            coarse = gw2_two_node_numeric(inst, 50)
            finer = gw2_two_node_numeric(inst, 100)
            refine_ok &= finer <= coarse * (1 + 1e-12)
    return {"passed": worst < 1e-3 and refine_ok, "max_relative_error": worst, "refinement_monotone": refine_ok}


BATTERY = {
    "flow": {
        "mass_conservation": (check_mass_conservation, {"instances": 200}),
        "gibbs_fixed_point": (check_gibbs_fixed_point, {}),
        "monotone_free_energy": (check_monotone_free_energy, {"instances": 30}),
        "skew_symmetry": (check_skew_symmetry, {}),
        "locality": (check_locality, {}),
        "first_order_convergence": (check_first_order, {}),
    },
    "gradients": {"gradient_check": (check_gradients, {"instances": 20})},
    "theorem1": {"theorem1_argmax_agreement": (check_theorem1, {"instances": 50})},
    "theorem2": {"theorem2_trend": (check_theorem2, {})},
    "gw2": {"gw2_closed_vs_numeric": (check_gw2, {"instances": 30})},
}
SELECTORS = ("all",) + tuple(BATTERY)


def run_checks(selector: str = "all", seed: int = 0, timings: bool = True) -> dict:
    """Run a battery of oracle checks and return ``{name: result}`` with a ``passed`` flag each."""
    if selector not in SELECTORS:
        raise ValueError(f"selector must be one of {SELECTORS}")
    groups = BATTERY if selector == "all" else {selector: BATTERY[selector]}
    report = {}
    for group, checks in groups.items():
        for name, (fn, kwargs) in checks.items():
            t0 = time.perf_counter()
            try:
                res = fn(seed=seed, **kwargs)
            except Exception as exc:  # a crashing check is a failed check
                res = {"passed": False, "error": repr(exc)}
            res["passed"] = bool(res["passed"])
            res["group"] = group
            if timings:
                res["seconds"] = round(time.perf_counter() - t0, 3)
            report[name] = res
    return report
