"""Training-free online trajectory adaptation around the decoder.

Per-step constraint handling composes deterministically: Gaussian-product
updates for via points first (nearest upcoming via first), then interval
truncation (box, velocity, acceleration intersected), so hard bounds are
never violated. Spherical obstacles never reshape the predictive
distribution; they only enter beam-search scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import (
    DiagGaussian,
    InfeasibleIntervalError,
    TruncatedDiagGaussian,
    gaussian_logpdf,
    gaussian_product,
    sample_diag_gaussian,
    sample_truncated_gaussian,
)
from .model import Model
from .tensor import RngStream

__all__ = [
    "BoxBound",
    "VelocityBound",
    "AccelBound",
    "ViaPoint",
    "SphereObstacle",
    "InfeasibleConstraintError",
    "parse_constraints",
    "constraint_to_json",
    "apply_box_bound",
    "apply_velocity_bound",
    "apply_accel_bound",
    "via_likelihood_update",
    "via_bridge_update",
    "obstacle_score",
    "compose",
    "adapt_rollout",
    "adapt_rollout_batch",
    "beam_search",
    "constrained_beam_search",
    "BeamResult",
]

SIGMA_FLOOR = 1e-5


class InfeasibleConstraintError(RuntimeError):
    """Hard bounds left (numerically) no feasible mass at some step."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


def _vec(x, d: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 and d is not None:
        arr = np.full(d, float(arr))
    return arr


@dataclass(frozen=True)
class BoxBound:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec(self.lo))
        object.__setattr__(self, "hi", _vec(self.hi))
        if np.any(self.lo >= self.hi):
            raise ValueError("box bound requires lo < hi elementwise")


@dataclass(frozen=True)
class VelocityBound:
    v_min: np.ndarray
    v_max: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "v_min", _vec(self.v_min))
        object.__setattr__(self, "v_max", _vec(self.v_max))
        if np.any(self.v_min > self.v_max):
            raise ValueError("velocity bound requires v_min <= v_max")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class AccelBound:
    a_min: np.ndarray
    a_max: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "a_min", _vec(self.a_min))
        object.__setattr__(self, "a_max", _vec(self.a_max))
        if np.any(self.a_min > self.a_max):
            raise ValueError("acceleration bound requires a_min <= a_max")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ViaPoint:
    s: int
    x_s: np.ndarray
    sigma_vp: float
    mode: str = "bridge"  # or "likelihood"

    def __post_init__(self):
        object.__setattr__(self, "x_s", _vec(self.x_s))
        if self.s <= 1:
            raise ValueError("via step must satisfy 1 < s < T")
        if self.sigma_vp <= 0:
            raise ValueError("sigma_vp must be positive")
        if self.mode not in ("bridge", "likelihood"):
            raise ValueError(f"unknown via mode {self.mode!r}")

    @property
    def epsilon(self) -> float:
        """Banking tolerance: within 3 sigma_vp counts as passing the via."""
        return 3.0 * self.sigma_vp


@dataclass(frozen=True)
class SphereObstacle:
    center: np.ndarray
    radius: float
    weight: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        if self.radius <= 0 or self.weight <= 0:
            raise ValueError("radius and weight must be positive")


def parse_constraints(items: list, d: int, dt: float) -> list:
    """Decode the JSON constraint array used by the CLI and the service."""
    out = []
    for i, it in enumerate(items):
        kind = it.get("type")
        try:
            if kind == "box":
                out.append(BoxBound(_vec(it["lo"], d), _vec(it["hi"], d)))
            elif kind == "velocity":
                out.append(VelocityBound(_vec(it["v_min"], d), _vec(it["v_max"], d),
                                         float(it.get("dt", dt))))
            elif kind == "accel":
                out.append(AccelBound(_vec(it["a_min"], d), _vec(it["a_max"], d),
                                      float(it.get("dt", dt))))
            elif kind == "via":
                out.append(ViaPoint(int(it["s"]), _vec(it["point"], d),
                                    float(it["sigma"]), it.get("mode", "bridge")))
            elif kind == "sphere":
                out.append(SphereObstacle(_vec(it["center"], d), float(it["radius"]),
                                          float(it.get("gamma", 50.0))))
            else:
                raise ValueError(f"unknown constraint type {kind!r}")
        except KeyError as exc:
            raise ValueError(f"constraint #{i}: missing field {exc}") from exc
    return out


def constraint_to_json(c) -> dict:
    if isinstance(c, BoxBound):
        return {"type": "box", "lo": c.lo.tolist(), "hi": c.hi.tolist()}
    if isinstance(c, VelocityBound):
        return {"type": "velocity", "v_min": c.v_min.tolist(), "v_max": c.v_max.tolist(), "dt": c.dt}
    if isinstance(c, AccelBound):
        return {"type": "accel", "a_min": c.a_min.tolist(), "a_max": c.a_max.tolist(), "dt": c.dt}
    if isinstance(c, ViaPoint):
        return {"type": "via", "s": c.s, "point": c.x_s.tolist(), "sigma": c.sigma_vp, "mode": c.mode}
    if isinstance(c, SphereObstacle):
        return {"type": "sphere", "center": c.center.tolist(), "radius": c.radius, "gamma": c.weight}
    raise TypeError(f"not a constraint: {c!r}")


# ---------------------------------------------------------------------------
# per-step Bayesian updates


def apply_box_bound(pred: DiagGaussian, b: BoxBound) -> TruncatedDiagGaussian:
    return TruncatedDiagGaussian.create(pred, b.lo, b.hi)


def apply_velocity_bound(pred: DiagGaussian, prev_x: np.ndarray, b: VelocityBound) -> TruncatedDiagGaussian:
    prev_x = _vec(prev_x)
    return TruncatedDiagGaussian.create(pred, prev_x + b.v_min * b.dt, prev_x + b.v_max * b.dt)


def apply_accel_bound(pred: DiagGaussian, prev_x: np.ndarray, prev_prev_x: np.ndarray,
                      b: AccelBound) -> TruncatedDiagGaussian:
    base = 2.0 * _vec(prev_x) - _vec(prev_prev_x)
    dt2 = b.dt * b.dt
    return TruncatedDiagGaussian.create(pred, base + b.a_min * dt2, base + b.a_max * dt2)


def via_likelihood_update(pred: DiagGaussian, t: int, vp: ViaPoint) -> DiagGaussian:
    """Product with the Gaussian likelihood of hitting x_s from x_{t+1}.

    Likelihood variance (s - t - 1) * sigma_vp^2 shrinks as the via step
    approaches; a no-op once the via step is behind (t + 1 > s).
    """
    if t + 1 > vp.s:
        return pred
    var = max(vp.s - t - 1, 0) * vp.sigma_vp**2
    sigma = max(math.sqrt(var), SIGMA_FLOOR)
    like = DiagGaussian(vp.x_s, np.full_like(vp.x_s, sigma))
    return gaussian_product(pred, like, sigma_floor=SIGMA_FLOOR)


def via_bridge_update(pred: DiagGaussian, x_t: np.ndarray, t: int, vp: ViaPoint) -> DiagGaussian:
    """Product with the Brownian-bridge one-step conditional toward x_s.

    Bridge mean x_t + (x_s - x_t)/(s - t); variance sigma_vp^2 (s-t-1)/(s-t).
    Conditions more strongly on the past than the plain likelihood update.
    No-op once t >= s.
    """
    if t >= vp.s:
        return pred
    x_t = _vec(x_t)
    gap = vp.s - t
    mean = x_t + (vp.x_s - x_t) / gap
    var = vp.sigma_vp**2 * (gap - 1) / gap
    sigma = max(math.sqrt(var), SIGMA_FLOOR)
    bridge = DiagGaussian(mean, np.full_like(mean, sigma))
    return gaussian_product(pred, bridge, sigma_floor=SIGMA_FLOOR)


def obstacle_score(x: np.ndarray, obstacles) -> np.ndarray | float:
    """Non-positive score: 0 outside every sphere, -gamma*(r^2 penetration) inside.

    x may be a single point (d,) or a batch (N, d).
    """
    if isinstance(obstacles, SphereObstacle):
        obstacles = [obstacles]
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None] if single else x
    total = np.zeros(pts.shape[0])
    for ob in obstacles:
        sq = ((pts - ob.center) ** 2).sum(axis=1)
        total -= ob.weight * np.maximum(ob.radius**2 - sq, 0.0)
    return float(total[0]) if single else total


def compose(constraints: list, pred: DiagGaussian, prefix: np.ndarray):
    """Adapted per-step distribution for the point after the given prefix.

    prefix is (t, d) with rows x_1..x_t. Via products apply first (nearest
    upcoming via first), then all interval constraints intersect into one
    truncation. Obstacles are ignored here; they are score-only.
    """
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.float64))
    t = prefix.shape[0]
    x_t = prefix[-1]
    dist = pred.numpy()

    vias = sorted((c for c in constraints if isinstance(c, ViaPoint)), key=lambda v: v.s)
    for vp in vias:
        if vp.mode == "bridge":
            dist = via_bridge_update(dist, x_t, t, vp)
        else:
            dist = via_likelihood_update(dist, t, vp)

    lo = np.full(dist.mu.shape, -np.inf)
    hi = np.full(dist.mu.shape, np.inf)
    has_interval = False
    for c in constraints:
        if isinstance(c, BoxBound):
            lo, hi = np.maximum(lo, c.lo), np.minimum(hi, c.hi)
            has_interval = True
        elif isinstance(c, VelocityBound):
            lo = np.maximum(lo, x_t + c.v_min * c.dt)
            hi = np.minimum(hi, x_t + c.v_max * c.dt)
            has_interval = True
        elif isinstance(c, AccelBound):
            if t < 2:
                continue  # needs two previous points
            base = 2.0 * x_t - prefix[-2]
            lo = np.maximum(lo, base + c.a_min * c.dt * c.dt)
            hi = np.minimum(hi, base + c.a_max * c.dt * c.dt)
            has_interval = True
    if not has_interval:
        return dist
    if np.any(lo > hi):
        raise InfeasibleConstraintError("empty intersection of interval constraints", step=t + 1)
    try:
        return TruncatedDiagGaussian.create(dist, lo, hi)
    except InfeasibleIntervalError as exc:
        raise InfeasibleConstraintError(str(exc), step=t + 1) from exc


def _sample_step(dist, rng: RngStream) -> np.ndarray:
    if isinstance(dist, TruncatedDiagGaussian):
        return dist.sample(rng)
    return np.asarray(sample_diag_gaussian(dist, rng), dtype=np.float64)


def _sample_candidates(dist, n: int, rng: RngStream) -> np.ndarray:
    """n draws (n, d) from one per-step distribution, one stream pass.

    Row i equals the i-th sequential single draw from the same stream, so
    n=1 keeps plain-rollout bit-compatibility.
    """
    if isinstance(dist, TruncatedDiagGaussian):
        tiled = TruncatedDiagGaussian(
            np.broadcast_to(dist.mu, (n,) + dist.mu.shape),
            np.broadcast_to(dist.sigma, (n,) + dist.sigma.shape),
            np.broadcast_to(dist.lo, (n,) + dist.lo.shape),
            np.broadcast_to(dist.hi, (n,) + dist.hi.shape),
            np.broadcast_to(dist.pinned, (n,) + dist.pinned.shape),
        )
        return tiled.sample(rng)
    mu = np.asarray(dist.mu, dtype=np.float64)
    sigma = np.asarray(dist.sigma, dtype=np.float64)
    eps = rng.normal((n,) + mu.shape, dtype=np.float64)
    return mu + sigma * eps


def _batch_logpdf(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row-wise Gaussian log-density: x (n, d), mu/sigma (d,) -> (n,)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return (-0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi)).sum(axis=1)


def _scaled(mu: np.ndarray, sigma: np.ndarray, temperature: float) -> DiagGaussian:
    return DiagGaussian(np.asarray(mu, dtype=np.float64),
                        np.asarray(sigma, dtype=np.float64) * temperature)


def adapt_rollout_batch(model: Model, x1s: np.ndarray, xTs: np.ndarray, zs: np.ndarray,
                        constraints: list, rng: RngStream, temperature: float = 1.0,
                        T: int | None = None) -> np.ndarray:
    """Vectorized ancestral sampling under interval constraints only.

    x1s/xTs (B, d), zs (B, K, m) -> (B, T, d). Used where many bounded
    rollouts are needed (bound-enforcement statistics); via points and
    obstacles need the per-trajectory paths.
    """
    if any(isinstance(c, (ViaPoint, SphereObstacle)) for c in constraints):
        raise ValueError("batch rollout supports interval constraints only")
    T = T or model.cfg.T
    x1s = np.atleast_2d(np.asarray(x1s, dtype=np.float64))
    xTs = np.atleast_2d(np.asarray(xTs, dtype=np.float64))
    B, d = x1s.shape
    state, mu, sigma = model.begin_rollout(x1s, xTs, zs, T=T)
    points = np.empty((B, T, d), dtype=np.float64)
    points[:, 0] = x1s
    points[:, T - 1] = xTs
    for t in range(1, T - 1):
        lo = np.full((B, d), -np.inf)
        hi = np.full((B, d), np.inf)
        has_interval = False
        x_t = points[:, t - 1]
        for c in constraints:
            if isinstance(c, BoxBound):
                lo, hi = np.maximum(lo, c.lo), np.minimum(hi, c.hi)
                has_interval = True
            elif isinstance(c, VelocityBound):
                lo = np.maximum(lo, x_t + c.v_min * c.dt)
                hi = np.minimum(hi, x_t + c.v_max * c.dt)
                has_interval = True
            elif isinstance(c, AccelBound) and t >= 2:
                base = 2.0 * x_t - points[:, t - 2]
                lo = np.maximum(lo, base + c.a_min * c.dt * c.dt)
                hi = np.minimum(hi, base + c.a_max * c.dt * c.dt)
                has_interval = True
        sig_t = np.asarray(sigma, dtype=np.float64) * temperature
        if has_interval:
            if np.any(lo > hi):
                raise InfeasibleConstraintError("empty intersection of interval constraints",
                                                step=t + 1)
            try:
                x = sample_truncated_gaussian(
                    DiagGaussian(np.asarray(mu, dtype=np.float64), sig_t), lo, hi, rng)
            except InfeasibleIntervalError as exc:
                raise InfeasibleConstraintError(str(exc), step=t + 1) from exc
        else:
            x = np.asarray(mu, dtype=np.float64) + sig_t * rng.normal((B, d), dtype=np.float64)
        points[:, t] = x
        if t < T - 2:
            mu, sigma = model.decode_append(state, x, t + 1)
    return points


def adapt_rollout(model: Model, x1, xT, z, constraints: list, rng: RngStream,
                  temperature: float = 1.0, T: int | None = None) -> np.ndarray:
    """Ancestral sampling with per-step constraint composition (no beams).

    Handles bounds and via points; obstacles require a beam method and are
    rejected here.
    """
    if any(isinstance(c, SphereObstacle) for c in constraints):
        raise ValueError("obstacles are score-only; use beam_search")
    T = T or model.cfg.T
    x1 = _vec(x1)
    xT = _vec(xT)
    state, mu, sigma = model.begin_rollout(x1, xT, z, T=T)
    points = np.empty((T, model.cfg.d), dtype=np.float64)
    points[0] = x1
    points[T - 1] = xT
    for t in range(1, T - 1):
        dist = compose(constraints, _scaled(mu[0], sigma[0], temperature), points[:t])
        x = _sample_step(dist, rng)
        points[t] = x
        if t < T - 2:
            mu, sigma = model.decode_append(state, x[None], t + 1)
    return points


# ---------------------------------------------------------------------------
# beam search (obstacles) and banked constrained beam search (via points)


@dataclass
class BeamResult:
    points: np.ndarray
    log_likelihood: float
    obstacle_total: float

    @property
    def total_score(self) -> float:
        return self.log_likelihood + self.obstacle_total


def beam_search(model: Model, x1, xT, z, constraints: list, S: int = 25,
                temperature: float = 2.0, rng: RngStream | None = None,
                T: int | None = None, return_all: bool = False):
    """Top-scored trajectory from S-wide beam search.

    Score = cumulative decoder log-likelihood plus accumulated obstacle
    penalties; bound and via constraints reshape each candidate's predictive
    before sampling. Candidate draws never depend on scores, so removing an
    obstacle that no candidate ever touches reproduces the unconstrained
    output bit for bit. With S=1 and no RNG forks this is a plain rollout.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if rng is None:
        raise ValueError("beam_search requires an RngStream")
    T = T or model.cfg.T
    x1 = _vec(x1)
    xT = _vec(xT)
    z = np.asarray(z)
    obstacles = [c for c in constraints if isinstance(c, SphereObstacle)]
    others = [c for c in constraints if not isinstance(c, SphereObstacle)]
    d = model.cfg.d

    # single live prefix at t=1; the first expansion widens to S
    n_beams = 1
    prefixes = np.empty((1, T, d), dtype=np.float64)
    prefixes[0, 0] = x1
    state, mu, sigma = model.begin_rollout(x1[None], xT[None], z[None] if z.ndim == 2 else z[:1])
    loglik = np.zeros(1)
    obs_total = np.zeros(1)
    streams = [rng]

    for t in range(1, T - 1):
        cand_pts = []
        cand_parent = []
        cand_ll = []
        cand_obs = []
        infeasible = 0
        for s in range(n_beams):
            try:
                dist = compose(others, _scaled(mu[s], sigma[s], temperature), prefixes[s, :t])
            except InfeasibleConstraintError:
                infeasible += 1
                continue
            xs = _sample_candidates(dist, S, streams[s])
            cand_pts.append(xs)
            cand_parent.extend((s, r) for r in range(S))
            cand_ll.append(loglik[s] + _batch_logpdf(xs, mu[s], sigma[s]))
            step_obs = obstacle_score(xs, obstacles) if obstacles else np.zeros(S)
            cand_obs.append(obs_total[s] + step_obs)
        if infeasible == n_beams:
            raise InfeasibleConstraintError("all beams infeasible under hard bounds", step=t + 1)

        pts = np.concatenate(cand_pts, axis=0)
        ll = np.concatenate(cand_ll)
        ob = np.concatenate(cand_obs)
        total = ll + ob
        parents = np.asarray([p[0] for p in cand_parent])
        slots = np.asarray([p[1] for p in cand_parent])
        # descending total score; ties by lower NLL (higher ll), then beam index
        order = np.lexsort((slots, parents, -ll, -total))
        keep = order[: min(S, len(order))]

        new_prefixes = prefixes[parents[keep]].copy()
        new_prefixes[:, t] = pts[keep]
        prefixes = new_prefixes
        loglik = ll[keep]
        obs_total = ob[keep]
        state = state.select(parents[keep])
        if S == 1:
            streams = [streams[0]]
        else:
            streams = [streams[parents[i]].fork(int(slots[i])) for i in keep]
        n_beams = len(keep)
        if t < T - 2:
            mu, sigma = model.decode_append(state, prefixes[:, t], t + 1)

    prefixes[:, T - 1] = xT
    results = [
        BeamResult(prefixes[i].copy(), float(loglik[i]), float(obs_total[i]))
        for i in range(n_beams)
    ]
    return results if return_all else results[0]


def constrained_beam_search(model: Model, x1, xT, z, vp: ViaPoint, S: int = 5,
                            temperature: float = 1.0, rng: RngStream | None = None,
                            T: int | None = None,
                            extra_constraints: list | None = None) -> np.ndarray:
    """Banked beam search for a via point (Bank-2/1/0 selection by NLL).

    A prefix is satisfied once it has passed within 3*sigma_vp of x_s at or
    before step s. Satisfied prefixes expand with one decoder-only draw
    (Bank-2). Unsatisfied prefixes expand with one controller-assisted draw
    (Brownian-bridge product; Bank-2 if the child satisfies, else Bank-1)
    plus S decoder-only draws (Bank-2 if satisfying, else Bank-0). S
    survivors are taken in bank order by ascending path NLL.
    """
    if rng is None:
        raise ValueError("constrained_beam_search requires an RngStream")
    if not 1 < vp.s < (T or model.cfg.T):
        raise ValueError("via step must satisfy 1 < s < T")
    T = T or model.cfg.T
    x1 = _vec(x1)
    xT = _vec(xT)
    z = np.asarray(z)
    extra = extra_constraints or []
    d = model.cfg.d

    prefixes = np.empty((1, T, d), dtype=np.float64)
    prefixes[0, 0] = x1
    state, mu, sigma = model.begin_rollout(x1[None], xT[None], z[None] if z.ndim == 2 else z[:1])
    nll = np.zeros(1)
    satisfied = np.array([_hits_via(x1, 1, vp)])
    streams = [rng]
    n_beams = 1

    for t in range(1, T - 1):
        banks: dict[int, list] = {2: [], 1: [], 0: []}
        for s in range(n_beams):
            base = _scaled(mu[s], sigma[s], temperature)
            if satisfied[s]:
                x = _sample_step(compose(extra, base, prefixes[s, :t]), streams[s].fork(0))
                banks[2].append((nll[s] - gaussian_logpdf(x, mu[s], sigma[s]), s, 0, x, True))
                continue
            ctrl_dist = compose(extra + [vp], base, prefixes[s, :t])
            xc = _sample_step(ctrl_dist, streams[s].fork(0))
            ok = _hits_via(xc, t + 1, vp)
            banks[2 if ok else 1].append((nll[s] - gaussian_logpdf(xc, mu[s], sigma[s]), s, 0, xc, ok))
            plain = compose(extra, base, prefixes[s, :t])
            for r in range(1, S + 1):
                xd = _sample_step(plain, streams[s].fork(r))
                okd = _hits_via(xd, t + 1, vp)
                banks[2 if okd else 0].append((nll[s] - gaussian_logpdf(xd, mu[s], sigma[s]), s, r, xd, okd))

        chosen = []
        for bank in (2, 1, 0):
            for item in sorted(banks[bank], key=lambda it: (it[0], it[1], it[2])):
                if len(chosen) < S:
                    chosen.append(item)
        new_prefixes = np.empty((len(chosen), T, d), dtype=np.float64)
        parents = np.asarray([c[1] for c in chosen])
        new_prefixes[:] = prefixes[parents]
        for i, (_, s, r, x, ok) in enumerate(chosen):
            new_prefixes[i, t] = x
        prefixes = new_prefixes
        nll = np.asarray([c[0] for c in chosen])
        satisfied = np.asarray([c[4] for c in chosen])
        state = state.select(parents)
        streams = [streams[s].fork(r) for (_, s, r, _, _) in chosen]
        n_beams = len(chosen)
        if t < T - 2:
            mu, sigma = model.decode_append(state, prefixes[:, t], t + 1)

    prefixes[:, T - 1] = xT
    # final pick honors bank order, then NLL
    order = sorted(range(n_beams), key=lambda i: (-int(satisfied[i]), nll[i], i))
    return prefixes[order[0]].copy()


def _hits_via(x: np.ndarray, step: int, vp: ViaPoint) -> bool:
    return step <= vp.s and float(np.linalg.norm(np.asarray(x) - vp.x_s)) <= vp.epsilon
