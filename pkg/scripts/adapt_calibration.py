"""Probe the adaptation acceptance targets against a trained checkpoint.

Usage: python3 scripts/adapt_calibration.py CHECKPOINT [--n 30]
Reports bound binding tightness, via hit rates, CBS-vs-bridge NLL, and
obstacle clearance so acceptance parameters can be pinned with evidence.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from motiongen.adapt import (
    AccelBound,
    SphereObstacle,
    VelocityBound,
    ViaPoint,
    adapt_rollout,
    beam_search,
    constrained_beam_search,
)
from motiongen.checkpoint import load_checkpoint
from motiongen.datagen import SimConfig, generate_dataset
from motiongen.tensor import RngStream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("--n", type=int, default=30)
    ap.add_argument("--temp3", type=float, default=0.35)
    args = ap.parse_args()

    model, extra, _ = load_checkpoint(args.checkpoint)
    split = generate_dataset(SimConfig(seed=11), 4, max(args.n, 32), 4)
    vals = split.val
    dt = 0.25
    diam = float(np.sqrt(2))
    rng = RngStream(31)

    # --- criterion 3 probe: bound binding tightness
    v_lim, a_lim = 0.05, 0.02
    bounds = [VelocityBound(np.full(2, -v_lim), np.full(2, v_lim), dt),
              AccelBound(np.full(2, -a_lim), np.full(2, a_lim), dt)]
    base_v = base_a = ad_v = ad_a = 0.0
    infeasible = 0
    for i in range(args.n):
        tr = vals[i % len(vals)]
        g = model.prior(tr.start, tr.goal) if i % 2 == 0 else model.encode(tr)
        z = g.mu + g.sigma * rng.fork(i).normal(g.mu.shape, dtype=np.float64)
        pts = model.rollout(tr.start, tr.goal, z, rng=rng.fork(900 + i), temperature=args.temp3)
        v = np.abs(np.diff(pts[:63], axis=0)) / dt
        a = np.abs(np.diff(pts[:63], axis=0, n=2)) / dt**2
        base_v, base_a = max(base_v, v.max()), max(base_a, a.max())
        try:
            pts = adapt_rollout(model, tr.start, tr.goal, z, bounds, rng.fork(1900 + i),
                                temperature=args.temp3)
            v = np.abs(np.diff(pts[:63], axis=0)) / dt
            a = np.abs(np.diff(pts[:63], axis=0, n=2)) / dt**2
            ad_v, ad_a = max(ad_v, v.max()), max(ad_a, a.max())
        except Exception as exc:
            infeasible += 1
    print(f"[c3] temp {args.temp3}: baseline v {base_v:.4f} a {base_a:.4f}; adapted "
          f"v gap {v_lim - ad_v:.2e} a gap {a_lim - ad_a:.2e}; infeasible {infeasible}/{args.n}")

    # --- criterion 5 probe: via hit rate
    hits = 0
    for i in range(args.n):
        tr = vals[i % len(vals)]
        s = (16, 32, 48)[i % 3]
        x_s = np.clip(tr.points[s - 1] + 0.25 * (rng.fork(50_000 + i).uniform((2,), dtype=np.float64) - 0.5), 0, 1)
        vp = ViaPoint(s=s, x_s=x_s, sigma_vp=0.02, mode="bridge")
        g = model.prior(tr.start, tr.goal)
        z = g.mu + g.sigma * rng.fork(60_000 + i).normal(g.mu.shape, dtype=np.float64)
        pts = adapt_rollout(model, tr.start, tr.goal, z, [vp], rng.fork(70_000 + i), temperature=1.0)
        if np.linalg.norm(pts[s - 1] - x_s) <= 3 * 0.02:
            hits += 1
    print(f"[c5] via hit rate {hits}/{args.n}")

    # --- criterion 6 probe: CBS vs bridge NLL
    nb, nc, sb, sc = [], [], 0, 0
    t0 = time.perf_counter()
    for i in range(args.n):
        tr = vals[i % len(vals)]
        x_s = np.clip(tr.points[31] + 0.2 * (rng.fork(80_000 + i).uniform((2,), dtype=np.float64) - 0.5), 0, 1)
        vp = ViaPoint(s=32, x_s=x_s, sigma_vp=0.02, mode="bridge")
        g = model.prior(tr.start, tr.goal)
        z = g.mu + g.sigma * rng.fork(90_000 + i).normal(g.mu.shape, dtype=np.float64)
        bp = adapt_rollout(model, tr.start, tr.goal, z, [vp], rng.fork(100_000 + i), temperature=1.0)
        cp = constrained_beam_search(model, tr.start, tr.goal, z, vp, S=5,
                                     rng=rng.fork(110_000 + i), temperature=1.0)
        nb.append(-model.log_likelihood(bp, tr.start, tr.goal, z))
        nc.append(-model.log_likelihood(cp, tr.start, tr.goal, z))
        if np.linalg.norm(bp[:32] - x_s, axis=1).min() <= 0.06:
            sb += 1
        if np.linalg.norm(cp[:32] - x_s, axis=1).min() <= 0.06:
            sc += 1
    print(f"[c6] NLL bridge {np.mean(nb):.1f} cbs {np.mean(nc):.1f}; sat bridge {sb}/{args.n} "
          f"cbs {sc}/{args.n}; {time.perf_counter()-t0:.1f}s")

    # --- criterion 7 probe: obstacle clearance
    delta = 0.1 * diam
    clear = 0
    t0 = time.perf_counter()
    for i in range(args.n):
        u = rng.fork(120_000 + i)
        x1 = 0.05 + 0.25 * u.uniform((2,), dtype=np.float64)
        xT = 0.70 + 0.25 * u.uniform((2,), dtype=np.float64)
        center = 0.5 * (x1 + xT)
        ob = SphereObstacle(center=center, radius=delta, weight=500.0)
        g = model.prior(x1, xT)
        z = g.mu + g.sigma * u.normal(g.mu.shape, dtype=np.float64)
        res = beam_search(model, x1, xT, z, [ob], S=25, temperature=2.0, rng=rng.fork(130_000 + i))
        if np.linalg.norm(res.points - center, axis=1).min() >= delta:
            clear += 1
    print(f"[c7] clearance {clear}/{args.n}; {time.perf_counter()-t0:.1f}s")


if __name__ == "__main__":
    main()
