"""Desk-scale training experiment: 2D point-mass, criterion-2 sized run.

Usage: python3 scripts/desk_experiment.py OUT_DIR [--xi-kl 8] [--eta 0.01]
       [--epochs 120] [--seed 0] [--n-train 2000]
Prints per-epoch progress and final fidelity/diversity metrics.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from motiongen.datagen import SimConfig, generate_dataset
from motiongen.model import Model, ModelConfig
from motiongen.tensor import RngStream
from motiongen.training import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--xi-kl", type=float, default=8.0)
    ap.add_argument("--eta", type=float, default=0.01)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--patience", type=int, default=1000)
    ap.add_argument("--input-noise", type=float, default=0.01)
    ap.add_argument("--token-dropout", type=float, default=0.0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    sim = SimConfig(seed=11)
    split = generate_dataset(sim, args.n_train, 256, 256)
    print(f"datagen: {time.perf_counter() - t0:.1f}s", flush=True)

    mcfg = ModelConfig(d=2, T=64, K=32, m=16, embed_dim=16, encoder_depth=3,
                       encoder_heads=4, decoder_layers=4, decoder_heads=4)
    model = Model(mcfg, seed=0)
    tcfg = TrainConfig(xi_kl=args.xi_kl, eta=args.eta, epochs=args.epochs,
                       seed=args.seed, checkpoint_every_steps=0, patience=args.patience,
                       input_noise_frac=args.input_noise, token_dropout=args.token_dropout)
    t0 = time.perf_counter()
    res = train(model, split.train, split.val, tcfg, args.out_dir)
    mins = (time.perf_counter() - t0) / 60
    print(f"train: {mins:.1f} min", res, flush=True)

    ev = evaluate(model, split.val[:128], RngStream(123))
    diam = float(np.sqrt(2.0))
    gaps = np.array(ev.pop("goal_gaps"))
    print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in ev.items()})
    print(f"recon_path/diam: {ev['recon_path_dist']/diam:.4f} (need < 0.05)")
    print(f"goal-gap within 10% diam: {(gaps < 0.1 * diam).mean():.3f} (need >= 0.90)")
    print(f"diversity ok: {ev['prior_path_dist'] >= ev['recon_path_dist']}")


if __name__ == "__main__":
    main()
