"""Operator CLI: gen-data, train, eval, sample, adapt, serve.

Every run writes a manifest.json (resolved config, seed, output hashes)
next to its outputs and never writes outside its --out directory.
Exit codes: 0 success, 2 config error, 3 infeasible constraint,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    InfeasibleConstraintError,
    SphereObstacle,
    ViaPoint,
    adapt_rollout,
    beam_search,
    constrained_beam_search,
    parse_constraints,
)
from .checkpoint import CheckpointError, load_checkpoint
from .datagen import SimConfig, generate_dataset
from .model import Model
from .profiles import resolve_profile
from .tensor import NumericError, RngStream
from .trajectory import DatasetFormatError, DatasetMeta, Trajectory, read_dataset, write_dataset
from .training import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _merge(dc, overrides: dict):
    """dataclasses.replace with unknown-key validation."""
    names = {f.name for f in dataclasses.fields(dc)}
    bad = set(overrides) - names
    if bad:
        raise CliError(f"unknown config keys for {type(dc).__name__}: {sorted(bad)}")
    return dataclasses.replace(dc, **overrides)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed,
                    unhashed: tuple = ()) -> None:
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            rel = str(p.relative_to(out_dir))
            outputs[rel] = None if rel in unhashed else _sha256(p)
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "outputs": outputs,
        "unhashed": list(unhashed),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_point(text: str, d: int, name: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise CliError(f"bad {name} {text!r}: {exc}") from exc
    if len(vals) != d:
        raise CliError(f"{name} must have {d} components, got {len(vals)}")
    return np.asarray(vals)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    profile = resolve_profile(args.profile)
    file_cfg = _load_config_file(args.config)
    sim = _merge(profile["sim"], file_cfg.get("sim", {}))
    if args.seed is not None:
        sim = dataclasses.replace(sim, seed=args.seed)
    n_train, n_val, n_test = profile["splits"]
    n_train = args.n_train or file_cfg.get("n_train", n_train)
    n_val = args.n_val or file_cfg.get("n_val", n_val)
    n_test = args.n_test or file_cfg.get("n_test", n_test)

    out = _prepare_out(args.out, args.force)
    generate_dataset(sim, n_train, n_val, n_test, out_dir=out)
    _write_manifest(out, "gen-data", {"sim": dataclasses.asdict(sim),
                                      "splits": [n_train, n_val, n_test]}, sim.seed)
    print(f"wrote {n_train}/{n_val}/{n_test} records to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    profile = resolve_profile(args.profile)
    file_cfg = _load_config_file(args.config)
    mcfg = _merge(profile["model"], file_cfg.get("model", {}))
    tcfg = _merge(profile["train"], file_cfg.get("train", {}))
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)

    data_dir = Path(args.data)
    try:
        train_trajs, meta = read_dataset(data_dir / "train.jsonl")
        val_trajs, _ = read_dataset(data_dir / "val.jsonl")
    except (OSError, DatasetFormatError) as exc:
        raise CliError(f"cannot load dataset: {exc}") from exc
    if meta.d != mcfg.d or meta.T != mcfg.T:
        raise CliError(
            f"dataset (d={meta.d}, T={meta.T}) does not match model config "
            f"(d={mcfg.d}, T={mcfg.T})"
        )

    out = _prepare_out(args.out, args.force)
    model = Model(mcfg, seed=tcfg.seed)
    if args.resume:
        resume_from = Path(args.resume)
    else:
        resume_from = None
    data_meta = {"space": meta.space, "d": meta.d, "T": meta.T, "dt": meta.dt,
                 "robots": meta.robots}
    result = train(model, train_trajs, val_trajs, tcfg, out, resume_from=resume_from,
                   quiet=args.quiet, data_meta=data_meta)
    data_hashes = {name: _sha256(data_dir / name) for name in ("train.jsonl", "val.jsonl")}
    _write_manifest(out, "train", {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                                   "data": data_hashes},
                    tcfg.seed, unhashed=("metrics.jsonl",))
    print(f"finished at step {result.get('step')} rec_nll {result.get('rec_nll'):.2f}")
    return EXIT_OK


def _load_model(path) -> tuple[Model, dict]:
    try:
        model, extra, _ = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc
    meta = extra.get("data_meta") or {}
    if not meta:
        meta = {"space": "cartesian", "d": model.cfg.d, "T": model.cfg.T, "dt": 0.25,
                "robots": []}
    return model, meta


def cmd_sample(args) -> int:
    model, meta = _load_model(args.checkpoint)
    d = model.cfg.d
    x1 = _parse_point(args.start, d, "--start")
    xT = _parse_point(args.goal, d, "--goal")
    root = RngStream(args.seed)
    trajs = []
    for i in range(args.n):
        g = model.prior(x1, xT)
        z = g.mu + g.sigma * root.fork(i).normal(g.mu.shape, dtype=np.float64)
        pts = model.rollout(x1, xT, z, rng=root.fork(1000 + i), temperature=args.temperature)
        trajs.append(Trajectory(pts, dt=meta["dt"], space=meta["space"], robot="sample"))

    out = _prepare_out(args.out, args.force)
    dmeta = DatasetMeta(space=meta["space"], d=d, T=model.cfg.T, dt=meta["dt"],
                        robots=["sample"])
    write_dataset(out / "samples.jsonl", trajs, dmeta)
    _write_manifest(out, "sample", {"start": x1.tolist(), "goal": xT.tolist(),
                                    "n": args.n, "temperature": args.temperature},
                    args.seed)
    print(f"wrote {args.n} samples to {out / 'samples.jsonl'}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    if args.beam_size is None:
        args.beam_size = 25 if args.method == "beam" else 5
    if args.temperature is None:
        args.temperature = 2.0 if args.method == "beam" else 1.0
    model, meta = _load_model(args.checkpoint)
    d = model.cfg.d
    try:
        items = json.loads(Path(args.constraints).read_text())
        constraints = parse_constraints(items, d=d, dt=meta["dt"])
    except (OSError, ValueError) as exc:
        raise CliError(f"constraint file invalid: {exc}") from exc

    root = RngStream(args.seed)
    if args.demo:
        try:
            demos, _ = read_dataset(args.demo)
        except (OSError, DatasetFormatError) as exc:
            raise CliError(f"cannot read demo file: {exc}") from exc
        if not 0 <= args.demo_index < len(demos):
            raise CliError(f"--demo-index {args.demo_index} out of range")
        demo = demos[args.demo_index]
        x1, xT = demo.start, demo.goal
        g = model.encode(demo)
        z = g.mu + g.sigma * root.fork(0).normal(g.mu.shape, dtype=np.float64)
    else:
        if not (args.start and args.goal):
            raise CliError("--start and --goal are required without --demo")
        x1 = _parse_point(args.start, d, "--start")
        xT = _parse_point(args.goal, d, "--goal")
        g = model.prior(x1, xT)
        z = g.mu + g.sigma * root.fork(0).normal(g.mu.shape, dtype=np.float64)

    rng = root.fork(1)
    if args.method == "bridge":
        if any(isinstance(c, SphereObstacle) for c in constraints):
            raise CliError("obstacle constraints need --method beam")
        pts = adapt_rollout(model, x1, xT, z, constraints, rng,
                            temperature=args.temperature)
    elif args.method == "beam":
        res = beam_search(model, x1, xT, z, constraints, S=args.beam_size,
                          temperature=args.temperature, rng=rng)
        pts = res.points
    else:  # cbs
        vias = sorted((c for c in constraints if isinstance(c, ViaPoint)), key=lambda v: v.s)
        if not vias:
            raise CliError("--method cbs requires a via constraint")
        extra = [c for c in constraints if not isinstance(c, (ViaPoint, SphereObstacle))]
        pts = constrained_beam_search(model, x1, xT, z, vias[0], S=args.beam_size,
                                      temperature=args.temperature, rng=rng,
                                      extra_constraints=extra)

    out = _prepare_out(args.out, args.force)
    dmeta = DatasetMeta(space=meta["space"], d=d, T=model.cfg.T, dt=meta["dt"],
                        robots=["adapted"])
    write_dataset(out / "adapted.jsonl",
                  [Trajectory(pts, dt=meta["dt"], space=meta["space"], robot="adapted")],
                  dmeta)
    _write_manifest(out, "adapt", {"method": args.method, "constraints": items,
                                   "beam_size": args.beam_size,
                                   "temperature": args.temperature},
                    args.seed)
    print(f"wrote adapted trajectory to {out / 'adapted.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    try:
        trajs, dmeta = read_dataset(args.dataset)
    except (OSError, DatasetFormatError) as exc:
        raise CliError(f"cannot read dataset: {exc}") from exc
    if dmeta.space != meta["space"] or dmeta.d != model.cfg.d:
        raise CliError(f"dataset space/d ({dmeta.space}, {dmeta.d}) does not match model")
    if args.limit:
        trajs = trajs[: args.limit]
    metrics = evaluate(model, trajs, RngStream(args.seed), n_prior_samples=args.n_samples)
    metrics.pop("goal_gaps", None)
    metrics.pop("prior_goal_gap_frac_within", None)
    unit = "deg" if metrics["space"] == "joint" else "m"

    out = _prepare_out(args.out, args.force)
    table = out / "eval.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "unit"])
        for key in ("recon_path_dist", "recon_end_dist", "prior_path_dist",
                    "prior_end_dist", "prior_goal_gap_mean"):
            w.writerow([key, f"{metrics[key]:.6f}", unit])
        w.writerow(["n", metrics["n"], ""])
        w.writerow(["space", metrics["space"], ""])
    _write_manifest(out, "eval", {"dataset": str(args.dataset), "n_samples": args.n_samples},
                    args.seed)
    print(table.read_text())
    return EXIT_OK


def cmd_serve(args) -> int:
    from .serve import run_server

    model, meta = _load_model(args.checkpoint)
    host, _, port = args.bind.rpartition(":")
    try:
        port = int(port)
    except ValueError as exc:
        raise CliError(f"bad --bind {args.bind!r}") from exc
    run_server(model, meta, host or "127.0.0.1", port, ws_port=args.ws_port,
               rate=args.rate, max_sessions=args.max_sessions,
               candidates=args.candidates)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motiongen",
                                description="trajectory generation and adaptation engine")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic demonstration dataset")
    g.add_argument("--profile", default="desk")
    g.add_argument("--config", help="JSON config overrides")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="directory with train/val .jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--profile", default="desk")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample trajectories from the endpoint prior")
    s.add_argument("checkpoint")
    s.add_argument("--start", required=True, help="comma-separated coordinates")
    s.add_argument("--goal", required=True)
    s.add_argument("--n", type=int, default=5)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_sample)

    a = sub.add_parser("adapt", help="generate under constraints")
    a.add_argument("checkpoint")
    a.add_argument("--constraints", required=True, help="JSON constraint array")
    a.add_argument("--method", choices=("bridge", "cbs", "beam"), default="bridge")
    a.add_argument("--demo", help="dataset file with a demonstration to imitate")
    a.add_argument("--demo-index", type=int, default=0)
    a.add_argument("--start")
    a.add_argument("--goal")
    a.add_argument("--beam-size", type=int, default=None,
                   help="default 25 for beam, 5 for cbs")
    a.add_argument("--temperature", type=float, default=None,
                   help="default 2.0 for beam, 1.0 otherwise")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_adapt)

    e = sub.add_parser("eval", help="fidelity/diversity metrics on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out", required=True)
    e.add_argument("--n-samples", type=int, default=1)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("serve", help="stream setpoints over the NDJSON protocol")
    v.add_argument("checkpoint")
    v.add_argument("--bind", default="127.0.0.1:7071")
    v.add_argument("--ws-port", type=int, default=0, help="optional WebSocket mirror port")
    v.add_argument("--rate", type=float, default=20.0, help="setpoints per second")
    v.add_argument("--max-sessions", type=int, default=8)
    v.add_argument("--candidates", type=int, default=16,
                   help="per-step candidate draws while obstacles are active")
    v.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InfeasibleConstraintError as exc:
        print(f"infeasible constraint: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
