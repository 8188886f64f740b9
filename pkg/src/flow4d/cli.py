"""Command-line entry point: ``flow4d {gen-data,train,eval,reconstruct,ablate}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Any ``--section.key
value`` flag overrides the resolved config (defaults < --config file < flags).
Relative data paths that do not exist are looked up under ``$F4D_CACHE``.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import Config, load_config
from .synthetic import SHAPES, generate_dataset, load_dataset, load_sequence, save_dataset

log = logging.getLogger("flow4d")

MANIFEST = "manifest.json"
LIST_KEYS = ("fusion.mode", "loss.flow_variant", "loss.directions")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def resolve_data_path(path: str | Path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    cache = os.environ.get("F4D_CACHE")
    if cache and (Path(cache) / p).exists():
        return Path(cache) / p
    return p


def parse_overrides(extra: Sequence[str], list_keys: Sequence[str] = ()) -> dict[str, Any]:
    """``--a.b value`` / ``--a.b=value`` pairs -> {"a.b": value}."""
    out: dict[str, Any] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        out[key] = value.split(",") if key in list_keys else value
    return out


def build_config(args, overrides: dict[str, Any]) -> Config:
    try:
        config = load_config(args.config)
        flat = dict(overrides)
        if getattr(args, "seed", None) is not None:
            flat.setdefault("train.seed", args.seed)
            flat.setdefault("eval.seed", args.seed)
        return config.with_overrides(flat)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def prepare_out(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(p.name != MANIFEST for p in out.iterdir()) and not force:
        raise UsageError(f"refusing to overwrite {out}; pass --force")
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_test"
    probe.write_text("")
    probe.unlink()
    return out


def _git_commit() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return res.stdout.strip() or None if res.returncode == 0 else None
    except (OSError, subprocess.SubprocessError):
        return None


def content_hash(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: Sequence[str], config: dict | None, seed: int | None,
                   started: float, artifacts: Sequence[Path]) -> Path:
    """Append this run to the directory's single manifest."""
    path = out / MANIFEST
    doc = json.loads(path.read_text()) if path.exists() else {"runs": []}
    files = [p for p in artifacts if p.is_file()]
    doc["runs"].append({
        "command": command, "argv": list(argv), "config": config, "seed": seed,
        "version": __version__, "git_commit": _git_commit(), "content_hash": content_hash(files),
        "started": dt.datetime.fromtimestamp(started, dt.timezone.utc).isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "artifacts": [str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in artifacts],
    })
    path.write_text(json.dumps(doc, indent=2))
    return path


def _load_sequences(path: str | Path):
    p = resolve_data_path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return [load_sequence(p)] if p.is_file() else load_dataset(p)


def _split(sequences, fraction: float, seed: int):
    if len(sequences) < 2 or fraction <= 0:
        return list(sequences), list(sequences)
    order = np.random.default_rng(seed).permutation(len(sequences))
    n_val = max(1, int(round(fraction * len(sequences))))
    val = [sequences[i] for i in sorted(order[:n_val])]
    train = [sequences[i] for i in sorted(order[n_val:])]
    return train, val


def _parse_res(text: str) -> tuple[int, int]:
    try:
        start, steps = (text.lower().split("x") + ["0"])[:2]
        return int(start), int(steps)
    except ValueError as exc:
        raise UsageError(f"--res expects START x STEPS like 32x2, got {text!r}") from exc


def _checkpoint_path(path: str | Path) -> Path:
    p = Path(path)
    if p.is_dir():
        for name in ("best.ckpt", "last.ckpt"):
            if (p / name).exists():
                return p / name
        raise FileNotFoundError(f"no checkpoint in {p}")
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _load_predictor(checkpoint):
    from .model import ModelPredictor
    from .trainer import Trainer

    trainer = Trainer.from_checkpoint(_checkpoint_path(checkpoint))
    return trainer, ModelPredictor(trainer.model)


def _export_flows(out: Path, prediction, stem: str) -> list[Path]:
    from .geometry import write_ply

    paths = []
    seq = prediction.sequence
    for t in range(seq.n_frames - 1):
        p = out / f"{stem}flow_{t:04d}.ply"
        write_ply(p, points=seq.points[t], vectors=prediction.flows[t])
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, overrides, argv) -> int:
    started = time.time()
    kinds = list(SHAPES) if args.shapes == "all" else [k.strip() for k in args.shapes.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in SHAPES]
    if unknown:
        raise UsageError(f"unknown shape kinds {unknown}; choose from {sorted(SHAPES)} or 'all'")
    out_arg = args.out
    if out_arg is None:
        cache = os.environ.get("F4D_CACHE")
        if not cache:
            raise UsageError("--out is required when F4D_CACHE is unset")
        out_arg = Path(cache) / f"dataset_seed{args.seed}"
    out = prepare_out(out_arg, args.force)
    for p in out.glob("*.f4d"):
        p.unlink()
        p.with_suffix(".json").unlink(missing_ok=True)
    seqs = generate_dataset(kinds, args.seqs, args.T, args.n, args.seed, args.temporal, args.noise)
    paths = save_dataset(out, seqs)
    artifacts = paths + [p.with_suffix(".json") for p in paths]
    settings = {"kinds": kinds, "n_per_kind": args.seqs, "n_frames": args.T, "n_points": args.n,
                "temporal_mode": args.temporal, "noise_sigma": args.noise, "seed": args.seed}
    write_manifest(out, "gen-data", argv, settings, args.seed, started, artifacts)
    print(f"wrote {len(paths)} sequences to {out}")
    return 0


def cmd_train(args, overrides, argv) -> int:
    from .trainer import Trainer

    started = time.time()
    config = build_config(args, overrides)
    sequences = _load_sequences(args.data)
    out = prepare_out(args.out, args.force)
    if args.val_data:
        train_set, val_set = sequences, _load_sequences(args.val_data)
    else:
        train_set, val_set = _split(sequences, config.data.val_fraction, config.train.seed)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    trainer = Trainer(config, out_dir=out)
    if args.resume:
        trainer.load(_checkpoint_path(args.resume))
    logging.getLogger("flow4d").info("training on %d sequences, validating on %d", len(train_set), len(val_set))
    state = trainer.fit(train_set, val_set if not args.no_val else None)
    best = {"best_iteration": state.best_iteration,
            "best_iou": state.best_iou if np.isfinite(state.best_iou) else None,
            "checkpoint": "best.ckpt", "history": state.history}
    (out / "best.json").write_text(json.dumps(best, indent=2))
    artifacts = [out / n for n in ("config.json", "train_log.jsonl", "last.ckpt", "best.ckpt", "best.json")]
    write_manifest(out, "train", argv, config.to_dict(), config.train.seed, started, artifacts)
    print(f"trained {state.iteration} iterations; checkpoints in {out}")
    return 0


def cmd_eval(args, overrides, argv) -> int:
    from .evaluation import STUDY_COLUMNS, evaluate_predictor, resolution_study, write_reports, write_table

    started = time.time()
    trainer, predictor = _load_predictor(args.checkpoint)
    config = trainer.config.with_overrides(overrides) if overrides else trainer.config
    out = prepare_out(args.out, args.force)
    ex, ev = config.extraction, config.eval
    start_res, steps = _parse_res(args.res) if args.res else (ex.start_res, ex.upsample_steps)
    tau = args.tau if args.tau is not None else ex.tau
    n_samples = args.n_samples or ev.n_samples
    seed = args.seed if args.seed is not None else ev.seed
    artifacts: list[Path] = []
    if args.resolution_study:
        rows = resolution_study(predictor, args.resolution_study, seed=seed, tau=tau, n_frames=args.T)
        artifacts += list(write_table(out, "resolution_study", rows, STUDY_COLUMNS))
    else:
        reports = []
        for seq in _load_sequences(args.data):
            report, _ = evaluate_predictor(predictor, seq, tau, start_res, steps, n_samples, ev.iou_samples, seed)
            reports.append(report)
            if args.flow_export:
                artifacts += _export_flows(out, predictor(seq), f"{seq.name}_")
        write_reports(out, reports, {"checkpoint": str(args.checkpoint)})
        artifacts += [out / "metrics.json", out / "metrics.csv"]
        print(json.dumps(json.loads((out / "metrics.json").read_text())["mean"], indent=2))
    write_manifest(out, "eval", argv, config.to_dict(), seed, started, artifacts)
    return 0


def cmd_reconstruct(args, overrides, argv) -> int:
    from .extraction import extract_sequence
    from .geometry import write_obj, write_ply

    started = time.time()
    trainer, predictor = _load_predictor(args.checkpoint)
    config = trainer.config.with_overrides(overrides) if overrides else trainer.config
    start_res, steps = _parse_res(args.res) if args.res else (config.extraction.start_res,
                                                               config.extraction.upsample_steps)
    tau = args.tau if args.tau is not None else config.extraction.tau
    seqs = _load_sequences(args.sequence)
    if len(seqs) != 1:
        raise UsageError("--sequence must name a single sequence file")
    out = prepare_out(args.out, args.force)
    prediction = predictor(seqs[0])
    meshes = extract_sequence(prediction, tau, start_res, steps)
    artifacts = []
    for t, mesh in enumerate(meshes):
        p = out / f"frame_{t:04d}.{args.format}"
        (write_obj if args.format == "obj" else write_ply)(p, mesh)
        artifacts.append(p)
    if args.flow_export:
        artifacts += _export_flows(out, prediction, "")
    write_manifest(out, "reconstruct", argv, config.to_dict(), None, started, artifacts)
    print(f"wrote {len(meshes)} meshes to {out}")
    return 0


def cmd_ablate(args, overrides, argv) -> int:
    from .experiments import ablation_cells, format_table, run_ablation
    from .fusion import FUSION_MODES
    from .losses import DIRECTIONS

    started = time.time()
    lists = {k: overrides.pop(k) for k in LIST_KEYS if k in overrides}
    config = build_config(args, overrides)
    cells = ablation_cells(lists.get("fusion.mode", FUSION_MODES), lists.get("loss.flow_variant", ["chamfer"]),
                           lists.get("loss.directions", DIRECTIONS))
    for cell in cells:  # validate up front so typos are usage errors
        build_config(args, {**overrides, **cell})
    sequences = _load_sequences(args.data)
    out = prepare_out(args.out, args.force)
    train_set, val_set = _split(sequences, config.data.val_fraction, config.train.seed)
    rows = run_ablation(config, train_set, val_set, cells, out, args.max_iters)
    print(format_table(rows))
    artifacts = [out / "ablation.json", out / "ablation.csv"]
    write_manifest(out, "ablate", argv, config.to_dict(), config.train.seed, started, artifacts)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flow4d", description="Joint 4D reconstruction and flow estimation on point cloud sequences.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--shapes", default="all", help="'all' or comma-separated kinds")
    g.add_argument("--seqs", type=int, default=20, help="sequences per shape kind")
    g.add_argument("--T", type=int, default=8, help="frames per sequence")
    g.add_argument("--n", type=int, default=300, help="points per frame")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temporal", choices=["even", "uneven"], default="even")
    g.add_argument("--noise", type=float, default=0.005, help="Gaussian noise sigma on points")
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--no-val", action="store_true", help="skip periodic validation")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float)
    e.add_argument("--res", help="MISE start resolution and steps, e.g. 32x2")
    e.add_argument("--n-samples", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--flow-export", action="store_true", help="write per-frame flow PLYs")
    e.add_argument("--resolution-study", metavar="KIND", help="run the point-count x temporal-mode study")
    e.add_argument("--T", type=int, default=8, help="frames per sequence in the resolution study")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reconstruct", help="extract per-frame meshes")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--sequence", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tau", type=float)
    r.add_argument("--res", help="MISE start resolution and steps, e.g. 32x2")
    r.add_argument("--format", choices=["obj", "ply"], default="obj")
    r.add_argument("--flow-export", action="store_true")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    a = sub.add_parser("ablate", help="run the ablation matrix")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--max-iters", type=int)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        list_keys = LIST_KEYS if args.command == "ablate" else ()
        overrides = parse_overrides(extra, list_keys)
        if args.command == "gen-data" and overrides:
            raise UsageError("gen-data takes no config overrides")
        if args.command == "eval" and not args.resolution_study and not args.data:
            raise UsageError("eval needs --data or --resolution-study")
        return args.func(args, overrides, argv)
    except UsageError as exc:
        print(f"flow4d {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"flow4d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
