"""Command-line entry point: ``ssnn <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfg
from . import data, oracle
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ContractViolation, ResourceError, ShapeError, UsageError
from .evaluation import REPORT_VERSION, evaluate
from .generative import GenerativeParams, Sequence, sample_sequence
from .inference import InferenceParams
from .training import gradient_audit, train

log = logging.getLogger("ssnn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssnn", description="Segment model with recurrent emissions: train, sample, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", choices=("pendulum", "ssnn"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=data.FORMATS, default="csv")
    _common(p)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _common(p)

    p = sub.add_parser("sample", help="sample sequences from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--format", choices=data.FORMATS, default="csv")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--require-truth", action="store_true")
    p.add_argument("--timing", action="store_true", help="include wall time in the JSON report")
    _common(p)

    p = sub.add_parser("oracle", help="exact log-likelihoods and MAP paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the ELBO gradients")
    for name, default in (("T", 4), ("K", 2), ("M", 2), ("m", 2), ("h", 3), ("e", 3), ("q", 3)):
        p.add_argument(f"--{name}", type=int, default=default)
    p.add_argument("--threshold", type=float, default=1e-4)
    _common(p)
    return parser


def _write_text(path, text: str) -> None:
    data._atomic_write(Path(path), text.encode("utf-8"))


def _states_path(path) -> Path:
    return Path(str(path) + ".states.csv")


def _write_states(path, dataset, states) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq_id", "t", "phi", "omega"])
    for s, st in zip(dataset, states):
        for t, (phi, omega) in enumerate(st):
            w.writerow([s.id, t, f"{phi:.17g}", f"{omega:.17g}"])
    _write_text(_states_path(path), buf.getvalue())


def _read_states(path) -> dict | None:
    side = _states_path(path)
    if not side.exists():
        return None
    rows: dict[str, list] = {}
    with open(side, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            rows.setdefault(row[0], []).append((float(row[2]), float(row[3])))
    return {k: np.array(v) for k, v in rows.items()}


def cmd_gen_data(args, conf: cfg.CliConfig) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "pendulum":
        pc = conf.section("pendulum")
        count = conf.section("pendulum_set").count
        ds, states = data.generate_pendulum_dataset(pc, count, rng)
        data.write_dataset(ds, args.out, args.format)
        _write_states(args.out, ds, states)
    else:
        sc = conf.section("ssnn")
        theta = data.separated_truth_params(sc.K, sc.M, sc.m, sc.h, rng, sc.separation, sc.min_duration)
        ds = data.generate_ssnn_dataset(theta, sc.count, sc.T, rng)
        data.write_dataset(ds, args.out, args.format)
    print(f"wrote {len(ds)} sequences to {args.out}")
    return 0


def cmd_train(args, conf: cfg.CliConfig) -> int:
    tc = conf.section("train")
    tc = replace(tc, seed=args.seed) if "seed" not in conf.values["train"] else tc
    ds = data.read_dataset(args.data).with_statistics()
    norm = ds.normalized()
    rng = np.random.default_rng([tc.seed, 7])
    theta0 = GenerativeParams.initialize(tc.K, tc.M, ds.m, tc.h, rng, tc.self_transitions)
    phi0 = InferenceParams.initialize(tc.K, tc.M, ds.m, tc.e, tc.q, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def snapshot(theta, phi, it, name=None):
        ckpt = Checkpoint(theta, phi, tc.to_dict(), ds.mean, ds.std, it)
        save_checkpoint(out / (name or f"model-{it:06d}.ckpt"), ckpt)

    theta, phi, history = train(norm, theta0, phi0, tc, history_path=out / "history.jsonl", checkpoint=snapshot)
    snapshot(theta, phi, tc.iterations, "model.ckpt")
    last = history.records[-1]["elbo"] if len(history) else float("nan")
    print(f"trained {tc.iterations} iterations; final batch ELBO {last:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def _check_dims(ckpt: Checkpoint, ds) -> None:
    if ds.m != ckpt.theta.m:
        raise ShapeError(f"dataset observation dim m={ds.m} does not match checkpoint m={ckpt.theta.m}")


def _normalize(ckpt: Checkpoint, ds):
    if ckpt.mean is None:
        return ds
    return data.Dataset(ds.sequences, ckpt.mean, ckpt.std).normalized()


def cmd_sample(args, conf: cfg.CliConfig) -> int:
    if args.count < 0 or args.T < 1:
        raise UsageError("--count must be >= 0 and --T >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    seqs = []
    for i in range(args.count):
        s, _ = sample_sequence(ckpt.theta, args.T, rng, f"sample{i:04d}")
        x = s.x if ckpt.mean is None else s.x * ckpt.std + ckpt.mean
        seqs.append(Sequence(s.id, x, s.truth))
    data.write_dataset(data.Dataset(seqs), args.out, args.format)
    print(f"wrote {args.count} sampled sequences to {args.out}")
    return 0


def cmd_eval(args, conf: cfg.CliConfig) -> int:
    ec = conf.section("eval")
    ckpt = load_checkpoint(args.checkpoint)
    ds = data.read_dataset(args.data)
    _check_dims(ckpt, ds)
    states = _read_states(args.data)
    targets = None
    if states is not None:
        targets = {k: np.stack([np.sin(v[:, 0]), np.cos(v[:, 0])], axis=1) for k, v in states.items()}
    report = evaluate(ckpt.theta, ckpt.phi, _normalize(ckpt, ds), samples=ec.samples, seed=args.seed,
                      require_truth=args.require_truth, probe_targets=targets, tau=ec.tau)
    if targets is not None:
        report.r2 = {name: report.r2[f"target{j}"] for j, name in enumerate(("sin_phi", "cos_phi"))}
    if args.out:
        _write_text(args.out, json.dumps(report.to_dict(args.timing), indent=2, sort_keys=True) + "\n")
    sys.stdout.write(report.to_text())
    return 0


def cmd_oracle(args, conf: cfg.CliConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = data.read_dataset(args.data)
    _check_dims(ckpt, ds)
    recs = []
    for s in _normalize(ckpt, ds):
        path = oracle.map_segmentation(s, ckpt.theta)
        recs.append({"id": s.id, "log_likelihood": oracle.exact_log_likelihood(s, ckpt.theta),
                     "map_z": path.z.tolist(), "map_d": path.d.tolist()})
        print(f"{s.id}\tlog_likelihood={recs[-1]['log_likelihood']:.6f}\tsegments={len(path.boundaries())}")
    if args.out:
        _write_text(args.out, json.dumps({"report_version": REPORT_VERSION, "sequences": recs},
                                         indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args, conf: cfg.CliConfig) -> int:
    res = gradient_audit(args.T, args.K, args.M, args.m, args.h, args.e, args.q, seed=args.seed)
    worst = max(res.values())
    for k, v in res.items():
        print(f"{k:<16} max rel. error {v:.3e}")
    print(f"max rel. error {worst:.3e} ({'ok' if worst < args.threshold else 'FAILED'}, threshold {args.threshold:g})")
    return 0 if worst < args.threshold else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "oracle": cmd_oracle, "gradcheck": cmd_gradcheck}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        conf = cfg.load(args.config, args.set)
        return COMMANDS[args.command](args, conf)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ContractViolation, ResourceError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
