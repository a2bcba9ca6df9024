"""Command-line entry point: ``cmdskel <verb> [--key value ...]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CmdError, ParameterError
from .evaluation import (
    ProbeConfig,
    ensemble_scores,
    extract_features,
    knn_eval,
    save_features,
    train_linear_probe,
)
from .skeleton import load_dataset, save_dataset, split_dataset, synth_generate
from .trainer import (
    TrainConfig,
    checkpoint_hash,
    fit,
    load_checkpoint,
    parse_config_values,
    read_config_file,
    scaled_drop_epoch,
    write_config_file,
)

log = logging.getLogger("cmdskel")


class UsageFailure(Exception):
    pass


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmdskel", description="Cross-modal mutual distillation for skeleton sequences.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic labelled dataset")
    g.add_argument("--out", required=True, help="dataset file (training split when --test-out is given)")
    g.add_argument("--test-out", help="also write a held-out split here")
    g.add_argument("--test-per-class", type=int, default=0)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--frames", type=int, default=64)
    g.add_argument("--joints", type=int, default=25)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _add_train_flags(p)

    for verb, text in (("eval-knn", "1-nearest-neighbour accuracy"), ("eval-linear", "linear-probe accuracy")):
        e = sub.add_parser(verb, help=text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--train", required=True, help="labelled training dataset")
        e.add_argument("--test", required=True, help="labelled test dataset")
        e.add_argument("--modality", default="joint", help="modality, or comma list to ensemble (linear only)")
        e.add_argument("--out", default=".", help="directory for result.json and run-manifest.json")
        if verb == "eval-linear":
            e.add_argument("--probe-epochs", type=int, default=80)
            e.add_argument("--probe-lr", type=float, default=0.1)
            e.add_argument("--probe-seed", type=int, default=0)

    x = sub.add_parser("export-features", help="write frozen embeddings as JSON lines")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--modality", default="joint")
    x.add_argument("--out", required=True, help="feature file")

    v = sub.add_parser("verify", help="run the built-in oracle checks")
    v.add_argument("--quick", action="store_true", help="smaller sweeps")
    v.add_argument("--out", help="directory for run-manifest.json")
    return parser


def resolve_config(args) -> tuple[TrainConfig, dict]:
    """Config file values, then explicit flags on top."""
    values: dict[str, str] = {}
    if args.config:
        if not Path(args.config).is_file():
            raise UsageFailure(f"config file not found: {args.config}")
        values.update(read_config_file(args.config))
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    values.update(overrides)
    parsed = parse_config_values(values)
    # a shortened run keeps the drop at the same fraction of training
    if "epochs" in parsed and "lr_drop_epoch" not in parsed:
        parsed["lr_drop_epoch"] = scaled_drop_epoch(parsed["epochs"])
    return TrainConfig(**parsed), {"file": args.config, "overrides": overrides}


def write_manifest(out_dir: Path, verb: str, argv: list[str], extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "cmdskel", "version": __version__, "verb": verb, "argv": argv, **extra}
    with open(out_dir / "run-manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_result(out_dir: Path, result: dict) -> None:
    with open(out_dir / "result.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True)
        fh.write("\n")


def cmd_gen_synth(args, argv) -> int:
    seqs = synth_generate(
        args.classes, args.per_class + args.test_per_class, T=args.frames, J=args.joints,
        noise=args.noise, rng_seed=args.seed,
    )  # fmt: skip
    if args.test_out:
        train, test = split_dataset(seqs, args.test_per_class, rng_seed=args.seed)
        save_dataset(args.test_out, test, joints=args.joints)
    else:
        train = seqs
    save_dataset(args.out, train, joints=args.joints)
    write_manifest(Path(args.out).parent, "gen-synth", argv, {"params": {k: v for k, v in vars(args).items() if k != "verb"}})
    print(f"wrote {len(train)} sequences to {args.out}")
    return 0


def cmd_pretrain(args, argv) -> int:
    cfg, provenance = resolve_config(args)
    out = Path(args.out)
    data = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    write_manifest(out, "pretrain", argv, {"config": cfg.to_dict(), "config_hash": cfg.hash(), "source": provenance})
    write_config_file(out / "config.txt", cfg)
    state, rows = fit(cfg, data, out_dir=out, resume=resume)
    last = rows[-1]["loss_total"] if rows else float("nan")
    print(f"trained {state.epoch} epochs ({state.step} steps); final loss {last:.4f}; checkpoint {out / 'checkpoint'}")
    return 0


def _modalities(arg: str) -> list[str]:
    mods = [m.strip() for m in arg.split(",") if m.strip()]
    if not mods:
        raise UsageFailure("--modality is empty")
    return mods


def cmd_eval(args, argv, protocol: str) -> int:
    state = load_checkpoint(args.checkpoint)
    train = load_dataset(args.train)
    test = load_dataset(args.test)
    mods = _modalities(args.modality)
    if protocol == "knn" and len(mods) != 1:
        raise UsageFailure("eval-knn takes a single --modality")
    out = Path(args.out)
    extra: dict = {}
    if protocol == "knn":
        top1 = knn_eval(extract_features(state, train, mods[0]), extract_features(state, test, mods[0]))
    else:
        pcfg = ProbeConfig(epochs=args.probe_epochs, lr=args.probe_lr, seed=args.probe_seed)
        results = {}
        for m in mods:
            tr = extract_features(state, train, m)
            te = extract_features(state, test, m)
            results[m] = (train_linear_probe(tr, te, pcfg), te.labels)
        if len(mods) == 1:
            top1 = results[mods[0]][0].top1
        else:
            pred = ensemble_scores([r.scores for r, _ in results.values()], [lab for _, lab in results.values()])
            top1 = float(np.mean(pred == next(iter(results.values()))[1]))
            extra["per_modality"] = {m: r.top1 for m, (r, _) in results.items()}
    result = {
        "protocol": protocol,
        "modality": "+".join(mods),
        "top1": top1,
        "n_test": len(test),
        "checkpoint": checkpoint_hash(args.checkpoint),
        **extra,
    }
    write_manifest(out, f"eval-{protocol}", argv, {"config": state.config.to_dict()})
    write_result(out, result)
    print(f"{protocol} top-1 ({result['modality']}): {top1:.4f}")
    return 0


def cmd_export(args, argv) -> int:
    state = load_checkpoint(args.checkpoint)
    fs = extract_features(state, load_dataset(args.data), args.modality)
    save_features(args.out, fs)
    write_manifest(Path(args.out).parent, "export-features", argv, {"modality": args.modality})
    print(f"wrote {len(fs)} {fs.dim}-d features to {args.out}")
    return 0


def cmd_verify(args, argv) -> int:
    from .verify import run_all

    checks = run_all(quick=args.quick)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if args.out:
        write_manifest(Path(args.out), "verify", argv, {"passed": not failed})
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "gen-synth":
            return cmd_gen_synth(args, argv)
        if args.verb == "pretrain":
            return cmd_pretrain(args, argv)
        if args.verb == "eval-knn":
            return cmd_eval(args, argv, "knn")
        if args.verb == "eval-linear":
            return cmd_eval(args, argv, "linear")
        if args.verb == "export-features":
            return cmd_export(args, argv)
        return cmd_verify(args, argv)
    except (UsageFailure, ParameterError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cmdskel: error: {exc}", file=sys.stderr)
        return 2
    except (CmdError, OSError) as exc:
        print(f"cmdskel: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
