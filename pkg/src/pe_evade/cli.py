"""Command-line entry point: ``pe-evade <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from typing import List, Optional

import numpy as np

from . import __version__
from .campaign import CampaignConfig, featurize, fingerprint_report, harden_campaign, run_campaign, train_target_model
from .corpus import SyntheticCorpusSpec, gen_corpus, holdout_split, load_manifest
from .errors import ConfigError, PeEvadeError
from .features import extract, split_blocks
from .gbdt import GbdtModel, GbdtParams, calibrate_threshold, validation_rows
from .mutations import ActionKind, EngineConfig, mutate_bytes, validity_audit

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise ConfigError(str(exc)) from None


def cmd_gen_corpus(args) -> int:
    if args.benign < 1 or args.malicious < 1:
        raise ConfigError("counts must be >= 1")
    spec = SyntheticCorpusSpec(n_benign=args.benign, n_malicious=args.malicious)
    entries = gen_corpus(spec, args.seed, args.out)
    print(f"wrote {len(entries)} files to {args.out}")
    return EXIT_OK


def _corpus_dataset(corpus: str, holdout: int, seed: int):
    try:
        entries = load_manifest(corpus)
    except OSError as exc:
        raise ConfigError(f"cannot load corpus: {exc}") from None
    if holdout:
        rest, held = holdout_split(entries, holdout, seed)
    else:
        rest, held = entries, []
    return featurize(corpus, rest), [e.id for e in held]


def cmd_model_train(args) -> int:
    data, excluded = _corpus_dataset(args.corpus, args.holdout, args.seed)
    params = GbdtParams(n_rounds=args.rounds, max_depth=args.depth, seed=args.seed)
    model = train_target_model(data, params, args.threshold, args.fpr, excluded)
    model.save(args.out)
    print(json.dumps({"holdout_auc": model.metrics.holdout_auc, "threshold": model.threshold, "trees": len(model.trees)}))
    return EXIT_OK


def cmd_model_score(args) -> int:
    model = GbdtModel.load(args.model)
    for path in args.files:
        s = model.score(extract(_read(path)))
        print(f"{s:.6f}\t{'malicious' if s >= model.threshold else 'benign'}\t{path}")
    return EXIT_OK


def cmd_model_calibrate(args) -> int:
    model = GbdtModel.load(args.model)
    data, _ = _corpus_dataset(args.corpus, 0, 0)
    data = data.subset([i for i, sid in enumerate(data.ids) if sid not in set(model.excluded_ids)])
    _, ho = validation_rows(data, model.params or GbdtParams())
    cal = calibrate_threshold(model, data.subset(ho), args.fpr)
    model.threshold = cal.threshold
    model.save(args.out or args.model)
    print(json.dumps(asdict(cal)))
    return EXIT_OK


def cmd_features(args) -> int:
    vec = extract(_read(args.file))
    print(json.dumps({name: block.tolist() for name, block in split_blocks(vec).items()}, indent=None if args.compact else 1))
    return EXIT_OK


def cmd_mutate(args) -> int:
    try:
        action = ActionKind(args.action)
    except ValueError:
        raise ConfigError(f"unknown action {args.action!r}; choose from {[a.value for a in ActionKind]}") from None
    data = _read(args.file)
    out = mutate_bytes(data, action, np.random.default_rng(args.seed), EngineConfig.from_env())
    with open(args.out, "wb") as f:
        f.write(out)
    report = validity_audit(data, out)
    print(json.dumps({"bytes": len(out), "changed": out != data, "ok": report.ok, **asdict(report)}))
    return EXIT_OK


def cmd_campaign_run(args) -> int:
    config = CampaignConfig.load(args.config) if args.config else CampaignConfig()
    for key in ("corpus", "output", "model", "budget", "holdout", "seed"):
        value = getattr(args, key)
        if value is not None:
            setattr(config, key, value)
    if not config.corpus:
        raise ConfigError("no corpus given")
    out = run_campaign(config)
    with open(os.path.join(out, "report.txt")) as f:
        print(f.read(), end="")
    return EXIT_OK


def cmd_harden(args) -> int:
    report = harden_campaign(args.campaign, args.out)
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_fingerprints(args) -> int:
    report = fingerprint_report(args.evaders, args.corpus, args.threshold)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pe-evade", description="Black-box evasion experiments against static PE classifiers.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic labeled corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--benign", type=int, default=1000)
    g.add_argument("--malicious", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    m = sub.add_parser("model", help="train, score with, or calibrate the target model")
    msub = m.add_subparsers(dest="model_command", required=True)
    t = msub.add_parser("train")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--fpr", type=float, default=None, help="calibrate the threshold to this false positive rate")
    t.add_argument("--threshold", type=float, default=0.9)
    t.add_argument("--holdout", type=int, default=200, help="malicious files withheld for campaigns")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rounds", type=int, default=100)
    t.add_argument("--depth", type=int, default=5)
    t.set_defaults(func=cmd_model_train)
    s = msub.add_parser("score")
    s.add_argument("--model", required=True)
    s.add_argument("files", nargs="+")
    s.set_defaults(func=cmd_model_score)
    c = msub.add_parser("calibrate")
    c.add_argument("--model", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--fpr", type=float, required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_model_calibrate)

    f = sub.add_parser("features", help="print the feature vector as JSON blocks")
    f.add_argument("file")
    f.add_argument("--compact", action="store_true")
    f.set_defaults(func=cmd_features)

    u = sub.add_parser("mutate", help="apply one mutation to a file")
    u.add_argument("file")
    u.add_argument("--action", required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_mutate)

    r = sub.add_parser("campaign", help="agent campaigns")
    rsub = r.add_subparsers(dest="campaign_command", required=True)
    run = rsub.add_parser("run")
    run.add_argument("--config", default=None, help="key = value file")
    run.add_argument("--corpus", default=None)
    run.add_argument("--output", default=None)
    run.add_argument("--model", default=None)
    run.add_argument("--budget", type=int, default=None)
    run.add_argument("--holdout", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.set_defaults(func=cmd_campaign_run)

    h = sub.add_parser("harden", help="retrain a campaign's model on its evaders")
    h.add_argument("--campaign", required=True)
    h.add_argument("--out", default=None)
    h.set_defaults(func=cmd_harden)

    fp = sub.add_parser("fingerprints", help="audit harvested evaders for engine artifacts")
    fp.add_argument("evaders")
    fp.add_argument("--corpus", default=None)
    fp.add_argument("--threshold", type=float, default=0.25)
    fp.set_defaults(func=cmd_fingerprints)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PeEvadeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
