"""Command-line interface: the full pipeline and its individual stages.

Exit codes: 0 on success, 2 on configuration errors, 3 on stage failures.
The config file is authoritative; repeated --set KEY=VALUE flags override
individual keys.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import training as tr
from .attacks import AttackSpec, pgd, random_search_attack
from .errors import ConfigParse, MoreLabError, StageFailure
from .experiment import Experiment, apply_overrides, load_config, run_experiment
from .hashing import derive_seed
from .weather import PerturbSpec, weatherize_batch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", required=True, help="experiment config (TOML)")
    p.add_argument("--out", default=None, help="artifact directory (default from config)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable), e.g. --set train.epochs=1",
    )
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (
        ("run", "train everything, fine-tune the mixture, evaluate"),
        ("eval", "evaluate (training stages run only when checkpoints are missing/stale)"),
        ("assemble", "assemble the mixture from trained experts without fine-tuning"),
        ("finetune", "assemble and adversarially fine-tune the mixture"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_common(p)

    p = sub.add_parser("train-expert", help="train one expert section")
    _add_common(p)
    p.add_argument("--name", required=True, help="expert section name")

    p = sub.add_parser("train-baseline", help="train one baseline section")
    _add_common(p)
    p.add_argument("--name", required=True, help="baseline section name")

    p = sub.add_parser("report", help="render a persisted report")
    p.add_argument("--report-file", required=True)
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")

    p = sub.add_parser("attack", help="dump a single-image adversarial example")
    _add_common(p)
    p.add_argument("--model", required=True, help="expert/baseline name or 'more'")
    p.add_argument("--threat", required=True, help="threat name from [threats]")
    p.add_argument("--index", type=int, default=0, help="test-set image index")
    p.add_argument("--dump", required=True, help="output .npz path")
    return parser


def _experiment(args) -> Experiment:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.overrides)
    out_dir = args.out
    if out_dir is None:
        out_dir = cfg.get("run", {}).get("out_dir", Path(args.config).with_suffix("").name + "_artifacts")
        out_dir = Path(args.config).parent / out_dir
    log = (lambda *_: None) if args.quiet else print
    return Experiment(cfg, out_dir, log=log)


def _cmd_run(args) -> int:
    log = (lambda *_: None) if args.quiet else print
    report = run_experiment(args.config, out_dir=args.out, overrides=args.overrides, log=log)
    log(ev.render_report(report, "markdown"))
    return EXIT_OK


def _cmd_stage(args, *, finetune: bool) -> int:
    exp = _experiment(args)
    _wrap_stage("experts", exp.stage_experts)
    if finetune:
        _wrap_stage("baselines", exp.stage_baselines)
    _wrap_stage("more", lambda: exp.stage_more(finetune=finetune))
    return EXIT_OK


def _cmd_train_expert(args) -> int:
    exp = _experiment(args)
    if args.name not in exp.cfg.get("experts", {}):
        raise ConfigParse(f"no [experts.{args.name}] section in config")
    _wrap_stage("experts", lambda: exp.stage_experts(only=[args.name]))
    return EXIT_OK


def _cmd_train_baseline(args) -> int:
    exp = _experiment(args)
    if args.name not in exp.cfg.get("baselines", {}):
        raise ConfigParse(f"no [baselines.{args.name}] section in config")
    _wrap_stage("baselines", lambda: exp.stage_baselines(only=[args.name]))
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        report = ev.EvalReport.from_json(Path(args.report_file).read_text())
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigParse(f"cannot read report {args.report_file!r}: {exc}") from exc
    sys.stdout.write(ev.render_report(report, args.format))
    return EXIT_OK


def _cmd_attack(args) -> int:
    exp = _experiment(args)
    _wrap_stage("experts", exp.stage_experts)
    _wrap_stage("baselines", exp.stage_baselines)
    pool = {n: e.model for n, e in exp.experts.items()}
    pool.update({n: e.model for n, e in exp.baselines.items()})
    if args.model == "more":
        _wrap_stage("more", exp.stage_more)
        pool["more"] = exp.more
    if args.model not in pool:
        raise ConfigParse(f"unknown model {args.model!r}")
    subject = pool[args.model]
    threat = exp.threats.get(args.threat) if args.threat != tr.CLEAN else tr.CLEAN
    if threat is None:
        raise ConfigParse(f"unknown threat {args.threat!r}")
    ds = exp.test_ds
    if not 0 <= args.index < len(ds):
        raise ConfigParse(f"index {args.index} out of range for test set of {len(ds)}")
    x = ds.images[args.index : args.index + 1]
    y = ds.labels[args.index : args.index + 1]

    def _gen():
        if threat == tr.CLEAN:
            return x
        if isinstance(threat, AttackSpec):
            raw = exp.cfg.get("threats", {}).get(args.threat, {})
            if raw.get("type") == "random_search":
                return random_search_attack(subject, x, y, threat, queries=int(raw.get("queries", 500)))
            return pgd(subject, x, y, threat, seed=derive_seed(threat.seed, args.index))
        return weatherize_batch(x, threat, np.array([args.index]))

    try:
        adv = _gen()
        before = int(subject.forward(_tensor(x)).data.argmax(axis=1)[0])
        after = int(subject.forward(_tensor(adv)).data.argmax(axis=1)[0])
    except MoreLabError as exc:
        raise StageFailure("attack", exc) from exc
    np.savez(args.dump, original=x[0], adversarial=adv[0], label=int(y[0]))
    if not args.quiet:
        print(f"label={int(y[0])} predicted(before)={before} predicted(after)={after}")
        print(f"wrote {args.dump}")
    return EXIT_OK


def _tensor(x):
    from . import tensor as T

    return T.Tensor(x)


def _wrap_stage(name: str, fn):
    try:
        return fn()
    except (ConfigParse, StageFailure):
        raise
    except MoreLabError as exc:
        raise StageFailure(name, exc) from exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "eval": _cmd_run,  # stages are cached; eval re-runs only what is stale
        "assemble": lambda a: _cmd_stage(a, finetune=False),
        "finetune": lambda a: _cmd_stage(a, finetune=True),
        "train-expert": _cmd_train_expert,
        "train-baseline": _cmd_train_baseline,
        "report": _cmd_report,
        "attack": _cmd_attack,
    }
    try:
        return handlers[args.command](args)
    except ConfigParse as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
