"""Command-line entry point: ``run``, ``infer-labels`` and ``gradcheck``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .errors import ConfigError, DataError, InvariantError, ProtocolError
from .experiment import (ATTACKS, DATASETS, RunConfig, emit_report, label_inference_rate,
                         poison_scores, setup_run, summarize, train_run)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

# flag dest -> RunConfig field, for flags whose names differ
RENAMED = {"defense_head": "head"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # Defaults are suppressed so that only flags actually given override the config file.
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--dataset", choices=DATASETS, default=S)
    p.add_argument("--data-dir", default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--attack", choices=ATTACKS, default=S)
    p.add_argument("--gamma", type=float, default=S)
    p.add_argument("--target-label", type=int, default=S)
    p.add_argument("--blur", type=_on_off, metavar="{on,off}", default=S)
    p.add_argument("--defense-head", choices=("sum", "trainable"), default=S)
    p.add_argument("--noise", choices=("none", "gauss", "laplace"), default=S)
    p.add_argument("--noise-var", type=float, default=S)
    p.add_argument("--clip-norm", type=float, default=S)
    p.add_argument("--drop-rate", type=float, default=S)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vflbackdoor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train with optional attack and defenses, write CSV reports")
    _add_run_flags(run)
    run.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: results)")
    run.add_argument("--name", default="run", help="file name prefix for the reports")
    run.add_argument("--long", action="store_true", help="also write a long-format CSV")

    inf = sub.add_parser("infer-labels",
                         help="read labels off the gradients a passive party receives")
    _add_run_flags(inf)
    inf.add_argument("--max-rounds", type=int, default=None)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return values


def normalize_keys(values: dict) -> dict:
    """Accept flag spellings (``defense-head``) as well as field names (``head``)."""
    out = {}
    for key, value in values.items():
        key = key.replace("-", "_")
        key = RENAMED.get(key, key)
        if key == "blur" and isinstance(value, str):
            try:
                value = _on_off(value)
            except argparse.ArgumentTypeError as exc:
                raise ConfigError(f"blur: {exc}") from exc
        out[key] = value
    return out


def config_from_args(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    """Merge file values and explicit flags; returns the config and leftover keys."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    values = normalize_keys(values)
    skip = {"config", "command", "verbose", "name", "long", "max_rounds"}
    values.update(normalize_keys({k: v for k, v in vars(args).items() if k not in skip}))
    extra = {k: values.pop(k) for k in ("out",) if k in values}
    return RunConfig.from_dict(values), extra


def cmd_run(args) -> int:
    cfg, extra = config_from_args(args)
    results, scores = [], []
    for r in range(cfg.repeats):
        run = train_run(setup_run(cfg, r))
        results.append(run.metrics)
        scores.append(poison_scores(run))
    out = extra.get("out", "results")
    written = emit_report(results, out, args.name, long_format=args.long, scores=scores)
    s = summarize(results)
    backdoor = s["backdoor_acc_mean"]
    print(f"{cfg.dataset}: {s['repeats']} repeat(s), {s['epochs']} epochs, "
          f"main {s['main_acc_mean']:.4f}, "
          f"backdoor {'n/a' if backdoor is None else f'{backdoor:.4f}'}")
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, _ = config_from_args(args)
    rate, count = label_inference_rate(cfg, args.max_rounds)
    print(f"party {cfg.malicious_party} recovered {rate:.2%} of {count} labels")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    return EXIT_OK if gradcheck.main(args.seed) else EXIT_INVARIANT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handlers = {"run": cmd_run, "infer-labels": cmd_infer, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, ProtocolError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
