"""``mapnet`` command-line entry point.

Exit codes: 0 on success, 1 when a check fails (or training diverges), 2 on
configuration or I/O errors. Errors print one line to stderr.
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

from .checks import gradient_suite, oracle_suite
from .config import ResolvedConfig, resolve_config
from .episodes import load_embeddings, save_embeddings, synth_generate
from .errors import ConfigError, FormatError, MapNetError
from .persist import load_params, save_params
from .trainer import ablation_run, evaluate, init_params, lambda_sweep, train

COMMANDS = ("synth", "train", "eval", "ablate", "lambda", "gradcheck", "oracle")
DEFAULT_OUT = {
    "synth": "synth_data",
    "train": "params.bin",
    "eval": "eval_report.json",
    "ablate": "ablation_report.json",
    "lambda": "lambda_report.json",
}


class CheckFailed(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mapnet", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config key (repeatable)")
    ap.add_argument("--out", help="output path")
    ap.add_argument("--seed", type=int, help="training/evaluation seed")
    ap.add_argument("--threads", type=int, default=0,
                    help="evaluation workers; 0 runs single-threaded")
    return ap


def write_json(path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_dataset(cfg: ResolvedConfig):
    if cfg.run.features_path:
        return load_embeddings(cfg.run.features_path, cfg.run.attributes_path)
    return synth_generate(cfg.synth, cfg.run.data_seed)


def _envelope(cfg: ResolvedConfig, command: str) -> dict:
    return {"command": command, "config": cfg.to_dict(), "seed": cfg.train.seed}


def cmd_synth(cfg, out, threads):
    ds = synth_generate(cfg.synth, cfg.run.data_seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(ds, out / "features.txt", out / "attributes.txt")
    print(f"wrote {len(ds.labels)} samples, {len(ds.class_ids)} classes to {out}")


def cmd_train(cfg, out, threads):
    ds = load_dataset(cfg)
    params, history = train(ds, cfg.train, threads=threads)
    save_params(params, out)
    lines = [e.line() for e in history]
    Path(str(out) + ".log").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    for ln in lines:
        print(ln)


def cmd_eval(cfg, out, threads):
    ds = load_dataset(cfg)
    params = load_params(cfg.run.params_path) if cfg.run.params_path else init_params(ds, cfg.train)
    rep = evaluate(params, ds, cfg.run.split, cfg.train, threads=threads)
    write_json(out, {**_envelope(cfg, "eval"), "report": rep.to_dict(),
                     "trained": bool(cfg.run.params_path)})
    print(f"{rep.mode['label']}: {rep.accuracy:.2f} +- {rep.ci95:.2f} "
          f"over {rep.episode_count} episodes")


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "vp", "sp", "rg", "aux", "accuracy", "ci95",
                "lambda_mean_support", "lambda_mean_query"])
    for r in rows:
        rep = r.report
        w.writerow([r.mode.label, r.mode.vp, r.mode.sp, r.mode.rg, r.mode.aux,
                    repr(rep.accuracy), repr(rep.ci95),
                    "" if rep.lambda_mean_support is None else repr(rep.lambda_mean_support),
                    "" if rep.lambda_mean_query is None else repr(rep.lambda_mean_query)])
    return buf.getvalue()


def cmd_ablate(cfg, out, threads):
    ds = load_dataset(cfg)
    rows = ablation_run(ds, cfg.train, split=cfg.run.split, threads=threads)
    write_json(out, {**_envelope(cfg, "ablate"), "rows": [r.to_dict() for r in rows]})
    Path(out).with_suffix(".csv").write_text(ablation_csv(rows), encoding="utf-8")
    for r in rows:
        print(f"{r.mode.label:10s} {r.report.accuracy:.2f} +- {r.report.ci95:.2f}")


def cmd_lambda(cfg, out, threads):
    ds = load_dataset(cfg)
    rows = lambda_sweep(ds, cfg.train, cfg.run.shots, split=cfg.run.split, threads=threads)
    write_json(out, {**_envelope(cfg, "lambda"), "rows": rows})
    for r in rows:
        print(f"K={r['k_shot']} support {r['lambda_support']:.4f} "
              f"query {r['lambda_query'] if r['lambda_query'] is None else round(r['lambda_query'], 4)}")


def _report_checks(results, out, cfg, command):
    worst = max(r.value for r in results)
    for r in results:
        print(r.line())
    if out:
        write_json(out, {**_envelope(cfg, command),
                         "checks": [{"name": r.name, "value": r.value,
                                     "tolerance": r.tolerance, "ok": r.ok} for r in results]})
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise CheckFailed(f"{len(failed)} check(s) failed, first: {failed[0]}")
    return worst


def cmd_gradcheck(cfg, out, threads):
    results = gradient_suite(cfg.train.seed, cfg.train.alpha, cfg.train.mu)
    worst = _report_checks(results, out, cfg, "gradcheck")
    print(f"max relative error {worst:.3e}")


def cmd_oracle(cfg, out, threads):
    results = oracle_suite(cfg.train.seed, cfg.train.alpha, cfg.train.mu)
    _report_checks(results, out, cfg, "oracle")
    print(f"closed-form/Neumann max gap {results[0].value:.3e}")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "lambda": cmd_lambda, "gradcheck": cmd_gradcheck, "oracle": cmd_oracle,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("must be >= 0", key="seed")
            cfg.train = replace(cfg.train, seed=args.seed)
        if args.threads < 0:
            raise ConfigError("must be >= 0", key="threads")
        out = args.out or DEFAULT_OUT.get(args.command)
        with np.errstate(over="ignore", under="ignore"):
            HANDLERS[args.command](cfg, out, args.threads)
    except (ConfigError, FormatError, OSError) as exc:
        print(f"mapnet: error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (CheckFailed, MapNetError) as exc:
        print(f"mapnet: check failed: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc) -> str:
    if isinstance(exc, OSError) and exc.filename:
        return f"{exc.strerror}: {exc.filename}"
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
