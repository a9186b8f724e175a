"""Command line entry point: ``mefn run``, ``mefn validate-config``, ``mefn gibbs-fit``."""

from __future__ import annotations

import argparse
import logging
import sys

from .constraints import ConstraintError, OptionChain
from .experiments import ConfigError, load_config, run_experiment
from .oracles import OracleError, gibbs_option_fit
from .trainer import TrainingError


def _cmd_run(args):
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir,
                      ablation=True if args.ablation else None)
    report = run_experiment(cfg)
    sys.stdout.write(report.text())
    print(f"outputs written to {cfg.out_dir}")
    return 0


def _cmd_validate(args):
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
    t = cfg.train
    print(f"ok: experiment={cfg.experiment} seed={cfg.seed} out_dir={cfg.out_dir}")
    print(f"    k_max={t.k_max} i_max={t.i_max} n={t.n} n_tilde={t.n_tilde} beta={t.beta} "
          f"gamma={t.gamma} optimizer={t.optimizer}")
    return 0


def _cmd_gibbs(args):
    chain = OptionChain.from_csv(args.chain)
    model = gibbs_option_fit(chain)
    text = model.to_text()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    print("strike,observed,fitted")
    for k, p in zip(chain.strikes, chain.prices):
        print(f"{float(k)!r},{float(p)!r},{float(model.price(k))!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mefn", description="Fit maximum entropy distributions with normalizing flows.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate an experiment")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir")
    run.add_argument("--ablation", action="store_true", help="also train without the entropy term")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate-config", help="parse and check a config file")
    val.add_argument("config")
    val.add_argument("--seed", type=int)
    val.add_argument("--out-dir")
    val.set_defaults(func=_cmd_validate)

    gib = sub.add_parser("gibbs-fit", help="fit the piecewise-exponential density to a call chain")
    gib.add_argument("chain")
    gib.add_argument("-o", "--output", help="write the fitted model here")
    gib.set_defaults(func=_cmd_gibbs)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConstraintError, OracleError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
