"""Command-line entry point: ``ctxbias <subcommand> --workdir DIR``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .biasing import VARIANTS
from .config import ExperimentConfig
from .gradcheck import run_all

GRAD_TOLERANCE = 1e-4


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K list must hold positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxbias", description="Contextual biasing for neural transducers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--workdir", type=Path, default=Path("."), help="artifact directory (default: .)")
        sp.add_argument("--config", type=Path, default=None,
                        help="INI config (default: WORKDIR/config.ini, else built-in defaults)")
        return sp

    cmd("init-config", "write the documented default config to WORKDIR/config.ini")
    cmd("synth-data", "generate corpora, rare-word and zero-shot lists")
    cmd("tokenizer-train", "train the subword vocabulary on the training transcripts")
    cmd("plm-train", "pretrain the subword language model on the text-only corpus")
    cmd("train-base", "train the unbiased transducer")
    sp = cmd("train-adapters", "train biasing adapters on a frozen base")
    sp.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    sp = cmd("evaluate", "decode the test sets and write per-variant metric TSVs")
    sp.add_argument("--k", type=_k_list, default=None, help="comma-separated list sizes (default: config)")
    sp.add_argument("--variants", default=None,
                    help=f"comma-separated names, '{ex.BASE}' for the unbiased model (default: base + config)")
    sp.add_argument("--distractors-only", action="store_true",
                    help="leave the correct entities out of every list")
    cmd("report", "merge evaluation TSVs into report.tsv and an aligned table")
    sp = sub.add_parser("gradcheck", help="finite-difference checks of layers and losses")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ex.PipelineError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        results = run_all(args.seed)
        for name, err in results.items():
            print(f"{name:24s} {err:.3e} {'ok' if err < GRAD_TOLERANCE else 'FAIL'}")
        return 0 if max(results.values()) < GRAD_TOLERANCE else 1

    wd = ex.Workdir(args.workdir)
    cfg = ex.load_config(wd, args.config)
    if args.command == "init-config":
        wd.root.mkdir(parents=True, exist_ok=True)
        wd.config.write_text(cfg.to_ini(), encoding="utf-8")
        print(wd.config)
    elif args.command == "synth-data":
        for k, v in ex.synth_data(cfg, wd).items():
            print(f"{k}\t{v}")
    elif args.command == "tokenizer-train":
        print(f"subword vocabulary\t{ex.train_tokenizers(cfg, wd)}")
    elif args.command == "plm-train":
        for epoch, ppl in enumerate(ex.run_plm_train(cfg, wd)):
            print(f"epoch {epoch}\tperplexity {ppl:.4f}")
    elif args.command == "train-base":
        for epoch, loss in enumerate(ex.run_train_base(cfg, wd), start=1):
            print(f"epoch {epoch}\tloss {loss:.4f}")
    elif args.command == "train-adapters":
        for epoch, loss in enumerate(ex.run_train_adapters(cfg, wd, args.variant), start=1):
            print(f"epoch {epoch}\tloss {loss:.4f}")
    elif args.command == "evaluate":
        variants = args.variants.split(",") if args.variants else [ex.BASE] + cfg.experiment.variants
        reports = ex.run_evaluate(cfg, wd, variants, args.k or cfg.eval.k_list, args.distractors_only)
        for r in reports:
            print(f"{r.variant}\tK={r.K}\twer {r.wer:.4f}")
    elif args.command == "report":
        print(ex.run_report(wd), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
