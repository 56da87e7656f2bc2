"""Operator surface.

    omnikd gen-data  --config cfg.json
    omnikd train     --config cfg.json (--stage NAME | --all) [--alpha X]
    omnikd eval      --config cfg.json --checkpoint PATH [--modality both]
    omnikd probe-attention --config cfg.json --checkpoint PATH
                           [--dataset vqa_eval] [--modality text] [--n 64]
    omnikd ablate    --config cfg.json [--alphas 0,0.25,0.5,0.75,1.0]
    omnikd report    --config cfg.json
    omnikd init-config PATH [--seed N] [--output-dir DIR]

Exit codes: 0 success, 2 invalid config, 3 missing prerequisite,
4 checkpoint/dataset incompatibility, 5 missing or corrupt artifacts.
The environment variable OMNIKD_OUTPUT_ROOT prefixes all run directories.
"""

from __future__ import annotations

import argparse
import json
import sys

from .experiment import (ArtifactError, ConfigError, Experiment,
                         IncompatibilityError, MissingPrerequisiteError,
                         default_config, load_config)
from .training import STAGES

EXIT_CONFIG = 2
EXIT_MISSING_PREREQ = 3
EXIT_INCOMPATIBLE = 4
EXIT_ARTIFACT = 5


def _experiment(args) -> Experiment:
    return Experiment(load_config(args.config))


def cmd_gen_data(args) -> int:
    exp = _experiment(args)
    manifest = exp.gen_data()
    print(f"wrote datasets under {exp.path('data')}")
    print(f"manifest checksum: {manifest.checksum()}")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    if args.all:
        for ckpt in exp.train_all(alpha=args.alpha):
            print(f"checkpoint: {ckpt}")
    else:
        if args.stage is None:
            raise ConfigError("train requires --stage NAME or --all")
        if args.stage not in STAGES:
            raise ConfigError(f"unknown stage '{args.stage}'; "
                              f"expected one of {list(STAGES)}")
        alpha = args.alpha if args.stage == "vision_audio_sft" else None
        print(f"checkpoint: {exp.train_stage(args.stage, alpha=alpha)}")
    return 0


def cmd_eval(args) -> int:
    exp = _experiment(args)
    out = exp.evaluate(args.checkpoint, modality=args.modality,
                       out_prefix=args.out_prefix)
    if "eval_result" in out:
        r = out["eval_result"]
        print(f"text avg {r['text_average']:.2f}  audio avg "
              f"{r['audio_average']:.2f}  gap {r['gap_average']:.2f}")
    print(f"wrote {exp.path('eval', args.out_prefix + '.json')}")
    return 0


def cmd_probe_attention(args) -> int:
    exp = _experiment(args)
    path = exp.probe_attention(args.checkpoint, args.dataset, args.modality,
                               args.n, args.out_name)
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    path = exp.ablate(alphas)
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    exp = _experiment(args)
    exp.report()
    print(f"wrote {exp.path('run_report.json')}")
    return 0


def cmd_init_config(args) -> int:
    cfg = default_config(seed=args.seed, output_dir=args.output_dir)
    with open(args.path, "w") as f:
        json.dump(cfg, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {args.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnikd", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        return sp

    with_config(sub.add_parser("gen-data")).set_defaults(fn=cmd_gen_data)

    t = with_config(sub.add_parser("train"))
    t.add_argument("--stage", default=None)
    t.add_argument("--all", action="store_true")
    t.add_argument("--alpha", type=float, default=None,
                   help="KD ratio override for vision_audio_sft")
    t.set_defaults(fn=cmd_train)

    e = with_config(sub.add_parser("eval"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--modality", default="both", choices=["text", "audio", "both"])
    e.add_argument("--out-prefix", default="eval")
    e.set_defaults(fn=cmd_eval)

    a = with_config(sub.add_parser("probe-attention"))
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", default="vqa_eval")
    a.add_argument("--modality", default="text", choices=["text", "audio"])
    a.add_argument("--n", type=int, default=64)
    a.add_argument("--out-name", default="attention_profile.csv")
    a.set_defaults(fn=cmd_probe_attention)

    b = with_config(sub.add_parser("ablate"))
    b.add_argument("--alphas", default="0,0.25,0.5,0.75,1.0")
    b.set_defaults(fn=cmd_ablate)

    with_config(sub.add_parser("report")).set_defaults(fn=cmd_report)

    ic = sub.add_parser("init-config")
    ic.add_argument("path")
    ic.add_argument("--seed", type=int, default=0)
    ic.add_argument("--output-dir", default="runs/default")
    ic.set_defaults(fn=cmd_init_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except IncompatibilityError as exc:
        print(f"incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
