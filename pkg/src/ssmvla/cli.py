"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

from .config import RunConfig, load_config
from .errors import ConfigError, SSMVLAError

logger = logging.getLogger("ssmvla")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, out_required=True):
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")


def build_parser():
    p = _Parser(prog="ssmvla", description="Latent-action VLA toolkit: data, training, evaluation, plots.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("config", help="print or write the default config")
    c.add_argument("--config", help="validate and print this config instead")
    c.add_argument("--out", help="write to this file")

    g = sub.add_parser("gen-data", help="generate expert episodes")
    _common(g)
    g.add_argument("--episodes", type=int, help="override data.episodes")

    lam = sub.add_parser("train-lam", help="train the latent action model")
    _common(lam)
    lam.add_argument("--data", required=True)

    vla = sub.add_parser("train-vla", help="train the policy against a frozen LAM")
    _common(vla)
    vla.add_argument("--data", required=True)
    vla.add_argument("--lam", help="LAM output directory (required unless lam_frames=0)")

    ev = sub.add_parser("eval", help="evaluate a trained policy")
    _common(ev)
    ev.add_argument("--data", required=True)
    ev.add_argument("--vla", required=True)
    ev.add_argument("--lam")

    vz = sub.add_parser("viz", help="render a latent-action trace as an image grid")
    vz.add_argument("--trace", required=True)
    vz.add_argument("--out", required=True, help="PNG path")

    run = sub.add_parser("run", help="gen-data, train-lam, train-vla and eval in one go")
    _common(run)

    ab = sub.add_parser("ablate", help="train and compare the ablation variants over seeds")
    _common(ab)
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return p


def _config(args):
    return load_config(getattr(args, "config", None), seed=getattr(args, "seed", None))


def cmd_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    text = cfg.to_json()
    if args.out:
        cfg.save(args.out)
    else:
        print(text)


def cmd_gen_data(args):
    from .pipeline import ensure_data

    cfg = _config(args)
    if args.episodes is not None:
        d = cfg.to_dict()
        d["data"]["episodes"] = args.episodes
        cfg = RunConfig.from_dict(d)
    manifest = ensure_data(cfg, args.out, force=args.force)
    print(json.dumps({"episodes": manifest["count"], "out": args.out}))


def cmd_train_lam(args):
    from .training import train_lam

    cfg = _config(args)
    train_lam(cfg, args.data, args.out, resume=args.resume, force=args.force)
    print(json.dumps({"checkpoint": os.path.join(args.out, "checkpoint")}))


def cmd_train_vla(args):
    from .training import train_vla

    cfg = _config(args)
    if cfg.ablation.lam_frames and not args.lam:
        raise UsageError("--lam is required unless ablation.lam_frames is 0")
    train_vla(cfg, args.data, args.lam, args.out, resume=args.resume, force=args.force)
    print(json.dumps({"checkpoint": os.path.join(args.out, "checkpoint")}))


def cmd_eval(args):
    from .evaluate import evaluate, save_report
    from .frontend import load_backend
    from .training import load_lam, load_vla, prepare_stores

    policy, velocity, meta = load_vla(args.vla)
    cfg = RunConfig.from_dict(meta["config"])
    if args.config or args.seed is not None:
        cfg = _config(args)
    lam = load_lam(args.lam)[0] if args.lam else None
    _, held, backend = prepare_stores(cfg, args.data)
    report = evaluate(cfg, policy, velocity, backend, lam, held)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "report.json")
    if os.path.exists(path) and not args.force:
        raise SSMVLAError(f"{path} exists; use --force to overwrite")
    save_report(report, path)
    print(json.dumps({"report": path, "success_rate": report["single_task"]["success_rate"], "avg_len": report["chains"]["avg_len"]}))


def cmd_viz(args):
    from .viz import load_trace, write_grid

    write_grid(load_trace(args.trace), args.out)
    print(json.dumps({"grid": args.out}))


def cmd_run(args):
    from .pipeline import run_pipeline

    report = run_pipeline(_config(args), args.out, force=args.force)
    print(json.dumps({"report": os.path.join(args.out, "report.json"), "success_rate": report["single_task"]["success_rate"]}))


def cmd_ablate(args):
    from .pipeline import run_ablation

    report = run_ablation(_config(args), args.out, seeds=tuple(args.seeds), force=args.force)
    print(json.dumps({"all_orderings_hold": report["all_orderings_hold"], "completed": report["completed"]}))


COMMANDS = {
    "config": cmd_config,
    "gen-data": cmd_gen_data,
    "train-lam": cmd_train_lam,
    "train-vla": cmd_train_vla,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "run": cmd_run,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        COMMANDS[args.command](args)
        return EXIT_OK
    except (UsageError, ConfigError) as e:
        print(f"ssmvla: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SSMVLAError, OSError, RuntimeError, KeyError, ValueError) as e:
        print(f"ssmvla: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
