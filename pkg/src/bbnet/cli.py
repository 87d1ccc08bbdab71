"""Command line entry point: ``bbnet <command> ...`` or ``python -m bbnet``.

Results are printed as tab-separated ``key<TAB>value`` lines. Failures print
one ``error<TAB><Type><TAB><reason>`` line to stderr and exit with status 1
(2 for argument errors). ``BBNET_LOG_LEVEL`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness, plotting
from .core import BBNetError
from .dataset import compute_stats, scan_dataset, synth_generate, write_stats
from .network import load_checkpoint, model_summary


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error\tUsageError\t{message}", file=sys.stderr)
        sys.exit(2)


def _emit(pairs):
    for key, value in pairs:
        print(f"{key}\t{value}")


def _train(args):
    manifest = harness.cmd_train(args.config)
    out = [("checkpoint", manifest.checkpoints[-1]), ("state_hash", manifest.final_checkpoint_hash)]
    if manifest.report:
        summary = json.loads(open(manifest.report).read())
        out += [(k, summary[k]) for k in harness.METRIC_KEYS]
    _emit(out)


def _predict(args):
    written = harness.cmd_predict(args.ckpt, args.inp, args.out)
    _emit([("n_written", len(written)), ("out", args.out)])


def _eval(args):
    report = harness.cmd_eval(args.pred, args.gt, args.report, adaptive=args.adaptive)
    _emit(report.summary().items())


def _synth(args):
    records = synth_generate(args.out, args.groups, args.per_group, args.size, args.seed)
    _emit([("n_groups", len(records)), ("n_images", sum(len(r) for r in records)), ("out", args.out)])


def _stats(args):
    stats = compute_stats(scan_dataset(args.root))
    paths = write_stats(stats, args.out)
    fig = plotting.plot_stats(stats, paths["json"].parent / "stats.png")
    flat = []
    for key, value in stats.summary().items():
        if isinstance(value, dict):
            flat += [(f"{key}.{k}", v) for k, v in value.items()]
        else:
            flat.append((key, value))
    _emit([*flat, ("csv", paths["csv"]), ("figure", fig)])


def _ablate(args):
    rows = harness.cmd_ablate(args.config, args.switch)
    print("\t".join(["variant", *harness.METRIC_KEYS, "final_loss"]))
    for name, row in rows.items():
        print("\t".join([name] + [str(row[k]) for k in (*harness.METRIC_KEYS, "final_loss")]))


def _summary(args):
    net = load_checkpoint(args.ckpt)
    info = model_summary(net)
    _emit([*info.items(), ("backbone", net.cfg.backbone_id), ("channels", net.cfg.channels)])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bbnet", description="Collaborative camouflaged object detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_train)

    p = sub.add_parser("predict", help="predict one image group to 8-bit PNG maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="directory holding one group of images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_predict)

    p = sub.add_parser("eval", help="score prediction maps against ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="JSON path; CSVs are written beside it")
    p.add_argument("--adaptive", action="store_true", help="also report adaptive-threshold F-measure")
    p.set_defaults(func=_eval)

    p = sub.add_parser("synth", help="generate a synthetic camouflage-group dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--per-group", type=int, default=8)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_synth)

    p = sub.add_parser("stats", help="dataset statistics, CSV/JSON plus a figure")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_stats)

    p = sub.add_parser("ablate", help="train the full model and ablated variants side by side")
    p.add_argument("--config", required=True)
    p.add_argument("--switch", action="append", required=True,
                   help="no_cfe, no_ofs, no_lgr, iters=N, no_gamma, top_n=N, bce_only, consensus_off; repeatable")
    p.set_defaults(func=_ablate)

    p = sub.add_parser("summary", help="parameter count and FLOP estimate of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=_summary)
    return parser


def main(argv=None) -> int:
    harness.configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ablate":
            for switch in args.switch:
                harness.apply_switch(*harness.load_config(args.config), switch)
        args.func(args)
    except (BBNetError, OSError, ValueError) as exc:
        reason = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{reason}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
