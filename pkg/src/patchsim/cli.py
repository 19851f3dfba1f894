"""Command-line entry point.

Subcommands: dist, build-2afc, build-jnd, train, eval-2afc, eval-jnd, corr,
spearman-mos, serve. Data goes to stdout, logs to stderr. Exit codes: 0 on
success, 1 on domain errors (printed as ``error[kind]: message``), 2 on usage
errors. ``PMK_SEED`` overrides the default of every --seed flag; an optional
``--config`` file (flat ``key=value`` lines under ``[subcommand]`` headers)
sits between flags and built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import signal
import sys
import time
from pathlib import Path

from . import backbone as bb
from . import dataset as ds
from . import distort, evalkit, metric, trainer
from .errors import ConfigurationError, PatchSimError
from .imagecore import Rng, load_image, to_tensor
from .service import CollectService


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error[usage]: {message}", file=sys.stderr)
        sys.exit(2)


def _parse_config_file(path: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = ""
    for ln, raw in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
        elif "=" in line:
            key, _, value = line.partition("=")
            sections.setdefault(current, {})[key.strip()] = value.strip()
        else:
            raise ConfigurationError(f"{path}:{ln}: expected key=value or [section]")
    return sections


def _default_seed() -> int:
    env = os.environ.get("PMK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"PMK_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------------------
# metric construction
# ---------------------------------------------------------------------------

def _load_backbone(args):
    if not getattr(args, "backbone", None):
        raise ConfigurationError("lpips metric needs --backbone <spec.json>")
    spec = bb.BackboneSpec.from_json(Path(args.backbone).read_text("utf-8"))
    if not getattr(args, "weights", None):
        raise ConfigurationError("lpips metric needs --weights <.lpw>")
    weights = bb.load_weights(args.weights)
    if getattr(args, "calib", None):
        w, _ = metric.load_calibration(args.calib)
    else:
        w = metric.ChannelWeights.ones(spec.tap_channels())
    return spec, weights, w


def _metric_fn(name: str, args):
    """Distance callable for ranking protocols; similarity metrics are negated
    so that smaller always means closer.
    """
    if name == "l2":
        return metric.l2_distance
    if name == "psnr":
        return lambda a, b: -metric.psnr(a, b)
    if name == "ssim":
        return lambda a, b: -metric.ssim(a, b)
    if name == "lpips":
        spec, weights, w = _load_backbone(args)
        return lambda a, b: metric.lpips(spec, weights, w, a, b).total
    raise ConfigurationError(f"unknown metric {name!r}")


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_dist(args) -> int:
    a = to_tensor(load_image(args.image_a))
    b = to_tensor(load_image(args.image_b))
    if args.metric == "l2":
        print(evalkit.format_sig(metric.l2_distance(a, b)))
    elif args.metric == "psnr":
        print(evalkit.format_sig(metric.psnr(a, b)))
    elif args.metric == "ssim":
        print(evalkit.format_sig(metric.ssim(a, b)))
    else:
        spec, weights, w = _load_backbone(args)
        report = metric.lpips(spec, weights, w, a, b)
        print(evalkit.format_sig(report.total))
        for i, v in enumerate(report.per_layer):
            print(f"layer{i} {evalkit.format_sig(v)}")
    return 0


def _make_bank(args, seed: int):
    return distort.sample_distortion_bank(
        args.bank_base, args.bank_composed, Rng(seed, stream=0xBA9C))


def _cmd_build_2afc(args) -> int:
    bank = _make_bank(args, args.seed)
    store = ds.build_2afc_dataset(
        args.images, bank, args.n, args.seed, args.out,
        val_fraction=args.val_fraction, patch_size=args.patch_size,
        n_sentinels=args.sentinels)
    print(json.dumps({"out": str(store.root), "triplets": args.n,
                      "sentinels": args.sentinels}))
    return 0


def _cmd_build_jnd(args) -> int:
    bank = _make_bank(args, args.seed)
    store = ds.build_jnd_dataset(
        args.images, bank, args.pairs, args.seed, args.out,
        patch_size=args.patch_size, sessions=args.sessions)
    print(json.dumps({"out": str(store.root), "pairs": args.pairs,
                      "sessions": args.sessions}))
    return 0


def _cmd_train(args) -> int:
    store = ds.DatasetStore(args.dataset)
    spec = bb.BackboneSpec.from_json(Path(args.backbone).read_text("utf-8"))
    weights = bb.load_weights(args.weights) if args.weights else None
    cfg = trainer.TrainConfig(
        mode=args.mode, epochs_const=args.epochs_const, epochs_decay=args.epochs_decay,
        lr0=args.lr0, batch=args.batch, loss=args.loss, margin=args.margin,
        optimizer=args.optimizer, seed=args.seed)
    train_records = ds.labeled_triplets(store, "train")
    val_records = ds.labeled_triplets(store, "val")
    result = trainer.train(train_records, spec, weights, cfg,
                           val_records=val_records or None)
    if result.skipped_fractional:
        print(f"warning: skipped {result.skipped_fractional} fractional-label records "
              f"(margin loss takes hard labels only)", file=sys.stderr)
    trainer.save_checkpoint(args.out, result.state, result.log)
    print(json.dumps({"checkpoint": str(args.out),
                      "final": result.log[-1] if result.log else None}))
    return 0


def _metric_list(args):
    names = args.metric or ["l2"]
    return [(name, _metric_fn(name, args)) for name in names]


def _cmd_eval_2afc(args) -> int:
    store = ds.DatasetStore(args.dataset)
    triplets = ds.labeled_triplets(store)
    metrics = _metric_list(args)
    report = evalkit.evaluate_report(metrics, triplets, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(report, [n for n, _ in metrics],
                         out / "report.json", out / "report.csv")
    print((out / "report.json").read_text("utf-8"), end="")
    return 0


def _cmd_eval_jnd(args) -> int:
    store = ds.DatasetStore(args.dataset)
    pairs, ties = ds.labeled_jnd_pairs(store)
    if ties:
        print(f"warning: skipped {ties} JND pairs with tied votes", file=sys.stderr)
    metrics = _metric_list(args)
    report = evalkit.evaluate_report(metrics, [], jnd_pairs=pairs, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(report, [n for n, _ in metrics],
                         out / "report.json", out / "report.csv")
    print((out / "report.json").read_text("utf-8"), end="")
    return 0


def _cmd_corr(args) -> int:
    table = evalkit.read_score_table(Path(args.scores).read_text("utf-8"))
    result = {"pearson": evalkit.cross_task_correlation(table, "pearson"),
              "spearman": evalkit.cross_task_correlation(table, "spearman")}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corr.json").write_text(
        json.dumps(evalkit._round_floats(result), indent=2, sort_keys=True) + "\n", "utf-8")
    lines = ["task_a,task_b,pearson,spearman"]
    for a in sorted(result["pearson"]):
        for b in sorted(result["pearson"][a]):
            lines.append(f"{a},{b},{evalkit.format_sig(result['pearson'][a][b])},"
                         f"{evalkit.format_sig(result['spearman'][a][b])}")
    (out / "corr.csv").write_text("\n".join(lines) + "\n", "utf-8")
    print((out / "corr.json").read_text("utf-8"), end="")
    return 0


def _cmd_spearman_mos(args) -> int:
    fn = _metric_fn(args.metric[0] if args.metric else "l2", args)
    rows = [r for r in csv.reader(io.StringIO(Path(args.scores).read_text("utf-8"))) if r]
    if len(rows) < 3 or [c.strip() for c in rows[0][:3]] != ["ref", "dist", "mos"]:
        raise ConfigurationError(
            "MOS file must be CSV with header ref,dist,mos and >= 2 data rows")
    base = Path(args.scores).parent
    distances, mos = [], []
    for row in rows[1:]:
        a = to_tensor(load_image(base / row[0].strip()))
        b = to_tensor(load_image(base / row[1].strip()))
        distances.append(fn(a, b))
        mos.append(float(row[2]))
    result = evalkit.spearman_vs_mos(distances, mos)
    result["n"] = len(mos)
    print(json.dumps(evalkit._round_floats(result), sort_keys=True))
    return 0


def _cmd_serve(args) -> int:
    store = ds.DatasetStore(args.dataset)
    service = CollectService(store, seed=args.seed, keep_failed=args.keep_failed,
                             ui_dir=args.ui_dir,
                             twoafc_judgments=args.twoafc_judgments)
    port = service.start(port=args.port)
    print(json.dumps({"port": port}), flush=True)
    stop = {"flag": False}

    def _handle(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, _handle)
    signal.signal(signal.SIGINT, _handle)
    try:
        while not stop["flag"]:
            time.sleep(0.1)
    finally:
        audit = service.stop()
        print(f"audit: {json.dumps(audit, sort_keys=True)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _add_common(p, *, seed=True, jobs=False):
    p.add_argument("--config", default=None, help="key=value config file overlay")
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default 0; PMK_SEED overrides the default)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel scoring workers (deterministic reduction)")


def _add_metric_flags(p, multi=True):
    if multi:
        p.add_argument("--metric", action="append",
                       choices=["l2", "psnr", "ssim", "lpips"],
                       help="metric to evaluate; repeatable")
    else:
        p.add_argument("--metric", nargs=1, choices=["l2", "psnr", "ssim", "lpips"])
    p.add_argument("--backbone", default=None, help="backbone spec JSON (lpips)")
    p.add_argument("--weights", default=None, help="backbone weight file .lpw (lpips)")
    p.add_argument("--calib", default=None,
                   help="calibration .lpw with channel weights (default: all ones)")


def build_parser() -> _Parser:
    parser = _Parser(prog="patchsim",
                     description="perceptual image-patch similarity toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dist", help="distance between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--metric", default="l2", choices=["l2", "psnr", "ssim", "lpips"])
    p.add_argument("--backbone", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--calib", default=None)
    _add_common(p, seed=False)
    p.set_defaults(func=_cmd_dist)

    p = sub.add_parser("build-2afc", help="build a 2AFC triplet dataset")
    p.add_argument("--images", required=True, help="directory of PNG/PPM images")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of triplets")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--bank-base", type=int, default=20)
    p.add_argument("--bank-composed", type=int, default=308)
    p.add_argument("--sentinels", type=int, default=ds.SENTINELS_PER_2AFC_SESSION)
    _add_common(p)
    p.set_defaults(func=_cmd_build_2afc)

    p = sub.add_parser("build-jnd", help="build a JND pair dataset")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--bank-base", type=int, default=20)
    p.add_argument("--bank-composed", type=int, default=308)
    p.add_argument("--sessions", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=_cmd_build_jnd)

    p = sub.add_parser("train", help="calibrate the metric on a labeled dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--mode", default="lin", choices=["lin", "tune", "scratch"])
    p.add_argument("--out", required=True)
    p.add_argument("--epochs-const", type=int, default=5)
    p.add_argument("--epochs-decay", type=int, default=5)
    p.add_argument("--lr0", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--loss", default="bce", choices=["bce", "margin_ranking"])
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--optimizer", default="sgd", choices=["sgd", "adam"])
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-2afc", help="score metrics on labeled triplets")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_metric_flags(p)
    _add_common(p, jobs=True)
    p.set_defaults(func=_cmd_eval_2afc)

    p = sub.add_parser("eval-jnd", help="score metrics on labeled JND pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_metric_flags(p)
    _add_common(p, jobs=True)
    p.set_defaults(func=_cmd_eval_jnd)

    p = sub.add_parser("corr", help="cross-task correlations over a score table")
    p.add_argument("--scores", required=True, help="CSV: method rows, task columns")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=_cmd_corr)

    p = sub.add_parser("spearman-mos",
                       help="rank agreement of a metric with a MOS score file")
    p.add_argument("--scores", required=True, help="CSV: ref,dist,mos")
    _add_metric_flags(p)
    _add_common(p, seed=False)
    p.set_defaults(func=_cmd_spearman_mos)

    p = sub.add_parser("serve", help="run the judgment collection service")
    p.add_argument("--dataset", required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--ui-dir", default=None)
    p.add_argument("--keep-failed", action="store_true",
                   help="retain votes from sessions that fail sentinel QA")
    p.add_argument("--twoafc-judgments", type=int, default=60)
    _add_common(p)
    p.set_defaults(func=_cmd_serve)

    return parser


def _apply_config_overlay(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sections = _parse_config_file(args.config)
        overlay = sections.get(args.command, {})
        known = set(vars(args))
        explicit = _explicit_dests(argv)
        for key, value in overlay.items():
            dest = key.replace("-", "_")
            if dest not in known:
                print(f"error[usage]: unknown config key {key!r} for {args.command}",
                      file=sys.stderr)
                sys.exit(2)
            if dest in explicit:
                continue  # flags beat the config file
            current = getattr(args, dest)
            if isinstance(current, bool):
                setattr(args, dest, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(args, dest, int(value))
            elif isinstance(current, float):
                setattr(args, dest, float(value))
            else:
                setattr(args, dest, value)
    if hasattr(args, "seed") and args.seed is None:
        args.seed = _default_seed()
    return args


def _explicit_dests(argv: list[str]) -> set[str]:
    out = set()
    for token in argv:
        if token.startswith("--"):
            out.add(token[2:].split("=", 1)[0].replace("-", "_"))
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_overlay(parser, argv)
        return args.func(args)
    except PatchSimError as e:
        print(f"error[{e.kind}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
