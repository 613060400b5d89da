"""``csunet`` command line: train, eval, predict, params, gradcheck, ablate, dump-config.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 verification failure.  ``CSUNET_NUM_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_io
from . import gradsuite
from .config import PRESETS, RunConfig
from .data import RasterError, image_from_raster, load_directory, pnm_maxval, read_pnm, write_pnm
from .metrics import aggregate, case_metrics
from .network import ABLATION_ROWS, ablation_config, count_params, init_params, param_report, predict
from .serialization import FormatError
from .tensor import ConfigError, ShapeError, Tensor, UsageError
from .trainer import build_datasets, evaluate, load_params, train

log = logging.getLogger("csunet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
THREADS_ENV = "CSUNET_NUM_THREADS"


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the usage code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class VerificationFailed(Exception):
    pass


# -- helpers ---------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    base = PRESETS[args.preset]()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"{args.config}: {e}") from None
        base = config_io.loads(text, base)
    for item in args.set or ():
        config_io.apply_override(base, item)
    return base.validate()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="INI run config (defaults to the preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny", help="defaults the config file starts from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")


def _fmt_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def metrics_rows(metrics: dict, names: Sequence[str]) -> list[dict]:
    """One record per foreground class and a final ``mean`` record."""
    rows = [
        {"class_id": k, "class": names[k], "dsc": float(metrics["dsc"][k - 1]), "hd95": float(metrics["hd95"][k - 1])}
        for k in range(1, len(names))
    ]
    rows.append({"class_id": None, "class": "mean", "dsc": metrics["mean_dsc"], "hd95": metrics["mean_hd95"]})
    return rows


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    run = _run_config(args)
    out = Path(args.out or run.output_dir)
    train_set, val_set = build_datasets(run)
    res = train(run, train_set, val_set, out, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"run dir: {out}")
    if last:
        print(f"final epoch {last['epoch']}: val mean DSC {last['val_mean_dsc']:.4f}, "
              f"val mean HD95 {last['val_mean_hd']:.2f} px; best DSC {res.best_dsc:.4f}")
    return EXIT_OK


def _eval_samples(run: RunConfig, data: str | None):
    if data:
        return load_directory(data)
    return build_datasets(run)[1]


def cmd_eval(args) -> int:
    params, cfg, manifest = load_params(args.checkpoint)
    run = config_io.loads(manifest["config"], RunConfig())
    run.model = cfg
    samples = _eval_samples(run, args.data)
    names = run.class_names()
    pct = run.train.hd_percentile
    if args.predictions:
        cases = []
        for s in samples:
            pred = read_pnm(Path(args.predictions) / f"{s.id}.pgm").astype(np.int64)
            if pred.shape != s.mask.shape:
                raise RasterError(f"prediction {s.id}: shape {pred.shape} vs mask {s.mask.shape}")
            cases.append(case_metrics(pred, s.mask, cfg.num_classes, pct))
        metrics = aggregate(cases)
    else:
        metrics = evaluate(params, cfg, samples, percentile=pct)
    rows = metrics_rows(metrics, names)
    print(_fmt_table(["class", "DSC", "HD95 (px)"], [[r["class"], f"{r['dsc']:.4f}", f"{r['hd95']:.2f}"] for r in rows]))
    out = Path(args.records or Path(args.checkpoint).with_suffix(".eval.jsonl"))
    with open(out, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    print(f"records: {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, cfg, manifest = load_params(args.checkpoint)
    run = config_io.loads(manifest["config"], RunConfig())
    run.model = cfg
    raster = read_pnm(args.image)
    img = image_from_raster(raster, pnm_maxval(args.image))
    if img.shape[0] != cfg.in_channels or tuple(img.shape[1:]) != cfg.input_size:
        h, w = cfg.input_size
        raise ShapeError(
            f"{args.image}: image is {img.shape[2]}x{img.shape[1]} (WxH) but the model expects {w}x{h}; "
            f"resize it first, e.g. to {w}x{h} pixels"
        )
    mask = predict(Tensor(img[None]), params, cfg)[0]
    out = Path(args.out)
    write_pnm(out, mask.astype(np.uint8 if cfg.num_classes <= 256 else np.uint16))
    legend = out.with_name(out.name + ".legend.txt")
    legend.write_text("".join(f"{k} {name}\n" for k, name in enumerate(run.class_names())))
    print(f"mask: {out}\nlegend: {legend}")
    return EXIT_OK


def cmd_params(args) -> int:
    run = _run_config(args)
    cfg = run.model if args.method is None else ablation_config(args.method, run.model)
    params = init_params(cfg)
    report = param_report(params, args.depth)
    rows = [[k, f"{v:,}"] for k, v in report.items()]
    total = count_params(params)
    rows.append(["total", f"{total:,}"])
    print(_fmt_table(["module", "parameters"], rows))
    print(f"total: {total / 1e6:.2f}M")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.scope == "all":
        names = list(gradsuite.CASES) + ["full"]
    elif args.scope == "full" or args.scope in gradsuite.CASES:
        names = [args.scope]
    else:
        raise UsageError(f"unknown op {args.scope!r}; choose from: all, full, {', '.join(gradsuite.CASES)}")
    rows, failed = [], []
    for name in names:
        res = gradsuite.run_full(args.seed) if name == "full" else gradsuite.run_case(name, args.seed)
        rows.append([name, res.tier, f"{res.error:.2e}", f"{res.tolerance:.0e}", "ok" if res.passed else "FAIL"])
        if not res.passed:
            failed.append(name)
    print(_fmt_table(["op", "tier", "max rel err", "tol", "status"], rows))
    if failed:
        raise VerificationFailed(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def _mark(v: bool) -> str:
    return "x" if v else "-"


def cmd_ablate(args) -> int:
    ids = args.ids or list(ABLATION_ROWS)
    for i in ids:
        if i not in ABLATION_ROWS:
            raise UsageError(f"ablation id {i} outside 0..6")
    run = _run_config(args)
    # the parameter column uses the full-size model unless a config was given
    count_base = run.model if args.config or args.set else PRESETS["full"]().model
    header = ["id", "Emb", "Proj", "Pos", "Att", "DSF", "SC", "#param (M)"]
    if args.train:
        header += ["tiny DSC", "tiny HD95"]
    rows = []
    for i in ids:
        row = [str(i), *(_mark(v) for v in ABLATION_ROWS[i])]
        row.append(f"{count_params(init_params(ablation_config(i, count_base))) / 1e6:.2f}")
        if args.train:
            variant = RunConfig(ablation_config(i, run.model), run.train, run.data, run.output_dir).validate()
            tr, va = build_datasets(variant)
            last = train(variant, tr, va, Path(args.out) / f"method{i}").history[-1]
            row += [f"{last['val_mean_dsc']:.4f}", f"{last['val_mean_hd']:.2f}"]
        rows.append(row)
    print(_fmt_table(header, rows))
    return EXIT_OK


def cmd_dump_config(args) -> int:
    sys.stdout.write(config_io.dumps(_run_config(args)))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csunet", description="Convolutional Swin-Unet segmentation on numpy.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    _add_config_args(t)
    t.add_argument("--out", help="run directory (default: output.dir of the config)")
    t.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset directory with images/ and masks/ (default: the run's validation set)")
    e.add_argument("--predictions", help="score masks <id>.pgm from this directory instead of running the model")
    e.add_argument("--records", help="JSON-lines output file (default: <checkpoint>.eval.jsonl)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one PNM image")
    r.add_argument("checkpoint")
    r.add_argument("image")
    r.add_argument("out", help="output mask path (binary PGM); a .legend.txt sidecar is written next to it")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("params", help="parameter counts per module")
    _add_config_args(c)
    c.add_argument("--method", type=int, choices=sorted(ABLATION_ROWS), help="apply an ablation row first")
    c.add_argument("--depth", type=int, default=2, help="name components per report line")
    c.set_defaults(func=cmd_params)

    g = sub.add_parser("gradcheck", help="float64 finite-difference gradient checks")
    g.add_argument("scope", help="op name, 'full' (tiny model) or 'all'")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="ablation grid: parameter counts and optional tiny training")
    a.add_argument("ids", nargs="*", type=int, help="ablation ids (default 0..6)")
    a.add_argument("--config", help="INI run config; its model is the base for counts and training")
    a.add_argument("--preset", choices=sorted(PRESETS), default="tiny", help="defaults for training runs")
    a.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    a.add_argument("--train", action="store_true", help="also train each variant at tiny scale")
    a.add_argument("--out", default="runs/ablate", help="parent directory of the training runs")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-config", help="print the resolved configuration")
    _add_config_args(d)
    d.set_defaults(func=cmd_dump_config)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RasterError, FormatError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VerificationFailed as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
