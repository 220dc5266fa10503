"""Command-line front end: ``drmm {gen-data,train,eval,sweep,gradcheck}``.

Exit codes: 0 success, 1 gradient check above tolerance, 2 configuration
error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace

from . import _jit, baselines, data, evaluation, inference, model
from .losses import StopGradConfig

log = logging.getLogger("drmm")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class IOFailure(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _load_scenes(path):
    try:
        return data.load(path)
    except (OSError, data.DataError) as exc:
        raise IOFailure(str(exc)) from exc


def _load_weights(path):
    try:
        return model.load_weights(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def _nms_value(text):
    if text.lower() == "none":
        return None
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("NMS threshold must lie in (0, 1] or be 'none'")
    return v


def _parse_mode(mode):
    if mode in ("drmm", "nll-only"):
        return mode, None
    if mode.startswith("bipartite:"):
        variant = mode.split(":", 1)[1]
        if variant not in baselines.VARIANTS:
            raise model.ConfigError(f"unknown bipartite variant {variant!r}; expected one of {baselines.VARIANTS}")
        return "bipartite", variant
    raise model.ConfigError(f"unknown mode {mode!r}")


def _model_config(args, num_classes):
    return model.ModelConfig(
        num_stages=args.stages,
        num_proposals=args.proposals,
        num_classes=num_classes,
        hidden_sizes=tuple(args.hidden),
        topk_ratio=args.topk_ratio,
        seed=args.seed,
        min_scale=args.min_scale,
    )


def _train_config(args, beta):
    stop = StopGradConfig(*(s in args.stop for s in ("pi", "cauchy", "categorical")))
    return model.TrainConfig(
        beta=beta, lr=args.lr, steps=args.steps, batch_size=args.batch_size,
        optimizer=args.optimizer, schedule=args.schedule, stop=stop, gauge=args.gauge, seed=args.seed,
    )


def _fit(scenes, args, beta=None, topk_ratio=None, copies=None):
    mode, variant = _parse_mode(args.mode)
    beta = args.beta if beta is None else beta
    if mode == "nll-only":
        beta = 0.0
    cfg = _model_config(args, data.num_classes_of(scenes))
    if topk_ratio is not None:
        cfg = replace(cfg, topk_ratio=topk_ratio)
    tcfg = _train_config(args, beta)
    if mode == "bipartite":
        w, hist = baselines.train_bipartite(scenes, cfg, tcfg, variant, args.copies if copies is None else copies)
    else:
        w, hist = model.train(scenes, cfg, tcfg)
    meta = {"mode": args.mode, "beta": beta, "copies": args.copies if copies is None else copies,
            "train": {k: v for k, v in vars(tcfg).items() if k != "stop"}, "stop": list(args.stop)}
    return w, cfg, hist, meta


def _r(x):
    return repr(float(x))


def _metrics(weights, cfg, scenes, nms_thresh, use_wta, top_n, beta):
    gts = {s.id: s.gts for s in scenes}
    raw = inference.predict(weights, cfg, scenes, top_n)
    preds = {k: inference.postprocess(v, nms_thresh, use_wta) for k, v in raw.items()}
    stages = evaluation.stage_diagnostics(weights, cfg, scenes, beta)
    report = evaluation.evaluate(preds, gts, per_stage_losses=stages)
    return raw, preds, report


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = data.GenConfig(height=args.height, width=args.width, num_classes=args.classes,
                         max_objects=args.max_objects, min_objects=min(args.min_objects, args.max_objects),
                         allow_overlap=args.allow_overlap)
    scenes = data.generate(args.seed, args.scenes, cfg)
    try:
        data.save(scenes, args.out)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_train(args):
    scenes = _load_scenes(args.data)
    w, cfg, hist, meta = _fit(scenes, args)
    try:
        model.save_weights(w, cfg, args.out, meta)
        if args.history:
            with open(args.history, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["step", "total"] + [f"stage{s + 1}_{k}" for s in range(cfg.num_stages)
                                                 for k in ("nll", "mcm", "ratio")])
                for h in hist:
                    wr.writerow([h["step"], _r(h["total"])] + [_r(x) for st in h["per_stage"] for x in st])
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"trained {args.mode} for {len(hist)} steps; final loss {hist[-1]['total']:.6f}" if hist
          else f"trained {args.mode} for 0 steps")


def cmd_eval(args):
    scenes = _load_scenes(args.data)
    w, cfg, meta = _load_weights(args.weights)
    beta = float(meta.get("beta", args.beta)) if args.beta is None else args.beta
    raw, preds, report = _metrics(w, cfg, scenes, args.nms_thresh, args.wta, args.top_n, beta)
    flat = [q for sid in sorted(raw) for q in raw[sid]]
    hist = evaluation.histograms([q.p for q in flat], [q.o for q in flat])
    try:
        if args.report or args.csv_dir:
            evaluation.write_report(report, args.report, args.csv_dir, hist)
        if args.predictions:
            inference.save_predictions(preds, args.predictions)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"AP {report.ap:.4f} AP50 {report.ap50:.4f} AP75 {report.ap75:.4f} AR {report.ar:.4f} "
          f"ECE {report.ece:.4f} dup {report.dup_rate:.4f}")


SWEEP_PARAMS = ("beta", "topk-ratio", "nms-thresh", "copies")


def cmd_sweep(args):
    train_scenes = _load_scenes(args.data)
    eval_scenes = _load_scenes(args.eval_data) if args.eval_data else train_scenes
    values = list(args.values)
    rows = []
    base = None
    if args.param == "nms-thresh":
        values = [_nms_value(v) for v in values]
        if args.weights:
            w, cfg, meta = _load_weights(args.weights)
            beta = float(meta.get("beta", args.beta))
        else:
            w, cfg, _, meta = _fit(train_scenes, args)
            beta = meta["beta"]
        base = (w, cfg, beta)
    else:
        values = [int(v) if args.param == "copies" else float(v) for v in values]
    for v in values:
        if args.param == "nms-thresh":
            w, cfg, beta = base
            _, _, rep = _metrics(w, cfg, eval_scenes, v, args.wta, args.top_n, beta)
            extra = {}
        else:
            kw = {"beta": v} if args.param == "beta" else {"topk_ratio": v} if args.param == "topk-ratio" \
                else {"copies": v}
            w, cfg, _, meta = _fit(train_scenes, args, **kw)
            _, _, rep = _metrics(w, cfg, eval_scenes, args.nms_thresh, args.wta, args.top_n,
                                 meta["beta"] if args.param == "beta" else args.beta)
            extra = {}
            if args.param == "copies":
                _, _, rep_nms = _metrics(w, cfg, eval_scenes, 0.5, False, args.top_n, args.beta)
                extra["ap_nms50"] = _r(rep_nms.ap)
        row = {"value": "none" if v is None else repr(v)}
        for k in ("ap", "ap50", "ap75", "ar", "ece", "dup_rate"):
            row[k] = _r(getattr(rep, k))
        row.update(extra)
        for s, (nll, ratio) in enumerate(rep.per_stage_losses, 1):
            row[f"stage{s}_nll"] = _r(nll)
            row[f"stage{s}_ratio"] = _r(ratio)
        rows.append(row)
        log.info("%s=%s AP %.4f", args.param, row["value"], rep.ap)
    try:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"wrote {len(rows)} rows to {args.csv}")


def cmd_gradcheck(args):
    scenes = _load_scenes(args.data)[: args.scenes]
    if args.weights:
        w, cfg, _ = _load_weights(args.weights)
    else:
        cfg = _model_config(args, data.num_classes_of(scenes))
        w = model.init_weights(cfg)
    res = model.gradcheck(w, cfg, scenes, n_weights=args.n_weights, beta=args.beta, h=args.h,
                          seed=args.seed, gauge=args.gauge)
    worst = max(res, key=lambda r: r[4])
    print(f"checked {len(res)} weights; max relative error {worst[4]:.3e} at {worst[0]}[{worst[1]}]")
    return EXIT_OK if worst[4] < args.tol else EXIT_CHECK


# ------------------------------------------------------------------- parser

def _add_model_flags(p):
    d, t = model.ModelConfig(), model.TrainConfig()
    p.add_argument("--mode", default="drmm", help="drmm | nll-only | bipartite:<eq1|matched-nll|nll-mcm>")
    p.add_argument("--beta", type=float, default=t.beta)
    p.add_argument("--stages", type=int, default=d.num_stages)
    p.add_argument("--proposals", type=int, default=d.num_proposals)
    p.add_argument("--topk-ratio", type=float, default=d.topk_ratio)
    p.add_argument("--hidden", type=int, nargs="+", default=list(d.hidden_sizes))
    p.add_argument("--min-scale", type=float, default=d.min_scale)
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--steps", type=int, default=t.steps)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--optimizer", default=t.optimizer, choices=["sgd", "momentum", "adam"])
    p.add_argument("--schedule", default=t.schedule, choices=["constant", "cosine"])
    p.add_argument("--gauge", type=float, default=t.gauge, help="objectness count-gauge weight")
    p.add_argument("--stop", nargs="*", default=["cauchy"], choices=["pi", "cauchy", "categorical"],
                   help="factors stop-gradiented inside MCM")


def _add_eval_flags(p):
    p.add_argument("--nms-thresh", type=_nms_value, default=None)
    p.add_argument("--wta", action="store_true")
    p.add_argument("--top-n", type=int, default=100)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=0, help="cap on worker threads (results unchanged)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="drmm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=500)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--allow-overlap", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="optional CSV of per-step losses")
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate trained weights")
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--report")
    e.add_argument("--csv-dir")
    e.add_argument("--predictions", help="optional JSONL of post-processed predictions")
    e.add_argument("--beta", type=float, default=None, help="beta for stage diagnostics (default: from weights)")
    _add_eval_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="train/evaluate over a parameter grid")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, nargs="+")
    s.add_argument("--csv", required=True)
    s.add_argument("--data", required=True, help="training scenes")
    s.add_argument("--eval-data", help="evaluation scenes (default: training scenes)")
    s.add_argument("--weights", help="nms-thresh sweep: evaluate these weights instead of training")
    _add_model_flags(s)
    _add_eval_flags(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--data", required=True)
    c.add_argument("--weights", help="weights to check (default: fresh initialization)")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--n-weights", type=int, default=50)
    c.add_argument("--scenes", type=int, default=2)
    c.add_argument("--h", type=float, default=1e-5)
    _add_model_flags(c)
    c.set_defaults(func=cmd_gradcheck, gauge=0.0)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _jit.set_threads(args.threads)
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except IOFailure as exc:
        print(f"drmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"drmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except model.NumericError as exc:
        print(f"drmm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"drmm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
