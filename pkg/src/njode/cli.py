"""Command-line interface: generate | train | eval | study | export.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every run is a pure function of its flags, input files, and the --seed;
config.json in the run directory replays a run exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path as FsPath

from .data import DataError, generate_dataset, read_dataset, split_dataset, write_dataset
from .nn import NonFiniteGradientError
from .sde import MODEL_KINDS, NumericBlowupError, TimeGrid
from .train import (
    EvalContext,
    StudyGrid,
    TrainConfig,
    convergence_study,
    load_checkpoint,
    train,
    write_predictions,
    write_study,
)

MODEL_ALIASES = {
    "bs": "black_scholes",
    "ou": "ornstein_uhlenbeck",
    "regime": "regime_switch",
    "sine": "sine_drift_bs",
}


def _model_from_args(args) -> object:
    kind = MODEL_ALIASES.get(args.model, args.model)
    if kind not in MODEL_KINDS:
        known = sorted(set(MODEL_KINDS) | set(MODEL_ALIASES))
        raise ValueError(f"unknown model {args.model!r}; choose from {', '.join(known)}")
    overrides = {}
    for item in args.param or []:
        if "=" not in item:
            raise ValueError(f"--param expects name=value, got {item!r}")
        name, value = item.split("=", 1)
        overrides[name] = float(value)
    if kind in ("heston", "heston_nofeller"):
        overrides.setdefault("dim", args.dim)
    elif args.dim != 1:
        raise ValueError(f"--dim applies only to the Heston variants, not {kind}")
    cls = MODEL_KINDS[kind]
    try:
        return cls(**{k: (int(v) if k == "dim" else v) for k, v in overrides.items()})
    except TypeError as exc:
        raise ValueError(f"bad parameter for {kind}: {exc}") from exc


def cmd_generate(args) -> int:
    if not 0.0 < args.obs_prob <= 1.0:
        raise ValueError("--obs-prob must be in (0, 1]")
    model = _model_from_args(args)
    grid = TimeGrid(horizon=args.t, steps=args.grid)
    ds = generate_dataset(model, grid, args.n, args.seed, obs_prob=args.obs_prob,
                          mask_mode=args.mask_mode, mask_prob=args.mask_prob,
                          workers=args.workers)
    write_dataset(ds, args.out)
    print(f"wrote {ds.n_paths} {model.kind} paths (d_x={ds.d_x}, K={grid.steps}) to {args.out}")
    return 0


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        weight_decay=args.weight_decay, hidden=args.hidden, latent=args.latent,
        dropout=args.dropout, seed=args.seed, mode=args.mode,
        eval_every=args.eval_every)


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    cfg = _config_from_args(args)
    _, reports = train(dataset, cfg, out_dir=args.out, data_dir=args.data,
                       workers=args.workers)
    if reports:
        last = reports[-1]
        print(f"epoch {last.epoch}: train {last.train_loss:.6g} "
              f"test {last.test_loss:.6g} oracle {last.oracle_loss:.6g} "
              f"rel-diff {last.relative_difference:.4g} metric {last.eval_metric:.6g}")
    print(f"run directory: {args.out}")
    return 0


def cmd_eval(args) -> int:
    run_dir = FsPath(args.run)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise DataError(f"missing {config_path}")
    with open(config_path, encoding="utf-8") as fh:
        config = json.load(fh)
    model = load_checkpoint(run_dir)
    dataset = read_dataset(args.data)
    _, test_ds = split_dataset(dataset, config["config"]["train_frac"],
                               config["split_seed"])
    try:
        ctx = EvalContext(test_ds.paths, dataset.grid, dataset.model,
                          use_masks=config["config"]["mode"] == "masked")
    except NotImplementedError as exc:
        raise ValueError(
            f"model kind {dataset.model.kind!r} has no analytic oracle; "
            "the evaluation metric cannot be computed"
            + (" (requested via --metric)" if args.metric else "")) from exc
    report = ctx.evaluate(model, epoch=config["config"]["epochs"], train_loss=float("nan"))
    print(f"test {report.test_loss:.17g}")
    print(f"oracle {report.oracle_loss:.17g}")
    print(f"relative_difference {report.relative_difference:.17g}")
    print(f"eval_metric {report.eval_metric:.17g}")
    out_dir = FsPath(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.csv", model, dataset.model, ctx)
    print(f"predictions: {out_dir / 'predictions.csv'}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def cmd_study(args) -> int:
    dataset = read_dataset(args.data)
    sgrid = StudyGrid(n1_values=sorted(args.n1), m_values=sorted(args.m),
                      repeats=args.repeats, n2=args.n2)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                      eval_every=args.eval_every)
    rows = convergence_study(dataset, sgrid, cfg, workers=args.workers)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_study(out / "study.csv", rows)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"study": {"n1": sgrid.n1_values, "m": sgrid.m_values,
                             "repeats": sgrid.repeats, "n2": sgrid.n2},
                   "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
                   "data_dir": str(args.data), "workers": args.workers},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(rows)} study rows to {out / 'study.csv'}")
    return 0


def cmd_export(args) -> int:
    from .plots import render_run

    written = render_run(args.run, data_dir=args.data, n_paths=args.paths)
    if not written:
        raise DataError(f"nothing to render in {args.run}; "
                        "need curves.csv, study.csv, or checkpoint + --data")
    for path in written:
        print(f"figure: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="njode",
        description="Continuous-time conditional-expectation forecasting of "
                    "irregularly observed SDE paths")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset of SDE paths")
    g.add_argument("--model", required=True,
                   help="bs | ou | heston | heston_nofeller | regime | sine (or full names)")
    g.add_argument("--n", type=int, required=True, help="number of paths")
    g.add_argument("--grid", type=int, default=100, help="number of grid steps K")
    g.add_argument("--t", type=float, default=1.0, help="time horizon")
    g.add_argument("--obs-prob", type=float, default=0.1,
                   help="per-grid-point observation probability")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mask-mode", choices=["full", "bernoulli"], default="full")
    g.add_argument("--mask-prob", type=float, default=1.0,
                   help="per-coordinate observation probability in bernoulli mask mode")
    g.add_argument("--dim", type=int, default=1, help="stored dimension for Heston variants")
    g.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="override a model parameter (repeatable)")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--weight-decay", type=float, default=0.0005)
    t.add_argument("--hidden", type=int, default=50)
    t.add_argument("--latent", type=int, default=10)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--mode", choices=["full", "masked"], default="full")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run's checkpoint on its test split")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", action="store_true",
                   help="require the analytic-oracle evaluation metric")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("study", help="convergence study over train size and width")
    s.add_argument("--data", required=True)
    s.add_argument("--n1", type=_int_list, required=True, help="e.g. 200,400,800")
    s.add_argument("--m", type=_int_list, required=True, help="e.g. 10,20,40")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--n2", type=int, default=4000, help="fixed test-set size")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch", type=int, default=200)
    s.add_argument("--eval-every", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_study)

    x = sub.add_parser("export", help="render figures alongside a run's CSV tables")
    x.add_argument("--run", required=True)
    x.add_argument("--data", default=None, help="dataset dir, enables prediction panels")
    x.add_argument("--paths", type=int, default=4, help="sample paths to draw")
    x.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericBlowupError, NonFiniteGradientError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
