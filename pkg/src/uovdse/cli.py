"""Command-line entry point: dataset generation, training, evaluation, deployment.

Settings can come from a flat ``key = value`` file (``--config``); flags given on
the command line override it. The fully resolved settings are written to
``run-config.resolved`` in the output directory, and that file can be fed back
through ``--config`` to repeat the run.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import deploy as dep
from . import oracle
from .costmodel import CostParams, latency
from .model import HeadMode, ModelConfig, load, save
from .space import Dataflow, DesignSpace, RangeError, Workload
from .trainer import (
    OracleModel,
    TrainConfig,
    TrainConfigError,
    default_specs,
    evaluate,
    export_embeddings,
    train_stage1,
    train_stage2,
)

RESOLVED_NAME = "run-config.resolved"
ORACLE_CKPT = "oracle"  # --ckpt value that evaluates the exhaustive labeler itself

_STAGE_EPOCHS = {1: 500, 2: 100}
_SKIP_KEYS = {"command", "config", "func", "verbose"}


class UsageError(Exception):
    """Bad argument combination discovered after parsing (exit code 2)."""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _dataflow(text) -> str:
    try:
        return Dataflow.parse(str(text)).name
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v

    conv.__name__ = kind.__name__
    return conv


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=_positive(int), default=64)
    g.add_argument("--n-heads", type=_positive(int), default=4)
    g.add_argument("--n-layers", type=_positive(int), default=2)
    g.add_argument("--d-latent", type=_positive(int), default=32)
    g.add_argument("--ffn-mult", type=_positive(int), default=4)
    g.add_argument("--k-pe", type=_positive(int), default=16, help="ordinal buckets for the PE head")
    g.add_argument("--k-buf", type=_positive(int), default=12, help="ordinal buckets for the buffer head")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="uovdse", description=__doc__.split("\n")[0], formatter_class=fmt)
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, formatter_class=fmt)
        p.add_argument("--config", help="flat key = value settings file; flags override it")
        return p

    p = cmd("gen-dataset", "label random workloads by exhaustive search")
    p.add_argument("--n", type=_positive(int), default=20000, help="number of samples")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="dataset CSV path (manifest is written beside it)")
    p.add_argument("--budget", type=int, default=DesignSpace().area_budget, help="area budget")
    p.add_argument("--bandwidth", type=_positive(int), default=CostParams().bandwidth, help="elements per cycle")
    p.add_argument("--threads", type=_positive(int), default=1)
    p.add_argument(
        "--test-count",
        type=int,
        default=0,
        help="also write <stem>.train.csv / <stem>.test.csv holding out the last N samples",
    )
    p.set_defaults(func=cmd_gen_dataset)

    p = cmd("train", "train stage 1 (encoder) or stage 2 (decoder + heads)")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--data", help="training dataset CSV")
    p.add_argument("--out", help="run directory")
    p.add_argument("--encoder", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--epochs", type=_positive(int), help="default: 500 for stage 1, 100 for stage 2")
    p.add_argument("--batch", type=_positive(int), default=TrainConfig().batch_size)
    p.add_argument("--lr", type=_positive(float), default=TrainConfig().lr)
    p.add_argument("--seed", type=int, default=0, help="seeds parameter init and shuffling")
    p.add_argument("--head", choices=("uov", "cls"), default="uov", help="stage-2 output head")
    p.add_argument("--contrastive", type=_bool, default=True, help="use the contrastive term in stage 1")
    p.add_argument("--tau", type=_positive(float), default=TrainConfig().tau)
    p.add_argument("--alpha", type=float, default=TrainConfig().alpha)
    p.add_argument("--gamma", type=float, default=TrainConfig().gamma)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = cmd("eval", "score a checkpoint on a labeled dataset")
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--ckpt", help=f"checkpoint path, or '{ORACLE_CKPT}' for the exhaustive labeler")
    p.add_argument("--out", default=".", help="directory for metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = cmd("predict", "recommend a config for one GEMM layer")
    p.add_argument("--ckpt", help=f"checkpoint path, or '{ORACLE_CKPT}'")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--dataflow", type=_dataflow, help="WS, OS or RS")
    p.set_defaults(func=cmd_predict)

    p = cmd("deploy", "pick one config for a multi-layer model")
    p.add_argument("--ckpt", help=f"checkpoint path, or '{ORACLE_CKPT}'")
    p.add_argument(
        "--model-file", help=f"layer list CSV, or a shipped sample: {', '.join(dep.SAMPLE_FILES)}"
    )
    p.add_argument("--method", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_deploy)

    p = cmd("export-embeddings", "PCA of encoder latents for plotting")
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--ckpt", help="stage-1 or stage-2 checkpoint")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_export)
    return ap


_REQUIRED = {
    "gen-dataset": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "ckpt"),
    "predict": ("ckpt", "m", "n", "k", "dataflow"),
    "deploy": ("ckpt", "model_file"),
    "export-embeddings": ("data", "ckpt", "out"),
}


# ---------------------------------------------------------------------------
# config file handling


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparser(ap: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in ap._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sp: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in values.items():
        if key not in actions:
            raise UsageError(f"unknown setting {key!r} for this subcommand")
        a = actions[key]
        if text == "":
            defaults[key] = None
            continue
        try:
            v = a.type(text) if a.type else text
        except (argparse.ArgumentTypeError, ValueError) as e:
            raise UsageError(f"setting {key}: {e}") from None
        if a.choices is not None and v not in a.choices:
            raise UsageError(f"setting {key}: {v!r} not in {sorted(a.choices)}")
        defaults[key] = v
    sp.set_defaults(**defaults)


def parse(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        sp = _subparser(ap, args.command)
        try:
            _apply_config(sp, read_config(args.config))
        except (UsageError, OSError) as e:
            sp.error(str(e))
        args = ap.parse_args(argv)
    missing = [k for k in _REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        _subparser(ap, args.command).error("missing " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _SKIP_KEYS}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def write_resolved(args, directory) -> Path:
    path = Path(directory) / RESOLVED_NAME
    lines = [f"# uovdse {args.command}"] + [f"{k} = {_fmt(v)}" for k, v in resolved(args).items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_dataset(args) -> None:
    out = Path(args.out)
    if args.test_count and not 0 < args.test_count < args.n:
        raise UsageError(f"--test-count must lie in [1, {args.n - 1}]")
    out.parent.mkdir(parents=True, exist_ok=True)
    space = DesignSpace(area_budget=args.budget)
    d = oracle.generate(args.n, args.seed, space, CostParams(bandwidth=args.bandwidth), threads=args.threads)
    oracle.write_csv(d, out)
    written = [out]
    if args.test_count:
        train, test = d.split(args.test_count)
        for part, tag in ((train, "train"), (test, "test")):
            path = out.with_name(f"{out.stem}.{tag}.csv")
            oracle.write_csv(part, path)
            written.append(path)
    write_resolved(args, out.parent)
    pe_spec, buf_spec = default_specs(space)
    report = oracle.imbalance_report(oracle.label_histogram(d, pe_spec, buf_spec))
    for path in written:
        print(f"wrote={path}")
    for k, v in report.items():
        print(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")


def cmd_train(args) -> None:
    if args.stage == 2 and not args.encoder:
        raise UsageError("stage 2 needs --encoder")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.epochs is None:
        args.epochs = _STAGE_EPOCHS[args.stage]
    data = oracle.read_csv(args.data)
    try:
        tcfg = TrainConfig(
            batch_size=args.batch,
            lr=args.lr,
            epochs_stage1=args.epochs,
            epochs_stage2=args.epochs,
            seed=args.seed,
            contrastive=args.contrastive,
            tau=args.tau,
            alpha=args.alpha,
            gamma=args.gamma,
        )
    except TrainConfigError as e:
        raise UsageError(str(e)) from None
    write_resolved(args, out)
    if args.stage == 1:
        mcfg = ModelConfig(
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_layers=args.n_layers,
            d_latent=args.d_latent,
            ffn_mult=args.ffn_mult,
            k_pe=args.k_pe,
            k_buf=args.k_buf,
            seed=args.seed,
        )
        model, hist = train_stage1(data, tcfg, mcfg, run_dir=out)
        path = out / "encoder.ckpt"
    else:
        encoder = load(args.encoder)
        encoder = replace(encoder, cfg=replace(encoder.cfg, seed=args.seed))
        head = HeadMode.UOV if args.head == "uov" else HeadMode.CLASSIFICATION
        model, hist = train_stage2(data, encoder, tcfg, head, run_dir=out)
        path = out / "model.ckpt"
    save(model, path)
    print(f"checkpoint={path}")
    print(f"final_loss={hist[-1]!r}")


def _load_predictor(ckpt: str, space=None, cost=None):
    if ckpt == ORACLE_CKPT:
        return OracleModel(space or DesignSpace(), cost or CostParams())
    model = load(ckpt)
    if model.meta.get("stage") != 2:
        raise ValueError(f"{ckpt} is a stage-1 checkpoint; train stage 2 before predicting")
    return model


def cmd_eval(args) -> None:
    data = oracle.read_csv(args.data)
    model = _load_predictor(args.ckpt, data.manifest.space, data.manifest.cost)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(args, out)
    metrics = evaluate(data, model).to_dict()
    for k, v in metrics.items():
        print(f"{k}={_fmt(v)}")
    lines = [",".join(metrics), ",".join(_fmt(v) for v in metrics.values())]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="ascii")


def cmd_predict(args) -> None:
    try:
        w = Workload(args.m, args.n, args.k, Dataflow[args.dataflow])
    except RangeError as e:
        raise UsageError(str(e)) from None
    model = _load_predictor(args.ckpt)
    cfg = model.predict_many([w])[0]
    print(f"pe={cfg.pe} buf={cfg.buf} est_latency={latency(w, cfg, model.cost)}")


def cmd_deploy(args) -> None:
    path = Path(args.model_file)
    if not path.exists() and args.model_file in dep.SAMPLE_FILES:
        path = dep.sample_path(args.model_file)
    mw = dep.load_model_workload(path)
    model = _load_predictor(args.ckpt)
    recs = model.predict_many(mw.layers)
    if args.method == 1:
        chosen = dep.method1(mw, recs, model.cost, model.space)
    else:
        chosen = dep.method2(mw, recs, model.cost)
    total = dep.model_latency(mw, chosen, model.cost)
    print(f"model={mw.name} method={args.method} layers={len(mw.layers)}")
    print(f"pe={chosen.pe} buf={chosen.buf} model_latency={total}")
    print("layer,m,n,k,dataflow,rec_pe,rec_buf,rec_latency,chosen_latency")
    for i, (w, r) in enumerate(zip(mw.layers, recs)):
        print(
            f"{i},{w.m},{w.n},{w.k},{w.dataflow.name},{r.pe},{r.buf},"
            f"{latency(w, r, model.cost)},{latency(w, chosen, model.cost)}"
        )


def cmd_export(args) -> None:
    data = oracle.read_csv(args.data)
    model = load(args.ckpt)
    out = Path(args.out)
    export_embeddings(data, model, out)
    write_resolved(args, out.parent)
    print(f"rows={len(data)} wrote={out}")


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    args = parse(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"uovdse {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError) as e:
        print(f"uovdse {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
