"""Command line: ``srmm gen|train|eval|sweep|gradcheck|dump``.

Exit codes: 0 success, 1 check failure, 2 I/O error, 3 data integrity,
64 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import netcore
from .data import MaskSpec, NoiseSpec, apply_mask, corrupt, gen_synthetic, pair_banks, read_bank, split, write_bank
from .errors import ConfigError, SRMMError
from .evaluate import (
    MISSING_GRID,
    degradation_delta,
    dump_block2,
    format_delta,
    mask_seed,
    noise_seed,
    score,
    sweep_corruption,
    sweep_missing,
)
from .models import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    ModelConfig,
    OptimizerConfig,
    build_model,
    build_two_branch,
    default_layer_dim,
    load_model,
    model_sha,
    save_model,
    train,
)

log = logging.getLogger("srmm")

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_DATA, EXIT_USAGE = 0, 1, 2, 3, 64

MODEL_CHOICES = {
    "srmm": None,
    "tbn-early": "early",
    "tbn-mid": "mid",
    "tbn-late": "late",
}

EVAL_SCHEMA = {
    "type": "object",
    "required": [
        "metric_kind", "value", "complete_value", "delta", "delta_pct", "n",
        "counts", "mask_a", "mask_b", "sigma", "seed", "model_sha", "subset",
    ],
    "properties": {
        "metric_kind": {"enum": ["accuracy", "auroc"]},
        "value": {"type": "number", "minimum": 0, "maximum": 1},
        "complete_value": {"type": "number", "minimum": 0, "maximum": 1},
        "delta": {"type": "number"},
        "delta_pct": {"type": "string", "pattern": r"^-?\d+\.\d%$"},
        "n": {"type": "integer", "minimum": 1},
        "counts": {
            "type": "object",
            "required": ["both", "a_only", "b_only"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("both", "a_only", "b_only")},
        },
        "mask_a": {"type": ["number", "null"]},
        "mask_b": {"type": ["number", "null"]},
        "sigma": {"type": ["number", "null"]},
        "seed": {"type": "integer"},
        "model_sha": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "subset": {"enum": ["train", "test", "all"]},
        "model_config": {"type": "object"},
    },
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_data_flags(p, subset_default="test"):
    p.add_argument("--bank-a", help="modality A bank (.sbeb or .csv)")
    p.add_argument("--bank-b", help="modality B bank (.sbeb or .csv)")
    p.add_argument("--train-fraction", type=float, default=0.75,
                   help="stratified train share; 1.0 uses every instance for both subsets")
    p.add_argument("--data-seed", type=int, default=0, help="split seed")
    p.add_argument("--subset", choices=["train", "test", "all"], default=subset_default)


def _add_config_flag(p):
    p.add_argument("--config", help="JSON file of flag values (flat keys, dots or dashes); flags win")


def build_parser():
    parser = _Parser(prog="srmm", description="Single-branch multimodal classifier and robustness benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic two-modality benchmark")
    _add_config_flag(g)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim-a", type=int, default=32)
    g.add_argument("--dim-b", type=int, default=32)
    g.add_argument("--per-class", type=int, default=500)
    g.add_argument("--sigma-a", type=float, default=0.3)
    g.add_argument("--sigma-b", type=float, default=0.3)
    g.add_argument("--rho", type=float, default=0.5, help="cross-modal noise correlation")
    g.add_argument("--align", type=float, default=1.0, help="cross-modal centroid alignment")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--format", choices=["sbeb", "csv"], default="sbeb")
    g.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a model on two banks")
    _add_config_flag(t)
    _add_data_flags(t, subset_default="train")
    t.add_argument("--model", choices=sorted(MODEL_CHOICES), default="srmm")
    t.add_argument("--switch", choices=["s1", "s2", "s3"], default="s1")
    t.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    t.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--beta1", type=float, default=0.9)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--adam-eps", type=float, default=1e-8)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--layer-dim", type=int, help="hidden width (default 2048 for 512-d input, else input_dim)")
    t.add_argument("--seed", type=int, default=0, help="model init and training seed")
    t.add_argument("--train-avail-a", type=float, default=1.0)
    t.add_argument("--train-avail-b", type=float, default=1.0)
    t.add_argument("--mask-seed", type=int, default=0)
    t.add_argument("--out", help="model file to write")
    t.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")

    e = sub.add_parser("eval", help="evaluate a model, optionally masked or corrupted")
    _add_config_flag(e)
    _add_data_flags(e)
    e.add_argument("--model-file")
    e.add_argument("--mask-a", type=float)
    e.add_argument("--mask-b", type=float)
    e.add_argument("--sigma", type=float)
    e.add_argument("--seed", type=int, default=0, help="mask/noise seed")
    e.add_argument("--metric", choices=["accuracy", "auroc"], default="accuracy")
    e.add_argument("--fusion-space", choices=["prob", "logit"], default="prob")

    s = sub.add_parser("sweep", help="missing-modality and/or corruption sweeps")
    _add_config_flag(s)
    _add_data_flags(s)
    s.add_argument("--model-file")
    s.add_argument("--grid", type=_floats, help="availability levels (default 1.0,0.9,0.7,0.5,0.3,0.1,0.0)")
    s.add_argument("--sigmas", type=_floats, help="noise levels for a corruption sweep")
    s.add_argument("--target", choices=["a", "b"], default="b", help="modality dropped in the missing sweep")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--metric", choices=["accuracy", "auroc"], default="accuracy")
    s.add_argument("--fusion-space", choices=["prob", "logit"], default="prob")
    s.add_argument("--strategy", help="switching strategy label recorded in the report")
    s.add_argument("--out", help="output prefix; writes <out>_missing.{json,csv} / <out>_corruption.{json,csv}")

    c = sub.add_parser("gradcheck", help="finite-difference check of the single-branch stack")
    _add_config_flag(c)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--prec", choices=["double", "single"], default="double")
    c.add_argument("--inject-fault", action="store_true", help="double one analytic weight gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--input-dim", type=int, default=16)
    c.add_argument("--layer-dim", type=int, default=32)
    c.add_argument("--classes", type=int, default=5)
    c.add_argument("--batch", type=int, default=8)
    c.add_argument("--threshold", type=float, default=1e-4)

    d = sub.add_parser("dump", help="write block-2 embeddings to CSV")
    _add_config_flag(d)
    _add_data_flags(d)
    d.add_argument("--model-file")
    d.add_argument("--mask-a", type=float)
    d.add_argument("--mask-b", type=float)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--modalities", choices=["both", "A", "B"], default="both")
    d.add_argument("--out")
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with defaults taken from ``--config`` when given."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, encoding="utf-8") as f:
            values = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        norm = key.replace("-", "_").replace(".", "_")
        tail = key.rsplit(".", 1)[-1].replace("-", "_")
        dest = norm if norm in dests else tail if tail in dests else None
        if dest is None or dest == "config":
            raise UsageError(f"config key {key!r} is not a flag of '{args.command}'")
        action = dests[dest]
        if isinstance(value, list) and action.type is _floats:
            value = [float(v) for v in value]
        elif isinstance(value, str) and action.type not in (None, str):
            value = action.type(value)
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"'{args.command}' requires {flags}")


def _load_split(args):
    _require(args, "bank_a", "bank_b")
    ds = pair_banks(read_bank(args.bank_a), read_bank(args.bank_b))
    if args.subset == "all" or args.train_fraction >= 1.0:
        return ds
    train_ds, test_ds = split(ds, args.train_fraction, args.data_seed)
    return train_ds if args.subset == "train" else test_ds


def _mask_eval_view(ds, args):
    for modality, level in (("A", args.mask_a), ("B", args.mask_b)):
        if level is not None:
            ds = apply_mask(ds, MaskSpec(modality, level, mask_seed(args.seed, level)))
    return ds


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank_a, bank_b = gen_synthetic(
        args.classes, args.dim_a, args.dim_b, args.per_class, args.sigma_a, args.sigma_b,
        args.rho, args.seed, centroid_alignment=args.align,
    )
    ext = "csv" if args.format == "csv" else "sbeb"
    files = {"a": f"bank_a.{ext}", "b": f"bank_b.{ext}"}
    write_bank(bank_a, out / files["a"])
    write_bank(bank_b, out / files["b"])
    manifest = {
        "generator": "gaussian-clusters",
        "classes": args.classes, "dim_a": args.dim_a, "dim_b": args.dim_b,
        "per_class": args.per_class, "sigma_a": args.sigma_a, "sigma_b": args.sigma_b,
        "rho": args.rho, "align": args.align, "seed": args.seed,
        "records": {"a": len(bank_a), "b": len(bank_b)},
        "files": files,
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d + %d records to %s", len(bank_a), len(bank_b), out)
    return EXIT_OK


def cmd_train(args):
    _require(args, "out")
    ds = _load_split(args)
    if args.train_avail_a < 1.0:
        ds = apply_mask(ds, MaskSpec("A", args.train_avail_a, args.mask_seed, phase="train"))
    if args.train_avail_b < 1.0:
        ds = apply_mask(ds, MaskSpec("B", args.train_avail_b, args.mask_seed, phase="train"))

    if ds.dim_a != ds.dim_b:
        raise ConfigError(f"modality widths differ ({ds.dim_a} vs {ds.dim_b}); both branches need one input_dim")
    layer_dim = args.layer_dim or default_layer_dim(ds.dim_a)
    cfg = ModelConfig(ds.dim_a, layer_dim, ds.num_classes, args.dropout, seed=args.seed)
    fusion = MODEL_CHOICES[args.model]
    model = build_model(cfg) if fusion is None else build_two_branch(cfg, fusion)
    opt = OptimizerConfig(args.lr, args.beta1, args.beta2, args.adam_eps)

    history = train(model, ds, args.switch.upper(), args.epochs, args.batch_size, opt, seed=args.seed)
    save_model(model, args.out)

    log_path = args.log or f"{args.out}.log.jsonl"
    with open(log_path, "w", encoding="utf-8") as f:
        header = {
            "event": "config", "model": args.model, "switch": args.switch, "epochs": args.epochs,
            "batch_size": args.batch_size, "lr": args.lr, "beta1": args.beta1, "beta2": args.beta2,
            "adam_eps": args.adam_eps, "dropout": cfg.p_drop, "layer_dim": layer_dim,
            "input_dim": cfg.input_dim, "num_classes": cfg.num_classes, "seed": args.seed,
            "data_seed": args.data_seed, "train_fraction": args.train_fraction,
            "train_avail_a": args.train_avail_a, "train_avail_b": args.train_avail_b,
            "instances": len(ds), "counts": ds.counts(),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for entry in history:
            f.write(json.dumps({"event": "epoch", **entry}, sort_keys=True) + "\n")
    final = history.final
    if final:
        log.info("trained %s for %d epochs: loss %.4f, train accuracy %.4f",
                 args.model, len(history), final["loss"], final["train_accuracy"])
    log.info("model written to %s (sha256 %s)", args.out, model_sha(model)[:12])
    return EXIT_OK


def cmd_eval(args):
    _require(args, "model_file")
    model = load_model(args.model_file)
    clean = _load_split(args)
    ds = _mask_eval_view(clean, args)
    if args.sigma is not None:
        ds = corrupt(ds, NoiseSpec(args.sigma, 0.0, 1.0, noise_seed(args.seed, args.sigma)), "both")
    complete = score(model, clean, args.metric, args.fusion_space)
    result = score(model, ds, args.metric, args.fusion_space)
    delta = degradation_delta(complete.value, result.value)
    out = {
        "metric_kind": args.metric,
        "value": result.value,
        "complete_value": complete.value,
        "delta": delta,
        "delta_pct": format_delta(delta),
        "n": result.n,
        "counts": ds.counts(),
        "mask_a": args.mask_a,
        "mask_b": args.mask_b,
        "sigma": args.sigma,
        "seed": args.seed,
        "model_sha": model_sha(model),
        "subset": args.subset,
        "model_config": vars(model.config),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args):
    _require(args, "model_file", "out")
    model = load_model(args.model_file)
    ds = _load_split(args)
    written = []
    run_missing = args.grid is not None or args.sigmas is None
    if run_missing:
        report = sweep_missing(
            model, ds, args.target.upper(), args.grid or MISSING_GRID, args.seed,
            args.metric, args.fusion_space, args.strategy,
        )
        report.extra["model_config"] = vars(model.config)
        report.write(f"{args.out}_missing.json", f"{args.out}_missing.csv")
        written.append(f"{args.out}_missing")
        for level, value, delta in zip(report.grid, report.values, report.deltas):
            log.info("availability %.2f: %s %.4f (delta %s)", level, args.metric, value, format_delta(delta))
    if args.sigmas is not None:
        report = sweep_corruption(
            model, ds, args.sigmas, args.seed, args.metric, args.fusion_space, "both", args.strategy,
        )
        report.extra["model_config"] = vars(model.config)
        report.write(f"{args.out}_corruption.json", f"{args.out}_corruption.csv")
        written.append(f"{args.out}_corruption")
        for sigma, value in zip(report.grid, report.values):
            log.info("sigma %.2f: %s %.4f", sigma, args.metric, value)
    log.info("wrote %s", ", ".join(p + ".{json,csv}" for p in written))
    return EXIT_OK


def srmm_gradcheck(input_dim=16, layer_dim=32, classes=5, batch=8, eps=1e-5, seed=0,
                   prec="double", inject_fault=False):
    """Per-layer and whole-network gradient errors for a random single-branch stack."""
    dtype = np.float64 if prec == "double" else np.float32
    model = build_model(ModelConfig(input_dim, layer_dim, classes, 0.5, seed=seed))
    rng = np.random.default_rng(seed + 1)
    layers = [layer for block in model.trunk for layer in block]
    for layer in layers:
        for k in layer.params:
            layer.params[k] = layer.params[k].astype(dtype)
    x = rng.standard_normal((batch, input_dim)).astype(dtype)
    labels = rng.integers(0, classes, size=batch)

    rows = []
    h = x
    for i, layer in enumerate(layers):
        probe = h.copy()
        if isinstance(layer, netcore.ReLU):
            # keep inputs clear of the kink
            probe = np.where(np.abs(probe) < 1e-2, np.where(probe < 0, -1e-2, 1e-2), probe)
        errs = netcore.layer_grad_check(layer, probe, eps=eps, train=True, seed=seed + i)
        rows.append((f"{i}:{layer.kind}", max(errs.values())))
        h = layer.forward(h, train=True, rng=np.random.default_rng(seed))

    ce = netcore.SoftmaxCrossEntropy()
    logits = h.copy()

    def ce_loss():
        return ce.forward(logits, labels)[0]

    ce_loss()
    analytic = ce.backward().reshape(-1)
    numeric = np.array([netcore._numeric_grad(ce_loss, logits, j, eps) for j in range(logits.size)])
    rows.append(("softmax_ce", float(netcore.relative_error(analytic, numeric).max())))

    scale = {"0.weight": 2.0} if inject_fault else None
    full = netcore.grad_check(model.trunk, x, labels, eps=eps, seed=seed, scale_grads=scale)
    rows.append(("network", full))
    return rows


def cmd_gradcheck(args):
    rows = srmm_gradcheck(args.input_dim, args.layer_dim, args.classes, args.batch, args.eps,
                          args.seed, args.prec, args.inject_fault)
    worst = max(err for _, err in rows)
    passed = worst < args.threshold
    print(f"gradcheck eps={args.eps:g} prec={args.prec} inject_fault={args.inject_fault}")
    print(f"{'check':<14} {'max_rel_error':>14}")
    for name, err in rows:
        print(f"{name:<14} {err:>14.3e}")
    print(f"max relative error {worst:.3e} -> {'PASS' if passed else 'FAIL'} (threshold {args.threshold:g})")
    return EXIT_OK if passed else EXIT_CHECK


def cmd_dump(args):
    _require(args, "model_file", "out")
    model = load_model(args.model_file)
    ds = _mask_eval_view(_load_split(args), args)
    modalities = ("A", "B") if args.modalities == "both" else (args.modalities,)
    n = dump_block2(model, ds, args.out, modalities)
    log.info("wrote %d embedding rows to %s", n, args.out)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "dump": cmd_dump,
}


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = _apply_config_file(parser, argv)
        except SystemExit as exc:  # argparse usage errors and --help
            return exc.code if isinstance(exc.code, int) else EXIT_USAGE
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(message)s", stream=sys.stderr,
        )
        return COMMANDS[args.command](args)
    except SRMMError as exc:
        print(f"srmm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"srmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
