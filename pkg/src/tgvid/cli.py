"""``tgvid`` command line: gen-data, train, eval, ensemble, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, RunConfig, derive_seed, parse_spec

EXIT_USAGE = 1
EXIT_NUMERIC = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def _load_dataset(path):
    from .data import read_dataset

    if not os.path.exists(path):
        raise UsageError(f"dataset {path} does not exist")
    return read_dataset(path, symmetry="motion")


def model_id_for(checkpoint_path):
    """Runs are identified by the directory holding their checkpoints."""
    parent = os.path.basename(os.path.dirname(os.path.abspath(checkpoint_path)))
    return parent or os.path.splitext(os.path.basename(checkpoint_path))[0]


def cmd_gen_data(args):
    from .data import generate_synthetic, write_dataset

    spec = parse_spec(_read(args.spec), args.seed, args.spec)
    ds = generate_synthetic(spec)
    write_dataset(ds, args.out)
    lines = [f"{f} = {getattr(spec, f)}" for f in spec.__dataclass_fields__]
    with open(args.out + ".resolved.txt", "w") as fh:
        fh.write(f"# resolved with --seed {args.seed}\n" + "\n".join(lines) + "\n")
    c, t, h, w = ds.shape
    print(f"{len(ds.clips)} clips, {ds.num_classes} classes, {c}x{t}x{h}x{w} (C x T x H x W) -> {args.out}")
    return 0


def cmd_train(args):
    from .train import train

    cfg = RunConfig.parse(_read(args.config), args.seed, args.config)
    ds = _load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.cfg"), "w") as fh:
        fh.write(cfg.text())
    log_path = os.path.join(args.out, "metrics.log")
    result = train(cfg.plan(args.out), cfg.model, ds, log_path=log_path, resume=args.resume,
                   init_seed=cfg.init_seed)
    acc = ",".join(format(a, ".4f") for a in result.stage_accuracy)
    print(f"trained {len(result.log)} epochs; stage val accuracy {acc}; checkpoints in {args.out}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint, restore
    from .evaluate import TTAVariant, evaluate, export_logits, variant_from_cli

    try:
        name = variant_from_cli(args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.clips < 1:
        raise UsageError("--clips must be positive")
    ckpt = load_checkpoint(args.checkpoint)
    model = restore(ckpt)
    ds = _load_dataset(args.data)
    if ds.num_classes != model.config.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes, checkpoint model has {model.config.num_classes}")
    _, val = ds.split()
    variant = TTAVariant(name, args.stride, model.config.input_mode)
    acc, records = evaluate(model, val, variant, ds, num_clips=args.clips,
                            seed=derive_seed(args.seed, "eval"), model_id=model_id_for(args.checkpoint))
    if args.logits_out:
        export_logits(records, args.logits_out, labels={c.id: c.label for c in val})
        with open(args.logits_out + ".resolved.txt", "w") as fh:
            fh.write(f"# resolved with --seed {args.seed}\ncheckpoint = {args.checkpoint}\n"
                     f"variant = {name}\nstride = {args.stride}\nclips = {args.clips}\n"
                     f"input_mode = {model.config.input_mode}\n[model]\n{model.config.text()}")
    print(f"accuracy {acc:.17g}")
    return 0


def cmd_ensemble(args):
    from .evaluate import EnsembleSpec, LogitRecord, ensemble, export_logits, read_logits

    try:
        spec = EnsembleSpec.parse(args.spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records, labels = [], {}
    for path in args.logits:
        if not os.path.exists(path):
            raise UsageError(f"logit file {path} does not exist")
        recs, labs = read_logits(path)
        records += recs
        labels.update(labs)
    fused, acc = ensemble(spec, records, labels or None)
    variant = spec.members[0].variant
    export_logits([LogitRecord(v, "ensemble", variant, z) for v, z in fused.items()], args.out, labels)
    if acc is None:
        print(f"fused {len(fused)} videos (no labels, accuracy unavailable) -> {args.out}")
    else:
        print(f"accuracy {acc:.17g}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(args.filter)
    if not results:
        print(f"0 ops match {args.filter!r}")
        return 0
    width = max(len(r.name) for r in results)
    for r in results:
        verdict = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err {r.max_rel_error:.3e}  threshold {r.threshold:.0e}  {verdict}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops passed")
    return EXIT_NUMERIC if failed else 0


def build_parser():
    p = _Parser(prog="tgvid", description="Temporal video classifiers trained from scratch on numpy.")
    p.add_argument("--seed", type=int, default=42, help="root seed for the data, init, augment and eval streams")
    p.add_argument("--threads", type=int, default=None, help="pin the BLAS thread count")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic motion dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a training plan")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint written by an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--variant", default="center-crop")
    e.add_argument("--stride", type=int, choices=(1, 2), default=1)
    e.add_argument("--clips", type=int, default=10)
    e.add_argument("--logits-out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble", help="fuse pre-softmax logits")
    s.add_argument("--logits", nargs="+", required=True)
    s.add_argument("--spec", required=True, help="model:variant[:stride[:mode]][*mult], comma separated")
    s.add_argument("--out", default="fused.logits")
    s.set_defaults(func=cmd_ensemble)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--filter", default="*", help="glob over op names")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    from .train import NumericalError

    args = build_parser().parse_args(argv)
    limiter = None
    if args.threads is not None:
        if args.threads < 1:
            print("tgvid: error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"tgvid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"tgvid: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
