"""Command-line surface: dataset generation, teacher/student training,
evaluation, and attention export.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data error,
4 numerical failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ResolutionSpec, degrade, load_image, load_manifest
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .estimators import MultiTaskViTClassifier
from .losses import SCHEMES
from .metrics import evaluate, export_attention
from .synth import SyntheticConfig, generate_synthetic

_NAMED_FRACTIONS = {"112": 2, "56": 4, "28": 8}  # named LR settings: native/k


def parse_resolution(text: str, native: int) -> int:
    """Resolve a --resolution value against the dataset's native size.

    "native" keeps the native size; "112"/"56"/"28" are the half/quarter/
    eighth settings (literal pixel counts when native is 224); any other
    integer is a literal pixel target.
    """
    if text == "native":
        return native
    if text in _NAMED_FRACTIONS:
        return native // _NAMED_FRACTIONS[text]
    try:
        target = int(text)
    except ValueError:
        raise ConfigError(
            f"--resolution must be native, 112, 56, 28, or an integer; got '{text}'"
        ) from None
    if target < 1:
        raise ConfigError(f"--resolution must be positive, got {target}")
    return target


def _arch_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--variant", default="tiny",
                     choices=["tiny", "small", "base", "custom"])
    sub.add_argument("--depth", type=int, default=None)
    sub.add_argument("--embed-dim", type=int, default=None)
    sub.add_argument("--heads", type=int, default=None)
    sub.add_argument("--image-size", type=int, default=64)
    sub.add_argument("--patch-size", type=int, default=8)


def _train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--epochs", type=int, default=100)
    sub.add_argument("--batch-size", type=int, default=64)
    sub.add_argument("--lr", type=float, default=5e-4)
    sub.add_argument("--min-lr", type=float, default=0.0)
    sub.add_argument("--weight-decay", type=float, default=0.01)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--data", required=True, help="dataset directory")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--resume", action="store_true",
                     help=argparse.SUPPRESS)  # rejected; runs are short by design


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="mlcak",
        description="Multilevel collaborative attention knowledge transfer "
                    "for low-resolution image classification.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    sd = subs.add_parser("synth-data", help="generate a synthetic dataset")
    sd.add_argument("--samples", type=int, default=512)
    sd.add_argument("--findings", type=int, default=8)
    sd.add_argument("--image-size", type=int, default=64)
    sd.add_argument("--blob-radius", type=int, nargs=2, default=None,
                    metavar=("MIN", "MAX"))
    sd.add_argument("--noise-sigma", type=float, default=0.02)
    sd.add_argument("--abnormal-fraction", type=float, default=0.5)
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--out", required=True)
    sd.set_defaults(func=cmd_synth_data)
    registry["synth-data"] = sd

    tt = subs.add_parser("train-teacher",
                         help="train a native-resolution teacher (plain multi-task)")
    _arch_flags(tt)
    _train_flags(tt)
    tt.set_defaults(func=cmd_train_teacher)
    registry["train-teacher"] = tt

    ts = subs.add_parser("train-student",
                         help="train a low-resolution student, optionally distilled")
    _arch_flags(ts)
    _train_flags(ts)
    ts.add_argument("--scheme", default="none", choices=list(SCHEMES))
    ts.add_argument("--teacher", default=None,
                    help="teacher checkpoint (required unless --scheme none)")
    ts.add_argument("--resolution", default="native")
    ts.add_argument("--alpha", type=float, default=1.0)
    ts.add_argument("--beta", type=float, default=1.0)
    ts.add_argument("--gamma", type=float, default=1.0)
    ts.add_argument("--temperature", type=float, default=2.0)
    ts.set_defaults(func=cmd_train_student)
    registry["train-student"] = ts

    ev = subs.add_parser("evaluate", help="score a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--resolution", default="native")
    ev.add_argument("--scheme", default="none",
                    help="label echoed into the report")
    ev.add_argument("--batch-size", type=int, default=64)
    ev.add_argument("--out", default=None, help="report path (default: next to checkpoint)")
    ev.set_defaults(func=cmd_evaluate)
    registry["evaluate"] = ev

    ex = subs.add_parser("export-attention",
                         help="export a cls-attention heatmap as PGM")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--image", required=True, help="input PGM at native resolution")
    ex.add_argument("--resolution", default="native")
    ex.add_argument("--block", default="last", help="encoder block index or 'last'")
    ex.add_argument("--upscale", type=int, default=None,
                    help="heatmap side length (default: model input size)")
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_attention)
    registry["export-attention"] = ex

    for sub in registry.values():
        sub.add_argument("--config", default=None,
                         help="JSON file of flag defaults; explicit flags win")
    return parser, registry


def _apply_config_file(parser, registry, argv):
    """First parse finds --config; its JSON becomes subcommand defaults."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    path = Path(args.config)
    try:
        loaded = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    sub = registry[args.command]
    valid = {a.dest for a in sub._actions} - {"help", "func", "config"}
    unknown = set(loaded) - valid
    if unknown:
        raise ConfigError(
            f"config file {path} has unknown keys for {args.command}: "
            f"{sorted(unknown)}"
        )
    sub.set_defaults(**loaded)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# command handlers


def cmd_synth_data(args) -> int:
    radius = tuple(args.blob_radius) if args.blob_radius else None
    config = SyntheticConfig(
        num_samples=args.samples,
        num_findings=args.findings,
        image_size=args.image_size,
        blob_radius_range=radius,
        noise_sigma=args.noise_sigma,
        abnormal_fraction=args.abnormal_fraction,
        seed=args.seed,
    )
    train, test = generate_synthetic(config, args.out)
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")
    return 0


def _check_positive(args, fields) -> None:
    bad = [f for f in fields if getattr(args, f) <= 0]
    if bad:
        raise ConfigError(
            "; ".join(f"--{f.replace('_', '-')} must be positive, got "
                      f"{getattr(args, f)}" for f in bad)
        )


def _native_size(manifest) -> int:
    return manifest.image(manifest.records[0]).shape[0]


def _estimator_kwargs(args) -> dict:
    return dict(
        variant=args.variant,
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        num_heads=args.heads,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        min_lr=args.min_lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )


def _write_run_config(args, out_dir: Path, spec: ResolutionSpec | None,
                      kd: dict | None) -> None:
    echo = {
        "command": args.command,
        "variant": args.variant,
        "depth": args.depth,
        "embed_dim": args.embed_dim,
        "num_heads": args.heads,
        "image_size": args.image_size,
        "patch_size": args.patch_size,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "base_lr": args.lr,
        "min_lr": args.min_lr,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
        "kd": kd,
        "resolution": None if spec is None else {
            "native": spec.native,
            "target": spec.target,
            "model_input": spec.model_input,
            "custom": spec.custom,
        },
        "data_dir": str(args.data),
        "out_dir": str(out_dir),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_jsonl(history, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _run_training(args, estimator, name: str, spec_preview, kd_echo) -> int:
    manifest = load_manifest(Path(args.data) / "train.csv")
    out_dir = Path(args.out)
    _write_run_config(args, out_dir, spec_preview, kd_echo)
    X = manifest.images()
    estimator.fit(X, manifest.label_matrix(), manifest.global_labels())
    save_checkpoint(estimator.model_, out_dir / f"{name}.ckpt")
    _write_jsonl(estimator.history_, out_dir / "metrics.jsonl")
    last = estimator.history_[-1]
    print(f"{name} trained: final epoch loss {last['total']:.4f}; "
          f"checkpoint {out_dir / (name + '.ckpt')}")
    return 0


def cmd_train_teacher(args) -> int:
    if args.resume:
        raise ConfigError("resume is not supported; runs are short by design")
    _check_positive(args, ["epochs", "batch_size", "lr"])
    manifest = load_manifest(Path(args.data) / "train.csv")
    native = _native_size(manifest)
    spec = ResolutionSpec(native=native, target=native, model_input=args.image_size)
    est = MultiTaskViTClassifier(
        **_estimator_kwargs(args), scheme="none", resolution=None,
        track_train_auroc=True,
    )
    return _run_training(args, est, "teacher", spec,
                         {"scheme": "none", "alpha": 0.0, "beta": 0.0,
                          "gamma": 0.0, "temperature": 0.0})


def cmd_train_student(args) -> int:
    if args.resume:
        raise ConfigError("resume is not supported; runs are short by design")
    _check_positive(args, ["epochs", "batch_size", "lr", "temperature"])
    if args.scheme != "none" and args.teacher is None:
        raise ConfigError(f"scheme '{args.scheme}' requires --teacher")
    manifest = load_manifest(Path(args.data) / "train.csv")
    native = _native_size(manifest)
    target = parse_resolution(args.resolution, native)
    spec = ResolutionSpec(native=native, target=target,
                          model_input=args.image_size,
                          custom=native % target != 0)
    teacher = None
    if args.teacher is not None:
        teacher = load_checkpoint(args.teacher)
    est = MultiTaskViTClassifier(
        **_estimator_kwargs(args),
        scheme=args.scheme, teacher=teacher, resolution=target,
        alpha=args.alpha, beta=args.beta, gamma=args.gamma,
        temperature=args.temperature,
    )
    kd_echo = {"scheme": args.scheme, "alpha": args.alpha, "beta": args.beta,
               "gamma": args.gamma, "temperature": args.temperature}
    return _run_training(args, est, "student", spec, kd_echo)


def cmd_evaluate(args) -> int:
    _check_positive(args, ["batch_size"])
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(Path(args.data) / f"{args.split}.csv")
    native = _native_size(manifest)
    target = parse_resolution(args.resolution, native)
    spec = ResolutionSpec(native=native, target=target,
                          model_input=model.config.image_size,
                          custom=native % target != 0)
    report = evaluate(model, manifest, spec, scheme=args.scheme,
                      batch_size=args.batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    report.save(out)
    print(json.dumps(report.to_json_dict(), indent=2))
    return 0


def cmd_export_attention(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ContractError(f"input image must be square, got {image.shape}")
    native = image.shape[0]
    target = parse_resolution(args.resolution, native)
    spec = ResolutionSpec(native=native, target=target,
                          model_input=model.config.image_size,
                          custom=native % target != 0)
    view = degrade(image, spec)
    trace = model.forward(view)
    if args.block == "last":
        block = model.config.depth - 1
    else:
        try:
            block = int(args.block)
        except ValueError:
            raise ConfigError(
                f"--block must be an integer or 'last', got '{args.block}'"
            ) from None
    upscale = args.upscale if args.upscale else model.config.image_size
    export_attention(trace, block, args.out, upscale)
    print(f"wrote block-{block} attention heatmap to {args.out}")
    return 0


def main(argv=None) -> int:
    parser, registry = build_parser()
    try:
        args = _apply_config_file(parser, registry, argv)
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
