"""Command-line interface.

Exit status is 0 on success, 1 when an operation fails (with a one-line
diagnostic on stderr) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import codec
from . import config as cfg
from . import eval as ev
from . import quantizer as qz
from .io_utils import atomic_write
from .model_io import Registry
from .ppm import PpmImage, load_ppm, write_ppm
from .train import PatchDataset, interpolate_derivations, refine_derivation, train_anchor

COMMANDS = (
    "train-anchor", "refine", "interpolate", "encode", "decode",
    "eval-rd", "bd-rate", "intervals", "baseline-sweep",
)

# flag destination -> config key, per command
_TRAIN_FLAGS = {
    "lam": "lambda", "steps": "steps", "M": "M", "N": "N", "levels_main": "levels_main",
    "levels_hyper": "levels_hyper", "init_range": "init_range", "K": "K", "batch": "batch",
    "patch": "patch", "learning_rate": "learning_rate", "patience": "patience",
    "epoch_steps": "epoch_steps", "data": "data",
}
_REFINE_FLAGS = {
    "lam": "lambda", "steps": "refine_steps", "learning_rate": "refine_learning_rate",
    "patience": "refine_patience", "epoch_steps": "refine_epoch_steps", "batch": "batch",
    "patch": "patch", "data": "data",
}
_COMMON_FLAGS = {"seed": "seed", "registry": "registry"}


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ids(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--registry", help="registry directory (overrides $SVRC_REGISTRY)")
    common.add_argument("--out", default=".", help="directory for reports and logs (default: .)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any setting")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="svrc", description="Variable-rate learned image codec.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def training_flags(p, refine: bool):
        p.add_argument("--data", help="directory of .ppm training images")
        p.add_argument("--lambda", dest="lam", type=float, required=refine, help="RD multiplier")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--patch", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--patience", type=int, help="plateau patience in epochs")
        p.add_argument("--epoch-steps", type=int, help="steps per epoch")

    p = sub.add_parser("train-anchor", parents=[common], help="train an anchor end to end")
    training_flags(p, refine=False)
    p.add_argument("--anchor", default="A1", help="anchor id (default A1)")
    p.add_argument("--M", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--levels-main", type=int)
    p.add_argument("--levels-hyper", type=int)
    p.add_argument("--init-range", type=float)
    p.add_argument("--K", type=float, help="annealing velocity")

    p = sub.add_parser("refine", parents=[common], help="train a quantizer-only derivation")
    training_flags(p, refine=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--id", help="derivation id (default: next free D<n>)")
    p.add_argument("--start", help="start from this derivation's quantizers instead of the anchor's")

    p = sub.add_parser("interpolate", parents=[common], help="store an interpolation of two derivations")
    p.add_argument("--from", dest="from_id", required=True)
    p.add_argument("--to", dest="to_id", required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--anchor", help="owning anchor (default: looked up)")
    p.add_argument("--id", help="derivation id for the result (default: next free D<n>)")

    p = sub.add_parser("encode", parents=[common], help="compress a PPM image")
    p.add_argument("--anchor", required=True)
    p.add_argument("--stanh", help="derivation id to code with")
    p.add_argument("--from", dest="from_id", help="interpolation start derivation")
    p.add_argument("--to", dest="to_id", help="interpolation end derivation")
    p.add_argument("--rho", type=float, help="interpolation weight in [0, 1]")
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("decode", parents=[common], help="decompress to a PPM image")
    p.add_argument("input")
    p.add_argument("output")

    def sweep_flags(p):
        p.add_argument("--anchor", type=_csv_ids, help="comma-separated anchor ids (default: all)")
        p.add_argument("images", nargs="+", help=".ppm files or directories")

    p = sub.add_parser("eval-rd", parents=[common], help="RD points for anchors, derivations, interpolations")
    sweep_flags(p)
    p.add_argument("--derivations", type=_csv_ids, help="comma-separated ids (default: all of each anchor)")
    p.add_argument("--rho", type=_csv_floats, default=[0.25, 0.5, 0.75], help="interpolation weights")

    p = sub.add_parser("bd-rate", parents=[common], help="Bjontegaard deltas between two rd_points CSVs")
    p.add_argument("reference")
    p.add_argument("test")

    p = sub.add_parser("intervals", parents=[common], help="quantization interval widths")
    p.add_argument("--anchor", required=True)
    p.add_argument("--derivations", type=_csv_ids, help="comma-separated ids (default: all)")
    p.add_argument("--center-count", type=int, default=9)
    p.add_argument("--layer", choices=("main", "hyper"), default="main")

    p = sub.add_parser("baseline-sweep", parents=[common], help="uniform-step quantizer baseline")
    p.add_argument("--anchor", required=True)
    p.add_argument("--deltas", type=_csv_floats, required=True, help="comma-separated step sizes")
    p.add_argument("images", nargs="+", help=".ppm files or directories")
    return parser


# ------------------------------------------------------------- helpers


def _settings(args, mapping: dict[str, str]) -> dict:
    flags = {key: getattr(args, dest, None) for dest, key in {**_COMMON_FLAGS, **mapping}.items()}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise cfg.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        if flags.get(key.strip()) is None:
            flags[key.strip()] = value.strip()
    return cfg.resolve(args.config, flags)


def _image_paths(items: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        path = Path(item)
        if path.is_dir():
            found = sorted(path.glob("*.ppm"))
            if not found:
                raise FileNotFoundError(f"no .ppm images in {path}")
            paths.extend(found)
        elif path.is_file():
            paths.append(path)
        else:
            raise FileNotFoundError(f"no such image or directory: {path}")
    return paths


def _images(items) -> list:
    return [load_ppm(p).to_float() for p in _image_paths(items)]


def _derivation(registry: Registry, derivation_id: str, anchor_id: str | None):
    if anchor_id:
        return registry.load_derivation(anchor_id, derivation_id)
    return registry.find_derivation(derivation_id)


def _write_history(history, path: Path) -> None:
    lines = ["step,loss,mse,bpp,beta_main,beta_hyper"]
    lines += [f"{r.step},{r.loss!r},{r.mse!r},{r.bpp!r},{r.beta_main!r},{r.beta_hyper!r}" for r in history.records]
    atomic_write(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------ commands


def _train_anchor(args) -> None:
    values = _settings(args, _TRAIN_FLAGS)
    registry = Registry(values["registry"])
    config = cfg.train_config(values, anchor_id=args.anchor, log_every=100 if args.verbose else 0)
    dataset = PatchDataset.from_directory(values["data"])
    model, history = train_anchor(dataset, config, return_history=True)
    model.meta["scale_table"] = cfg.scale_table_params(values)
    path = registry.save_anchor(model)
    _write_history(history, Path(args.out) / f"train_{args.anchor}.csv")
    print(path)


def _refine(args) -> None:
    values = _settings(args, _REFINE_FLAGS)
    registry = Registry(values["registry"])
    anchor = registry.load_anchor(args.anchor)
    derivation_id = args.id or registry.next_derivation_id(args.anchor)
    start = None
    if args.start:
        d = registry.load_derivation(args.anchor, args.start)
        start = (d.stanh_main, d.stanh_hyper)
    config = cfg.train_config(values, refine=True, log_every=100 if args.verbose else 0)
    dataset = PatchDataset.from_directory(values["data"])
    derivation, history = refine_derivation(
        anchor, values["lambda"], dataset, config, derivation_id, start=start, return_history=True
    )
    if args.start:
        derivation.meta["start"] = args.start
    path = registry.save_derivation(derivation)
    _write_history(history, Path(args.out) / f"refine_{args.anchor}_{derivation_id}.csv")
    print(path)


def _interpolate(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    d1 = _derivation(registry, args.from_id, args.anchor)
    d2 = _derivation(registry, args.to_id, args.anchor or d1.anchor_id)
    derivation_id = args.id or registry.next_derivation_id(d1.anchor_id)
    print(registry.save_derivation(interpolate_derivations(d1, d2, args.rho, derivation_id)))


def _encode(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    anchor = registry.load_anchor(args.anchor)
    interp = (args.from_id, args.to_id, args.rho)
    if args.stanh and any(v is not None for v in interp):
        raise ValueError("use either --stanh or --from/--to/--rho, not both")
    layers, ref = None, None
    if args.stanh:
        d = registry.load_derivation(args.anchor, args.stanh)
        layers, ref = (d.stanh_main, d.stanh_hyper), codec.LayerRef.derivation(args.stanh)
    elif any(v is not None for v in interp):
        if any(v is None for v in interp):
            raise ValueError("interpolation needs --from, --to and --rho")
        ref = codec.LayerRef.interpolation(args.from_id, args.to_id, args.rho)
        d1 = registry.load_derivation(args.anchor, args.from_id)
        d2 = registry.load_derivation(args.anchor, args.to_id)
        layers = (
            qz.interpolate(d1.stanh_main, d2.stanh_main, ref.rho),
            qz.interpolate(d1.stanh_hyper, d2.stanh_hyper, ref.rho),
        )
    image = load_ppm(args.input)
    stream = codec.encode_image(image.to_float(), anchor, layers, ref)
    atomic_write(args.output, stream.to_bytes())
    print(f"{args.output}: {len(stream)} bytes, {ev.bpp(stream, image.width, image.height):.4f} bpp")


def _decode(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    with open(args.input, "rb") as fh:
        data = fh.read()
    x_hat = codec.decode_image(data, registry)
    write_ppm(PpmImage.from_float(x_hat), args.output)
    print(args.output)


def _anchors(registry: Registry, ids) -> list:
    ids = ids or registry.anchor_ids()
    if not ids:
        raise LookupError(f"no anchors in registry {registry.root}")
    return [registry.load_anchor(a) for a in ids]


def _eval_rd(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    anchors = _anchors(registry, args.anchor)
    derivations = []
    for a in anchors:
        ids = args.derivations if args.derivations is not None else registry.derivation_ids(a.anchor_id)
        for d in ids:
            if args.derivations is None or registry.derivation_path(a.anchor_id, d).is_file():
                derivations.append(registry.load_derivation(a.anchor_id, d))
    if args.derivations is not None:
        missing = set(args.derivations) - {d.derivation_id for d in derivations}
        if missing:
            raise LookupError(f"derivations not found: {', '.join(sorted(missing))}")
    points = ev.rd_sweep(anchors, derivations, args.rho, _images(args.images))
    path = Path(args.out) / "rd_points.csv"
    ev.write_rd_csv(points, path)
    for p in points:
        print(f"{p.label:>20s}  {p.bpp:.4f} bpp  {p.psnr:.3f} dB")
    print(path)


def _bd_rate(args) -> None:
    reference = ev.read_rd_csv(args.reference)
    test = ev.read_rd_csv(args.test)
    rate, quality = ev.bd_metrics(reference, test)
    path = Path(args.out) / "bd.csv"
    ev.write_bd_csv([(args.reference, args.test, rate, quality)], path)
    print(f"BD-Rate {rate:+.3f} %  BD-PSNR {quality:+.4f} dB")
    print(path)


def _intervals(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    anchor = registry.load_anchor(args.anchor)
    ids = args.derivations if args.derivations is not None else registry.derivation_ids(args.anchor)
    attr = f"stanh_{args.layer}"
    layers = {anchor.anchor_id: getattr(anchor, attr)}
    for d in ids:
        layers[d] = getattr(registry.load_derivation(args.anchor, d), attr)
    report = ev.interval_report(layers, args.center_count)
    path = Path(args.out) / "intervals.csv"
    ev.write_intervals_csv(report, path)
    for label in report.labels():
        print(f"{label:>8s}  central width {report.central_width(label):.4f}")
    print(path)


def _baseline_sweep(args) -> None:
    values = _settings(args, {})
    registry = Registry(values["registry"])
    anchor = registry.load_anchor(args.anchor)
    points = ev.uniform_baseline_sweep(anchor, args.deltas, _images(args.images))
    path = Path(args.out) / "baseline_points.csv"
    ev.write_rd_csv(points, path)
    for p in points:
        print(f"{p.label:>20s}  {p.bpp:.4f} bpp  {p.psnr:.3f} dB")
    print(path)


_HANDLERS = {
    "train-anchor": _train_anchor,
    "refine": _refine,
    "interpolate": _interpolate,
    "encode": _encode,
    "decode": _decode,
    "eval-rd": _eval_rd,
    "bd-rate": _bd_rate,
    "intervals": _intervals,
    "baseline-sweep": _baseline_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _HANDLERS[args.command](args)
    except (ValueError, LookupError, OSError, RuntimeError) as exc:
        print(f"svrc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def run(command: str, flags: Sequence[str] = ()) -> int:
    return main([command, *flags])


if __name__ == "__main__":
    sys.exit(main())
