"""Command-line entry point: ``onedpiece <command> ...``.

Exit codes: 0 success, 1 runtime error (one ``error: type=... message=...``
line on stderr), 2 usage error.

``ONEDP_CACHE`` names a cache directory: checkpoint paths that do not exist
as given are looked up there, and ``synth`` writes there by default.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from onedpiece.errors import InvalidInputError, OneDPieceError

log = logging.getLogger("onedpiece")

COMMANDS = ("train", "encode", "decode", "eval", "analyze", "probe", "inspect", "synth")


def cache_dir() -> Path:
    return Path(os.environ.get("ONEDP_CACHE", Path.home() / ".cache" / "onedpiece"))


def resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and (cache_dir() / p).exists():
        return cache_dir() / p
    return p


def _lengths(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onedpiece",
        description="Variable-length 1D image tokenizer: train, encode/decode .1dp files, evaluate, analyze.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a tokenizer on an image directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="output directory (checkpoints, loss_log.csv)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. train.steps=500 or ttd.enabled=false (repeatable)")
    p.add_argument("--seed", type=int, help="seed for init, data order and tail drop")

    p = sub.add_parser("encode", help="image file -> .1dp token stream")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--tokens", type=int, required=True, help="number of tokens to keep (1..N)")
    p.add_argument("input", help="input image (PNG/JPEG)")
    p.add_argument("output", help="output .1dp file")

    p = sub.add_parser("decode", help=".1dp token stream -> PNG")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--prefix", type=int, help="decode only the first N stored tokens")
    p.add_argument("--lenient", action="store_true", help="warn instead of failing on model-id mismatch or pad bits")
    p.add_argument("input", help="input .1dp file")
    p.add_argument("output", help="output PNG")

    p = sub.add_parser("eval", help="rate-distortion sweep over token prefixes, or external-codec comparison")
    p.add_argument("--model", help="checkpoint file (sweep mode)")
    p.add_argument("--data", help="directory of held-out images (sweep mode)")
    p.add_argument("--lengths", type=_lengths, default=None, help="comma-separated token counts")
    p.add_argument("--features", choices=("none", "encoder"), default="none",
                   help="feature extractor for the Frechet distance column")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--plot", help="optional PNG plot of the sweep")
    p.add_argument("--originals", help="originals directory (comparison mode)")
    p.add_argument("--external", action="append", default=[], metavar="NAME=DIR",
                   help="reconstructions from an external codec (comparison mode, repeatable)")

    p = sub.add_parser("analyze", help="token contribution, first-token clusters/swaps, linear probe")
    p.add_argument("kind", choices=("contribution", "clusters", "swap", "probe"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trials", type=int, default=16, help="replacement trials per token (contribution)")
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--lengths", type=_lengths, default=[4, 32], help="prefix lengths (swap)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("probe", help="linear probe on frozen encoder features")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="labeled directory: one subdirectory per class")
    p.add_argument("--out", help="optional CSV with the result")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print the header of a .1dp file as key=value lines")
    p.add_argument("input")

    p = sub.add_parser("synth", help="write the procedural labeled 32x32 shape corpus")
    p.add_argument("--out", help="output directory (default: $ONEDP_CACHE/corpus)")
    p.add_argument("--n", type=int, default=512, help="number of images")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


# command handlers ---------------------------------------------------------------


def cmd_train(args) -> int:
    from onedpiece.config import Config
    from onedpiece.data import Augmentation, load_dataset
    from onedpiece.trainer import build_model, fit

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"ttd.seed={args.seed}"]
    config = Config.load(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.json")
    aug = Augmentation(random_crop=config.train.random_crop, random_flip=config.train.random_flip)
    dataset = load_dataset(args.data, config.model.image_size, aug)
    ckpt = fit(dataset, build_model(config), config, out)
    print(f"checkpoint={ckpt}")
    return 0


def _load(path: str):
    from onedpiece.model import load_checkpoint

    model, config, _ = load_checkpoint(resolve_checkpoint(path))
    return model, config


def cmd_encode(args) -> int:
    from onedpiece.codec import encode_image

    model, _ = _load(args.model)
    stream = encode_image(args.input, model, args.tokens, args.output)
    print(f"tokens={stream.token_count} bytes={Path(args.output).stat().st_size}")
    return 0


def cmd_decode(args) -> int:
    from onedpiece.codec import decode_file

    model, _ = _load(args.model)
    decode_file(args.input, model, prefix_n=args.prefix, out_path=args.output, strict=not args.lenient)
    return 0


def cmd_eval(args) -> int:
    from onedpiece import metrics

    if args.external:
        if not args.originals:
            raise InvalidInputError("--external requires --originals")
        dirs = {}
        for item in args.external:
            name, sep, d = item.partition("=")
            if not sep:
                raise InvalidInputError(f"--external expects NAME=DIR, got {item!r}")
            dirs[name] = d
        rows = metrics.compare_external(dirs, args.originals)
        metrics.write_csv(rows, args.out, metrics.COMPARE_FIELDS)
        return 0

    if not args.model or not args.data:
        raise InvalidInputError("sweep mode needs --model and --data")
    from onedpiece.data import load_dataset

    model, config = _load(args.model)
    lengths = args.lengths or sorted({min(2**i, config.model.n_latent_tokens)
                                      for i in range(config.model.n_latent_tokens.bit_length())})
    dataset = load_dataset(args.data, config.model.image_size)
    features = None
    if args.features == "encoder":
        from onedpiece.analysis import encoder_features

        features = lambda x: encoder_features(model, x)  # noqa: E731
    points = metrics.rd_sweep(model, dataset, lengths, features=features)
    metrics.write_rd_csv(points, args.out)
    if args.plot:
        metrics.plot_rd(points, args.plot)
    for p in points:
        print(f"n={p.n_tokens} bytes={p.payload_bytes} l2={p.l2:.6f} psnr={p.psnr:.3f} ssim={p.ssim:.4f}")
    return 0


def cmd_analyze(args) -> int:
    from onedpiece import analysis
    from onedpiece.data import load_dataset
    from onedpiece.metrics import write_csv

    model, config = _load(args.model)
    dataset = load_dataset(args.data, config.model.image_size, limit=args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "contribution":
        rep = analysis.token_contribution(model, dataset, args.trials, seed=args.seed)
        rows = [{"position": i + 1, "l1": float(v)} for i, v in enumerate(rep.per_token_l1)]
        write_csv(rows, out / "contribution.csv", ("position", "l1"))
        analysis.save_contribution_heatmaps(rep, out / "contribution.png")
        print(f"head_tail_ratio={rep.head_tail_ratio():.4f}")
    elif args.kind == "clusters":
        groups = analysis.first_token_cluster(model, dataset)
        rows = [{"first_token": k, "size": len(v)} for k, v in groups.items()]
        write_csv(rows, out / "clusters.csv", ("first_token", "size"))
        images = dataset.array()
        for tok, members in list(groups.items())[:32]:
            analysis.save_contact_sheet(images[members[:32]], out / f"cluster_{tok:05d}.png")
        print(f"clusters={len(groups)} images={len(dataset)}")
    elif args.kind == "swap":
        gaps = analysis.first_token_swap_gap(model, dataset, args.lengths, seed=args.seed)
        write_csv([{"n_tokens": n, "l1_gap": g} for n, g in gaps.items()], out / "swap.csv", ("n_tokens", "l1_gap"))
        for n, g in gaps.items():
            print(f"n={n} l1_gap={g:.6f}")
    else:
        return _probe(model, dataset, out / "probe.csv", 50, args.seed)
    return 0


def _probe(model, dataset, out, epochs, seed) -> int:
    from onedpiece import analysis
    from onedpiece.metrics import write_csv

    res = analysis.linear_probe(model, dataset, analysis.ProbeConfig(epochs=epochs, seed=seed))
    chance = analysis.linear_probe(model, dataset, analysis.ProbeConfig(epochs=epochs, seed=seed, shuffle_labels=True))
    row = {
        "accuracy": res.accuracy,
        "shuffled_accuracy": chance.accuracy,
        "chance": res.chance,
        "chance_sigma": res.chance_sigma,
        "n_test": res.n_test,
    }
    if out:
        write_csv([row], out, tuple(row))
    print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_probe(args) -> int:
    from onedpiece.data import load_dataset

    model, config = _load(args.model)
    dataset = load_dataset(args.data, config.model.image_size)
    return _probe(model, dataset, args.out, args.epochs, args.seed)


def cmd_inspect(args) -> int:
    from onedpiece.codec import read_stream

    stream = read_stream(args.input, strict=False)
    for k, v in stream.header_fields().items():
        print(f"{k}={v}")
    return 0


def cmd_synth(args) -> int:
    from onedpiece.data import synthesize_corpus

    out = Path(args.out) if args.out else cache_dir() / "corpus"
    synthesize_corpus(out, args.n, seed=args.seed, size=args.size)
    print(f"corpus={out} images={args.n}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "probe": cmd_probe,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except (OneDPieceError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: type={type(exc).__name__} message={msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
