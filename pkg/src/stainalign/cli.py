"""Command-line entry point: ``stainalign <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import store
from .encoding import EncoderSpec, TileEmbedding, encode_slide, encode_tile
from .errors import FormatError, InvalidInputError, NumericalError, StainAlignError
from .tiling import PatchRef, tile_image, write_pgm

log = logging.getLogger("stainalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def build_parser(defaults=None):
    d = defaults or {}

    def opt(p, flag, dest, type_, default, **kw):
        value = d.get(dest, default)
        if value is not None and type_ is not None and isinstance(value, str):
            value = type_(value)
        p.add_argument(flag, dest=dest, type=type_, default=value, **kw)

    parser = _Parser(prog="stainalign", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=int(d.get("seed", 42)))
    parser.add_argument("--config", help="key=value file overriding defaults")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    # --seed is also accepted after the subcommand name
    _add = sub.add_parser

    def add_parser(name, **kw):
        sp = _add(name, **kw)
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        return sp

    sub.add_parser = add_parser

    p = sub.add_parser("tile", help="mask a slide image and extract tissue patches")
    p.add_argument("--input", required=True)
    p.add_argument("--stain", choices=("he", "ihc"), required=True)
    p.add_argument("--out", required=True)
    opt(p, "--patch-size", "patch_size", int, 224)
    opt(p, "--min-coverage", "min_coverage", float, 0.2)
    opt(p, "--downsample", "downsample", int, 32)
    opt(p, "--kernel", "kernel", int, 5)

    p = sub.add_parser("embed", help="encode a tile directory into an HSAE file")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    opt(p, "--dim", "dim", int, 64)
    opt(p, "--patch-size", "patch_size", int, 224)

    p = sub.add_parser("synth", help="write a synthetic paired dataset and its manifest")
    p.add_argument("--out", required=True)
    opt(p, "--n", "n", int, 60)
    opt(p, "--kind", "kind", str, "embeddings", choices=("embeddings", "images"))
    opt(p, "--size", "size", int, 1024)
    opt(p, "--balance", "balance", float, 0.5)
    opt(p, "--dim", "dim", int, 64)

    for name in ("train", "eval"):
        p = sub.add_parser(name, help="train the slide encoder" if name == "train" else "nested cross-validation")
        p.add_argument("--manifest", required=True)
        modes = ("full", "ssl", "finetune") + (("base",) if name == "eval" else ())
        opt(p, "--mode", "mode", str, "full", choices=modes)
        p.add_argument("--out", required=True)
        opt(p, "--epochs", "epochs", int, 50)
        opt(p, "--lr", "lr", float, 1e-2)
        opt(p, "--momentum", "momentum", float, 0.9)
        opt(p, "--batch", "batch_size", int, 8)
        opt(p, "--tau", "tau", float, 0.07)
        opt(p, "--mask-rate", "mask_rate", float, 0.5)
        opt(p, "--dim", "dim", int, 64)
        if name == "train":
            p.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
        else:
            opt(p, "--k", "k", int, 5)
            opt(p, "--bootstrap", "n_boot", int, 1000)
            opt(p, "--l2", "lam", float, 1.0)
            p.add_argument("--compare", choices=("full", "ssl", "finetune", "base"),
                           help="second mode; adds Wilcoxon p-values on true-positive scores and alignment")
            opt(p, "--tp-selection", "tp_selection", str, "joint", choices=("joint", "any"))

    p = sub.add_parser("align", help="paired vs shuffled cosine similarity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-ckpt", help="second checkpoint for a Wilcoxon comparison")
    opt(p, "--dim", "dim", int, 64)
    opt(p, "--bootstrap", "n_boot", int, 1000)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _png_bytes(pixels):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    store.atomic_write(path, (text + "\n").encode("utf-8"))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_tiles(path, stain, encoder, side=224):
    """Tile matrix for one slide from an HSAE file or by tiling an image."""
    if path.lower().endswith(".hsae"):
        try:
            tiles = store.read_embeddings(path)
        except FormatError as exc:
            wrapped = FormatError(f"{path}: {exc}")
            wrapped.offset = exc.offset
            raise wrapped from exc
    else:
        patches, _ = tile_image(_read_image(path), stain, side=side)
        tiles = encode_slide(patches, encoder, side)
    if not tiles:
        return None
    return np.stack([t.vector for t in tiles]).astype(np.float64)


def load_dataset(manifest_path, mode, dim=64, seed=42):
    """Manifest rows -> PairedSlide list, reading only what ``mode`` needs."""
    from .trainer import PairedSlide

    encoder = EncoderSpec(d=dim, seed=seed)
    need_ihc = mode in ("full", "ssl", "align")
    slides = []
    for rec in store.parse_manifest(manifest_path):
        he = load_tiles(rec.he_path, "he", encoder)
        if he is None:
            log.warning("slide %s has no tissue patches; excluded", rec.slide_id)
            continue
        ihc = None
        if need_ihc:
            if rec.ihc_path is None:
                raise InvalidInputError(f"slide {rec.slide_id!r} has no ihc_path but mode {mode!r} needs it")
            ihc = load_tiles(rec.ihc_path, "ihc", encoder)
            if ihc is None:
                log.warning("slide %s has an empty IHC slide; excluded", rec.slide_id)
                continue
        label = None if mode == "ssl" else rec.label
        slides.append(PairedSlide(rec.slide_id, rec.patient_id, he, ihc, label))
    return slides


# ---------------------------------------------------------------------------
# subcommands


def cmd_tile(args):
    image = _read_image(args.input)
    patches, mask = tile_image(
        image, args.stain, side=args.patch_size, min_coverage=args.min_coverage,
        factor=args.downsample, kernel=args.kernel,
    )
    tiles_dir = os.path.join(args.out, "tiles")
    os.makedirs(tiles_dir, exist_ok=True)
    write_pgm(mask, os.path.join(args.out, "mask.pgm"))
    rows = ["x,y,side,coverage"]
    for ref, px in patches:
        store.atomic_write(os.path.join(tiles_dir, f"x{ref.x}_y{ref.y}.png"), _png_bytes(px))
        rows.append(f"{ref.x},{ref.y},{ref.side},{ref.coverage!r}")
    store.atomic_write(os.path.join(args.out, "patches.csv"), ("\n".join(rows) + "\n").encode())
    print(f"{len(patches)} patches from {args.input}")


def cmd_embed(args):
    spec = EncoderSpec(d=args.dim, seed=args.seed)
    index = os.path.join(args.tiles, "patches.csv")
    with open(index, newline="") as fh:
        refs = [PatchRef(int(r["x"]), int(r["y"]), int(r["side"])) for r in csv.DictReader(fh)]
    tiles = []
    for ref in refs:
        px = _read_image(os.path.join(args.tiles, "tiles", f"x{ref.x}_y{ref.y}.png"))
        tiles.append(TileEmbedding(ref.x, ref.y, encode_tile(px, spec, args.patch_size)))
    store.write_embeddings(tiles, args.out, dim=args.dim)
    print(f"{len(tiles)} tile embeddings -> {args.out}")


def cmd_synth(args):
    from .synth import synth_embeddings, synth_images

    os.makedirs(args.out, exist_ok=True)
    records = []
    if args.kind == "embeddings":
        for s in synth_embeddings(n_pairs=args.n, d=args.dim, seed=args.seed, balance=args.balance):
            paths = []
            for stain, mat in (("he", s.he), ("ihc", s.ihc)):
                path = os.path.join(args.out, f"{s.slide_id}_{stain}.hsae")
                tiles = [TileEmbedding(0, i, row) for i, row in enumerate(mat)]
                store.write_embeddings(tiles, path)
                paths.append(path)
            records.append(store.SlideRecord(s.slide_id, s.patient_id, paths[0], paths[1], s.label, "synthetic"))
    else:
        for p in synth_images(args.n, args.balance, args.seed, args.size):
            paths = []
            for stain, img in (("he", p.he), ("ihc", p.ihc)):
                path = os.path.join(args.out, f"{p.slide_id}_{stain}.png")
                store.atomic_write(path, _png_bytes(img))
                paths.append(path)
            records.append(store.SlideRecord(p.slide_id, p.slide_id, paths[0], paths[1], p.label, "synthetic"))
    store.write_manifest(records, os.path.join(args.out, "manifest.csv"))
    print(f"{len(records)} synthetic pairs -> {args.out}")


def _train_config(args, mode):
    from .trainer import TrainConfig

    try:
        return TrainConfig(
            mode=mode, lr=args.lr, momentum=args.momentum, epochs=args.epochs,
            batch_size=args.batch_size, tau=args.tau, mask_rate=args.mask_rate, seed=args.seed,
        )
    except InvalidInputError as exc:
        raise UsageError(f"stainalign {args.command}: {exc}") from exc


def cmd_train(args):
    from .trainer import fit, history_csv

    config = _train_config(args, args.mode)
    slides = load_dataset(args.manifest, args.mode, args.dim, args.seed)
    state = fit(slides, config)
    store.write_params(state.params, args.out)
    history = args.history or os.path.splitext(args.out)[0] + ".history.csv"
    store.atomic_write(history, history_csv(state.history).encode())
    last = state.history[-1]
    print(f"trained {config.epochs} epochs; final l_total={last['l_total']:.6f} -> {args.out}")


def _nested(args, mode):
    from .evaluation import run_nested_eval

    frozen = mode == "base"
    train_mode = "full" if frozen else mode
    config = _train_config(args, train_mode)
    slides = load_dataset(args.manifest, train_mode, args.dim, args.seed)
    return run_nested_eval(slides, config, k=args.k, seed=args.seed, frozen=frozen, lam=args.lam, n_boot=args.n_boot)


def _print_result(result):
    p = result.pooled
    print(f"mode={result.mode} n={p.n} auc={p.auc} f1={p.f1:.4f} precision={p.precision:.4f} recall={p.recall:.4f}")
    print(p.confusion_table())


def cmd_eval(args):
    from .evaluation import compare_true_positives
    from .metrics import wilcoxon_signed_rank

    _train_config(args, "full")  # reject bad hyperparameters before loading data

    result = _nested(args, args.mode)
    report = result.as_dict()
    _print_result(result)
    if args.compare:
        other = _nested(args, args.compare)
        _print_result(other)
        cmp = {"mode": other.mode, "other": other.as_dict(), "tp_selection": args.tp_selection}
        try:
            cmp["tp_wilcoxon_p"], cmp["tp_count"] = compare_true_positives(result, other, args.tp_selection)
        except StainAlignError as exc:
            log.warning("true-positive comparison skipped: %s", exc)
            cmp["tp_wilcoxon_p"], cmp["tp_count"] = None, 0
        if result.alignment is not None and other.alignment is not None:
            order = {s: i for i, s in enumerate(other.slide_ids)}
            idx = [order[s] for s in result.slide_ids]
            cmp["alignment_wilcoxon_p"] = wilcoxon_signed_rank(
                result.alignment.difference, other.alignment.difference[idx]
            )
        report["comparison"] = cmp
        print(f"wilcoxon p (true positives, {args.tp_selection}) = {cmp['tp_wilcoxon_p']}")
    _write_json(report, args.out)


def cmd_align(args):
    from .aggregator import embed_slides
    from .evaluation import alignment_analysis

    slides = load_dataset(args.manifest, "align", args.dim, args.seed)

    def diffs(params):
        he = embed_slides([s.he for s in slides], params)
        ihc = embed_slides([s.ihc for s in slides], params)
        return he, ihc

    baseline = None
    if args.baseline_ckpt:
        from .evaluation import alignment_scores

        baseline = alignment_scores(*diffs(store.read_params(args.baseline_ckpt)))[2]
    report = alignment_analysis(*diffs(store.read_params(args.ckpt)), n_boot=args.n_boot, seed=args.seed, baseline=baseline)
    _write_json({"slide_ids": [s.slide_id for s in slides], **report.as_dict()}, args.out)
    print(
        f"paired={report.paired_mean:.4f} shuffled={report.shuffled_mean:.4f} "
        f"difference={report.difference_mean:.4f}"
    )


COMMANDS = {
    "tile": cmd_tile, "embed": cmd_embed, "synth": cmd_synth,
    "train": cmd_train, "eval": cmd_eval, "align": cmd_align,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        defaults = read_config(known.config) if known.config else {}
        args = build_parser(defaults).parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"stainalign: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"stainalign: bad config value: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"stainalign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StainAlignError, OSError) as exc:
        print(f"stainalign: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
