"""Command line entry point: ``retext <command> [flags]``.

Exit codes: 0 success, 1 internal error or failed check, 2 usage/validation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ReTextError

log = logging.getLogger("retext")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    parse.__name__ = kind.__name__
    return parse


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _load_split(data: Path, split: str, require_captions=False):
    from .datakit import load_manifest

    manifest = data / split / "manifest.jsonl"
    if not manifest.exists():
        raise UsageError(f"no {split} corpus at {manifest}")
    return load_manifest(manifest, require_captions=require_captions)


def _build_config(args):
    from .config import TrainConfig, apply_overrides, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(cfg, args.set)


# -- commands --------------------------------------------------------------

def cmd_generate(args) -> int:
    from .datakit import default_corpora, generate_corpus, write_corpus

    out = Path(args.out)
    if args.preset == "default":
        corpora = default_corpora(seed=args.seed, scale=args.scale)
        for name, corpus in corpora.items():
            path = write_corpus(corpus, out / name)
            print(f"{name}: {len(corpus)} images, {len(corpus.identities)} identities -> {path}")
        return EXIT_OK
    corpus = generate_corpus(args.ids, args.cameras, args.images_per_camera, args.domain,
                             seed=args.seed, with_captions=args.captions, height=args.height,
                             width=args.width, id_offset=args.id_offset)
    path = write_corpus(corpus, out)
    print(f"{len(corpus)} images, {len(corpus.identities)} identities -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import save_config
    from .plotting import loss_curves
    from .trainer import LOG_COLUMNS, run

    cfg = _build_config(args)
    data = Path(args.data)
    multi = _load_split(data, "multi") if cfg.use_multi else None
    single = _load_split(data, "single", require_captions=cfg.itm or cfg.ir) if cfg.use_single else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")

    def progress(row):
        if row["step"] % args.log_every == 0:
            log.info("step %d lr %.2e total %.4f", row["step"], row["lr"], row["total"])

    result = run(cfg, multi, single, out, resume=not args.no_resume, on_step=progress)
    if result.log:
        loss_curves(result.log, LOG_COLUMNS[2:], out / "loss.svg")
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log:   {out / 'loss_log.csv'}")
    print(f"trained {len(result.log)} steps in {result.seconds:.1f}s")
    if args.evaluate:
        return _evaluate_into(result.checkpoint, data, args.ledger or out / "results.csv", seed=cfg.seed)
    return EXIT_OK


def _evaluate_into(checkpoint, data: Path, ledger, seed: int = 0, domain: str = "target") -> int:
    from .evaluator import append_ledger, evaluate_model
    from .trainer import load_checkpoint

    target = _load_split(data, domain)
    state = load_checkpoint(checkpoint)
    result = evaluate_model(state.model, target, seed)
    append_ledger(ledger, state.cfg.digest(), domain, result)
    print(" ".join(f"{k}={v:.4f}" for k, v in result.items()))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return _evaluate_into(args.checkpoint, Path(args.data), args.ledger, args.seed, args.domain)


def cmd_ablate(args) -> int:
    from .grids import cell_means, grid, run_grid

    cells = grid(args.grid)
    base = _build_config(args).replace(epochs=args.epochs, warmup_epochs=min(args.warmup, args.epochs))
    results = run_grid(args.grid, base, args.seeds, args.out, scale=args.scale, jobs=args.jobs,
                       cells=cells)
    means = cell_means(results, [c.name for c in cells])
    print(f"{'cell':<22} {'Rank1':>7} {'Rank5':>7} {'mAP':>7}")
    for name, m in means.items():
        print(f"{name:<22} {100 * m['Rank1']:7.1f} {100 * m['Rank5']:7.1f} {100 * m['mAP']:7.1f}")
    failed = [r for r in results if r.status != "ok"]
    print(f"ledger: {Path(args.out) / 'results.csv'}  chart: {Path(args.out) / (args.grid + '.svg')}")
    if failed:
        print(f"{len(failed)} cell run(s) failed; see {args.grid}_failures.txt")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.scope, batches=args.batches, step=args.step, tol=args.tol,
                        n_coords=args.coords)
    for r in results:
        print(r.line())
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} passed")
    return EXIT_OK if passed == len(results) else EXIT_FAIL


def cmd_recon(args) -> int:
    import numpy as np

    from . import tensor_engine as te
    from .encoders import encode_captions, patchify, unpatchify
    from .reconstruction import assemble, dump_triplets, make_mask
    from .trainer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    model, cfg = state.model, state.cfg
    single = _load_split(Path(args.data), "single", require_captions=True)
    recs = single.records[:args.count]
    images = np.stack([r.image for r in recs])
    pc = model.image.cfg.patch_count
    plans = [make_mask(pc, cfg.mask_ratio, args.seed + i) for i in range(len(recs))]
    with te.no_grad():
        tokens, _ = model.image.forward(images, np.stack([p.visible_mask() for p in plans]))
        states, _, mask = model.text.forward(encode_captions([r.caption for r in recs], model.vocab,
                                                             cfg.text_max_len))
        pred = model.decoder.forward(tokens, states, mask)
        ic = model.image.cfg
        full = unpatchify(assemble(patchify(images, ic.patch_size).data, pred, plans),
                          ic.patch_size, ic.image_height, ic.image_width, ic.channels).data
    paths = dump_triplets(args.out, images, plans, full, ic.patch_size, [r.caption for r in recs])
    print(f"wrote {len(paths)} triplets to {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="training config file ([train]/[tasks]/[losses]/[sampler]/[model])")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="retext", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic corpora to disk", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--preset", choices=("default", "custom"), default="custom",
                   help="'default' writes the multi/single/target corpora used for training")
    g.add_argument("--scale", type=_positive(float), default=1.0,
                   help="identity-count multiplier for --preset default")
    g.add_argument("--ids", type=_positive(int), default=64, help="number of identities")
    g.add_argument("--cameras", type=_positive(int), default=3, help="cameras per identity (1 = single-camera)")
    g.add_argument("--images-per-camera", type=_positive(int), default=4, help="images per identity per camera")
    g.add_argument("--domain", default="source", help="rendering style: source, target, single, alt")
    g.add_argument("--captions", action="store_true", help="attach attribute captions")
    g.add_argument("--height", type=_positive(int), default=64, help="image height in pixels")
    g.add_argument("--width", type=_positive(int), default=32, help="image width in pixels")
    g.add_argument("--id-offset", type=int, default=0, help="first identity label")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on generated corpora", formatter_class=fmt)
    t.add_argument("--data", required=True, help="directory holding multi/ and single/ corpora")
    t.add_argument("--out", required=True, help="run directory for checkpoint, loss log and plot")
    _add_config_flags(t)
    t.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint in --out")
    t.add_argument("--evaluate", action="store_true", help="score the target/ corpus after training")
    t.add_argument("--ledger", help="results ledger CSV (default: <out>/results.csv)")
    t.add_argument("--log-every", type=_positive(int), default=10, help="progress log interval in steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="cross-domain retrieval metrics for a checkpoint",
                       formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="directory holding the evaluation corpus")
    e.add_argument("--domain", default="target", help="corpus subdirectory to evaluate")
    e.add_argument("--ledger", default="results.csv", help="results ledger CSV to append to")
    e.add_argument("--seed", type=int, default=0, help="query/gallery split seed")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run an ablation grid and chart it", formatter_class=fmt)
    from .grids import GRIDS
    a.add_argument("--grid", required=True, choices=sorted(GRIDS), help="grid name")
    a.add_argument("--out", required=True, help="output directory for ledger, summary and chart")
    _add_config_flags(a)
    a.add_argument("--epochs", type=_positive(int), default=10, help="training epochs per cell")
    a.add_argument("--warmup", type=int, default=1, help="warm-up epochs per cell")
    a.add_argument("--seeds", type=_seed_list, default=[0], help="comma-separated seeds shared by all cells")
    a.add_argument("--scale", type=_positive(float), default=1.0, help="corpus identity-count multiplier")
    a.add_argument("--jobs", type=_positive(int), default=1, help="parallel worker processes")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss", formatter_class=fmt)
    c.add_argument("--scope", default="all", choices=("all", "reid", "match", "rec", "total"),
                   help="which losses to check")
    c.add_argument("--batches", type=_positive(int), default=5, help="seeded micro-batches per loss")
    c.add_argument("--step", type=_positive(float), default=1e-5, help="central-difference step")
    c.add_argument("--tol", type=_positive(float), default=1e-4, help="max relative error")
    c.add_argument("--coords", type=_positive(int), default=32, help="coordinates probed per parameter")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("recon", help="write original/masked/reconstructed image strips",
                       formatter_class=fmt)
    r.add_argument("--checkpoint", required=True, help="checkpoint file")
    r.add_argument("--data", required=True, help="directory holding the single/ corpus")
    r.add_argument("--out", required=True, help="output directory for PNG strips")
    r.add_argument("--count", type=_positive(int), default=8, help="number of images")
    r.add_argument("--seed", type=int, default=0, help="mask seed")
    r.set_defaults(func=cmd_recon)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ReTextError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
