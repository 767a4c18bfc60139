"""Command-line entry point. Every subcommand writes CSV to stdout (or --out)."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, sae as sae_mod, srcnn, synth
from .image import downscale, load_image, resize, save_image
from .iris import InvalidAnnotationError
from .metrics import format_value, quality
from .nn import CorruptWeightsError, DenseLayer, grad_check_report

log = logging.getLogger("irissr")

GRAD_TOLERANCE = 1e-3


def _emit(rows, out=None):
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerows(rows)
    finally:
        if out:
            fh.close()


def _write_text(text, out=None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_ini(args.config) if args.config else harness.ExperimentConfig()
    if getattr(args, "methods", None):
        cfg.methods = args.methods
    if getattr(args, "factors", None):
        cfg.factors = args.factors
    if getattr(args, "scenarios", None):
        cfg.scenarios = args.scenarios
    for spec in getattr(args, "weights", None) or []:
        key, _, path = spec.partition("=")
        method, _, factor = key.rpartition(".")
        if not path or not method:
            raise ValueError(f"--weights expects METHOD.FACTOR=PATH, got {spec!r}")
        cfg.weights[(method, int(factor))] = path
    for spec in getattr(args, "base_weights", None) or []:
        factor, _, path = spec.partition("=")
        cfg.base_weights[int(factor)] = path
    if getattr(args, "train_missing", False):
        cfg.train_missing = True
    if getattr(args, "baseline", False):
        cfg.baseline = True
    if getattr(args, "no_strips", False):
        cfg.strips = False
    if args.seed is not None:
        cfg.seed = cfg.srcnn.seed = cfg.sae.seed = args.seed
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    if getattr(args, "deterministic", False):
        cfg.jobs = 1
    cfg.__post_init__()
    return cfg


def _corpus(args) -> harness.Corpus:
    corpus = harness.ingest(args.corpus, args.annotations, args.train_fraction)
    if args.rejects:
        _emit([("image_id", "reason"), *corpus.rejects], args.rejects)
    log.info("corpus: %d images, %d users, %d rejected", len(corpus.entries), len(corpus.users),
             len(corpus.rejects))
    return corpus


def cmd_quality(args) -> int:
    cfg = _load_config(args)
    report = harness.run_quality_experiment(_corpus(args), cfg)
    _write_text(report.to_csv(), args.out)
    return 0


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    dumps = []
    report = harness.run_recognition_experiment(_corpus(args), cfg,
                                                score_sink=lambda cell, s: dumps.append((cell, s)))
    _write_text(report.to_csv(), args.out)
    if args.scores:
        Path(args.scores).write_text(harness.scores_csv(dumps))
    return 0


def _training_images(args) -> list[np.ndarray]:
    if args.corpus:
        corpus = harness.ingest(args.corpus, args.annotations, args.train_fraction)
        samples = harness.load_samples(corpus.split(args.split))
        return [s.image for s in samples if s.image is not None]
    if args.images:
        paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in harness.IMAGE_SUFFIXES)
        return [load_image(p) for p in paths]
    rng = np.random.default_rng(args.seed or 0)
    return [synth.texture_image(96, rng) for _ in range(args.textures)]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    images = _training_images(args)
    if args.method != "srcnn-tl" and not images:
        raise ValueError("no training images")
    if args.iterations is not None:
        cfg.srcnn.iterations = args.iterations
    if args.epochs is not None:
        cfg.sae.epochs = args.epochs
    base = cfg.base_weights.get(args.factor)
    rows = [("iteration", "mean_mse")]
    if args.method == "sae":
        model, history = harness.train_sae_model(images, args.factor, cfg)
        rows += [(i, f"{v:.6g}") for i, v in enumerate(history)]
    else:
        mode = {"srcnn-fs": "FS", "srcnn-tl": "TL", "srcnn-ft": "FT"}[args.method]
        if mode == "FS":
            model, history = harness.train_srcnn_fs(images, args.factor, cfg)
        else:
            pairs = srcnn.make_training_set(images, args.factor, cfg.patch_stride) if mode == "FT" else []
            model, history = srcnn.train(None, pairs, srcnn.TrainRegime(mode, args.factor, cfg.srcnn, base))
        rows += [(i, f"{v:.6g}") for i, v in history]
    model.save(args.out_weights)
    _emit(rows, args.out)
    return 0


def cmd_sr(args) -> int:
    img = load_image(args.input)
    h, w = img.shape
    if args.degrade:
        lr = downscale(img, args.factor)
        out_shape = (h, w)
    else:
        lr = img
        out_shape = (h * args.factor, w * args.factor)
    passes = []
    if args.method in ("bicubic", "bilinear"):
        out = resize(lr, out_shape[1], out_shape[0], args.method)
    else:
        if not args.weights:
            raise srcnn.MissingWeightsError(f"--weights is required for method {args.method}")
        if args.method == "sae":
            model = sae_mod.SaeModel.load(args.weights)
            out = sae_mod.super_resolve_sae(lr, args.factor, model, out_shape=out_shape,
                                            on_pass=lambda j, _: passes.append(j))
        else:
            model = srcnn.SrcnnModel.load(args.weights)
            out = srcnn.super_resolve(lr, args.factor, model, out_shape=out_shape,
                                      on_pass=lambda j, _: passes.append(j))
    save_image(out, args.output)
    rows = [("input", "output", "method", "factor", "passes", "width", "height")]
    rows.append((args.input, args.output, args.method, args.factor, len(passes), out.shape[1], out.shape[0]))
    if args.degrade:
        q = quality(img, out)
        rows[0] += ("psnr", "ssim", "vif")
        rows[1] += (format_value(q.psnr), format_value(q.ssim), format_value(q.vif))
    _emit(rows, args.out)
    return 0


def cmd_synth(args) -> int:
    ann = synth.write_corpus(args.out_dir, args.users, args.captures, (args.height, args.width), args.seed or 0,
                             tuple(args.eyes))
    _emit([("annotations", "images"), (str(ann), args.users * args.captures * len(args.eyes))], args.out)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    rng = np.random.default_rng(seed)
    x, y = rng.random((1, srcnn.PATCH, srcnn.PATCH, 1)), rng.random((1, srcnn.OUT, srcnn.OUT, 1))
    cases = [("srcnn", srcnn.build_default(2, seed=seed).net, x, y)]
    if not args.skip_sae:
        dims = sae_mod.SAE_DIMS
        layers = [DenseLayer.create(a, b, activation="sigmoid", init="glorot_sigmoid", rng=rng)
                  for a, b in zip(dims[:-2], dims[1:-1])]
        net = sae_mod.SaeModel.from_layers(layers, DenseLayer.create(dims[-2], dims[-1], rng=rng)).net
        cases.append(("sae", net, rng.random((1, dims[0])), rng.random((1, dims[-1]))))
    rows = [("model", "checked", "kink_draws_replaced", "max_rel_error", "tolerance", "status")]
    ok = True
    for name, net, xi, yi in cases:
        res = grad_check_report(net, xi, yi, n_samples=args.samples, rng=seed)
        good = res.max_rel_error <= GRAD_TOLERANCE and res.checked == args.samples
        ok &= good
        rows.append((name, res.checked, res.skipped_kinks, f"{res.max_rel_error:.3g}", GRAD_TOLERANCE,
                     "pass" if good else "fail"))
    _emit(rows, args.out)
    return 0 if ok else 1


def _ints(text):
    return [int(t) for t in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irissr", description="Super-resolution for iris recognition.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus_required=True):
        sp.add_argument("--corpus", required=corpus_required, help="image root directory")
        sp.add_argument("--annotations", required=corpus_required, help="annotation CSV")
        sp.add_argument("--train-fraction", type=float, default=0.47)
        sp.add_argument("--config", help="INI experiment configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--weights", action="append", metavar="METHOD.FACTOR=PATH")
        sp.add_argument("--base-weights", action="append", metavar="FACTOR=PATH")
        sp.add_argument("--rejects", help="write rejected images to this CSV")
        sp.add_argument("--out", help="CSV output file (default stdout)")

    def experiment(sp):
        common(sp)
        sp.add_argument("--methods", type=lambda s: s.replace(",", " ").split())
        sp.add_argument("--factors", type=_ints)
        sp.add_argument("--train-missing", action="store_true", help="train learned models lacking weights")
        sp.add_argument("--jobs", type=int, help="cells evaluated concurrently")
        sp.add_argument("--deterministic", action="store_true", help="serialize everything")

    q = sub.add_parser("quality", help="quality metrics per method and factor")
    experiment(q)
    q.add_argument("--no-strips", action="store_true", help="skip the unwrapped-strip variant")
    q.set_defaults(func=cmd_quality)

    v = sub.add_parser("verify", help="verification EER per method, factor and scenario")
    experiment(v)
    v.add_argument("--scenarios", type=_ints)
    v.add_argument("--baseline", action="store_true", help="add the undegraded control row")
    v.add_argument("--scores", help="dump every comparison score to this CSV")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one model and write its weight file")
    common(t, corpus_required=False)
    t.add_argument("--method", choices=harness.LEARNED, required=True)
    t.add_argument("--factor", type=int, default=2)
    t.add_argument("--split", default="train", choices=("train", "test"))
    t.add_argument("--images", help="directory of plain training images (e.g. natural photos)")
    t.add_argument("--textures", type=int, default=20, help="synthetic textures when no corpus is given")
    t.add_argument("--iterations", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out-weights", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sr", help="super-resolve one image")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--factor", type=int, default=2)
    s.add_argument("--method", default="srcnn", choices=("srcnn", "sae", "bicubic", "bilinear"))
    s.add_argument("--weights")
    s.add_argument("--degrade", action="store_true",
                   help="treat the input as high resolution: degrade, restore and score it")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sr)

    y = sub.add_parser("synth", help="write a synthetic annotated eye corpus")
    y.add_argument("--out-dir", required=True)
    y.add_argument("--users", type=int, default=6)
    y.add_argument("--captures", type=int, default=3)
    y.add_argument("--eyes", nargs="+", default=["L"], choices=["L", "R"])
    y.add_argument("--width", type=int, default=320)
    y.add_argument("--height", type=int, default=280)
    y.add_argument("--seed", type=int)
    y.add_argument("--out")
    y.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference self-test of both networks")
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.add_argument("--skip-sae", action="store_true")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, CorruptWeightsError, InvalidAnnotationError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
