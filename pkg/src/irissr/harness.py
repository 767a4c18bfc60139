"""Dataset ingestion, experiment orchestration and CSV reporting."""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import sae as sae_mod
from . import srcnn
from .image import downscale, load_image, resize
from .iris import (LogGaborConfig, Sample, SegmentationAnnotation, preprocess, run_verification,
                   unwrap)
from .metrics import format_value, psnr, ssim, vif
from .srcnn import MissingWeightsError

log = logging.getLogger(__name__)

METHODS = ("bilinear", "bicubic", "srcnn-fs", "srcnn-tl", "srcnn-ft", "sae")
LEARNED = ("srcnn-fs", "srcnn-tl", "srcnn-ft", "sae")
CASIA_ID = re.compile(r"^S(\d+)([LR])\d+$")
IMAGE_SUFFIXES = (".png", ".pgm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
ANNOTATION_FIELDS = ("image_id", "pupil_cx", "pupil_cy", "pupil_r", "sclera_cx", "sclera_cy", "sclera_r")


class CorpusError(ValueError):
    pass


@dataclass
class CorpusEntry:
    image_id: str
    path: Path
    annotation: SegmentationAnnotation
    user_id: str
    eye_id: str
    split: str = "train"


@dataclass
class Corpus:
    entries: list[CorpusEntry]
    rejects: list[tuple[str, str]] = field(default_factory=list)

    def validate(self) -> None:
        """Enforce user-disjoint train/test splits."""
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise CorpusError(f"{e.image_id}: unknown split {e.split!r}")
            other = seen.setdefault(e.user_id, e.split)
            if other != e.split:
                raise CorpusError(f"user {e.user_id} appears in both train and test splits")

    def split(self, name: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def users(self) -> list[str]:
        return sorted({e.user_id for e in self.entries})


def eye_id_from_image_id(image_id: str) -> str:
    """CASIA-style ``S1001L03`` -> ``1001L``; anything else is its own eye."""
    m = CASIA_ID.match(image_id)
    return f"{m.group(1)}{m.group(2)}" if m else image_id


def read_annotations(path) -> dict[str, dict]:
    """Parse the annotation CSV (header row, one record per image)."""
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in ANNOTATION_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise CorpusError(f"annotation file lacks columns {missing}")
        for row in reader:
            image_id = row["image_id"].strip()
            if image_id in out:
                raise CorpusError(f"duplicate image_id {image_id!r} in annotations")
            out[image_id] = row
    return out


def _find_image(root: Path, image_id: str) -> Optional[Path]:
    direct = root / image_id
    if direct.suffix and direct.is_file():
        return direct
    for suffix in IMAGE_SUFFIXES:
        for cand in (root / f"{image_id}{suffix}", root / f"{image_id}{suffix.upper()}"):
            if cand.is_file():
                return cand
    hits = sorted(root.rglob(f"{image_id}.*"))
    return hits[0] if hits else None


def ingest(root_dir, annotation_file, train_fraction=0.47) -> Corpus:
    """Build a corpus, treating each eye as a user.

    Users are sorted lexicographically and the first floor(fraction * n)
    go to training, unless the annotation file carries a ``split`` column.
    Missing images and malformed annotations are collected in
    ``corpus.rejects`` rather than aborting.
    """
    root = Path(root_dir)
    records = read_annotations(annotation_file)
    entries, rejects = [], []
    explicit = False
    for image_id, row in records.items():
        try:
            ann = SegmentationAnnotation.from_values(*(float(row[f]) for f in ANNOTATION_FIELDS[1:]))
        except (TypeError, ValueError) as exc:
            rejects.append((image_id, f"bad annotation: {exc}"))
            continue
        path = _find_image(root, image_id)
        if path is None:
            rejects.append((image_id, "image not found"))
            continue
        eye = (row.get("eye_id") or "").strip() or eye_id_from_image_id(image_id)
        entry = CorpusEntry(image_id, path, ann, user_id=eye, eye_id=eye)
        if row.get("split"):
            entry.split = row["split"].strip()
            explicit = True
        entries.append(entry)
    if not explicit:
        users = sorted({e.user_id for e in entries})
        n_train = math.floor(train_fraction * len(users))
        train_users = set(users[:n_train])
        for e in entries:
            e.split = "train" if e.user_id in train_users else "test"
    for image_id, reason in rejects:
        log.warning("rejected %s: %s", image_id, reason)
    corpus = Corpus(entries, rejects)
    corpus.validate()
    return corpus


def load_samples(entries, target_sclera_radius=105.0) -> list[Sample]:
    """Read and preprocess entries; discarded captures keep ``image=None``."""
    out = []
    for e in entries:
        try:
            res = preprocess(load_image(e.path), e.annotation, target_sclera_radius)
        except OSError as exc:
            log.warning("cannot read %s: %s", e.path, exc)
            res = None
        if res is None:
            log.info("discarded %s: 231x231 crop does not fit", e.image_id)
            out.append(Sample(e.image_id, e.eye_id, None, None))
        else:
            out.append(Sample(e.image_id, e.eye_id, res[0], res[1]))
    return out


# -- configuration -----------------------------------------------------------------

def _ints(text) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _words(text) -> list[str]:
    return [t for t in str(text).replace(",", " ").split()]


def _coerce(cls, section) -> object:
    kwargs = {}
    for f in fields(cls):
        if f.name in section:
            raw = section[f.name]
            default = getattr(cls(), f.name)
            kwargs[f.name] = type(default)(raw) if not isinstance(default, bool) else raw.lower() in ("1", "true", "yes", "on")
    return cls(**kwargs)


@dataclass
class ExperimentConfig:
    methods: list[str] = field(default_factory=lambda: ["bicubic"])
    factors: list[int] = field(default_factory=lambda: [2])
    scenarios: list[int] = field(default_factory=lambda: [1, 2])
    seed: int = 0
    train_factors: dict[str, list[int]] = field(default_factory=dict)
    weights: dict[tuple[str, int], str] = field(default_factory=dict)
    base_weights: dict[int, str] = field(default_factory=dict)
    train_missing: bool = False
    strips: bool = True
    baseline: bool = False
    target_sclera_radius: float = 105.0
    max_shift: int = 8
    sae_stride: int = 7
    patch_stride: int = 14
    jobs: int = 1  # cells evaluated concurrently; 1 is the deterministic serial mode
    srcnn: srcnn.SrcnnTrainConfig = field(default_factory=srcnn.desk_config)
    srcnn_init: str = "desk"
    sae: sae_mod.SaeTrainConfig = field(default_factory=sae_mod.SaeTrainConfig)
    log_gabor: LogGaborConfig = field(default_factory=LogGaborConfig)

    def __post_init__(self):
        if not self.methods or not self.factors:
            raise ValueError("methods and factors must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        for f in self.factors:
            if f not in (2, 4, 8, 16):
                raise ValueError(f"factor {f} not in (2, 4, 8, 16)")
        if any(s not in (1, 2) for s in self.scenarios):
            raise ValueError("scenarios must be 1 and/or 2")

    def train_factors_for(self, method: str) -> list[Optional[int]]:
        if method not in LEARNED:
            return [None]
        return self.train_factors.get(method, [2])

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        """Read ``key = value`` sections; see README for every addressable key."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(path)
        ex = cp["experiment"] if cp.has_section("experiment") else {}
        kw: dict = {}
        if "methods" in ex:
            kw["methods"] = _words(ex["methods"])
        for key in ("factors", "scenarios"):
            if key in ex:
                kw[key] = _ints(ex[key])
        for key in ("seed", "max_shift", "sae_stride", "patch_stride", "jobs"):
            if key in ex:
                kw[key] = int(ex[key])
        for key in ("train_missing", "strips", "baseline"):
            if key in ex:
                kw[key] = ex[key].strip().lower() in ("1", "true", "yes", "on")
        if "target_sclera_radius" in ex:
            kw["target_sclera_radius"] = float(ex["target_sclera_radius"])
        if "srcnn_init" in ex:
            kw["srcnn_init"] = ex["srcnn_init"].strip()
        if cp.has_section("train_factors"):
            kw["train_factors"] = {m: _ints(v) for m, v in cp["train_factors"].items()}
        if cp.has_section("weights"):
            weights = {}
            for key, value in cp["weights"].items():
                method, _, factor = key.rpartition(".")
                weights[(method, int(factor))] = value
            kw["weights"] = weights
        if cp.has_section("base_weights"):
            kw["base_weights"] = {int(k): v for k, v in cp["base_weights"].items()}
        if cp.has_section("srcnn"):
            base = srcnn.desk_config()
            for f in fields(srcnn.SrcnnTrainConfig):
                if f.name in cp["srcnn"]:
                    setattr(base, f.name, type(getattr(base, f.name))(cp["srcnn"][f.name]))
            kw["srcnn"] = base
        if cp.has_section("sae"):
            kw["sae"] = _coerce(sae_mod.SaeTrainConfig, cp["sae"])
        if cp.has_section("log_gabor"):
            kw["log_gabor"] = _coerce(LogGaborConfig, cp["log_gabor"])
        cfg = cls(**kw)
        if "seed" in ex:
            cfg.srcnn.seed = cfg.seed
            cfg.sae.seed = cfg.seed
        return cfg


# -- reports -------------------------------------------------------------------------

@dataclass
class ReportRow:
    method: str
    train_factor: Optional[int]
    eval_factor: int
    metric: str
    value: Optional[float]


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)

    HEADER = ("method", "train_factor", "eval_factor", "metric", "value")

    def add(self, *args) -> None:
        self.rows.append(ReportRow(*args))

    def get(self, method, train_factor, eval_factor, metric):
        hits = [r.value for r in self.rows if (r.method, r.train_factor, r.eval_factor, r.metric)
                == (method, train_factor, eval_factor, metric)]
        if len(hits) != 1:
            raise KeyError((method, train_factor, eval_factor, metric))
        return hits[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows:
            w.writerow([r.method, format_value(r.train_factor), r.eval_factor, r.metric, format_value(r.value)])
        return buf.getvalue()


# -- models ---------------------------------------------------------------------------

def train_srcnn_fs(images, factor, cfg: ExperimentConfig):
    pairs = srcnn.make_training_set(images, factor, cfg.patch_stride)
    init = srcnn.DESK_INIT if cfg.srcnn_init == "desk" else float(cfg.srcnn_init)
    model = srcnn.build_default(factor, seed=cfg.srcnn.seed, init_std=init)
    return srcnn.train(model, pairs, srcnn.TrainRegime("FS", factor, cfg.srcnn))


def train_sae_model(images, factor, cfg: ExperimentConfig):
    pairs = srcnn.make_training_set(images, factor, cfg.patch_stride)
    return sae_mod.train_sae(pairs, cfg.sae, trained_factor=factor)


def obtain_model(method: str, factor: int, cfg: ExperimentConfig, train_images=None):
    """Load a weight file or, when allowed, train on ``train_images``."""
    path = cfg.weights.get((method, factor))
    loader = sae_mod.SaeModel.load if method == "sae" else srcnn.SrcnnModel.load
    if path:
        return loader(path)
    if method == "srcnn-tl":
        base = cfg.base_weights.get(factor)
        return srcnn.train(None, [], srcnn.TrainRegime("TL", factor, cfg.srcnn, base))[0]
    if not cfg.train_missing or train_images is None:
        raise MissingWeightsError(f"no weights for {method} at factor {factor} and training is disabled")
    log.info("training %s at factor %d on %d images", method, factor, len(train_images))
    if method == "srcnn-fs":
        return train_srcnn_fs(train_images, factor, cfg)[0]
    if method == "srcnn-ft":
        pairs = srcnn.make_training_set(train_images, factor, cfg.patch_stride)
        regime = srcnn.TrainRegime("FT", factor, cfg.srcnn, cfg.base_weights.get(factor))
        return srcnn.train(None, pairs, regime)[0]
    return train_sae_model(train_images, factor, cfg)[0]


def reconstructor(method, train_factor, eval_factor, model=None, sae_stride=7):
    """HR image -> degraded-then-restored image, or None when the cell is undefined."""
    if method in LEARNED:
        try:
            srcnn.pass_count(eval_factor, train_factor)
        except ValueError:
            return None

    def run(hr):
        h, w = hr.shape
        lr = downscale(hr, eval_factor)
        if method == "bilinear":
            return resize(lr, w, h, "bilinear")
        if method == "bicubic":
            return resize(lr, w, h, "bicubic")
        if method == "sae":
            return sae_mod.super_resolve_sae(lr, eval_factor, model, sae_stride, out_shape=(h, w))
        return srcnn.super_resolve(lr, eval_factor, model, out_shape=(h, w))

    return run


def _cells(cfg: ExperimentConfig):
    for method in cfg.methods:
        for tf in cfg.train_factors_for(method):
            for ef in cfg.factors:
                yield method, tf, ef


def prepare_models(corpus: Corpus, cfg: ExperimentConfig, models=None) -> dict:
    models = dict(models or {})
    needed = {(m, tf) for m, tf, _ in _cells(cfg) if m in LEARNED}
    train_images = None
    for key in sorted(needed):
        if key in models:
            continue
        if train_images is None and cfg.train_missing:
            train_images = [s.image for s in load_samples(corpus.split("train"), cfg.target_sclera_radius)
                            if s.image is not None]
        models[key] = obtain_model(*key, cfg, train_images)
    return models


QUALITY_METRICS = (("psnr", psnr), ("ssim", ssim), ("vif", vif))


def run_quality_experiment(corpus: Corpus, cfg: ExperimentConfig, models=None, samples=None) -> ExperimentReport:
    """Average PSNR/SSIM/VIF over the test split for every (method, factor) cell.

    With ``cfg.strips`` the same metrics are also reported on the 20x240
    unwrapped iris strips, under ``strip_psnr`` etc.
    """
    corpus.validate()
    models = prepare_models(corpus, cfg, models)
    if samples is None:
        samples = load_samples(corpus.split("test"), cfg.target_sclera_radius)
    samples = [s for s in samples if s.image is not None]
    if not samples:
        raise CorpusError("no usable test images")
    names = [n for n, _ in QUALITY_METRICS]
    if cfg.strips:
        names += [f"strip_{n}" for n, _ in QUALITY_METRICS]

    def cell(key):
        method, tf, ef = key
        run = reconstructor(method, tf, ef, models.get((method, tf)), cfg.sae_stride)
        if run is None:
            return {n: None for n in names}
        acc = {n: [] for n in names}
        for s in samples:
            sr = run(s.image)
            for n, fn in QUALITY_METRICS:
                acc[n].append(fn(s.image, sr))
            if cfg.strips:
                ref_strip = unwrap(s.image, s.annotation).strip
                sr_strip = unwrap(sr, s.annotation).strip
                for n, fn in QUALITY_METRICS:
                    acc[f"strip_{n}"].append(fn(ref_strip, sr_strip))
        return {n: float(np.mean(v)) for n, v in acc.items()}

    cells = list(_cells(cfg))
    report = ExperimentReport()
    for key, values in zip(cells, _map(cell, cells, cfg.jobs)):
        for n in names:
            report.add(*key, n, values[n])
    return report


def _map(fn, items, jobs):
    """Ordered map; threads when jobs > 1 (numpy releases the GIL in the heavy parts)."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def run_recognition_experiment(corpus: Corpus, cfg: ExperimentConfig, models=None, samples=None,
                               score_sink=None) -> ExperimentReport:
    """EER per (method, factor, scenario) on the test split.

    ``score_sink``, if given, receives ``(cell, scores)`` for each run.
    With ``cfg.baseline`` an undegraded control row (method ``original``,
    factor 1) is added for each scenario.
    """
    corpus.validate()
    models = prepare_models(corpus, cfg, models)
    if samples is None:
        samples = load_samples(corpus.split("test"), cfg.target_sclera_radius)
    report = ExperimentReport()
    if cfg.baseline:
        for sc in cfg.scenarios:
            res, scores = run_verification(sc, samples, samples, None, cfg.max_shift, cfg.log_gabor)
            report.add("original", None, 1, f"scenario{sc}", res.eer)
            if score_sink:
                score_sink(("original", None, 1, sc), scores)

    def cell(key):
        method, tf, ef, sc = key
        run = reconstructor(method, tf, ef, models.get((method, tf)), cfg.sae_stride)
        if run is None:
            return None, []
        res, scores = run_verification(sc, samples, samples, run, cfg.max_shift, cfg.log_gabor)
        return res.eer, scores

    cells = [(m, tf, ef, sc) for m, tf, ef in _cells(cfg) for sc in cfg.scenarios]
    for (method, tf, ef, sc), (eer, scores) in zip(cells, _map(cell, cells, cfg.jobs)):
        report.add(method, tf, ef, f"scenario{sc}", eer)
        if score_sink and eer is not None:
            score_sink((method, tf, ef, sc), scores)
    return report


def scores_csv(cell_scores) -> str:
    """Score dump: one row per comparison, prefixed by the experiment cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "train_factor", "eval_factor", "scenario",
                "query_id", "enrolled_id", "label", "score"])
    for (method, tf, ef, sc), scores in cell_scores:
        for s in scores:
            w.writerow([method, format_value(tf), ef, sc, s.query_id, s.enrolled_id,
                        "genuine" if s.genuine else "impostor", f"{s.score:.6f}"])
    return buf.getvalue()
