"""Configured end-to-end runs: generate, train, estimate, rectify, evaluate.

Every stage is a plain function so the command line can run them one at a
time from persisted artifacts. All randomness is derived from the config
seed through :func:`labelshift.synth.derive_seed` with a fixed stream index
per stage, so a (config, seed) pair always produces the same numbers.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .align import (AlignConfig, Discriminator, probe_domain_accuracy,
                    train_conditional_alignment, train_source_only)
from .core import (ConfusionMatrix, LabelDistribution, accumulate_confusion, iou_per_class,
                   l1_distance, mean_defined_iou, pixel_accuracy)
from .estimate import (BayesOracle, EstimationConfig, estimate_source_distribution,
                       estimate_target_distribution, source_pixel_ratio)
from .net import PixelNet, predict_proba
from .rectify import DEFAULT_FLOOR, inference_adjust, refine_classifier
from .synth import (DomainDataset, SceneSpec, derive_seed, empirical_image_marginal,
                    generate_dataset, make_rng, simplex_means)

PRESETS = ("E1", "E2", "E3")
MODES = ("none", "IA", "CR", "CLS")
REPORT_SCHEMA_ID = "labelshift-report/1"

# stream indices for derive_seed(cfg.seed, i)
_S_SOURCE, _S_TARGET, _S_INIT, _S_TRAIN, _S_REFINE, _S_PROBE = range(6)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists (field, message) pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.problems))

    def to_dict(self) -> dict:
        return {"error": "invalid_config",
                "problems": [{"field": k, "message": m} for k, m in self.problems]}


DEFAULTS = {
    "preset": "custom",
    "seed": 0,
    "scenes": {"train": 400, "eval": 100},
    "source": None,
    "target": {},
    "model": {"hidden": [32, 16], "split_index": 2, "disc_hidden": 32},
    "training": {"align": True, "source_only_baseline": False},
    "align": {"lambda_adv": 0.1, "iterations": 2000, "disc_lr": 1e-3, "net_lr": 2.5e-4,
              "mode": "direct"},
    "estimation": {"min_pixels": None, "output_space": "probabilities"},
    "rectification": ["none", "IA"],
    "refine": {"epochs": 2, "lr": 2.5e-4},
    "use_estimated_distributions": False,
    "prior_override": None,
    "evaluate_oracle": True,
    "probe": {"enabled": False, "per_class": 2000},
    "save_datasets": False,
    "output_dir": None,
    "sweep": None,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _spec_from(d: dict, seed: int) -> SceneSpec:
    d = dict(d)
    marg = d["label_marginal"]
    k = len(marg)
    dim = int(d["feature_dim"])
    means = d.get("class_means", {"simplex_scale": 1.0})
    if isinstance(means, dict):
        means = simplex_means(k, dim, float(means["simplex_scale"]))
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape != (k, dim):
        raise ValueError(f"class_means has shape {means.shape}, expected ({k}, {dim})")
    shift = d.get("conditional_shift")
    return SceneSpec(int(d["height"]), int(d["width"]), means, float(d["noise_sigma"]),
                     LabelDistribution(marg),
                     None if shift is None else np.asarray(shift, dtype=np.float64),
                     int(d.get("blob_count", 4)), seed)


@dataclass
class ExperimentConfig:
    """Validated configuration; ``raw`` is the normalised dict that gets hashed."""

    raw: dict
    source: SceneSpec
    target: SceneSpec
    align: AlignConfig
    estimation: EstimationConfig

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        raw = _merge(DEFAULTS, d)
        problems: list[tuple[str, str]] = []
        unknown = set(d) - set(DEFAULTS)
        for key in sorted(unknown):
            problems.append((key, "unknown field"))
        if raw["preset"] not in PRESETS + ("custom",):
            problems.append(("preset", f"must be one of {PRESETS + ('custom',)}"))
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            problems.append(("seed", "must be a non-negative integer"))
        for key in ("train", "eval"):
            n = raw["scenes"].get(key)
            if not isinstance(n, int) or n < 1:
                problems.append((f"scenes.{key}", "must be a positive integer"))

        src = tgt = None
        seed = raw["seed"] if isinstance(raw["seed"], int) and raw["seed"] >= 0 else 0
        if not isinstance(raw["source"], dict):
            problems.append(("source", "scene spec required"))
        else:
            try:
                src = _spec_from(raw["source"], derive_seed(seed, _S_SOURCE))
            except (KeyError, ValueError, TypeError) as exc:
                problems.append(("source", str(exc)))
        if src is not None:
            try:
                tgt = _spec_from(_merge(raw["source"], raw["target"]),
                                 derive_seed(seed, _S_TARGET))
            except (KeyError, ValueError, TypeError) as exc:
                problems.append(("target", str(exc)))
            if tgt is not None:
                if tgt.num_classes != src.num_classes:
                    problems.append(("target", f"K={tgt.num_classes} differs from source "
                                               f"K={src.num_classes}"))
                if tgt.feature_dim != src.feature_dim:
                    problems.append(("target", f"d={tgt.feature_dim} differs from source "
                                               f"d={src.feature_dim}"))

        try:
            align = AlignConfig(**raw["align"])
        except (TypeError, ValueError) as exc:
            problems.append(("align", str(exc)))
            align = None
        try:
            est = EstimationConfig(**raw["estimation"])
        except (TypeError, ValueError) as exc:
            problems.append(("estimation", str(exc)))
            est = None

        model = raw["model"]
        hidden = model.get("hidden")
        if not (isinstance(hidden, list) and all(isinstance(h, int) and h > 0 for h in hidden)):
            problems.append(("model.hidden", "must be a list of positive integers"))
        elif not 0 <= model.get("split_index", -1) <= len(hidden):
            problems.append(("model.split_index", "must index a layer boundary"))
        elif model["split_index"] == 0:
            problems.append(("model.split_index", "feature extractor needs at least one layer"))

        modes = raw["rectification"]
        if not isinstance(modes, list) or not modes:
            problems.append(("rectification", "must be a non-empty list"))
        else:
            for m in modes:
                parts = set(str(m).split("+"))
                if {"CR", "IA"} <= parts:
                    problems.append(("rectification", f"{m!r}: CR and IA cannot both be "
                                                      "enabled (the correction would be "
                                                      "applied twice)"))
                elif len(parts) > 1 or m not in MODES:
                    problems.append(("rectification", f"unknown mode {m!r}; use one of {MODES}"))
            if len(set(modes)) != len(modes):
                problems.append(("rectification", "duplicate modes"))
        ref = raw["refine"]
        if not isinstance(ref.get("epochs"), int) or ref["epochs"] < 0:
            problems.append(("refine.epochs", "must be a non-negative integer"))
        if not ref.get("lr", 0) > 0:
            problems.append(("refine.lr", "must be positive"))

        override = raw["prior_override"]
        if override is not None:
            try:
                for key in ("p_s", "p_t"):
                    if LabelDistribution(override[key]).num_classes != (
                            src.num_classes if src else -1):
                        problems.append((f"prior_override.{key}", "wrong number of classes"))
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(("prior_override", str(exc)))
        if raw["sweep"] is not None and not isinstance(raw["sweep"], dict):
            problems.append(("sweep", "must be an object or null"))
        if problems:
            raise ConfigError(problems)
        return cls(raw, src, tgt, align, est)

    @classmethod
    def load(cls, path_or_preset: str) -> "ExperimentConfig":
        return cls.from_dict(load_config_dict(path_or_preset))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.raw, "seed": seed})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def preset(self) -> str:
        return self.raw["preset"]

    @property
    def num_classes(self) -> int:
        return self.source.num_classes

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def stream(self, index: int) -> np.random.Generator:
        return make_rng(derive_seed(self.seed, index))

    def net_dims(self) -> list[int]:
        return [self.source.feature_dim] + list(self.raw["model"]["hidden"]) + [self.num_classes]


def load_config_dict(path_or_preset: str) -> dict:
    """A JSON file path, or the name of a packaged preset (E1, E2, E3)."""
    if path_or_preset in PRESETS:
        text = resources.files("labelshift.presets").joinpath(
            f"{path_or_preset}.json").read_text()
    else:
        text = Path(path_or_preset).read_text()
    d = json.loads(text)
    d.pop("_comment", None)
    return d


# ----------------------------------------------------------------- stages

@dataclass
class Datasets:
    source_train: DomainDataset
    target_train: DomainDataset
    target_eval: DomainDataset


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    n_train = cfg.raw["scenes"]["train"]
    n_eval = cfg.raw["scenes"]["eval"]
    return Datasets(generate_dataset(cfg.source, n_train),
                    generate_dataset(cfg.target, n_train),
                    # evaluation scenes continue the target index sequence
                    generate_dataset(cfg.target, n_eval, start=n_train))


@dataclass
class TrainResult:
    net: PixelNet
    disc: Discriminator | None
    history: list
    source_only: PixelNet | None = None


def train_stage(cfg: ExperimentConfig, data: Datasets) -> TrainResult:
    init = PixelNet.init(cfg.net_dims(), cfg.raw["model"]["split_index"], cfg.stream(_S_INIT))
    a = cfg.align
    so = None
    if cfg.raw["training"]["source_only_baseline"] or not cfg.raw["training"]["align"]:
        so, so_hist = train_source_only(data.source_train, init.copy(), a.iterations,
                                        cfg.stream(_S_TRAIN), base_lr=a.net_lr)
    if not cfg.raw["training"]["align"]:
        return TrainResult(so, None, [(it, l, 0.0, 0.0) for it, l in so_hist], None)
    disc = Discriminator.create(init.feature_dim, cfg.num_classes,
                                make_rng(derive_seed(cfg.seed, 100 + _S_INIT)),
                                hidden=cfg.raw["model"]["disc_hidden"])
    net, disc, hist = train_conditional_alignment(data.source_train, data.target_train,
                                                  init.copy(), a, cfg.stream(_S_TRAIN), disc=disc)
    return TrainResult(net, disc, hist, so)


@dataclass
class Estimates:
    p_s: LabelDistribution
    p_t: LabelDistribution
    p_pix: LabelDistribution
    p_t_true: LabelDistribution
    min_pixels: int

    @property
    def l1(self) -> float:
        return l1_distance(self.p_t, self.p_t_true)

    def to_dict(self) -> dict:
        return {"p_s_estimated": self.p_s.tolist(), "p_t_estimated": self.p_t.tolist(),
                "p_pix": self.p_pix.tolist(), "p_t_true_image": self.p_t_true.tolist(),
                "min_pixels": self.min_pixels, "l1_p_t": self.l1}

    @classmethod
    def from_dict(cls, d: dict) -> "Estimates":
        return cls(LabelDistribution(d["p_s_estimated"]), LabelDistribution(d["p_t_estimated"]),
                   LabelDistribution(d["p_pix"]), LabelDistribution(d["p_t_true_image"]),
                   int(d["min_pixels"]))


def estimate_stage(cfg: ExperimentConfig, data: Datasets, model) -> Estimates:
    spec = cfg.source
    n_s = cfg.estimation.threshold(spec.height, spec.width)
    p_s = estimate_source_distribution(data.source_train, cfg.estimation)
    p_pix = source_pixel_ratio(data.source_train)
    p_t = estimate_target_distribution(data.target_train, model, p_pix, cfg.estimation)
    # labels of the target training split are used only for scoring the estimate
    truth = empirical_image_marginal(data.target_train, n_s)
    return Estimates(p_s, p_t, p_pix, truth, n_s)


def priors_for(cfg: ExperimentConfig, est: Estimates | None):
    """(P_s, P_t, provenance) used by every rectification variant."""
    override = cfg.raw["prior_override"]
    if override is not None:
        return (LabelDistribution(override["p_s"]), LabelDistribution(override["p_t"]),
                "override")
    if cfg.raw["use_estimated_distributions"]:
        if est is None:
            raise ValueError("estimated distributions requested but none were computed")
        return est.p_s, est.p_t, "estimated"
    return cfg.source.label_marginal, cfg.target.label_marginal, "ground_truth"


@dataclass
class Predictor:
    """A network plus an optional inference-time prior correction."""

    net: object
    ia: tuple[LabelDistribution, LabelDistribution] | None = None
    mode: str = "none"

    def predict(self, features: np.ndarray) -> np.ndarray:
        if isinstance(self.net, PixelNet):
            probs = predict_proba(self.net, features)
        else:
            from .core import softmax
            probs = softmax(self.net(features))
        if self.ia is None:
            return np.argmax(probs, axis=-1)
        p_t, p_s = self.ia
        return inference_adjust(probs, p_t, p_s, DEFAULT_FLOOR)


def rectify(cfg: ExperimentConfig, net: PixelNet, src: DomainDataset, mode: str,
            p_s: LabelDistribution, p_t: LabelDistribution) -> Predictor:
    if mode == "none":
        return Predictor(net, None, mode)
    if mode == "IA":
        return Predictor(net, (p_t, p_s), mode)
    ref = cfg.raw["refine"]
    refined = refine_classifier(net, src, p_s, p_t, ref["epochs"], cfg.stream(_S_REFINE),
                                loss=mode.lower(), base_lr=ref["lr"])
    return Predictor(refined, None, mode)


def evaluate(predictor: Predictor, ds: DomainDataset) -> dict:
    cm = ConfusionMatrix(ds.spec.num_classes)
    for scene in ds:
        accumulate_confusion(predictor.predict(scene.features), scene.labels, cm)
    iou = iou_per_class(cm)
    return {"iou_per_class": [None if np.isnan(v) else float(v) for v in iou],
            "miou": mean_defined_iou(iou),
            "pixel_accuracy": pixel_accuracy(cm)}


def oracle_predictor(cfg: ExperimentConfig) -> Predictor:
    """Exact target-domain features with the source prior, then IA with true priors."""
    model = BayesOracle(cfg.target, prior=cfg.source.label_marginal)
    return Predictor(model, (cfg.target.label_marginal, cfg.source.label_marginal), "oracle")


# ----------------------------------------------------------------- report

@dataclass
class RunReport:
    preset: str
    seed: int
    config_hash: str
    num_classes: int
    variants: dict
    estimation: dict | None
    priors: dict
    probe: dict
    history: list
    wall_clock: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Everything except timing; byte-stable for a fixed (config, seed)."""
        return {"schema": REPORT_SCHEMA_ID, "preset": self.preset, "seed": self.seed,
                "config_hash": self.config_hash, "num_classes": self.num_classes,
                "variants": self.variants, "estimation": self.estimation,
                "priors": self.priors, "probe": self.probe,
                "history_length": len(self.history)}

    def miou(self, variant: str) -> float:
        return self.variants[variant]["miou"]


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "preset", "seed", "config_hash", "num_classes", "variants",
                 "estimation", "priors", "probe", "history_length"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "preset": {"enum": list(PRESETS) + ["custom"]},
        "seed": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "num_classes": {"type": "integer", "minimum": 2},
        "variants": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "required": ["iou_per_class", "miou", "pixel_accuracy"],
                "properties": {
                    "iou_per_class": {"type": "array",
                                      "items": {"type": ["number", "null"]}},
                    "miou": {"type": "number", "minimum": 0, "maximum": 1},
                    "pixel_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "estimation": {"type": ["object", "null"]},
        "priors": {"type": "object", "required": ["p_s", "p_t", "source"]},
        "probe": {"type": "object",
                  "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "history_length": {"type": "integer", "minimum": 0},
    },
}


def run_experiment(cfg: ExperimentConfig, out_dir=None, data: Datasets | None = None) -> RunReport:
    """The full pipeline. Artifacts go to ``out_dir`` when it is given."""
    from . import storage

    clock = {}
    t0 = time.perf_counter()
    if data is None:
        data = build_datasets(cfg)
    clock["generate"] = time.perf_counter() - t0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and cfg.raw["save_datasets"]:
        for name in ("source_train", "target_train", "target_eval"):
            storage.save_dataset(getattr(data, name), out / "data" / name)

    t0 = time.perf_counter()
    trained = train_stage(cfg, data)
    clock["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    est = estimate_stage(cfg, data, trained.net)
    p_s, p_t, provenance = priors_for(cfg, est)
    clock["estimate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    predictors = {m: rectify(cfg, trained.net, data.source_train, m, p_s, p_t)
                  for m in cfg.raw["rectification"]}
    if trained.source_only is not None:
        predictors["source_only"] = Predictor(trained.source_only, None, "none")
        predictors["source_only+IA"] = Predictor(trained.source_only, (p_t, p_s), "IA")
    if cfg.raw["evaluate_oracle"]:
        predictors["oracle"] = oracle_predictor(cfg)
    clock["rectify"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    variants = {name: evaluate(p, data.target_eval) for name, p in predictors.items()}
    probe = {}
    if cfg.raw["probe"]["enabled"]:
        per_class = cfg.raw["probe"]["per_class"]
        probe["aligned"] = probe_domain_accuracy(trained.net, data.source_train,
                                                 data.target_train, cfg.stream(_S_PROBE),
                                                 per_class)
        if trained.source_only is not None:
            probe["source_only"] = probe_domain_accuracy(trained.source_only, data.source_train,
                                                         data.target_train,
                                                         cfg.stream(_S_PROBE), per_class)
    clock["evaluate"] = time.perf_counter() - t0

    report = RunReport(cfg.preset, cfg.seed, cfg.config_hash(), cfg.num_classes, variants,
                       est.to_dict(), {"p_s": p_s.tolist(), "p_t": p_t.tolist(),
                                       "source": provenance},
                       probe, [list(map(float, row)) for row in trained.history], clock)
    if out is not None:
        ckpts = out / "checkpoints"
        nets = {"net": trained.net}
        if trained.disc is not None:
            nets["disc"] = trained.disc
        storage.save_checkpoint(ckpts / "net.ckpt", storage.Checkpoint(nets, len(trained.history)))
        if trained.source_only is not None:
            storage.save_checkpoint(ckpts / "source_only.ckpt",
                                    storage.Checkpoint({"net": trained.source_only},
                                                       cfg.align.iterations))
        for name, pred in predictors.items():
            if pred.mode in ("CR", "CLS"):
                storage.save_checkpoint(
                    ckpts / f"rectified-{pred.mode}.ckpt",
                    storage.Checkpoint({"net": pred.net}, len(trained.history),
                                       rectification_record(pred.mode, p_s, p_t, provenance)))
        storage.write_json(out / "distributions.json", {**est.to_dict(), "priors_used":
                                                        report.priors})
        emit_report(report, out)
    return report


def rectification_record(mode: str, p_s, p_t, provenance: str) -> dict:
    return {"mode": mode, "p_s": LabelDistribution(p_s).tolist(),
            "p_t": LabelDistribution(p_t).tolist(), "priors": provenance}


def emit_report(report: RunReport, out_dir) -> dict[str, Path]:
    """report.json, timing.json, iou_per_class.csv and loss_history.csv."""
    from .storage import write_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": write_json(out / "report.json", report.metrics()),
             "timing": write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock})}
    names = list(report.variants)
    paths["iou"] = out / "iou_per_class.csv"
    with open(paths["iou"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + names)
        for k in range(report.num_classes):
            row = [report.variants[n]["iou_per_class"][k] for n in names]
            w.writerow([k] + ["" if v is None else repr(v) for v in row])
    paths["history"] = out / "loss_history.csv"
    with open(paths["history"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_seg", "L_adv", "L_D"])
        for it, ls, la, ld in report.history:
            w.writerow([int(it), repr(ls), repr(la), repr(ld)])
    return paths


# ----------------------------------------------------------------- sweep

def estimation_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Oracle-model estimation error over thresholds, scene counts and blob counts.

    The oracle is the exact target posterior computed with the source prior,
    which is what an ideally aligned but unrectified model would output.
    """
    sw = cfg.raw["sweep"] or {}
    thresholds = sw.get("min_pixels", [None])
    counts = sw.get("scene_counts", [cfg.raw["scenes"]["eval"]])
    blobs = sw.get("blob_counts", [cfg.source.blob_count])
    rows = []
    for b in blobs:
        src_spec = cfg.source.replace(blob_count=b)
        tgt_spec = cfg.target.replace(blob_count=b)
        src = generate_dataset(src_spec, cfg.raw["scenes"]["train"])
        tgt_all = generate_dataset(tgt_spec, max(counts))
        p_pix = source_pixel_ratio(src)
        oracle = BayesOracle(tgt_spec, prior=src_spec.label_marginal)
        for n in counts:
            tgt = DomainDataset(tgt_all.scenes[:n], tgt_spec)
            for m in thresholds:
                ecfg = EstimationConfig(m, cfg.estimation.output_space)
                n_s = ecfg.threshold(tgt_spec.height, tgt_spec.width)
                est = estimate_target_distribution(tgt, oracle, p_pix, ecfg)
                truth = empirical_image_marginal(tgt, n_s)
                p_s = estimate_source_distribution(src, ecfg)
                rows.append({"blob_count": b, "scenes": n, "min_pixels": n_s,
                             "l1_p_t": l1_distance(est, truth),
                             "source_exact": p_s == empirical_image_marginal(src, n_s),
                             "p_t_estimated": est.tolist(), "p_t_true_image": truth.tolist()})
    return rows
