"""Method grid runs: train every (method, seed), evaluate all splits, score."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from roast import metrics
from roast.bench.data import (DatasetBundle, DatasetError, Split, SuiteSpec,
                              build_transfer_adversarial_set, generate_synthetic_suite)
from roast.metrics import MetricVector
from roast.models import Model, ModelSpec
from roast.trainer import DivergenceError, EpochRecord, RoastConfig, train

log = logging.getLogger(__name__)

# overrides applied on top of the base training config
METHODS: dict[str, dict] = {
    "vanilla": {"adversarial": False, "mask_mode": "off"},
    "adv-only": {"adversarial": True, "mask_mode": "off"},
    "thre": {"adversarial": False, "mask_mode": "hard-threshold"},
    "adv-thre": {"adversarial": True, "mask_mode": "hard-threshold"},
    "adv-scal": {"adversarial": True, "mask_mode": "soft-scale"},
    "roast": {"adversarial": True, "mask_mode": "sample", "strategy": "max"},
    "roast-min": {"adversarial": True, "mask_mode": "sample", "strategy": "min"},
    "roast-rand": {"adversarial": True, "mask_mode": "sample", "strategy": "rand"},
}
BASELINE = "vanilla"


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    training: RoastConfig = field(default_factory=RoastConfig)
    data: SuiteSpec = field(default_factory=SuiteSpec)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 1234
    reference_seed: int = 999
    delta_attack: float = 0.5
    workers: int = 1
    out: str = "results"

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.delta_attack < 0:
            raise ValueError("delta_attack must be non-negative")
        if self.model.vocab_size != self.data.vocab_size:
            raise ValueError("model vocab_size must equal data vocab_size")
        if self.model.num_classes != self.data.num_classes:
            raise ValueError("model num_classes must equal data num_classes")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(
            model=ModelSpec.from_dict(d.pop("model", {})),
            training=RoastConfig.from_dict(d.pop("training", {})),
            data=SuiteSpec.from_dict(d.pop("data", {})),
            **d,
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    method: str
    seed: int
    metrics: MetricVector | None
    breakdown: dict = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False
    error: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "metrics": None if self.metrics is None else self.metrics.as_dict(),
            "breakdown": self.breakdown,
            "epochs": [asdict(e) for e in self.epochs],
            "diverged": self.diverged,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(d["method"], d["seed"],
                   None if d["metrics"] is None else MetricVector(**d["metrics"]),
                   d.get("breakdown", {}), [EpochRecord(**e) for e in d.get("epochs", [])],
                   d.get("diverged", False), d.get("error", ""))


def method_config(base: RoastConfig, method: str, seed: int) -> RoastConfig:
    return replace(base, **METHODS[method], seed=seed)


def split_probs(model: Model, split: Split) -> np.ndarray:
    return model.predict_proba(split.tokens, split.perturbation)


def evaluate(model: Model, bundle: DatasetBundle, bins: int = 10) -> tuple[MetricVector, dict]:
    """Metric vector plus per-split breakdown.

    Accuracy per tag is the uniform mean over that tag's splits; ECE is the
    uniform mean over every labeled eval split; AUROC pairs the pooled
    in-distribution splits with each anomaly split and averages.
    """
    tags_present = {s.tag for s in bundle.evals}
    missing = {"in", "shift", "adv", "anomaly"} - tags_present
    if missing:
        raise DatasetError(f"bundle lacks eval splits tagged {sorted(missing)}")
    probs = {s.name: split_probs(model, s) for s in bundle.evals}
    breakdown: dict[str, dict] = {}
    accs: dict[str, list[float]] = {"in": [], "shift": [], "adv": []}
    eces = []
    for s in bundle.evals:
        if s.tag == "anomaly":
            continue
        acc = metrics.accuracy(probs[s.name], s.labels)
        ece = metrics.expected_calibration_error(probs[s.name], s.labels, bins)
        accs[s.tag].append(acc)
        eces.append(ece)
        breakdown[s.name] = {"tag": s.tag, "accuracy": acc, "ece": ece, "n": len(s)}
    in_probs = np.concatenate([probs[s.name] for s in bundle.splits("in")])
    aurocs = []
    for s in bundle.splits("anomaly"):
        a = metrics.auroc_msp(in_probs, probs[s.name])
        aurocs.append(a)
        breakdown[s.name] = {"tag": "anomaly", "auroc": a, "n": len(s)}
    vec = MetricVector(float(np.mean(accs["in"])), float(np.mean(accs["shift"])),
                       float(np.mean(accs["adv"])), float(np.mean(eces)), float(np.mean(aurocs)))
    return vec, breakdown


def prepare_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    """Synthetic suite plus a frozen transfer-attack split per in-dist split."""
    bundle = generate_synthetic_suite(cfg.data_seed, cfg.data)
    reference = Model.create(cfg.model, cfg.reference_seed)
    train(reference, bundle.train.tokens, bundle.train.labels,
          method_config(cfg.training, BASELINE, cfg.reference_seed))
    adv = [build_transfer_adversarial_set(s, reference, cfg.delta_attack, cfg.training.norm_scope)
           for s in bundle.splits("in")]
    bundle.evals.extend(adv)
    bundle.validate()
    return bundle


def run_single(cfg: ExperimentConfig, bundle: DatasetBundle, method: str, seed: int) -> RunResult:
    t0 = time.perf_counter()
    model = Model.create(cfg.model, seed)
    tcfg = method_config(cfg.training, method, seed)
    try:
        trainlog = train(model, bundle.train.tokens, bundle.train.labels, tcfg)
    except DivergenceError as exc:
        log.warning("%s seed %d diverged: %s", method, seed, exc)
        return RunResult(method, seed, None, diverged=True, error=str(exc),
                         wall_time=time.perf_counter() - t0)
    vec, breakdown = evaluate(model, bundle)
    return RunResult(method, seed, vec, breakdown, trainlog.epochs,
                     wall_time=time.perf_counter() - t0)


def _run_job(args):
    cfg, bundle, method, seed = args
    return run_single(cfg, bundle, method, seed)


def run_experiment(cfg: ExperimentConfig, bundle: DatasetBundle | None = None) -> list[RunResult]:
    """Train and evaluate every (method, seed); results come back in grid order."""
    cfg.validate()
    bundle = bundle if bundle is not None else prepare_bundle(cfg)
    jobs = [(cfg, bundle, m, s) for m in cfg.methods for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def config_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
