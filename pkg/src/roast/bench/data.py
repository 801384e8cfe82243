"""Evaluation datasets: synthetic multi-perspective suite, JSONL I/O, transfer attacks."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from roast.adversarial import build_adversarial_input, perturbation_direction
from roast.models import Model
from roast.rng import RandomSource

log = logging.getLogger(__name__)

TAGS = ("in", "shift", "adv", "anomaly")


class DatasetError(ValueError):
    pass


@dataclass
class Split:
    name: str
    tag: str
    tokens: np.ndarray  # (n, L) int
    labels: np.ndarray | None  # (n,) int, None for anomaly splits
    perturbation: np.ndarray | None = None  # (n, L, d) for transfer-attack splits

    def __post_init__(self):
        if self.tag not in TAGS:
            raise DatasetError(f"unknown split tag {self.tag!r}")
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise DatasetError(f"split {self.name}: tokens must be (n, L)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.tokens),):
                raise DatasetError(f"split {self.name}: one label per sequence required")
        if self.tag != "anomaly" and self.labels is None:
            raise DatasetError(f"split {self.name}: {self.tag} splits need labels")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DatasetBundle:
    train: Split
    evals: list[Split]
    vocab_size: int
    num_classes: int

    @property
    def seq_len(self) -> int:
        return self.train.tokens.shape[1]

    def splits(self, tag: str) -> list[Split]:
        return [s for s in self.evals if s.tag == tag]

    def validate(self) -> None:
        for s in [self.train, *self.evals]:
            if len(s) == 0:
                raise DatasetError(f"split {s.name} is empty")
            if s.tokens.min() < 0 or s.tokens.max() >= self.vocab_size:
                raise DatasetError(f"split {s.name}: token id outside [0, {self.vocab_size})")
            if s.labels is not None and (s.labels.min() < 0 or s.labels.max() >= self.num_classes):
                raise DatasetError(f"split {s.name}: label outside [0, {self.num_classes})")
            if s.tag == "anomaly" and s.labels is not None:
                raise DatasetError(f"anomaly split {s.name} must not carry labels")


# ---------------------------------------------------------------------------
# synthetic suite


@dataclass
class SuiteSpec:
    vocab_size: int = 200
    seq_len: int = 16
    num_classes: int = 3
    n_train: int = 2000
    n_eval: int = 600
    tokens_per_class: int = 8
    anomaly_vocab: int = 40
    signal_rate: float = 0.3
    confuser_rate: float = 0.08
    zipf: float = 1.1
    shift_splits: list[dict] = field(default_factory=lambda: [
        {"name": "shift-profile", "seq_len": 24, "reverse_profile": True},
        {"name": "shift-sparse", "seq_len": 10, "signal_rate": 0.2, "reverse_profile": False},
    ])

    def __post_init__(self):
        signal = self.num_classes * self.tokens_per_class
        if signal + self.anomaly_vocab >= self.vocab_size:
            raise ValueError("vocabulary too small for class, neutral and anomaly regions")
        if self.num_classes < 2 or self.seq_len < 1:
            raise ValueError("need >= 2 classes and positive sequence length")

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data fields: {sorted(unknown)}")
        return cls(**d)

    # vocabulary regions
    def class_tokens(self, c: int) -> np.ndarray:
        k = self.tokens_per_class
        return np.arange(c * k, (c + 1) * k)

    @property
    def neutral_tokens(self) -> np.ndarray:
        return np.arange(self.num_classes * self.tokens_per_class, self.vocab_size - self.anomaly_vocab)

    @property
    def anomaly_tokens(self) -> np.ndarray:
        return np.arange(self.vocab_size - self.anomaly_vocab, self.vocab_size)


def _zipf_profile(n: int, a: float, reverse: bool = False) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    w = w[::-1] if reverse else w
    return w / w.sum()


def _sample_sequences(spec: SuiteSpec, rng: RandomSource, n: int, seq_len: int,
                      signal_rate: float, reverse_profile: bool) -> tuple[np.ndarray, np.ndarray]:
    C, k = spec.num_classes, spec.tokens_per_class
    labels = rng.integers(0, C, size=n)
    class_w = _zipf_profile(k, spec.zipf, reverse_profile)
    neutral = spec.neutral_tokens
    neutral_w = _zipf_profile(neutral.size, spec.zipf, reverse_profile)

    u = rng.random((n, seq_len))
    which_class_tok = rng.choice(k, size=(n, seq_len), p=class_w)
    other = (labels[:, None] + rng.integers(1, C, size=(n, seq_len))) % C
    neutral_pick = neutral[rng.choice(neutral.size, size=(n, seq_len), p=neutral_w)]

    own = labels[:, None] * k + which_class_tok
    confuser = other * k + which_class_tok
    tokens = np.where(u < signal_rate, own,
                      np.where(u < signal_rate + spec.confuser_rate, confuser, neutral_pick))
    return tokens.astype(np.int64), labels.astype(np.int64)


def generate_synthetic_suite(seed: int, spec: SuiteSpec | None = None) -> DatasetBundle:
    """Planted-token classification task with shifted and anomalous eval splits.

    Each class owns a block of indicative tokens; a sequence draws from its
    class block at ``signal_rate``, from another class's block at
    ``confuser_rate`` and otherwise from a shared neutral region.  Shift
    splits keep the labelling rule but change sequence length, signal rate
    and/or reverse the token frequency profiles.  Anomaly splits use only
    the reserved tail of the vocabulary, never seen in training.
    """
    spec = spec or SuiteSpec()
    rng = RandomSource(seed)
    r_train, r_in, r_anom, *r_shift = rng.split(3 + len(spec.shift_splits))
    train = Split("train", "in", *_sample_sequences(spec, r_train, spec.n_train, spec.seq_len,
                                                    spec.signal_rate, False))
    evals = [Split("in-dist", "in", *_sample_sequences(spec, r_in, spec.n_eval, spec.seq_len,
                                                      spec.signal_rate, False))]
    for sh, r in zip(spec.shift_splits, r_shift):
        tokens, labels = _sample_sequences(
            spec, r, spec.n_eval, sh.get("seq_len", spec.seq_len),
            sh.get("signal_rate", spec.signal_rate), sh.get("reverse_profile", False))
        evals.append(Split(sh.get("name", f"shift-{len(evals)}"), "shift", tokens, labels))
    anomaly = spec.anomaly_tokens[r_anom.integers(0, spec.anomaly_vocab, size=(spec.n_eval, spec.seq_len))]
    evals.append(Split("anomaly", "anomaly", anomaly, None))
    bundle = DatasetBundle(train, evals, spec.vocab_size, spec.num_classes)
    bundle.validate()
    return bundle


def oracle_predict(spec: SuiteSpec, tokens: np.ndarray) -> np.ndarray:
    """Count class-indicative tokens per class and pick the largest (lowest index on ties)."""
    counts = np.stack([np.isin(tokens, spec.class_tokens(c)).sum(axis=1)
                       for c in range(spec.num_classes)], axis=1)
    return counts.argmax(axis=1)


# ---------------------------------------------------------------------------
# transfer attack


def build_transfer_adversarial_set(source: Split, reference: Model, delta_attack: float,
                                   scope: str = "per-example", batch_size: int = 256,
                                   name: str | None = None) -> Split:
    """Freeze single-step embedding perturbations crafted against ``reference``.

    The stored perturbation is added to the embedding output of whatever
    model is evaluated on the returned split.
    """
    if not getattr(reference, "trained", False):
        raise DatasetError("reference model has not been trained")
    if delta_attack < 0:
        raise ValueError("delta_attack must be non-negative")
    if source.labels is None:
        raise DatasetError("transfer attack needs a labeled source split")
    chunks = []
    for i in range(0, len(source), batch_size):
        toks, ys = source.tokens[i:i + batch_size], source.labels[i:i + batch_size]
        x, gx = perturbation_direction(reference, toks, ys)
        chunks.append(build_adversarial_input(x, gx, delta_attack, scope) - x)
    pert = np.concatenate(chunks)
    pert.flags.writeable = False
    return Split(name or f"adv-{source.name}", "adv", source.tokens.copy(), source.labels.copy(), pert)


# ---------------------------------------------------------------------------
# JSONL


def export_jsonl(split: Split, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(split)):
            label = None if split.labels is None else int(split.labels[i])
            fh.write(json.dumps({"tokens": split.tokens[i].tolist(), "label": label}) + "\n")


def ingest_jsonl_dataset(path, split_tag: str, vocab_size: int, name: str | None = None,
                         num_classes: int | None = None) -> Split:
    """Read ``{"tokens": [...], "label": int | null}`` lines into a split."""
    if split_tag not in TAGS:
        raise DatasetError(f"unknown split tag {split_tag!r}")
    path = Path(path)
    tokens, labels = [], []
    labeled_anomaly = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                toks = rec["tokens"]
                label = rec.get("label")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line ({exc})") from None
            if not isinstance(toks, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in toks):
                raise DatasetError(f"{path}:{lineno}: tokens must be a list of integers")
            if tokens and len(toks) != len(tokens[0]):
                raise DatasetError(f"{path}:{lineno}: sequence length {len(toks)} != {len(tokens[0])}")
            if any(t < 0 or t >= vocab_size for t in toks):
                raise DatasetError(f"{path}:{lineno}: token id outside [0, {vocab_size})")
            if split_tag == "anomaly":
                labeled_anomaly |= label is not None
            else:
                if not isinstance(label, int) or isinstance(label, bool):
                    raise DatasetError(f"{path}:{lineno}: missing integer label")
                if label < 0 or (num_classes is not None and label >= num_classes):
                    raise DatasetError(f"{path}:{lineno}: label {label} out of range")
                labels.append(label)
            tokens.append(toks)
    if not tokens:
        raise DatasetError("empty split")
    if labeled_anomaly:
        warnings.warn(f"{path}: labels on an anomaly split are ignored", stacklevel=2)
    return Split(name or path.stem, split_tag, np.array(tokens, dtype=np.int64),
                 None if split_tag == "anomaly" else np.array(labels, dtype=np.int64))


def with_split(bundle: DatasetBundle, split: Split) -> DatasetBundle:
    out = replace(bundle, evals=[*bundle.evals, split])
    out.validate()
    return out
