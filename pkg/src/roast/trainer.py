"""Importance-driven stochastic gradient masking and the training loop.

Per scalar parameter the trainer keeps a running sum of squared gradients
over the current window.  At every refresh the sums are rank-normalised to
[0, 1], passed through a logistic to get a keep-probability, and a
Bernoulli mask is drawn.  The mask then gates (and optionally rescales by
1/p) every SGD step until the next refresh.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from roast import tensor as T
from roast.adversarial import PerturbConfig, roast_training_loss
from roast.models import Model, ParameterStore
from roast.rng import RandomSource

log = logging.getLogger(__name__)

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6

STRATEGIES = ("max", "min", "rand")
MASK_MODES = ("sample", "hard-threshold", "soft-scale", "off")
SIGMOID_SIGNS = ("rising", "as-printed")

# candidate grids used for hyper-parameter selection in the original LM runs
DELTA_DEFAULT = 0.1
LAMBDA_CANDIDATES = (0.01, 0.1, 0.5)
ALPHA_RANGE = (0.6, 0.95)
BETA_CANDIDATES = (1.0, 5.0, 10.0)


class DivergenceError(RuntimeError):
    pass


@dataclass
class RoastConfig:
    delta: float = DELTA_DEFAULT
    lam: float = 0.1
    alpha: float = 0.7
    beta: float = 5.0
    lr: float = 0.1
    refresh_period: int | None = None  # None: one epoch of iterations
    scaling: bool = True
    strategy: str = "max"
    mask_mode: str = "sample"
    sigmoid_sign: str = "rising"
    adversarial: bool = True
    norm_scope: str = "per-example"
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.refresh_period is not None and self.refresh_period < 1:
            raise ValueError("refresh period must be >= 1")
        if self.delta < 0 or self.lam < 0:
            raise ValueError("delta and lambda must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.sigmoid_sign not in SIGMOID_SIGNS:
            raise ValueError(f"sigmoid_sign must be one of {SIGMOID_SIGNS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def perturb(self) -> PerturbConfig:
        return PerturbConfig(self.delta, self.lam, self.norm_scope)

    @classmethod
    def from_dict(cls, d: dict) -> "RoastConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# importance


class ImportanceAccumulator:
    """Windowed per-scalar sum of squared gradients."""

    def __init__(self, size: int):
        self.sums = np.zeros(size)
        self.steps = 0

    def __len__(self) -> int:
        return self.sums.size

    def reset(self) -> None:
        self.sums = np.zeros_like(self.sums)
        self.steps = 0


def accumulate_importance(acc: ImportanceAccumulator, gradients) -> None:
    g = np.asarray(gradients, dtype=float).reshape(-1)
    if g.size != acc.sums.size:
        raise ValueError(f"gradient length {g.size} != accumulator length {acc.sums.size}")
    acc.sums += g * g
    acc.steps += 1


def batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def flat_gradient(model: Model, inputs, labels, config: RoastConfig | None = None,
                  adversarial: bool = False) -> tuple[float, np.ndarray]:
    """Loss value and its gradient over all parameters as one flat vector."""
    perturb = config.perturb if config is not None else PerturbConfig(0.0, 0.0)
    loss, _, params = roast_training_loss(model, inputs, labels, perturb, adversarial=adversarial)
    leaves = [params[n] for n in model.store.names]
    grads = T.backward(loss, leaves)
    return loss.item(), np.concatenate([g.reshape(-1) for g in grads])


def init_grad(model: Model, inputs, labels, batch_size: int) -> ImportanceAccumulator:
    """One pass over the data summing squared plain cross-entropy gradients."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    acc = ImportanceAccumulator(model.store.size)
    for b in batches(n, batch_size):
        _, g = flat_gradient(model, inputs[b], labels[b])
        accumulate_importance(acc, g)
    return acc


# ---------------------------------------------------------------------------
# masking


def normalize_scores(scores, strategy: str = "max", rng: RandomSource | None = None) -> np.ndarray:
    """Rank-normalise scores to [0, 1]; ties broken by flat index.

    ``min`` reverses the order (least important -> 1); ``rand`` ignores the
    scores and assigns a random permutation of the ranks.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    n = s.size
    if n == 0:
        return s.copy()
    if n == 1:
        return np.array([0.5])
    if strategy == "rand":
        if rng is None:
            raise ValueError("strategy 'rand' needs a random source")
        ranks = rng.permutation(n)
    else:
        key = -s if strategy == "min" else s
        if strategy not in ("max", "min"):
            raise ValueError(f"unknown strategy {strategy!r}")
        order = np.lexsort((np.arange(n), key))
        ranks = np.empty(n, dtype=np.int64)
        ranks[order] = np.arange(n)
    return ranks / (n - 1)


def sampling_probability(normalized, alpha: float, beta: float,
                         sigmoid_sign: str = "rising") -> np.ndarray:
    """Logistic keep-probability around ``alpha``, clamped to [1e-6, 1-1e-6].

    ``rising`` gives high-rank scalars high probability; ``as-printed`` is
    the mirrored curve ``1 / (1 + exp(2*beta*(s - alpha)))``.
    """
    s = np.asarray(normalized, dtype=float)
    z = 2.0 * beta * (s - alpha)
    if sigmoid_sign == "rising":
        p = expit(z)
    elif sigmoid_sign == "as-printed":
        p = expit(-z)
    else:
        raise ValueError(f"unknown sigmoid sign {sigmoid_sign!r}")
    return np.clip(p, P_MIN, P_MAX)


def sample_mask(p, rng: RandomSource) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return (rng.random(p.shape) < p).astype(float)


def hard_threshold_mask(normalized, alpha: float) -> np.ndarray:
    return (np.asarray(normalized) >= alpha).astype(float)


@dataclass
class MaskState:
    normalized: np.ndarray
    prob: np.ndarray
    mask: np.ndarray
    refresh_index: int = 0
    refreshed_at: int = 0  # iteration


def refresh_mask(scores, config: RoastConfig, rng: RandomSource,
                 refresh_index: int = 0, iteration: int = 0) -> MaskState:
    s_norm = normalize_scores(scores, config.strategy, rng)
    p = sampling_probability(s_norm, config.alpha, config.beta, config.sigmoid_sign)
    if config.mask_mode == "hard-threshold":
        m = hard_threshold_mask(s_norm, config.alpha)
    elif config.mask_mode == "sample":
        m = sample_mask(p, rng)
    else:
        m = np.ones_like(p)
    return MaskState(s_norm, p, m, refresh_index, iteration)


def masked_gradient(gradients, state: MaskState | None, scaling: bool = True,
                    mask_mode: str = "sample") -> np.ndarray:
    g = np.asarray(gradients, dtype=float).reshape(-1)
    if mask_mode == "off" or state is None:
        return g
    if len(state.mask) != g.size:
        raise ValueError(f"mask length {len(state.mask)} != gradient length {g.size}")
    if mask_mode == "hard-threshold":
        return state.mask * g
    if mask_mode == "soft-scale":
        return state.prob * g
    if mask_mode == "sample":
        return (state.mask / state.prob) * g if scaling else state.mask * g
    raise ValueError(f"unknown mask mode {mask_mode!r}")


def apply_masked_update(store: ParameterStore, gradients, state: MaskState | None,
                        lr: float, scaling: bool = True, mask_mode: str = "sample") -> np.ndarray:
    """``theta -= lr * g_tilde`` in place; returns ``g_tilde``."""
    g = np.asarray(gradients, dtype=float).reshape(-1)
    if g.size != store.size:
        raise ValueError(f"gradient length {g.size} != parameter count {store.size}")
    g_tilde = masked_gradient(g, state, scaling, mask_mode)
    store.flat -= lr * g_tilde
    store.grad[:] = g
    if state is not None:
        store.prob[:] = state.prob
        store.mask[:] = state.mask
    return g_tilde


def mask_iou(a, b) -> float:
    a = np.asarray(a).astype(bool).reshape(-1)
    b = np.asarray(b).astype(bool).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"mask lengths differ: {a.size} vs {b.size}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    mask_density: float
    iou_vs_first: float = 1.0
    iou_vs_last: float = 1.0


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_mask_ids: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)  # one per refresh
    epoch_mask_ids: list[int] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.epochs)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @staticmethod
    def read(path) -> list[EpochRecord]:
        return [EpochRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


def train(model: Model, inputs, labels, config: RoastConfig,
          rng: RandomSource | None = None) -> TrainLog:
    """Run the masked adversarial training loop; updates ``model.store`` in place.

    Raises :class:`DivergenceError` if the loss becomes non-finite.
    """
    config.validate()
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    rng = rng if rng is not None else RandomSource(config.seed)
    shuffle_rng, mask_rng = rng.split(2)
    steps_per_epoch = math.ceil(n / config.batch_size)
    period = config.refresh_period or steps_per_epoch
    masking = config.mask_mode != "off"

    acc = init_grad(model, inputs, labels, config.batch_size) if masking else None
    state: MaskState | None = None
    trainlog = TrainLog()
    refreshes = 0
    t = 0
    for epoch in range(config.epochs):
        losses = []
        order = shuffle_rng.permutation(n)
        for b in batches(n, config.batch_size, order):
            if masking and t % period == 0:
                scores = acc.sums.copy()
                acc.reset()
                state = refresh_mask(scores, config, mask_rng, refreshes, t)
                trainlog.masks.append(state.mask.copy())
                refreshes += 1
            if masking and t % steps_per_epoch == 0:
                trainlog.epoch_mask_ids.append(state.refresh_index)
            try:
                loss, _, params = roast_training_loss(model, inputs[b], labels[b], config.perturb,
                                                      adversarial=config.adversarial)
            except T.NonFiniteError as exc:
                raise DivergenceError(f"non-finite forward at step {t}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"loss became non-finite at step {t}")
            grads = T.backward(loss, [params[nm] for nm in model.store.names])
            g = np.concatenate([x.reshape(-1) for x in grads])
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient at step {t}")
            apply_masked_update(model.store, g, state, config.lr, config.scaling, config.mask_mode)
            if not np.all(np.isfinite(model.store.flat)):
                raise DivergenceError(f"parameters became non-finite at step {t}")
            if masking:
                accumulate_importance(acc, g)
                trainlog.step_mask_ids.append(state.refresh_index)
            losses.append(loss.item())
            t += 1
        density = float(state.mask.mean()) if state is not None else 1.0
        trainlog.epochs.append(EpochRecord(epoch + 1, float(np.mean(losses)), density))
        log.debug("epoch %d loss %.4f density %.3f", epoch + 1, np.mean(losses), density)

    model.trained = True
    if trainlog.epoch_mask_ids:
        first = trainlog.masks[trainlog.epoch_mask_ids[0]]
        last = trainlog.masks[trainlog.epoch_mask_ids[-1]]
        for rec, mid in zip(trainlog.epochs, trainlog.epoch_mask_ids):
            rec.iou_vs_first = mask_iou(first, trainlog.masks[mid])
            rec.iou_vs_last = mask_iou(last, trainlog.masks[mid])
    return trainlog
