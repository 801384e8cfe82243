"""Central finite-difference checks of the autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from roast import tensor as T
from roast.models import Model, ModelSpec
from roast.rng import RandomSource
from roast.tensor import Tensor

STEP = 1e-5
REL_TOL = 1e-4
# denominators below this are treated as this value, so near-zero gradients
# are judged by absolute error instead of blowing up the ratio
ABS_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def frozen_train_loss(model: Model, params: dict[str, Tensor], inputs, labels,
                      perturbation: np.ndarray, lam: float) -> Tensor:
    """Clean CE + perturbed CE + lam * bidirectional KL with a fixed perturbation."""
    emb = model.embed(inputs, params)
    clean = model.forward_from_embeddings(emb, params)
    adv = model.forward_from_embeddings(T.add(emb, Tensor(perturbation)), params)
    loss = T.add(T.cross_entropy(clean, labels), T.cross_entropy(adv, labels))
    return T.add(loss, T.scale(T.bidirectional_kl(clean, adv), lam))


@dataclass
class GradcheckResult:
    kind: str
    params: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < REL_TOL


def check_model(model: Model, inputs, labels, perturbation: np.ndarray,
                lam: float = 0.1, h: float = STEP) -> float:
    """Max relative error between backward and finite differences over all parameters."""
    params = model.params()
    names = model.store.names
    loss = frozen_train_loss(model, params, inputs, labels, perturbation, lam)
    analytic = np.concatenate([g.reshape(-1) for g in T.backward(loss, [params[n] for n in names])])

    def f(flat):
        saved = model.store.flat.copy()
        model.store.flat[:] = flat
        try:
            return frozen_train_loss(model, model.params(False), inputs, labels, perturbation, lam).item()
        finally:
            model.store.flat[:] = saved

    numeric = numeric_gradient(f, model.store.flat.copy(), h)
    return float(relative_error(analytic, numeric).max())


def random_instance(kind: str, rng: RandomSource) -> tuple[Model, np.ndarray, np.ndarray, np.ndarray]:
    """A small random model of ``kind`` with a batch and a fixed perturbation."""
    V = int(rng.integers(5, 9))
    d = int(rng.integers(2, 4))
    C = int(rng.integers(2, 4))
    B = int(rng.integers(2, 4))
    L = int(rng.integers(2, 4))
    if kind == "linear":
        spec = ModelSpec("linear", V, d, [], C)
    elif kind == "mlp":
        spec = ModelSpec("mlp", V, d, [int(rng.integers(3, 6))], C,
                         activation=str(rng.choice(["relu", "tanh"])))
    else:
        spec = ModelSpec("tiny-transformer", V, d, [int(rng.integers(2, 4))], C,
                         num_blocks=int(rng.integers(1, 3)))
    model = Model.create(spec, int(rng.integers(0, 2**31)))
    # random nonzero biases so every parameter has a generic gradient
    model.store.flat[:] += rng.normal(0, 0.3, model.store.size)
    tokens = rng.integers(0, V, size=(B, L))
    labels = rng.integers(0, C, size=B)
    pert = rng.normal(0, 0.1, size=(B, L, d))
    return model, tokens, labels, pert


def run_suite(instances: int = 50, seed: int = 0,
              kinds=("linear", "mlp", "tiny-transformer")) -> list[GradcheckResult]:
    rng = RandomSource(seed)
    out = []
    for i in range(instances):
        kind = kinds[i % len(kinds)]
        model, tokens, labels, pert = random_instance(kind, rng)
        err = check_model(model, tokens, labels, pert, lam=float(rng.uniform(0.01, 0.5)))
        out.append(GradcheckResult(kind, model.store.size, err))
    return out
