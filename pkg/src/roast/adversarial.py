"""Single-step embedding perturbation and the adversarial training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from roast import tensor as T
from roast.models import Model
from roast.tensor import Tensor

SCOPES = ("per-example", "per-token")


@dataclass
class PerturbConfig:
    delta: float = 0.1
    lam: float = 0.1
    norm_scope: str = "per-example"

    def __post_init__(self):
        if self.delta < 0 or self.lam < 0:
            raise ValueError("delta and lambda must be non-negative")
        if self.norm_scope not in SCOPES:
            raise ValueError(f"norm_scope must be one of {SCOPES}")


def build_adversarial_input(x: np.ndarray, grad_x: np.ndarray, delta: float,
                            scope: str = "per-example") -> np.ndarray:
    """``x + delta * grad_x / ||grad_x||_inf``.

    ``per-example`` takes the max-abs over every entry after the batch axis;
    ``per-token`` takes it over the last axis only.  Slices whose gradient is
    all zero are left unperturbed.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad_x, dtype=float)
    if x.shape != g.shape:
        raise T.ShapeError(f"input {x.shape} vs gradient {g.shape}")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if delta == 0 or g.size == 0:
        return x.copy()
    if scope == "per-example" and g.ndim > 1:
        axes = tuple(range(1, g.ndim))
    elif scope == "per-token" or g.ndim == 1:
        axes = (g.ndim - 1,)
    else:
        raise ValueError(f"unknown norm scope {scope!r}")
    norm = np.abs(g).max(axis=axes, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return x + delta * np.where(norm > 0, g / safe, 0.0)


def task_loss(model: Model, inputs, labels, params=None) -> Tensor:
    params = params if params is not None else model.params()
    return T.cross_entropy(model.forward_from_embeddings(model.embed(inputs, params), params), labels)


def perturbation_direction(model: Model, inputs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Embedding-stage values and dL_task/dx with parameters held fixed."""
    frozen = model.params(requires_grad=False)
    emb = model.embed(inputs, frozen).data
    x = Tensor(emb, requires_grad=True, _trusted=True)
    loss = T.cross_entropy(model.forward_from_embeddings(x, frozen), labels)
    (gx,) = T.backward(loss, [x])
    return emb, gx


@dataclass
class LossParts:
    total: float
    clean: float
    adversarial: float
    consistency: float


def roast_training_loss(model: Model, inputs, labels, config: PerturbConfig,
                        params: dict[str, Tensor] | None = None,
                        adversarial: bool = True) -> tuple[Tensor, LossParts, dict[str, Tensor]]:
    """Clean CE + adversarial CE + lambda * bidirectional KL(clean, adversarial).

    The perturbation comes from a separate backward pass through the clean
    task loss and enters the main graph as a constant.  With
    ``adversarial=False`` only the clean task loss is built (vanilla
    fine-tuning).  Returns the scalar loss, its parts and the parameter
    leaves to differentiate.
    """
    params = params if params is not None else model.params()
    emb = model.embed(inputs, params)
    clean_logits = model.forward_from_embeddings(emb, params)
    clean = T.cross_entropy(clean_logits, labels)
    if not adversarial:
        v = clean.item()
        return clean, LossParts(v, v, 0.0, 0.0), params

    x, gx = perturbation_direction(model, inputs, labels)
    x_adv = build_adversarial_input(x, gx, config.delta, config.norm_scope)
    adv_emb = T.add(emb, Tensor(x_adv - x, _trusted=True))
    adv_logits = model.forward_from_embeddings(adv_emb, params)
    adv = T.cross_entropy(adv_logits, labels)
    total = T.add(clean, adv)
    cons_value = 0.0
    if config.lam > 0:
        cons = T.bidirectional_kl(clean_logits, adv_logits)
        cons_value = cons.item()
        total = T.add(total, T.scale(cons, config.lam))
    parts = LossParts(total.item(), clean.item(), adv.item(), cons_value)
    return total, parts, params
