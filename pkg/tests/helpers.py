"""Independent reference implementations shared by several test modules."""

import numpy as np

from roast import tensor as T
from roast.adversarial import task_loss
from roast.models import Model
from roast.rng import RandomSource


def plain_sgd_on_doubled_loss(model: Model, inputs, labels, lr: float, batch_size: int,
                              epochs: int, seed: int) -> np.ndarray:
    """SGD on 2 * cross-entropy, replaying the trainer's shuffle stream.

    Returns the loss trajectory; ``model`` is updated in place.
    """
    shuffle_rng, _ = RandomSource(seed).split(2)
    n = len(labels)
    losses = []
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for i in range(0, n, batch_size):
            b = order[i:i + batch_size]
            params = model.params()
            loss = T.scale(task_loss(model, inputs[b], labels[b], params), 2.0)
            grads = T.backward(loss, [params[nm] for nm in model.store.names])
            model.store.flat -= lr * np.concatenate([g.reshape(-1) for g in grads])
            losses.append(loss.item())
    return np.array(losses)
