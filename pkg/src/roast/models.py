"""Small classifiers with an explicit embedding stage.

The forward pass is split in two so that callers can perturb the embedding
output: :meth:`Model.embed` turns token ids into a ``(B, L, d)`` tensor and
:meth:`Model.forward_from_embeddings` maps that tensor to ``(B, C)`` logits.
Dense-feature models (``vocab_size == 0``) skip the lookup; their raw
``(B, L, d)`` or ``(B, d)`` inputs play the role of the embedding output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from roast import tensor as T
from roast.rng import RandomSource
from roast.tensor import Tensor

KINDS = ("linear", "mlp", "tiny-transformer")


@dataclass
class ModelSpec:
    kind: str = "mlp"
    vocab_size: int = 200
    embed_dim: int = 16
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    num_classes: int = 3
    num_blocks: int = 1
    activation: str = "relu"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.vocab_size < 0 or self.embed_dim <= 0:
            raise ValueError("vocab_size must be >= 0 and embed_dim > 0")
        if any(h <= 0 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "tiny-transformer":
            if not 1 <= self.num_blocks <= 2:
                raise ValueError("tiny-transformer supports 1 or 2 blocks")
            if not self.hidden_dims:
                raise ValueError("tiny-transformer needs a feed-forward width")
            if self.vocab_size == 0:
                raise ValueError("tiny-transformer needs a vocabulary")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        spec = cls(**d)
        spec.hidden_dims = list(spec.hidden_dims)
        spec.validate()
        return spec


class ParameterStore:
    """Named parameters laid out in one flat float64 buffer.

    ``self[name]`` is a reshaped view into ``self.flat``, so an update on the
    flat vector is visible through every named view.  The per-scalar
    buffers (``grad``, ``importance``, ``prob``, ``mask``) share the same
    flat indexing.
    """

    def __init__(self, named: list[tuple[str, np.ndarray]]):
        names = [n for n, _ in named]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.names = names
        self.shapes = {n: tuple(a.shape) for n, a in named}
        sizes = [int(np.prod(a.shape)) for _, a in named]
        self.offsets = dict(zip(names, np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)))
        self.sizes = dict(zip(names, sizes))
        self.size = int(np.sum(sizes))
        self.flat = np.zeros(self.size)
        for n, a in named:
            self.view(n)[...] = a
        self.grad = np.zeros(self.size)
        self.importance = np.zeros(self.size)
        self.prob = np.ones(self.size)
        self.mask = np.ones(self.size)

    def view(self, name: str) -> np.ndarray:
        off = self.offsets[name]
        return self.flat[off:off + self.sizes[name]].reshape(self.shapes[name])

    __getitem__ = view

    def __contains__(self, name: str) -> bool:
        return name in self.offsets

    def __len__(self) -> int:
        return self.size

    def items(self):
        for n in self.names:
            yield n, self.view(n)

    def flat_index(self, name: str, offset: int) -> int:
        if not 0 <= offset < self.sizes[name]:
            raise IndexError(f"offset {offset} outside {name}")
        return int(self.offsets[name] + offset)

    def locate(self, index: int) -> tuple[str, int]:
        """Inverse of :meth:`flat_index`."""
        if not 0 <= index < self.size:
            raise IndexError(index)
        for n in reversed(self.names):
            if index >= self.offsets[n]:
                return n, int(index - self.offsets[n])
        raise IndexError(index)  # pragma: no cover

    def flatten(self, per_name: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(per_name[n], dtype=float).reshape(-1) for n in self.names])

    def copy(self) -> "ParameterStore":
        return ParameterStore([(n, a.copy()) for n, a in self.items()])

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        # copies: the store may be updated while a graph still references them
        return {n: Tensor(a.copy(), requires_grad=requires_grad, _trusted=True)
                for n, a in self.items()}


def _uniform(rng: RandomSource, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(spec: ModelSpec, seed: int) -> ParameterStore:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, deterministic in ``seed``.

    The embedding table counts as a lookup with a single active input per
    row, so its fan-in is 1 (entries in [-1, 1]).
    """
    spec.validate()
    rng = RandomSource(seed)
    d, C = spec.embed_dim, spec.num_classes
    named: list[tuple[str, np.ndarray]] = []
    if spec.vocab_size > 0:
        named.append(("embedding", _uniform(rng, (spec.vocab_size, d), 1)))
    if spec.kind == "linear":
        named += [("head.W", _uniform(rng, (d, C), d)), ("head.b", np.zeros(C))]
    elif spec.kind == "mlp":
        prev = d
        for i, h in enumerate(spec.hidden_dims):
            named += [(f"mlp.{i}.W", _uniform(rng, (prev, h), prev)), (f"mlp.{i}.b", np.zeros(h))]
            prev = h
        named += [("head.W", _uniform(rng, (prev, C), prev)), ("head.b", np.zeros(C))]
    else:
        ff = spec.hidden_dims[0]
        for k in range(spec.num_blocks):
            p = f"block.{k}."
            for m in ("Wq", "Wk", "Wv", "Wo"):
                named.append((p + m, _uniform(rng, (d, d), d)))
            named += [(p + "ff1.W", _uniform(rng, (d, ff), d)), (p + "ff1.b", np.zeros(ff)),
                      (p + "ff2.W", _uniform(rng, (ff, d), ff)), (p + "ff2.b", np.zeros(d))]
        named += [("head.W", _uniform(rng, (d, C), d)), ("head.b", np.zeros(C))]
    return ParameterStore(named)


class Model:
    def __init__(self, spec: ModelSpec, store: ParameterStore, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.store = store
        self.seed = seed
        self.trained = False

    @classmethod
    def create(cls, spec: ModelSpec, seed: int) -> "Model":
        return cls(spec, init_parameters(spec, seed), seed)

    def params(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return self.store.leaves(requires_grad)

    def _act(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.spec.activation == "relu" else T.tanh(x)

    # -- stages -----------------------------------------------------------

    def embed(self, inputs, params: dict[str, Tensor] | None = None) -> Tensor:
        """Embedding-stage output, shape ``(B, L, d)``.

        For token models ``inputs`` is an integer ``(B, L)`` array.  Dense
        models accept float ``(B, L, d)`` or ``(B, d)`` inputs, returned as a
        constant ``(B, L, d)`` tensor.
        """
        params = params if params is not None else self.params(False)
        if self.spec.vocab_size == 0:
            x = np.asarray(inputs, dtype=float)
            if x.ndim == 2:
                x = x[:, None, :]
            if x.ndim != 3 or x.shape[-1] != self.spec.embed_dim:
                raise T.ShapeError(f"dense input shape {x.shape} does not match d={self.spec.embed_dim}")
            return Tensor(x)
        ids = np.asarray(inputs)
        if ids.ndim != 2:
            raise T.ShapeError(f"token batch must be (B, L), got {ids.shape}")
        return T.gather(params["embedding"], ids)

    def forward_from_embeddings(self, emb: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        params = params if params is not None else self.params(False)
        if emb.data.ndim != 3 or emb.shape[-1] != self.spec.embed_dim:
            raise T.ShapeError(f"embeddings must be (B, L, {self.spec.embed_dim}), got {emb.shape}")
        kind = self.spec.kind
        if kind == "tiny-transformer":
            h = emb
            for k in range(self.spec.num_blocks):
                h = self._block(h, params, f"block.{k}.")
            pooled = T.mean(h, axis=1)
            return T.add(T.matmul(pooled, params["head.W"]), params["head.b"])
        h = T.mean(emb, axis=1)
        if kind == "mlp":
            for i in range(len(self.spec.hidden_dims)):
                h = self._act(T.add(T.matmul(h, params[f"mlp.{i}.W"]), params[f"mlp.{i}.b"]))
        return T.add(T.matmul(h, params["head.W"]), params["head.b"])

    def _block(self, x: Tensor, params: dict[str, Tensor], p: str) -> Tensor:
        d = self.spec.embed_dim
        q = T.matmul(x, params[p + "Wq"])
        k = T.matmul(x, params[p + "Wk"])
        v = T.matmul(x, params[p + "Wv"])
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
        attn = T.matmul(T.softmax(scores), v)
        x = T.add(x, T.matmul(attn, params[p + "Wo"]))
        ff = self._act(T.add(T.matmul(x, params[p + "ff1.W"]), params[p + "ff1.b"]))
        return T.add(x, T.add(T.matmul(ff, params[p + "ff2.W"]), params[p + "ff2.b"]))

    # -- convenience ------------------------------------------------------

    def logits(self, inputs, perturbation: np.ndarray | None = None) -> np.ndarray:
        params = self.params(False)
        emb = self.embed(inputs, params)
        if perturbation is not None:
            emb = T.add(emb, Tensor(perturbation))
        return self.forward_from_embeddings(emb, params).data

    def predict_proba(self, inputs, perturbation: np.ndarray | None = None,
                      batch_size: int = 512) -> np.ndarray:
        n = len(inputs)
        out = []
        for i in range(0, n, batch_size):
            pert = None if perturbation is None else perturbation[i:i + batch_size]
            out.append(softmax_rows(self.logits(inputs[i:i + batch_size], pert)))
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes))

    # -- persistence ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "spec": asdict(self.spec),
            "seed": self.seed,
            "parameters": {n: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
                           for n, a in self.store.items()},
        }
        # json writes floats with repr(), the shortest exact round-trip form
        return json.dumps(doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Model":
        doc = json.loads(text)
        spec = ModelSpec.from_dict(doc["spec"])
        reference = init_parameters(spec, doc.get("seed", 0))
        named = []
        for n in reference.names:
            entry = doc["parameters"][n]
            arr = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
            if arr.shape != reference.shapes[n]:
                raise ValueError(f"checkpoint shape mismatch for {n}")
            named.append((n, arr))
        return cls(spec, ParameterStore(named), doc.get("seed", 0))

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_json(Path(path).read_text())


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)
