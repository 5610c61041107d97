"""Desk-scale encoders with a frozen orthonormal classification head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, LayoutError, ParamLayout, ParamVector

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "gelu": ad.gelu}
ATTENTION_TOKENS = 4


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    use_attention_block: bool = False
    embed_dim: int = 16
    num_classes: int = 8
    normalize_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min(self.input_dim, self.embed_dim, self.num_classes) < 1:
            raise ContractError("input_dim, embed_dim and num_classes must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise ContractError("hidden must be a non-empty list of positive widths")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.num_classes > self.embed_dim:
            raise ContractError("an orthonormal head needs num_classes <= embed_dim")
        if self.use_attention_block and self.hidden[0] % ATTENTION_TOKENS:
            raise ContractError(f"attention block needs hidden[0] divisible by {ATTENTION_TOKENS}")

    def layout(self) -> ParamLayout:
        shapes, prev = [], self.input_dim
        for i, width in enumerate(self.hidden):
            shapes += [(f"w{i}", (width, prev)), (f"b{i}", (width,))]
            if i == 0 and self.use_attention_block:
                dk = width // ATTENTION_TOKENS
                shapes += [("attn_q", (dk, dk)), ("attn_k", (dk, dk)), ("attn_v", (dk, dk)),
                           ("ln_gain", (dk,)), ("ln_bias", (dk,))]
            prev = width
        shapes += [("w_out", (self.embed_dim, prev)), ("b_out", (self.embed_dim,))]
        return ParamLayout.from_shapes(shapes)


@dataclass(frozen=True, eq=False)
class FrozenHead:
    """Row-orthonormal ``(c, e)`` class embeddings. Never trained."""

    class_embeddings: np.ndarray
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        h = np.array(self.class_embeddings, dtype=np.float64, copy=True)
        if h.ndim != 2:
            raise LayoutError("head must be a 2-D matrix")
        if not np.allclose(h @ h.T, np.eye(h.shape[0]), atol=1e-10, rtol=0):
            raise ContractError("head rows must be orthonormal")
        h.setflags(write=False)
        object.__setattr__(self, "class_embeddings", h)

    @classmethod
    def random(cls, num_classes: int, embed_dim: int, seed: int) -> "FrozenHead":
        rng = np.random.default_rng([seed, 0x4EAD])
        q, r = np.linalg.qr(rng.standard_normal((embed_dim, num_classes)))
        q = q * np.sign(np.diag(r))
        return cls(q.T)


class Network:
    """The logit function ``x -> head @ encode(x)`` over autodiff nodes."""

    def __init__(self, spec: ModelSpec, head: FrozenHead, with_head: bool = True):
        self.spec = spec
        self.layout = spec.layout()
        self.head = head
        self.with_head = with_head
        self._head_var = ad.constant(head.class_embeddings)

    def __call__(self, p, x):
        spec = self.spec
        if x.value.shape[-1] != spec.input_dim:
            raise LayoutError(f"input dim {x.value.shape[-1]} != model input dim {spec.input_dim}")
        act = ACTIVATIONS[spec.activation]
        h = x
        for i in range(len(spec.hidden)):
            h = act(ad.affine(h, p[f"w{i}"], p[f"b{i}"]))
            if i == 0 and spec.use_attention_block:
                h = _attention_block(h, p, spec.hidden[0])
        e = ad.affine(h, p["w_out"], p["b_out"])
        if spec.normalize_output:
            e = ad.l2_normalize(e)
        if not self.with_head:
            return e
        return ad.affine(e, self._head_var)


def _attention_block(h, p, width):
    """Single-head self-attention over ``width`` split into 4 tokens, with a
    residual connection and layer norm."""
    dk = width // ATTENTION_TOKENS
    tokens = ad.reshape(h, (ATTENTION_TOKENS, dk))
    q = ad.affine(tokens, p["attn_q"])
    k = ad.affine(tokens, p["attn_k"])
    v = ad.affine(tokens, p["attn_v"])
    scores = ad.mul(ad.bmm(q, k, transpose_b=True), ad.constant(1.0 / np.sqrt(dk)))
    mixed = ad.bmm(ad.softmax(scores), v)
    out = ad.layer_norm(ad.add(tokens, mixed), p["ln_gain"], p["ln_bias"])
    return ad.reshape(out, (width,))


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    head: FrozenHead
    params: ParamVector

    def __post_init__(self):
        if self.params.layout != self.spec.layout():
            raise LayoutError("parameter layout does not match the model spec")
        if self.head.class_embeddings.shape != (self.spec.num_classes, self.spec.embed_dim):
            raise LayoutError("head shape does not match the model spec")
        object.__setattr__(self, "network", Network(self.spec, self.head))
        object.__setattr__(self, "encoder", Network(self.spec, self.head, with_head=False))

    def with_params(self, params: ParamVector) -> "Model":
        return Model(self.spec, self.head, params)

    def with_spec(self, **changes) -> "Model":
        return Model(replace(self.spec, **changes), self.head, self.params)

    def encode(self, x) -> np.ndarray:
        return ad.forward_eval(self.encoder, self.params, x)

    def logits(self, x) -> np.ndarray:
        return ad.forward_eval(self.network, self.params, x)

    def predict(self, x):
        return predict(self, x)


def predict(model_like, x):
    """Argmax class; ties go to the lowest index. Works for anything with ``logits``."""
    z = model_like.logits(x)
    return np.argmax(z, axis=-1)


def init_params(spec: ModelSpec, seed: int, mode: str = "random") -> ParamVector:
    """Fan-in scaled Gaussian weights and ``U(±1/sqrt(fan_in))`` biases, or a
    pre-trained surrogate. Non-zero biases keep the random network from being
    positively homogeneous in its input."""
    if mode == "pretrained_surrogate":
        from .training import pretrained_surrogate

        return pretrained_surrogate(spec, seed)
    if mode != "random":
        raise ContractError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    layout = spec.layout()
    arrays, fan_in = {}, spec.input_dim
    for name, shape, _ in layout.entries:
        if name == "ln_gain":
            arrays[name] = np.ones(shape)
        elif name == "ln_bias":
            arrays[name] = np.zeros(shape)
        elif len(shape) == 2:
            fan_in = shape[1]
            arrays[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ad.flatten(layout, arrays)


def make_model(spec: ModelSpec, seed: int, params: ParamVector | None = None) -> Model:
    head = FrozenHead.random(spec.num_classes, spec.embed_dim, seed)
    if params is None:
        params = init_params(spec, seed)
    return Model(spec, head, params)
