"""Miniature Conformer encoders and per-layer quantization plans.

A block is half-FFN -> self-attention -> depthwise conv -> half-FFN ->
layernorm, each sub-module pre-normed and residual. Encoders have one or two
passes; the second pass is a non-causal stack that consumes the first pass's
output. Each pass feeds its own mean-pooled linear classifier head.

Only the matmul weights of the FFN and attention projections are quantizable.
Biases, layernorms, conv taps, the embedding and the classifier heads always
stay float32.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from . import autodiff as ad
from .quant import FLOAT, I4W, I8W, QuantizedTensor, QuantSpec

FFN_WEIGHTS = ("ffn1.w1", "ffn1.w2", "ffn2.w1", "ffn2.w2")
ATTENTION_WEIGHTS = ("mhsa.wq", "mhsa.wk", "mhsa.wv", "mhsa.wo")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConformerBlockConfig:
    model_dim: int = 32
    num_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: Optional[int] = None
    causal: bool = False
    self_attention: bool = True

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0 or self.ffn_expansion <= 0:
            raise ConfigError("block dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel is not None and (self.conv_kernel <= 0 or self.conv_kernel % 2 == 0):
            raise ConfigError(f"conv_kernel must be odd and positive, got {self.conv_kernel}")


@dataclass(frozen=True)
class EncoderConfig:
    """Blocks grouped by pass, plus the input/output sizes of the toy task."""

    passes: tuple[tuple[ConformerBlockConfig, ...], ...]
    vocab_size: int = 16
    num_classes: int = 4
    max_len: int = 64

    def __post_init__(self):
        passes = tuple(tuple(p) for p in self.passes)
        object.__setattr__(self, "passes", passes)
        if len(passes) not in (1, 2):
            raise ConfigError(f"encoders have 1 or 2 passes, got {len(passes)}")
        if any(len(p) == 0 for p in passes):
            raise ConfigError("every pass needs at least one block")
        dims = {b.model_dim for p in passes for b in p}
        if len(dims) != 1:
            raise ConfigError(f"all blocks must share model_dim, got {sorted(dims)}")
        if len(passes) == 2 and any(b.causal for b in passes[1]):
            raise ConfigError("second-pass blocks must be non-causal")

    @property
    def model_dim(self) -> int:
        return self.passes[0][0].model_dim

    @property
    def num_passes(self) -> int:
        return len(self.passes)

    def to_dict(self) -> dict:
        return {
            "passes": [[asdict(b) for b in p] for p in self.passes],
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        if "passes" not in d:
            return toy_encoder(**d)
        passes = tuple(tuple(ConformerBlockConfig(**b) for b in p) for p in d["passes"])
        rest = {k: v for k, v in d.items() if k != "passes"}
        return cls(passes=passes, **rest)


def toy_encoder(
    model_dim: int = 32,
    num_heads: int = 4,
    blocks: Union[int, list[int], tuple[int, ...]] = (4, 3),
    ffn_expansion: int = 4,
    conv_kernel: Optional[int] = None,
    causal_first_pass: bool = True,
    vocab_size: int = 16,
    num_classes: int = 4,
    max_len: int = 64,
) -> EncoderConfig:
    """Uniform-width encoder; ``blocks=(4, 3)`` is a causal+non-causal cascade."""
    counts = (blocks,) if isinstance(blocks, int) else tuple(blocks)
    passes = []
    for i, n in enumerate(counts):
        causal = causal_first_pass and i == 0 and len(counts) == 2
        blk = ConformerBlockConfig(model_dim, num_heads, ffn_expansion, conv_kernel, causal)
        passes.append((blk,) * n)
    return EncoderConfig(tuple(passes), vocab_size, num_classes, max_len)


def block_param_count(cfg: ConformerBlockConfig) -> int:
    d, e = cfg.model_dim, cfg.ffn_expansion * cfg.model_dim
    ffn = 2 * d + d * e + e + e * d + d
    total = 2 * ffn + 2 * d
    if cfg.self_attention:
        total += 2 * d + 4 * d * d + 4 * d
    if cfg.conv_kernel is not None:
        total += 2 * d + cfg.conv_kernel * d + d
    return total


def encoder_param_count(cfg: EncoderConfig) -> int:
    d = cfg.model_dim
    n = cfg.vocab_size * d
    n += sum(block_param_count(b) for p in cfg.passes for b in p)
    n += cfg.num_passes * (d * cfg.num_classes + cfg.num_classes)
    return n


def _positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(np.float32)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    shape: tuple[int, ...]
    quantizable: bool
    pass_index: int  # 1-based; 0 for embedding/heads
    block_index: int  # 1-based within its pass; 0 outside blocks
    kind: str  # "ffn", "attention", "conv", "norm", "bias", "embedding", "head"

    @property
    def params(self) -> int:
        return math.prod(self.shape)


Weight = Union[ad.Parameter, QuantizedTensor, np.ndarray]


class Encoder:
    """Parameters plus a forward pass for an :class:`EncoderConfig`.

    ``weights`` maps layer ids to trainable :class:`~qatforge.autodiff.Parameter`
    objects, or, for a model loaded from a checkpoint, to frozen
    :class:`~qatforge.quant.QuantizedTensor` codes and float arrays.
    """

    def __init__(self, cfg: EncoderConfig, weights: dict[str, Weight], layers: list[LayerInfo]):
        self.cfg = cfg
        self.weights = weights
        self.layers = {info.name: info for info in layers}
        self.specs: dict[str, QuantSpec] = {n: FLOAT for n, i in self.layers.items() if i.quantizable}
        self._pe = _positional_encoding(cfg.max_len, cfg.model_dim)

    # ---------------------------------------------------------- introspection

    @property
    def parameters(self) -> list[ad.Parameter]:
        return [w for w in self.weights.values() if isinstance(w, ad.Parameter)]

    def quantizable_layers(self) -> list[LayerInfo]:
        return [i for i in self.layers.values() if i.quantizable]

    def census(self) -> dict[str, LayerInfo]:
        return dict(self.layers)

    def param_count(self) -> int:
        return sum(i.params for i in self.layers.values())

    def apply_plan(self, plan: "LayerQuantPlan") -> "Encoder":
        plan.validate(self)
        for info in self.quantizable_layers():
            spec = plan.spec_for(info.name)
            self.specs[info.name] = spec
            w = self.weights[info.name]
            if isinstance(w, ad.Parameter):
                w.quant = spec
        return self

    def plan(self) -> "LayerQuantPlan":
        return LayerQuantPlan(dict(self.specs))

    # ---------------------------------------------------------- forward

    def _w(self, name: str):
        return self.weights[name]

    def _linear(self, x, name: str):
        w = self._w(name)
        spec = self.specs[name]
        prefix, leaf = name.rsplit(".", 1)
        return ad.add(ad.quantized_linear(x, w, spec), self._w(f"{prefix}.b{leaf[1:]}"))

    def _ln(self, x, prefix: str):
        return ad.layer_norm(x, self._w(prefix + ".g"), self._w(prefix + ".b"))

    def _ffn(self, x, prefix: str):
        h = self._ln(x, prefix + ".ln")
        h = ad.swish(self._linear(h, prefix + ".w1"))
        return self._linear(h, prefix + ".w2")

    def _mhsa(self, x, prefix: str, blk: ConformerBlockConfig):
        B, T, D = x.shape
        H = blk.num_heads
        dh = D // H
        h = self._ln(x, prefix + ".ln")

        def heads(v):
            return ad.swapaxes(ad.reshape(v, (B, T, H, dh)), 1, 2)

        q = heads(self._linear(h, prefix + ".wq"))
        k = heads(self._linear(h, prefix + ".wk"))
        v = heads(self._linear(h, prefix + ".wv"))
        scores = ad.scale(ad.matmul(q, ad.swapaxes(k, 2, 3)), 1.0 / math.sqrt(dh))
        mask = np.tril(np.ones((T, T), dtype=bool)) if blk.causal else None
        ctx = ad.matmul(ad.softmax(scores, mask), v)
        ctx = ad.reshape(ad.swapaxes(ctx, 1, 2), (B, T, D))
        return self._linear(ctx, prefix + ".wo")

    def _conv(self, x, prefix: str, blk: ConformerBlockConfig):
        h = self._ln(x, prefix + ".ln")
        h = ad.depthwise_conv1d(h, self._w(prefix + ".kernel"), blk.causal)
        return ad.swish(ad.add(h, self._w(prefix + ".bias")))

    def block(self, x, p: int, b: int):
        blk = self.cfg.passes[p - 1][b - 1]
        pre = f"p{p}.b{b}"
        x = ad.add(x, ad.scale(self._ffn(x, pre + ".ffn1"), 0.5))
        if blk.self_attention:
            x = ad.add(x, self._mhsa(x, pre + ".mhsa", blk))
        if blk.conv_kernel is not None:
            x = ad.add(x, self._conv(x, pre + ".conv", blk))
        x = ad.add(x, ad.scale(self._ffn(x, pre + ".ffn2"), 0.5))
        return self._ln(x, pre + ".ln_out")

    def encode(self, tokens: np.ndarray) -> list[ad.Var]:
        """Per-pass frame outputs ``[B, T, D]`` for integer ``tokens [B, T]``."""
        tokens = np.asarray(tokens)
        T = tokens.shape[1]
        if T > self.cfg.max_len:
            raise ConfigError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        x = ad.add(ad.embedding(self._w("embed"), tokens), self._pe[:T])
        outs = []
        for p, blocks in enumerate(self.cfg.passes, start=1):
            for b in range(1, len(blocks) + 1):
                x = self.block(x, p, b)
            outs.append(x)
        return outs

    def forward(self, tokens: np.ndarray) -> list[ad.Var]:
        """Per-pass class logits ``[B, C]``."""
        logits = []
        for p, h in enumerate(self.encode(tokens), start=1):
            pooled = ad.mean(h, axis=1)
            logits.append(ad.add(ad.matmul(pooled, self._w(f"head{p}.w")), self._w(f"head{p}.b")))
        return logits

    def loss(self, tokens: np.ndarray, labels: np.ndarray) -> ad.Var:
        """Cross-entropy averaged over the pass heads."""
        terms = [ad.cross_entropy(z, labels) for z in self.forward(tokens)]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return ad.scale(out, 1.0 / len(terms)) if len(terms) > 1 else out

    def predict(self, tokens: np.ndarray) -> list[np.ndarray]:
        return [z.value.argmax(axis=-1) for z in self.forward(tokens)]


def layer_layout(cfg: EncoderConfig) -> list[LayerInfo]:
    """Every parameter tensor of the encoder, in initialization order."""
    d, C = cfg.model_dim, cfg.num_classes
    out = [LayerInfo("embed", (cfg.vocab_size, d), False, 0, 0, "embedding")]

    def norm(prefix, p, b):
        out.append(LayerInfo(prefix + ".g", (d,), False, p, b, "norm"))
        out.append(LayerInfo(prefix + ".b", (d,), False, p, b, "norm"))

    for p, blocks in enumerate(cfg.passes, start=1):
        for b, blk in enumerate(blocks, start=1):
            pre = f"p{p}.b{b}"
            e = blk.ffn_expansion * d
            subs = ["ffn1"]
            if blk.self_attention:
                subs.append("mhsa")
            if blk.conv_kernel is not None:
                subs.append("conv")
            subs.append("ffn2")
            for sub in subs:
                fp = f"{pre}.{sub}"
                norm(fp + ".ln", p, b)
                if sub.startswith("ffn"):
                    out.append(LayerInfo(fp + ".w1", (d, e), True, p, b, "ffn"))
                    out.append(LayerInfo(fp + ".b1", (e,), False, p, b, "bias"))
                    out.append(LayerInfo(fp + ".w2", (e, d), True, p, b, "ffn"))
                    out.append(LayerInfo(fp + ".b2", (d,), False, p, b, "bias"))
                elif sub == "mhsa":
                    for proj in "qkvo":
                        out.append(LayerInfo(f"{fp}.w{proj}", (d, d), True, p, b, "attention"))
                        out.append(LayerInfo(f"{fp}.b{proj}", (d,), False, p, b, "bias"))
                else:
                    out.append(LayerInfo(fp + ".kernel", (blk.conv_kernel, d), False, p, b, "conv"))
                    out.append(LayerInfo(fp + ".bias", (d,), False, p, b, "bias"))
            norm(pre + ".ln_out", p, b)
    for p in range(1, cfg.num_passes + 1):
        out.append(LayerInfo(f"head{p}.w", (d, C), False, 0, 0, "head"))
        out.append(LayerInfo(f"head{p}.b", (C,), False, 0, 0, "bias"))
    return out


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    """Seeded model: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, norms 1/0."""
    rng = np.random.default_rng(seed)
    layers = layer_layout(cfg)
    weights: dict[str, Weight] = {}
    for info in layers:
        if info.kind == "norm":
            value = np.ones(info.shape) if info.name.endswith(".g") else np.zeros(info.shape)
        elif info.kind == "bias":
            value = np.zeros(info.shape)
        elif info.kind == "embedding":
            value = rng.uniform(-1.0, 1.0, info.shape)
        else:
            bound = 1.0 / math.sqrt(info.shape[0])
            value = rng.uniform(-bound, bound, info.shape)
        weights[info.name] = ad.Parameter(value.astype(np.float32), info.name)
    return Encoder(cfg, weights, layers)


# ------------------------------------------------------------------ plans


@dataclass(frozen=True)
class LayerQuantPlan:
    """Ordered layer-id -> spec map; unlisted quantizable layers take ``default``."""

    entries: dict[str, QuantSpec] = field(default_factory=dict)
    default: QuantSpec = FLOAT

    def spec_for(self, name: str) -> QuantSpec:
        return self.entries.get(name, self.default)

    def validate(self, model: Encoder):
        for name in self.entries:
            info = model.layers.get(name)
            if info is None:
                raise ConfigError(f"plan references unknown layer {name!r}")
            if not info.quantizable:
                raise ConfigError(f"plan assigns a spec to non-quantizable layer {name!r}")

    def items(self) -> Iterator[tuple[str, QuantSpec]]:
        return iter(self.entries.items())

    def __eq__(self, other):
        if not isinstance(other, LayerQuantPlan):
            return NotImplemented
        return self.entries == other.entries and self.default == other.default

    def resolved(self, model: Encoder) -> dict[str, QuantSpec]:
        return {i.name: self.spec_for(i.name) for i in model.quantizable_layers()}


def _plan(model: Encoder, choose) -> LayerQuantPlan:
    return LayerQuantPlan({i.name: choose(i) for i in model.quantizable_layers()})


def plan_uniform(model: Encoder, spec: QuantSpec) -> LayerQuantPlan:
    return _plan(model, lambda i: spec)


def plan_first_k(model: Encoder, k: int, spec4: QuantSpec = I4W, spec_default: QuantSpec = I8W) -> LayerQuantPlan:
    """Blocks 1..k of every pass get ``spec4``; everything else ``spec_default``."""
    limit = max(len(p) for p in model.cfg.passes)
    if not 0 <= k <= limit:
        raise ConfigError(f"k={k} outside [0, {limit}]")
    return _plan(model, lambda i: spec4 if i.block_index <= k else spec_default)


def plan_exclude_first_last(model: Encoder, spec4: QuantSpec = I4W, spec_default: QuantSpec = I8W) -> LayerQuantPlan:
    sizes = [len(p) for p in model.cfg.passes]
    if min(sizes) < 3:
        raise ConfigError(f"first/last exclusion needs >= 3 blocks per pass, got {sizes}")

    def choose(i: LayerInfo):
        last = sizes[i.pass_index - 1]
        return spec_default if i.block_index in (1, last) else spec4

    return _plan(model, choose)


def plan_exclude_self_attention(model: Encoder, spec4: QuantSpec = I4W, spec_default: QuantSpec = I8W) -> LayerQuantPlan:
    return _plan(model, lambda i: spec_default if i.kind == "attention" else spec4)


def plan_per_pass(model: Encoder, pass_index: int, spec4: QuantSpec = I4W, spec_default: QuantSpec = I8W) -> LayerQuantPlan:
    """Quantize one pass (1 = causal, 2 = non-causal) with ``spec4``."""
    if model.cfg.num_passes != 2:
        raise ConfigError("per-pass plans need a two-pass encoder")
    if pass_index not in (1, 2):
        raise ConfigError(f"pass_index must be 1 or 2, got {pass_index}")
    return _plan(model, lambda i: spec4 if i.pass_index == pass_index else spec_default)


STRATEGIES = {
    "uniform": plan_uniform,
    "first_k": plan_first_k,
    "exclude_first_last": plan_exclude_first_last,
    "exclude_self_attention": plan_exclude_self_attention,
    "per_pass": plan_per_pass,
}
