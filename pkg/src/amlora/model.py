"""Desk-scale classifier backbones with named adapter attachment points.

Two backbones share one interface: a tiny transformer encoder over integer
token ids and an MLP over dense feature vectors. Selected linear projections
(query/key/value/output/ffn) are ``AdaptedLinear`` slots that can host an
adapter stack and a selector; without an attached stack they behave as plain
frozen linears. Init is Gaussian(0, 0.02) for weights and zeros for biases,
fully determined by (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import AdapterStack, adapter_apply
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .selector import AttentionalSelector, apply_gated

ADAPTER_SITES = ("query", "key", "value", "output", "ffn")
FORWARD_RULES = ("base", "single", "sum", "gated")


@dataclass
class ModelConfig:
    backbone: str = "transformer"
    vocab_size: int = 128
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    seq_len: int = 16
    num_classes: int = 4
    dropout_rate: float = 0.1
    adapter_sites: tuple[str, ...] = ("query", "value")
    ffn_multiplier: int = 4

    def validate(self):
        if self.backbone not in ("transformer", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        for name, v in (("vocab_size", self.vocab_size),
                        ("embed_dim", self.embed_dim),
                        ("num_layers", self.num_layers),
                        ("num_heads", self.num_heads),
                        ("seq_len", self.seq_len),
                        ("num_classes", self.num_classes),
                        ("ffn_multiplier", self.ffn_multiplier)):
            if v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        bad = set(self.adapter_sites) - set(ADAPTER_SITES)
        if bad:
            raise ConfigError(f"unknown adapter sites {sorted(bad)}")
        if not self.adapter_sites:
            raise ConfigError("at least one adapter site is required")
        if self.backbone == "mlp" and set(self.adapter_sites) != {"ffn"}:
            raise ConfigError("mlp backbone only supports adapter_sites={'ffn'}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class AdaptedLinear:
    """A frozen base projection plus an optional adapter stack and selector.

    ``rule`` picks the forward: plain base, base + single shared adapter,
    base + ungated adapter sum, or the gated mix.
    """

    def __init__(self, name: str, w0: Tensor, bias: Tensor):
        self.name = name
        self.w0 = w0
        self.bias = bias
        self.stack: AdapterStack | None = None
        self.selector: AttentionalSelector | None = None
        self.rule = "base"
        self.gate_capture: dict | None = None

    @property
    def d_out(self) -> int:
        return self.w0.data.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.data.shape[1]

    def attach(self, stack: AdapterStack, selector: AttentionalSelector | None = None):
        if stack.d_out != self.d_out or stack.d_in != self.d_in:
            raise DimensionError(
                f"stack ({stack.d_out}, {stack.d_in}) does not fit site "
                f"{self.name} ({self.d_out}, {self.d_in})")
        self.stack = stack
        self.selector = selector

    def forward(self, x: Tensor) -> Tensor:
        base = ad.add(ad.matmul(x, ad.transpose(self.w0, (1, 0))), self.bias)
        if self.stack is None or self.rule == "base":
            return base
        if self.rule == "gated":
            if self.selector is None:
                raise ConfigError(f"site {self.name}: gated rule needs a selector")
            return apply_gated(base, self.stack, self.selector, x,
                               capture=self.gate_capture)
        # "single" and "sum" are both plain unweighted adapter sums; "single"
        # additionally asserts there is exactly one adapter.
        if self.rule == "single" and len(self.stack.task_adapters) != 1:
            raise ConfigError(
                f"site {self.name}: single-adapter rule with "
                f"{len(self.stack.task_adapters)} adapters")
        h = base
        for adapter in self.stack.task_adapters:
            h = ad.add(h, adapter_apply(adapter, x))
        return h


@dataclass
class Backbone:
    config: ModelConfig
    embedding: Tensor | None
    layers: list[dict]
    classifier_w: Tensor
    classifier_b: Tensor
    sites: dict[str, AdaptedLinear] = field(default_factory=dict)

    def base_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        if self.embedding is not None:
            params.append(("embedding", self.embedding))
        for i, layer in enumerate(self.layers):
            for key, val in layer.items():
                if isinstance(val, AdaptedLinear):
                    params.append((f"layers.{i}.{key}.w", val.w0))
                    params.append((f"layers.{i}.{key}.b", val.bias))
                else:
                    params.append((f"layers.{i}.{key}", val))
        params.append(("classifier.w", self.classifier_w))
        params.append(("classifier.b", self.classifier_b))
        return params

    def set_base_trainable(self, flag: bool):
        for _, p in self.base_parameters():
            p.requires_grad = flag
            p.grad = None

    def set_rule(self, rule: str):
        if rule not in FORWARD_RULES:
            raise ConfigError(f"unknown forward rule {rule!r}")
        for site in self.sites.values():
            site.rule = rule

    def forward(self, batch, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        drop = self.config.dropout_rate if train else 0.0
        if train and drop > 0.0 and rng is None:
            raise ConfigError("train-mode forward with dropout needs an rng")
        if self.config.backbone == "transformer":
            return self._forward_tokens(batch, drop, rng)
        return self._forward_features(batch, drop, rng)

    def _forward_tokens(self, batch, drop, rng) -> Tensor:
        ids = np.asarray(batch)
        if ids.ndim != 2:
            raise DimensionError(f"token batch must be 2-d, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(
                f"token id out of vocabulary [0, {self.config.vocab_size})")
        b, L = ids.shape
        d, nh, dh = self.config.embed_dim, self.config.num_heads, self.config.head_dim
        x = ad.embedding(self.embedding, ids)
        if drop > 0.0:
            x = ad.dropout(x, drop, rng)
        for layer in self.layers:
            q = self._split_heads(layer["query"].forward(x), b, L, nh, dh)
            k = self._split_heads(layer["key"].forward(x), b, L, nh, dh)
            v = self._split_heads(layer["value"].forward(x), b, L, nh, dh)
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                            1.0 / math.sqrt(dh))
            attn = ad.softmax(scores)
            ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)),
                             (b, L, d))
            out = layer["output"].forward(ctx)
            if drop > 0.0:
                out = ad.dropout(out, drop, rng)
            x = ad.add(x, out)
            h1 = ad.relu(layer["ffn"].forward(x))
            h2 = ad.add(ad.matmul(h1, ad.transpose(layer["ffn2.w"], (1, 0))),
                        layer["ffn2.b"])
            if drop > 0.0:
                h2 = ad.dropout(h2, drop, rng)
            x = ad.add(x, h2)
        pooled = ad.mean_axis(x, axis=1)
        return ad.add(ad.matmul(pooled, ad.transpose(self.classifier_w, (1, 0))),
                      self.classifier_b)

    def _forward_features(self, batch, drop, rng) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
        if x.data.ndim != 2 or x.data.shape[1] != self.config.embed_dim:
            raise DimensionError(
                f"feature batch must be b x {self.config.embed_dim}, "
                f"got {x.data.shape}")
        for layer in self.layers:
            h = ad.relu(layer["ffn"].forward(x))
            if drop > 0.0:
                h = ad.dropout(h, drop, rng)
            x = ad.add(x, h)
        return ad.add(ad.matmul(x, ad.transpose(self.classifier_w, (1, 0))),
                      self.classifier_b)

    @staticmethod
    def _split_heads(t: Tensor, b, L, nh, dh) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, L, nh, dh)), (0, 2, 1, 3))


def build_model(config: ModelConfig, seed: int) -> Backbone:
    """Deterministically initialized backbone with empty adapter slots."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def weight(dout, din):
        return Tensor(rng.normal(0.0, 0.02, size=(dout, din)))

    def bias(dout):
        return Tensor(np.zeros(dout))

    def linear(name, dout, din):
        return AdaptedLinear(name, weight(dout, din), bias(dout))

    layers: list[dict] = []
    embedding = None
    if config.backbone == "transformer":
        embedding = Tensor(rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
        hidden = d * config.ffn_multiplier
        for i in range(config.num_layers):
            layers.append({
                "query": linear(f"layers.{i}.query", d, d),
                "key": linear(f"layers.{i}.key", d, d),
                "value": linear(f"layers.{i}.value", d, d),
                "output": linear(f"layers.{i}.output", d, d),
                "ffn": linear(f"layers.{i}.ffn", hidden, d),
                "ffn2.w": weight(d, hidden),
                "ffn2.b": bias(d),
            })
    else:
        for i in range(config.num_layers):
            layers.append({"ffn": linear(f"layers.{i}.ffn", d, d)})
    classifier_w = weight(config.num_classes, d)
    classifier_b = bias(config.num_classes)

    model = Backbone(config, embedding, layers, classifier_w, classifier_b)
    for i, layer in enumerate(layers):
        for site_name in ADAPTER_SITES:
            if site_name in config.adapter_sites and site_name in layer:
                model.sites[f"layers.{i}.{site_name}"] = layer[site_name]
    return model


def forward(model: Backbone, batch, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    return model.forward(batch, mode=mode, rng=rng)
