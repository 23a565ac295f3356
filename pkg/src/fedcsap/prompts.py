"""Prompt generator: learnable queries cross-attend over class-name embeddings.

The generator maps the task's class embedding matrix T (n x d) to m
context tokens. Multi-head attention uses T for both keys and values, so
the output is a permutation-invariant function of the class set; there
are no residual connections, which keeps the single-key case exactly
equal to the value row. A static variant replaces the whole generator
with one directly learnable token matrix (the classic shared-prompt
baseline) for ablation runs.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import (
    ParameterStore,
    Tensor,
    add_rowvec,
    concat,
    layer_norm,
    matmul,
    relu,
    scale,
    slice_cols,
    softmax,
    transpose,
)
from .numerics.tensor import ShapeError
from .seeding import split_seed

INIT_STD = 0.02


def _seeded_normal(seed: int, name: str, shape, std: float = INIT_STD) -> np.ndarray:
    rng = np.random.default_rng(split_seed(seed, f"init.{name}"))
    return rng.normal(0.0, std, size=shape)


class PromptGenerator:
    """Owns the generator parameter store (the trainable block called theta)."""

    def __init__(self, d: int, m: int, heads: int, seed: int, static: bool = False):
        if d < 1 or m < 1 or heads < 1:
            raise ValueError(f"d, m, heads must be positive, got {d}, {m}, {heads}")
        if d % heads != 0:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        self.d = d
        self.m = m
        self.heads = heads
        self.seed = seed
        self.static = static
        self.store = ParameterStore()

        def init(name: str, shape, std: float = INIT_STD):
            return self.store.register(name, Tensor(_seeded_normal(seed, name, shape, std), requires_grad=True))

        if static:
            init("generator.static_tokens", (m, d))
            return
        init("generator.queries", (m, d))
        init("generator.key_proj", (d, d))
        init("generator.value_proj", (d, d))
        init("generator.out_proj", (d, d))
        self.store.register("generator.ln_gamma", Tensor(np.ones(d), requires_grad=True))
        self.store.register("generator.ln_beta", Tensor(np.zeros(d), requires_grad=True))
        d_ff = 2 * d
        init("generator.mlp_w1", (d, d_ff))
        self.store.register("generator.mlp_b1", Tensor(np.zeros(d_ff), requires_grad=True))
        init("generator.mlp_w2", (d_ff, d))
        self.store.register("generator.mlp_b2", Tensor(np.zeros(d), requires_grad=True))

    def clone(self) -> "PromptGenerator":
        dup = PromptGenerator(self.d, self.m, self.heads, self.seed, self.static)
        dup.store.load_arrays(self.store.state_arrays())
        return dup

    def _check_embeds(self, class_embeds: Tensor) -> None:
        if class_embeds.data.ndim != 2 or class_embeds.shape[1] != self.d:
            raise ShapeError(f"class embeddings must be (n, {self.d}), got {class_embeds.shape}")
        if class_embeds.shape[0] < 1:
            raise ValueError("no classes to condition on")

    def attention_heads(self, class_embeds: Tensor) -> list[Tensor]:
        """Per-head attended values (each m x d/heads), before output projection."""
        self._check_embeds(class_embeds)
        if self.static:
            raise ValueError("static variant has no attention stage")
        store = self.store
        keys = matmul(class_embeds, store["generator.key_proj"])
        values = matmul(class_embeds, store["generator.value_proj"])
        d_head = self.d // self.heads
        outputs = []
        for h in range(self.heads):
            lo, hi = h * d_head, (h + 1) * d_head
            q_h = slice_cols(store["generator.queries"], lo, hi)
            k_h = slice_cols(keys, lo, hi)
            v_h = slice_cols(values, lo, hi)
            weights = softmax(scale(matmul(q_h, transpose(k_h)), 1.0 / math.sqrt(d_head)), axis=1)
            outputs.append(matmul(weights, v_h))
        return outputs

    def generate(self, class_embeds: Tensor) -> Tensor:
        """Context tokens (m x d) conditioned on the class-name embeddings."""
        if self.static:
            self._check_embeds(class_embeds)
            return self.store["generator.static_tokens"]
        attended = concat(self.attention_heads(class_embeds), axis=1)
        projected = matmul(attended, self.store["generator.out_proj"])
        normed = layer_norm(projected, self.store["generator.ln_gamma"], self.store["generator.ln_beta"])
        hidden = relu(add_rowvec(matmul(normed, self.store["generator.mlp_w1"]), self.store["generator.mlp_b1"]))
        return add_rowvec(matmul(hidden, self.store["generator.mlp_w2"]), self.store["generator.mlp_b2"])
