"""Injection block: channel-gated fusion of content, style, and text context.

The block consumes one fused vector per image (pooled class embeddings,
pooled multi-scale content, style statistic), refines it through a stack
of squeeze-style gating layers (each layer multiplies its input by a
sigmoid gate and adds the input back), then projects the result through
per-position linear heads into visual tokens that are added to the
context tokens. All weights live in the block's own parameter store (the
trainable block called phi).
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    ParameterStore,
    Tensor,
    add,
    add_rowvec,
    as_tensor,
    concat,
    matmul,
    mul,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
)
from .numerics.tensor import ShapeError
from .prompts import _seeded_normal


class InjectionBlock:
    def __init__(
        self,
        d: int,
        content_width: int,
        m: int,
        q_se: int = 2,
        reduction: int = 4,
        seed: int = 0,
    ):
        if q_se < 1:
            raise ValueError(f"need at least one gating layer, got {q_se}")
        if reduction < 1:
            raise ValueError(f"reduction must be >= 1, got {reduction}")
        if content_width < 1:
            raise ValueError(f"content width must be positive, got {content_width}")
        self.d = d
        self.m = m
        self.q_se = q_se
        self.reduction = reduction
        self.seed = seed
        self.content_width = content_width
        # pooled text (d) + pooled content (sum C_l) + style statistic (sum C_l)
        self.fused_width = d + 2 * content_width
        bottleneck = max(1, self.fused_width // reduction)
        self.store = ParameterStore()
        for q in range(q_se):
            for suffix, shape in (("w1", (self.fused_width, bottleneck)), ("w2", (bottleneck, self.fused_width))):
                name = f"injection.se.{q}.{suffix}"
                self.store.register(name, Tensor(_seeded_normal(seed, name, shape), requires_grad=True))
        for i in range(m):
            wname = f"injection.token_head.{i}.weight"
            self.store.register(wname, Tensor(_seeded_normal(seed, wname, (self.fused_width, d)), requires_grad=True))
            # zero bias: an all-zero fused input yields exactly zero tokens,
            # degrading gracefully to the text-only generator
            self.store.register(
                f"injection.token_head.{i}.bias", Tensor(np.zeros(d), requires_grad=True)
            )

    def clone(self) -> "InjectionBlock":
        dup = InjectionBlock(self.d, self.content_width, self.m, self.q_se, self.reduction, self.seed)
        dup.store.load_arrays(self.store.state_arrays())
        return dup

    def build_fused_input(self, class_embeds: Tensor, content, style) -> Tensor:
        """[mean over classes of T ; pooled content ; style] as one vector."""
        content, style = as_tensor(content), as_tensor(style)
        if class_embeds.data.ndim != 2 or class_embeds.shape[1] != self.d:
            raise ShapeError(f"class embeddings must be (n, {self.d}), got {class_embeds.shape}")
        if content.shape != (self.content_width,) or style.shape != (self.content_width,):
            raise ShapeError(
                f"content/style must both be ({self.content_width},), got {content.shape} and {style.shape}"
            )
        return concat([reduce_mean(class_embeds, axes=0), content, style], axis=0)

    def _rows(self, x: Tensor) -> tuple[Tensor, bool]:
        if x.data.ndim == 1:
            if x.shape != (self.fused_width,):
                raise ShapeError(f"fused input must be ({self.fused_width},), got {x.shape}")
            return reshape(x, (1, self.fused_width)), True
        if x.data.ndim == 2 and x.shape[1] == self.fused_width:
            return x, False
        raise ShapeError(f"fused input must be (B, {self.fused_width}) or ({self.fused_width},), got {x.shape}")

    def se_forward(self, fused: Tensor) -> Tensor:
        """Sequential gating: o <- o * sigmoid(W2 relu(W1 o)) + o, per layer."""
        out, was_vector = self._rows(fused)
        for q in range(self.q_se):
            squeezed = relu(matmul(out, self.store[f"injection.se.{q}.w1"]))
            gate = sigmoid(matmul(squeezed, self.store[f"injection.se.{q}.w2"]))
            out = add(mul(out, gate), out)
        return reshape(out, (self.fused_width,)) if was_vector else out

    def project_visual_tokens(self, refined: Tensor) -> Tensor:
        """(m x d) visual tokens from one refined vector, one head per row."""
        rows2d, was_vector = self._rows(refined)
        if not was_vector and rows2d.shape[0] != 1:
            raise ShapeError(f"expected a single refined vector, got {refined.shape}")
        return concat(self.project_token_batch(rows2d), axis=0)

    def project_token_batch(self, refined_rows: Tensor) -> list[Tensor]:
        """Batched heads: entry i is token i for every row, shape (B, d)."""
        rows2d, _ = self._rows(refined_rows)
        out = []
        for i in range(self.m):
            w = self.store[f"injection.token_head.{i}.weight"]
            b = self.store[f"injection.token_head.{i}.bias"]
            out.append(add_rowvec(matmul(rows2d, w), b))
        return out

    def inject_and_assemble(self, context: Tensor, visual: Tensor, class_embeds: Tensor) -> list[Tensor]:
        """Per class j: rows of (context + visual) followed by class embedding j."""
        if context.shape != visual.shape:
            raise ShapeError(f"context {context.shape} and visual {visual.shape} tokens differ")
        if context.shape != (self.m, self.d):
            raise ShapeError(f"tokens must be ({self.m}, {self.d}), got {context.shape}")
        if class_embeds.data.ndim != 2 or class_embeds.shape[1] != self.d:
            raise ShapeError(f"class embeddings must be (n, {self.d}), got {class_embeds.shape}")
        n = class_embeds.shape[0]
        if n < 1:
            raise ValueError("need at least one class")
        injected = add(context, visual)
        prompts = []
        for j in range(n):
            selector = np.zeros((1, n))
            selector[0, j] = 1.0
            row = matmul(Tensor(selector), class_embeds)
            prompts.append(concat([injected, row], axis=0))
        return prompts
