"""Classification and diversity objectives.

``class_probs`` implements the cosine-softmax classifier over per-class
prompt embeddings. ``ce_loss`` takes pre-softmax logits and goes through
log-sum-exp, never through explicit probabilities, so well-separated
inputs cannot underflow. ``crp_loss`` penalizes pairwise similarity of
the injected context tokens: the normalized variant sums the absolute
off-diagonal entries of the row-normalized Gram matrix; the unnormalized
variant sums |C C^T - I| over all entries, including the diagonal pull
toward unit self-similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    absolute,
    as_tensor,
    l2_normalize,
    log_softmax,
    matmul,
    mul,
    reduce_sum,
    reshape,
    scale,
    softmax,
    sub,
    transpose,
)
from .numerics.tensor import ShapeError

CRP_VARIANTS = ("normalized", "unnormalized")


@dataclass
class LossConfig:
    tau: float = 0.01
    lambda_crp: float = 0.1
    crp_variant: str = "normalized"

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lambda_crp < 0.0:
            raise ValueError(f"lambda_crp must be >= 0, got {self.lambda_crp}")
        if self.crp_variant not in CRP_VARIANTS:
            raise ValueError(f"crp_variant must be one of {CRP_VARIANTS}, got {self.crp_variant!r}")


def cosine_logits(image_embeds: Tensor, prompt_embeds: Tensor, tau: float) -> Tensor:
    """Temperature-scaled cosine scores; both inputs must be row-normalized."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    return scale(matmul(image_embeds, transpose(prompt_embeds)), 1.0 / tau)


def class_probs(image_embed: Tensor, prompt_embeds: Tensor, tau: float) -> Tensor:
    """Softmax over cos(image, prompt_j)/tau for one image."""
    image_embed = as_tensor(image_embed)
    if image_embed.data.ndim != 1:
        raise ShapeError(f"image embedding must be a vector, got {image_embed.shape}")
    logits = cosine_logits(reshape(image_embed, (1, image_embed.shape[0])), prompt_embeds, tau)
    return reshape(softmax(logits, axis=1), (prompt_embeds.shape[0],))


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood from pre-softmax scores."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must be in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, n))
    onehot[np.arange(b), labels] = 1.0
    picked = reduce_sum(mul(log_softmax(logits, axis=1), Tensor(onehot)))
    return scale(picked, -1.0 / b)


def crp_loss(c_prime: Tensor, variant: str = "normalized") -> Tensor:
    """Pairwise-similarity penalty over one image's injected tokens."""
    if variant not in CRP_VARIANTS:
        raise ValueError(f"crp variant must be one of {CRP_VARIANTS}, got {variant!r}")
    if c_prime.data.ndim != 2:
        raise ShapeError(f"tokens must be (m, d), got {c_prime.shape}")
    m = c_prime.shape[0]
    if m < 2:
        return as_tensor(0.0)
    if variant == "unnormalized":
        gram = matmul(c_prime, transpose(c_prime))
        return reduce_sum(absolute(sub(gram, Tensor(np.eye(m)))))
    normed = l2_normalize(c_prime)
    gram = matmul(normed, transpose(normed))
    off_diagonal = Tensor(np.ones((m, m)) - np.eye(m))
    return reduce_sum(mul(absolute(gram), off_diagonal))


def crp_loss_batch(token_rows: Tensor, m: int, variant: str = "normalized") -> Tensor:
    """Per-image CRP averaged over a batch of flattened token rows.

    ``token_rows`` is (B, m*d): row b holds image b's m injected tokens
    concatenated. Equals mean_b crp_loss(tokens_b) but builds one Gram
    matrix with a block-diagonal mask so the tape stays batch-size
    independent in record count. Cross-image products fall outside the
    mask and never contribute.
    """
    if variant not in CRP_VARIANTS:
        raise ValueError(f"crp variant must be one of {CRP_VARIANTS}, got {variant!r}")
    if token_rows.data.ndim != 2 or token_rows.shape[1] % m != 0:
        raise ShapeError(f"token rows must be (B, m*d) with m={m}, got {token_rows.shape}")
    if m < 2:
        return as_tensor(0.0)
    b = token_rows.shape[0]
    d = token_rows.shape[1] // m
    all_tokens = reshape(token_rows, (b * m, d))
    if variant == "unnormalized":
        gram = matmul(all_tokens, transpose(all_tokens))
        identity_blocks = np.kron(np.eye(b), np.eye(m))
        within_image = np.kron(np.eye(b), np.ones((m, m)))
        per_image_sum = reduce_sum(mul(absolute(sub(gram, Tensor(identity_blocks))), Tensor(within_image)))
    else:
        normed = l2_normalize(all_tokens)
        gram = matmul(normed, transpose(normed))
        off_diag_blocks = np.kron(np.eye(b), np.ones((m, m)) - np.eye(m))
        per_image_sum = reduce_sum(mul(absolute(gram), Tensor(off_diag_blocks)))
    return scale(per_image_sum, 1.0 / b)


def mean_offdiag_similarity(token_rows: np.ndarray, m: int) -> float:
    """Probe (no tape): mean |G_jl|, j != l, of the row-normalized per-image
    Gram matrices, averaged over the batch."""
    b, width = token_rows.shape
    d = width // m
    tokens = token_rows.reshape(b, m, d)
    norms = np.sqrt((tokens * tokens).sum(axis=2, keepdims=True))
    normed = tokens / np.maximum(norms, 1e-12)
    grams = np.einsum("bmd,bnd->bmn", normed, normed)
    mask = np.ones((m, m)) - np.eye(m)
    return float((np.abs(grams) * mask).sum() / (b * m * (m - 1)))


def total_loss(ce: Tensor, crp: Tensor, cfg: LossConfig) -> Tensor:
    """ce + lambda * crp. Callers that skip CRP entirely at lambda=0 get a
    bitwise-identical training trajectory; this composition is for the
    general case."""
    return ce + scale(crp, cfg.lambda_crp)
