"""Deterministic frozen text and vision encoders.

Both encoders stand in for a large pretrained backbone: their weights are
generated once from a named seed, never enter a ParameterStore, and never
receive gradients. The text encoder is the only differentiable-through
path (prompt sequences carry gradients back to the trainable prompt and
injection parameters); the vision side produces constant features.
"""

from __future__ import annotations

import math
import re
from typing import Sequence

import numpy as np

from .numerics import Tensor, l2_normalize, matmul, reshape
from .numerics.tensor import ShapeError
from .seeding import fnv1a64, split_seed

VOCAB_BINS = 4096

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _trigram_bag(name: str) -> np.ndarray:
    """Hash the character trigrams of every token into a fixed-size bag."""
    tokens = _TOKEN_RE.findall(name.lower())
    if not tokens:
        raise ValueError(f"class name {name!r} contains no encodable tokens")
    bag = np.zeros(VOCAB_BINS)
    for tok in tokens:
        padded = f"#{tok}#"
        for i in range(len(padded) - 2):
            bag[fnv1a64(padded[i : i + 3].encode("utf-8")) % VOCAB_BINS] += 1.0
    return bag


class FrozenTextEncoder:
    """Hash-based class-name embedder plus a fixed linear sequence encoder.

    ``embed_class_names`` maps each name independently (rows never depend
    on the rest of the list), so embeddings are stable across tasks.
    ``encode_prompt_sequence`` is built from tape ops and therefore
    differentiable with respect to its input tokens; the mixer weights are
    plain constants and never materialize a gradient.
    """

    def __init__(self, d: int, m: int, seed: int):
        if d < 1 or m < 1:
            raise ValueError(f"d and m must be positive, got d={d}, m={m}")
        self.d = d
        self.m = m
        self.seed = seed
        rng = np.random.default_rng(split_seed(seed, "text.vocab_projection"))
        self.vocab_projection = rng.normal(0.0, 1.0 / math.sqrt(VOCAB_BINS), size=(VOCAB_BINS, d))
        rng = np.random.default_rng(split_seed(seed, "text.sequence_mixer"))
        width = (m + 1) * d
        self.sequence_mixer = rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, d))
        self._mixer = Tensor(self.sequence_mixer)
        self._name_cache: dict[str, np.ndarray] = {}
        # Optional instrumentation: when set, every embedded name is
        # recorded, letting the evaluation protocol prove that held-out
        # class names were never queried during training.
        self.query_log: set[str] | None = None

    def embed_one(self, name: str) -> np.ndarray:
        if self.query_log is not None:
            self.query_log.add(name)
        cached = self._name_cache.get(name)
        if cached is not None:
            return cached
        vec = _trigram_bag(name) @ self.vocab_projection
        norm = float(np.sqrt(np.sum(vec * vec)))
        if norm == 0.0:  # unreachable for a generic projection; guard anyway
            raise ValueError(f"class name {name!r} embedded to the zero vector")
        row = vec / norm
        self._name_cache[name] = row
        return row

    def embed_class_names(self, names: Sequence[str]) -> Tensor:
        """Rows are unit-norm embeddings, one per name, in list order."""
        if len(names) == 0:
            raise ValueError("need at least one class name")
        return Tensor(np.stack([self.embed_one(n) for n in names]))

    def encode_prompt_sequence(self, tokens: Tensor) -> Tensor:
        """Encode one (m+1)-row token sequence to a unit vector in R^d."""
        expected = (self.m + 1, self.d)
        if tokens.shape != expected:
            raise ShapeError(f"prompt sequence shape {tokens.shape}, expected {expected}")
        flat = reshape(tokens, (1, (self.m + 1) * self.d))
        return reshape(l2_normalize(matmul(flat, self._mixer)), (self.d,))

    def encode_prompt_rows(self, rows: Tensor) -> Tensor:
        """Batched variant: each row is an already-flattened token sequence."""
        width = (self.m + 1) * self.d
        if rows.data.ndim != 2 or rows.shape[1] != width:
            raise ShapeError(f"flattened sequences must be (*, {width}), got {rows.shape}")
        return l2_normalize(matmul(rows, self._mixer))

    def mixer_blocks(self) -> list[np.ndarray]:
        """The (d x d) slices of the mixer, one per token position.

        The sequence encoder is linear before normalization, so encoding
        [t_0; ...; t_m] equals sum_k t_k @ block_k; the batched pipeline
        exploits this to encode many sequences without materializing them.
        """
        d = self.d
        return [self.sequence_mixer[k * d : (k + 1) * d] for k in range(self.m + 1)]


class FrozenVisionEncoder:
    """Seeded linear-downsample stages with ReLU, plus an embedding head.

    Produces one feature map per stage (channel-last, shape (W_l, H_l, C_l))
    and a unit-norm image embedding. ``running_style`` tracks an
    exponential moving average of per-channel means and is updated only in
    training mode, so evaluation never perturbs state.
    """

    def __init__(
        self,
        image_shape: Sequence[int],
        stage_shapes: Sequence[Sequence[int]],
        d: int,
        seed: int,
        momentum: float = 0.9,
    ):
        self.image_shape = tuple(int(v) for v in image_shape)
        self.stage_shapes = [tuple(int(v) for v in s) for s in stage_shapes]
        if len(self.image_shape) != 3:
            raise ValueError(f"image shape must be (C, H, W), got {self.image_shape}")
        if not self.stage_shapes:
            raise ValueError("need at least one stage")
        for s in self.stage_shapes:
            if len(s) != 3 or any(v < 1 for v in s):
                raise ValueError(f"stage shape must be three positive extents (W, H, C), got {s}")
        for prev, cur in zip(self.stage_shapes, self.stage_shapes[1:]):
            if cur[0] > prev[0] or cur[1] > prev[1]:
                raise ValueError(f"stage shapes must shrink spatially: {prev} -> {cur}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.d = d
        self.seed = seed
        self.momentum = momentum

        dims = [int(np.prod(self.image_shape))] + [w * h * c for (w, h, c) in self.stage_shapes]
        self.stage_weights: list[np.ndarray] = []
        self.stage_biases: list[np.ndarray] = []
        for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            rng = np.random.default_rng(split_seed(seed, f"vision.stage.{l}"))
            self.stage_weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
            self.stage_biases.append(rng.normal(0.0, 0.1, size=fan_out))
        rng = np.random.default_rng(split_seed(seed, "vision.head"))
        self.head = rng.normal(0.0, 1.0 / math.sqrt(dims[-1]), size=(dims[-1], d))
        self.running_style = np.zeros(self.total_channels())

    def channel_counts(self) -> list[int]:
        return [c for (_, _, c) in self.stage_shapes]

    def total_channels(self) -> int:
        return sum(self.channel_counts())

    def forward_batch(self, images: np.ndarray, training: bool):
        """(B, C, H, W) images -> (per-stage (B, W_l, H_l, C_l) maps, (B, d) embeds)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != self.image_shape:
            raise ShapeError(f"batch shape {images.shape}, expected (B,) + {self.image_shape}")
        b = images.shape[0]
        if b == 0:
            raise ShapeError("empty image batch")
        h = images.reshape(b, -1)
        features = []
        for (w, bias, shape) in zip(self.stage_weights, self.stage_biases, self.stage_shapes):
            h = np.maximum(h @ w + bias, 0.0)
            features.append(h.reshape((b, *shape)))
        emb = h @ self.head
        norms = np.sqrt(np.sum(emb * emb, axis=1, keepdims=True))
        emb = emb / np.maximum(norms, 1e-12)
        if training:
            self._update_running(batch_channel_means(features))
        return features, emb

    def vision_forward_multiscale(self, image: np.ndarray, training: bool):
        """Single-image forward; in training mode the EMA sees this image."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ShapeError(f"image shape {image.shape}, expected {self.image_shape}")
        features, emb = self.forward_batch(image[None], training)
        return [f[0] for f in features], emb[0]

    def _update_running(self, means: np.ndarray) -> None:
        self.running_style = self.momentum * self.running_style + (1.0 - self.momentum) * means

    def batch_style_stats(self, batch_features, mode: str) -> np.ndarray:
        """Per-channel style statistic: batch mean, or the training EMA."""
        if mode == "running":
            return self.running_style.copy()
        if mode != "batch":
            raise ValueError(f"mode must be 'batch' or 'running', got {mode!r}")
        if batch_features is None or len(batch_features) == 0:
            raise ValueError("batch mode needs at least one feature map per stage")
        return batch_channel_means(batch_features)


def gap_multiscale(features: Sequence[np.ndarray]) -> np.ndarray:
    """Spatial mean per channel of each (W, H, C) map, concatenated in stage order."""
    if len(features) == 0:
        raise ValueError("need at least one feature map")
    return np.concatenate([np.asarray(f).mean(axis=(0, 1)) for f in features])


def gap_multiscale_batch(features: Sequence[np.ndarray]) -> np.ndarray:
    """Batched pooling: per-stage (B, W, H, C) maps -> (B, sum C) content matrix."""
    if len(features) == 0:
        raise ValueError("need at least one feature map")
    return np.concatenate([np.asarray(f).mean(axis=(1, 2)) for f in features], axis=1)


def batch_channel_means(batch_features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean over batch and spatial axes per channel, stages concatenated."""
    if any(np.asarray(f).shape[0] == 0 for f in batch_features):
        raise ValueError("empty batch")
    return np.concatenate([np.asarray(f).mean(axis=(0, 1, 2)) for f in batch_features])
