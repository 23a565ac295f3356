"""Synthetic few-shot multi-domain image generation and federated partitioning.

Classes are well-separated Gaussian prototypes; each domain renders every
class through its own affine style (contrast, brightness, per-channel
bias), giving a controllable style shift between clients. A held-out
evaluation split is drawn from an independent noise stream so training
never sees it. Everything is a pure function of the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .formats import DATASET_MAGIC, blob_from_bytes, blob_to_bytes
from .seeding import split_seed

MAX_REJECTION_ATTEMPTS = 200


class DataConfigError(ValueError):
    """The data configuration cannot produce a valid dataset."""


@dataclass
class StyleParams:
    brightness_shift: float
    contrast_scale: float
    channel_bias: np.ndarray

    def __post_init__(self):
        self.channel_bias = np.asarray(self.channel_bias, dtype=np.float64)
        if self.contrast_scale <= 0.0:
            raise DataConfigError(f"contrast_scale must be positive, got {self.contrast_scale}")


@dataclass
class SyntheticTaskConfig:
    num_classes: int
    shots_per_class: int
    domains: list[StyleParams]
    image_shape: tuple[int, int, int]
    class_margin: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if self.num_classes < 2:
            raise DataConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.shots_per_class < 1:
            raise DataConfigError(f"shots_per_class must be >= 1, got {self.shots_per_class}")
        if self.class_margin <= 0.0:
            raise DataConfigError(f"class_margin must be positive, got {self.class_margin}")
        if self.noise_sigma < 0.0:
            raise DataConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if len(self.domains) < 1:
            raise DataConfigError("need at least one domain")
        if len(self.image_shape) != 3:
            raise DataConfigError(f"image_shape must be (C, H, W), got {self.image_shape}")
        for s in self.domains:
            if s.channel_bias.shape != (self.image_shape[0],):
                raise DataConfigError(
                    f"channel_bias shape {s.channel_bias.shape} does not match {self.image_shape[0]} channels"
                )


@dataclass
class ClientShard:
    client_id: int
    class_ids: list[int]
    examples: list[tuple[np.ndarray, int]]
    class_names: list[str]
    domain_id: int

    def __post_init__(self):
        allowed = set(self.class_ids)
        for _, label in self.examples:
            if label not in allowed:
                raise DataConfigError(f"shard {self.client_id}: label {label} outside {sorted(allowed)}")

    def images_array(self) -> np.ndarray:
        return np.stack([img for img, _ in self.examples])

    def labels_array(self) -> np.ndarray:
        return np.array([label for _, label in self.examples], dtype=np.int64)


@dataclass
class Dataset:
    cfg: SyntheticTaskConfig
    prototypes: np.ndarray
    class_names: list[str]
    train_images: np.ndarray
    train_labels: np.ndarray
    train_domains: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray
    eval_domains: np.ndarray

    def select(self, split: str, class_ids=None, domain_id=None):
        """(images, labels) filtered to the given classes and/or domain."""
        if split == "train":
            images, labels, domains = self.train_images, self.train_labels, self.train_domains
        elif split == "eval":
            images, labels, domains = self.eval_images, self.eval_labels, self.eval_domains
        else:
            raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
        mask = np.ones(len(labels), dtype=bool)
        if class_ids is not None:
            mask &= np.isin(labels, np.asarray(list(class_ids), dtype=np.int64))
        if domain_id is not None:
            mask &= domains == domain_id
        return images[mask], labels[mask]

    def to_bytes(self) -> bytes:
        header = {
            "num_classes": self.cfg.num_classes,
            "shots_per_class": self.cfg.shots_per_class,
            "image_shape": list(self.cfg.image_shape),
            "class_margin": self.cfg.class_margin,
            "noise_sigma": self.cfg.noise_sigma,
            "seed": self.cfg.seed,
            "domains": [
                {
                    "brightness_shift": s.brightness_shift,
                    "contrast_scale": s.contrast_scale,
                    "channel_bias": s.channel_bias.tolist(),
                }
                for s in self.cfg.domains
            ],
            "class_names": self.class_names,
        }
        items = [
            ("prototypes", self.prototypes),
            ("train_images", self.train_images),
            ("train_labels", self.train_labels),
            ("train_domains", self.train_domains),
            ("eval_images", self.eval_images),
            ("eval_labels", self.eval_labels),
            ("eval_domains", self.eval_domains),
        ]
        return blob_to_bytes(DATASET_MAGIC, header, items)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        header, arrays = blob_from_bytes(DATASET_MAGIC, data)
        cfg = SyntheticTaskConfig(
            num_classes=header["num_classes"],
            shots_per_class=header["shots_per_class"],
            domains=[
                StyleParams(s["brightness_shift"], s["contrast_scale"], np.array(s["channel_bias"]))
                for s in header["domains"]
            ],
            image_shape=tuple(header["image_shape"]),
            class_margin=header["class_margin"],
            noise_sigma=header["noise_sigma"],
            seed=header["seed"],
        )
        return cls(
            cfg=cfg,
            prototypes=arrays["prototypes"],
            class_names=list(header["class_names"]),
            train_images=arrays["train_images"],
            train_labels=arrays["train_labels"].astype(np.int64),
            train_domains=arrays["train_domains"].astype(np.int64),
            eval_images=arrays["eval_images"],
            eval_labels=arrays["eval_labels"].astype(np.int64),
            eval_domains=arrays["eval_domains"].astype(np.int64),
        )


def _sample_prototypes(cfg: SyntheticTaskConfig) -> np.ndarray:
    rng = np.random.default_rng(split_seed(cfg.seed, "data.prototypes"))
    accepted: list[np.ndarray] = []
    for k in range(cfg.num_classes):
        for _ in range(MAX_REJECTION_ATTEMPTS):
            candidate = rng.normal(size=cfg.image_shape)
            if all(np.linalg.norm(candidate - p) >= cfg.class_margin for p in accepted):
                accepted.append(candidate)
                break
        else:
            raise DataConfigError(
                f"could not place class {k} at pairwise distance >= {cfg.class_margin} "
                f"after {MAX_REJECTION_ATTEMPTS} draws; lower data.class_margin"
            )
    return np.stack(accepted)


def _render_split(cfg: SyntheticTaskConfig, prototypes: np.ndarray, stream: str):
    rng = np.random.default_rng(split_seed(cfg.seed, stream))
    images, labels, domains = [], [], []
    for domain_id, style in enumerate(cfg.domains):
        bias = style.channel_bias[:, None, None]
        for k in range(cfg.num_classes):
            for _ in range(cfg.shots_per_class):
                noise = cfg.noise_sigma * rng.normal(size=cfg.image_shape)
                images.append(style.contrast_scale * (prototypes[k] + noise) + style.brightness_shift + bias)
                labels.append(k)
                domains.append(domain_id)
    return (
        np.stack(images),
        np.array(labels, dtype=np.int64),
        np.array(domains, dtype=np.int64),
    )


def generate_dataset(cfg: SyntheticTaskConfig) -> Dataset:
    """Training and held-out splits from independent noise streams."""
    prototypes = _sample_prototypes(cfg)
    train_images, train_labels, train_domains = _render_split(cfg, prototypes, "data.train_noise")
    eval_images, eval_labels, eval_domains = _render_split(cfg, prototypes, "data.eval_noise")
    return Dataset(
        cfg=cfg,
        prototypes=prototypes,
        class_names=[f"class_{k}" for k in range(cfg.num_classes)],
        train_images=train_images,
        train_labels=train_labels,
        train_domains=train_domains,
        eval_images=eval_images,
        eval_labels=eval_labels,
        eval_domains=eval_domains,
    )


def base_new_split(class_ids: Sequence[int]) -> tuple[list[int], list[int]]:
    """Deterministic split by sorted id: first ceil(n/2) are base, rest new."""
    ids = sorted(int(c) for c in class_ids)
    if len(ids) != len(set(ids)):
        raise DataConfigError("class ids must be distinct")
    if len(ids) < 2:
        raise DataConfigError("need at least two classes to split")
    cut = (len(ids) + 1) // 2
    return ids[:cut], ids[cut:]


def partition_clients(
    dataset: Dataset,
    base_classes: Sequence[int],
    per_client: int,
    shots: int | None = None,
    domain_assignment: Sequence[int] | None = None,
) -> list[ClientShard]:
    """Disjoint sorted class blocks, one domain per client (round-robin).

    The class count must divide evenly; silently dropping a remainder would
    corrupt the base-accuracy denominator downstream.
    """
    ids = sorted(int(c) for c in base_classes)
    if per_client < 1:
        raise DataConfigError(f"per_client must be >= 1, got {per_client}")
    if len(ids) % per_client != 0:
        raise DataConfigError(
            f"{len(ids)} base classes do not divide into blocks of {per_client}; "
            "adjust num_classes or classes_per_client"
        )
    shots = dataset.cfg.shots_per_class if shots is None else int(shots)
    if not 1 <= shots <= dataset.cfg.shots_per_class:
        raise DataConfigError(
            f"shots must be in [1, {dataset.cfg.shots_per_class}], got {shots}"
        )
    num_clients = len(ids) // per_client
    num_domains = len(dataset.cfg.domains)
    if domain_assignment is None:
        domain_assignment = [i % num_domains for i in range(num_clients)]
    domain_assignment = [int(d) for d in domain_assignment]
    if len(domain_assignment) != num_clients:
        raise DataConfigError(
            f"domain_assignment has {len(domain_assignment)} entries for {num_clients} clients"
        )
    if any(not 0 <= d < num_domains for d in domain_assignment):
        raise DataConfigError(f"domain ids must be in [0, {num_domains}), got {domain_assignment}")

    shards = []
    for i in range(num_clients):
        block = ids[i * per_client : (i + 1) * per_client]
        examples: list[tuple[np.ndarray, int]] = []
        for k in block:
            images, labels = dataset.select("train", class_ids=[k], domain_id=domain_assignment[i])
            for img, label in zip(images[:shots], labels[:shots]):
                examples.append((img, int(label)))
        shards.append(
            ClientShard(
                client_id=i,
                class_ids=block,
                examples=examples,
                class_names=[dataset.class_names[k] for k in block],
                domain_id=domain_assignment[i],
            )
        )
    return shards
