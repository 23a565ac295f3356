"""Three-level accuracy protocol and the composite harmonic mean.

acc_local scores each client's held-out examples against only that
client's class set and averages over clients. acc_base scores every
held-out example of a training class against the union of all training
classes. acc_new does the same for the held-out class half, generating
prompts from names the training loop never embedded; the text encoder's
query log provides the never-queried proof.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import Dataset
from .fedruntime import FederatedClient
from .losses import LossConfig
from .pipeline import ClassSet, FeatureRows, PromptModel, build_class_set, evaluate_pool, precompute_features


def harmonic_mean(values: Sequence[float]) -> float:
    """3 / (1/a + 1/b + 1/c); any zero collapses the mean to zero."""
    vals = [float(v) for v in values]
    if len(vals) != 3:
        raise ValueError(f"expected exactly three accuracy values, got {len(vals)}")
    if any(v < 0 for v in vals):
        raise ValueError(f"accuracies must be >= 0, got {vals}")
    if any(v == 0.0 for v in vals):
        return 0.0
    return 3.0 / sum(1.0 / v for v in vals)


@dataclass
class EvalSuite:
    """Precomputed pools and class sets for the recurring evaluation."""

    client_pools: list[tuple[ClassSet, FeatureRows]]  # aligned with clients
    base_set: ClassSet
    base_pool: FeatureRows
    new_set: ClassSet
    new_pool: FeatureRows


def _pool(model: PromptModel, dataset: Dataset, class_ids, domain_id=None) -> FeatureRows:
    mask = np.isin(dataset.eval_labels, np.asarray(list(class_ids), dtype=np.int64))
    if domain_id is not None:
        mask &= dataset.eval_domains == domain_id
    if not mask.any():
        raise ValueError(f"no held-out examples for classes {sorted(class_ids)}")
    return precompute_features(
        model.vision, dataset.eval_images[mask], dataset.eval_labels[mask], dataset.eval_domains[mask]
    )


def build_eval_suite(
    model: PromptModel,
    dataset: Dataset,
    clients: Sequence[FederatedClient],
    base_classes: Sequence[int],
    new_classes: Sequence[int],
) -> EvalSuite:
    """Embed every candidate class name and cache every eval pool up front.

    Running this once before training also keeps the text encoder's name
    cache read-only afterwards, which matters when clients run on threads.
    """
    client_pools = []
    for client in clients:
        # held-out examples of the client's classes, in the client's domain
        domain = int(client.feats.domains[0])
        client_pools.append((client.class_set, _pool(model, dataset, client.class_set.class_ids, domain)))
    base_set = build_class_set(model.text, base_classes, dataset.class_names)
    new_set = build_class_set(model.text, new_classes, dataset.class_names)
    return EvalSuite(
        client_pools=client_pools,
        base_set=base_set,
        base_pool=_pool(model, dataset, base_classes),
        new_set=new_set,
        new_pool=_pool(model, dataset, new_classes),
    )


def evaluate(model: PromptModel, suite: EvalSuite, cfg: LossConfig) -> tuple[float, float, float]:
    """(acc_local, acc_base, acc_new) for the current global parameters."""
    locals_ = [evaluate_pool(model, cs, pool, cfg) for cs, pool in suite.client_pools]
    acc_local = float(np.mean(locals_))
    acc_base = evaluate_pool(model, suite.base_set, suite.base_pool, cfg)
    acc_new = evaluate_pool(model, suite.new_set, suite.new_pool, cfg)
    return acc_local, acc_base, acc_new
