"""Experiment orchestration tests: metrics formatting, checkpoint
round-trips, the training-query instrumentation, rerun determinism, and
the gradient-check command."""

import numpy as np
import pytest

from fedcsap.config import config_from_dict
from fedcsap.evaluation import harmonic_mean
from fedcsap.experiment import (
    GRADCHECK_PARAM_CAP,
    METRICS_HEADER,
    build_world,
    evaluate_checkpoint,
    load_model_checkpoint,
    metrics_csv,
    model_checkpoint,
    run_experiment,
    run_gradcheck,
)
from fedcsap.numerics import backward_fault

SMALL = {
    "data": {
        "num_classes": 4,
        "shots_per_class": 2,
        "image_shape": [2, 8, 8],
        "domains": [
            {"channel_bias": [0.0, 0.0]},
            {"brightness_shift": 0.4, "contrast_scale": 1.2, "channel_bias": [0.1, -0.1]},
        ],
    },
    "model": {"d": 16, "m": 3, "heads": 4, "stage_shapes": [[4, 4, 2], [2, 2, 4], [1, 1, 8]]},
    "loss": {"tau": 0.5, "lambda_crp": 0.1},
    "fed": {"rounds": 4, "local_steps": 2, "lr": 0.05, "classes_per_client": 2},
    "eval_cadence": 2,
    "master_seed": 5,
}

TINY_GRADCHECK = {
    "data": {
        "num_classes": 2,
        "shots_per_class": 1,
        "image_shape": [2, 4, 4],
        "domains": [{"channel_bias": [0.0, 0.0]}],
    },
    "model": {"d": 8, "m": 2, "heads": 4, "L": 2, "stage_shapes": [[2, 2, 2], [1, 1, 2]], "q_se": 1},
    "loss": {"tau": 0.5, "lambda_crp": 0.1},
    "fed": {"classes_per_client": 1},
    "master_seed": 1,
}


def small_cfg(**overrides):
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMALL.items()}
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {})
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# metrics


def test_metrics_header_and_row_count():
    result = run_experiment(small_cfg())
    lines = result.metrics_csv.strip().split("\n")
    assert lines[0] == METRICS_HEADER
    assert len(lines) - 1 == 4 // 2  # rounds / cadence
    assert [int(line.split(",")[0]) for line in lines[1:]] == [2, 4]


def test_metrics_hm_column_is_consistent():
    result = run_experiment(small_cfg())
    for line in result.metrics_csv.strip().split("\n")[1:]:
        fields = line.split(",")
        accs = [float(fields[4]), float(fields[5]), float(fields[6])]
        assert abs(float(fields[7]) - harmonic_mean(accs)) < 1e-9


def test_metrics_floats_roundtrip_exactly():
    # repr-formatted floats parse back to the identical double
    result = run_experiment(small_cfg())
    report = result.reports[0]
    fields = result.metrics_csv.strip().split("\n")[1].split(",")
    assert float(fields[1]) == report.train_loss
    assert float(fields[7]) == report.hm
    assert fields[9] == ";".join(str(p) for p in report.participants)


def test_reports_and_csv_agree(tmp_path):
    result = run_experiment(small_cfg())
    assert metrics_csv(result.reports) == result.metrics_csv


# ---------------------------------------------------------------------------
# determinism and instrumentation


def test_rerun_is_byte_identical():
    a = run_experiment(small_cfg())
    b = run_experiment(small_cfg())
    assert a.metrics_csv == b.metrics_csv
    assert a.checkpoint == b.checkpoint
    assert a.resolved_config == b.resolved_config


def test_training_never_queries_new_class_names():
    result = run_experiment(small_cfg())
    assert result.trained_names, "training must embed the client class names"
    assert result.trained_names.isdisjoint(result.new_names)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_restores_every_parameter():
    world = build_world(small_cfg())
    blob = model_checkpoint(world.model)
    twin = build_world(small_cfg(master_seed=6)).model  # different init
    load_model_checkpoint(twin, blob)
    ours, theirs = world.model, twin
    for store in ("generator", "injection"):
        a = getattr(ours, store).store.state_arrays()
        b = getattr(theirs, store).store.state_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_name_mismatch_is_reported():
    world = build_world(small_cfg())
    blob = model_checkpoint(world.model)
    other = build_world(small_cfg(model={"m": 4})).model  # extra token head
    with pytest.raises(ValueError, match="missing"):
        load_model_checkpoint(other, blob)


def test_evaluate_checkpoint_matches_final_accuracies():
    cfg = small_cfg()
    result = run_experiment(cfg)
    accs = evaluate_checkpoint(cfg, result.checkpoint)
    assert accs == pytest.approx(result.final_accuracies, abs=1e-12)


# ---------------------------------------------------------------------------
# gradient-check command


def test_gradcheck_passes_on_a_tiny_config():
    res = run_gradcheck(config_from_dict(TINY_GRADCHECK))
    assert res.passed
    assert res.max_error < res.tolerance
    assert res.parameter_count <= GRADCHECK_PARAM_CAP
    assert not res.frozen
    assert set(res.blocks) == {
        n for n in res.blocks if n.startswith(("generator.", "injection."))
    }


def test_gradcheck_reports_frozen_blocks_when_injection_disabled():
    cfg = config_from_dict({**TINY_GRADCHECK, "ablations": {"disable_injection": True}})
    res = run_gradcheck(cfg)
    assert res.passed
    assert res.frozen and all(n.startswith("injection.") for n in res.frozen)
    assert all(n.startswith("generator.") for n in res.blocks)


def test_gradcheck_enforces_the_parameter_cap():
    with pytest.raises(ValueError, match="cap"):
        run_gradcheck(config_from_dict({}))  # default model is too large


def test_gradcheck_catches_a_corrupted_backward_rule():
    cfg = config_from_dict(TINY_GRADCHECK)
    with backward_fault("sigmoid", scale=3.0):
        res = run_gradcheck(cfg)
    assert not res.passed
