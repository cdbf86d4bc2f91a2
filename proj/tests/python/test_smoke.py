# SPDX-License-Identifier: Apache-2.0

import json
import math

import numpy as np
import pytest

import absvit


def test_soft_threshold_shrinks_toward_zero():
    out = absvit.soft_threshold(np.array([-2.0, -0.1, 0.0, 0.3, 1.5]), 0.5)
    np.testing.assert_array_equal(out, [-1.5, 0.0, 0.0, 0.0, 1.0])


def test_solver_matches_oracle_and_numpy_objective():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(10, 14)) / math.sqrt(10)
    x = rng.normal(size=10)
    lam = 0.1
    lca = absvit.solve_sparse_code(P, x, lam, max_iters=5_000_000)
    ista = absvit.lasso_oracle(P, x, lam)
    assert lca["converged"]
    assert abs(lca["objective"] - ista["objective"]) <= 1e-5
    assert absvit.kkt_residual(P, x, lam, lca["code"]) <= 1e-4
    code = lca["code"]
    by_hand = 0.5 * np.sum((P @ code - x) ** 2) + lam * np.sum(np.abs(code))
    assert absvit.sparse_objective(P, x, lam, code) == pytest.approx(by_hand, rel=1e-12)


def test_identity_dictionary_unit_step_is_soft_threshold():
    x = np.array([0.9, -0.2, 0.05, -1.4])
    P = np.eye(4)
    r = absvit.solve_sparse_code(P, x, 0.3, eta=absvit.max_step_size(P))
    np.testing.assert_array_equal(r["code"], absvit.soft_threshold(x, 0.3))


def test_random_features_are_positive_and_seeded():
    X = np.random.default_rng(0).normal(size=(5, 8)) / 3
    a = absvit.positive_random_features(X, 64, 7)
    b = absvit.positive_random_features(X, 64, 7)
    assert a.shape == (5, 64)
    assert np.all(a > 0)
    np.testing.assert_array_equal(a, b)


def test_generators_are_deterministic_with_masks():
    img, mask = absvit.gen_single_object(2, 11)
    img2, _ = absvit.gen_single_object(2, 11)
    assert img.shape == (32, 32) and img.dtype == np.float32
    np.testing.assert_array_equal(img, img2)
    assert mask.any() and 0.0 <= img.min() and img.max() <= 1.0
    comp = absvit.gen_two_object(0, 3, 5)
    assert (comp["left_class"], comp["right_class"]) == (0, 3)
    assert not np.any(comp["left_mask"][:, 16:]) and not np.any(comp["right_mask"][:, :16])
    assert absvit.class_name(0)


def test_config_round_trip_and_rejection():
    base = json.loads(absvit.default_config())
    assert base["train"]["epochs"] == 30
    cfg = absvit.config(train={"epochs": 2})
    assert cfg["train"]["epochs"] == 2 and cfg["model"] == base["model"]
    with pytest.raises(absvit.ConfigError, match="learning_rate"):
        absvit.config(train={"learning_rate": 1})
    with pytest.raises(ValueError):
        absvit.config(train={"batch_size": 0})


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("ckpt") / "model.json")
    cfg = {
        "model": {"image_size": 16, "patch": 4, "layers": 2, "dim": 16, "heads": 2, "mlp_ratio": 2},
        "train": {"epochs": 2, "batch_size": 16, "train_size": 64, "test_size": 32},
        "data": {"min_radius": 2.0, "max_radius": 4.0},
    }
    lines = []
    result = absvit.train(cfg, checkpoint=path, log=lines.append)
    assert len(result["history"]) == 2
    assert all(math.isfinite(e["loss"]) for e in result["history"])
    assert lines[0].startswith("event=start") and lines[-1].startswith("event=done")
    return path


def test_model_traces_and_alpha_zero_has_no_feedback(tiny_checkpoint):
    model = absvit.Model.load(tiny_checkpoint)
    assert model.image_size == 16 and model.classes == 4
    images = np.stack([absvit.gen_single_object(k, 40 + k, image_size=16)[0] for k in range(4)])
    out = model.run(images, alpha=0.0)
    assert out["logits"].shape == (4, 4)
    assert not np.any(out["td.1"])
    np.testing.assert_array_equal(out["attn1.1"], out["attn4.1"])
    preds = model.predict(images, alpha=1.0, prior="class:1")
    assert len(preds) == 4 and all(0 <= p < 4 for p in preds)
    proto = model.prototype(1)
    cued = model.run(images[0], alpha=2.0, prior=proto)
    named = model.run(images[0], alpha=2.0, prior="class:1")
    np.testing.assert_array_equal(cued["logits"], named["logits"])


def test_missing_checkpoint_raises_checkpoint_error(tmp_path):
    with pytest.raises(absvit.CheckpointError):
        absvit.Model.load(str(tmp_path / "absent.json"))


def test_selftest_reports_every_check():
    lines, failures = absvit.selftest()
    assert failures == 0
    assert all(" status=PASS " in line for line in lines)
