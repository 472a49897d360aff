import numpy as np
import pytest

from tinc import losses, trainer
from tinc.errors import ValidationError


def test_invariance_gradient_hand_example():
    grads = losses.loss_gradient("invariance",
                                 {"z1": np.array([[1.0, 2.0]]),
                                  "z2": np.array([[0.0, 0.0]])})
    assert np.array_equal(grads["z1"], np.array([[2.0, 4.0]]))
    assert np.array_equal(grads["z2"], np.array([[-2.0, -4.0]]))


def test_invariance_gradient_zero_at_minimum():
    z = np.random.default_rng(0).normal(size=(5, 3))
    grads = losses.loss_gradient("invariance", {"z1": z, "z2": z.copy()})
    assert np.array_equal(grads["z1"], np.zeros((5, 3)))


def test_tinc_gradient_flat_inside_margin():
    z1 = np.array([[0.1, 0.0], [0.0, 0.1]])
    z2 = np.zeros((2, 2))
    grads = losses.loss_gradient("tinc", {"z1": z1, "z2": z2,
                                          "dv": np.array([0.9, 0.9])})
    assert np.array_equal(grads["z1"], np.zeros((2, 2)))
    assert np.array_equal(grads["z2"], np.zeros((2, 2)))


def test_fully_hinged_loss_reports_zero_error():
    z1 = np.array([[0.1, 0.0]])
    z2 = np.zeros((1, 2))
    rep = losses.finite_difference_check("tinc", {"z1": z1, "z2": z2,
                                                  "dv": np.array([0.9])})
    assert rep.worst == 0.0
    assert rep.passed


def test_all_losses_match_finite_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for loss_id in losses.LOSS_IDS:
            n = int(rng.integers(3, 9))
            d = int(rng.integers(2, 7))
            inputs = losses.sample_inputs(loss_id, rng, n=n, d=d)
            rep = losses.finite_difference_check(loss_id, inputs)
            assert rep.passed, (loss_id, seed, rep.max_rel_error)


def test_vicreg_variants_match_finite_differences():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        for variant in losses.SIMILARITY_VARIANTS:
            cfg = losses.LossConfig(similarity_variant=variant)
            inputs = losses.sample_inputs("vicreg", rng)
            rep = losses.finite_difference_check("vicreg", inputs, cfg)
            assert rep.passed, (variant, seed, rep.max_rel_error)


def test_hinge_exclusion_counts_boundary_coordinates():
    # squared distance exactly at the margin: every coordinate flips the hinge
    z1 = np.array([[1.0, 0.0]])
    z2 = np.zeros((1, 2))
    rep = losses.finite_difference_check("tinc", {"z1": z1, "z2": z2,
                                                  "dv": np.array([1.0])})
    assert rep.excluded["z1"] >= 1
    assert rep.passed


def test_variance_gradient_matches_fd_away_from_hinge():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 6)) * 0.3  # stds well below gamma
    rep = losses.finite_difference_check("variance", {"z": z})
    assert rep.passed and rep.checked["z"] > 0


def test_gradient_shapes_match_inputs():
    rng = np.random.default_rng(2)
    for loss_id in losses.LOSS_IDS:
        inputs = losses.sample_inputs(loss_id, rng, n=5, d=4)
        grads = losses.loss_gradient(loss_id, inputs)
        for name, g in grads.items():
            assert g.shape == np.asarray(inputs[name]).shape, (loss_id, name)


def test_fd_step_must_be_positive():
    rng = np.random.default_rng(3)
    inputs = losses.sample_inputs("invariance", rng)
    with pytest.raises(ValidationError):
        losses.finite_difference_check("invariance", inputs, step=0.0)


def test_unknown_loss_id_rejected():
    with pytest.raises(ValidationError):
        losses.loss_value("hinge3", {"z1": np.ones((2, 2)),
                                     "z2": np.ones((2, 2))})


def test_end_to_end_model_gradcheck():
    for method in ("vicreg", "barlow_twins", "vicreg_timehead"):
        rep = trainer.gradcheck_model(seed=0, method=method)
        assert rep.passed, (method, rep.max_rel_error)


def test_end_to_end_model_gradcheck_across_seeds():
    for seed in (1, 2):
        rep = trainer.gradcheck_model(seed=seed, method="vicreg")
        assert rep.passed, (seed, rep.worst)


def test_model_gradcheck_rejects_hinged_methods():
    with pytest.raises(ValidationError):
        trainer.gradcheck_model(method="tinc")
