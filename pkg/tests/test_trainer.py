import numpy as np
import pytest

from tinc import checkpoint, cohort, losses, nn, optim, synth, trainer
from tinc.errors import DivergenceError, ValidationError


@pytest.fixture(scope="module")
def tiny_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = synth.SynthConfig(n_patients=6, visits_per_eye=6,
                            visit_interval_days=30, scans_per_visit=2,
                            image_size=(64, 64), converter_fraction=0.5,
                            noise_sigma=0.05, seed=21)
    manifest, _ = synth.generate_cohort(cfg, out)
    return manifest


def tiny_configs(method="vicreg", **train_overrides):
    model_cfg = trainer.ModelConfig(encoder="mlp", representation_dim=16,
                                    projector_dims=(16, 16, 8),
                                    time_head_hidden=8, input_size=(16, 16))
    defaults = dict(method=method, batch_size=4, base_lr=1e-3,
                    weight_decay=1e-6, epochs=2, warmup_epochs=1, seed=0,
                    gap_range_days=(30, 150))
    defaults.update(train_overrides)
    return trainer.TrainConfig(**defaults), model_cfg


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_anchor_points():
    assert optim.lr_schedule(0, 100, 10, 2.0) == 0.0
    assert optim.lr_schedule(10, 100, 10, 2.0) == 2.0
    assert optim.lr_schedule(100, 100, 10, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert optim.lr_schedule(50, 100, 0, 2.0) == pytest.approx(1.0)


def test_lr_schedule_continuous_at_warmup():
    before = optim.lr_schedule(99, 1000, 100, 1.0)
    at = optim.lr_schedule(100, 1000, 100, 1.0)
    assert at - before == pytest.approx(1.0 / 100, abs=1e-12)


def test_lr_schedule_nonincreasing_after_warmup():
    values = [optim.lr_schedule(s, 200, 20, 1.0) for s in range(20, 201)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lr_schedule_rejects_bad_arguments():
    with pytest.raises(ValidationError, match="outside"):
        optim.lr_schedule(11, 10, 2, 1.0)
    with pytest.raises(ValidationError, match="warmup_steps"):
        optim.lr_schedule(0, 10, 10, 1.0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adam_three_step_recursion_matches_hand_computation():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    p = np.array([1.0, -2.0])
    grads = [np.array([0.5, -1.0]), np.array([0.25, 0.5]),
             np.array([-0.5, 0.1])]
    state = optim.init_adam_state([p])

    expected = p.copy()
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    for g in grads:
        optim.optimizer_step([p], [g], state, lr, 0.0)
    assert np.max(np.abs(p - expected)) <= 1e-12
    assert state["t"] == 3


def test_weight_decay_is_decoupled():
    p = np.array([2.0])
    state = optim.init_adam_state([p])
    for k in range(1, 4):
        optim.optimizer_step([p], [np.zeros(1)], state, 0.1, 0.01)
        assert p[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01) ** k, rel=1e-15)
    assert np.all(state["m"][0] == 0.0) and np.all(state["v"][0] == 0.0)


def test_optimizer_rejects_nonfinite_gradient():
    p = np.array([1.0])
    state = optim.init_adam_state([p])
    with pytest.raises(DivergenceError, match="non-finite gradient"):
        optim.optimizer_step([p], [np.array([np.nan])], state, 0.1, 0.0)


def test_adamw_zero_grad():
    param = nn.Parameter("w", np.ones(3))
    param.grad += 5.0
    opt = optim.AdamW([param])
    opt.zero_grad()
    assert np.all(param.grad == 0.0)


def test_adamw_state_tensor_roundtrip():
    param = nn.Parameter("w", np.ones(3))
    opt = optim.AdamW([param])
    param.grad[...] = 0.5
    opt.step(0.1)
    tensors = {k: v.copy() for k, v in opt.state_tensors().items()}

    fresh = optim.AdamW([nn.Parameter("w", np.ones(3))])
    fresh.load_state_tensors(tensors)
    assert fresh.state["t"] == 1
    assert np.array_equal(fresh.state["m"][0], opt.state["m"][0])
    assert np.array_equal(fresh.state["v"][0], opt.state["v"][0])


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------

def test_model_output_shapes():
    _, model_cfg = tiny_configs()
    model = trainer.TincModel(model_cfg, seed=0)
    x = np.random.default_rng(0).uniform(size=(5, 16, 16))
    y, z, _ = model.forward(x, training=False)
    assert y.shape == (5, 16)
    assert z.shape == (5, 8)


def test_duplicate_images_embed_identically():
    _, model_cfg = tiny_configs()
    model = trainer.TincModel(model_cfg, seed=1)
    x = np.random.default_rng(1).uniform(size=(4, 16, 16))
    x[1] = x[0]
    for training in (False, True):
        _, z, _ = model.forward(x, training)
        assert np.array_equal(z[0], z[1])
        assert not np.array_equal(z[0], z[2])


def test_eval_mode_is_chunking_invariant():
    _, model_cfg = tiny_configs()
    model = trainer.TincModel(model_cfg, seed=2)
    x = np.random.default_rng(2).uniform(size=(7, 16, 16))
    _, z_small = trainer.encode_images(model, x, batch_size=3)
    _, z_big = trainer.encode_images(model, x, batch_size=128)
    # matmul blocking may differ by batch shape, so allow rounding slack
    assert np.allclose(z_small, z_big, rtol=0, atol=1e-12)
    _, z_again = trainer.encode_images(model, x, batch_size=3)
    assert np.array_equal(z_small, z_again)


def test_batchnorm_rejects_singleton_training_batch():
    bn = nn.BatchNorm1d("bn", 4)
    with pytest.raises(ValidationError, match="batch size 1"):
        bn.forward(np.ones((1, 4)), training=True)


def test_model_config_validation():
    with pytest.raises(ValidationError, match="unknown encoder"):
        trainer.ModelConfig(encoder="resnet50").validate()
    with pytest.raises(ValidationError, match="projector_dims"):
        trainer.ModelConfig(projector_dims=(8, 8)).validate()


def test_train_config_validation():
    good, _ = tiny_configs()
    good.validate()
    with pytest.raises(ValidationError, match="unknown method"):
        tiny_configs(method="simclr")[0].validate()
    with pytest.raises(ValidationError, match="pair_mode"):
        tiny_configs(pair_mode="triplet")[0].validate()
    with pytest.raises(ValidationError, match="batch_size"):
        tiny_configs(batch_size=1)[0].validate()
    with pytest.raises(ValidationError, match="warmup_epochs"):
        tiny_configs(epochs=2, warmup_epochs=2)[0].validate()


def test_resolved_loss_variant_follows_method():
    assert tiny_configs("tinc")[0].resolved_loss().similarity_variant == "tinc"
    assert tiny_configs("vicreg")[0].resolved_loss().similarity_variant == "mse"
    squared = tiny_configs(
        "tinc", loss=losses.LossConfig(similarity_variant="tinc_squared"))[0]
    assert squared.resolved_loss().similarity_variant == "tinc_squared"
    downgraded = tiny_configs(
        "vicreg", loss=losses.LossConfig(similarity_variant="tinc"))[0]
    assert downgraded.resolved_loss().similarity_variant == "mse"


def test_epoch_chunks_absorb_trailing_singleton():
    assert trainer._epoch_chunks(7, 3) == [3, 4]
    assert trainer._epoch_chunks(5, 2) == [2, 3]
    assert trainer._epoch_chunks(2, 64) == [2]
    assert trainer._epoch_chunks(8, 4) == [4, 4]
    for n in range(2, 30):
        for bs in range(2, 10):
            chunks = trainer._epoch_chunks(n, bs)
            assert sum(chunks) == n and min(chunks) >= 2
    with pytest.raises(ValidationError, match="at least 2"):
        trainer._epoch_chunks(1, 4)


def test_same_scan_batch_has_zero_gap(tiny_cohort):
    pool = [(cohort.eye_id(p.id, e.laterality), p, e, None)
            for p, e in tiny_cohort.iter_eyes()]
    keys = [k for k, _, _, _ in pool]
    by_key = {k: (p, e, pairs) for k, p, e, pairs in pool}
    calls = []

    def augmenter(path, rng):
        calls.append(path)
        return np.full((8, 8), 0.5)

    batch = trainer._same_scan_batch(tiny_cohort, keys, by_key, seed=3,
                                     augmenter=augmenter)
    assert batch.x1.shape == (len(keys), 8, 8)
    assert np.all(batch.dv == 0.0) and np.all(batch.delta_signed == 0.0)
    assert batch.eye_ids == keys
    # both views of a pair come from the same scan path
    assert calls[0::2] == calls[1::2]


# ---------------------------------------------------------------------------
# Method step
# ---------------------------------------------------------------------------

def test_tinc_total_never_exceeds_vicreg_on_same_batch(tiny_cohort):
    train_cfg, model_cfg = tiny_configs("vicreg")
    model = trainer.TincModel(model_cfg, seed=4)
    rng = np.random.default_rng(4)
    batch = cohort.sample_pair_batch(tiny_cohort, 6, (30, 150), seed=5,
                                     augmenter=lambda p, r: rng.uniform(
                                         size=(16, 16)))
    mse_cfg = train_cfg.resolved_loss()
    tinc_cfg = tiny_configs("tinc")[0].resolved_loss()
    vic, *_ = trainer._method_step("vicreg", mse_cfg, 0.0, model, batch)
    tin, *_ = trainer._method_step("tinc", tinc_cfg, 0.0, model, batch)
    assert tin.invariance <= vic.invariance
    assert tin.variance == vic.variance
    assert tin.covariance == vic.covariance
    assert tin.total <= vic.total


def test_timehead_step_adds_weighted_extra(tiny_cohort):
    train_cfg, model_cfg = tiny_configs("vicreg_timehead")
    model = trainer.TincModel(model_cfg, seed=5, with_time_head=True)
    rng = np.random.default_rng(6)
    batch = cohort.sample_pair_batch(tiny_cohort, 6, (30, 150), seed=6,
                                     augmenter=lambda p, r: rng.uniform(
                                         size=(16, 16)))
    model.zero_grad()
    breakdown, extra, grads, _, _ = trainer._method_step(
        "vicreg_timehead", train_cfg.resolved_loss(), 0.5, model, batch)
    base = breakdown.invariance * 25.0 + breakdown.variance * 5.0 \
        + breakdown.covariance * 1.0
    assert extra is not None and extra > 0
    assert breakdown.total == pytest.approx(base + 0.5 * extra, rel=1e-12)
    head_params = model.time_head.parameters()
    assert any(np.any(p.grad != 0.0) for p in head_params)


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

def test_pretrain_writes_log_and_checkpoint(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("tinc")
    result = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                              out_dir=tmp_path)
    assert result.global_step == 2 * len(trainer._epoch_chunks(6, 4))
    assert [r["epoch"] for r in result.log] == [0, 1]
    for record in result.log:
        for key in ("invariance", "variance", "covariance", "total", "lr",
                    "embed_std"):
            assert np.isfinite(record[key])
        assert record["extra"] is None
    assert (tmp_path / "checkpoint.bin").exists()
    on_disk = trainer.read_loss_log(tmp_path / "losses.jsonl")
    assert on_disk == result.log


def test_pretrain_is_deterministic(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("vicreg")
    a = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                         out_dir=tmp_path / "a")
    b = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                         out_dir=tmp_path / "b")
    assert a.log == b.log
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == \
        (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_tinc_with_forced_zero_gap_matches_vicreg(tiny_cohort):
    vic_cfg, model_cfg = tiny_configs("vicreg")
    tin_cfg, _ = tiny_configs("tinc", force_zero_dv=True)
    vic = trainer.pretrain(tiny_cohort, vic_cfg, model_cfg)
    tin = trainer.pretrain(tiny_cohort, tin_cfg, model_cfg)
    for rv, rt in zip(vic.log, tin.log):
        assert rt["invariance"] == pytest.approx(rv["invariance"], rel=1e-12)
        assert rt["total"] == pytest.approx(rv["total"], rel=1e-12)
        assert rt["embed_std"] == pytest.approx(rv["embed_std"], rel=1e-12)
    for pv, pt in zip(vic.model.parameters(), tin.model.parameters()):
        assert np.allclose(pv.value, pt.value, rtol=0, atol=1e-12)


def test_resume_reproduces_uninterrupted_run(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("tinc", checkpoint_every=1)
    full = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                            out_dir=tmp_path / "full")
    mid = tmp_path / "full" / "checkpoint_epoch0001.bin"
    assert mid.exists()
    resumed = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                               out_dir=tmp_path / "resumed", resume_from=mid)
    assert resumed.log == full.log
    assert (tmp_path / "resumed" / "checkpoint.bin").read_bytes() == \
        (tmp_path / "full" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "resumed" / "losses.jsonl").read_bytes() == \
        (tmp_path / "full" / "losses.jsonl").read_bytes()


def test_resume_rejects_mismatched_config(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("tinc", checkpoint_every=1)
    trainer.pretrain(tiny_cohort, train_cfg, model_cfg, out_dir=tmp_path)
    other_cfg, _ = tiny_configs("tinc", checkpoint_every=1, base_lr=5e-4)
    with pytest.raises(ValidationError, match="does not match"):
        trainer.pretrain(tiny_cohort, other_cfg, model_cfg,
                         resume_from=tmp_path / "checkpoint_epoch0001.bin")


def test_pretrain_same_scan_mode(tiny_cohort):
    train_cfg, model_cfg = tiny_configs("vicreg", pair_mode="same_scan",
                                        epochs=1, warmup_epochs=0)
    result = trainer.pretrain(tiny_cohort, train_cfg, model_cfg)
    assert len(result.log) == 1
    assert np.isfinite(result.log[0]["total"])


def test_pretrain_max_steps_stops_early(tiny_cohort):
    train_cfg, model_cfg = tiny_configs("vicreg", max_steps=1)
    result = trainer.pretrain(tiny_cohort, train_cfg, model_cfg)
    assert result.global_step == 1
    assert result.log == []  # first epoch never completed


def test_pretrain_zero_epochs_saves_initial_model(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("vicreg", epochs=0, warmup_epochs=0)
    result = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                              out_dir=tmp_path)
    assert result.global_step == 0 and result.log == []
    model, loaded_train, loaded_model, step = trainer.load_model(
        tmp_path / "checkpoint.bin")
    assert step == 0
    assert loaded_model == model_cfg
    init = trainer.TincModel(model_cfg, train_cfg.seed)
    for lp, ip in zip(model.parameters(), init.parameters()):
        assert np.array_equal(lp.value, ip.value)


def test_pretrain_diverges_with_absurd_lr(tiny_cohort):
    train_cfg, model_cfg = tiny_configs("vicreg", base_lr=1e160,
                                        warmup_epochs=0, epochs=4,
                                        weight_decay=0.0)
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError, match="divergence detected"):
            trainer.pretrain(tiny_cohort, train_cfg, model_cfg)


def test_load_model_reproduces_training_embeddings(tiny_cohort, tmp_path):
    train_cfg, model_cfg = tiny_configs("tinc")
    result = trainer.pretrain(tiny_cohort, train_cfg, model_cfg,
                              out_dir=tmp_path)
    x = np.random.default_rng(7).uniform(size=(5, 16, 16))
    _, z_live = trainer.encode_images(result.model, x)
    loaded, *_ = trainer.load_model(tmp_path / "checkpoint.bin")
    _, z_loaded = trainer.encode_images(loaded, x)
    assert np.array_equal(z_live, z_loaded)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(8)
    tensors = {"param/a": rng.normal(size=(3, 4)),
               "param/b": rng.normal(size=(7,)),
               "adam.t": np.array([5], dtype=np.int64)}
    config = {"train": {"lr": 1e-3}, "model": {"dim": 4}}
    checkpoint.save_checkpoint(tmp_path / "c.bin", tensors, config, step=17)
    loaded, loaded_cfg, step = checkpoint.load_checkpoint(tmp_path / "c.bin")
    assert step == 17 and loaded_cfg == config
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == tensors[name].dtype


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValidationError, match="bad magic"):
        checkpoint.load_checkpoint(tmp_path / "bad.bin")


def test_checkpoint_rejects_truncated_tensor(tmp_path):
    checkpoint.save_checkpoint(tmp_path / "c.bin",
                               {"param/a": np.ones((4, 4))}, {}, 0)
    data = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-8])
    with pytest.raises(ValidationError, match="truncated"):
        checkpoint.load_checkpoint(tmp_path / "cut.bin")


def test_embedding_std_matches_numpy():
    z = np.random.default_rng(9).normal(size=(10, 4))
    assert trainer.embedding_std(z) == pytest.approx(
        np.std(z, axis=0, ddof=1).mean(), rel=1e-15)
