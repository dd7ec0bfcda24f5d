import math

import numpy as np
import pytest

from trajmoe import core, model, training
from trajmoe.config import TrainConfig
from trajmoe.core import ShapeError, Tensor
from trajmoe.features import pad_batch

from helpers import numeric_grad, rel_err, tiny_city, tiny_model


def test_predict_logits_matches_loops(rng):
    h, L = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4))
    got = training.predict_logits(Tensor(h), Tensor(L)).data
    for b in range(2):
        for t in range(3):
            for n in range(5):
                assert abs(got[b, t, n] - sum(h[b, t, j] * L[n, j] for j in range(4))) < 1e-12
    with pytest.raises(ShapeError):
        training.predict_logits(Tensor(h), Tensor(rng.normal(size=(5, 3))))


def test_orthogonal_state_gives_uniform_probabilities():
    h = Tensor(np.array([[[1.0, 0.0, 0.0]]]))
    L = Tensor(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 2.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]]))
    p = core.softmax(training.predict_logits(h, L)).data
    assert np.allclose(p, 0.25, atol=1e-15)
    big = Tensor(np.array([[0.0, 0.0, 0.0], [60.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    assert core.softmax(training.predict_logits(h, big)).data[0, 0, 1] == pytest.approx(1.0, abs=1e-20)


def _batch(rng, city, n_traj=4, T=6):
    from trajmoe.features import Trajectory

    trajs = []
    for u in range(n_traj):
        n = int(rng.integers(2, T + 1))
        trajs.append(Trajectory(city.city_id, u, rng.integers(0, city.num_locations, size=n),
                                1704067200 + np.cumsum(rng.integers(600, 9000, size=n))))
    return pad_batch(trajs, city, T)


def test_loss_at_initialization_is_near_log_n(rng):
    city = tiny_city(n=40, c=3)
    cfg = TrainConfig(T=6, model=tiny_model(d=16, heads=2))
    batch = _batch(rng, city, n_traj=16)
    loss = float(training.batch_loss(core.constants(model.init_params(cfg.model, 0)), batch, city, cfg).data)
    assert abs(loss - math.log(40)) < 0.2 * math.log(40)


def test_small_adamw_step_decreases_batch_loss(rng):
    city = tiny_city(n=8, c=3)
    cfg = TrainConfig(T=6, model=tiny_model(init_std=0.3))
    batch = _batch(rng, city)
    p = model.init_params(cfg.model, 2)
    before, grads = training.loss_and_grads(p, batch, city, cfg)
    p2, _ = core.adamw_step(p, grads, core.OptimizerState(lr=1e-3))
    after = float(training.batch_loss(core.constants(p2), batch, city, cfg).data)
    assert after < before


def test_soft_routing_pipeline_gradient_matches_finite_differences(rng):
    city = tiny_city(n=5, c=3)
    cfg = TrainConfig(T=4, model=tiny_model(routing="soft", init_std=0.3))
    batch = _batch(rng, city, n_traj=2, T=4)
    p = model.init_params(cfg.model, 0)
    _, grads = training.loss_and_grads(p, batch, city, cfg)
    for name in ("layer0.gate.router.w", "layer0.gate.time.b", "geo.cross.0.w", "emb.stay", "layer0.expert.w2"):
        fd = numeric_grad(lambda: float(training.batch_loss(core.constants(p), batch, city, cfg).data), p[name])
        assert rel_err(grads[name], fd) < 1e-5, name


def test_last_position_loss_mode(rng):
    city = tiny_city(n=6, c=3)
    batch = _batch(rng, city)
    cfg = TrainConfig(T=6, loss_positions="last", model=tiny_model())
    mask = training.loss_mask(batch, cfg)
    assert mask.sum(axis=1).tolist() == [1] * batch.size
    for i in range(batch.size):
        j = np.nonzero(mask[i])[0][0]
        assert batch.valid_target_mask[i, j] and not batch.valid_target_mask[i, j + 1:].any()


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    cfg = TrainConfig(T=6, model=tiny_model())
    ck = training.init_checkpoint(cfg)
    ck.meta["note"] = "x"
    path = training.save_checkpoint(ck, tmp_path / "c.zip")
    back = training.load_checkpoint(path)
    assert back.config == cfg and back.meta == ck.meta
    assert list(back.params) == list(ck.params)
    city = tiny_city(n=6, c=3)
    batch = _batch(rng, city)
    a, _ = training.batch_logits(core.constants(ck.params), batch, city, cfg)
    b, _ = training.batch_logits(core.constants(back.params), batch, city, cfg)
    assert np.array_equal(a.data, b.data)
    training.save_checkpoint(back, tmp_path / "d.zip")
    assert (tmp_path / "c.zip").read_bytes() == (tmp_path / "d.zip").read_bytes()


def test_corrupt_checkpoint_is_reported(tmp_path):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip")
    with pytest.raises(training.CheckpointError):
        training.load_checkpoint(bad)


def test_pretrain_reduces_loss_and_is_deterministic(small_data, small_train_cfg):
    a = training.pretrain(small_data, small_train_cfg)
    b = training.pretrain(small_data, small_train_cfg)
    assert a.meta["train_loss"][-1] < a.meta["initial_train_loss"]
    assert a.meta["train_loss"] == b.meta["train_loss"]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.meta["cities"] == [0, 1]


def test_pretrain_single_city_and_errors(small_data, small_train_cfg):
    one = training.pretrain(small_data[:1], small_train_cfg, max_steps=3)
    assert one.meta["cities"] == [0]
    with pytest.raises(ValueError):
        training.pretrain([], small_train_cfg)


def test_early_stopping_stops_after_patience(small_data, small_train_cfg):
    import dataclasses

    cfg = dataclasses.replace(small_train_cfg, lr=0.5, max_epochs=20, patience=1)
    ck = training.pretrain(small_data[:1], cfg)
    assert ck.meta["epochs_run"] < 20
    assert ck.meta["epochs_run"] - ck.meta["best_epoch"] == 1


def test_finetune_counts_and_noop(small_data, small_train_cfg):
    base = training.init_checkpoint(small_train_cfg)
    ds = small_data[1]
    same = training.finetune(base, ds, 1.0, epochs=0)
    assert all(np.array_equal(same.params[k], base.params[k]) for k in base.params)
    assert training.subsample_count(1000, 0.05) == 50
    assert training.subsample_count(1000, 0.01) == 10
    tuned = training.finetune(base, ds, 0.5, epochs=1)
    assert tuned.meta["history"][-1]["trajectories"] == training.subsample_count(len(ds.train), 0.5)
    assert any(not np.array_equal(tuned.params[k], base.params[k]) for k in base.params)
    with pytest.raises(ValueError):
        training.finetune(base, ds, 1e-6)
    with pytest.raises(ValueError):
        training.finetune(base, ds, 1.5)
