import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from dcseg import checkpoint as ckpt
from dcseg import contrastive as con
from dcseg import segloss, synth, trainer
from dcseg.model import ToyNetConfig, init_params, model_forward, param_shapes
from dcseg.optim import OptimizerState, adam_step, cosine_lr

TINY = ToyNetConfig(height=16, width=16, widths=(4, 6, 8), num_classes=6, d_proj=4, d_pix=4)
TINY_TRAIN = trainer.TrainConfig(batch_size=2, epochs=1, crop=12, anchor_cap=6, sigma_edt=3.0)


@pytest.fixture(scope="module")
def tiny_dataset():
    scenes = synth.generate_dataset(0, {"train": 2, "val": 1}, resolution=16)
    return synth.Dataset(None, synth.manifest_for(scenes), scenes)


@pytest.fixture(scope="module")
def tiny_table(tiny_dataset):
    return trainer.frequency_table(tiny_dataset)


def make_batch(seed, distinct=False):
    rng = np.random.default_rng(seed)
    conds = [0, 1] if distinct else [int(rng.integers(4))] * 2
    sources = [synth.apply_condition(synth.generate_scene((seed, k), synth.GeometryConfig(16, 16)), c, seed)
               for k, c in enumerate(conds)]
    return synth.build_multiview_batch(sources, seed, crop=12, out_size=16)


# optimizer and schedule

def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_sign():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    adam_step(p, {"w": np.array([0.3, -5.0, 2e-3])}, OptimizerState.zeros_like(p), 0.01)
    np.testing.assert_allclose(p["w"], [0.99, 1.01, 0.99], atol=1e-7)


def test_adam_quadratic():
    p = {"x": np.array([1.0])}
    state = OptimizerState.zeros_like(p)
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, state, 0.1)
    assert abs(p["x"][0]) < 0.05


def test_adam_decay_modes_differ():
    a, b = {"w": np.ones(2)}, {"w": np.ones(2)}
    g = {"w": np.array([1e-3, -1e-3])}
    adam_step(a, g, OptimizerState.zeros_like(a), 0.1, weight_decay=0.5)
    adam_step(b, g, OptimizerState.zeros_like(b), 0.1, weight_decay=0.5, decoupled=True)
    assert not np.allclose(a["w"], b["w"])


def test_cosine_schedule():
    assert cosine_lr(0, 100) == 4e-4
    assert cosine_lr(100, 100) == 1e-6
    assert cosine_lr(50, 100) == pytest.approx(2.005e-4, abs=1e-15)
    assert cosine_lr(150, 100) == 1e-6


# objective

def test_combined_loss_values():
    assert trainer.TrainConfig(batch_size=8).lambda_c == 0.125
    assert trainer.combined_loss(0.0, 0.0, 1.0, 8, 1.2) == pytest.approx(1.2, abs=1e-15)
    assert trainer.combined_loss(4.0, 4.0, 1.0, 8, 1.2) == pytest.approx(2.2, abs=1e-15)
    with pytest.raises(trainer.TrainError, match="L_pixel"):
        trainer.combined_loss(1.0, math.nan, 1.0, 8)


def test_modes_resolve():
    assert trainer.TrainConfig(loss_mode="g").loss_mode == "focal+image+pixel"
    assert trainer.TrainConfig(loss_mode="a").loss_mode == "ce"
    with pytest.raises(trainer.TrainError):
        trainer.TrainConfig(loss_mode="z")


def independent_total(params, batch, cfg, model_cfg, table, seed):
    out = model_forward(params, batch.images, model_cfg)
    logits = out.logits.data
    seg = 0.0
    for sl in (slice(0, None, 2), slice(1, None, 2)):
        if cfg.loss_mode == "ce":
            seg += segloss.cross_entropy_baseline(logits[sl], batch.labels[sl]).loss / 2
        else:
            delta = np.stack([segloss.build_weight_maps(l, table, cfg.sigma_edt, cfg.eps).delta
                              for l in batch.labels[sl]])
            seg += segloss.focal_seg_loss(logits[sl], batch.labels[sl], delta, cfg.gamma).loss / 2
    image = pixel = 0.0
    emb = con.EmbeddingBatch(out.image_embedding.data, batch.conditions, cfg.temperature)
    if "image" in cfg.parts:
        image = con.image_supcon(emb).loss
    elif "self" in cfg.parts:
        image = con.self_contrast(emb).loss
    if "pixel" in cfg.parts:
        lab = batch.labels[:, 2::4, 2::4]
        pix, _ = con.sample_pixel_anchors(out.pixel_embeddings.data, lab, cfg.anchor_cap, seed)
        pixel = con.pixel_supcon(pix, cfg.temperature).loss
    return trainer.combined_loss(image, pixel, seg, cfg.batch_size, cfg.lambda_s)


@pytest.mark.parametrize("mode", list(trainer.LOSS_MODES))
def test_objective_consistency(mode, tiny_table):
    cfg = replace(TINY_TRAIN, loss_mode=mode)
    params = init_params(TINY, 1)
    batch = make_batch(3)
    res = trainer.objective(params, batch, cfg, TINY, tiny_table, 5)
    assert abs(res.components["total"] - independent_total(params, batch, cfg, TINY, tiny_table, 5)) <= 1e-12


def test_mode_f_equals_g_on_distinct_conditions(tiny_table):
    params = init_params(TINY, 2)
    for seed in range(5):
        batch = make_batch(seed, distinct=True)
        g = trainer.objective(params, batch, replace(TINY_TRAIN, loss_mode="g"), TINY, tiny_table, seed)
        f = trainer.objective(params, batch, replace(TINY_TRAIN, loss_mode="f"), TINY, tiny_table, seed)
        assert abs(g.components["total"] - f.components["total"]) <= 1e-12


def test_gradient_step_descends(tiny_table):
    rng = np.random.default_rng(0)
    cfg = replace(TINY_TRAIN, loss_mode="g")
    wins = 0
    for trial in range(20):
        params = init_params(TINY, trial)
        batch = make_batch(100 + trial)
        res, grads = trainer.loss_and_grads(params, batch, cfg, TINY, tiny_table, trial)
        lr = float(rng.uniform(1e-5, 1e-4))
        stepped = {k: v - lr * grads[k] for k, v in params.items()}
        after = trainer.objective(stepped, batch, cfg, TINY, tiny_table, trial).components["total"]
        wins += after < res.components["total"]
    assert wins >= 19


def test_every_param_gets_finite_gradient(tiny_table):
    _, grads = trainer.loss_and_grads(init_params(TINY, 0), make_batch(1), replace(TINY_TRAIN, loss_mode="g"),
                                      TINY, tiny_table, 0)
    assert set(grads) == set(param_shapes(TINY))
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert all(np.any(g != 0) for g in grads.values())


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    params = init_params(TINY, 0)
    state = OptimizerState.zeros_like(params)
    adam_step(params, {k: np.ones_like(v) for k, v in params.items()}, state, 1e-3)
    cfg = {"train": TINY_TRAIN.to_dict(), "model": TINY.to_dict()}
    ckpt.save_checkpoint(tmp_path / "a.bin", params, cfg, state)
    loaded, st, digest = ckpt.load_checkpoint(tmp_path / "a.bin", param_shapes(TINY))
    ckpt.save_checkpoint(tmp_path / "b.bin", loaded, digest, st)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert st.t == 1 and digest == ckpt.config_hash(cfg)


def test_fresh_init_bytes(tmp_path):
    params = init_params(TINY, 4)
    ckpt.save_checkpoint(tmp_path / "c.bin", params, b"\0" * 32)
    loaded, st, _ = ckpt.load_checkpoint(tmp_path / "c.bin")
    assert st is None
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.bin"
    ckpt.save_checkpoint(path, init_params(TINY, 0), b"\0" * 32)
    other = replace(TINY, num_classes=4)
    with pytest.raises(ckpt.CheckpointError, match="cls.w"):
        ckpt.load_checkpoint(path, param_shapes(other))
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ckpt.CheckpointError, match="bad magic"):
        ckpt.load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "v2.bin").write_bytes(b"DCSEG002" + raw[8:])
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load_checkpoint(tmp_path / "v2.bin")
    (tmp_path / "short.bin").write_bytes(raw[:200] + raw[-32:])
    with pytest.raises(ckpt.CheckpointError, match="offset"):
        ckpt.load_checkpoint(tmp_path / "short.bin")


# training loop

def test_train_deterministic(tmp_path, tiny_dataset):
    cfg = replace(TINY_TRAIN, loss_mode="b", epochs=1)
    trainer.train(cfg, TINY, tiny_dataset, tmp_path / "a")
    trainer.train(cfg, TINY, tiny_dataset, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.decode().splitlines()[0] == ",".join(trainer.METRICS_HEADER)
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_train_warm_start(tmp_path, tiny_dataset):
    cfg = replace(TINY_TRAIN, loss_mode="g", epochs=1)
    first = trainer.train(cfg, TINY, tiny_dataset, tmp_path / "pre")
    warm = trainer.train(replace(cfg, epochs=0, pretrain_checkpoint=str(tmp_path / "pre" / "checkpoint.bin")),
                         TINY, tiny_dataset)
    assert all(np.array_equal(first.params[k], warm.params[k]) for k in first.params)
    with pytest.raises(ckpt.CheckpointError, match="enc3a.w"):
        trainer.train(replace(cfg, pretrain_checkpoint=str(tmp_path / "pre" / "checkpoint.bin")),
                      replace(TINY, widths=(4, 6, 10)), tiny_dataset)


def test_frequency_cache(tmp_path, caplog):
    scenes = synth.generate_dataset(0, {"train": 1, "val": 1}, resolution=16)
    synth.write_dataset(tmp_path, scenes)
    ds = synth.read_dataset(tmp_path)
    with caplog.at_level(logging.WARNING):
        t1 = trainer.frequency_table(ds)
    assert "computing" in caplog.text and (tmp_path / "freq_cache.json").is_file()
    caplog.clear()
    with caplog.at_level(logging.WARNING):
        t2 = trainer.frequency_table(ds)
    assert caplog.text == "" and t2.counts.tolist() == t1.counts.tolist()


@pytest.mark.slow
def test_training_loss_decreases():
    scenes = synth.generate_dataset(0, {"train": 8, "val": 1}, resolution=32)
    ds = synth.Dataset(None, synth.manifest_for(scenes), scenes)
    model_cfg = ToyNetConfig(height=32, width=32, widths=(8, 16, 32), d_proj=8, d_pix=8)
    drops = 0
    for seed in range(5):
        cfg = trainer.TrainConfig(loss_mode="b", epochs=20, batch_size=8, crop=24, seed=seed)
        rows = trainer.train(cfg, model_cfg, ds).rows
        drops += rows[19]["train_loss"] < rows[0]["train_loss"]
    assert drops >= 4
