import csv

import numpy as np
import pytest

from retext import match_losses as ml
from retext import tensor_engine as te
from retext import trainer as tr
from retext.config import TrainConfig
from retext.datakit import generate_corpus
from retext.errors import CheckpointError, ConfigError, NonFiniteLossError
from retext.gradcheck import TINY_TRAIN
from retext.sampling import BatchSampler

TINY = dict(TINY_TRAIN, epochs=2, warmup_epochs=1, lr=1e-2)


@pytest.fixture(scope="module")
def data():
    multi = generate_corpus(4, 2, 2, "source", seed=0, height=16, width=8)
    single = generate_corpus(6, 1, 2, "single", seed=1, with_captions=True, height=16, width=8, id_offset=100)
    return multi, single


def tiny(**changes):
    return TrainConfig(**dict(TINY, **changes))


def first_batch(cfg, data):
    return BatchSampler(*data, tr.sampler_config(cfg)).batch(0, 0)


def snapshot(params):
    return {k: v.data.copy() for k, v in params.items()}


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, warmup_epochs=10)
    assert tr.lr_at(0, cfg, 24) == 0.0
    assert tr.lr_at(240, cfg, 24) == 1e-3
    assert tr.lr_at(120, cfg, 24) == pytest.approx(5e-4, rel=1e-15)
    assert tr.lr_at(10_000, cfg, 24) == 1e-3
    lrs = [tr.lr_at(s, cfg, 24) for s in range(300)]
    assert all(b >= a for a, b in zip(lrs, lrs[1:]))
    assert tr.lr_at(0, TrainConfig(warmup_epochs=0), 24) == TrainConfig().lr


def test_adamw_zero_lr_is_a_no_op():
    p = te.parameter(np.arange(4.0))
    opt = tr.AdamW({"p": p}, weight_decay=0.02)
    p.grad = np.ones(4)
    opt.step(0.0)
    assert np.array_equal(p.data, np.arange(4.0))


def test_adamw_matches_closed_form_first_step():
    p = te.parameter(np.array([1.0, -2.0]))
    opt = tr.AdamW({"p": p}, weight_decay=0.1)
    p.grad = np.array([0.5, -3.0])
    opt.step(0.01)
    # first bias-corrected step is sign(g) (up to eps); decay is lr * wd * p
    expected = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * np.sign(p.grad) * (np.abs(p.grad) / (np.abs(p.grad) + 1e-8))
    assert np.allclose(p.data, expected, rtol=0, atol=1e-15)


def test_all_tasks_off_is_a_no_op(data):
    cfg = tiny(reid=False, itm=False, ir=False)
    state = tr.TrainState.create(cfg)
    before = snapshot(state.model.all_params())
    report = tr.train_step(first_batch(cfg, data), state, 4)
    assert report["total"] == 0.0
    for k, v in state.model.all_params().items():
        assert np.array_equal(v.data, before[k])


def test_total_is_sum_of_components(data):
    cfg = tiny()
    losses = tr.forward_losses(first_batch(cfg, data), tr.TrainState.create(cfg))
    assert set(losses.components) == {"L_reid", "L_im", "L_sp", "L_mse", "L_cos"}
    assert abs(losses.total.item() - sum(v.item() for v in losses.components.values())) <= 1e-10


def test_reid_only_total_equals_reid_bitwise(data):
    cfg = tiny(itm=False, ir=False)
    losses = tr.forward_losses(first_batch(cfg, data), tr.TrainState.create(cfg))
    assert list(losses.components) == ["L_reid"]
    assert losses.total.item() == losses.components["L_reid"].item()


def test_component_values_match_independent_calls(data):
    cfg = tiny(ir=False, reid=False)
    state = tr.TrainState.create(cfg)
    batch = first_batch(cfg, data)
    got = tr.forward_losses(batch, state).values()
    m = state.model
    from retext.encoders import encode_captions, project
    with te.no_grad():
        _, cls = m.image.forward(np.stack([r.image for r in batch.single]))
        _, tcls, _ = m.text.forward(encode_captions([r.caption for r in batch.single], m.vocab, cfg.text_max_len))
        mb = ml.MatchBatch.from_projections(project(cls, m.w_img)[0], project(tcls, m.w_txt)[0],
                                            batch.single_part.labels)
        assert abs(got["L_im"] - ml.identity_aware_matching_loss(mb, cfg.alpha).item()) <= 1e-10
        assert abs(got["L_sp"] - ml.structure_preserving_loss(mb, cfg.tau_sp).item()) <= 1e-10


@pytest.mark.parametrize("toggles,silent,live", [
    (dict(reid=False, itm=True, ir=False), ("decoder.",), ("w_txt", "w_img", "text.tok")),
    (dict(reid=False, itm=False, ir=True), ("w_txt", "w_img"), ("decoder.pixel.w", "text.tok")),
    (dict(reid=True, itm=False, ir=False), ("decoder.", "w_txt", "text."), ("w_img",)),
    (dict(), (), ("w_img", "w_txt", "decoder.pixel.w")),
])
def test_gradient_flow_partition(data, toggles, silent, live):
    cfg = tiny(**toggles)
    state = tr.TrainState.create(cfg)
    tr.forward_losses(first_batch(cfg, data), state).total.backward()
    params = state.model.all_params()
    for k, v in params.items():
        if k.startswith("momentum.") or k.startswith(silent):
            assert v.grad is None or not np.any(v.grad), k
    for k in live:
        assert params[k].grad is not None and np.any(params[k].grad), k


def test_momentum_untouched_by_backward_over_an_epoch(data):
    cfg = tiny()
    trainer = tr.Trainer(cfg, *data)
    mom = trainer.state.model.momentum.params
    for step in range(trainer.steps_per_epoch):
        batch = trainer.sampler.batch(0, step)
        before = snapshot(mom)
        losses = tr.forward_losses(batch, trainer.state)
        trainer.state.optimizer.zero_grad()
        losses.total.backward()
        for k, v in mom.items():
            assert v.grad is None and np.array_equal(v.data, before[k])
        tr.apply_update(trainer.state, 1e-2)
        trainer.state.global_step += 1


def test_determinism(data):
    runs = [tr.run(tiny(), *data).log for _ in range(2)]
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = tiny(epochs=3)
    full = tr.run(cfg, *data, out_dir=tmp_path / "a").log

    class Stop(Exception):
        pass

    def interrupt(row):
        if row["step"] == 6:  # mid-epoch 2; last checkpoint is the end of epoch 1
            raise Stop
    with pytest.raises(Stop):
        tr.run(cfg, *data, out_dir=tmp_path / "b", on_step=interrupt)
    resumed = tr.run(cfg, *data, out_dir=tmp_path / "b").log
    assert len(resumed) == len(full)
    for a, b in zip(full, resumed):
        for col in tr.LOG_COLUMNS:
            assert abs(float(a[col]) - float(b[col])) <= 1e-12
    rows = list(csv.DictReader((tmp_path / "b" / "loss_log.csv").open()))
    assert [int(r["step"]) for r in rows] == list(range(len(full)))


def test_checkpoint_round_trip(tmp_path, data):
    cfg = tiny()
    trainer = tr.Trainer(cfg, *data)
    for _ in range(3):
        trainer.step()
    path = tr.save_checkpoint(trainer.state, tmp_path / "x.ckpt")
    loaded = tr.load_checkpoint(path)
    for k, v in trainer.state.model.all_params().items():
        assert np.array_equal(v.data, loaded.model.all_params()[k].data)
    for k in trainer.state.optimizer.m:
        assert np.array_equal(trainer.state.optimizer.m[k], loaded.optimizer.m[k])
    assert (loaded.epoch, loaded.step, loaded.global_step, loaded.optimizer.t) == (0, 3, 3, 3)
    twin = tr.Trainer(cfg, *data, loaded)
    for _ in range(5):
        assert trainer.step() == twin.step()


def test_checkpoint_corruption_detected(tmp_path, data):
    cfg = tiny()
    path = tr.save_checkpoint(tr.TrainState.create(cfg), tmp_path / "x.ckpt")
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        tr.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        tr.load_checkpoint(tmp_path / "junk.ckpt")


def test_resume_rejects_other_config(tmp_path, data):
    tr.run(tiny(epochs=1, warmup_epochs=0), *data, out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        tr.run(tiny(epochs=1, warmup_epochs=0, lr=0.5), *data, out_dir=tmp_path)


def test_non_finite_loss_is_attributed(data, monkeypatch):
    cfg = tiny()
    monkeypatch.setattr(tr.ml, "structure_preserving_loss", lambda *a, **k: te.constant(float("nan")))
    with pytest.raises(NonFiniteLossError, match="L_sp"):
        tr.forward_losses(first_batch(cfg, data), tr.TrainState.create(cfg))


def test_reid_without_multi_part_is_a_config_error(data):
    cfg = tiny()
    batch = first_batch(cfg, data)
    batch.multi = []
    with pytest.raises(ConfigError):
        tr.forward_losses(batch, tr.TrainState.create(cfg))


def test_single_camera_placement_trains(data):
    cfg = tiny(use_multi=False, reid_placement="all")
    losses = tr.forward_losses(first_batch(cfg, data), tr.TrainState.create(cfg))
    assert np.isfinite(losses.components["L_reid"].item())


def test_log_file(tmp_path, data):
    res = tr.run(tiny(epochs=1, warmup_epochs=1), *data, out_dir=tmp_path)
    rows = list(csv.DictReader((tmp_path / "loss_log.csv").open()))
    assert tuple(rows[0]) == tr.LOG_COLUMNS and len(rows) == len(res.log) == 4
    lrs = [float(r["lr"]) for r in rows]
    assert lrs[0] == 0.0 and all(b >= a for a, b in zip(lrs, lrs[1:]))
