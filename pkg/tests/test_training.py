"""Loss, optimizer guarantees, checkpoint format, and loop reproducibility."""

import warnings

import numpy as np
import pytest

from dircn import metrics, network, training
from dircn.autodiff import Parameter, Tensor
from dircn.training import (Adam, Checkpoint, CheckpointError,
                            NonFiniteGradientError, TrainingDivergedError,
                            TrainSettings, build_model, load_checkpoint,
                            lr_schedule, save_checkpoint, train)

TINY = dict(cascades=1, levels=2, base_channels=4, sens_channels=2)


def _tiny_model(seed=0, preset="baseline", **overrides):
    config = network.preset_config(preset, **{**TINY, **overrides})
    return network.DIRCN(config, seed=seed)


def _settings(**kw):
    base = dict(epochs=2, slices_per_epoch=3, accelerations=(4,), seed=7, lr=1e-3)
    base.update(kw)
    return TrainSettings(**base)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_loss_is_zero_at_exact_reconstruction():
    rng = np.random.default_rng(0)
    target = np.abs(rng.standard_normal((16, 16)))
    loss = training.reconstruction_loss(Tensor(target), target, float(target.max()))
    assert loss.item() == 0.0


def test_loss_weighs_both_terms_equally():
    rng = np.random.default_rng(1)
    target = np.abs(rng.standard_normal((16, 16)))
    pred = target + 0.1 * rng.standard_normal((16, 16))
    dr = float(target.max())
    expected = 0.5 * (1.0 - metrics.ssim(pred, target, dr)) \
        + 0.5 * np.abs(pred - target).mean() / dr
    got = training.reconstruction_loss(Tensor(pred), target, dr).item()
    assert got == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_first_step_unit_gradient():
    p = Parameter(np.zeros(1))
    opt = Adam([("p", p)], lr=0.1, amsgrad=True)
    p.grad[:] = 1.0
    opt.step()
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-15)


def test_adam_rejects_duplicate_names():
    p, q = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    with pytest.raises(ValueError):
        Adam([("p", p), ("p", q)])


def test_adam_zero_gradient_is_a_no_op_from_rest():
    p = Parameter(np.full(3, 1.5))
    opt = Adam([("p", p)], lr=0.1)
    before = p.data.copy()
    for _ in range(3):
        p.grad[:] = 0.0
        opt.step()
    assert np.array_equal(p.data, before)


def test_adam_non_finite_gradient_mutates_nothing():
    p = Parameter(np.ones(2))
    q = Parameter(np.ones(2))
    opt = Adam([("p", p), ("q", q)], lr=0.1)
    p.grad[:] = 1.0
    q.grad[:] = 1.0
    opt.step()
    snap_p, snap_q = p.data.copy(), q.data.copy()
    snap_state = {k: v.copy() for k, v in opt.state_dict()["arrays"].items()}
    p.grad[:] = 1.0
    q.grad[:] = np.nan
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    assert np.array_equal(p.data, snap_p)
    assert np.array_equal(q.data, snap_q)
    after = opt.state_dict()["arrays"]
    assert all(np.array_equal(after[k], snap_state[k]) for k in snap_state)


def test_amsgrad_denominator_is_monotone():
    rng = np.random.default_rng(5)
    p = Parameter(np.zeros(4))
    opt = Adam([("p", p)], lr=0.01, amsgrad=True)
    prev = None
    for step in range(25):
        p.grad[:] = rng.standard_normal(4) * (10.0 if step % 7 == 0 else 0.1)
        opt.step()
        vmax = opt.state_dict()["arrays"]["vmax:p"]
        if prev is not None:
            assert (vmax >= prev - 1e-18).all()
        prev = vmax


def test_adam_state_round_trip():
    p = Parameter(np.ones(3))
    opt = Adam([("p", p)], lr=0.01)
    for _ in range(4):
        p.grad[:] = 0.3
        opt.step()
    state = opt.state_dict()
    q = Parameter(np.ones(3))
    opt2 = Adam([("p", q)], lr=0.01)
    opt2.load_state_dict(state)
    assert opt2.state_dict()["meta"]["step_count"] == 4
    with pytest.raises(CheckpointError, match="missing"):
        opt2.load_state_dict({"meta": state["meta"], "arrays": {}})


def test_lr_schedule_steps_down():
    assert lr_schedule(0.002, 0) == 0.002
    assert lr_schedule(0.002, 59) == 0.002
    assert lr_schedule(0.002, 60) == pytest.approx(0.0002)
    assert lr_schedule(0.002, 120) == pytest.approx(2e-5)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = _tiny_model(seed=3)
    opt = Adam(list(model.named_parameters()), lr=0.01)
    for _ in range(2):
        for _, p in model.named_parameters():
            p.grad[...] = 0.01
        opt.step()
    rng_state = np.random.default_rng(1).bit_generator.state
    path = tmp_path / "model.bin"
    save_checkpoint(path, model, epoch=5, optimizer=opt, rng_state=rng_state)

    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 5
    assert ckpt.config == model.config
    assert ckpt.rng_state == rng_state
    for name, value in model.state_dict().items():
        assert np.array_equal(ckpt.params[name], value), name
        assert ckpt.params[name].shape == value.shape, name
    restored = build_model(ckpt)
    for (n1, p1), (_, p2) in zip(model.named_parameters(), restored.named_parameters()):
        assert np.array_equal(p1.data, p2.data), n1


def test_checkpoint_preserves_scalar_parameter_shape(tmp_path):
    model = _tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model, epoch=0)
    ckpt = load_checkpoint(path)
    assert ckpt.params["cascades.0.dc.raw"].shape == ()


def test_checkpoint_rejects_corruption(tmp_path):
    model = _tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model, epoch=1)
    blob = path.read_bytes()

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)

    padded = tmp_path / "padded.bin"
    padded.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(padded)

    wrong_magic = tmp_path / "magic.bin"
    wrong_magic.write_bytes(b"NOTDIR" + blob[6:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(wrong_magic)

    wrong_version = tmp_path / "ver.bin"
    wrong_version.write_bytes(blob[:6] + b"\x63\x00\x00\x00" + blob[10:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(wrong_version)


def test_resume_rejects_different_architecture(tmp_path, tiny_dataset):
    model = _tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model, epoch=1)
    ckpt = load_checkpoint(path)
    other = _tiny_model(preset="dense", cascades=2)
    with pytest.raises(CheckpointError, match="config"):
        train(other, tiny_dataset, _settings(), resume=ckpt)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_training_is_deterministic(tiny_dataset):
    results = []
    for _ in range(2):
        model = _tiny_model(seed=1)
        out = train(model, tiny_dataset, _settings())
        results.append((model.state_dict(), [e.train_loss for e in out.history]))
    (state_a, hist_a), (state_b, hist_b) = results
    assert hist_a == hist_b
    assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)


def test_resume_matches_uninterrupted_run(tmp_path, tiny_dataset):
    straight = _tiny_model(seed=2)
    full = train(straight, tiny_dataset, _settings(epochs=4))

    part = _tiny_model(seed=2)
    out_dir = tmp_path / "run"
    train(part, tiny_dataset, _settings(epochs=2), out_dir=out_dir)
    ckpt = load_checkpoint(out_dir / "checkpoint.bin")
    resumed_model = build_model(ckpt)
    resumed = train(resumed_model, tiny_dataset, _settings(epochs=4), resume=ckpt)

    assert [e.epoch for e in resumed.history] == [2, 3]
    assert resumed.history[-1].train_loss == full.history[-1].train_loss
    state_a, state_b = straight.state_dict(), resumed_model.state_dict()
    assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)


def test_validation_size_does_not_perturb_training(tiny_dataset):
    final = []
    for limit in (1, 2):
        model = _tiny_model(seed=1)
        train(model, tiny_dataset, _settings(val_limit=limit))
        final.append(model.state_dict())
    a, b = final
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_epoch_sampling_cycles_before_repeating():
    pool = 7
    order = training._epoch_order(pool, pool * 2, np.random.default_rng(0))
    assert sorted(order[:pool]) == list(range(pool))
    assert sorted(order[pool:]) == list(range(pool))


def test_divergence_raises_and_keeps_last_checkpoint(tmp_path, tiny_dataset):
    model = _tiny_model(seed=1)
    out_dir = tmp_path / "run"
    with pytest.raises(TrainingDivergedError), np.errstate(all="ignore"), \
            warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        train(model, tiny_dataset, _settings(lr=1e200, epochs=3), out_dir=out_dir)
    ckpt = load_checkpoint(out_dir / "checkpoint.bin")
    restored = build_model(ckpt)
    assert restored.parameter_count() == model.parameter_count()


def test_history_written_as_csv(tmp_path, tiny_dataset):
    model = _tiny_model(seed=1)
    out_dir = tmp_path / "run"
    result = train(model, tiny_dataset, _settings(), out_dir=out_dir)
    lines = (out_dir / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss,steps"
    assert len(lines) == 1 + len(result.history)


def test_on_epoch_hook_sees_every_epoch(tiny_dataset):
    seen = []
    model = _tiny_model(seed=1)
    train(model, tiny_dataset, _settings(), on_epoch=lambda s: seen.append(s.epoch))
    assert seen == [0, 1]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_covers_split_and_accelerations(tiny_dataset):
    model = _tiny_model(seed=1)
    result = training.evaluate(model, tiny_dataset, split="test",
                               accelerations=(4, 8))
    n_test = len(tiny_dataset.ids("test"))
    assert len(result.records) == n_test * 2
    assert len(result.zero_filled) == n_test * 2
    agg = result.aggregates()
    assert agg["ALL"]["count"] == n_test * 2
    limited = training.evaluate(model, tiny_dataset, split="test",
                                accelerations=(4,), limit=1)
    assert len(limited.records) == 1
