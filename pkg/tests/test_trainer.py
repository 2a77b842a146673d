import json
from fractions import Fraction

import numpy as np
import pytest
import torch

from geossl.data import SyntheticConfig, synth_sequence
from geossl.trainer import (TrainSchedule, build_state, cosine_lr, fit, lambda_schedule, load_state,
                            prepare_frames, train_step)
from geossl.vit import load_checkpoint, preset

TINY = preset("tiny")


def _frames(n=4, seed=0):
    return synth_sequence(SyntheticConfig(height=16, width=32, n_timesteps=n, correlation_length=4, seed=seed))


def _log(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


# --- schedules ---------------------------------------------------------------


def _lambda_exact(e, E_w, E_p, ls):
    if e < E_w:
        return Fraction(1)
    if e < E_w + E_p:
        return 1 - Fraction(e - E_w, E_p) * (1 - Fraction(ls))
    return Fraction(ls)


def test_lambda_examples():
    assert lambda_schedule(0, 5, 20, 0.5) == 1.0
    assert lambda_schedule(15, 5, 20, 0.5) == 0.75
    assert lambda_schedule(25, 5, 20, 0.3) == 0.3
    assert lambda_schedule(400, 5, 20, 0.3) == 0.3
    assert lambda_schedule(0, 0, 1, 0.2) == 1.0


def test_lambda_random_triples_exact():
    rng = np.random.default_rng(0)
    for _ in range(200):
        E_w, E_p, ls = int(rng.integers(0, 30)), int(rng.integers(1, 40)), float(rng.random())
        prev = 2.0
        for e in range(E_w + E_p + 5):
            lam = lambda_schedule(e, E_w, E_p, ls)
            assert abs(lam - float(_lambda_exact(e, E_w, E_p, ls))) <= 1e-12
            assert ls - 1e-15 <= lam <= 1.0 and lam <= prev
            prev = lam


def test_lambda_validation():
    for bad in [(-1, 20, 0.5), (5, 0, 0.5), (5, 20, 1.5), (5, 20, -0.1)]:
        with pytest.raises(ValueError):
            lambda_schedule(0, *bad)
    with pytest.raises(ValueError):
        lambda_schedule(-1, 5, 20, 0.5)


def test_cosine_lr():
    assert cosine_lr(0, 100, 1e-3, 10) == 0.0
    assert cosine_lr(5, 100, 1e-3, 10) == pytest.approx(5e-4)
    assert cosine_lr(10, 100, 1e-3, 10) == 1e-3
    assert cosine_lr(55, 100, 1e-3, 10) == pytest.approx(5e-4, abs=1e-15)
    assert cosine_lr(100, 100, 1e-3, 10) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(0, 100, 1e-3, 0) == 1e-3
    vals = [cosine_lr(s, 100, 1e-3, 10) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_schedule_roundtrip_and_unknown_keys():
    s = TrainSchedule(E_w=2, E_p=3, lambda_star=0.25)
    assert TrainSchedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    with pytest.raises(ValueError):
        TrainSchedule.from_dict({"E_w": 1, "bogus": 2})
    with pytest.raises(ValueError):
        TrainSchedule(E_p=0)


# --- optimizer ---------------------------------------------------------------


def test_weight_decay_groups():
    state = build_state(TINY, TrainSchedule())
    decayed = {id(p) for p in state.optimizer.param_groups[0]["params"]}
    for name, p in state.named_trainables():
        no_decay = p.ndim < 2 or "token" in name
        assert (id(p) in decayed) != no_decay, name
    assert state.optimizer.param_groups[1]["weight_decay"] == 0.0


def test_adamw_matches_hand_computation():
    sch = TrainSchedule(weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8)
    state = build_state(TINY, sch, dtype=torch.float64)
    params = [p for _, p in state.named_trainables()]
    decays = {id(p): g["weight_decay"] for g in state.optimizer.param_groups for p in g["params"]}
    ref = [p.detach().numpy().copy() for p in params]
    m = [np.zeros_like(w) for w in ref]
    v = [np.zeros_like(w) for w in ref]
    lr = 3e-3
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    for t in (1, 2, 3):
        # gradient of the quadratic 0.5 * sum(a * w^2) with a = 0.7
        for p in params:
            p.grad = 0.7 * p.detach().clone()
        state.optimizer.step()
        for i, p in enumerate(params):
            g = 0.7 * ref[i]
            ref[i] = ref[i] * (1 - lr * decays[id(p)])
            m[i] = 0.9 * m[i] + 0.1 * g
            v[i] = 0.999 * v[i] + 0.001 * g * g
            mh = m[i] / (1 - 0.9 ** t)
            vh = v[i] / (1 - 0.999 ** t)
            ref[i] = ref[i] - lr * mh / (np.sqrt(vh) + 1e-8)
    for p, w in zip(params, ref):
        np.testing.assert_allclose(p.detach().numpy(), w, rtol=0, atol=1e-10)


# --- train_step ------------------------------------------------------------------


def test_train_step_convexity_warmup_and_views():
    sch = TrainSchedule(E_w=1, E_p=1, lambda_star=0.5, total_epochs=3, batch_size=2, seed=4)
    state = build_state(TINY, sch, steps_per_epoch=2)
    data = prepare_frames(_frames(), TINY)
    seen = []
    for epoch in range(3):
        state.epoch = epoch
        for k in range(2):
            state, lb = train_step(data[2 * k:2 * k + 2], state, sch, trace=seen.append)
            assert lb.lam == lambda_schedule(epoch, 1, 1, 0.5)
            assert lb.total == pytest.approx(lb.lam * lb.dino + (1 - lb.lam) * lb.mae, rel=1e-6)
            if lb.lam == 1.0:  # warm-up epoch and the first transition epoch
                assert lb.decoder_grad_norm == 0.0
            else:
                assert lb.decoder_grad_norm > 0.0
    n = TINY.n_patches
    for rec in seen:
        assert len(rec["teacher"]) == 2 and len(rec["student"]) == 2
        for views, ratio in ((rec["teacher"], 0.25), (rec["student"], 0.75)):
            for v in views:
                for hid, forced in zip(v, rec["forced"]):
                    assert hid.sum() == max(int(np.floor(ratio * n + 0.5)), forced.sum())
                    assert hid[forced].all()
        assert not np.array_equal(rec["student"][0], rec["student"][1])


def test_nonfinite_loss_raises_and_dumps(tmp_path):
    sch = TrainSchedule(total_epochs=1, batch_size=2)
    state = build_state(TINY, sch)
    state.dump_dir = tmp_path
    with torch.no_grad():
        state.model.encoder.patch_embed.weight.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        train_step(prepare_frames(_frames(2), TINY), state, sch)
    assert list(tmp_path.glob("nonfinite_step*.npz"))


def test_overfit_fixed_batch_reduces_mae():
    sch = TrainSchedule(E_w=0, E_p=1, lambda_star=0.1, total_epochs=200, batch_size=4, base_lr=2e-3,
                        lr_warmup_epochs=10, seed=0)
    state = build_state(TINY, sch, steps_per_epoch=1)
    data = prepare_frames(_frames(), TINY)
    maes = []
    for epoch in range(200):
        state.epoch = epoch
        state, lb = train_step(data, state, sch)
        maes.append(lb.mae)
    first = maes[0]
    assert np.mean(maes[-10:]) <= 0.1 * first


# --- fit ---------------------------------------------------------------------


def test_fit_zero_epochs_writes_initial_checkpoint(tmp_path):
    p = fit(None, TINY, TrainSchedule(total_epochs=0), tmp_path, frames=_frames(2))
    assert p.name == "ckpt_epoch0000.ckpt"
    assert (tmp_path / "metrics.jsonl").read_text() == ""
    assert sorted(x.name for x in tmp_path.glob("*.ckpt")) == ["ckpt_epoch0000.ckpt"]
    header, tensors = load_checkpoint(p)
    assert header["meta"]["step"] == 0
    assert {k.split("/")[0] for k in tensors} == {"student", "head", "teacher", "dino"}


def test_fit_log_and_checkpoint_namespaces(tmp_path):
    sch = TrainSchedule(E_w=1, E_p=1, total_epochs=3, batch_size=3, seed=1)
    p = fit(None, TINY, sch, tmp_path, frames=_frames(5))
    log = _log(tmp_path / "metrics.jsonl")
    assert len(log) == 3 * 2 and [r["step"] for r in log] == list(range(6))
    assert all(r["lambda"] == lambda_schedule(r["epoch"], 1, 1, 0.5) for r in log)
    assert {"step", "epoch", "lambda", "lr", "dino", "mae", "total", "teacher_entropy"} <= set(log[0])
    _, tensors = load_checkpoint(p)
    assert any(k.startswith("optim/student/") for k in tensors)
    assert json.loads((tmp_path / "latest.json").read_text())["epoch"] == 3


def test_fit_checkpoint_cadence(tmp_path):
    sch = TrainSchedule(total_epochs=5, batch_size=4)
    fit(None, TINY, sch, tmp_path, frames=_frames(4), checkpoint_every=2, keep_last=1)
    assert sorted(x.name for x in tmp_path.glob("*.ckpt")) == ["ckpt_epoch0000.ckpt", "ckpt_epoch0005.ckpt"]


def test_fit_deterministic_and_resume_equivalent(tmp_path):
    sch = TrainSchedule(E_w=1, E_p=2, total_epochs=4, batch_size=2, seed=9)
    frames = _frames(4)
    fit(None, TINY, sch, tmp_path / "a", frames=frames)
    fit(None, TINY, sch, tmp_path / "b", frames=frames)
    a, b = _log(tmp_path / "a" / "metrics.jsonl"), _log(tmp_path / "b" / "metrics.jsonl")
    assert a == b
    fit(None, TINY, sch, tmp_path / "c", frames=frames, stop_after_epoch=2)
    assert len(_log(tmp_path / "c" / "metrics.jsonl")) == 4
    fit(None, TINY, sch, tmp_path / "c", frames=frames, resume=tmp_path / "c" / "ckpt_epoch0002.ckpt")
    c = _log(tmp_path / "c" / "metrics.jsonl")
    assert len(c) == len(a)
    for ra, rc in zip(a, c):
        assert ra["step"] == rc["step"] and ra["lambda"] == rc["lambda"]
        for k in ("total", "dino", "mae", "lr"):
            assert rc[k] == pytest.approx(ra[k], rel=1e-6, abs=1e-12)


def test_resume_rejects_other_schedule(tmp_path):
    sch = TrainSchedule(total_epochs=1, batch_size=2)
    p = fit(None, TINY, sch, tmp_path, frames=_frames(2))
    with pytest.raises(ValueError):
        fit(None, TINY, TrainSchedule(total_epochs=2, batch_size=2), tmp_path, frames=_frames(2), resume=p)


def test_load_state_restores_everything(tmp_path):
    sch = TrainSchedule(total_epochs=2, batch_size=2)
    p = fit(None, TINY, sch, tmp_path, frames=_frames(2))
    state, cfg, sch2 = load_state(p)
    assert cfg == TINY and sch2 == sch and state.step == 2 and state.epoch == 2
    assert all(len(state.optimizer.state[p_]) == 3 for _, p_ in state.named_trainables())


def test_fit_rejects_mismatched_frames(tmp_path):
    frames = synth_sequence(SyntheticConfig(height=16, width=16, n_timesteps=2))
    with pytest.raises(ValueError):
        fit(None, TINY, TrainSchedule(total_epochs=1), tmp_path, frames=frames)
