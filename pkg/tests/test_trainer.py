import csv
import os

import numpy as np
import pytest

from hybridseg import nta
from hybridseg.data import as_arrays, generate_synthetic
from hybridseg.errors import ConfigError, IntegrityError, NonFiniteLossError, ResumeError, UsageError
from hybridseg.losses import all_metrics, binarize, confusion
from hybridseg.model import build_model, model_forward, preset
from hybridseg.params import ParameterStore
from hybridseg.tensor import Rng, Tensor
from hybridseg.trainer import (
    CSV_COLUMNS, TrainConfig, TrainState, adam_step, evaluate, fit, load_checkpoint, read_csv,
    save_checkpoint, train_epoch,
)

TINY = preset("desk", input_size=(32, 32), tap_channels=(4, 8, 16, 32), heads=4, ffn=32,
              transformer_blocks=1, decoder_channels=(16, 8, 8, 4))


@pytest.fixture(scope="module")
def data():
    return as_arrays(generate_synthetic(16, 32, seed=3)), as_arrays(generate_synthetic(6, 32, seed=4))


def scalar_store(value=1.0):
    s = ParameterStore()
    s.add("theta", np.array([value], dtype=np.float32))
    return s


def fresh_state(params):
    return TrainState.fresh(params, 0)


# -- config ------------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.epochs, c.learning_rate, c.beta1, c.beta2, c.adam_eps) == (8, 29, 1e-4, 0.9, 0.999, 1e-8)
    assert c.shuffle and c.checkpoint_every == 1


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(epochs=0), dict(learning_rate=-1.0), dict(checkpoint_every=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- adam --------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    s = scalar_store(0.37)
    st = fresh_state(s)
    before = s["theta"].data.copy()
    for t in range(1, 6):
        s["theta"].grad = np.zeros(1, np.float32)
        adam_step(s, st.m, st.v, t, TrainConfig())
    assert s["theta"].data.tobytes() == before.tobytes()


def test_adam_first_step_closed_form():
    s = scalar_store(1.0)
    st = fresh_state(s)
    s["theta"].grad = np.ones(1, np.float32)
    adam_step(s, st.m, st.v, 1, TrainConfig())
    assert s["theta"].data[0] == pytest.approx(1.0 - 1e-4, abs=1e-9)


def test_adam_quadratic_matches_float64_oracle():
    cfg = TrainConfig(learning_rate=0.1)
    s = scalar_store(1.0)
    st = fresh_state(s)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        s["theta"].grad = s["theta"].data.copy()  # d/dθ θ²/2
        adam_step(s, st.m, st.v, t, cfg)
        g = theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(float(s["theta"].data[0]) - theta) < 1e-6


def test_adam_missing_grad_names_parameter():
    s = scalar_store()
    s.add("alpha", np.zeros(2, np.float32))
    st = fresh_state(s)
    s["alpha"].grad = np.zeros(2, np.float32)
    with pytest.raises(UsageError, match="theta"):
        adam_step(s, st.m, st.v, 1, TrainConfig())


def test_adam_skips_buffers():
    s = scalar_store()
    s.add("running", np.ones(2, np.float32), trainable=False)
    st = fresh_state(s)
    assert list(st.m) == ["theta"]
    s["theta"].grad = np.ones(1, np.float32)
    adam_step(s, st.m, st.v, 1, TrainConfig())
    assert np.array_equal(s["running"].data, np.ones(2))


# -- epochs ------------------------------------------------------------------

def test_two_steps_per_epoch(data):
    (x, y), _ = data
    st = fresh_state(build_model(TINY, Rng(0)))
    train_epoch(st, x, y, TrainConfig())
    assert st.step == 2


def test_partial_batch_is_kept(data):
    (x, y), _ = data
    st = fresh_state(build_model(TINY, Rng(0)))
    rec = train_epoch(st, x[:11], y[:11], TrainConfig(batch_size=4))
    assert st.step == 3 and rec.epoch == 1
    assert rec.loss == pytest.approx(rec.bce + rec.dice_loss, abs=1e-6)


def test_zero_learning_rate_leaves_weights(data):
    (x, y), _ = data
    params = build_model(TINY, Rng(0))
    st = fresh_state(params)
    before = {n: params[n].data.copy() for n in params.trainable()}
    train_epoch(st, x, y, TrainConfig(learning_rate=0.0))
    for n, a in before.items():
        assert params[n].data.tobytes() == a.tobytes(), n


def test_epoch_is_deterministic(data):
    (x, y), _ = data
    runs = []
    for _ in range(2):
        st = fresh_state(build_model(TINY, Rng(0)))
        runs.append((train_epoch(st, x, y, TrainConfig()), st.params))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].equal(runs[1][1])


def test_empty_dataset_rejected():
    st = fresh_state(build_model(TINY, Rng(0)))
    with pytest.raises(UsageError):
        train_epoch(st, np.zeros((0, 3, 32, 32), np.float32), np.zeros((0, 1, 32, 32), np.float32), TrainConfig())


def test_non_finite_loss_reports_location(data):
    (x, y), _ = data
    params = build_model(TINY, Rng(0))
    params["head.weight"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match=r"epoch 1, batch 0.*bce="):
        train_epoch(fresh_state(params), x, y, TrainConfig())


# -- evaluation --------------------------------------------------------------

def test_zero_head_gives_zero_dice(data):
    _, (x, y) = data
    params = build_model(TINY, Rng(0))
    params["head.weight"].data[:] = 0
    params["head.bias"].data[:] = 0
    assert evaluate(params, x, y)["dice"] == 0.0


def test_evaluate_is_pure_and_matches_oracle(data):
    _, (x, y) = data
    params = build_model(TINY, Rng(1))
    a = evaluate(params, x[:2], y[:2])
    assert evaluate(params, x[:2], y[:2]) == a
    rows = []
    for i in range(2):
        prob = model_forward(Tensor(x[i:i + 1]), params, None, "eval").data[0]
        rows.append(all_metrics(confusion(binarize(prob), y[i].astype(np.uint8))))
    for k in ("dice", "iou", "precision", "recall"):
        assert a[k] == (rows[0][k] + rows[1][k]) / 2


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, data):
    (x, y), _ = data
    st = fresh_state(build_model(TINY, Rng(0)))
    train_epoch(st, x, y, TrainConfig())
    st.epoch = 1
    save_checkpoint(st, tmp_path / "c.nta", "abc")
    ck = load_checkpoint(tmp_path / "c.nta")
    assert ck.config_hash == "abc" and ck.model_config == TINY
    assert ck.state.params.equal(st.params)
    assert ck.state.step == st.step and ck.state.epoch == 1
    assert np.array_equal(ck.state.rng.get_state(), st.rng.get_state())
    for n in st.m:
        assert ck.state.m[n].tobytes() == st.m[n].tobytes()
        assert ck.state.v[n].tobytes() == st.v[n].tobytes()
    assert ck.state.rng.random(4).tobytes() == st.rng.random(4).tobytes()


def test_truncated_checkpoint(tmp_path):
    st = fresh_state(build_model(TINY, Rng(0)))
    p = tmp_path / "c.nta"
    save_checkpoint(st, p, "h")
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_fit_outputs(tmp_path, data):
    train, val = data
    fit(TINY, train, val, TrainConfig(epochs=1), tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 2
    assert sorted(os.listdir(tmp_path)) == ["best.nta", "ckpt_1.nta", "latest", "metrics.csv"]
    assert (tmp_path / "latest").read_text().strip() == "ckpt_1.nta"
    best = nta.read(tmp_path / "best.nta")
    assert "meta/model_config" in best and not any(k.startswith("opt/") for k in best)
    rec = read_csv(tmp_path / "metrics.csv")[0]
    assert rec.loss >= 0 and rec.bce >= 0 and 0 <= rec.dice_loss <= 1
    assert all(0 <= getattr(rec, k) <= 1 for k in ("dice", "iou", "precision", "recall"))


def test_split_run_equals_unsplit(tmp_path, data):
    train, val = data
    full = fit(TINY, train, val, TrainConfig(epochs=4), tmp_path / "a")
    fit(TINY, train, val, TrainConfig(epochs=2), tmp_path / "b")
    resumed = fit(TINY, train, val, TrainConfig(epochs=4), tmp_path / "b", resume=True)
    assert resumed.params.equal(full.params)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "best.nta").read_bytes() == (tmp_path / "b" / "best.nta").read_bytes()


def test_resume_rejects_other_config(tmp_path, data):
    train, val = data
    fit(TINY, train, val, TrainConfig(epochs=1), tmp_path)
    with pytest.raises(ResumeError, match="different configuration"):
        fit(TINY, train, val, TrainConfig(epochs=2, learning_rate=1e-3), tmp_path, resume=True)
    with pytest.raises(ResumeError):
        fit(TINY, (train[0][:8], train[1][:8]), val, TrainConfig(epochs=2), tmp_path, resume=True)


def test_resume_without_checkpoint(tmp_path, data):
    train, val = data
    with pytest.raises(ResumeError, match="nothing to resume"):
        fit(TINY, train, val, TrainConfig(epochs=1), tmp_path, resume=True)


def test_checkpoint_cadence(tmp_path, data):
    train, val = data
    fit(TINY, train, val, TrainConfig(epochs=3, checkpoint_every=2), tmp_path)
    assert sorted(f for f in os.listdir(tmp_path) if f.startswith("ckpt_")) == ["ckpt_2.nta", "ckpt_3.nta"]
