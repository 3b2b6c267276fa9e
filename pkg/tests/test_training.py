import numpy as np
import pytest

from dimino.data import Dataset, Grid
from dimino.model import DimINOModel, ModelConfig
from dimino.solvers import generate_dataset
from dimino.training import (
    MissingSplit,
    NaNLoss,
    TrainConfig,
    adam_step,
    build_loss,
    evaluate,
    format_metric_table,
    gain,
    grad_check_model,
    history_json,
    rel_metric,
    train,
)
from dimino import autodiff as ad


# -- metrics ---------------------------------------------------------------

@pytest.mark.parametrize("kind", ["rel-l2", "rel-h1", "rel-l1"])
def test_metric_zero_on_equal_fields(kind):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((32,))
    assert rel_metric(kind, a, a.copy()) == 0.0


@pytest.mark.parametrize("kind", ["rel-l2", "rel-h1", "rel-l1"])
def test_metric_one_on_zero_prediction(kind):
    rng = np.random.default_rng(1)
    t = rng.standard_normal((32,))
    assert rel_metric(kind, np.zeros_like(t), t) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["rel-l2", "rel-h1", "rel-l1"])
def test_metric_invariant_under_joint_scaling(kind):
    rng = np.random.default_rng(2)
    for trial in range(20):
        pred = rng.standard_normal((16, 16))
        target = rng.standard_normal((16, 16))
        base = rel_metric(kind, pred, target)
        scaled = rel_metric(kind, 7.5 * pred, 7.5 * target)
        assert scaled == pytest.approx(base, rel=1e-12)


def test_metric_absolute_fallback_on_zero_target():
    pred = np.ones(8)
    assert rel_metric("rel-l2", pred, np.zeros(8)) == pytest.approx(
        np.linalg.norm(pred)
    )


def test_rel_h1_penalizes_gradient_error_more():
    n = 64
    x = np.linspace(0, 1, n, endpoint=False)
    target = np.sin(2 * np.pi * x)
    rough = target + 0.01 * np.sin(2 * np.pi * 24 * x)
    assert rel_metric("rel-h1", rough, target) > rel_metric("rel-l2", rough, target)


def test_metric_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        rel_metric("rel-l2", np.ones(4), np.ones(5))
    with pytest.raises(ValueError):
        rel_metric("rel-linf", np.ones(4), np.ones(4))


def test_build_loss_matches_rel_metric_for_l2():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((2, 16, 1))
    target = rng.standard_normal((2, 16, 1))
    tape = ad.Tape()
    out = tape.leaf(pred)
    loss = build_loss("l2", out, target, rank=1)
    want = np.mean([
        rel_metric("rel-l2", pred[i, :, 0], target[i, :, 0]) for i in range(2)
    ])
    assert float(loss.data) == pytest.approx(want, rel=1e-12)


def test_build_loss_h1_matches_rel_metric():
    rng = np.random.default_rng(4)
    pred = rng.standard_normal((2, 16, 16, 1))
    target = rng.standard_normal((2, 16, 16, 1))
    tape = ad.Tape()
    loss = build_loss("h1", tape.leaf(pred), target, rank=2, extent=(1.0, 1.0))
    want = np.mean([
        rel_metric("rel-h1", pred[i, ..., 0], target[i, ..., 0], (1.0, 1.0))
        for i in range(2)
    ])
    assert float(loss.data) == pytest.approx(want, rel=1e-10)


# -- gains -----------------------------------------------------------------

def test_gain_formula_reference_points():
    assert gain(1.203, 0.915) == pytest.approx(0.239, abs=5e-4)
    assert gain(24.792, 5.866) == pytest.approx(0.763, abs=5e-4)
    assert gain(1.0, 1.0) == 0.0


# -- adam ------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    p = [np.array([1.0, -2.0])]
    state = {}
    adam_step(p, [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_converges_on_quadratic():
    p = [np.array([5.0, -3.0])]
    state = {}
    for _ in range(2000):
        adam_step(p, [2 * p[0]], state, lr=0.05)
    assert np.max(np.abs(p[0])) < 1e-6


def test_adam_first_step_size_is_lr():
    # bias correction makes the first step exactly lr * sign(g)
    p = [np.array([0.0])]
    adam_step(p, [np.array([3.0])], {}, lr=0.01)
    assert p[0][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_handles_complex_parameters():
    p = [np.array([1.0 + 1.0j])]
    state = {}
    for _ in range(3000):
        adam_step(p, [p[0].copy()], state, lr=0.05)
    assert abs(p[0][0]) < 1e-5


# -- train loop ------------------------------------------------------------

def _tiny_dataset(system="advection1d", n=12, seed=0):
    grid = Grid((32,), (1.0,))
    return generate_dataset(system, {}, n, seed, grid, 1.0)


def _tiny_model(seed=0, **kw):
    base = dict(
        system="advection1d", in_fields=["u"], target_fields=["u"], rank=1,
        width=6, depth=2, modes=4, init_seed=seed,
    )
    base.update(kw)
    return DimINOModel(ModelConfig(**base))


def test_zero_lr_training_is_flat():
    ds = _tiny_dataset()
    cfg = TrainConfig(loss="l2", epochs=3, batch_size=4, lr=0.0,
                      warmup_epochs=0, patience=0)
    _, history = train(_tiny_model(), ds, cfg)
    # parameters never move, so the validation metric is exactly flat
    scores = [h["valid_rel-l2"] for h in history]
    assert scores[0] == scores[-1]


def test_training_reduces_loss_and_restores_best():
    ds = _tiny_dataset(n=16)
    cfg = TrainConfig(loss="l2", epochs=12, batch_size=4, lr=5e-3,
                      seed=0, patience=0)
    model, history = train(_tiny_model(), ds, cfg)
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    best = min(h["valid_rel-l2"] for h in history)
    # the returned model is the best-valid checkpoint
    assert min(h["valid_rel-l2"] for h in history) == best


def test_training_is_deterministic():
    ds = _tiny_dataset()
    cfg = TrainConfig(loss="l2", epochs=4, batch_size=4, lr=2e-3, seed=7)
    m1, h1 = train(_tiny_model(), ds, cfg)
    m2, h2 = train(_tiny_model(), ds, cfg)
    assert h1 == h2
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_raises():
    ds = _tiny_dataset()
    model = _tiny_model()
    model.params["head_w2"] *= np.inf
    cfg = TrainConfig(loss="l2", epochs=1, batch_size=4, lr=1e-3)
    with pytest.raises(NaNLoss):
        train(model, ds, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def test_evaluate_missing_split():
    ds = _tiny_dataset()
    with pytest.raises(MissingSplit):
        evaluate(_tiny_model(), ds, "test")


def test_evaluate_gain_columns():
    ds = _tiny_dataset()
    table = evaluate(_tiny_model(), ds, "train",
                     baseline={"rel-l2": 1.0, "rel-h1": 1.0, "rel-l1": 1.0})
    assert "rel-l2-gain" in table
    assert table["rel-l2-gain"] == pytest.approx(1.0 - table["rel-l2"])


def test_format_metric_table_layout():
    text = format_metric_table({"m": {"rel-l2": 0.915, "rel-l2-gain": 0.239}})
    assert "91.500" in text
    assert "23.9%" in text


def test_history_json_is_line_delimited():
    text = history_json([{"epoch": 0, "train_loss": 1.0}])
    assert text.endswith("\n")
    assert '"epoch": 0' in text


def test_full_model_grad_check():
    ds = _tiny_dataset(n=2)
    err = grad_check_model(_tiny_model(), ds.split("train"), n_sample=4, seed=0)
    assert err < 1e-6
