import numpy as np
import pytest

import oracles
from saep.errors import ArgError, ShapeError
from saep.gradcheck import numeric_grad
from saep.projector import SaepConfig
from saep.tensor import Rng
from saep.train import (MARKER_AMPLITUDE, OptState, ProbeModel, adamw_step, cosine_lr, evaluate,
                        make_quadrant_batch, make_quadrant_task, marker_pattern, quadrant_of,
                        softmax_xent, train_probe)

SMALL = SaepConfig(h=8, w=8, c=8, k=2, stride=2, d=16)


# --- task --------------------------------------------------------------------

def test_quadrant_corners():
    assert quadrant_of(0, 0, 8, 8) == 0
    assert quadrant_of(0, 7, 8, 8) == 1
    assert quadrant_of(7, 0, 8, 8) == 2
    assert quadrant_of(7, 7, 8, 8) == 3


def test_samples_are_consistent():
    samples = make_quadrant_task(Rng(0), SMALL, 50)
    pattern = marker_pattern(SMALL.c)
    for s in samples:
        r, c = s.marked
        assert s.label == quadrant_of(r, c, 8, 8)
        for g in s.features.grids:
            assert g.shape == (8, 8, 8)
            # only the marked patch can leave the noise range [-1, 1)
            outside = np.argwhere(np.abs(g).max(axis=-1) > 1.0)
            assert outside.tolist() == [[r, c]]
            assert np.all(np.sign(g[r, c]) == np.sign(pattern))
    assert abs(pattern).max() == MARKER_AMPLITUDE


def test_task_deterministic():
    a = make_quadrant_task(Rng(5), SMALL, 4)
    b = make_quadrant_task(Rng(5), SMALL, 4)
    for x, y in zip(a, b):
        assert x.label == y.label
        assert all(np.array_equal(g, h) for g, h in zip(x.features.grids, y.features.grids))


def test_label_histogram_uniform():
    _, labels, _ = make_quadrant_batch(Rng(1), SMALL, 10_000)
    freq = np.bincount(labels, minlength=4) / 10_000
    # within 5% (relative) of the expected 1/4 share
    assert np.all(np.abs(freq - 0.25) <= 0.05 * 0.25)


def test_task_requires_even_grid():
    with pytest.raises(ArgError):
        make_quadrant_batch(Rng(0), SaepConfig(h=3, w=3, c=2, k=1, stride=3, d=2), 4)


# --- optimizer ---------------------------------------------------------------

def test_adamw_zero_gradient_fixed_point():
    p = {"w": np.array([0.5, -2.0], np.float32)}
    state = OptState(base_lr=0.1, horizon=10)
    out = adamw_step(p, {"w": np.zeros(2, np.float32)}, state)
    assert np.array_equal(out["w"], p["w"])


def test_adamw_first_step_closed_form():
    state = OptState(base_lr=0.1, horizon=100)
    out = adamw_step({"x": np.array([1.0])}, {"x": np.array([1.0])}, state)
    assert out["x"][0] == pytest.approx(0.9, abs=1e-8)
    state = OptState(base_lr=0.1, horizon=100)
    out = adamw_step({"x": np.array([1.0])}, {"x": np.array([-3.0])}, state)
    assert out["x"][0] == pytest.approx(1.1, abs=1e-8)


def test_adamw_matches_scalar_reimplementation():
    rng = np.random.default_rng(0)
    p0 = rng.uniform(-1, 1, 5).astype(np.float32)
    grads = rng.uniform(-2, 2, (10, 5))
    state = OptState(base_lr=0.05, horizon=10, weight_decay=0.1)
    params = {"p": p0.copy()}
    trace = []
    for g in grads:
        params = adamw_step(params, {"p": g.astype(np.float32)}, state)
        trace.append(params["p"].copy())
    for j in range(5):
        ref = oracles.adamw_scalar(float(p0[j]), [float(g) for g in grads[:, j].astype(np.float32)],
                                   0.05, 0.1, 10)
        assert max(abs(trace[t][j] - ref[t]) for t in range(10)) <= 1e-6


def test_adamw_weight_decay_contraction():
    p = {"w": np.array([1.5, -0.25, 3.0], np.float32)}
    state = OptState(base_lr=0.2, horizon=4, weight_decay=0.3)
    for step in range(1, 5):
        lr = cosine_lr(step, 0.2, 4)
        expected = (p["w"].astype(np.float64) * (1 - lr * 0.3)).astype(np.float32)
        p = adamw_step(p, {"w": np.zeros(3, np.float32)}, state)
        assert np.array_equal(p["w"], expected)
    assert state.step == 4


def test_adamw_shape_error():
    with pytest.raises(ShapeError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptState(base_lr=0.1, horizon=1))


def test_cosine_schedule():
    assert cosine_lr(1, 1e-3, 100) == 1e-3
    assert cosine_lr(51, 1e-3, 100) == pytest.approx(5e-4)
    assert cosine_lr(101, 1e-3, 100) == pytest.approx(0.0, abs=1e-18)
    lrs = [cosine_lr(t, 1.0, 20) for t in range(1, 22)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --- loss / probe ------------------------------------------------------------

def test_softmax_xent_gradient():
    rng = np.random.default_rng(3)
    z = rng.uniform(-3, 3, (5, 4))
    labels = np.array([0, 1, 2, 3, 1])
    loss, g = softmax_xent(z, labels)
    assert loss == pytest.approx(-np.mean(np.log(np.exp(z[np.arange(5), labels]) / np.exp(z).sum(1))))
    fd = numeric_grad(lambda: softmax_xent(z, labels)[0], z, 1e-4)
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_untrained_model_is_at_chance():
    r = train_probe(SMALL, 0, seed=0)
    assert abs(r.accuracy - 0.25) <= 0.05
    assert r.losses == []


def test_first_step_moves_loss():
    model = ProbeModel.init(SMALL, Rng(0))
    feats, labels, _ = make_quadrant_batch(Rng(1), SMALL, 64)
    _, before = evaluate(model, feats, labels)
    logits, cache = model.forward(feats)
    _, dlogits = softmax_xent(logits, labels)
    grads = model.backward(cache, dlogits)
    model.load_named(adamw_step(model.named_params(), grads, OptState(base_lr=1e-3, horizon=10)))
    _, after = evaluate(model, feats, labels)
    assert after != before


def test_short_training_is_deterministic(tmp_path):
    a = train_probe(SMALL, 30, seed=3, eval_samples=200)
    b = train_probe(SMALL, 30, seed=3, eval_samples=200)
    assert a.losses == b.losses
    assert a.accuracy == b.accuracy
    a.write_csv(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,accuracy"
    assert len(lines) == 31


def test_shuffle_backward_routes_gradients_to_original_tokens():
    # the permutation is a linear map; its adjoint must undo it exactly
    cfg = SaepConfig(h=4, w=4, c=2, k=1, stride=2, d=3)
    model = ProbeModel.init(cfg, Rng(0))
    model.probe_w = np.random.default_rng(0).uniform(-1, 1, model.probe_w.shape).astype(np.float32)
    feats, labels, _ = make_quadrant_batch(Rng(2), cfg, 2)
    perms = np.array([[3, 1, 0, 2], [0, 1, 2, 3]])
    logits, cache = model.forward(feats, perms)
    _, dlogits = softmax_xent(logits, labels)
    g_shuf = model.backward(cache, dlogits)["saep.mlp_b2"].copy()
    tokens_grad = (dlogits @ model.probe_w.T).reshape(2, 4, 3)
    unshuffled = np.zeros_like(tokens_grad)
    for b in range(2):
        for j, src in enumerate(perms[b]):
            unshuffled[b, src] = tokens_grad[b, j]
    np.testing.assert_allclose(g_shuf, unshuffled.sum(axis=(0, 1)), atol=1e-6)
