import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from attkws import layers as L
from attkws.models import (CheckpointError, ConvSpec, ModelConfig, attend_average, attend_soft, attention_scores,
                           build_model, count_params, deep_kws_confidence, deep_kws_posteriors, detect_score,
                           dnn_baseline_config, encoder_forward, frame_targets, load_checkpoint,
                           loss_and_grads, e2e_config, param_shapes, save_checkpoint, smooth_posteriors,
                           stack_context, window_scores)
from attkws.numerics import grad_check, make_rng
from oracles import brute_confidence, brute_trailing_mean, naive_conv, naive_gru, naive_lstm, naive_softmax


def tiny(encoder="gru", attention="soft", layers=2, nodes=3, **kw):
    conv = ConvSpec(out_channels=2, time_kernel=3, freq_kernel=3) if encoder == "crnn" else None
    return ModelConfig(encoder=encoder, layers=layers, nodes=nodes, attention=attention, input_dim=6, conv=conv,
                       projection_width=4, **kw)


def f64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


# -- configuration and counts -----------------------------------------------

@pytest.mark.parametrize("cfg,expected", [
    (e2e_config("gru", 2, 64, "soft"), 53442),
    (e2e_config("lstm", 2, 64, "soft"), 64258),
    (e2e_config("gru", 2, 64, "average"), 49218),
    (e2e_config("gru", 1, 128, "soft"), 77506),
    (e2e_config("crnn", 1, 64, "soft", channels=16), 84050),
    (dnn_baseline_config(), 62469),
])
def test_count_examples(cfg, expected):
    assert count_params(cfg) == expected


@pytest.mark.parametrize("cfg", [
    e2e_config("gru", 2, 64), e2e_config("lstm", 3, 64), e2e_config("lstm", 1, 128, "average"),
    e2e_config("crnn", 2, 64, channels=8), dnn_baseline_config(), tiny("crnn"), tiny("lstm", "average"),
])
def test_build_matches_count(cfg):
    params = build_model(cfg, make_rng(0))
    assert sum(p.size for p in params.values()) == count_params(cfg)
    assert {k: p.shape for k, p in params.items()} == param_shapes(cfg)
    assert all(p.dtype == np.float32 for p in params.values())
    for k, p in params.items():
        if k.endswith(".b") or k.endswith(".bias"):
            assert not p.any()


def test_build_deterministic():
    cfg = e2e_config("gru", 2, 64)
    a, b = build_model(cfg, make_rng(5)), build_model(cfg, make_rng(5))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_invalid_configs():
    with pytest.raises(ValueError):
        ModelConfig(encoder="crnn", conv=ConvSpec(), recurrent="lstm")
    with pytest.raises(ValueError):
        ModelConfig(encoder="gru", conv=ConvSpec())
    with pytest.raises(ValueError):
        ModelConfig(attention="none")
    with pytest.raises(ValueError):
        ModelConfig(encoder="rnn")


def test_config_dict_roundtrip():
    cfg = e2e_config("crnn", 2, 64, channels=8)
    assert ModelConfig.from_dict(cfg.to_dict()) == ModelConfig.from_dict(ModelConfig.from_dict(cfg.to_dict()).to_dict())
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "colour": 1})


# -- encoder ----------------------------------------------------------------

def naive_encoder(params, cfg, x):
    """Per-frame scalar-loop encoder from zero state."""
    p = f64(params)
    T = x.shape[0]
    z = x.astype(np.float64)
    if cfg.encoder == "crnn":
        y = naive_conv(z[:, :, None], p["conv.kernel"], p["conv.bias"], cfg.conv.freq_stride)
        z = np.maximum(y, 0).reshape(T, -1)
    for i in range(cfg.layers):
        Wx, Wh, b = p[f"rnn{i}.Wx"], p[f"rnn{i}.Wh"], p[f"rnn{i}.b"]
        h, c, out = np.zeros(cfg.nodes), np.zeros(cfg.nodes), []
        for t in range(T):
            if cfg.cell == "gru":
                h = naive_gru(z[t], h, Wx, Wh, b)
            else:
                h, c = naive_lstm(z[t], h, c, Wx, Wh, b)
            out.append(h)
        z = np.array(out)
    if cfg.has_projection:
        z = np.maximum(z @ p["proj.W"] + p["proj.b"], 0)
    return z


@pytest.mark.parametrize("encoder", ["gru", "lstm", "crnn"])
def test_encoder_matches_naive(encoder, rng):
    cfg = tiny(encoder)
    params = build_model(cfg, make_rng(1))
    params = {k: v + rng.normal(0, 0.1, v.shape).astype(np.float32) for k, v in params.items()}
    x = rng.normal(size=(9, 6)).astype(np.float32)
    np.testing.assert_allclose(encoder_forward(params, cfg, x), naive_encoder(params, cfg, x), atol=1e-5)


def test_encoder_single_frame_is_one_cell_step(rng):
    cfg = tiny("gru", layers=1)
    params = build_model(cfg, make_rng(2))
    x = rng.normal(size=(1, 6)).astype(np.float32)
    h = encoder_forward(params, cfg, x)
    step = L.gru_cell(x[0], np.zeros(3, np.float32), {"Wx": params["rnn0.Wx"], "Wh": params["rnn0.Wh"],
                                                       "b": params["rnn0.b"]})
    np.testing.assert_allclose(h[0], np.maximum(step @ params["proj.W"] + params["proj.b"], 0), rtol=1e-6)


@given(st.integers(0, 10_000), st.integers(1, 20), st.sampled_from(["gru", "lstm", "crnn"]))
def test_encoder_prefix_property(seed, t, encoder):
    r = np.random.default_rng(seed)
    cfg = tiny(encoder)
    params = build_model(cfg, make_rng(seed))
    x = r.normal(size=(20, 6)).astype(np.float32)
    np.testing.assert_array_equal(encoder_forward(params, cfg, x)[:t], encoder_forward(params, cfg, x[:t]))


def test_stack_context_edges(rng):
    x = rng.normal(size=(30, 4))
    s = stack_context(x, 15, 5)
    assert s.shape == (30, 21 * 4)
    np.testing.assert_array_equal(s[0, :16 * 4], np.tile(x[0], 16))
    np.testing.assert_array_equal(s[29, -6 * 4:], np.tile(x[29], 6))
    np.testing.assert_array_equal(s[10].reshape(21, 4), x[np.clip(np.arange(-5, 16), 0, 29)])


# -- attention --------------------------------------------------------------

def test_average_examples():
    h = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(attend_average(h), h[0])
    np.testing.assert_array_equal(attend_average(np.eye(3)[:2]), [0.5, 0.5, 0.0])


def test_soft_single_frame(rng):
    h = rng.normal(size=(1, 4))
    c, a = attend_soft(h, rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4))
    np.testing.assert_array_equal(a, [1.0])
    np.testing.assert_allclose(c, h[0])


def test_soft_matches_naive(rng):
    h, W, b, v = rng.normal(size=(7, 4)), rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
    e = [sum(v[j] * np.tanh(sum(h[t, i] * W[i, j] for i in range(4)) + b[j]) for j in range(4)) for t in range(7)]
    a = naive_softmax(e)
    c, alpha = attend_soft(h, W, b, v)
    np.testing.assert_allclose(alpha, a, rtol=1e-12)
    np.testing.assert_allclose(c, a @ h, rtol=1e-12)


@given(arrays(np.float64, (9, 5), elements=st.floats(-100, 100)), st.integers(0, 10_000))
def test_soft_weights_are_distribution(h, seed):
    r = np.random.default_rng(seed)
    _, a = attend_soft(h, r.normal(size=(5, 5)), r.normal(size=5), r.normal(0, 3, size=5))
    assert abs(a.sum() - 1) <= 1e-6 and np.all(a >= 0) and np.all(a <= 1)


@given(st.integers(1, 30), st.integers(0, 10_000))
def test_soft_identical_rows_uniform(T, seed):
    r = np.random.default_rng(seed)
    h = np.tile(r.normal(size=4), (T, 1))
    _, a = attend_soft(h, r.normal(size=(4, 4)), r.normal(size=4), r.normal(size=4))
    np.testing.assert_allclose(a, 1.0 / T, rtol=1e-12)


def test_soft_v_zero_equals_average(rng):
    h = rng.normal(size=(11, 4))
    c, _ = attend_soft(h, rng.normal(size=(4, 4)), rng.normal(size=4), np.zeros(4))
    np.testing.assert_allclose(c, attend_average(h), rtol=1e-14, atol=1e-15)


def test_soft_shift_invariance(rng):
    h, W, v = rng.normal(size=(6, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
    e = attention_scores(h, W, np.zeros(4), v)
    np.testing.assert_allclose(L.softmax(e + 7.5), L.softmax(e), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_soft_attention_grad(seed):
    from attkws.models import _attend_soft_backward
    r = np.random.default_rng(seed)
    h0, u = r.normal(size=(2, 5, 3)), r.normal(size=(2, 3))

    def op(d):
        c, _ = attend_soft(d["h"], d["W"], d["b"], d["v"])
        dh, g = _attend_soft_backward(u, d["h"], d["W"], d["b"], d["v"])
        return np.sum(u * c), {"h": dh, "W": g["att.W"], "b": g["att.b"], "v": g["att.v"]}

    assert grad_check(op, {"h": h0, "W": r.normal(size=(3, 3)), "b": r.normal(size=3), "v": r.normal(size=3)}) <= 1e-4


# -- end-to-end -------------------------------------------------------------

def test_detect_score_zero_output_layer(rng):
    cfg = tiny("gru")
    params = build_model(cfg, make_rng(0))
    params["out.W"][:] = 0
    assert detect_score(params, cfg, rng.normal(size=(12, 6))) == 0.5


def test_detect_score_logit_shift_invariance(rng):
    cfg = tiny("lstm")
    params = build_model(cfg, make_rng(0))
    x = rng.normal(size=(12, 6)).astype(np.float32)
    shifted = dict(params, **{"out.b": params["out.b"] + np.float32(3.0)})
    assert detect_score(shifted, cfg, x) == pytest.approx(detect_score(params, cfg, x), abs=1e-6)


@pytest.mark.parametrize("encoder,attention", [("gru", "soft"), ("lstm", "average"), ("crnn", "soft")])
def test_detect_score_pipeline_oracle(encoder, attention, rng):
    cfg = tiny(encoder, attention)
    params = build_model(cfg, make_rng(4))
    x = rng.normal(size=(15, 6)).astype(np.float32)
    h = naive_encoder(params, cfg, x)
    p = f64(params)
    c = h.mean(axis=0) if attention == "average" else attend_soft(h, p["att.W"], p["att.b"], p["att.v"])[0]
    expected = naive_softmax(list(c @ p["out.W"] + p["out.b"]))[1]
    assert detect_score(params, cfg, x) == pytest.approx(expected, abs=1e-5)
    assert detect_score(params, cfg, x) == detect_score(params, cfg, x)


def test_window_scores_match_per_window_recompute(rng):
    cfg = tiny("gru")
    params = build_model(cfg, make_rng(3))
    x = rng.normal(size=(40, 6)).astype(np.float32)
    s = window_scores(params, cfg, x, window=10)
    assert s.shape == (31,)
    h = encoder_forward(params, cfg, x).astype(np.float64)
    p = f64(params)
    for j, t in enumerate(range(9, 40)):
        c, _ = attend_soft(h[t - 9:t + 1], p["att.W"], p["att.b"], p["att.v"])
        assert s[j] == pytest.approx(naive_softmax(list(c @ p["out.W"] + p["out.b"]))[1], abs=1e-6)
    assert window_scores(params, cfg, x[:5], window=10).size == 0


@pytest.mark.parametrize("cfg", [tiny("gru"), tiny("lstm", "average"), tiny("crnn"),
                                 ModelConfig(kind="deep_kws", encoder="dnn", layers=2, nodes=4, attention="none",
                                             input_dim=3, num_classes=3, context_left=2, context_right=1)])
def test_full_loss_grad(cfg):
    r = np.random.default_rng(11)
    params = f64(build_model(cfg, make_rng(11)))
    params = {k: v + r.normal(0, 0.2, v.shape) for k, v in params.items()}
    x = r.normal(size=(2, 6, cfg.input_dim))
    y = r.integers(0, cfg.num_classes, (2, 6) if cfg.kind == "deep_kws" else 2)

    def op(d):
        loss, g, _ = loss_and_grads(d, cfg, x, y)
        return loss, g

    assert grad_check(op, params) <= 1e-4


# -- Deep KWS baseline ------------------------------------------------------

def test_posteriors_uniform_for_zero_network(rng):
    cfg = dnn_baseline_config()
    params = {k: np.zeros_like(v) for k, v in build_model(cfg, make_rng(0)).items()}
    np.testing.assert_allclose(deep_kws_posteriors(params, cfg, rng.normal(size=(30, 40))), 0.2)


def test_posterior_rows_sum_to_one(rng):
    cfg = dnn_baseline_config()
    p = deep_kws_posteriors(build_model(cfg, make_rng(0)), cfg, rng.normal(size=(50, 40)).astype(np.float32))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_smoothing_examples(rng):
    const = np.tile([0.6, 0.1, 0.1, 0.1, 0.1], (40, 1))
    np.testing.assert_allclose(smooth_posteriors(const), const, rtol=1e-12)
    p = rng.dirichlet(np.ones(5), 40)
    np.testing.assert_allclose(smooth_posteriors(p)[0], p[0], rtol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 80), st.integers(1, 30))
def test_smoothing_brute_force(seed, T, w):
    p = np.random.default_rng(seed).dirichlet(np.ones(5), T)
    np.testing.assert_allclose(smooth_posteriors(p, w), brute_trailing_mean(p, w), atol=1e-12)


def test_confidence_examples():
    ps = np.full((50, 5), 0.3)
    ps[:, 2] = 0.0
    assert not deep_kws_confidence(ps).any()
    ps = np.zeros((50, 5))
    for i in range(1, 5):
        ps[10 * i, i] = 1.0
    assert deep_kws_confidence(ps)[-1] == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 40))
def test_confidence_brute_force(seed, T, w):
    ps = np.random.default_rng(seed).dirichlet(np.ones(5), T)
    np.testing.assert_allclose(deep_kws_confidence(ps, w), brute_confidence(ps, w), atol=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 29), st.integers(0, 4), st.floats(0, 1))
def test_confidence_monotone(seed, t, k, bump):
    ps = np.random.default_rng(seed).uniform(0, 1, (30, 5))
    up = ps.copy()
    up[t, k] = max(up[t, k], bump)
    assert np.all(deep_kws_confidence(up, 10) >= deep_kws_confidence(ps, 10) - 1e-15)


def test_frame_targets_uniform_split():
    t = frame_targets(30, (10, 22))
    assert list(t[:10]) == [0] * 10 and list(t[22:]) == [0] * 8
    assert list(t[10:22]) == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
    t = frame_targets(30, (10, 22), alignment=[(10, 12), (12, 15), (15, 20), (20, 22)])
    assert list(t[10:22]) == [1, 1, 2, 2, 2, 3, 3, 3, 3, 3, 4, 4]
    assert not frame_targets(30, None).any()


# -- checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("cfg", [tiny("crnn"), tiny("lstm", "average"), dnn_baseline_config()])
def test_checkpoint_roundtrip(cfg, tmp_path):
    params = build_model(cfg, make_rng(9))
    save_checkpoint(params, cfg, tmp_path / "m.kwsc")
    loaded, cfg2 = load_checkpoint(tmp_path / "m.kwsc")
    assert cfg2 == cfg
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params) and set(loaded) == set(params)


def test_checkpoint_corruption(tmp_path):
    cfg = tiny()
    save_checkpoint(build_model(cfg, make_rng(0)), cfg, tmp_path / "m.kwsc")
    data = (tmp_path / "m.kwsc").read_bytes()
    (tmp_path / "bad.kwsc").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.kwsc")
    (tmp_path / "short.kwsc").write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.kwsc")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.kwsc", expect=tiny("lstm"))
