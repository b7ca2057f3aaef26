import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapvision import autodiff as ad
from gapvision.autodiff import Tensor
from gapvision.config import ModelConfig, SensorConfig
from gapvision.gradcheck import model_gradcheck, toy_batch
from gapvision.models import GapModel, InputError, cnn_kernel_sizes, cnn_output_size, tcn
from gapvision.params import ConfigError


def _randomize_readout(model, rng):
    W = model.params["final.out.W"]
    W.data[:] = rng.uniform(-1, 1, W.shape)


def _logits(model, contents, locations):
    return model(contents, locations).data


def test_cnn_geometry():
    ms = ModelConfig()
    assert cnn_kernel_sizes(ms) == [3] * 7 and cnn_output_size(ms) == 1
    lp = ModelConfig(sensor=SensorConfig(kind="log-polar", size=21, regions=(21,), radius=24))
    assert cnn_kernel_sizes(lp) == [5, 5, 5, 5, 3, 3] and cnn_output_size(lp) == 1
    with pytest.raises(ConfigError):
        cnn_output_size(ModelConfig(sensor=SensorConfig(size=13, regions=(13, 26))))


def test_cnn_shared_across_glimpses():
    cfg = ModelConfig.toy()
    model = GapModel(cfg)
    rng = np.random.default_rng(0)
    contents, _, _ = toy_batch(cfg, rng)
    contents[0, 2] = contents[0, 0]
    out = model.encode_contents(contents).data
    np.testing.assert_array_equal(out[0, 2], out[0, 0])
    alone = model.encode_contents(contents[0, 1]).data
    np.testing.assert_allclose(alone, out[0, 1], rtol=1e-12)


def test_zero_readout_gives_zero_logits():
    cfg = ModelConfig.toy()
    rng = np.random.default_rng(1)
    contents, locations, labels = toy_batch(cfg, rng, batch=4)
    for head in ("transformer", "abstractor"):
        model = GapModel(cfg.replace(head=head), rng)
        logits = model(contents, locations)
        assert np.all(logits.data == 0)
        loss = ad.bce_with_logits(logits, labels)
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)


@pytest.mark.parametrize("head", ["transformer", "abstractor"])
@pytest.mark.parametrize("seed", range(3))
def test_glimpse_permutation_invariance(head, seed):
    cfg = ModelConfig.toy(head=head)
    rng = np.random.default_rng(seed)
    model = GapModel(cfg, rng)
    _randomize_readout(model, rng)
    contents, locations, _ = toy_batch(cfg, rng)
    perm = rng.permutation(cfg.gap.T)
    a = _logits(model, contents, locations)
    b = _logits(model, contents[:, perm], locations[:, perm])
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("head", ["transformer", "abstractor"])
def test_content_only_permutation_changes_logit(head):
    # permuting what without where breaks the pairing, so the output should move
    cfg = ModelConfig.toy(head=head)
    rng = np.random.default_rng(7)
    model = GapModel(cfg, rng)
    _randomize_readout(model, rng)
    contents, locations, _ = toy_batch(cfg, rng)
    a = _logits(model, contents, locations)
    b = _logits(model, contents[:, [1, 0, 2, 3]], locations)
    assert np.max(np.abs(a - b)) > 1e-6


def test_rca_single_head_by_hand():
    cfg = ModelConfig.toy(head="abstractor", heads=1, head_dim=2, layers=1)
    model = GapModel(cfg)
    P = model.params
    Wq = np.array([[1.0, 0.5], [0.0, 2.0]])
    Wk = np.array([[0.3, 0.0], [1.0, -1.0]])
    Wv = np.array([[2.0, 0.0], [0.0, 1.0]])
    Wo = np.array([[1.0, 1.0], [0.0, 1.0]])
    name = "abstractor.layer0.rca"
    for key, val in (("Wq", Wq), ("Wk", Wk), ("Wv", Wv), ("Wo", Wo)):
        P[f"{name}.{key}"].data[:] = val
    g = np.array([[1.0, 2.0], [-1.0, 0.5]])
    r = np.array([[0.2, -0.4], [1.5, 0.1]])
    out, w = model.rca(name, Tensor(g), Tensor(r), return_weights=True)
    q, k, v = g @ Wq, g @ Wk, r @ Wv
    s = q @ k.T / np.sqrt(2)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w.data[0], a, atol=1e-10)
    np.testing.assert_allclose(out.data, a @ v @ Wo, atol=1e-10)


def test_rca_values_only_from_relations():
    cfg = ModelConfig.toy(head="abstractor", layers=1)
    model = GapModel(cfg)
    rng = np.random.default_rng(3)
    g = rng.random((4, cfg.d_model))
    r = rng.random((4, cfg.d_model))
    _, w1 = model.rca("abstractor.layer0.rca", Tensor(g), Tensor(r), return_weights=True)
    _, w2 = model.rca("abstractor.layer0.rca", Tensor(g), Tensor(r * 5 + 1), return_weights=True)
    # attention weights only depend on g
    np.testing.assert_array_equal(w1.data, w2.data)


@pytest.mark.parametrize("head", ["transformer", "abstractor"])
def test_attention_rows_sum_to_one(head):
    cfg = ModelConfig.toy(head=head)
    model = GapModel(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, cfg.d_model)))
    _, w = model.attention(f"{head}.layer0.attn", x, x, return_weights=True)
    assert w.shape == (3, cfg.heads, 4, 4)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_tcn_moments(T, D, seed):
    x = np.random.default_rng(seed).normal(size=(2, T, D)) * 3 + 1
    y = tcn(x).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-10)
    std = x.std(axis=1)
    np.testing.assert_allclose(y.std(axis=1), std / (std + 1e-5), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 50), st.floats(-20, 20), st.integers(0, 2**31 - 1))
def test_tcn_affine_invariance(a, b, seed):
    x = np.random.default_rng(seed).normal(size=(5, 3))
    y = tcn(a * x + b).data
    # invariant up to the stabilizer, which acts like eps / a on the unscaled input
    ref = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-5 / a)
    np.testing.assert_allclose(y, ref, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(y, tcn(x).data, atol=1e-3)


def test_tcn_single_step_rejected():
    with pytest.raises(ConfigError):
        tcn(np.ones((1, 4)))


def test_tcn_affine_parameters_exist_only_when_enabled():
    assert "tcn.what.gamma" not in GapModel(ModelConfig.toy()).params
    assert "tcn.what.gamma" in GapModel(ModelConfig.toy(tcn_affine=True)).params


@pytest.mark.parametrize("head", ["transformer", "abstractor"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_what_only_ignores_locations(head, seed):
    cfg = ModelConfig.toy(head=head, ablation="what-only")
    rng = np.random.default_rng(seed)
    model = GapModel(cfg, np.random.default_rng(0))
    _randomize_readout(model, np.random.default_rng(1))
    contents, locations, _ = toy_batch(cfg, rng)
    other = rng.uniform(-1, 1, locations.shape)
    np.testing.assert_array_equal(_logits(model, contents, locations), _logits(model, contents, other))


@pytest.mark.parametrize("head", ["transformer", "abstractor"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_where_only_ignores_contents(head, seed):
    cfg = ModelConfig.toy(head=head, ablation="where-only")
    rng = np.random.default_rng(seed)
    model = GapModel(cfg, np.random.default_rng(0))
    _randomize_readout(model, np.random.default_rng(1))
    contents, locations, _ = toy_batch(cfg, rng)
    other = rng.random(contents.shape)
    np.testing.assert_array_equal(_logits(model, contents, locations), _logits(model, other, locations))


def test_input_validation():
    cfg = ModelConfig.toy()
    model = GapModel(cfg)
    contents, locations, _ = toy_batch(cfg, np.random.default_rng(0))
    with pytest.raises(InputError):
        model(contents[..., :5, :5], locations)
    with pytest.raises(InputError):
        model(contents, locations * 3)


def test_parameter_count_grows_with_depth():
    small = GapModel(ModelConfig.toy(layers=1)).params.num_parameters()
    big = GapModel(ModelConfig.toy(layers=2)).params.num_parameters()
    assert big > small


@pytest.mark.parametrize("kw", [
    {"head": "transformer"},
    {"head": "abstractor"},
    {"head": "transformer", "fusion": "concat"},
    {"head": "abstractor", "ablation": "what-only"},
    {"head": "abstractor", "tcn_affine": True},
    {"head": "transformer", "sensor": SensorConfig(kind="log-polar", size=9, regions=(9,), radius=6),
     "cnn_layers": 2},
])
def test_model_gradcheck(kw):
    worst, per = model_gradcheck(ModelConfig.toy(**kw), seed=0)
    # the embedding biases have a true gradient of 0 (TCN removes constant shifts),
    # so their finite-difference noise is measured against the absolute floor
    assert worst < 1e-4, max(per.items(), key=lambda kv: kv[1])
    assert max(v for k, v in per.items() if not k.endswith("proj.b")) < 1e-6


def test_tcn_cancels_embedding_bias_gradient():
    cfg = ModelConfig.toy()
    rng = np.random.default_rng(0)
    model = GapModel(cfg, rng)
    _randomize_readout(model, rng)
    contents, locations, labels = toy_batch(cfg, rng)
    ad.backward(ad.bce_with_logits(model(contents, locations), labels))
    assert np.max(np.abs(model.params["cnn.proj.b"].grad)) < 1e-12
    assert np.max(np.abs(model.params["cnn.proj.W"].grad)) > 1e-6


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_transformer_head_by_hand():
    cfg = ModelConfig.toy(head="transformer", layers=1, heads=1, head_dim=2, mlp_hidden=3)
    rng = np.random.default_rng(11)
    model = GapModel(cfg, rng)
    P = {n: p.data for n, p in model.params.items()}
    for n in P:
        if n.startswith("transformer") or n.startswith("final"):
            P[n][...] = rng.normal(size=P[n].shape)
    what = np.array([[0.3, -1.2], [0.8, 0.4]])
    where = np.array([[-0.5, 0.1], [0.2, 0.9]])
    got = model.transformer_head(Tensor(what), Tensor(where)).data

    x = what + where
    p = "transformer.layer0"
    h = _ln_np(x, P[f"{p}.ln_attn.gamma"], P[f"{p}.ln_attn.beta"])
    q, k, v = h @ P[f"{p}.attn.Wq"], h @ P[f"{p}.attn.Wk"], h @ P[f"{p}.attn.Wv"]
    s = q @ k.T / np.sqrt(2)
    a = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    x = x + a @ v @ P[f"{p}.attn.Wo"]
    h = _ln_np(x, P[f"{p}.ln_mlp.gamma"], P[f"{p}.ln_mlp.beta"])
    h = np.maximum(h @ P[f"{p}.mlp.fc1.W"] + P[f"{p}.mlp.fc1.b"], 0)
    x = x + h @ P[f"{p}.mlp.fc2.W"] + P[f"{p}.mlp.fc2.b"]
    x = _ln_np(x, P["final.ln.gamma"], P["final.ln.beta"])
    want = x.mean(axis=0) @ P["final.out.W"] + P["final.out.b"]
    np.testing.assert_allclose(got, want[0], atol=1e-10)


def test_rca_uniform_attention_averages_relations():
    cfg = ModelConfig.toy(head="abstractor", heads=1, head_dim=3, layers=1)
    model = GapModel(cfg)
    name = "abstractor.layer0.rca"
    model.params[f"{name}.Wv"].data[:] = np.eye(3)
    model.params[f"{name}.Wo"].data[:] = np.eye(3)
    g = np.tile([0.4, -0.2, 1.0], (5, 1))
    r = np.random.default_rng(2).normal(size=(5, 3))
    out = model.rca(name, Tensor(g), Tensor(r)).data
    np.testing.assert_allclose(out, np.tile(r.mean(axis=0), (5, 1)), atol=1e-12)
