import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usermeta.autodiff import MlpSpec, Tensor, grad, mlp, no_grad
from usermeta.data import Samples
from usermeta.model import Inputs, ModelConfig, UserModel, group_matrix

CFG = ModelConfig(dim_s=5, dim_r=2, dim_h=2, hidden=8, embed_size=4)


def random_batch(n: int, seed: int = 0, cfg: ModelConfig = CFG) -> Samples:
    rng = np.random.default_rng(seed)
    return Samples(rng.normal(size=(n, cfg.dim_s)), rng.normal(size=(n, cfg.dim_r)),
                   rng.normal(size=(n, cfg.dim_h)), rng.normal(size=(n, cfg.dim_h)),
                   np.zeros(n, dtype=np.int64), np.arange(n))


def np_mlp(theta, prefix, x, n_layers, out_relu, final_bias=True):
    """Layer-by-layer numpy forward pass, independent of the autodiff engine."""
    for i in range(n_layers):
        x = x @ theta[f"{prefix}.{i}.weight"].data
        last = i == n_layers - 1
        if not last or final_bias:
            x = x + theta[f"{prefix}.{i}.bias"].data
        if not last or out_relu:
            x = np.maximum(x, 0.0)
    return x


def np_predict(theta, b: Samples, phi):
    relu = lambda v: np.maximum(v, 0.0)  # noqa: E731
    fs = np_mlp(theta, "ext_s", b.xs, 2, True)
    fr = np_mlp(theta, "ext_r", b.xr, 2, True)
    fh = np_mlp(theta, "ext_h", b.xh, 2, True)
    h = relu(np.hstack([fs, fr, fh]) @ theta["int0.weight"].data + theta["int0.bias"].data)
    h = np.hstack([h, np.tile(phi, (len(b), 1))])
    h = relu(h @ theta["int1.weight"].data + theta["int1.bias"].data)
    return h @ theta["int2.weight"].data + theta["int2.bias"].data


def test_predict_is_deterministic():
    m = UserModel(CFG, seed=3)
    x = Inputs.of(random_batch(6))
    phi = Tensor(np.ones(4))
    assert m.predict(x, phi).data.tobytes() == m.predict(x, phi).data.tobytes()
    assert UserModel(CFG, seed=3).predict(x, phi).data.tobytes() == m.predict(x, phi).data.tobytes()


def test_zeroed_phi_weights_remove_conditioning():
    m = UserModel(CFG, seed=1)
    m.theta["int1.weight"].data[CFG.hidden:, :] = 0.0
    x = Inputs.of(random_batch(4))
    a = m.predict(x, Tensor(np.full(4, 3.0))).data
    b = m.predict(x, Tensor(np.full(4, -7.0))).data
    np.testing.assert_array_equal(a, b)


def test_forward_matches_numpy_oracle():
    m = UserModel(CFG, seed=11)
    b = random_batch(7, seed=2)
    phi = np.zeros(4)
    np.testing.assert_allclose(m.predict(Inputs.of(b), Tensor(phi)).data, np_predict(m.theta, b, phi),
                               rtol=1e-12, atol=1e-12)
    phi = np.random.default_rng(5).normal(size=4)
    np.testing.assert_allclose(m.predict(Inputs.of(b), Tensor(phi)).data, np_predict(m.theta, b, phi),
                               rtol=1e-12, atol=1e-12)


def test_dimension_mismatch_raises():
    m = UserModel(CFG)
    with pytest.raises(ValueError):
        m.predict(Inputs.of(random_batch(3, cfg=ModelConfig(dim_s=4, hidden=8, embed_size=4))), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        m.predict(Inputs.of(random_batch(3)), Tensor(np.zeros(5)))


def test_init_embedding_single_pair_is_candidate():
    m = UserModel(CFG, seed=0)
    b = Inputs.of(random_batch(1))
    cand, _ = m.candidates_and_logits(b)
    np.testing.assert_allclose(m.init_embedding(b).data, cand.data[0], rtol=0, atol=1e-15)


def test_init_embedding_duplication_invariant():
    m = UserModel(CFG, seed=0)
    b = random_batch(5)
    phi = m.init_embedding(Inputs.of(b)).data
    phi2 = m.init_embedding(Inputs.of(Samples.concat([b, b]))).data
    np.testing.assert_allclose(phi, phi2, rtol=1e-12, atol=1e-14)


def test_init_embedding_hand_softmax(monkeypatch):
    m = UserModel(CFG, seed=4)
    b = Inputs.of(random_batch(3, seed=9))
    cand, _ = m.candidates_and_logits(b)
    c = cand.data
    forced = Tensor(np.array([[np.log(2.0)], [0.0], [0.0]]))
    monkeypatch.setattr(m, "candidates_and_logits", lambda *a, **k: (cand, forced))
    np.testing.assert_allclose(m.init_embedding(b).data, (2 * c[0] + c[1] + c[2]) / 4, rtol=1e-12)


def test_init_embedding_uses_weight_encoder_logits():
    m = UserModel(CFG, seed=4)
    b = Inputs.of(random_batch(3, seed=9))
    cand, logits = m.candidates_and_logits(b)
    w = np.exp(logits.data[:, 0] - logits.data[:, 0].max())
    w /= w.sum()
    np.testing.assert_allclose(m.init_embedding(b).data, w @ cand.data, rtol=1e-12)


def test_init_embedding_empty_raises():
    m = UserModel(CFG)
    with pytest.raises(ValueError):
        m.init_embedding(Inputs.of(random_batch(0)))


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(6))))
def test_init_embedding_permutation_invariant(perm):
    m = UserModel(CFG, seed=2)
    b = random_batch(6, seed=3)
    a = m.init_embedding(Inputs.of(b)).data
    p = m.init_embedding(Inputs.of(b.take(perm))).data
    np.testing.assert_allclose(a, p, rtol=1e-12, atol=1e-14)


def test_grouped_init_matches_per_group():
    m = UserModel(CFG, seed=6)
    groups = [random_batch(4, seed=s) for s in range(3)]
    stacked = m.init_embeddings(Inputs.of(Samples.concat(groups)), 3).data
    for k, g in enumerate(groups):
        np.testing.assert_allclose(stacked[k], m.init_embedding(Inputs.of(g)).data, rtol=1e-12, atol=1e-14)


def test_group_matrix_one_hot():
    g = group_matrix(3, 2).data
    np.testing.assert_array_equal(g, [[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1]])


def test_regression_loss_examples():
    m = UserModel(ModelConfig(dim_s=1, dim_r=1, dim_h=2, hidden=4, embed_size=0, init_network=False))
    for k in ("int2.weight", "int2.bias"):
        m.theta[k].data[:] = 0.0
    one = Samples(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 2)), np.ones((1, 2)),
                  np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))
    assert m.regression_loss(Inputs.of(one)).item() == 1.0
    zero = Samples(one.xs, one.xr, one.xh, np.zeros((1, 2)), one.episode, one.timestep)
    assert m.regression_loss(Inputs.of(zero)).item() == 0.0
    with pytest.raises(ValueError):
        m.regression_loss(Inputs.of(one.take([])))


def test_regression_loss_scalar_loop_oracle():
    m = UserModel(CFG, seed=8)
    b = random_batch(3, seed=4)
    phi = np.random.default_rng(1).normal(size=4)
    pred = m.predict(Inputs.of(b), Tensor(phi)).data
    total = 0.0
    for i in range(3):
        for j in range(2):
            total += (pred[i, j] - b.y[i, j]) ** 2
    assert abs(m.regression_loss(Inputs.of(b), Tensor(phi)).item() - total / 6) < 1e-12


def test_shared_h_extractor_storage():
    m = UserModel(CFG, seed=0)
    b = Inputs.of(random_batch(4))
    before = m.init_embedding(b).data.copy()
    pred_before = m.predict(b, Tensor(np.zeros(4))).data.copy()
    m.theta["ext_h.0.weight"].data *= 2.0  # one tensor, used for x_h, support x_h and support y
    assert not np.allclose(m.init_embedding(b).data, before)
    assert not np.allclose(m.predict(b, Tensor(np.zeros(4))).data, pred_before)
    assert not any(k.startswith(("ext_y", "ue_ext", "init_ext")) for k in m.theta)


def test_ue_encoder_final_layer_bias_free():
    m = UserModel(CFG, seed=0)
    assert "ue_enc.2.bias" not in m.theta and "w_enc.2.bias" in m.theta
    # zero features into the final layer give exactly zero
    spec = CFG.ue_encoder()
    last = {"x.0.weight": m.theta["ue_enc.2.weight"]}
    out = mlp(last, "x", MlpSpec((spec.widths[-2], spec.widths[-1]), ("identity",), final_bias=False),
              Tensor(np.zeros((1, spec.widths[-2]))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_phi_gradient_is_live():
    m = UserModel(CFG, seed=5)
    phi = Tensor(np.random.default_rng(0).normal(size=4), requires_grad=True)
    (g,) = grad(m.regression_loss(Inputs.of(random_batch(8)), phi), [phi])
    assert np.linalg.norm(g.data) > 1e-6


def test_per_row_phi_matches_shared():
    m = UserModel(CFG, seed=5)
    b = Inputs.of(random_batch(5))
    phi = np.arange(4.0)
    with no_grad():
        a = m.predict(b, Tensor(phi)).data
        r = m.predict(b, Tensor(np.tile(phi, (5, 1)))).data
    np.testing.assert_array_equal(a, r)


def test_checkpoint_roundtrip_with_config(tmp_path):
    cfg = ModelConfig(dim_s=5, dim_r=2, dim_h=2, hidden=8, embed_size=4, init_network=False)
    m = UserModel(cfg, seed=2)
    m.save(tmp_path / "m.ckpt", {"note": "x"})
    m2, header = UserModel.load(tmp_path / "m.ckpt")
    assert m2.cfg == cfg and header["note"] == "x"
    for k in m.theta:
        assert m.theta[k].data.tobytes() == m2.theta[k].data.tobytes()
