import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macnet import tensor as T
from macnet.network import (MacNetwork, covered_span, NetworkConfig, build, category_mean_l1, compute_loss, forward,
                            kde_kl, load_checkpoint, predict, predict_map, save_checkpoint, window_centers)
from macnet.percept import BetaParams, default_grid, kde_eval, kl_beta_vs_kde
from macnet.tensor import Tensor

from conftest import full_loss_gradient_errors, tiny_config


@pytest.fixture
def tiny():
    return build(tiny_config(), seed=3)


def batch(cfg, n, seed=0):
    r = np.random.default_rng(seed)
    X = r.uniform(size=(n, 3, cfg.patch_size, cfg.patch_size))
    y = np.arange(n) % cfg.n_categories
    A = r.uniform(size=(cfg.n_categories, cfg.n_attributes))
    return X, y, A


def test_default_heads_match_tap_sizes():
    net = build(NetworkConfig(), 0)
    fan_in = [net.params[f"aux.{i}.weight"].shape[0] for i in range(4)]
    assert fan_in == [16 * 16 * 16, 8 * 8 * 32, 4 * 4 * 64, 2 * 2 * 64]
    assert net.cfg.pool_sizes == [16, 8, 4, 2]
    assert net.params["combine.weight"].shape == (4 * 12, 12)
    assert net.params["classifier.0.weight"].shape == (2 * 2 * 64, 128)


def test_single_attribute_combination_input():
    net = build(NetworkConfig(n_attributes=1), 0)
    assert net.params["combine.weight"].shape == (4, 1)


def test_build_deterministic():
    a, b = build(tiny_config(), 5), build(tiny_config(), 5)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c = build(tiny_config(), 6)
    assert not all(np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


@pytest.mark.parametrize("kw", [dict(patch_size=30), dict(n_categories=1), dict(n_attributes=0),
                                dict(kde_mode="nope")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NetworkConfig(**kw)


def test_config_roundtrip():
    cfg = tiny_config(beta=BetaParams(0.7, 0.4), aux_heads=False)
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_invariants(tiny):
    X, _, _ = batch(tiny.cfg, 6)
    out = forward(tiny, X * 10 - 5)
    for phi in out.layer_attributes + [out.attributes]:
        assert phi.shape == (6, 2) and phi.data.min() >= 0 and phi.data.max() <= 1
    np.testing.assert_allclose(out.probabilities.sum(1), 1.0, atol=1e-12)


def test_wrong_patch_shape_rejected(tiny):
    with pytest.raises(ValueError, match="8, 8"):
        forward(tiny, np.zeros((2, 3, 16, 16)))
    with pytest.raises(ValueError):
        forward(tiny, np.zeros((0, 3, 8, 8)))


def test_aux_weights_do_not_affect_categories(tiny):
    X, _, _ = batch(tiny.cfg, 4)
    before = forward(tiny, X).probabilities
    for p in tiny.attribute_params():
        p.data = np.zeros_like(p.data)
    assert np.array_equal(before, forward(tiny, X).probabilities)


def test_identical_patches_identical_rows(tiny):
    X, _, _ = batch(tiny.cfg, 1)
    out = forward(tiny, np.concatenate([X, X]))
    assert np.array_equal(out.logits.data[0], out.logits.data[1])
    assert np.array_equal(out.attributes.data[0], out.attributes.data[1])


def test_final_attributes_depend_on_every_tap():
    net = build(NetworkConfig(patch_size=16, channels=(2, 3, 4), n_categories=2, n_attributes=3, hidden=4), 1)
    X = np.random.default_rng(0).uniform(size=(3, 3, 16, 16))
    base = forward(net, X).attributes.data
    for i in range(3):
        saved = {n: net.params[n].data.copy() for n in (f"aux.{i}.weight", f"aux.{i}.bias")}
        for n in saved:
            net.params[n].data = np.zeros_like(saved[n])
        assert not np.array_equal(forward(net, X).attributes.data, base), i
        for n, v in saved.items():
            net.params[n].data = v


# losses ---------------------------------------------------------------------------

def test_u_zero_when_means_match():
    A = np.array([[0.2, 0.8], [0.6, 0.4]])
    phi = Tensor(np.array([[0.1, 0.9], [0.3, 0.7], [0.6, 0.4]]))
    assert float(category_mean_l1(phi, [0, 0, 1], A).data) == pytest.approx(0.0, abs=1e-15)


def test_u_hand_value_single_category():
    A = np.array([[1.0, 0.0], [0.5, 0.5]])
    phi = Tensor(np.array([[0.75, 0.25], [0.75, 0.25]]))
    assert float(category_mean_l1(phi, [0, 0], A).data) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_u_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    phi = r.uniform(size=(9, 3))
    labels = r.integers(0, 3, size=9)
    A = r.uniform(size=(3, 3))
    perm = r.permutation(9)
    u1 = float(category_mean_l1(Tensor(phi), labels, A).data)
    u2 = float(category_mean_l1(Tensor(phi[perm]), labels[perm], A).data)
    assert u1 == pytest.approx(u2, rel=1e-12, abs=1e-15)
    assert u1 >= 0


def test_d_matches_percept_pipeline():
    r = np.random.default_rng(2)
    phi = r.uniform(size=(8, 3))
    g = default_grid()
    d = float(kde_kl(Tensor(phi), g, BetaParams()).data)
    assert d == pytest.approx(kl_beta_vs_kde(g, BetaParams(), kde_eval(phi.ravel(), g)), rel=1e-12)
    per = float(kde_kl(Tensor(phi), g, BetaParams(), mode="per-attribute").data)
    expected = np.mean([kl_beta_vs_kde(g, BetaParams(), kde_eval(phi[:, m], g)) for m in range(3)])
    assert per == pytest.approx(expected, rel=1e-12)


def test_total_composition(tiny):
    X, y, A = batch(tiny.cfg, 6)
    loss = compute_loss(forward(tiny, X), y, A, tiny.cfg).as_floats()
    cfg = tiny.cfg
    assert loss["total"] == pytest.approx(loss["cross_entropy"] + cfg.lambda_attr * sum(loss["u"])
                                          + cfg.lambda_dist * loss["d"], rel=1e-12)
    assert len(loss["u"]) == len(cfg.channels) + 1 and min(loss["u"]) >= 0


def test_zero_weights_total_is_cross_entropy():
    net = build(tiny_config(lambda_attr=0.0, lambda_dist=0.0), 0)
    X, y, A = batch(net.cfg, 6)
    loss = compute_loss(forward(net, X), y, A, net.cfg)
    assert float(loss.total.data) == float(loss.cross_entropy.data)


def test_loss_input_validation(tiny):
    X, y, A = batch(tiny.cfg, 3)
    out = forward(tiny, X)
    with pytest.raises(ValueError):
        compute_loss(out, np.array([0, 1, 7]), A, tiny.cfg)
    with pytest.raises(ValueError):
        compute_loss(out, y, A[:, :1], tiny.cfg)


@pytest.mark.parametrize("mode", ["pooled", "per-attribute"])
def test_full_loss_gradients(mode):
    net = build(tiny_config(kde_mode=mode), 2)
    X, y, A = batch(net.cfg, 4, seed=1)
    errors = full_loss_gradient_errors(net, X, y, A)
    assert max(errors.values()) < 1e-4, errors


def test_ablation_bitwise_parity():
    with_heads = build(tiny_config(lambda_attr=0.0, lambda_dist=0.0), 4)
    without = build(tiny_config(aux_heads=False), 4)
    for name, p in without.params.items():
        assert np.array_equal(p.data, with_heads.params[name].data)
    X, y, A = batch(with_heads.cfg, 6)
    la = compute_loss(forward(with_heads, X), y, A, with_heads.cfg)
    lb = compute_loss(forward(without, X), y, None, without.cfg)
    assert float(la.total.data) == float(lb.total.data)
    la.total.backward()
    lb.total.backward()
    for name, p in without.params.items():
        assert np.array_equal(p.grad, with_heads.params[name].grad), name


# inference -------------------------------------------------------------------------

def test_predict_chunking_consistent(tiny):
    X, _, _ = batch(tiny.cfg, 7)
    a, b = predict(tiny, X, chunk=2), predict(tiny, X, chunk=100)
    np.testing.assert_allclose(a["probabilities"], b["probabilities"], rtol=1e-12)
    np.testing.assert_allclose(a["attributes"], b["attributes"], rtol=1e-12)
    assert a["layer_attributes"].shape == (2, 7, 2)


@pytest.mark.parametrize("extent,stride,count", [(64, 16, 3), (64, 32, 2), (64, 1, 33), (32, 8, 1)])
def test_window_centres(extent, stride, count):
    c = window_centers(extent, 32, stride)
    assert len(c) == count and c[0] == 16


@pytest.mark.parametrize("extent,stride,span", [(128, 1, (16, 113)), (128, 8, (16, 113)), (64, 32, (16, 49))])
def test_covered_span(extent, stride, span):
    s = covered_span(extent, 32, stride)
    assert (s.start, s.stop) == span


def test_map_window_count_and_shape():
    net = build(NetworkConfig(channels=(2,), n_categories=3, n_attributes=2, hidden=4), 0)
    img = np.random.default_rng(0).uniform(size=(3, 64, 64))
    calls = []
    import macnet.network as N
    orig = N.predict

    def spy(n, X, chunk=256):
        calls.append(len(X))
        return orig(n, X, chunk)

    N.predict = spy
    try:
        m = predict_map(net, img, 16, "materials")
    finally:
        N.predict = orig
    assert sum(calls) == 9
    assert m.shape == (3, 64, 64)
    np.testing.assert_allclose(m.sum(0), 1.0, atol=1e-12)
    assert predict_map(net, img, 16, "attributes").shape == (2, 64, 64)


def test_map_constant_texture_is_constant():
    net = build(NetworkConfig(channels=(2,), n_categories=3, n_attributes=2, hidden=4), 0)
    img = np.broadcast_to(np.array([0.2, 0.5, 0.7])[:, None, None], (3, 48, 48)).copy()
    m = predict_map(net, img, 4, "attributes")
    np.testing.assert_allclose(m, m[:, :1, :1] * np.ones_like(m), atol=1e-12)
    assert m.min() >= 0 and m.max() <= 1


def test_map_rejects_small_image():
    net = build(NetworkConfig(channels=(2,), n_categories=3, n_attributes=2, hidden=4), 0)
    with pytest.raises(ValueError):
        predict_map(net, np.zeros((3, 16, 40)), 4)


# checkpoints -------------------------------------------------------------------------

def test_checkpoint_layout(tmp_path):
    import json
    import struct
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"note": "x"})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"MACCNN01"
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    assert [t["name"] for t in header["tensors"]] == ["a", "b"]
    assert header["tensors"][1]["offset"] == 48
    assert np.frombuffer(raw[12 + n:12 + n + 48], "<f8").tolist() == list(range(6))
    back, head = load_checkpoint(tmp_path / "c.ckpt")
    assert head["note"] == "x"
    assert np.array_equal(back["a"], tensors["a"]) and np.array_equal(back["b"], tensors["b"])


def test_network_save_load_roundtrip(tmp_path, tiny):
    tiny.save(tmp_path / "n.ckpt")
    back = MacNetwork.load(tmp_path / "n.ckpt")
    assert back.cfg == tiny.cfg
    X, _, _ = batch(tiny.cfg, 3)
    assert np.array_equal(forward(back, X).attributes.data, forward(tiny, X).attributes.data)


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ValueError, match="MACCNN01"):
        load_checkpoint(tmp_path / "x.ckpt")
