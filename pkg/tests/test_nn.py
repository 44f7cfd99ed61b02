import numpy as np
import pytest
from scipy.special import erf

from muc import autodiff as ad
from muc.autodiff import tensor
from muc.nn import (Adam, AdamState, CheckpointError, CrossAttention, Mlp, MlpSpec, UNet, UNetSpec, adam_step,
                    check_gradients, load_checkpoint, save_checkpoint)


# -- MLP -----------------------------------------------------------------------
def test_zero_weights_give_zero_output():
    m = Mlp(MlpSpec((5, 7, 3)))
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(m(np.random.default_rng(0).normal(size=5)).data, np.zeros(3))


def test_relu_identity_layer():
    m = Mlp(MlpSpec((2, 2, 2), "relu"))
    m.params["w0"].data = np.eye(2)
    m.params["w1"].data = np.eye(2)
    np.testing.assert_array_equal(m(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def straight_line(weights, x, act, out_act):
    """Independent re-evaluation with plain loops over layers and units."""
    h = list(x)
    n = len(weights) // 2
    for i in range(n):
        W, b = weights[f"w{i}"], weights[f"b{i}"]
        nxt = []
        for j in range(W.shape[1]):
            z = b[j]
            for k in range(W.shape[0]):
                z += h[k] * W[k, j]
            if i < n - 1:
                z = max(z, 0.0) if act == "relu" else 0.5 * z * (1 + erf(z / np.sqrt(2)))
            nxt.append(z)
        h = nxt
    if out_act == "softplus":
        h = [np.log1p(np.exp(-abs(z))) + max(z, 0.0) for z in h]
    elif out_act == "sigmoid":
        h = [1 / (1 + np.exp(-z)) for z in h]
    return np.array(h)


@pytest.mark.parametrize("act", ["relu", "gelu"])
@pytest.mark.parametrize("out_act", ["none", "softplus", "sigmoid"])
def test_mlp_matches_straight_line_oracle(act, out_act):
    rng = np.random.default_rng(4)
    m = Mlp(MlpSpec((6, 8, 5, 3), act, out_act), rng)
    for p in m.params.values():
        p.data = rng.normal(size=p.shape)
    x = rng.normal(size=6)
    expected = straight_line({k: v.data for k, v in m.params.items()}, x, act, out_act)
    np.testing.assert_allclose(m(x).data, expected, rtol=1e-12, atol=1e-12)


def test_mlp_shape_mismatch_and_bad_spec():
    with pytest.raises(ValueError):
        Mlp(MlpSpec((3, 2)))(np.zeros(4))
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), "swish")


def test_zero_last_gives_constant_output():
    m = Mlp(MlpSpec((4, 8, 3), "gelu", "softplus"), zero_last=True)
    out = m(np.random.default_rng(1).normal(size=(5, 4))).data
    np.testing.assert_allclose(out, np.log(2.0), atol=1e-15)


# -- cross-attention --------------------------------------------------------------
def test_cross_attention_zero_value_projection_is_identity():
    blk = CrossAttention(4, 9, 6, np.random.default_rng(0))
    blk.params["wv"].data = np.zeros_like(blk.params["wv"].data)
    x = np.random.default_rng(1).normal(size=(2, 4, 5, 3))
    np.testing.assert_array_equal(blk(x, np.ones((2, 9))).data, x)


def test_single_token_attention_weights_are_one():
    blk = CrossAttention(4, 9, 6, np.random.default_rng(0))
    for p in blk.params.values():
        p.data = p.data * 50
    _, attn = blk.attend(np.random.default_rng(1).normal(size=(2, 4, 5, 3)), np.random.default_rng(2).normal(size=(2, 9)))
    assert attn.shape == (2, 15, 1)
    assert np.all(attn.data == 1.0)


def test_cross_attention_rejects_bad_shapes():
    blk = CrossAttention(4, 9, 6)
    with pytest.raises(ValueError):
        blk(np.zeros((1, 3, 4, 4)), np.zeros((1, 9)))
    with pytest.raises(ValueError):
        blk(np.zeros((1, 4, 4, 4)), np.zeros((1, 8)))


def test_cross_attention_gradcheck():
    rng = np.random.default_rng(3)
    blk = CrossAttention(3, 9, 4, rng)
    x = tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    c = tensor(rng.normal(size=(2, 9)), requires_grad=True)
    r = rng.normal(size=(2, 3, 4, 4))
    errs = check_gradients(lambda: (blk(x, c) * r).sum(), {**blk.params, "x": x, "cond": c})
    assert max(errs.values()) < 1e-6, errs


# -- U-Net -----------------------------------------------------------------------
def test_unet_shape_contract():
    net = UNet(UNetSpec(3, 4, 5, 9, 4), np.random.default_rng(0))
    out = net(np.random.default_rng(1).normal(size=(2, 3, 16, 16)), np.zeros((2, 9)))
    assert out.shape == (2, 5, 16, 16)


def test_unet_zero_weights_zero_output():
    net = UNet(UNetSpec(3, 4, 3, 9, 4))
    for p in net.params.values():
        p.data = np.zeros_like(p.data)
    out = net(np.random.default_rng(1).normal(size=(1, 3, 8, 8)), np.ones((1, 9)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_unet_rejects_indivisible_dims():
    net = UNet(UNetSpec(3, 4, 3, 9, 4))
    with pytest.raises(ValueError):
        net(np.zeros((1, 3, 10, 8)), np.zeros((1, 9)))
    with pytest.raises(ValueError):
        net(np.zeros((1, 2, 8, 8)), np.zeros((1, 9)))


def test_unet_gradcheck():
    rng = np.random.default_rng(5)
    net = UNet(UNetSpec(3, 2, 3, 9, 3), rng)
    x = tensor(rng.normal(size=(1, 3, 8, 8)))
    c = rng.normal(size=(1, 9))
    r = rng.normal(size=(1, 3, 8, 8))
    errs = check_gradients(lambda: (net(x, c) * r).sum(), net.params, max_coords=8)
    assert max(errs.values()) < 1e-4, errs


# -- Adam ------------------------------------------------------------------------
def test_adam_zero_gradient_leaves_params():
    p = {"a": np.array([1.0, -2.0])}
    out = adam_step(AdamState(lr=0.1), p, {"a": np.zeros(2)})
    np.testing.assert_array_equal(out["a"], p["a"])


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0, 1e-3])
    st = AdamState(lr=0.01)
    out = adam_step(st, {"a": np.zeros(3)}, {"a": g})
    # bias correction gives m_hat = g, v_hat = g^2
    np.testing.assert_allclose(out["a"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st.step == 1


def test_adam_groups_are_independent():
    st1, st2 = AdamState(lr=0.1), AdamState(lr=0.1)
    both = adam_step(st1, {"a": np.ones(2), "b": np.ones(3)}, {"a": np.array([1.0, 2.0]), "b": np.array([3.0, 0, 1])})
    alone = adam_step(st2, {"a": np.ones(2)}, {"a": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(both["a"], alone["a"])


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"a": np.zeros(2)}, {"a": np.zeros(3)})


def test_adam_minimises_quadratic_deterministically():
    def run():
        x = tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam({"x": x}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            ((x - 1.0) ** 2).sum().backward()
            opt.step()
        return x.data
    a, b = run(), run()
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, 1.0, atol=1e-2)


# -- checkpoints -------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    params = {"w": np.random.default_rng(0).normal(size=(3, 4)), "b": np.arange(4.0), "s": np.array(2.5)}
    st = AdamState(lr=0.01)
    adam_step(st, params, {k: np.ones_like(v) for k, v in params.items()})
    save_checkpoint(tmp_path / "c.mucw", params, st, {"note": "x"})
    p2, st2, meta = load_checkpoint(tmp_path / "c.mucw")
    assert meta == {"note": "x"}
    for k in params:
        np.testing.assert_array_equal(p2[k], params[k])
        np.testing.assert_array_equal(st2.m[k], st.m[k])
        np.testing.assert_array_equal(st2.v[k], st.v[k])
    assert (st2.step, st2.lr) == (1, 0.01)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.mucw"
    save_checkpoint(path, {"w": np.ones(3)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "trunc").write_bytes(raw[:-5])
    (tmp_path / "ver").write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    (tmp_path / "tail").write_bytes(raw + b"\0")
    for name in ("bad", "trunc", "ver", "tail"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
