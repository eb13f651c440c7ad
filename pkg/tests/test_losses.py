import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodkit.losses import (KINDS, MetricHead, adacos_scale, arcface_loss, cosface_loss, cosine_logits,
                           head_loss, make_head, outlier_exposure_loss, plain_logits,
                           scaled_cosine_loss, softmax_ce, sphere_psi, sphereface_loss,
                           uniform_cross_entropy)
from oodkit.nn import ConfigError, Rng, finite_diff_grad, init_mlp, relative_error


def head(kind, W, s=1.0, m=0.0, b=None, learnable=False):
    W = np.asarray(W, dtype=float)
    return MetricHead(kind, W, np.zeros(W.shape[1]) if b is None else np.asarray(b, float), s, m, learnable)


# --- cosine logits ----------------------------------------------------------

def test_cosine_parallel_is_clamped():
    c = cosine_logits([[1.0, 0.0]], head("cosface", [[1.0], [0.0]]))
    assert c[0, 0] == 1 - 1e-7


def test_cosine_orthogonal_and_diagonal():
    h = head("cosface", [[1.0, 0.0], [0.0, 1.0]])
    c = cosine_logits([[1.0, 0.0], [1.0, 1.0]], h)
    assert c[0, 1] == 0.0
    assert c[1, 0] == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_cosine_zero_feature_is_guarded():
    c = cosine_logits([[0.0, 0.0]], head("cosface", np.eye(2)))
    assert np.all(np.isfinite(c))


# --- softmax ----------------------------------------------------------------

def test_softmax_ce_uniform():
    assert softmax_ce(np.zeros((3, 10)), [0, 4, 9]).loss == pytest.approx(math.log(10), abs=1e-12)


def test_softmax_ce_saturated():
    logits = np.zeros((1, 5))
    logits[0, 2] = 30.0
    assert softmax_ce(logits, [2]).loss < 1e-9


def test_softmax_ce_two_class_hand_value():
    assert softmax_ce([[1.0, 0.0]], [0]).loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert softmax_ce([[1.0, 0.0]], [0]).loss == pytest.approx(0.3133, abs=1e-4)


def test_softmax_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        softmax_ce(np.zeros((1, 3)), [3])


# --- scaled cosine ----------------------------------------------------------

def test_scaled_cosine_scale_one_is_softmax_over_cosines(np_rng):
    z, W = np_rng.normal(size=(5, 4)), np_rng.normal(size=(4, 3))
    h = head("scaled_cosine", W, s=1.0, learnable=True)
    lab = np_rng.integers(0, 3, 5)
    assert scaled_cosine_loss(z, h, lab).loss == pytest.approx(softmax_ce(cosine_logits(z, h), lab).loss, abs=1e-14)


@pytest.mark.parametrize("s", [0.5, 3.0, 17.0])
def test_scaled_cosine_equal_cosines_gives_ln_c(s):
    # feature orthogonal to every class column -> all cosines 0
    W = np.zeros((4, 3))
    W[1:, :] = np.eye(3)
    h = head("scaled_cosine", W, s=s, learnable=True)
    assert scaled_cosine_loss([[1.0, 0, 0, 0]], h, [1]).loss == pytest.approx(math.log(3), abs=1e-12)


def test_scaled_cosine_hand_value():
    h = head("scaled_cosine", np.eye(2), s=2.0, learnable=True)
    val = scaled_cosine_loss([[1.0, 0.0]], h, [0]).loss
    # cos clamp shifts the target cosine by 1e-7, i.e. loss by ~2e-8
    assert val == pytest.approx(-math.log(math.e ** 2 / (math.e ** 2 + 1)), abs=1e-6)
    assert val == pytest.approx(0.1269, abs=1e-4)


def test_learnable_scale_clamped_when_driven_negative(caplog):
    h = head("scaled_cosine", np.eye(2), s=1.0, learnable=True)
    h2 = h.with_parameters({"head.W": h.W, "head.s": np.array([-0.5])})
    assert h2.s == 1e-3


# --- sphereface -------------------------------------------------------------

def test_sphereface_margin_one_is_softmax_over_projections(np_rng):
    for _ in range(20):
        z, W = np_rng.normal(size=(6, 5)) * 3, np_rng.normal(size=(5, 4))
        lab = np_rng.integers(0, 4, 6)
        h = head("sphereface", W, m=1)
        ref = softmax_ce(np.linalg.norm(z, axis=1, keepdims=True) * cosine_logits(z, h), lab).loss
        assert abs(sphereface_loss(z, h, lab).loss - ref) <= 1e-10


def test_sphere_psi_values():
    assert sphere_psi(0.0, 2) == pytest.approx(1.0)
    # pi/3 lies in the first piece [0, pi/2]: psi = cos(2 pi / 3)
    assert sphere_psi(math.pi / 3, 2) == pytest.approx(-0.5, abs=1e-12)
    # 2 pi / 3 lies in the second piece: psi = -cos(4 pi / 3) - 2
    assert sphere_psi(2 * math.pi / 3, 2) == pytest.approx(-1.5, abs=1e-12)


def test_sphere_psi_is_monotone_decreasing():
    th = np.linspace(0, math.pi, 2001)
    for m in (1, 2, 3, 4):
        assert np.all(np.diff(sphere_psi(th, m)) <= 1e-12)


def test_sphereface_zero_angle_target_logit_is_norm():
    h = head("sphereface", np.eye(2), m=2)
    z = np.array([[3.0, 0.0]])
    # target logit |z| psi(0) = 3, other logit |z| cos(pi/2) = 0
    assert sphereface_loss(z, h, [0]).loss == pytest.approx(softmax_ce([[3.0, 0.0]], [0]).loss, abs=1e-5)


def test_sphereface_bad_margin():
    with pytest.raises(ConfigError):
        head("sphereface", np.eye(2), m=0)
    with pytest.raises(ConfigError):
        head("sphereface", np.eye(2), m=1.5)


# --- cosface / arcface / adacos ---------------------------------------------

def test_cosface_hand_value():
    h = head("cosface", np.eye(2), s=4.0, m=0.25)
    val = cosface_loss([[1.0, 0.0]], h, [0]).loss
    assert val == pytest.approx(-math.log(math.e ** 3 / (math.e ** 3 + 1)), abs=1e-6)
    assert val == pytest.approx(0.0486, abs=1e-4)


def test_margin_zero_reductions(np_rng):
    for _ in range(20):
        z, W = np_rng.normal(size=(6, 5)), np_rng.normal(size=(5, 4))
        lab = np_rng.integers(0, 4, 6)
        s = float(np_rng.uniform(1, 20))
        ref = softmax_ce(s * cosine_logits(z, head("cosface", W)), lab).loss
        cf = cosface_loss(z, head("cosface", W, s=s, m=0.0), lab).loss
        af = arcface_loss(z, head("arcface", W, s=s, m=0.0), lab).loss
        sc = scaled_cosine_loss(z, head("scaled_cosine", W, s=s, learnable=True), lab).loss
        assert abs(cf - ref) <= 1e-10 and abs(af - ref) <= 1e-10 and abs(sc - ref) <= 1e-10


@pytest.mark.parametrize("kind", ["cosface", "arcface"])
def test_uniform_cosines_margin_zero_gives_ln_c(kind):
    W = np.zeros((4, 3))
    W[1:, :] = np.eye(3)
    assert head_loss([[2.0, 0, 0, 0]], head(kind, W, s=10.0), [0]).loss == pytest.approx(math.log(3), abs=1e-12)


def test_arcface_zero_angle_target():
    h = head("arcface", np.eye(2), s=5.0, m=0.5)
    # target logit s cos(0.5), other logit s cos(pi/2) = 0
    expected = softmax_ce([[5.0 * math.cos(0.5), 0.0]], [0]).loss
    # the clamp leaves theta at ~4.5e-4 instead of 0
    assert arcface_loss([[1.0, 0.0]], h, [0]).loss == pytest.approx(expected, abs=1e-4)
    assert math.cos(0.5) == pytest.approx(0.8776, abs=1e-4)


def test_arcface_wraparound_uses_linear_fallback():
    m = 0.4
    h = head("arcface", np.eye(2), s=1.0, m=m)
    z = np.array([[-1.0, 0.05]])  # theta to class 0 close to pi
    cos0 = cosine_logits(z, h)[0, 0]
    fallback = cos0 - m * math.sin(m)
    expected = softmax_ce([[fallback, cosine_logits(z, h)[0, 1]]], [0]).loss
    assert arcface_loss(z, h, [0]).loss == pytest.approx(expected, abs=1e-12)


def test_margin_range_validation():
    with pytest.raises(ConfigError):
        head("cosface", np.eye(2), m=1.0)
    with pytest.raises(ConfigError):
        head("arcface", np.eye(2), m=math.pi / 2)
    with pytest.raises(ConfigError):
        head("arcface", np.eye(2), s=0.0)


def test_adacos_scale_values():
    assert adacos_scale(10) == pytest.approx(math.sqrt(2) * math.log(9), abs=1e-12)
    assert adacos_scale(10) == pytest.approx(3.107, abs=1e-3)
    assert adacos_scale(101) == pytest.approx(6.512, abs=1e-3)
    assert adacos_scale(2) == 1.0
    with pytest.raises(ValueError):
        adacos_scale(1)


def test_make_head_defaults(rng):
    assert make_head("adacos", 8, 10, rng).s == pytest.approx(adacos_scale(10))
    sc = make_head("scaled_cosine", 8, 4, rng)
    assert sc.s_learnable and sc.s == 10.0
    assert make_head("sphereface", 8, 4, rng).m == 2
    cf = make_head("cosface", 8, 4, rng)
    assert (cf.s, cf.m) == (10.0, 0.2)
    af = make_head("arcface", 8, 4, rng)
    assert (af.s, af.m) == (10.0, 0.3)


# --- gradients -----------------------------------------------------------------

HEAD_CASES = [
    ("softmax", {}),
    ("scaled_cosine", {"s": 3.0, "s_learnable": True}),
    ("sphereface", {"m": 2}),
    ("sphereface", {"m": 3}),
    ("cosface", {"s": 4.0, "m": 0.2}),
    ("arcface", {"s": 4.0, "m": 0.3}),
    ("adacos", {"m": 0.3}),
]


def check_head_gradients(kind, kw, point):
    r = Rng(500 + point)
    h = make_head(kind, 5, 4, r.split(0), **kw)
    if kind == "softmax":
        h = h.with_parameters({"head.W": h.W, "head.b": r.normal(4)})
    z = r.normal((6, 5)) * 2
    lab = r.integers(0, 4, 6)
    lv = head_loss(z, h, lab)
    params = {"z": z.copy(), **{k: v.copy() for k, v in h.parameters().items()}}

    def loss(p):
        return head_loss(p["z"], h.with_parameters(p), lab).loss

    fd = finite_diff_grad(loss, params)
    assert relative_error(lv.grad_z, fd["z"]) < 1e-4, ("z", kind, point)
    for k in h.parameters():
        assert relative_error(lv.grads[k], fd[k]) < 1e-4, (k, kind, point)


@pytest.mark.parametrize("kind,kw", HEAD_CASES)
def test_head_gradients_match_finite_differences(kind, kw):
    for point in range(20):
        check_head_gradients(kind, kw, point)


@pytest.mark.parametrize("kind", KINDS)
def test_outlier_exposure_gradients(kind):
    for point in range(3):
        r = Rng(900 + point)
        net = init_mlp([2, 6, 5], "relu", r.split(0))
        # non-zero biases keep features away from the zero-norm guard
        net = net.with_parameters({k: v + (0.5 * r.normal(v.shape) if k.endswith(".b") else 0)
                                   for k, v in net.parameters().items()})
        h = make_head(kind, 5, 3, r.split(1))
        xi, xo = r.normal((5, 2)), r.normal((4, 2))
        lab = r.integers(0, 3, 5)
        lv = outlier_exposure_loss(xi, lab, xo, net, h, 0.7)
        params = {k: v.copy() for k, v in {**net.parameters(), **h.parameters()}.items()}

        def loss(p):
            return outlier_exposure_loss(xi, lab, xo, net.with_parameters(p), h.with_parameters(p), 0.7).loss

        fd = finite_diff_grad(loss, params)
        for k in params:
            assert relative_error(lv.grads[k], fd[k]) < 1e-4, (kind, point, k)


# --- outlier exposure -----------------------------------------------------------

def test_oe_uniform_posterior_gives_ln_c():
    h = head("softmax", np.zeros((3, 4)))
    assert uniform_cross_entropy(np.ones((5, 3)), h).loss == pytest.approx(math.log(4), abs=1e-12)


def test_oe_lambda_zero_is_base_loss(rng):
    net = init_mlp([2, 6, 5], "relu", rng.split(0))
    h = make_head("cosface", 5, 3, rng.split(1))
    xi, lab = rng.normal((5, 2)), np.array([0, 1, 2, 0, 1])
    base = head_loss(net(xi), h, lab).loss
    assert outlier_exposure_loss(xi, lab, rng.normal((4, 2)), net, h, 0.0).loss == base
    assert outlier_exposure_loss(xi, lab, None, net, h, 0.5).loss == base


def test_oe_term_hand_value():
    # softmax head with identity weights: logits = z; choose z so p = [0.9, 0.1]
    h = head("softmax", np.eye(2))
    z = np.array([[math.log(0.9), math.log(0.1)]])
    val = uniform_cross_entropy(z, h).loss
    assert val == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.1)), abs=1e-12)
    assert val == pytest.approx(1.2040, abs=1e-4)


def test_oe_uses_margin_free_logits(np_rng):
    z, W = np_rng.normal(size=(4, 5)), np_rng.normal(size=(5, 3))
    a = uniform_cross_entropy(z, head("arcface", W, s=7.0, m=0.4))
    b = uniform_cross_entropy(z, head("arcface", W, s=7.0, m=0.0))
    assert a.loss == b.loss


# --- properties -------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(theta=st.floats(0.05, 0.7), dm=st.floats(0.01, 0.2), s=st.floats(1.0, 30.0),
       kind=st.sampled_from(["cosface", "arcface"]))
def test_increasing_margin_never_decreases_loss(theta, dm, s, kind):
    # 2-d feature at angle theta from class 0, class 1 at 90 degrees
    z = np.array([[math.cos(theta), math.sin(theta)]])
    m0 = 0.1 if kind == "cosface" else 0.2
    lo = head_loss(z, head(kind, np.eye(2), s=s, m=m0), [0]).loss
    hi = head_loss(z, head(kind, np.eye(2), s=s, m=m0 + dm), [0]).loss
    assert hi >= lo - 1e-12


@settings(max_examples=60, deadline=None)
@given(theta=st.floats(0.01, 0.7), r=st.floats(0.5, 5.0))
def test_sphereface_margin_monotone(theta, r):
    z = r * np.array([[math.cos(theta), math.sin(theta)]])
    m_small, m_big = 1, 2
    if theta >= math.pi / (2 * m_big):
        return
    lo = sphereface_loss(z, head("sphereface", np.eye(2), m=m_small), [0]).loss
    hi = sphereface_loss(z, head("sphereface", np.eye(2), m=m_big), [0]).loss
    assert hi >= lo - 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(KINDS))
def test_permutation_equivariance(seed, kind):
    r = Rng(seed)
    h = make_head(kind, 4, 5, r.split(0))
    z, lab = r.normal((7, 4)), r.integers(0, 5, 7)
    perm = r.permutation(5)
    inv = np.argsort(perm)
    hp = h.with_parameters({"head.W": h.W[:, perm], "head.b": h.b[perm]})
    a = head_loss(z, h, lab).loss
    b = head_loss(z, hp, inv[lab]).loss
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(KINDS))
def test_oe_term_bounded_below_by_ln_c(seed, kind):
    r = Rng(seed)
    h = make_head(kind, 4, 3, r.split(0))
    z = r.normal((5, 4)) * 3
    assert uniform_cross_entropy(z, h).loss >= math.log(3) - 1e-12


def test_oe_term_equality_only_at_uniform():
    h = head("softmax", np.eye(3))
    assert abs(uniform_cross_entropy(np.full((2, 3), 0.7), h).loss - math.log(3)) <= 1e-9
    assert uniform_cross_entropy(np.array([[0.7, 0.7, 0.71]]), h).loss - math.log(3) > 1e-9


def test_plain_logits_for_prediction(np_rng):
    z, W = np_rng.normal(size=(4, 5)), np_rng.normal(size=(5, 3))
    h = head("cosface", W, s=7.0, m=0.3)
    np.testing.assert_allclose(plain_logits(z, h), 7.0 * cosine_logits(z, h))
