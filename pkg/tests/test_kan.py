"""Spline basis, spline-activation layers, and the opacity/covariance heads."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat.gradcheck import gradient_errors
from anchorsplat.kan import (
    GRID_SIZE,
    SPLINE_ORDER,
    CovarianceHead,
    KanLayer,
    KanNetwork,
    OpacityHead,
    fit_spline_coefficients,
    make_knots,
    spline_basis,
)
from anchorsplat.tensor import Tensor

rng = np.random.default_rng(31)

KNOTS = make_knots()


# -- independent oracle: textbook recursive Cox-de Boor ------------------------


def cdb(i, d, x, t):
    if d == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = right = 0.0
    if t[i + d] != t[i]:
        left = (x - t[i]) / (t[i + d] - t[i]) * cdb(i, d - 1, x, t)
    if t[i + d + 1] != t[i + 1]:
        right = (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * cdb(i + 1, d - 1, x, t)
    return left + right


def basis_oracle(x, knots=KNOTS, order=SPLINE_ORDER):
    x = min(max(x, knots[order]), knots[-order - 1])
    n = len(knots) - order - 1
    return np.array([cdb(i, order, x, knots) for i in range(n)])


def silu(x):
    return x / (1.0 + np.exp(-x))


def layer_oracle(layer, z):
    """Explicit loop over outputs q, inputs p, and basis entries."""
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros((z.shape[0], layer.n_out))
    for b in range(z.shape[0]):
        for q in range(layer.n_out):
            for p in range(layer.n_in):
                bas = basis_oracle(z[b, p], layer.knots, layer.order)
                spline = float(layer.coef.data[q, p] @ bas)
                out[b, q] += (
                    layer.w_base.data[q, p] * silu(z[b, p])
                    + layer.w_spline.data[q, p] * spline
                )
    return out


def net_oracle(net, z):
    for layer in net.layers:
        z = layer_oracle(layer, z)
    return z


# -- basis ----------------------------------------------------------------------


def test_knot_grid():
    assert len(KNOTS) == GRID_SIZE + 2 * SPLINE_ORDER + 1
    assert np.all(np.diff(KNOTS) > 0)
    assert np.allclose(np.diff(KNOTS), 2.0 / GRID_SIZE)
    assert KNOTS[SPLINE_ORDER] == pytest.approx(-1.0)
    assert KNOTS[-SPLINE_ORDER - 1] == pytest.approx(1.0)


def test_order_one_interior_knot_is_one_hot():
    knots = make_knots(order=1)
    x = knots[3]  # an interior knot of the linear grid
    b = spline_basis(x, knots, order=1)
    assert b.sum() == pytest.approx(1.0)
    assert np.count_nonzero(b) == 1
    assert b.max() == pytest.approx(1.0)


def test_basis_matches_recursive_oracle():
    for x in rng.uniform(-1.0, 1.0, size=40):
        got = spline_basis(x, KNOTS)
        assert np.allclose(got, basis_oracle(x), atol=1e-12)
        assert (got >= 0).all()


def test_basis_clamps_out_of_range():
    assert np.array_equal(spline_basis(1.7, KNOTS), spline_basis(1.0, KNOTS))
    assert np.array_equal(spline_basis(-4.0, KNOTS), spline_basis(-1.0, KNOTS))


def test_basis_rejects_bad_order():
    with pytest.raises(ValueError, match="order"):
        spline_basis(0.0, KNOTS, order=0)


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
def test_partition_of_unity(x):
    assert spline_basis(x, KNOTS).sum() == pytest.approx(1.0, abs=1e-9)


def test_basis_array_shape():
    xs = rng.uniform(-1, 1, size=(4, 3))
    b = spline_basis(xs, KNOTS)
    assert b.shape == (4, 3, GRID_SIZE + SPLINE_ORDER)
    assert np.allclose(b.sum(axis=-1), 1.0)


# -- layers ------------------------------------------------------------------------


def zero_layer(n_in, n_out):
    layer = KanLayer.create(n_in, n_out, np.random.default_rng(0))
    layer.coef.data[:] = 0.0
    layer.w_base.data[:] = 0.0
    layer.w_spline.data[:] = 0.0
    return layer


def test_zero_layer_outputs_zero():
    layer = zero_layer(3, 2)
    out = layer.forward(Tensor(rng.normal(size=(5, 3))))
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_identity_fit_layer_sums_inputs():
    # Both edge activations fitted to phi(x) = x, base branch disabled.
    layer = zero_layer(2, 1)
    xs = np.linspace(-1.0, 1.0, 400)
    coef = fit_spline_coefficients(xs, xs, layer.knots, layer.order)
    layer.coef.data[0, 0] = coef
    layer.coef.data[0, 1] = coef
    layer.w_spline.data[:] = 1.0
    z = np.array([[0.3, -0.5], [-0.9, 0.7]])
    out = layer.forward(Tensor(z)).data
    assert np.allclose(out[:, 0], z.sum(axis=1), atol=1e-4)


def test_layer_matches_double_loop_oracle():
    layer = KanLayer.create(3, 2, np.random.default_rng(7))
    z = rng.uniform(-0.95, 0.95, size=(6, 3))
    assert np.allclose(layer.forward(Tensor(z)).data, layer_oracle(layer, z), atol=1e-12)


def test_forward_is_sum_of_post_activations():
    layer = KanLayer.create(4, 3, np.random.default_rng(8))
    z = rng.uniform(-0.9, 0.9, size=(5, 4))
    post = layer.post_activations(z)
    assert post.shape == (5, 3, 4)
    assert np.allclose(layer.forward(Tensor(z)).data, post.sum(axis=2), atol=1e-12)


def test_output_linear_in_post_activations():
    # Doubling every edge weight (spline and base alike) doubles the output.
    layer = KanLayer.create(3, 2, np.random.default_rng(9))
    z = Tensor(rng.uniform(-0.9, 0.9, size=(4, 3)))
    once = layer.forward(z).data.copy()
    layer.coef.data *= 2.0
    layer.w_base.data *= 2.0
    assert np.allclose(layer.forward(z).data, 2.0 * once, atol=1e-12)


# -- network -------------------------------------------------------------------------


def test_single_layer_network_equals_layer():
    net = KanNetwork.create([3, 2], np.random.default_rng(4))
    z = Tensor(rng.uniform(-0.9, 0.9, size=(5, 3)))
    assert np.array_equal(net.forward(z).data, net.layers[0].forward(z).data)


def test_two_zero_layers_output_zero():
    net = KanNetwork(layers=[zero_layer(3, 4), zero_layer(4, 2)])
    out = net.forward(Tensor(rng.normal(size=(5, 3))))
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_network_matches_composed_oracle():
    net = KanNetwork.create([2, 5, 3], np.random.default_rng(12))
    z = rng.uniform(-0.9, 0.9, size=(4, 2))
    assert np.allclose(net.forward(Tensor(z)).data, net_oracle(net, z), atol=1e-10)


def test_network_widths_and_parameters():
    net = KanNetwork.create([36, 16, 10], np.random.default_rng(0))
    assert net.widths == [36, 16, 10]
    params = net.parameters("head")
    assert "head.l0.coef" in params and "head.l1.w_base" in params
    assert params["head.l0.coef"].shape == (16, 36, GRID_SIZE + SPLINE_ORDER)


def test_network_gradients_match_central_differences():
    net = KanNetwork.create([2, 4, 3], np.random.default_rng(13))
    z = Tensor(rng.uniform(-0.85, 0.85, size=(5, 2)), requires_grad=True)
    target = rng.normal(size=(5, 3))

    def loss_fn():
        d = net.forward(z) - Tensor(target)
        return (d * d).sum()

    leaves = dict(net.parameters("net"))
    leaves["input"] = z
    assert gradient_errors(loss_fn, leaves) == {}


# -- opacity head ----------------------------------------------------------------------


def zeroed_head(head):
    for t in head.parameters().values():
        t.data[:] = 0.0
    return head


def test_zero_opacity_head_retains_all_at_zero_tau():
    head = zeroed_head(OpacityHead.create(k=4, rng=np.random.default_rng(0), tau=0.0))
    alpha, mask = head.forward(Tensor(rng.normal(size=(3, 36))))
    assert np.array_equal(alpha.data, np.zeros((3, 4)))
    assert mask.all()  # boundary inclusive: alpha == tau keeps


def test_opacity_range_and_mask_oracle():
    head = OpacityHead.create(k=5, rng=np.random.default_rng(3), tau=0.05)
    f_in = Tensor(rng.normal(size=(6, 36)) * 2.0)
    alpha, mask = head.forward(f_in)
    assert (np.abs(alpha.data) <= 1.0).all()
    oracle = np.tanh(net_oracle(head.net, np.tanh(f_in.data)))
    assert np.allclose(alpha.data, oracle, atol=1e-10)
    assert np.array_equal(mask, oracle >= 0.05)


def test_opacity_strictly_inside_for_moderate_inputs():
    # At representative input magnitudes the logits stay well below the
    # float64 tanh saturation point, so the bound is strict.
    head = OpacityHead.create(k=5, rng=np.random.default_rng(4))
    alpha, _ = head.forward(Tensor(rng.normal(size=(8, 36)) * 0.1))
    assert (np.abs(alpha.data) < 1.0).all()


def test_opacity_mask_monotone_in_tau():
    head = OpacityHead.create(k=6, rng=np.random.default_rng(5))
    f_in = Tensor(rng.normal(size=(4, 36)))
    masks = []
    for tau in (-0.5, 0.0, 0.1, 0.5):
        head.tau = tau
        masks.append(head.forward(f_in)[1])
    for lo, hi in zip(masks, masks[1:]):
        assert (hi <= lo).all()  # raising tau never adds Gaussians


# -- covariance head ------------------------------------------------------------------------


def test_zero_covariance_head_midpoint_scale_and_identity_fallback():
    head = zeroed_head(CovarianceHead.create(k=3, rng=np.random.default_rng(0)))
    base = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)))
    scales, quats = head.forward(Tensor(rng.normal(size=(4, 36))), base)
    assert np.allclose(scales.data, 0.5 * base.data[:, None, :])
    assert np.allclose(quats.data, np.broadcast_to([1.0, 0, 0, 0], (4, 3, 4)))
    assert head.fallback_count == 4 * 3


def test_covariance_head_bounds_and_unit_norm():
    head = CovarianceHead.create(k=4, rng=np.random.default_rng(6))
    base = Tensor(rng.uniform(0.2, 3.0, size=(5, 3)))
    scales, quats = head.forward(Tensor(rng.normal(size=(5, 36)) * 0.3), base)
    assert (scales.data > 0).all()
    assert (scales.data < base.data[:, None, :]).all()
    assert np.allclose(np.linalg.norm(quats.data, axis=2), 1.0, atol=1e-7)
    assert head.fallback_count == 0
    # Extreme inputs can saturate the sigmoid in float64; the bound then
    # degrades to <= but scales never exceed the anchor scale.
    wild, _ = head.forward(Tensor(rng.normal(size=(5, 36)) * 3.0), base)
    assert (wild.data <= base.data[:, None, :]).all()


def test_covariance_head_matches_loop_oracle():
    head = CovarianceHead.create(k=2, rng=np.random.default_rng(14))
    f_in = rng.normal(size=(3, 36))
    base = rng.uniform(0.5, 1.5, size=(3, 3))
    scales, quats = head.forward(Tensor(f_in), Tensor(base))
    raw = net_oracle(head.net, np.tanh(f_in)).reshape(3, 2, 7)
    for n in range(3):
        for j in range(2):
            s = base[n] / (1.0 + np.exp(-raw[n, j, :3]))
            q = raw[n, j, 3:]
            q = q / np.linalg.norm(q)
            assert np.allclose(scales.data[n, j], s, atol=1e-10)
            assert np.allclose(quats.data[n, j], q, atol=1e-10)


def test_covariance_head_gradients():
    head = CovarianceHead.create(k=2, rng=np.random.default_rng(15), hidden=4)
    f_in = Tensor(rng.normal(size=(2, 36)), requires_grad=True)
    base = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)

    def loss_fn():
        scales, quats = head.forward(f_in, base)
        return (scales * scales).sum() + (quats * Tensor(weights)).sum()

    weights = rng.normal(size=(2, 2, 4))
    leaves = {"f_in": f_in, "base": base, **head.parameters()}
    assert gradient_errors(loss_fn, leaves) == {}
