import numpy as np
import pytest

from metarec.errors import ConfigError, DataError, NumericError
from metarec.params import ParamSet
from metarec.model import (
    ModelSpec,
    forward,
    grad,
    hvp,
    init_params,
    loss,
    user_embedding,
)


def tiny_spec(output_kind="rating-regression"):
    d = 1 if output_kind == "rating-regression" else 2
    return ModelSpec(
        user_vocab_sizes=(3, 2),
        item_vocab_sizes=(4,),
        embedding_dim=2,
        decision_dims=(5, 3, d),
        output_kind=output_kind,
    )


def random_episode(spec, rng, n_items=4, kind="mse"):
    user = np.array([rng.integers(v) for v in spec.user_vocab_sizes])
    items = np.column_stack([rng.integers(v, size=n_items) for v in spec.item_vocab_sizes])
    if kind == "mse":
        targets = rng.normal(size=n_items)
    else:
        targets = rng.integers(2, size=n_items).astype(float)
    return user, items, targets


def fd_gradient(fn, theta, eps=1e-6):
    """Central finite differences of a scalar function over a ParamSet."""
    flat = theta.to_flat()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        out[i] = (fn(theta.from_flat(up)) - fn(theta.from_flat(down))) / (2 * eps)
    return out


class TestModelSpec:
    def test_rating_head_must_be_scalar(self):
        with pytest.raises(ConfigError):
            ModelSpec((2,), (2,), 2, (4, 3), "rating-regression")

    def test_ctr_head_must_be_pairs(self):
        with pytest.raises(ConfigError):
            ModelSpec((2,), (2,), 2, (4, 1), "ctr-softmax")

    def test_fused_width(self):
        spec = tiny_spec()
        assert spec.fused_width == 3 * 2
        assert spec.user_width == 2 * 2


class TestForward:
    def test_matches_straight_line_recomputation(self):
        """Layer-by-layer scalar re-evaluation of the same weights."""
        spec = tiny_spec()
        theta = init_params(spec, seed=7)
        rng = np.random.default_rng(0)
        user, items, _ = random_episode(spec, rng, n_items=3)
        preds, h = forward(theta, spec, user, items)

        for row in range(3):
            x = list(theta["emb_user_0"][user[0]]) + list(theta["emb_user_1"][user[1]])
            x += list(theta["emb_item_0"][items[row, 0]])
            for layer in range(3):
                w = theta[f"dec_W{layer}"]
                b = theta[f"dec_b{layer}"]
                z = [sum(w[o][k] * x[k] for k in range(len(x))) + b[o] for o in range(w.shape[0])]
                x = [max(v, 0.0) for v in z] if layer < 2 else z
            assert preds[row] == pytest.approx(x[0], rel=1e-12)
        np.testing.assert_array_equal(
            h, np.concatenate([theta["emb_user_0"][user[0]], theta["emb_user_1"][user[1]]])
        )

    def test_zero_theta_gives_zero_predictions(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=0).fill(0.0)
        preds, _ = forward(theta, spec, np.array([0, 0]), np.array([[0], [1]]))
        np.testing.assert_array_equal(preds, np.zeros(2))

    def test_ctr_rows_are_probabilities(self):
        spec = tiny_spec("ctr-softmax")
        theta = init_params(spec, seed=1)
        preds, _ = forward(theta, spec, np.array([1, 0]), np.array([[2], [3], [0]]))
        assert preds.shape == (3, 2)
        np.testing.assert_allclose(preds.sum(axis=1), np.ones(3), rtol=1e-12)
        assert np.all(preds > 0)

    def test_deterministic_bit_identical(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=3)
        a, _ = forward(theta, spec, np.array([2, 1]), np.array([[0], [3]]))
        b, _ = forward(theta, spec, np.array([2, 1]), np.array([[0], [3]]))
        np.testing.assert_array_equal(a, b)
        t1 = init_params(spec, seed=3)
        for name in theta:
            np.testing.assert_array_equal(theta[name], t1[name])

    def test_out_of_vocabulary_rejected(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=0)
        with pytest.raises(DataError):
            forward(theta, spec, np.array([3, 0]), np.array([[0]]))
        with pytest.raises(DataError):
            forward(theta, spec, np.array([0, 0]), np.array([[4]]))

    def test_layout_mismatch_rejected(self):
        spec = tiny_spec()
        other = ModelSpec((3, 2), (4,), 2, (6, 3, 1))
        theta = init_params(other, seed=0)
        with pytest.raises(ConfigError):
            forward(theta, spec, np.array([0, 0]), np.array([[0]]))

    def test_non_finite_layer_reported(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=0)
        theta["dec_W1"] = theta["dec_W1"] * np.inf
        with pytest.raises(NumericError, match="layer 1"):
            forward(theta, spec, np.array([0, 0]), np.array([[0]]))

    def test_empty_item_set_rejected(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=0)
        with pytest.raises(DataError):
            forward(theta, spec, np.array([0, 0]), np.zeros((0, 1), dtype=int))

    def test_user_embedding_matches_forward(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=5)
        _, h = forward(theta, spec, np.array([1, 1]), np.array([[0]]))
        np.testing.assert_array_equal(h, user_embedding(theta, spec, np.array([1, 1])))


class TestLoss:
    def test_mse_example(self):
        assert loss("mse", np.array([3.0, 1.0]), np.array([1.0, 3.0])) == 4.0

    def test_mse_zero_on_match(self):
        assert loss("mse", np.array([2.0, 2.0]), np.array([2.0, 2.0])) == 0.0

    def test_nel_perfect_click_is_zero(self):
        assert loss("weighted-nel", np.array([[0.0, 1.0]]), np.array([1.0])) == 0.0

    def test_nel_clicked_item_weighting(self):
        p = np.array([[1 - np.exp(-1), np.exp(-1)]])
        assert loss("weighted-nel", p, np.array([1.0])) == pytest.approx(0.9, rel=1e-12)

    def test_nel_non_clicked_contributes_zero(self):
        p = np.array([[0.7, 0.3]])
        assert loss("weighted-nel", p, np.array([0.0])) == 0.0

    def test_nel_clamps_tiny_probabilities(self):
        p = np.array([[1.0, 0.0]])
        val = loss("weighted-nel", p, np.array([1.0]))
        assert np.isfinite(val)
        assert val == pytest.approx(0.9 * -np.log(1e-12), rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            loss("mse", np.zeros(0), np.zeros(0))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            loss("mae", np.zeros(1), np.zeros(1))


class TestGrad:
    @pytest.mark.parametrize("kind", ["mse", "weighted-nel"])
    def test_matches_finite_differences(self, kind):
        output = "rating-regression" if kind == "mse" else "ctr-softmax"
        spec = tiny_spec(output)
        rng = np.random.default_rng(11)
        theta = init_params(spec, seed=11)
        batch = [random_episode(spec, rng, n_items=4, kind=kind) for _ in range(2)]

        g = grad(theta, spec, batch, kind)

        def objective(t):
            return grad(t, spec, batch, kind).loss

        fd = fd_gradient(objective, theta)
        np.testing.assert_allclose(g.to_flat(), fd, rtol=1e-4, atol=1e-8)

    def test_loss_value_attached(self):
        spec = tiny_spec()
        rng = np.random.default_rng(2)
        theta = init_params(spec, seed=2)
        user, items, targets = random_episode(spec, rng)
        g = grad(theta, spec, (user, items, targets), "mse")
        preds, _ = forward(theta, spec, user, items)
        assert g.loss == pytest.approx(loss("mse", preds, targets), rel=1e-14)

    def test_pooled_batch_loss_is_item_mean(self):
        spec = tiny_spec()
        rng = np.random.default_rng(4)
        theta = init_params(spec, seed=4)
        e1 = random_episode(spec, rng, n_items=2)
        e2 = random_episode(spec, rng, n_items=6)
        pooled = grad(theta, spec, [e1, e2], "mse").loss
        p1, _ = forward(theta, spec, e1[0], e1[1])
        p2, _ = forward(theta, spec, e2[0], e2[1])
        preds = np.concatenate([p1, p2])
        targets = np.concatenate([e1[2], e2[2]])
        assert pooled == pytest.approx(loss("mse", preds, targets), rel=1e-14)

    def test_relu_subgradient_zero_at_zero(self):
        # all-zero parameters leave every pre-activation at exactly 0, so the
        # only surviving gradient path is the output bias
        spec = tiny_spec()
        theta = init_params(spec, seed=0).fill(0.0)
        g = grad(theta, spec, (np.array([0, 0]), np.array([[0]]), np.array([3.0])), "mse")
        for name in g:
            if name == "dec_b2":
                np.testing.assert_allclose(g[name], np.array([-6.0]))
            else:
                np.testing.assert_array_equal(g[name], np.zeros_like(g[name]))

    def test_gradient_deterministic(self):
        spec = tiny_spec()
        rng = np.random.default_rng(9)
        theta = init_params(spec, seed=9)
        ep = random_episode(spec, rng)
        a = grad(theta, spec, ep, "mse").to_flat()
        b = grad(theta, spec, ep, "mse").to_flat()
        np.testing.assert_array_equal(a, b)


class TestHvp:
    @pytest.mark.parametrize("kind", ["mse", "weighted-nel"])
    def test_matches_grad_differencing(self, kind):
        output = "rating-regression" if kind == "mse" else "ctr-softmax"
        spec = tiny_spec(output)
        rng = np.random.default_rng(21)
        theta = init_params(spec, seed=21)
        batch = [random_episode(spec, rng, n_items=5, kind=kind)]
        v = theta.from_flat(rng.normal(size=theta.size()))

        exact = hvp(theta, spec, batch, kind, v)

        eps = 1e-6
        up = grad(theta.from_flat(theta.to_flat() + eps * v.to_flat()), spec, batch, kind)
        down = grad(theta.from_flat(theta.to_flat() - eps * v.to_flat()), spec, batch, kind)
        approx = (up.to_flat() - down.to_flat()) / (2 * eps)
        np.testing.assert_allclose(exact.to_flat(), approx, rtol=1e-3, atol=1e-6)

    def test_symmetry_of_quadratic_form(self):
        # u . (H v) == v . (H u) for an exact Hessian
        spec = tiny_spec()
        rng = np.random.default_rng(33)
        theta = init_params(spec, seed=33)
        batch = [random_episode(spec, rng, n_items=3)]
        u = theta.from_flat(rng.normal(size=theta.size()))
        v = theta.from_flat(rng.normal(size=theta.size()))
        left = u.dot(hvp(theta, spec, batch, "mse", v))
        right = v.dot(hvp(theta, spec, batch, "mse", u))
        assert left == pytest.approx(right, rel=1e-10)

    def test_zero_vector_gives_zero(self):
        spec = tiny_spec()
        rng = np.random.default_rng(5)
        theta = init_params(spec, seed=5)
        batch = [random_episode(spec, rng)]
        out = hvp(theta, spec, batch, "mse", theta.zeros_like())
        assert out.norm() == 0.0

    def test_layout_mismatch_rejected(self):
        spec = tiny_spec()
        theta = init_params(spec, seed=0)
        with pytest.raises(ConfigError):
            hvp(theta, spec, (np.array([0, 0]), np.array([[0]]), np.array([1.0])), "mse", ParamSet({"x": np.zeros(2)}))
