import numpy as np
import pytest

from branchrl import qnet
from branchrl.featurize import BipartiteState
from branchrl.replay import Transition
from gradcheck import check_gradients, random_net
from oracles import loop_q_values
from support import random_state, random_transitions


def relu(x):
    return max(x, 0.0)


def edges_of(s):
    return [(int(i), int(j), list(f)) for i, j, f in zip(s.edge_cons, s.edge_vars, s.edge_feats)]


def permuted(s, pv, pc):
    inv_v, inv_c = np.argsort(pv), np.argsort(pc)
    return BipartiteState(s.cons_feats[pc], s.var_feats[pv], inv_c[s.edge_cons], inv_v[s.edge_vars],
                          s.edge_feats, s.candidate_mask[pv])


class TestInit:
    def test_deterministic_and_seed_dependent(self):
        a, b, c = qnet.init_params(3), qnet.init_params(3), qnet.init_params(4)
        assert qnet.params_digest(a) == qnet.params_digest(b)
        assert qnet.params_digest(a) != qnet.params_digest(c)

    def test_biases_zero_and_weights_in_range(self):
        p = qnet.init_params(0)
        for name, v in p.items():
            if v.ndim == 1:
                assert not v.any(), name
            else:
                assert np.all(np.abs(v) <= np.sqrt(1.0 / v.shape[0])), name

    def test_default_width_and_count(self):
        p = qnet.init_params(0)
        assert p["ve_b"].shape == (64,)
        assert sum(v.size for v in p.values()) == qnet.param_count(8, 4, 1, 64)


class TestForward:
    def test_hand_computed_toy(self):
        p = qnet.init_params(0, width=1)
        consts = {"ve": (0.5, 0.1), "ce": (0.25, -0.2), "ee": (1.0, 0.0)}
        for k, (w, b) in consts.items():
            p[f"{k}_W"][:] = w
            p[f"{k}_b"][:] = b
        mlp = {"gc": (0.3, -0.5, 2.0, 0.1), "fc": (-1.0, 0.4, 0.5, 0.0),
               "gv": (0.2, 0.1, -1.5, 0.3), "fv": (1.0, -0.2, 1.0, 0.05),
               "hd": (-2.0, 1.0, 3.0, -0.5)}
        for k, (w1, b1, w2, b2) in mlp.items():
            p[f"{k}_W1"][:], p[f"{k}_b1"][:] = w1, b1
            p[f"{k}_W2"][:], p[f"{k}_b2"][:] = w2, b2
        x = np.array([0.2, 0.4, 0.1, 1.0, 0.0, 1.0, 1.0, 1.0])
        cf = np.array([1.0, -0.5, 0.0, 1.0])
        s = BipartiteState(cf[None], x[None], np.array([0]), np.array([0]),
                           np.array([[2.0]]), np.array([True]))

        v0 = 0.5 * x.sum() + 0.1             # 2.0
        c0 = 0.25 * cf.sum() - 0.2           # 0.175
        e0 = 2.0
        msg_c = relu(0.3 * (c0 + v0 + e0) - 0.5) * 2.0 + 0.1
        c1 = relu(-1.0 * (c0 + msg_c) + 0.4) * 0.5
        msg_v = relu(0.2 * (c1 + v0 + e0) + 0.1) * -1.5 + 0.3
        v1 = relu(1.0 * (v0 + msg_v) - 0.2) * 1.0 + 0.05
        q = relu(-2.0 * v1 + 1.0) * 3.0 - 0.5
        assert qnet.forward(p, s)[0] == pytest.approx(q, abs=1e-14)
        assert loop_q_values(p, s.var_feats, s.cons_feats, edges_of(s))[0] == pytest.approx(q)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        p = qnet.init_params(seed, width=8)
        for v in p.values():
            v += rng.normal(scale=0.1, size=v.shape)  # nonzero biases
        states = [random_state(rng, int(rng.integers(1, 6)), int(rng.integers(1, 5)))
                  for _ in range(3)]
        got = qnet.q_values(p, states)
        want = np.concatenate([loop_q_values(p, s.var_feats, s.cons_feats, edges_of(s))
                               for s in states])
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_zero_edge_graph(self):
        rng = np.random.default_rng(0)
        p = qnet.init_params(1, width=8)
        for v in p.values():
            v += rng.normal(scale=0.1, size=v.shape)
        s = BipartiteState(rng.normal(size=(2, 4)), rng.normal(size=(3, 8)),
                           np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 1)),
                           np.ones(3, bool))
        np.testing.assert_allclose(qnet.q_values(p, s),
                                   loop_q_values(p, s.var_feats, s.cons_feats, []), rtol=1e-10)

    def test_masking(self):
        rng = np.random.default_rng(2)
        s = random_state(rng, 5, 3)
        q = qnet.forward(qnet.init_params(0, width=8), s)
        assert np.all(np.isneginf(q[~s.candidate_mask]))
        assert np.all(np.isfinite(q[s.candidate_mask]))

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = qnet.init_params(seed, width=16)
        s = random_state(rng, 7, 4)
        pv, pc = rng.permutation(7), rng.permutation(4)
        np.testing.assert_allclose(qnet.q_values(p, permuted(s, pv, pc)),
                                   qnet.q_values(p, s)[pv], rtol=1e-10, atol=1e-12)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(5)
        p = qnet.init_params(0, width=8)
        states = [random_state(rng, 4, 3) for _ in range(4)]
        np.testing.assert_array_equal(qnet.q_values(p, states),
                                      np.concatenate([qnet.q_values(p, s) for s in states]))


class TestLoss:
    def setup_method(self):
        self.rng = np.random.default_rng(11)
        self.theta = qnet.init_params(0, width=8)
        self.target = qnet.init_params(1, width=8)
        self.batch = random_transitions(self.rng, 4)

    def test_superior_equal_to_theta_adds_nothing(self):
        l1, g1 = qnet.loss_and_grads(self.theta, self.target, self.theta, self.batch, 0.9)
        l2, g2 = qnet.loss_and_grads(self.theta, self.target, None, self.batch, 0.9)
        assert l1 == l2
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])

    def test_terminal_with_matching_reward_is_zero(self):
        s = random_state(self.rng, 3, 2)
        a = int(s.candidates[0])
        r = float(qnet.q_values(self.theta, s)[a])
        t = Transition(s, a, r, None, (), True)
        loss, grads = qnet.loss_and_grads(self.theta, self.target, self.theta, [t], 0.9)
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    def test_double_dqn_target(self):
        gamma = 0.95
        sup = qnet.init_params(2, width=8)
        expected = []
        for t in self.batch:
            q = qnet.q_values(self.theta, t.state)[t.action]
            y = t.reward
            if not t.done:
                cands = list(t.next_candidates)
                a2 = cands[int(np.argmax(qnet.q_values(self.theta, t.next_state)[cands]))]
                y += gamma * qnet.q_values(self.target, t.next_state)[a2]
            qs = qnet.q_values(sup, t.state)[t.action]
            expected.append((y - q) ** 2 + 0.5 * (qs - q) ** 2)
        loss, _ = qnet.loss_and_grads(self.theta, self.target, sup, self.batch, gamma,
                                      superior_weight=0.5, need_grads=False)
        assert loss == pytest.approx(np.mean(expected), rel=1e-12)
        assert loss >= 0

    def test_prepared_batch_equivalent(self):
        pb = qnet.prepare_batch(self.batch)
        a = qnet.loss_and_grads(self.theta, self.target, None, self.batch, 0.9)
        b = qnet.loss_and_grads(self.theta, self.target, None, pb, 0.9)
        assert a[0] == b[0]

    def test_rejects_action_outside_candidates(self):
        t = self.batch[0]
        t.state.candidate_mask[t.action] = False
        with pytest.raises(ValueError):
            qnet.loss_and_grads(self.theta, self.target, None, [t], 0.9)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            qnet.loss_and_grads(self.theta, self.target, None, [], 0.9)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        theta = random_net(seed)
        worst, notes = check_gradients(theta, random_net(seed + 100),
                                       random_net(seed + 200),
                                       random_transitions(rng, 3))
        assert worst <= 1e-4, notes


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = qnet.init_params(0, width=4)
        opt = qnet.AdamState.for_params(p)
        out = qnet.adam_step(opt, p, {k: np.zeros_like(v) for k, v in p.items()}, 1e-3)
        for k in p:
            np.testing.assert_array_equal(out[k], p[k])

    def test_first_step_moves_by_lr_against_gradient(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([0.3, -4.0, 1e-3])}
        out = qnet.adam_step(qnet.AdamState.for_params(p), p, g, 0.01)
        np.testing.assert_allclose(out["w"] - p["w"], -0.01 * np.sign(g["w"]), rtol=1e-4)

    def test_quadratic_bowl_matches_scalar_reference(self):
        lr, x = 0.05, {"x": np.array([0.0])}
        opt = qnet.AdamState.for_params(x)
        m = v = 0.0
        ref = 0.0
        values = []
        for t in range(1, 101):
            g = ref - 3.0
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            x = qnet.adam_step(opt, x, {"x": x["x"] - 3.0}, lr)
            assert x["x"][0] == pytest.approx(ref, rel=1e-12)
            values.append(0.5 * (x["x"][0] - 3.0) ** 2)
        assert all(b < a for a, b in zip(values[5:], values[6:]))
        assert opt.step == 100


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = qnet.init_params(7)
        qnet.save_params(tmp_path / "p.npz", p)
        q = qnet.load_params(tmp_path / "p.npz")
        assert qnet.params_digest(p) == qnet.params_digest(q)

    def test_rejects_foreign_file(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(3))
        with pytest.raises(ValueError):
            qnet.load_params(tmp_path / "x.npz")

    def test_rejects_bad_shape(self, tmp_path):
        p = qnet.init_params(7, width=8)
        p["hd_W2"] = np.zeros((8, 2))
        qnet.save_params(tmp_path / "p.npz", p)
        with pytest.raises(ValueError, match="hd_W2"):
            qnet.load_params(tmp_path / "p.npz")
