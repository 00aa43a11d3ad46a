import numpy as np
import pytest

from branchrl.engine import BranchAndBound, branch
from branchrl.featurize import CONS_FEATS, VAR_FEATS, extract
from branchrl.instances import MilpInstance, generate_knapsack_like, generate_set_cover
from support import fractional_root


def root(inst):
    tree = BranchAndBound(inst)
    node = tree.start()
    assert node is not None
    return node, tree.current_candidates


def test_shapes_and_edges():
    inst = generate_set_cover(20, 20, 0.5, 1, cost_max=1)
    node, cands = root(inst)
    s = extract(node, inst, cands)
    assert s.var_feats.shape == (20, len(VAR_FEATS))
    assert s.cons_feats.shape == (20, len(CONS_FEATS))
    assert s.edge_feats.shape == (len(inst.vals), 1)
    np.testing.assert_array_equal(s.candidates, cands)
    assert np.all(np.isfinite(s.var_feats)) and np.all(np.isfinite(s.cons_feats))


def test_fractionality_and_flags():
    # one fractional variable, one at its upper bound, one continuous
    inst = MilpInstance.from_dense([-1.0, -1.0, 0.0], [[2.0, 0.0, 0.0]], [1.0],
                                   [0, 0, 0], [1, 1, np.inf], [True, True, False])
    node, cands = root(inst)
    s = extract(node, inst, cands)
    V = dict(zip(VAR_FEATS, s.var_feats.T))
    assert V["fractionality"][0] == pytest.approx(0.5)
    assert V["fractionality"][2] == 0.0
    np.testing.assert_array_equal(V["is_integer"], [1, 1, 0])
    np.testing.assert_array_equal(V["at_upper"][:2], [0, 1])
    np.testing.assert_array_equal(V["has_upper"], [1, 1, 0])
    C = dict(zip(CONS_FEATS, s.cons_feats.T))
    assert C["is_tight"][0] == 1.0
    assert C["dual_sign"][0] == 1.0


def test_branched_bounds_are_reflected():
    inst = fractional_root(lambda k: generate_knapsack_like(8, 1, k))
    node, cands = root(inst)
    down, _ = branch(node, cands[0], inst)
    down.lp = node.lp
    s = extract(down, inst)
    assert s.var_feats[cands[0], VAR_FEATS.index("at_upper")] == 0.0
    assert not s.candidate_mask.any()


def test_objective_scaling_invariance():
    inst = fractional_root(lambda k: generate_set_cover(12, 14, 0.4, k), 5)
    scaled = MilpInstance.from_dense(inst.obj * 37.5, inst.dense(), inst.rhs,
                                     inst.lower, inst.upper, inst.integer_mask)
    n1, c1 = root(inst)
    n2, c2 = root(scaled)
    np.testing.assert_allclose(n1.lp.x, n2.lp.x, atol=1e-9)
    a, b = extract(n1, inst, c1), extract(n2, scaled, c2)
    np.testing.assert_allclose(a.var_feats, b.var_feats, atol=1e-9)
    np.testing.assert_allclose(a.cons_feats, b.cons_feats, atol=1e-9)


def test_row_scaling_invariance_of_edges():
    inst = fractional_root(lambda k: generate_set_cover(10, 12, 0.4, k), 6)
    A = inst.dense() * 4.0
    scaled = MilpInstance.from_dense(inst.obj, A, inst.rhs * 4.0,
                                     inst.lower, inst.upper, inst.integer_mask)
    a = extract(root(inst)[0], inst)
    b = extract(root(scaled)[0], scaled)
    np.testing.assert_allclose(a.edge_feats, b.edge_feats)


def test_permutation_equivariance():
    inst = fractional_root(lambda k: generate_set_cover(10, 12, 0.4, k), 7)
    rng = np.random.default_rng(1)
    pv, pc = rng.permutation(inst.n_vars), rng.permutation(inst.n_cons)
    A = inst.dense()
    permuted = MilpInstance.from_dense(inst.obj[pv], A[np.ix_(pc, pv)], inst.rhs[pc],
                                       inst.lower[pv], inst.upper[pv], inst.integer_mask[pv])
    n1, c1 = root(inst)
    n2, c2 = root(permuted)
    if not np.allclose(n1.lp.x[pv], n2.lp.x, atol=1e-9):
        pytest.skip("alternative LP optimum under relabelling")
    a, b = extract(n1, inst, c1), extract(n2, permuted, c2)
    np.testing.assert_allclose(a.var_feats[pv], b.var_feats, atol=1e-9)
    np.testing.assert_allclose(a.cons_feats[pc, :3], b.cons_feats[:, :3], atol=1e-9)
    np.testing.assert_array_equal(a.candidate_mask[pv], b.candidate_mask)
    edges_a = {(int(i), int(j)): e for i, j, e in zip(a.edge_cons, a.edge_vars, a.edge_feats[:, 0])}
    for i, j, e in zip(b.edge_cons, b.edge_vars, b.edge_feats[:, 0]):
        assert edges_a[(int(pc[i]), int(pv[j]))] == pytest.approx(e)


def test_features_bounded_on_many_instances():
    for seed in range(20):
        inst = generate_knapsack_like(12, 3, seed)
        tree = BranchAndBound(inst)
        node = tree.start()
        if node is None:
            continue
        s = extract(node, inst, tree.current_candidates)
        assert np.all(np.abs(s.var_feats) <= 1.0 + 1e-12)
        assert np.all(np.isfinite(s.cons_feats))
        assert np.all(np.abs(s.cons_feats[:, 1:]) <= 1.0 + 1e-12)
