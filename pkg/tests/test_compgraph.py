import numpy as np
import pytest

from protoprop.compgraph import (
    PropagationWeights,
    build_graph,
    classify,
    comp_scores,
    compositional_prototypes,
    export_edge_list,
    init_node_features,
    normalize_adjacency,
    parse_edge_list,
    propagate,
)
from protoprop.errors import ContractError, ShapeError
from protoprop.numgrad import Tensor, fd_check
from protoprop.protolayer import ce_loss
from protoprop.synthdata import CompositionalLabel, default_vocab


def all_pairs(vocab):
    return [CompositionalLabel(a, o) for a in range(vocab.n_attrs) for o in range(vocab.n_objs)]


def test_tiny_graph_normalization():
    v = default_vocab(2, 2)
    g = build_graph(v, [CompositionalLabel(0, 0)])
    assert g.n_nodes == 5 and g.edges == [(0, 4), (2, 4)]
    a = normalize_adjacency(g)
    # composition node has degree 3 (two edges + self loop), attr 0 has degree 2
    assert a[4, 4] == pytest.approx(1 / 3)
    assert a[0, 4] == pytest.approx(1 / np.sqrt(6))
    assert a[1, 1] == 1.0
    np.testing.assert_array_equal(a, a.T)


def test_spectrum_bounded():
    v = default_vocab()
    a = normalize_adjacency(build_graph(v, all_pairs(v)))
    eig = np.linalg.eigvalsh(a)
    assert eig.max() == pytest.approx(1.0, abs=1e-12) and eig.min() >= -1 - 1e-12


def test_full_grid_counts():
    v = default_vocab()
    g = build_graph(v, all_pairs(v))
    assert g.n_nodes == 35 and len(g.edges) == 48


def test_duplicates_rejected():
    v = default_vocab(2, 2)
    with pytest.raises(ContractError):
        build_graph(v, [CompositionalLabel(0, 0), CompositionalLabel(0, 0)])


def test_propagate_vs_dense():
    rng = np.random.default_rng(0)
    v = default_vocab(4, 3)
    comps = [CompositionalLabel(a, o) for a, o in [(0, 0), (1, 2), (3, 1), (2, 2), (0, 1)]]
    g = build_graph(v, comps)
    pa, po = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    w = PropagationWeights.init(6, 5, 6, rng)
    x = np.vstack([pa, po, np.zeros((5, 6))])
    a = normalize_adjacency(g)
    dense = a @ (a @ x @ w.theta1.data) @ w.theta2.data
    got = compositional_prototypes(g, pa, po, w).data
    np.testing.assert_allclose(got, dense[-5:], atol=1e-12)
    np.testing.assert_allclose(propagate(x, a, w).data, dense, atol=1e-12)


def test_shape_errors():
    rng = np.random.default_rng(1)
    v = default_vocab(2, 2)
    g = build_graph(v, [CompositionalLabel(0, 0)])
    w = PropagationWeights.init(3, 4, 3, rng)
    with pytest.raises(ShapeError):
        init_node_features(g, np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        propagate(np.zeros((4, 3)), normalize_adjacency(g), w)


def test_scores_and_classify():
    cp = np.array([[1.0, 0], [0, 1], [1, 1]])
    np.testing.assert_array_equal(comp_scores(cp, np.array([2.0, 1.0])).data, [2, 1, 3])
    np.testing.assert_array_equal(comp_scores(cp, np.array([[2.0, 1.0]])).data, [[2, 1, 3]])
    assert classify([0.5, 0.9, 0.9]) == 1
    with pytest.raises(ContractError):
        classify([])


def test_gradient_through_propagation():
    rng = np.random.default_rng(2)
    v = default_vocab(3, 2)
    g = build_graph(v, all_pairs(v))
    pa = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    po = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = PropagationWeights.init(4, 5, 4, rng)
    f = rng.normal(size=(3, 4))
    y = [0, 5, 2]
    err = fd_check(lambda: ce_loss(comp_scores(compositional_prototypes(g, pa, po, w), f), y), [pa, po, *w.parameters()])
    assert err < 1e-6


def test_edge_list_roundtrip(tmp_path):
    v = default_vocab()
    comps = all_pairs(v)[::3]
    g = build_graph(v, comps)
    text = export_edge_list(g, tmp_path / "g.txt")
    assert text.splitlines()[0] == "attr:red comp:red,sphere"
    assert text.splitlines()[1] == "obj:sphere comp:red,sphere"
    back = parse_edge_list((tmp_path / "g.txt").read_text(), v)
    assert back.compositions == comps
    np.testing.assert_array_equal(back.adjacency, g.adjacency)
