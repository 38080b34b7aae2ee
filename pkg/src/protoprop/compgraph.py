"""Bipartite primitive/composition graph and linear two-layer propagation.

Node order is ``[attributes | objects | compositions]``.  Primitive nodes
carry the attribute and object prototypes, composition nodes start at zero,
and two GCN layers without nonlinearities produce one prototype per
composition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numgrad as ng
from .errors import ContractError, ShapeError
from .numgrad import Tensor
from .synthdata import CompositionalLabel, PrimitiveVocab


@dataclass
class CompositionGraph:
    vocab: PrimitiveVocab
    compositions: list  # CompositionalLabel per composition node
    adjacency: np.ndarray  # (n, n) symmetric 0/1

    @property
    def n_attrs(self) -> int:
        return self.vocab.n_attrs

    @property
    def n_objs(self) -> int:
        return self.vocab.n_objs

    @property
    def n_primitives(self) -> int:
        return self.n_attrs + self.n_objs

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Undirected (primitive node, composition node) pairs."""
        rows, cols = np.nonzero(np.triu(self.adjacency))
        return [(int(r), int(c)) for r, c in zip(rows, cols)]

    def composition_node(self, i: int) -> int:
        return self.n_primitives + i


def build_graph(vocab: PrimitiveVocab, compositions: Sequence[CompositionalLabel]) -> CompositionGraph:
    comps = list(compositions)
    if len(set(comps)) != len(comps):
        raise ContractError("duplicate composition in graph")
    na, no = vocab.n_attrs, vocab.n_objs
    n = na + no + len(comps)
    adj = np.zeros((n, n))
    for i, c in enumerate(comps):
        c.validate(vocab)
        node = na + no + i
        for prim in (c.attr, na + c.obj):
            adj[prim, node] = adj[node, prim] = 1.0
    return CompositionGraph(vocab, comps, adj)


def normalize_adjacency(g: CompositionGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the row sums of A + I."""
    a_hat = g.adjacency + np.eye(g.n_nodes)
    d = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def init_node_features(g: CompositionGraph, attr_prototypes, obj_prototypes) -> Tensor:
    pa, po = ng.as_tensor(attr_prototypes), ng.as_tensor(obj_prototypes)
    if pa.shape[0] != g.n_attrs or po.shape[0] != g.n_objs:
        raise ShapeError("prototype counts do not match the graph's primitives")
    if pa.shape[1] != po.shape[1]:
        raise ShapeError(f"prototype widths differ: {pa.shape[1]} vs {po.shape[1]}")
    zeros = Tensor(np.zeros((len(g.compositions), pa.shape[1])))
    return ng.concat([pa, po, zeros], axis=0)


@dataclass
class PropagationWeights:
    theta1: Tensor  # (C, d_h)
    theta2: Tensor  # (d_h, C_out)

    @classmethod
    def init(cls, dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> "PropagationWeights":
        def glorot(fan_in, fan_out, name):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)

        return cls(glorot(dim, hidden, "graph.theta1"), glorot(hidden, out_dim, "graph.theta2"))

    def parameters(self) -> list:
        return [self.theta1, self.theta2]


def propagate(x, a_norm, weights: PropagationWeights, n_compositions: Optional[int] = None) -> Tensor:
    """A (A X T1) T2, returning the composition-node rows (the last ``n_compositions``)."""
    x = ng.as_tensor(x)
    a = ng.as_tensor(a_norm)
    if a.shape[0] != a.shape[1] or a.shape[1] != x.shape[0]:
        raise ShapeError(f"adjacency {a.shape} does not match node features {x.shape}")
    if x.shape[1] != weights.theta1.shape[0] or weights.theta1.shape[1] != weights.theta2.shape[0]:
        raise ShapeError("propagation weight shapes do not chain with the node features")
    h = a @ (x @ weights.theta1)
    out = a @ (h @ weights.theta2)
    if n_compositions is None:
        return out
    return out[x.shape[0] - n_compositions :]


def compositional_prototypes(g: CompositionGraph, attr_prototypes, obj_prototypes, weights, a_norm=None) -> Tensor:
    a_norm = normalize_adjacency(g) if a_norm is None else a_norm
    x = init_node_features(g, attr_prototypes, obj_prototypes)
    return propagate(x, a_norm, weights, len(g.compositions))


def comp_scores(cp, pooled_feature) -> Tensor:
    """<cp[y], f> for every composition; ``pooled_feature`` is (C,) or (B, C)."""
    cp, f = ng.as_tensor(cp), ng.as_tensor(pooled_feature)
    if f.shape[-1] != cp.shape[1]:
        raise ShapeError(f"pooled feature width {f.shape[-1]} != prototype width {cp.shape[1]}")
    if f.ndim == 1:
        return (cp @ f.reshape(-1, 1)).reshape(cp.shape[0])
    return f @ cp.T


def classify(s_c) -> int:
    """Index of the highest score; ties go to the lowest index."""
    s = np.asarray(s_c.data if isinstance(s_c, Tensor) else s_c)
    if s.size == 0:
        raise ContractError("no compositions to classify")
    return int(np.argmax(s))


def export_edge_list(g: CompositionGraph, path=None) -> str:
    """One ``attr:<name> comp:<attr,obj>`` / ``obj:<name> comp:<attr,obj>`` line per edge."""
    v = g.vocab
    lines = []
    for i, c in enumerate(g.compositions):
        comp = f"comp:{v.attributes[c.attr]},{v.objects[c.obj]}"
        lines.append(f"attr:{v.attributes[c.attr]} {comp}")
        lines.append(f"obj:{v.objects[c.obj]} {comp}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_edge_list(text: str, vocab: PrimitiveVocab) -> CompositionGraph:
    comps = []
    for line in text.splitlines():
        if not line.strip():
            continue
        _, comp = line.split()
        attr_name, obj_name = comp[len("comp:") :].split(",")
        label = CompositionalLabel(vocab.attributes.index(attr_name), vocab.objects.index(obj_name))
        if label not in comps:
            comps.append(label)
    return build_graph(vocab, comps)
