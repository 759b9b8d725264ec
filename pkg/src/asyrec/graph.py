"""Node-edge attention graph layer over two persons' modality nodes.

Shapes: node sets are ``(..., r, d)`` with rows ordered face, body, audio,
text.  Edge weights are ``(..., r, r)`` indexed ``[source u, target v]``;
``edge_attention(src, tgt)`` scores edges flowing from ``src`` nodes into
``tgt`` nodes and normalises over sources for every target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("face", "body", "audio", "text")
MODALITY_CODES = {"F": 0, "B": 1, "A": 2, "T": 3}
R = len(MODALITIES)


@dataclass
class NeAgnParams:
    """Learnable tensors of one graph layer.

    ``omega`` is ``(2, r, d)`` (person i, person j), ``proj`` is ``(d', d)``
    and ``phi`` is ``(r, r, 2d')``; ``phi[u, v]`` scores the concatenation
    ``[proj @ src_u, proj @ tgt_v]``.  Diagonal entries of ``phi`` are unused.
    """

    omega: Tensor
    proj: Tensor
    phi: Tensor
    slope: float = 0.01

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, d_proj: int | None = None,
             r: int = R, slope: float = 0.01) -> "NeAgnParams":
        dp = d if d_proj is None else d_proj
        bound = 1.0 / np.sqrt(d)
        phi = rng.uniform(-1.0, 1.0, size=(r, r, 2 * dp)) / np.sqrt(2 * dp)
        phi[np.arange(r), np.arange(r)] = 0.0
        return cls(
            omega=Tensor(rng.uniform(-bound, bound, size=(2, r, d)), requires_grad=True),
            proj=Tensor(rng.uniform(-bound, bound, size=(dp, d)), requires_grad=True),
            phi=Tensor(phi, requires_grad=True),
            slope=slope,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"node.omega": self.omega, "edge.proj": self.proj, "edge.phi": self.phi}


def build_adjacency(r: int = R) -> np.ndarray:
    """Cross-person adjacency: 1 between modalities u != v, 0 on the diagonal."""
    if r < 2:
        raise ValueError(f"need at least 2 modalities, got {r}")
    return 1.0 - np.eye(r)


def node_attention(h: Tensor, omega: Tensor, slope: float = 0.01) -> Tensor:
    """One weight per modality: softmax over rows of LeakyReLU(<h_r, omega_r>)."""
    if h.shape[-2:] != omega.shape[-2:]:
        raise ValueError(f"node set {h.shape} does not match omega {omega.shape}")
    logits = T.reduce_sum(h * omega, axis=-1)
    return T.softmax(T.leaky_relu(logits, slope), axis=-1)


def node_residual_update(h: Tensor, w: Tensor) -> Tensor:
    """h_r + h_r * w_r."""
    return h * (1.0 + T.reshape(w, w.shape + (1,)))


def edge_logits(src: Tensor, tgt: Tensor, proj: Tensor, phi: Tensor) -> Tensor:
    """``logit[..., u, v] = <phi[u, v], [proj src_u ; proj tgt_v]>``."""
    dp = proj.shape[0]
    ps = T.matmul(src, T.transpose(proj))
    pt = T.matmul(tgt, T.transpose(proj))
    lead = ps.shape[:-2]
    r = ps.shape[-2]
    phi_src = phi[:, :, :dp]
    phi_tgt = phi[:, :, dp:]
    a = T.reduce_sum(T.reshape(ps, lead + (r, 1, dp)) * phi_src, axis=-1)
    b = T.reduce_sum(T.reshape(pt, lead + (1, r, dp)) * phi_tgt, axis=-1)
    return a + b


def edge_attention(src: Tensor, tgt: Tensor, params: NeAgnParams, adjacency: np.ndarray,
                   edge_mask: np.ndarray | None = None, renormalize: bool = True) -> Tensor:
    """Edge weights for flow ``src -> tgt``, softmax over sources per target.

    ``edge_mask`` (r x r, 1 = keep) removes further edges at inference. With
    ``renormalize=False`` the weights are computed on ``adjacency`` alone and
    the removed entries are zeroed afterwards, leaving sub-stochastic columns.
    """
    logits = edge_logits(src, tgt, params.proj, params.phi)
    allowed = adjacency > 0
    if edge_mask is None:
        return T.masked_softmax(logits, allowed, axis=-2)
    keep = allowed & (np.asarray(edge_mask) > 0)
    if renormalize:
        return T.masked_softmax(logits, keep, axis=-2)
    return T.masked_softmax(logits, allowed, axis=-2) * keep.astype(float)


def uniform_edges(adjacency: np.ndarray, lead: tuple[int, ...] = ()) -> Tensor:
    """Uniform weights over the admissible sources of every target."""
    cols = adjacency.sum(axis=0, keepdims=True)
    beta = adjacency / np.where(cols > 0, cols, 1.0)
    return T.constant(np.broadcast_to(beta, lead + beta.shape).copy())


def message_update(hb_i: Tensor, hb_j: Tensor, beta_ij: Tensor, beta_ji: Tensor,
                   adjacency: np.ndarray, aggregate: str = "counterpart") -> tuple[Tensor, Tensor]:
    """ReLU of attention-weighted sums of source nodes, per target node.

    ``aggregate="counterpart"`` gives ``i`` the counterpart's nodes weighted by
    ``beta_ji`` (and symmetrically for ``j``).  ``"self"`` aggregates each
    person's own nodes with the same weights, the literal printed form.
    """
    a = T.constant(adjacency)
    w_ji = T.transpose(beta_ji * a, _swap_last(beta_ji.ndim))
    w_ij = T.transpose(beta_ij * a, _swap_last(beta_ij.ndim))
    if aggregate == "counterpart":
        return T.relu(T.matmul(w_ji, hb_j)), T.relu(T.matmul(w_ij, hb_i))
    if aggregate == "self":
        return T.relu(T.matmul(w_ji, hb_i)), T.relu(T.matmul(w_ij, hb_j))
    raise ValueError(f"unknown aggregate mode {aggregate!r}")


def pool_graph(h_hat: Tensor) -> Tensor:
    """Average over the modality rows."""
    return T.reduce_mean(h_hat, axis=-2)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def pair_mask(pairs, r: int = R) -> np.ndarray:
    """Keep-mask removing both directed edges of each unordered modality pair.

    ``pairs`` holds labels such as ``"F-A"`` or ``"A-T"``.
    """
    keep = np.ones((r, r))
    for label in pairs:
        u, v = parse_pair(label)
        keep[u, v] = keep[v, u] = 0.0
    return keep


PAIR_LABELS = ("A-T", "B-T", "B-A", "F-T", "F-A", "F-B")


def parse_pair(label: str) -> tuple[int, int]:
    try:
        a, b = label.upper().split("-")
        u, v = MODALITY_CODES[a], MODALITY_CODES[b]
    except (ValueError, KeyError):
        raise ValueError(f"unknown modality pair {label!r}; expected one of {', '.join(PAIR_LABELS)}") from None
    if u == v:
        raise ValueError(f"modality pair {label!r} joins a modality to itself")
    return u, v


def ne_agn_layer(h_i: Tensor, h_j: Tensor, params: NeAgnParams, adjacency: np.ndarray | None = None,
                 *, node_att: bool = True, edge_att: bool = True, edge_mask=None,
                 renormalize: bool = True, aggregate: str = "counterpart") -> dict[str, Tensor]:
    """Full layer for both persons; returns intermediates keyed by name."""
    A = build_adjacency(h_i.shape[-2]) if adjacency is None else adjacency
    if node_att:
        w_i = node_attention(h_i, params.omega[0], params.slope)
        w_j = node_attention(h_j, params.omega[1], params.slope)
        hb_i, hb_j = node_residual_update(h_i, w_i), node_residual_update(h_j, w_j)
    else:
        w_i = w_j = None
        hb_i, hb_j = h_i, h_j
    if edge_att:
        beta_ij = edge_attention(hb_i, hb_j, params, A, edge_mask, renormalize)
        beta_ji = edge_attention(hb_j, hb_i, params, A, edge_mask, renormalize)
    else:
        lead = hb_i.shape[:-2]
        if edge_mask is None:
            beta_ij = beta_ji = uniform_edges(A, lead)
        else:
            beta_ij = beta_ji = uniform_edges(A * np.asarray(edge_mask), lead)
    hh_i, hh_j = message_update(hb_i, hb_j, beta_ij, beta_ji, A, aggregate)
    return {
        "w_i": w_i, "w_j": w_j, "hb_i": hb_i, "hb_j": hb_j,
        "beta_ij": beta_ij, "beta_ji": beta_ji, "hh_i": hh_i, "hh_j": hh_j,
        "fg_i": pool_graph(hh_i), "fg_j": pool_graph(hh_j),
    }
