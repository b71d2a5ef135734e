"""Cross-modal bilinear attention with multiple glimpses and the
orthogonality penalty that pushes glimpse distributions apart.

Each glimpse g projects both modalities into a shared low-rank space d_m,
scores every (image position, question token) pair by the reduced Hadamard
product of the projections, and normalizes the scores into one joint
distribution over all valid pairs.  Glimpse features are computed in
factorized order (project first, then the attention-weighted sum), so the
d_v x d_q interaction matrix is never materialized and the per-glimpse cost
stays O(N_v * N_q * d_m).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import xavier
from .tensor import (
    Tensor,
    add,
    div,
    linear,
    matmul,
    mul,
    parameter,
    reshape,
    softmax,
    sqrt,
    transpose,
    tsum,
)


def pair_mask(batch: int, n_v: int, n_q: int,
              q_mask: Optional[np.ndarray],
              v_mask: Optional[np.ndarray] = None) -> Optional[Tensor]:
    """(B, N_v, N_q) additive mask: 0 on valid pairs, -inf where either
    position is padding."""
    if q_mask is None and v_mask is None:
        return None
    valid = np.ones((batch, n_v, n_q), dtype=bool)
    if v_mask is not None:
        valid &= np.asarray(v_mask, dtype=bool)[:, :, None]
    if q_mask is not None:
        valid &= np.asarray(q_mask, dtype=bool)[:, None, :]
    return Tensor(np.where(valid, 0.0, -np.inf))


@dataclass
class GlimpseBundle:
    """Per-glimpse pair distributions and fused features, plus the pooled
    joint representation fed to the classifier."""

    distributions: list    # glimpse -> Tensor (B, N_v * N_q), rows sum to 1
    fused: list            # glimpse -> Tensor (B, d_m)
    joint: Tensor          # (B, d_joint)


class BilinearFusion:
    """Multi-glimpse bilinear attention over refined modality features.

    Every glimpse owns its own map and feature projections (distinct maps are
    what the orthogonality penalty acts on); the post-interaction projection
    into the joint space is shared, and glimpse features are summed after it.
    """

    def __init__(self, d_v: int, d_q: int, d_m: int, d_joint: int,
                 glimpses: int, rng: np.random.Generator, prefix: str = "fusion"):
        if glimpses < 1:
            raise ValueError("at least one glimpse required")
        self.d_m = d_m
        self.glimpses = glimpses
        self.prefix = prefix
        # projections are bias-free: the bilinear form is pure matrix products,
        # so zero features yield zero interactions and zero maps score uniformly
        self.map_v, self.map_q, self.feat_v, self.feat_q = [], [], [], []
        for _ in range(glimpses):
            self.map_v.append(parameter(xavier(rng, d_v, d_m)))
            self.map_q.append(parameter(xavier(rng, d_q, d_m)))
            self.feat_v.append(parameter(xavier(rng, d_v, d_m)))
            self.feat_q.append(parameter(xavier(rng, d_q, d_m)))
        self.w_joint = parameter(xavier(rng, d_m, d_joint))
        self.b_joint = parameter(np.zeros(d_joint))

    def params(self) -> dict:
        out = {}
        for g in range(self.glimpses):
            out[f"{self.prefix}.g{g}.map_v"] = self.map_v[g]
            out[f"{self.prefix}.g{g}.map_q"] = self.map_q[g]
            out[f"{self.prefix}.g{g}.feat_v"] = self.feat_v[g]
            out[f"{self.prefix}.g{g}.feat_q"] = self.feat_q[g]
        out[f"{self.prefix}.w_joint"] = self.w_joint
        out[f"{self.prefix}.b_joint"] = self.b_joint
        return out

    def attention_map(self, v: Tensor, q: Tensor, glimpse: int,
                      mask: Optional[Tensor] = None) -> Tensor:
        """Joint distribution over all (image position, token) pairs.

        Scores are sum_m (v W_v)[j,m] * (q W_q)[k,m]; the mask is applied
        additively before one softmax over the whole flattened pair set.
        Returns (B, N_v * N_q).
        """
        batch, n_v = v.shape[0], v.shape[1]
        n_q = q.shape[1]
        v_proj = matmul(v, self.map_v[glimpse])
        q_proj = matmul(q, self.map_q[glimpse])
        scores = matmul(v_proj, transpose(q_proj))
        if mask is not None:
            scores = add(scores, mask)
        return softmax(reshape(scores, (batch, n_v * n_q)), axis=-1)

    def glimpse_feature(self, v: Tensor, q: Tensor, dist: Tensor,
                        glimpse: int) -> Tensor:
        """Attention-weighted sum of pairwise feature interactions, (B, d_m)."""
        batch, n_v = v.shape[0], v.shape[1]
        n_q = q.shape[1]
        v_proj = matmul(v, self.feat_v[glimpse])
        q_proj = matmul(q, self.feat_q[glimpse])
        weights = reshape(dist, (batch, n_v, n_q))
        mixed = matmul(weights, q_proj)            # (B, N_v, d_m)
        return tsum(mul(v_proj, mixed), axis=1)

    def fuse(self, v: Tensor, q: Tensor,
             q_mask: Optional[np.ndarray] = None,
             v_mask: Optional[np.ndarray] = None) -> GlimpseBundle:
        batch, n_v = v.shape[0], v.shape[1]
        n_q = q.shape[1]
        mask = pair_mask(batch, n_v, n_q, q_mask, v_mask)
        dists, feats = [], []
        joint = None
        for g in range(self.glimpses):
            dist = self.attention_map(v, q, g, mask)
            feat = self.glimpse_feature(v, q, dist, g)
            dists.append(dist)
            feats.append(feat)
            projected = linear(feat, self.w_joint, self.b_joint)
            joint = projected if joint is None else add(joint, projected)
        return GlimpseBundle(distributions=dists, fused=feats, joint=joint)


def orthogonality_loss(distributions: list) -> Tensor:
    """Sum over unordered glimpse pairs of the squared cosine between their
    distributions, averaged over the batch.

    Distributions are L2-normalized first so identical glimpses score exactly
    1 per pair; the value therefore lies in [0, G*(G-1)/2].  Differentiable.
    """
    if not distributions:
        raise ValueError("need at least one glimpse distribution")
    normed = []
    for dist in distributions:
        d2 = dist if dist.ndim == 2 else reshape(dist, (1, dist.size))
        norm = sqrt(tsum(mul(d2, d2), axis=-1, keepdims=True))
        normed.append(div(d2, norm))
    batch = normed[0].shape[0]
    total = Tensor(np.zeros((batch,)))
    for i in range(len(normed)):
        for j in range(i + 1, len(normed)):
            rho = tsum(mul(normed[i], normed[j]), axis=-1)
            total = add(total, mul(rho, rho))
    return total.mean()


def mean_pairwise_cosine(distributions: list) -> float:
    """Diagnostic (non-differentiable) mean cosine over glimpse pairs."""
    arrs = [d.data if isinstance(d, Tensor) else np.asarray(d) for d in distributions]
    arrs = [a if a.ndim == 2 else a[None, :] for a in arrs]
    normed = [a / np.linalg.norm(a, axis=-1, keepdims=True) for a in arrs]
    cosines = []
    for i in range(len(normed)):
        for j in range(i + 1, len(normed)):
            cosines.append((normed[i] * normed[j]).sum(axis=-1))
    if not cosines:
        return 0.0
    return float(np.mean(cosines))
