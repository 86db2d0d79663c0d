"""Loss terms for the two-step training objective.

Every loss returns its scalar value together with the analytic gradient with
respect to its direct inputs (head probabilities or embeddings). Reductions
are batch means (and means over active triplets) so the default trade-off
weights stay scale-stable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericalError, UsageError

Array = np.ndarray

LOG_EPS = 1e-12


@dataclass
class LossWeights:
    """Trade-off weights and the triplet margin."""

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    alpha: float = 0.3

    def validate(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.alpha)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise NumericalError(f"loss weights must be finite and non-negative, got {vals}")


def _clamp(p: Array) -> Array:
    return np.clip(p, LOG_EPS, 1.0 - LOG_EPS)


# ---------------------------------------------------------------------------
# identity classification (softmax cross-entropy)


def identity_ce(probs: Array, onehot: Array) -> tuple[float, Array]:
    """Batch-mean cross-entropy of softmax probabilities against one-hot labels."""
    if probs.shape != onehot.shape:
        raise UsageError(f"identity_ce: probs {probs.shape} vs labels {onehot.shape}")
    b = probs.shape[0]
    pc = _clamp(probs)
    value = float(-(onehot * np.log(pc)).sum() / b)
    grad = np.where((probs > LOG_EPS) & (probs < 1.0 - LOG_EPS), -onehot / pc, 0.0) / b
    return value, grad


# ---------------------------------------------------------------------------
# triplet losses (squared-euclidean hinge)


def _triplet_hinge(v_a: Array, v_p: Array, v_n: Array, alpha: float):
    d_ap = ((v_a - v_p) ** 2).sum(axis=1)
    d_an = ((v_a - v_n) ** 2).sum(axis=1)
    hinge = d_ap - d_an + alpha
    active = hinge > 0
    m = int(active.sum())
    if m == 0:
        z = np.zeros_like(v_a)
        return 0.0, (z, z.copy(), z.copy())
    value = float(hinge[active].sum() / m)
    scale = active[:, None] / m
    da = 2.0 * (v_n - v_p) * scale
    dp = 2.0 * (v_p - v_a) * scale
    dn = 2.0 * (v_a - v_n) * scale
    return value, (da, dp, dn)


def triplet_source(v_a: Array, v_p: Array, v_n: Array, alpha: float):
    """Within-modality triplet hinge, mean over triplets with a positive hinge.

    Returns (value, (d_anchor, d_pos, d_neg), degenerate) where degenerate
    marks an empty triplet set.
    """
    if len(v_a) == 0:
        z = np.zeros_like(v_a)
        return 0.0, (z, z, z), True
    value, grads = _triplet_hinge(v_a, v_p, v_n, alpha)
    return value, grads, False


def triplet_hetero(v_t2_anchor: Array, v_t1_pos: Array, v_t1_neg: Array, alpha: float):
    """Sketch-anchored triplet hinge over photo positives/negatives.

    Same hinge as triplet_source; kept separate because its gradients flow to
    both encoders.
    """
    return triplet_source(v_t2_anchor, v_t1_pos, v_t1_neg, alpha)


def mine_triplets(anchor_labels: Array, gallery_labels: Array, same_set: bool,
                  anchor_emb: Array | None = None, gallery_emb: Array | None = None,
                  mining: str = "batch_all"):
    """Index triples (ia, ip, in) with y_p == y_a and y_n != y_a.

    same_set excludes the anchor index from its own positives. batch_hard
    keeps, per anchor, the farthest positive and nearest negative.
    """
    ya = np.asarray(anchor_labels)
    yg = np.asarray(gallery_labels)
    pos = ya[:, None] == yg[None, :]
    neg = ~pos
    if same_set:
        np.fill_diagonal(pos, False)
    valid_anchor = pos.any(axis=1) & neg.any(axis=1)
    if not valid_anchor.any():
        return np.empty(0, int), np.empty(0, int), np.empty(0, int)
    if mining == "batch_all":
        ia, ip, in_ = [], [], []
        for a in np.flatnonzero(valid_anchor):
            ps = np.flatnonzero(pos[a])
            ns = np.flatnonzero(neg[a])
            pp, nn = np.meshgrid(ps, ns, indexing="ij")
            ia.append(np.full(pp.size, a))
            ip.append(pp.ravel())
            in_.append(nn.ravel())
        return np.concatenate(ia), np.concatenate(ip), np.concatenate(in_)
    if mining == "batch_hard":
        if anchor_emb is None or gallery_emb is None:
            raise UsageError("batch_hard mining needs embeddings")
        d = ((anchor_emb[:, None, :] - gallery_emb[None, :, :]) ** 2).sum(axis=2)
        ia = np.flatnonzero(valid_anchor)
        ip = np.array([np.flatnonzero(pos[a])[np.argmax(d[a, pos[a]])] for a in ia])
        in_ = np.array([np.flatnonzero(neg[a])[np.argmin(d[a, neg[a]])] for a in ia])
        return ia, ip, in_
    raise UsageError(f"unknown mining strategy {mining!r}")


def triplet_batch(anchor_emb: Array, anchor_labels: Array, gallery_emb: Array,
                  gallery_labels: Array, alpha: float, same_set: bool = False,
                  mining: str = "batch_all"):
    """Mine triplets in a batch and evaluate the hinge.

    Returns (value, d_anchor_set, d_gallery_set, degenerate). When
    same_set=True the two gradient arrays refer to the same embedding matrix
    and should be summed by the caller. batch_all runs on the pairwise
    distance matrix rather than materialized triplets.
    """
    if mining == "batch_hard":
        ia, ip, in_ = mine_triplets(anchor_labels, gallery_labels, same_set,
                                    anchor_emb, gallery_emb, mining)
        d_anchor = np.zeros_like(anchor_emb)
        d_gallery = np.zeros_like(gallery_emb)
        if len(ia) == 0:
            return 0.0, d_anchor, d_gallery, True
        value, (da, dp, dn), _ = triplet_source(anchor_emb[ia], gallery_emb[ip],
                                                gallery_emb[in_], alpha)
        np.add.at(d_anchor, ia, da)
        np.add.at(d_gallery, ip, dp)
        np.add.at(d_gallery, in_, dn)
        return value, d_anchor, d_gallery, False
    if mining != "batch_all":
        raise UsageError(f"unknown mining strategy {mining!r}")

    ya = np.asarray(anchor_labels)
    yg = np.asarray(gallery_labels)
    pos = ya[:, None] == yg[None, :]
    neg = ~pos
    if same_set:
        np.fill_diagonal(pos, False)
    d_anchor = np.zeros_like(anchor_emb)
    d_gallery = np.zeros_like(gallery_emb)
    if not (pos.any(axis=1) & neg.any(axis=1)).any():
        return 0.0, d_anchor, d_gallery, True

    a2 = (anchor_emb ** 2).sum(axis=1)[:, None]
    g2 = (gallery_emb ** 2).sum(axis=1)[None, :]
    dist = a2 + g2 - 2.0 * anchor_emb @ gallery_emb.T
    # hinge[a, p, n] = dist[a, p] - dist[a, n] + alpha over valid (p, n) pairs
    hinge = dist[:, :, None] - dist[:, None, :] + alpha
    valid = pos[:, :, None] & neg[:, None, :]
    active = valid & (hinge > 0)
    m = int(active.sum())
    if m == 0:
        return 0.0, d_anchor, d_gallery, False
    value = float(hinge[active].sum() / m)
    # coefficient of each dist entry in the mean hinge
    coef = (active.sum(axis=2) - active.sum(axis=1)) / m
    # dist[a, j] = ||anchor_a - gallery_j||^2
    row = coef.sum(axis=1)
    col = coef.sum(axis=0)
    d_anchor += 2.0 * (anchor_emb * row[:, None] - coef @ gallery_emb)
    d_gallery += 2.0 * (gallery_emb * col[:, None] - coef.T @ anchor_emb)
    return value, d_anchor, d_gallery, False


# ---------------------------------------------------------------------------
# attribute losses


def attribute_bce_source(phi: Array, z: Array) -> tuple[float, Array]:
    """Multi-label binary cross-entropy on labeled source attributes."""
    if phi.shape != z.shape:
        raise UsageError(f"attribute_bce_source: phi {phi.shape} vs z {z.shape}")
    if np.any(phi < 0) or np.any(phi > 1):
        raise NumericalError("attribute probabilities outside [0, 1]")
    b = phi.shape[0]
    pc = _clamp(phi)
    value = float(-(z * np.log(pc) + (1 - z) * np.log(1 - pc)).sum() / b)
    interior = (phi > LOG_EPS) & (phi < 1.0 - LOG_EPS)
    grad = np.where(interior, (-z / pc + (1 - z) / (1 - pc)), 0.0) / b
    return value, grad


def _entropy_group(phi: Array, full: bool):
    if phi.size == 0:
        return 0.0, np.zeros_like(phi)
    b = phi.shape[0]
    pc = _clamp(phi)
    value = -(pc * np.log(pc)).sum() / b
    interior = (phi > LOG_EPS) & (phi < 1.0 - LOG_EPS)
    grad = np.where(interior, -(np.log(pc) + 1.0), 0.0) / b
    if full:
        value += -((1 - pc) * np.log(1 - pc)).sum() / b
        grad += np.where(interior, np.log(1 - pc) + 1.0, 0.0) / b
    return float(value), grad


def attribute_entropy_target(phi_t1: Array, phi_t2: Array,
                             full: bool = False) -> tuple[float, Array, Array]:
    """Entropy penalty on unlabeled target attribute predictions.

    The default keeps only the -phi*log(phi) term; full=True uses the complete
    Bernoulli entropy.
    """
    for phi in (phi_t1, phi_t2):
        if phi.size and (np.any(phi < 0) or np.any(phi > 1)):
            raise NumericalError("attribute probabilities outside [0, 1]")
    v1, g1 = _entropy_group(phi_t1, full)
    v2, g2 = _entropy_group(phi_t2, full)
    return v1 + v2, g1, g2


def attribute_consistency(phi_t1: Array, phi_t2: Array,
                          paired: Array) -> tuple[float, Array, Array]:
    """L2 distance between paired photo/sketch attribute predictions.

    Unsquared norm; the subgradient at exactly-equal predictions is zero.
    """
    if phi_t1.shape != phi_t2.shape:
        raise UsageError(f"attribute_consistency: {phi_t1.shape} vs {phi_t2.shape}")
    b = phi_t1.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(phi_t1), np.zeros_like(phi_t2)
    paired = np.asarray(paired, dtype=float)
    diff = phi_t1 - phi_t2
    norms = np.sqrt((diff ** 2).sum(axis=1))
    value = float((paired * norms).sum() / b)
    safe = np.where(norms > 0, norms, 1.0)
    g = (paired / safe)[:, None] * diff / b
    g[norms == 0] = 0.0
    return value, g, -g


def attribute_total(bce_s: float, ent_t: float, cons_t: float) -> float:
    """Combined attribute objective: source BCE + target entropy + consistency."""
    return bce_s + ent_t + cons_t


# ---------------------------------------------------------------------------
# adversarial domain loss


def domain_reverse_ce(rho_s: Array, rho_t1: Array, rho_t2: Array, d_s: Array,
                      d_t1: Array, d_t2: Array):
    """Reverse categorical cross-entropy over the three domain groups.

    Value is sum_i d_i log(rho_i), batch-averaged per group and summed over
    groups, hence <= 0 with maximum 0 at perfect domain classification. The
    domain head is trained to maximize it; the encoders minimize it through
    gradient reversal.
    """
    value = 0.0
    grads = []
    for rho, d in ((rho_s, d_s), (rho_t1, d_t1), (rho_t2, d_t2)):
        if rho.size == 0:
            grads.append(np.zeros_like(rho))
            continue
        sums = rho.sum(axis=1)
        off = np.abs(sums - 1.0)
        if np.any(off > 1e-6):
            raise NumericalError(
                f"domain probabilities off the simplex by {off.max():.3e} (> 1e-6)")
        b = rho.shape[0]
        rc = _clamp(rho)
        value += float((d * np.log(rc)).sum() / b)
        interior = (rho > LOG_EPS) & (rho < 1.0 - LOG_EPS)
        grads.append(np.where(interior, d / rc, 0.0) / b)
    return value, grads[0], grads[1], grads[2]


# ---------------------------------------------------------------------------
# step objectives


def step1_loss(components: Sequence[float], w: LossWeights) -> float:
    """Weighted source objective from (identity, triplet, attribute) values."""
    id_s, tri_s, att_s = components
    return float(id_s + w.lambda1 * tri_s + w.lambda2 * att_s)


def step2_loss(components: Sequence[float], w: LossWeights) -> float:
    """Weighted co-training objective from (identity, triplet, attribute, domain)."""
    id_t, tri_t, att, dom = components
    return float(id_t + w.lambda1 * tri_t + w.lambda2 * att + w.lambda3 * dom)
