"""Training objectives with analytic gradients.

Everything here is a pure function of numpy arrays.  The alignment loss
measures the squared distance between kernel mean embeddings of the sketch
and photo sets, with the kernel taken as a product of per-layer Gaussian
kernels so that several network layers are matched jointly.  The biased
V-statistic form is used: same-index terms are kept in all three double sums.

Summation order is fixed (numpy reductions over contiguous arrays) so that
repeated evaluation of the same inputs is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_BANDWIDTH_SQ = 1e-12
MEDIAN = "median-heuristic"


class LossInputError(ValueError):
    """Inputs violate a loss precondition (empty set, bad labels, ...)."""


# ---------------------------------------------------------------------------
# kernels and bandwidths


def gaussian_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    """exp(-||x-y||^2 / (2 sigma^2)); symmetric, in (0, 1]."""
    if bandwidth <= 0:
        raise LossInputError(f"bandwidth must be positive, got {bandwidth}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LossInputError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * bandwidth**2)))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    d2 = xx + yy - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def gaussian_kernel_matrix(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    """Kernel matrix K[i, j] = exp(-||x_i - y_j||^2 / (2 sigma^2))."""
    if bandwidth <= 0:
        raise LossInputError(f"bandwidth must be positive, got {bandwidth}")
    return np.exp(-_sq_dists(np.asarray(x, float), np.asarray(y, float)) / (2.0 * bandwidth**2))


def median_bandwidth(features: np.ndarray) -> float:
    """Bandwidth sigma with sigma^2 = median pairwise squared distance.

    The median runs over all unordered pairs of the pooled batch and is
    clamped below by 1e-12 so degenerate batches stay usable.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    if n < 2:
        raise LossInputError(f"median bandwidth needs at least 2 vectors, got {n}")
    d2 = _sq_dists(features, features)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(d2[iu]))
    return float(np.sqrt(max(med, MIN_BANDWIDTH_SQ)))


# ---------------------------------------------------------------------------
# joint multi-layer alignment loss


@dataclass
class JmmdSpec:
    """Layer selection, per-layer bandwidths, and the alignment weight alpha.

    layer_set indexes into an activation stack; None means "resolve to the
    last hidden layer, the embedding, and the softmax layer" at the call
    site.  bandwidths may be explicit positive reals, or the median
    heuristic computed per layer on the pooled sketch+photo batch.
    """

    layer_set: tuple[int, ...] | None = None
    bandwidths: Sequence[float] | str = MEDIAN
    alpha: float = 5.0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.layer_set is not None and len(self.layer_set) == 0:
            raise ValueError("layer_set must be non-empty")
        if not isinstance(self.bandwidths, str):
            if any(b <= 0 for b in self.bandwidths):
                raise ValueError("explicit bandwidths must be positive")
        elif self.bandwidths != MEDIAN:
            raise ValueError(f"unknown bandwidth mode {self.bandwidths!r}")


def default_layer_set(num_hidden: int) -> tuple[int, ...]:
    """Stack indices of (last hidden layer, embedding, softmax)."""
    if num_hidden < 1:
        raise ValueError("need at least one hidden layer")
    return (num_hidden - 1, num_hidden, num_hidden + 1)


def _check_layer_lists(
    sketch_layers: Sequence[np.ndarray], photo_layers: Sequence[np.ndarray]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(sketch_layers) == 0 or len(sketch_layers) != len(photo_layers):
        raise LossInputError(
            f"layer lists must be non-empty and equal length, got "
            f"{len(sketch_layers)} vs {len(photo_layers)}"
        )
    s = [np.atleast_2d(np.asarray(a, np.float64)) for a in sketch_layers]
    p = [np.atleast_2d(np.asarray(a, np.float64)) for a in photo_layers]
    if s[0].shape[0] == 0 or p[0].shape[0] == 0:
        raise LossInputError("both sample sets must be non-empty")
    for l, (a, b) in enumerate(zip(s, p)):
        if a.shape[1] != b.shape[1]:
            raise LossInputError(f"layer {l} dims differ: {a.shape[1]} vs {b.shape[1]}")
        if a.shape[0] != s[0].shape[0] or b.shape[0] != p[0].shape[0]:
            raise LossInputError("sample counts must agree across layers")
    return s, p


def resolve_bandwidths(
    sketch_layers: Sequence[np.ndarray],
    photo_layers: Sequence[np.ndarray],
    spec: JmmdSpec,
) -> list[float]:
    """Per-layer bandwidths, by median heuristic on the pooled batch unless given."""
    s, p = _check_layer_lists(sketch_layers, photo_layers)
    if isinstance(spec.bandwidths, str):
        return [median_bandwidth(np.vstack([a, b])) for a, b in zip(s, p)]
    if len(spec.bandwidths) != len(s):
        raise LossInputError(
            f"got {len(spec.bandwidths)} bandwidths for {len(s)} layers"
        )
    return [float(b) for b in spec.bandwidths]


def _joint_kernel(
    xs: list[np.ndarray], ys: list[np.ndarray], bandwidths: Sequence[float]
) -> np.ndarray:
    joint = gaussian_kernel_matrix(xs[0], ys[0], bandwidths[0])
    for a, b, bw in zip(xs[1:], ys[1:], bandwidths[1:]):
        joint = joint * gaussian_kernel_matrix(a, b, bw)
    return joint


def jmmd(
    sketch_layers: Sequence[np.ndarray],
    photo_layers: Sequence[np.ndarray],
    spec: JmmdSpec = JmmdSpec(),
) -> float:
    """Joint multi-layer MMD between the sketch set and the photo set.

    mean(J_ss) + mean(J_pp) - 2 mean(J_sp) where J is the elementwise product
    of per-layer Gaussian kernel matrices.  Same-index terms are included.
    """
    s, p = _check_layer_lists(sketch_layers, photo_layers)
    bws = resolve_bandwidths(s, p, spec)
    j_ss = _joint_kernel(s, s, bws)
    j_pp = _joint_kernel(p, p, bws)
    j_sp = _joint_kernel(s, p, bws)
    return float(j_ss.mean() + j_pp.mean() - 2.0 * j_sp.mean())


def jmmd_with_grad(
    sketch_layers: Sequence[np.ndarray],
    photo_layers: Sequence[np.ndarray],
    spec: JmmdSpec = JmmdSpec(),
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Value plus gradients w.r.t. every activation in both sets.

    Bandwidths are treated as constants: no gradient flows through the
    median heuristic.
    """
    s, p = _check_layer_lists(sketch_layers, photo_layers)
    bws = resolve_bandwidths(s, p, spec)
    n_s, n_p = s[0].shape[0], p[0].shape[0]
    j_ss = _joint_kernel(s, s, bws)
    j_pp = _joint_kernel(p, p, bws)
    j_sp = _joint_kernel(s, p, bws)
    value = float(j_ss.mean() + j_pp.mean() - 2.0 * j_sp.mean())

    d_s = [np.zeros_like(a) for a in s]
    d_p = [np.zeros_like(b) for b in p]
    for l, bw in enumerate(bws):
        inv = 1.0 / bw**2
        # d k(z_i, z_j)/d z_i = -J_ij (z_i - z_j) / sigma^2 applied per term
        # self term of the sketch set: factor 2 from symmetry of the double sum
        w_ss = j_ss * inv
        d_s[l] += (2.0 / n_s**2) * (-(s[l] * w_ss.sum(axis=1)[:, None] - w_ss @ s[l]))
        w_pp = j_pp * inv
        d_p[l] += (2.0 / n_p**2) * (-(p[l] * w_pp.sum(axis=1)[:, None] - w_pp @ p[l]))
        w_sp = j_sp * inv
        d_s[l] += (-2.0 / (n_s * n_p)) * (-(s[l] * w_sp.sum(axis=1)[:, None] - w_sp @ p[l]))
        d_p[l] += (-2.0 / (n_s * n_p)) * (
            -(p[l] * w_sp.sum(axis=0)[:, None] - w_sp.T @ s[l])
        )
    return value, d_s, d_p


# ---------------------------------------------------------------------------
# metric-learning and classification losses


def _pairwise_dist(emb: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(_sq_dists(emb, emb), 1e-24))


def _triplet_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(labels.size, dtype=bool)
    neg = ~same
    return pos, neg


def triplet_loss(
    embeddings: np.ndarray, labels: np.ndarray, margin: float = 0.3
) -> float:
    """Batch-hard triplet loss with Euclidean distances.

    Every sample with at least one positive and one negative acts as an
    anchor; its hardest positive and hardest negative form the triplet.
    """
    return _triplet_core(embeddings, labels, margin, want_grad=False)[0]


def triplet_loss_grad(
    embeddings: np.ndarray, labels: np.ndarray, margin: float = 0.3
) -> tuple[float, np.ndarray]:
    """Loss and its (sub)gradient w.r.t. the embeddings."""
    return _triplet_core(embeddings, labels, margin, want_grad=True)


def _triplet_core(embeddings, labels, margin, want_grad):
    emb = np.atleast_2d(np.asarray(embeddings, np.float64))
    labels = np.asarray(labels)
    if emb.shape[0] != labels.size:
        raise LossInputError("one label per embedding required")
    if np.unique(labels).size < 2:
        raise LossInputError("triplet loss needs at least 2 identities in the batch")
    pos, neg = _triplet_masks(labels)
    anchors = np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))
    if anchors.size == 0:
        raise LossInputError("no anchor has both a positive and a negative")
    dist = _pairwise_dist(emb)
    grad = np.zeros_like(emb)
    total = 0.0
    for a in anchors:
        p_idx = np.flatnonzero(pos[a])
        n_idx = np.flatnonzero(neg[a])
        hp = p_idx[np.argmax(dist[a, p_idx])]
        hn = n_idx[np.argmin(dist[a, n_idx])]
        hinge = dist[a, hp] - dist[a, hn] + margin
        if hinge > 0:
            total += hinge
            if want_grad:
                u_p = (emb[a] - emb[hp]) / max(dist[a, hp], 1e-12)
                u_n = (emb[a] - emb[hn]) / max(dist[a, hn], 1e-12)
                grad[a] += u_p - u_n
                grad[hp] -= u_p
                grad[hn] += u_n
    loss = total / anchors.size
    return loss, grad / anchors.size


def id_loss(
    probs: np.ndarray, labels: np.ndarray, smoothing: float = 0.1
) -> float:
    """Label-smoothed cross-entropy over already-normalized probabilities."""
    return _id_core(probs, labels, smoothing, want_grad=False)[0]


def id_loss_grad(
    probs: np.ndarray, labels: np.ndarray, smoothing: float = 0.1
) -> tuple[float, np.ndarray]:
    return _id_core(probs, labels, smoothing, want_grad=True)


def _id_core(probs, labels, smoothing, want_grad):
    p = np.atleast_2d(np.asarray(probs, np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n, c = p.shape
    if labels.size != n:
        raise LossInputError("one label per row required")
    if labels.min() < 0 or labels.max() >= c:
        raise LossInputError(f"labels out of range for {c} classes")
    if not 0.0 <= smoothing < 1.0:
        raise LossInputError(f"smoothing must be in [0, 1), got {smoothing}")
    q = np.full((n, c), smoothing / c)
    q[np.arange(n), labels] += 1.0 - smoothing
    safe = np.clip(p, 1e-300, None)
    loss = float(-(q * np.log(safe)).sum() / n)
    if not want_grad:
        return loss, None
    return loss, -(q / safe) / n


def cosine_logits(
    embeddings: np.ndarray, prototypes: np.ndarray, temperature: float = 0.07
) -> np.ndarray:
    """Temperature-scaled cosine similarities to each prototype row."""
    if temperature <= 0:
        raise LossInputError(f"temperature must be positive, got {temperature}")
    e = np.atleast_2d(np.asarray(embeddings, np.float64))
    pr = np.atleast_2d(np.asarray(prototypes, np.float64))
    en = np.sqrt(np.maximum(np.sum(e * e, axis=1), 1e-24))
    pn = np.sqrt(np.maximum(np.sum(pr * pr, axis=1), 1e-24))
    return (e @ pr.T) / (en[:, None] * pn[None, :]) / temperature


def cosine_logits_backward(
    embeddings: np.ndarray,
    prototypes: np.ndarray,
    d_logits: np.ndarray,
    temperature: float = 0.07,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain an upstream logits gradient to embeddings and prototypes."""
    e = np.atleast_2d(np.asarray(embeddings, np.float64))
    pr = np.atleast_2d(np.asarray(prototypes, np.float64))
    en = np.sqrt(np.maximum(np.sum(e * e, axis=1), 1e-24))
    pn = np.sqrt(np.maximum(np.sum(pr * pr, axis=1), 1e-24))
    eh = e / en[:, None]
    ph = pr / pn[:, None]
    cos = eh @ ph.T
    g = np.asarray(d_logits, np.float64) / temperature
    # d cos(e, p)/d e = (p_hat - cos * e_hat) / ||e||
    d_e = (g @ ph - (g * cos).sum(axis=1)[:, None] * eh) / en[:, None]
    d_p = (g.T @ eh - (g * cos).sum(axis=0)[:, None] * ph) / pn[:, None]
    return d_e, d_p


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction."""
    z = np.atleast_2d(np.asarray(logits, np.float64))
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Upstream probability gradient pulled back to the logits."""
    p = np.asarray(probs, np.float64)
    g = np.asarray(d_probs, np.float64)
    return p * (g - (g * p).sum(axis=1, keepdims=True))


def i2tce_loss(
    embeddings: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    temperature: float = 0.07,
) -> float:
    """Cross-entropy of cosine-similarity logits against the label prototype."""
    probs = softmax(cosine_logits(embeddings, prototypes, temperature))
    return id_loss(probs, labels, smoothing=0.0)


def i2tce_loss_grad(
    embeddings: np.ndarray,
    prototypes: np.ndarray,
    labels: np.ndarray,
    temperature: float = 0.07,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients w.r.t. embeddings and prototype rows."""
    probs = softmax(cosine_logits(embeddings, prototypes, temperature))
    loss, d_probs = id_loss_grad(probs, labels, smoothing=0.0)
    d_logits = softmax_backward(probs, d_probs)
    d_e, d_p = cosine_logits_backward(embeddings, prototypes, d_logits, temperature)
    return loss, d_e, d_p


# ---------------------------------------------------------------------------
# weighted composition


@dataclass(frozen=True)
class LossBreakdown:
    """All objective terms for one batch; l_sim = l_reid + alpha * l_jmmd."""

    l_id: float
    l_tri: float
    l_i2tce: float
    l_jmmd: float
    alpha: float

    @property
    def l_reid(self) -> float:
        return self.l_id + self.l_tri + self.l_i2tce

    @property
    def l_sim(self) -> float:
        return self.l_reid + self.alpha * self.l_jmmd


def sim_loss(
    l_id: float, l_tri: float, l_i2tce: float, l_jmmd: float, alpha: float = 5.0
) -> LossBreakdown:
    """Compose the full objective from its parts."""
    if alpha < 0:
        raise LossInputError(f"alpha must be non-negative, got {alpha}")
    return LossBreakdown(l_id=l_id, l_tri=l_tri, l_i2tce=l_i2tce, l_jmmd=l_jmmd, alpha=alpha)
