"""Contrastive objectives for two-stage gaze representation learning.

Stage I uses two temperature-scaled losses of identical algebraic shape.
For an anchor a_b with positive p_b in a batch of B,

    L(a_b, p_b) = -log [ sim(a_b, p_b)
                         / (sum_{l!=b} sim(a_b, a_l) + sum_l sim(a_b, p_l)) ]

with sim(r, s) = exp(cos(r, s) / tau). The invariance loss applies this to
two augmentations of the same view; the equivariance loss applies it to
rotated equivariance embeddings of two different views. The overall
objective averages both over the batch and all ordered view pairs with
unit weights and a 1/(2B) prefactor.

At B = 1 the denominator reduces to the positive term and every loss is
exactly 0; that edge case is load-bearing for tests and preserved by both
the scalar reference and the log-sum-exp fast path.

Stage II minimizes the mean angular error (in degrees) between predicted
and ground-truth gaze directions.

Fast paths run on torch tensors and are differentiable; the scalar-loop
reference (``nt_xent_reference``) exists solely as a test oracle.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import (
    ConfigError,
    EmptyBatchError,
    InvalidEmbeddingError,
    MissingViewError,
    ShapeError,
)


@dataclass(frozen=True)
class LossConfig:
    """Temperature and variant flags. Term weights are fixed at 1."""

    tau: float = 0.1
    include_invariance: bool = True
    include_equivariance: bool = True

    def __post_init__(self):
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be a positive real, got {self.tau!r}")
        if not (self.include_invariance or self.include_equivariance):
            raise ConfigError("at least one of invariance/equivariance must be enabled")


def similarity(r, s, tau):
    """exp(cosine(r, s) / tau). Symmetric, range [exp(-1/tau), exp(1/tau)]."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    rv = torch.as_tensor(r, dtype=torch.float64).reshape(-1)
    sv = torch.as_tensor(s, dtype=torch.float64).reshape(-1)
    if rv.shape != sv.shape:
        raise ShapeError(f"similarity operands differ in length: {rv.shape} vs {sv.shape}")
    rn = float(torch.linalg.vector_norm(rv))
    sn = float(torch.linalg.vector_norm(sv))
    if rn == 0.0 or sn == 0.0:
        raise InvalidEmbeddingError("similarity is undefined for a zero embedding")
    if not (math.isfinite(rn) and math.isfinite(sn)):
        raise InvalidEmbeddingError("similarity operand contains non-finite values")
    cosine = float(torch.dot(rv, sv)) / (rn * sn)
    return math.exp(cosine / tau)


def nt_xent_reference(anchor_set, positive_set, anchor_index, tau):
    """Brute-force scalar-loop evaluation of the contrastive loss.

    No vectorization, no log-sum-exp: numerator and denominator are built
    term by term exactly as written. Test oracle only; quadratic in B per
    call and never used by the training path.
    """
    anchors = [[float(x) for x in row] for row in anchor_set]
    positives = [[float(x) for x in row] for row in positive_set]
    b = int(anchor_index)
    n = len(anchors)
    if n == 0:
        raise EmptyBatchError("anchor set is empty")
    if len(positives) != n:
        raise ShapeError(f"batch mismatch: {n} anchors vs {len(positives)} positives")
    d = len(anchors[0])
    for row in anchors + positives:
        if len(row) != d:
            raise ShapeError("ragged embedding rows")
    if not 0 <= b < n:
        raise IndexError(f"anchor_index {b} out of range for batch of {n}")

    def cos(u, v):
        dot = nu = nv = 0.0
        for a_k, v_k in zip(u, v):
            dot += a_k * v_k
            nu += a_k * a_k
            nv += v_k * v_k
        if nu == 0.0 or nv == 0.0:
            raise InvalidEmbeddingError("zero embedding in reference loss")
        return dot / math.sqrt(nu) / math.sqrt(nv)

    numerator = math.exp(cos(anchors[b], positives[b]) / tau)
    denominator = 0.0
    for l in range(n):
        if l != b:
            denominator += math.exp(cos(anchors[b], anchors[l]) / tau)
    for l in range(n):
        denominator += math.exp(cos(anchors[b], positives[l]) / tau)
    # +0.0 folds the B=1 case's -0.0 to a plain 0.0
    return -math.log(numerator / denominator) + 0.0


def _as_2d(x, name):
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if t.ndim != 2:
        raise ShapeError(f"{name} must be a BxD matrix, got shape {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise EmptyBatchError(f"{name} has batch size 0")
    return t


def _pair_losses(anchors, positives, tau):
    """Per-anchor contrastive losses, shape (B,).

    Log-sum-exp over [same-side logits with the diagonal masked to -inf,
    all other-side logits] minus the positive logit. Masking with -inf
    (rather than dropping columns) keeps the B = 1 result exactly 0.
    """
    a = torch.nn.functional.normalize(anchors, dim=1)
    p = torch.nn.functional.normalize(positives, dim=1)
    logits_aa = (a @ a.T) / tau
    logits_ap = (a @ p.T) / tau
    eye = torch.eye(a.shape[0], dtype=torch.bool, device=a.device)
    logits_aa = logits_aa.masked_fill(eye, float("-inf"))
    pos = logits_ap.diagonal()
    return torch.logsumexp(torch.cat([logits_aa, logits_ap], dim=1), dim=1) - pos


def invariance_loss(z, z_prime, anchor_index, cfg):
    """Invariance loss for one anchor: z[b] vs its second augmentation."""
    z = _as_2d(z, "z")
    zp = _as_2d(z_prime, "z_prime")
    if z.shape != zp.shape:
        raise ShapeError(f"z/z_prime shape mismatch: {tuple(z.shape)} vs {tuple(zp.shape)}")
    return _pair_losses(z, zp, cfg.tau)[anchor_index]


def equivariance_loss(z_bar_i, z_bar_j, anchor_index, cfg):
    """Equivariance loss for one anchor over flattened rotated embeddings."""
    zi = _as_2d(z_bar_i, "z_bar_i")
    zj = _as_2d(z_bar_j, "z_bar_j")
    if zi.shape != zj.shape:
        raise ShapeError(f"z_bar shape mismatch: {tuple(zi.shape)} vs {tuple(zj.shape)}")
    return _pair_losses(zi, zj, cfg.tau)[anchor_index]


def _per_view_list(x, name, ndim):
    """Normalize a per-view container to a list of torch tensors."""
    if x is None:
        return None
    if isinstance(x, torch.Tensor):
        if x.ndim == ndim + 1:
            items = list(x)
        elif x.ndim == ndim:
            items = [x]
        else:
            raise ShapeError(f"{name} has unsupported rank {x.ndim}")
    else:
        items = [t if isinstance(t, torch.Tensor) else torch.as_tensor(t, dtype=torch.float64) for t in x]
    for t in items:
        if t.ndim != ndim:
            raise ShapeError(f"{name} entries must have rank {ndim}, got {t.ndim}")
        if t.shape[0] == 0:
            raise EmptyBatchError(f"{name} has batch size 0")
        if not torch.all(torch.isfinite(t)):
            raise InvalidEmbeddingError(f"{name} contains non-finite values")
    return items


@dataclass
class EmbeddingBatch:
    """All Stage-I embeddings for one mini-batch.

    Per-view containers are lists (or stacked tensors) indexed by view:
    ``z``/``z_prime`` hold the two augmentations' invariance embeddings
    (B x d each), ``z_hat_per_view`` the pre-rotation equivariance
    embeddings (B x 3 x d'), ``z_bar_per_view`` the rotated ones. Either
    equivariance container may be omitted when the variant doesn't need it.
    """

    z: object = None
    z_prime: object = None
    z_hat_per_view: object = None
    z_bar_per_view: object = None
    view_ids: object = None
    participant: str = ""

    def __post_init__(self):
        self.z = _per_view_list(self.z, "z", 2)
        self.z_prime = _per_view_list(self.z_prime, "z_prime", 2)
        self.z_hat_per_view = _per_view_list(self.z_hat_per_view, "z_hat_per_view", 3)
        self.z_bar_per_view = _per_view_list(self.z_bar_per_view, "z_bar_per_view", 3)
        if (self.z is None) != (self.z_prime is None):
            raise ShapeError("z and z_prime must be provided together")
        if self.z is not None and len(self.z) != len(self.z_prime):
            raise ShapeError("z and z_prime disagree on view count")
        sizes = {t.shape[0] for group in (self.z, self.z_prime, self.z_hat_per_view, self.z_bar_per_view) if group for t in group}
        if len(sizes) > 1:
            raise ShapeError(f"inconsistent batch sizes across views: {sorted(sizes)}")

    @property
    def batch_size(self):
        for group in (self.z, self.z_hat_per_view, self.z_bar_per_view):
            if group:
                return group[0].shape[0]
        raise EmptyBatchError("embedding batch holds no data")

    @property
    def num_views(self):
        for group in (self.z_bar_per_view, self.z_hat_per_view, self.z):
            if group:
                return len(group)
        raise EmptyBatchError("embedding batch holds no data")

    def check_rotation_consistency(self, rotations, atol=1e-6):
        """Assert z_bar[i] = R_i z_hat[i] for the supplied rotations."""
        if self.z_hat_per_view is None or self.z_bar_per_view is None:
            raise MissingViewError("both z_hat and z_bar are needed for the consistency check")
        for i, (z_hat, z_bar) in enumerate(zip(self.z_hat_per_view, self.z_bar_per_view)):
            expected = rotate_flatten(z_hat, rotations[i]).reshape(z_bar.shape)
            err = float((expected - z_bar).abs().max())
            if err > atol:
                raise InvalidEmbeddingError(
                    f"z_bar[{i}] deviates from R@z_hat by {err:.3g} (atol {atol})"
                )


def rotate_flatten(z_hat, rotation):
    """Left-multiply (B, 3, d') embeddings by a rotation, flatten to (B, 3d').

    ``rotation`` is a (3, 3) matrix shared by the batch or a (B, 3, 3)
    per-sample stack; anything with an ``m`` attribute is unwrapped first.
    Row-major flattening, so row r of the 3 x d' block occupies columns
    [r*d', (r+1)*d').
    """
    r = getattr(rotation, "m", rotation)
    if not isinstance(r, torch.Tensor):
        # copy: rotation matrices arrive as read-only arrays
        r = torch.from_numpy(np.array(r, dtype=np.float64))
    z = z_hat if isinstance(z_hat, torch.Tensor) else torch.as_tensor(z_hat, dtype=torch.float64)
    if z.ndim != 3 or z.shape[1] != 3:
        raise ShapeError(f"z_hat must be (B, 3, d'), got {tuple(z.shape)}")
    r = r.to(z.dtype)
    if r.ndim == 2:
        rotated = torch.einsum("rc,bcd->brd", r, z)
    elif r.ndim == 3 and r.shape[0] == z.shape[0]:
        rotated = torch.einsum("brc,bcd->brd", r, z)
    else:
        raise ShapeError(f"rotation must be (3,3) or (B,3,3), got {tuple(r.shape)}")
    return rotated.reshape(z.shape[0], -1)


def overall_loss(batch, rotations=None, cfg=None):
    """Full Stage-I objective over a batch.

    Sums, per view i and anchor b, the two symmetrized invariance terms
    (when enabled) plus the equivariance terms against every other view j,
    then divides by 2B. ``rotations`` (one per view) are applied to
    z_hat_per_view when the batch doesn't already carry z_bar_per_view.
    Differentiable end to end.
    """
    cfg = cfg if cfg is not None else LossConfig()
    total = None
    count_b = batch.batch_size

    def add(term):
        nonlocal total
        total = term if total is None else total + term

    if cfg.include_invariance:
        if batch.z is None:
            raise MissingViewError("invariance variant requires z/z_prime embeddings")
        for z, zp in zip(batch.z, batch.z_prime):
            add(_pair_losses(z, zp, cfg.tau).sum())
            add(_pair_losses(zp, z, cfg.tau).sum())

    if cfg.include_equivariance:
        z_bars = batch.z_bar_per_view
        if z_bars is None:
            if batch.z_hat_per_view is None:
                raise MissingViewError("equivariance variant requires z_hat or z_bar embeddings")
            if rotations is None:
                raise MissingViewError("rotations are required to form z_bar from z_hat")
            if len(rotations) != len(batch.z_hat_per_view):
                raise MissingViewError(
                    f"{len(batch.z_hat_per_view)} views but {len(rotations)} rotations"
                )
            z_bars = [rotate_flatten(z_hat, r) for z_hat, r in zip(batch.z_hat_per_view, rotations)]
        flat = [zb.reshape(zb.shape[0], -1) for zb in z_bars]
        for i in range(len(flat)):
            for j in range(len(flat)):
                if j != i:
                    add(_pair_losses(flat[i], flat[j], cfg.tau).sum())

    if total is None:
        raise MissingViewError("no loss terms were produced; check variant flags and batch contents")
    return total / (2.0 * count_b)


def angular_loss(g, g_hat):
    """Stage-II metric between two gaze directions, in degrees."""
    from .geometry import angular_error_deg

    return angular_error_deg(g, g_hat)


def angular_loss_batch(pred, target, eps=1e-7):
    """Differentiable per-sample angular error in degrees for (N, 3) tensors.

    Cosines are clamped to +-(1 - eps): acos has an infinite derivative at
    +-1, and a perfectly-aligned prediction would otherwise produce NaN
    gradients. The clamp biases the loss floor by about 0.03 degrees,
    well below label noise.
    """
    p = torch.nn.functional.normalize(pred, dim=-1)
    t = torch.nn.functional.normalize(target, dim=-1)
    cosine = (p * t).sum(dim=-1).clamp(-1.0 + eps, 1.0 - eps)
    return torch.rad2deg(torch.acos(cosine))
