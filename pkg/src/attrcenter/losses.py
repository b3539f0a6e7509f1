"""Margin losses over embeddings and attribute-combination centers.

All distances are squared Euclidean and all losses sum over the mini-batch
(no batch-mean), so learning rates should be read against that convention.
Every function here is a pure differentiable expression: evaluate it under a
Tape and the gradients reach embeddings and centers alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from attrcenter import autodiff as ad
from attrcenter.autodiff import DiffTensor, ShapeError
from attrcenter.lattice import CenterRegistry


@dataclass
class BatchEmbeddings:
    """Photo / genuine-sketch / impostor-sketch embeddings plus combination indices.

    All three matrices are (m, d); ``combo`` holds the attribute-combination
    index shared by the photo and both sketches of each batch element.
    """

    photos: DiffTensor
    genuine: DiffTensor
    impostor: DiffTensor
    combo: np.ndarray

    def __post_init__(self):
        p, g, im = self.photos, self.genuine, self.impostor
        if p.ndim != 2:
            raise ShapeError(f"batch embeddings must be 2-d, got {p.shape}")
        if not (p.shape == g.shape == im.shape):
            raise ShapeError(
                f"photo/genuine/impostor shapes disagree: {p.shape} / {g.shape} / {im.shape}")
        self.combo = np.asarray(self.combo)
        if self.combo.shape != (p.shape[0],):
            raise ShapeError(
                f"combo indices must have shape ({p.shape[0]},), got {self.combo.shape}")
        if not np.issubdtype(self.combo.dtype, np.integer):
            raise ShapeError("combo indices must be integers")

    @property
    def m(self) -> int:
        return self.photos.shape[0]


@dataclass
class LossBreakdown:
    """Composite loss with its three components (plus optional baselines)."""

    total: DiffTensor
    attr: DiffTensor
    id: DiffTensor
    cen: DiffTensor
    center: Optional[DiffTensor] = None
    contrastive_center: Optional[DiffTensor] = None
    softmax: Optional[DiffTensor] = None

    def values(self) -> dict:
        out = {"total": float(self.total.data), "attr": float(self.attr.data),
               "id": float(self.id.data), "cen": float(self.cen.data)}
        for name in ("center", "contrastive_center", "softmax"):
            t = getattr(self, name)
            if t is not None:
                out[name] = float(t.data)
        return out


def _check_combo_range(y: np.ndarray, n_centers: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= n_centers):
        raise ShapeError(f"combination index out of range for {n_centers} centers")


def center_loss(x: DiffTensor, y, centers: DiffTensor) -> DiffTensor:
    """Half the summed squared distance of each embedding to its class center."""
    y = np.asarray(y)
    rows = ad.gather(centers, y)
    return 0.5 * ad.sq_l2_norm(ad.sub(x, rows))


def joint_center_softmax(logits: DiffTensor, labels, x: DiffTensor, y,
                         centers: DiffTensor, lam: float) -> DiffTensor:
    """Summed softmax cross-entropy plus lam times the center loss."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    ls = ad.softmax_cross_entropy(logits, labels)
    if lam == 0.0:
        return ls
    return ad.add(ls, lam * center_loss(x, y, centers))


def _pairwise_sq_dists(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """(m, k) matrix of squared distances between rows of a and rows of b."""
    ra = ad.reshape(ad.rowwise_sq_norm(a), (a.shape[0], 1))
    rb = ad.reshape(ad.rowwise_sq_norm(b), (1, b.shape[0]))
    cross = ad.matmul(a, ad.transpose(b))
    return ad.sub(ad.add(ra, rb), 2.0 * cross)


def contrastive_center_loss(x: DiffTensor, y, centers: DiffTensor, delta: float) -> DiffTensor:
    """Intra-class pull over inter-class push: ratio of own-center distance to the rest."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    k = centers.shape[0]
    if k < 2:
        raise ShapeError(f"contrastive center loss needs >= 2 centers, got {k}")
    y = np.asarray(y)
    _check_combo_range(y, k)
    own = ad.rowwise_sq_norm(ad.sub(x, ad.gather(centers, y)))
    all_d2 = ad.tensor_sum(_pairwise_sq_dists(x, centers), axis=1)
    others = ad.sub(all_d2, own)
    return 0.5 * ad.tensor_sum(ad.div(own, ad.add(others, delta)))


def attribute_loss(batch: BatchEmbeddings, registry: CenterRegistry,
                   centers: Optional[DiffTensor] = None) -> DiffTensor:
    """Hinged pull of all three embedding roles toward their combination center.

    Each embedding is only penalized for sitting farther (in squared distance)
    than the attribute margin from its center; inside the margin the term is
    flat, leaving room for identity structure.
    """
    c = centers if centers is not None else registry.centers
    _check_combo_range(batch.combo, c.shape[0])
    cy = ad.gather(c, batch.combo)
    eps_c = registry.attribute_margin
    total = None
    for emb in (batch.photos, batch.genuine, batch.impostor):
        d2 = ad.rowwise_sq_norm(ad.sub(emb, cy))
        hinge = ad.maximum_const(ad.sub(d2, eps_c), 0.0)
        term = ad.tensor_sum(hinge)
        total = term if total is None else ad.add(total, term)
    return 0.5 * total


def identity_loss(batch: BatchEmbeddings, registry: CenterRegistry) -> DiffTensor:
    """Contrastive pairing: genuine sketches pulled in, impostors pushed past the margin."""
    d2_gen = ad.rowwise_sq_norm(ad.sub(batch.photos, batch.genuine))
    d2_imp = ad.rowwise_sq_norm(ad.sub(batch.photos, batch.impostor))
    push = ad.maximum_const(ad.sub(registry.identity_margin, d2_imp), 0.0)
    return 0.5 * ad.add(ad.tensor_sum(d2_gen), ad.tensor_sum(push))


def center_separation_loss(registry: CenterRegistry,
                           centers: Optional[DiffTensor] = None) -> DiffTensor:
    """Hinged pairwise repulsion of centers, margin growing with contradictions.

    The double sum runs over ordered pairs, so each unordered pair is counted
    twice.
    """
    c = centers if centers is not None else registry.centers
    n = c.shape[0]
    if n < 2:
        raise ShapeError(f"center separation needs >= 2 centers, got {n}")
    d2 = _pairwise_sq_dists(c, c)
    margins = DiffTensor(registry.margin_matrix.astype(c.dtype))
    hinge = ad.maximum_const(ad.sub(margins, d2), 0.0)
    offdiag = np.ones((n, n), dtype=c.dtype)
    np.fill_diagonal(offdiag, 0.0)
    return 0.5 * ad.tensor_sum(ad.mul(hinge, DiffTensor(offdiag)))


def attribute_centered_loss(batch: BatchEmbeddings, registry: CenterRegistry,
                            weights: Sequence[float] = (1.0, 1.0, 1.0),
                            centers: Optional[DiffTensor] = None,
                            attr_centers: Optional[DiffTensor] = None) -> LossBreakdown:
    """Weighted sum of the attribute, identity, and center-separation terms.

    Weights default to the plain unweighted sum. ``attr_centers`` (when given)
    is used only for the attribute term, letting a trainer route center
    gradients through the separation term alone.
    """
    w_attr, w_id, w_cen = (float(w) for w in weights)
    if min(w_attr, w_id, w_cen) < 0:
        raise ValueError(f"loss weights must be >= 0, got {(w_attr, w_id, w_cen)}")
    l_attr = attribute_loss(batch, registry, centers=attr_centers if attr_centers is not None else centers)
    l_id = identity_loss(batch, registry)
    l_cen = center_separation_loss(registry, centers=centers)
    total = ad.add(ad.add(w_attr * l_attr, w_id * l_id), w_cen * l_cen)
    return LossBreakdown(total=total, attr=l_attr, id=l_id, cen=l_cen)
