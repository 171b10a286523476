"""Training objectives on part embeddings.

All distances between two sequences are the mean over parts of the per-part
Euclidean distance, which is also the retrieval metric at test time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

TRIPLET_MARGIN = 0.2
CONTRASTIVE_MARGIN = 0.2
CONTRASTIVE_WEIGHT = 2.0


def part_distances(a: Tensor, b: Tensor) -> Tensor:
    """(Na, P, C) x (Nb, P, C) -> (Na, Nb) mean per-part Euclidean distance."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"part embeddings disagree: {a.shape} vs {b.shape}")
    na, p, c = a.shape
    nb = b.shape[0]
    diff = nx.sub(nx.reshape(a, (na, 1, p, c)), nx.reshape(b, (1, nb, p, c)))
    return nx.mean(nx.vector_norm(diff, axis=-1), axis=-1)


def _zero_like(t: Tensor) -> Tensor:
    # keeps the graph connected so callers can always call backward()
    return nx.mul_scalar(nx.sum(t), 0.0)


def triplet_loss(emb: Tensor, labels, margin: float = TRIPLET_MARGIN) -> tuple[Tensor, int]:
    """Batch-all triplet hinge normalized by the number of strictly positive terms."""
    labels = np.asarray(labels)
    if len(labels) != emb.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {emb.shape[0]} embeddings")
    d = part_distances(emb, emb)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    if not valid.any():
        log.info("triplet loss: batch holds no valid triplet")
        return _zero_like(d), 0
    n = len(labels)
    dap = nx.reshape(d, (n, n, 1))
    dan = nx.reshape(d, (n, 1, n))
    terms = nx.relu(nx.add(nx.sub(dap, dan), margin))
    terms = nx.mul(terms, valid.astype(terms.dtype))
    n_pos = int(np.count_nonzero(terms.data > 0))
    if n_pos == 0:
        return _zero_like(terms), 0
    return nx.mul_scalar(nx.sum(terms), 1.0 / n_pos), n_pos


def contrastive_loss(lidar: Tensor, camera: Tensor, lidar_labels, camera_labels,
                     margin: float = CONTRASTIVE_MARGIN) -> tuple[Tensor, int]:
    """Mean over all LiDAR x camera pairs of y d^2 + (1 - y) max(m - d^2, 0)."""
    yl, yc = np.asarray(lidar_labels), np.asarray(camera_labels)
    if len(yl) == 0 or len(yc) == 0:
        raise DimensionError("contrastive loss needs both modalities in the batch")
    d2 = nx.square(part_distances(lidar, camera))
    y = (yl[:, None] == yc[None, :]).astype(d2.dtype)
    hinge = nx.relu(nx.sub(margin, d2))
    total = nx.add(nx.mul(d2, y), nx.mul(hinge, 1.0 - y))
    return nx.mean(total), int(y.size)


def cross_entropy_loss(aligned: list[Tensor], labels: list, heads: Tensor) -> Tensor:
    """Softmax cross-entropy with one head per part, averaged over parts, sequences, modalities.

    ``aligned`` holds one (N, P, C) batch per modality; ``heads`` is (P, C, numIds).
    """
    num_ids = heads.shape[-1]
    emb = nx.concat(list(aligned), axis=0) if len(aligned) > 1 else aligned[0]
    y = np.concatenate([np.asarray(lab) for lab in labels]).astype(np.int64)
    if len(y) != emb.shape[0]:
        raise DimensionError(f"{len(y)} labels for {emb.shape[0]} embeddings")
    if y.size and (y.min() < 0 or y.max() >= num_ids):
        raise ValueError(f"label outside the {num_ids} training identities: {sorted(set(y.tolist()))}")
    if emb.shape[1] != heads.shape[0] or emb.shape[2] != heads.shape[1]:
        raise DimensionError(f"embeddings {emb.shape} do not match heads {heads.shape}")
    logits = nx.matmul(nx.transpose(emb, (1, 0, 2)), heads)      # (P, N, numIds)
    logp = nx.log_softmax(logits)
    p = heads.shape[0]
    picked = nx.index(logp, (np.arange(p)[:, None], np.arange(len(y))[None, :], y[None, :]))
    return nx.mul_scalar(nx.mean(picked), -1.0)


@dataclass
class LossReport:
    l_pc: float
    l_sils: float
    l_contrastive: float
    l_ce: float
    total: float
    n_tp_lidar: int
    n_tp_camera: int
    n_pairs: int

    FIELDS = ("l_pc", "l_sils", "l_contrastive", "l_ce", "total", "n_tp_lidar", "n_tp_camera",
              "n_pairs")

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def composite(l_pc, l_sils, l_ce, l_con, lam: float = CONTRASTIVE_WEIGHT):
    """L = L_pc + L_sils + L_ce + lam * L_con; works on floats and tensors alike."""
    if isinstance(l_pc, Tensor):
        return nx.add(nx.add(nx.add(l_pc, l_sils), l_ce), nx.mul_scalar(l_con, lam))
    return l_pc + l_sils + l_ce + lam * l_con


def total_loss(lidar_fused: Tensor, lidar_aligned: Tensor, lidar_labels,
               camera_fused: Tensor, camera_aligned: Tensor, camera_labels, heads: Tensor,
               lam: float = CONTRASTIVE_WEIGHT, triplet_margin: float = TRIPLET_MARGIN,
               contrastive_margin: float = CONTRASTIVE_MARGIN) -> tuple[Tensor, LossReport]:
    def component(name, fn, *args):
        try:
            out = fn(*args)
        except NonFiniteError as exc:
            raise NonFiniteError(f"loss component {name} is non-finite: {exc}") from exc
        value = out[0] if isinstance(out, tuple) else out
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteError(f"loss component {name} is non-finite ({value.item()})")
        return out

    l_pc, n_l = component("L_pc", triplet_loss, lidar_fused, lidar_labels, triplet_margin)
    l_sils, n_c = component("L_sils", triplet_loss, camera_fused, camera_labels, triplet_margin)
    l_con, n_p = component("L_contrastive", contrastive_loss, lidar_aligned, camera_aligned,
                           lidar_labels, camera_labels, contrastive_margin)
    l_ce = component("L_ce", cross_entropy_loss, [lidar_aligned, camera_aligned],
                     [lidar_labels, camera_labels], heads)
    total = composite(l_pc, l_sils, l_ce, l_con, lam)
    report = LossReport(l_pc.item(), l_sils.item(), l_con.item(), l_ce.item(), total.item(),
                        n_l, n_c, n_p)
    return total, report
