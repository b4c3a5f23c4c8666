"""Per-anatomy similarity blocks, target correction and the contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fvlm import autodiff as ad
from fvlm.autodiff import ContractError, Tensor

ONE_HOT, FNCN, COTEACH = "one-hot", "fncn", "coteach"


@dataclass
class SimilarityBlock:
    anatomy: int
    logits: Tensor  # [N, N], <V_i, T_k> / tau
    log_tau: Tensor

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def p_i2t(self) -> np.ndarray:
        return ad.softmax(ad.Tensor(self.logits.data), axis=-1).data

    @property
    def p_t2i(self) -> np.ndarray:
        return ad.softmax(ad.Tensor(self.logits.data.T), axis=-1).data


@dataclass
class LabelMatrix:
    anatomy: int
    y_i2t: np.ndarray
    y_t2i: np.ndarray
    provenance: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.provenance is None:
            self.provenance = np.full(self.y_i2t.shape, ONE_HOT, dtype=object)

    def copy(self) -> "LabelMatrix":
        return LabelMatrix(self.anatomy, self.y_i2t.copy(), self.y_t2i.copy(), self.provenance.copy())


def _check_unit(x: np.ndarray, what: str) -> None:
    if not np.allclose(np.linalg.norm(x, axis=-1), 1.0, atol=1e-6):
        raise ContractError(f"{what} embeddings must be unit-norm")


def compute_similarities(V: Tensor, T: Tensor, log_tau: Tensor, anatomy: int = 0) -> SimilarityBlock | None:
    """Scaled cosine logits for one anatomy; ``None`` when fewer than two samples."""
    if V.shape[0] < 2:
        return None
    if V.shape != T.shape:
        raise ContractError(f"visual {V.shape} and text {T.shape} blocks disagree")
    _check_unit(V.data, "visual")
    _check_unit(T.data, "text")
    inv_tau = ad.exp(-log_tau)
    return SimilarityBlock(anatomy, ad.matmul(V, T.T) * inv_tau, log_tau)


def base_targets(n: int, anatomy: int = 0) -> LabelMatrix:
    eye = np.eye(n)
    return LabelMatrix(anatomy, eye.copy(), eye.copy())


def apply_fncn(y: LabelMatrix, normal: np.ndarray) -> LabelMatrix:
    """Mark normal-normal pairs as positives, then renormalize every row."""
    normal = np.asarray(normal, dtype=bool)
    both = np.outer(normal, normal)
    out = y.copy()
    for mat in (out.y_i2t, out.y_t2i):
        mat[both] = 1.0
        mat /= mat.sum(axis=1, keepdims=True)
    out.provenance[both & ~np.eye(len(normal), dtype=bool)] = FNCN
    return out


def blend_coteach(y: LabelMatrix, p_i2t: np.ndarray, p_t2i: np.ndarray, alpha: float) -> LabelMatrix:
    """y <- alpha * y + (1 - alpha) * p' with the partner's predictions held constant."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if p_i2t.shape != y.y_i2t.shape or p_t2i.shape != y.y_t2i.shape:
        raise ValueError("partner predictions do not match the label block shape")
    out = y.copy()
    out.y_i2t = alpha * y.y_i2t + (1.0 - alpha) * np.asarray(p_i2t)
    out.y_t2i = alpha * y.y_t2i + (1.0 - alpha) * np.asarray(p_t2i)
    if alpha < 1.0:
        out.provenance[...] = COTEACH
    return out


def itc_loss(blocks: list[SimilarityBlock], labels: list[LabelMatrix]) -> Tensor:
    """0.5 * sum_j 1/N_j * sum_i [H(y_i2t, p_i2t) + H(y_t2i, p_t2i)]."""
    terms = []
    for blk, lab in zip(blocks, labels):
        if blk.anatomy != lab.anatomy or blk.logits.shape != lab.y_i2t.shape:
            raise ContractError("similarity blocks and label matrices are misaligned")
        h = ad.soft_cross_entropy_with_logits(lab.y_i2t, blk.logits) + ad.soft_cross_entropy_with_logits(
            lab.y_t2i, blk.logits.T
        )
        terms.append(h * (1.0 / blk.n))
    if not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * 0.5
