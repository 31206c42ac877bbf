"""
Scalar training objectives.

Every batch-level loss is the arithmetic mean of its per-sample values. The
frozen representations (global model, previous local models) are detached
inside the losses, so no gradient ever flows into them.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np

from app.core import tensor as T
from app.core.errors import ConfigError, ContractError, DimensionError, InputError
from app.core.tensor import Tensor
from app.models.network import ParamVector
from app.schemas.config import ContrastiveConfig

NORM_EPS = 1e-12


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (max-shifted)."""
    if logits.values.ndim != 2 or logits.shape[0] == 0:
        raise DimensionError("cross_entropy", logits.shape)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy labels", logits.shape, labels.shape)
    num_classes = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InputError(f"cross_entropy: labels must lie in [0, {num_classes})")
    return T.reduce_mean(T.logsumexp_rows(logits) - T.pick(logits, labels))


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two [batch x d] tensors, clamped to [-1, 1].

    Norms are floored at NORM_EPS, so an all-zero row yields similarity 0.
    """
    if a.values.ndim != 2 or a.shape != b.shape:
        raise DimensionError("cosine_similarity_rows", a.shape, b.shape)
    dot = T.reduce_sum(a * b, axis=1)
    sim = dot / (T.row_norm(a, NORM_EPS) * T.row_norm(b, NORM_EPS))
    return T.clip(sim, -1.0, 1.0)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError("cosine_sim", a.shape, b.shape)
    d = a.shape[0]
    rows = cosine_similarity_rows(T.reshape(a, (1, d)), T.reshape(b, (1, d)))
    return T.reshape(rows, ())


def contrastive_rows(z: Tensor, z_glob: Tensor, z_prevs: Sequence[Tensor], tau: float) -> Tensor:
    """Per-sample model-contrastive loss, shape [batch].

    Row i: log(1 + sum_j exp((sim(z_i, z_prev_j,i) - sim(z_i, z_glob_i)) / tau)).
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if len(z_prevs) == 0:
        raise ContractError("multi_negative_contrastive needs at least one previous representation")
    for other in (z_glob, *z_prevs):
        if other.shape != z.shape:
            raise DimensionError("model-contrastive loss", z.shape, other.shape)
    positive = cosine_similarity_rows(z, T.detach(z_glob))
    gaps = [
        T.scale(cosine_similarity_rows(z, T.detach(prev)) - positive, 1.0 / tau)
        for prev in z_prevs
    ]
    return T.log1p_sum_exp_rows(T.stack_columns(gaps))


def multi_negative_contrastive(z: Tensor, z_glob: Tensor, z_prevs: Sequence[Tensor], tau: float) -> Tensor:
    """Model-contrastive loss with one positive (global) and k negatives, averaged over the batch."""
    return T.reduce_mean(contrastive_rows(z, z_glob, z_prevs, tau))


def model_contrastive_loss(z: Tensor, z_glob: Tensor, z_prev: Tensor, tau: float) -> Tensor:
    return multi_negative_contrastive(z, z_glob, [z_prev], tau)


def l2_rep_penalty(z: Tensor, z_glob: Tensor) -> Tensor:
    """Mean over rows of the (unsquared) Euclidean distance ||z - z_glob||."""
    if z.values.ndim != 2 or z.shape != z_glob.shape:
        raise DimensionError("l2_rep_penalty", z.shape, z_glob.shape)
    diff = z - T.detach(z_glob)
    return T.reduce_mean(T.sqrt(T.reduce_sum(diff * diff, axis=1)))


def proximal_term(w: Union[Tensor, ParamVector], w_glob: Union[Tensor, ParamVector]) -> Tensor:
    """(1/2) * ||w - w_glob||^2 with w_glob frozen."""
    if isinstance(w, ParamVector):
        w = Tensor(w.values)
    anchor = Tensor(w_glob.values) if isinstance(w_glob, ParamVector) else T.detach(w_glob)
    if w.shape != anchor.shape:
        raise DimensionError("proximal_term", w.shape, anchor.shape)
    diff = w - anchor
    return T.scale(T.reduce_sum(diff * diff), 0.5)


def combined_local_loss(
    logits: Tensor,
    labels: Sequence[int],
    z: Tensor,
    z_glob: Tensor,
    z_prev: Union[Tensor, Sequence[Tensor]],
    cfg: ContrastiveConfig,
) -> Tensor:
    """l_sup + mu * l_con; returns the supervised loss itself when mu == 0."""
    sup = cross_entropy(logits, labels)
    if cfg.mu == 0:
        return sup
    prevs = [z_prev] if isinstance(z_prev, Tensor) else list(z_prev)
    con = multi_negative_contrastive(z, z_glob, prevs[:cfg.max_negative_pairs], cfg.temperature)
    return sup + T.scale(con, cfg.mu)


@dataclass
class LossBreakdown:
    total: Tensor
    sup: float
    reg: Optional[float] = None


def local_objective(
    logits: Tensor,
    labels: Sequence[int],
    z: Tensor,
    z_glob: Tensor,
    z_prevs: Sequence[Tensor],
    cfg: ContrastiveConfig,
    variant: Literal["contrastive", "l2"] = "contrastive",
) -> LossBreakdown:
    """Local MOON objective with its parts reported separately.

    The contrastive term is omitted while no previous local model exists.
    """
    sup = cross_entropy(logits, labels)
    if variant == "l2":
        reg = l2_rep_penalty(z, z_glob)
    elif z_prevs:
        reg = multi_negative_contrastive(z, z_glob, list(z_prevs)[:cfg.max_negative_pairs], cfg.temperature)
    else:
        return LossBreakdown(total=sup, sup=sup.item())
    total = sup if cfg.mu == 0 else sup + T.scale(reg, cfg.mu)
    return LossBreakdown(total=total, sup=sup.item(), reg=reg.item())
