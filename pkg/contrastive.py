"""
Contrastive objectives and desk-scale training of the projection heads.

ITC is the in-batch InfoNCE loss over global CLS scores, averaged over the
image-to-text (row softmax) and text-to-image (column softmax) directions.
BWC is the same functional form applied to bag-wise MaxSim scores.
Gradients are analytic; ``grad_check`` compares them with central differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from bagging import BaggingHelper, BagSegmentation, bag_cls_passthrough, segment
from config import TAU_MAX, TAU_MIN, TrainConfig
from embedding_core import (
    EmbeddingMatrix,
    ProjectionHead,
    ToyMixer,
    l2_normalize,
    l2_normalize_rows,
    mix,
    project,
)
from errors import (
    DimMismatchError,
    DivergenceDetectedError,
    EmptyInputError,
    EmptyMaskError,
    NonPositiveTauError,
    NonSquareError,
)
from similarity import ItemEmbedding, PaddingMask, ScoringMode, SimilarityMatrix

logger = logging.getLogger(__name__)


class BaggingPlacement(str, Enum):
    EARLY = "early"
    LATE = "late"


@dataclass(frozen=True)
class Temperature:
    """Learnable softmax temperature."""
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise NonPositiveTauError(f"temperature must be > 0, got {self.tau}")

    def clamped(self) -> "Temperature":
        return Temperature(float(min(max(self.tau, TAU_MIN), TAU_MAX)))


@dataclass(frozen=True, eq=False)
class LossReport:
    """
    Loss values and analytic gradients for one batch.

    ``l_i2t``/``l_t2i`` are the ITC directional terms and ``l_bwc_i2t``/
    ``l_bwc_t2i`` the BWC ones; ``l_itc`` and ``l_bwc`` are their means.
    """
    l_i2t: float = 0.0
    l_t2i: float = 0.0
    l_itc: float = 0.0
    l_bwc: float = 0.0
    grad_scores_itc: Optional[np.ndarray] = None
    grad_scores_bwc: Optional[np.ndarray] = None
    grad_tau: float = 0.0
    l_bwc_i2t: float = 0.0
    l_bwc_t2i: float = 0.0
    grad_tau_bwc: float = 0.0
    lam: float = 1.0

    @property
    def total(self) -> float:
        return self.l_itc + self.lam * self.l_bwc


def _log_softmax_diag(z: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-query loss terms and softmax probabilities along ``axis``."""
    peak = z.max(axis=axis, keepdims=True)
    exp = np.exp(z - peak)
    total = exp.sum(axis=axis, keepdims=True)
    lse = peak + np.log(total)
    losses = np.squeeze(lse, axis=axis) - np.diagonal(z)
    return losses, exp / total


def _infonce(scores: SimilarityMatrix, tau: Temperature):
    """Returns (l_i2t, l_t2i, l_mean, grad_scores, grad_tau)."""
    S = scores.scores
    if not scores.is_square:
        raise NonSquareError(f"contrastive loss needs a square matrix, got {S.shape}")
    if not isinstance(tau, Temperature):
        tau = Temperature(float(tau))
    bs = S.shape[0]
    if bs == 0:
        raise EmptyInputError("empty batch")
    z = S / tau.tau
    rows, p_row = _log_softmax_diag(z, axis=1)
    cols, p_col = _log_softmax_diag(z, axis=0)
    l_i2t = float(rows.mean())
    l_t2i = float(cols.mean())
    l_mean = (l_i2t + l_t2i) / 2

    eye = np.eye(bs)
    grad_z = 0.5 * ((p_row - eye) + (p_col - eye)) / bs
    grad_scores = grad_z / tau.tau
    grad_tau = float(-(grad_scores * S).sum() / tau.tau)
    return l_i2t, l_t2i, l_mean, grad_scores, grad_tau


def itc_loss(scores: SimilarityMatrix, tau: Temperature) -> LossReport:
    """Image-text contrastive loss over a bs x bs matrix with positives on the diagonal."""
    l_i2t, l_t2i, l_itc, grad, grad_tau = _infonce(scores, tau)
    return LossReport(l_i2t=l_i2t, l_t2i=l_t2i, l_itc=l_itc,
                      grad_scores_itc=grad, grad_scores_bwc=np.zeros_like(grad),
                      grad_tau=grad_tau)


def bwc_loss(bag_scores: SimilarityMatrix, tau: Temperature) -> LossReport:
    """Bag-wise contrastive loss: the ITC form applied to bag-wise scores."""
    l_i2t, l_t2i, l_bwc, grad, grad_tau = _infonce(bag_scores, tau)
    return LossReport(l_bwc=l_bwc, l_bwc_i2t=l_i2t, l_bwc_t2i=l_t2i,
                      grad_scores_itc=np.zeros_like(grad), grad_scores_bwc=grad,
                      grad_tau=grad_tau, grad_tau_bwc=grad_tau)


def contrastive_loss(global_scores: SimilarityMatrix, bag_scores: SimilarityMatrix,
                     tau: Temperature, lam: float = 1.0,
                     tau_bwc: Optional[Temperature] = None) -> LossReport:
    """L = L_itc + lam * L_bwc; the temperature is shared unless ``tau_bwc`` is given."""
    itc = itc_loss(global_scores, tau)
    bwc = bwc_loss(bag_scores, tau_bwc or tau)
    if tau_bwc is None:
        grad_tau, grad_tau_bwc = itc.grad_tau + lam * bwc.grad_tau, 0.0
    else:
        grad_tau, grad_tau_bwc = itc.grad_tau, lam * bwc.grad_tau
    return LossReport(l_i2t=itc.l_i2t, l_t2i=itc.l_t2i, l_itc=itc.l_itc,
                      l_bwc=bwc.l_bwc, l_bwc_i2t=bwc.l_bwc_i2t, l_bwc_t2i=bwc.l_bwc_t2i,
                      grad_scores_itc=itc.grad_scores_itc,
                      grad_scores_bwc=lam * bwc.grad_scores_bwc,
                      grad_tau=grad_tau, grad_tau_bwc=grad_tau_bwc, lam=lam)


# loss_fn(scores, tau) -> (loss, grad_scores, grad_tau)
LossFn = Callable[[np.ndarray, float], Tuple[float, np.ndarray, float]]


def itc_objective(scores: np.ndarray, tau: float) -> Tuple[float, np.ndarray, float]:
    report = itc_loss(SimilarityMatrix(scores, ScoringMode.GLOBAL), Temperature(tau))
    return report.l_itc, report.grad_scores_itc, report.grad_tau


def bwc_objective(scores: np.ndarray, tau: float) -> Tuple[float, np.ndarray, float]:
    report = bwc_loss(SimilarityMatrix(scores, ScoringMode.BAGWISE), Temperature(tau))
    return report.l_bwc, report.grad_scores_bwc, report.grad_tau


def grad_check(loss_fn: LossFn, scores: np.ndarray, tau: float, epsilon: float = 1e-5) -> float:
    """
    Worst normwise relative error between analytic and central-difference gradients.

    The scores gradient and the temperature gradient are checked together.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    scores = np.array(scores, dtype=np.float64)
    _, grad_scores, grad_tau = loss_fn(scores, tau)

    numeric = np.zeros_like(scores)
    for idx in np.ndindex(scores.shape):
        bumped = scores.copy()
        bumped[idx] += epsilon
        f_plus = loss_fn(bumped, tau)[0]
        bumped[idx] -= 2 * epsilon
        f_minus = loss_fn(bumped, tau)[0]
        numeric[idx] = (f_plus - f_minus) / (2 * epsilon)
    # tau step stays below tau so tau - h remains a valid temperature
    h = min(epsilon, tau / 2)
    numeric_tau = (loss_fn(scores, tau + h)[0] - loss_fn(scores, tau - h)[0]) / (2 * h)

    analytic = np.append(np.ravel(grad_scores), grad_tau)
    approx = np.append(numeric.ravel(), numeric_tau)
    scale = max(np.abs(analytic).max(), np.abs(approx).max(), 1e-12)
    return float(np.abs(analytic - approx).max() / scale)


# ---------------------------
# Text pipeline
# ---------------------------
def lookup(table: EmbeddingMatrix, tokens: Sequence[int]) -> EmbeddingMatrix:
    """
    Gather token embedding rows.

    Args:
        table (EmbeddingMatrix): Token table, one row per id.
        tokens (Sequence[int]): Token ids.

    Returns:
        EmbeddingMatrix: One row per token, in input order.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise DimMismatchError(f"token id out of range for a {table.rows}-row table")
    return EmbeddingMatrix(table.data[ids])


def _segment_content(content: Sequence[int], helper: Optional[BaggingHelper]) -> BagSegmentation:
    if len(content) == 0:
        return BagSegmentation.empty()
    if helper is None:
        return BagSegmentation.singletons(len(content))
    return segment(content, helper)


def encode_text_pipeline(tokens: Sequence[int], token_embeddings_table: EmbeddingMatrix,
                         mixer: ToyMixer, helper: Optional[BaggingHelper], head: ProjectionHead,
                         placement: BaggingPlacement = BaggingPlacement.LATE,
                         renormalize: bool = True) -> Tuple[np.ndarray, EmbeddingMatrix]:
    """
    Encode one text into (b_cls, bags) in the joint space.

    ``tokens[0]`` is the CLS token. Early placement bags the looked-up rows
    before the encoder; late placement bags encoder outputs after projection.
    The CLS vector is always normalized, bags only when ``renormalize`` is set.
    A missing helper (empty vocabulary) bags every token on its own.
    """
    if len(tokens) == 0:
        raise EmptyInputError("text has no tokens (CLS expected at position 0)")
    if token_embeddings_table.dim != mixer.dim or mixer.dim != head.dim_in:
        raise DimMismatchError(
            f"table dim {token_embeddings_table.dim}, mixer dim {mixer.dim}, head input {head.dim_in} differ")
    embs = lookup(token_embeddings_table, tokens)
    seg = _segment_content(list(tokens[1:]), helper)

    if BaggingPlacement(placement) is BaggingPlacement.EARLY:
        cls_raw, bags_raw = bag_cls_passthrough(embs, seg, renormalize=False)
        sequence = EmbeddingMatrix(np.vstack([cls_raw[None, :], bags_raw.data]))
        encoded = project(mix(sequence, mixer), head)
        cls = encoded.data[0]
        bags = encoded.take(1)
        if renormalize:
            bags = l2_normalize_rows(bags)
    else:
        encoded = project(mix(embs, mixer), head)
        cls, bags = bag_cls_passthrough(encoded, seg, renormalize=renormalize)
    return l2_normalize(cls), bags


# ---------------------------
# Training
# ---------------------------
@dataclass(frozen=True, eq=False)
class TextEncoder:
    """Frozen text side: token table, toy encoder and optional bagging helper."""
    token_table: EmbeddingMatrix
    mixer: ToyMixer
    helper: Optional[BaggingHelper] = None

    @property
    def dim(self) -> int:
        return self.token_table.dim


@dataclass(frozen=True, eq=False)
class PairedSample:
    """One image/text pair: frozen image encoder rows (CLS first) and text token ids (CLS first)."""
    pair_id: str
    image_tokens: EmbeddingMatrix
    text_tokens: Tuple[int, ...]


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    l_itc: float
    l_bwc: float
    tau: float


@dataclass(eq=False)
class TrainResult:
    head_v: ProjectionHead
    head_t: ProjectionHead
    tau: Temperature
    tau_bwc: Optional[Temperature]
    curve: List[EpochLoss] = field(default_factory=list)


def text_features(sample: PairedSample, encoder: TextEncoder,
                  placement: BaggingPlacement) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen text features before the trainable head: (cls, raw bag sums)."""
    cls, bags = encode_text_pipeline(sample.text_tokens, encoder.token_table, encoder.mixer,
                                     encoder.helper, ProjectionHead.identity(encoder.dim),
                                     placement, renormalize=False)
    return cls, bags.data


def _normalize_rows(x: np.ndarray, valid: Optional[np.ndarray] = None):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if valid is not None:
        norms = np.where(valid[..., None], norms, 1.0)
    if np.any(norms < 1e-12):
        raise DivergenceDetectedError("a projected row collapsed to zero norm")
    return x / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=-1, keepdims=True)) / norms


@dataclass(eq=False)
class _Batch:
    images: np.ndarray      # (bs, 1+n, d_img)
    text_cls: np.ndarray    # (bs, d_txt)
    bags: np.ndarray        # (bs, K, d_txt), zero padded
    bag_mask: np.ndarray    # (bs, K)


def _make_batch(samples: Sequence[PairedSample], features) -> _Batch:
    shapes = {s.image_tokens.data.shape for s in samples}
    if len(shapes) != 1:
        raise DimMismatchError(f"images in a batch must share one shape, got {sorted(shapes)}")
    images = np.stack([s.image_tokens.data for s in samples])
    if images.shape[1] < 2:
        raise EmptyInputError("images need at least one patch besides CLS")
    text_cls = np.stack([features[s.pair_id][0] for s in samples])
    ks = [features[s.pair_id][1].shape[0] for s in samples]
    if min(ks) == 0:
        raise EmptyMaskError("a text in the batch has no bags")
    width = max(ks)
    bags = np.zeros((len(samples), width, text_cls.shape[1]))
    mask = np.zeros((len(samples), width), dtype=bool)
    for b, s in enumerate(samples):
        rows = features[s.pair_id][1]
        bags[b, :rows.shape[0]] = rows
        mask[b, :rows.shape[0]] = True
    return _Batch(images, text_cls, bags, mask)


def _bagwise_forward(patches: np.ndarray, bags: np.ndarray, mask: np.ndarray, symmetric: bool):
    """Bag-wise score matrix (images x texts) plus what the backward pass needs."""
    sims = np.einsum("and,bkd->abnk", patches, bags)
    sims = np.where(mask[None, :, None, :], sims, -np.inf)
    best_bag = sims.argmax(axis=3)                                   # (a, b, n)
    i2t = np.take_along_axis(sims, best_bag[..., None], axis=3)[..., 0].mean(axis=2)
    if not symmetric:
        return i2t, (best_bag, None)
    best_patch = sims.argmax(axis=2)                                 # (a, b, K)
    per_bag = np.take_along_axis(sims, best_patch[:, :, None, :], axis=2)[:, :, 0, :]
    per_bag = np.where(mask[None, :, :], per_bag, 0.0)
    t2i = per_bag.sum(axis=2) / mask.sum(axis=1)[None, :]
    return 0.5 * (i2t + t2i), (best_bag, best_patch)


def _bagwise_backward(grad: np.ndarray, patches: np.ndarray, bags: np.ndarray, mask: np.ndarray,
                      cache, symmetric: bool):
    best_bag, best_patch = cache
    bs_img, n, _ = patches.shape
    K = bags.shape[1]
    g = 0.5 * grad if symmetric else grad
    text_idx = np.arange(bags.shape[0])[None, :, None]

    gathered = bags[text_idx, best_bag]                              # (a, b, n, D)
    d_patches = np.einsum("ab,abnd->and", g, gathered) / n
    picked = np.eye(K)[best_bag]                                     # (a, b, n, K)
    d_bags = np.einsum("ab,abnk,and->bkd", g, picked, patches) / n

    if symmetric:
        k_b = mask.sum(axis=1)
        gt = g / k_b[None, :]
        image_idx = np.arange(bs_img)[:, None, None]
        chosen = patches[image_idx, best_patch]                      # (a, b, K, D)
        d_bags += np.einsum("ab,abkd->bkd", gt, chosen) * mask[:, :, None]
        hit = np.eye(n)[best_patch] * mask[None, :, :, None]         # (a, b, K, n)
        d_patches += np.einsum("ab,abkn,bkd->and", gt, hit, bags)
    return d_patches, d_bags


def _step(batch: _Batch, w_v: np.ndarray, w_t: np.ndarray, tau: Temperature,
          tau_bwc: Optional[Temperature], config: TrainConfig):
    symmetric = config.bwc_direction == "symmetric"
    v_unit, v_norm = _normalize_rows(batch.images @ w_v)
    img_cls, patches = v_unit[:, 0], v_unit[:, 1:]
    t_unit, t_norm = _normalize_rows(batch.text_cls @ w_t)
    bags_raw = batch.bags @ w_t
    if config.renormalize_bags:
        bags, b_norm = _normalize_rows(bags_raw, batch.bag_mask)
        bags = bags * batch.bag_mask[..., None]
    else:
        bags, b_norm = bags_raw, None

    global_scores = SimilarityMatrix(img_cls @ t_unit.T, ScoringMode.GLOBAL)
    bag_matrix, cache = _bagwise_forward(patches, bags, batch.bag_mask, symmetric)
    report = contrastive_loss(global_scores, SimilarityMatrix(bag_matrix, ScoringMode.BAGWISE),
                              tau, config.lambda_bwc, tau_bwc)

    g_itc = report.grad_scores_itc
    d_img_cls = g_itc @ t_unit
    d_txt_cls = g_itc.T @ img_cls
    d_patches, d_bags = _bagwise_backward(report.grad_scores_bwc, patches, bags,
                                          batch.bag_mask, cache, symmetric)

    d_v_unit = np.concatenate([d_img_cls[:, None, :], d_patches], axis=1)
    d_v = _normalize_backward(v_unit, v_norm, d_v_unit)
    grad_w_v = np.einsum("anx,and->xd", batch.images, d_v)

    d_t = _normalize_backward(t_unit, t_norm, d_txt_cls)
    if config.renormalize_bags:
        d_bags_raw = _normalize_backward(bags, b_norm, d_bags) * batch.bag_mask[..., None]
    else:
        d_bags_raw = d_bags * batch.bag_mask[..., None]
    grad_w_t = batch.text_cls.T @ d_t + np.einsum("bkx,bkd->xd", batch.bags, d_bags_raw)
    return report, grad_w_v, grad_w_t


def train_heads(paired_data: Sequence[PairedSample], encoder: TextEncoder,
                config: Optional[TrainConfig] = None,
                head_v: Optional[ProjectionHead] = None,
                head_t: Optional[ProjectionHead] = None) -> TrainResult:
    """
    Gradient descent on L_itc + lambda * L_bwc through both heads and tau.

    The image encoder outputs, token table and mixer stay frozen.

    Args:
        paired_data (Sequence[PairedSample]): At least two image/text pairs.
        encoder (TextEncoder): Frozen token table, mixer and bagging helper.
        config (TrainConfig, optional): Training settings. Defaults to TrainConfig().
        head_v (ProjectionHead, optional): Starting image head. Random when omitted.
        head_t (ProjectionHead, optional): Starting text head. Random when omitted.

    Returns:
        TrainResult: Trained heads, final temperatures and the per-epoch loss curve.
    """
    config = config or TrainConfig()
    if len(paired_data) < 2:
        raise EmptyInputError("training needs at least 2 pairs")
    placement = BaggingPlacement(config.placement)
    rng = np.random.default_rng(config.seed)

    d_img = paired_data[0].image_tokens.dim
    w_v = np.array((head_v or ProjectionHead.random(d_img, config.dim, config.seed)).weight)
    w_t = np.array((head_t or ProjectionHead.random(encoder.dim, config.dim, config.seed + 1)).weight)
    if w_v.shape[1] != w_t.shape[1]:
        raise DimMismatchError(f"heads disagree on the joint dim: {w_v.shape[1]} vs {w_t.shape[1]}")
    tau = Temperature(config.tau_init)
    tau_bwc = Temperature(config.tau_init) if config.separate_tau else None

    features = {s.pair_id: text_features(s, encoder, placement) for s in paired_data}
    batch_size = min(config.batch_size, len(paired_data))
    curve: List[EpochLoss] = []
    order = np.arange(len(paired_data))

    for epoch in range(config.epochs):
        if config.shuffle and batch_size < len(paired_data):
            order = rng.permutation(len(paired_data))
        starts = range(0, len(order) - batch_size + 1, batch_size)
        itc_sum = bwc_sum = 0.0
        for start in starts:
            batch = _make_batch([paired_data[i] for i in order[start:start + batch_size]], features)
            report, grad_w_v, grad_w_t = _step(batch, w_v, w_t, tau, tau_bwc, config)
            if not (np.isfinite(report.total) and np.all(np.isfinite(grad_w_v))
                    and np.all(np.isfinite(grad_w_t))):
                raise DivergenceDetectedError(f"non-finite loss or gradient at epoch {epoch}")
            itc_sum += report.l_itc
            bwc_sum += report.l_bwc
            w_v -= config.lr * grad_w_v
            w_t -= config.lr * grad_w_t
            tau = Temperature(max(tau.tau - config.tau_lr * report.grad_tau, TAU_MIN)).clamped()
            if tau_bwc is not None:
                tau_bwc = Temperature(max(tau_bwc.tau - config.tau_lr * report.grad_tau_bwc, TAU_MIN)).clamped()
        batches = len(starts)
        curve.append(EpochLoss(epoch, itc_sum / batches, bwc_sum / batches, tau.tau))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            logger.info("epoch %d: l_itc=%.4f l_bwc=%.4f tau=%.4f",
                        epoch, curve[-1].l_itc, curve[-1].l_bwc, tau.tau)

    return TrainResult(ProjectionHead(w_v), ProjectionHead(w_t), tau, tau_bwc, curve)


def encode_image(image_tokens: EmbeddingMatrix, head_v: ProjectionHead, item_id: str) -> ItemEmbedding:
    """Project and normalize image rows: CLS first, patches after."""
    unit = l2_normalize_rows(project(image_tokens, head_v))
    return ItemEmbedding(item_id, unit.data[0], unit.take(1))


def encode_text(tokens: Sequence[int], encoder: TextEncoder, head_t: ProjectionHead, item_id: str,
                placement: BaggingPlacement = BaggingPlacement.LATE,
                renormalize: bool = True) -> ItemEmbedding:
    cls, bags = encode_text_pipeline(tokens, encoder.token_table, encoder.mixer, encoder.helper,
                                     head_t, placement, renormalize)
    mask = PaddingMask.all_valid(bags.rows)
    return ItemEmbedding(item_id, cls, bags if bags.rows else None, mask if bags.rows else None)


def encode_pairs(samples: Sequence[PairedSample], encoder: TextEncoder, head_v: ProjectionHead,
                 head_t: ProjectionHead, placement: BaggingPlacement = BaggingPlacement.LATE,
                 renormalize: bool = True) -> Tuple[List[ItemEmbedding], List[ItemEmbedding]]:
    """Joint-space image and text items for every pair (ids shared per pair)."""
    images = [encode_image(s.image_tokens, head_v, s.pair_id) for s in samples]
    texts = [encode_text(s.text_tokens, encoder, head_t, s.pair_id, placement, renormalize)
             for s in samples]
    return images, texts
