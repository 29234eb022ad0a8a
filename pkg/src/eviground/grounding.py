"""Sentence-evidence contrastive grounding.

Implements the multi-positive InfoNCE objective in both directions
(sentence->evidence and evidence->sentence) as a negative log-likelihood,
averaged over positives per anchor and over anchors per direction, with
analytic gradients for the embedder head. Negatives are all in-batch
non-positives; only the paired positive appears in its own denominator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEvidenceError, NoPositiveError, ValidationError
from .losses import LossWithGrad, cosine_similarity, softmax
from .records import EvidenceItem


def kappa(s_vec: np.ndarray, e_vec: np.ndarray, tau: float) -> float:
    """Scaled exponential similarity exp(cos(s, e) / tau)."""
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    return math.exp(cosine_similarity(s_vec, e_vec) / tau)


@dataclass
class GroundingBatch:
    sentences: list[str]
    evidences: list[EvidenceItem]
    positive_pairs: set[tuple[int, int]] = field(default_factory=set)

    def __post_init__(self):
        self.positive_pairs = set(map(tuple, self.positive_pairs))
        for si, ei in self.positive_pairs:
            if not (0 <= si < len(self.sentences) and 0 <= ei < len(self.evidences)):
                raise ValidationError(f"positive pair ({si}, {ei}) out of range")

    def positives_of_sentence(self, si: int) -> list[int]:
        return sorted(ei for s, ei in self.positive_pairs if s == si)

    def positives_of_evidence(self, ei: int) -> list[int]:
        return sorted(si for si, e in self.positive_pairs if e == ei)


def _directional_terms(kap: np.ndarray, positives: list[list[int]], tau: float):
    """Anchor-averaged NLL terms for one direction plus d(loss)/d(similarity).

    ``kap`` is (n_anchors, n_candidates) of exp(sim/tau); row i's negatives
    are the non-positive columns.
    """
    n_anchors, n_cands = kap.shape
    grad = np.zeros_like(kap)
    total = 0.0
    for i in range(n_anchors):
        pos = positives[i]
        if not pos:
            raise NoPositiveError(f"anchor {i} has no positive pair")
        neg = [j for j in range(n_cands) if j not in set(pos)]
        neg_sum = float(kap[i, neg].sum()) if neg else 0.0
        inv_npos = 1.0 / len(pos)
        for j in pos:
            denom = kap[i, j] + neg_sum
            total += -math.log(kap[i, j] / denom) * inv_npos
            # d(-log(k_ij / D)) / d sim: (k_ij/D - 1)/tau for the positive,
            # k_ik/(D*tau) for each negative
            grad[i, j] += (kap[i, j] / denom - 1.0) / tau * inv_npos
            for k in neg:
                grad[i, k] += kap[i, k] / (denom * tau) * inv_npos
    return total / n_anchors, grad / n_anchors


def infonce_from_features(
    feat_s: np.ndarray,
    feat_e: np.ndarray,
    pos_by_sentence: list[list[int]],
    pos_by_evidence: list[list[int]],
    emb,
    tau: float,
) -> LossWithGrad:
    """Feature-level core of the loss; lets trainers reuse cached features."""
    v_s, cache_s = emb.encode_features(feat_s)
    v_e, cache_e = emb.encode_features(feat_e)
    kap = np.exp(v_s @ v_e.T / tau)

    loss_se, grad_se = _directional_terms(kap, pos_by_sentence, tau)
    loss_es, grad_es = _directional_terms(kap.T, pos_by_evidence, tau)

    g_sim = grad_se + grad_es.T  # d(loss)/d(sim matrix)
    grads_s = emb.backward_texts(cache_s, g_sim @ v_e)
    grads_e = emb.backward_texts(cache_e, g_sim.T @ v_s)
    grads = {k: grads_s[k] + grads_e[k] for k in grads_s}
    return LossWithGrad(loss_se + loss_es, grads)


def multi_positive_infonce(batch: GroundingBatch, emb, tau: float = 0.07) -> LossWithGrad:
    """Sum of the two directional anchor means, with head gradients."""
    n_s, n_e = len(batch.sentences), len(batch.evidences)
    if max(n_s, n_e) < 2:
        raise ValidationError("batch needs at least two items on one side")
    return infonce_from_features(
        emb.features_of_texts(batch.sentences),
        emb.features_of_texts([e.descriptor for e in batch.evidences]),
        [batch.positives_of_sentence(i) for i in range(n_s)],
        [batch.positives_of_evidence(j) for j in range(n_e)],
        emb,
        tau,
    )


def grounding_logits(sentence: str, evidences: list[EvidenceItem], emb, tau: float) -> np.ndarray:
    """Cosine/tau logits used by both retrieval ranking and distillation."""
    if not evidences:
        raise EmptyEvidenceError("no candidate evidences")
    s_vec = emb.embed_text(sentence)
    return np.array(
        [cosine_similarity(s_vec, emb.embed_text(e.descriptor)) / tau for e in evidences]
    )


def ground_sentence(
    sentence: str,
    evidences: list[EvidenceItem],
    emb,
    tau: float = 0.07,
) -> np.ndarray:
    """Soft distribution over candidate evidences for one sentence."""
    return softmax(grounding_logits(sentence, evidences, emb, tau))


@dataclass
class GrounderConfig:
    """Training knobs for the contrastive embedder and the mask decoder."""

    epochs: int = 12
    lr: float = 0.5
    tau: float = 0.07
    lambda_mask: float = 1.0
    lambda_dice: float = 1.0
    lambda_bce: float = 1.0
    train_decoder: bool = True
    decoder_epochs: int = 60
    decoder_lr: float = 2e-3
    decoder_layers: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.tau <= 0 or self.lr <= 0:
            raise ValidationError("epochs >= 1, tau > 0, lr > 0 required")
        if min(self.lambda_mask, self.lambda_dice, self.lambda_bce) < 0:
            raise ValidationError("loss weights must be nonnegative")


def batch_from_rows(record, rows) -> GroundingBatch:
    """One patient's sentences, evidences, and gold links as a batch."""
    id_to_idx = {e.id: j for j, e in enumerate(record.evidence)}
    pairs = {
        (i, id_to_idx[eid])
        for i, row in enumerate(rows)
        for eid in row.evidence_ids
    }
    return GroundingBatch([row.sentence for row in rows], list(record.evidence), pairs)


def train_grounding(cohort, cfg: GrounderConfig, patient_ids: list[str] | None = None):
    """Fit the embedder on per-patient contrastive batches, then the mask
    decoder on (volume tokens, evidence tokens, mask) triples.

    Returns (embedder, decoder-or-None, history) where history carries the
    per-epoch contrastive and mask loss curves.
    """
    from .textenc import Embedder, tokenize
    from .segdecoder import SegDecoder, SegDecoderConfig, train_mask_decoder

    ids = list(patient_ids if patient_ids is not None else cohort.split["train"])
    if not ids:
        raise ValidationError("no training patients")
    wanted = set(ids)
    by_patient = {}
    for row in cohort.grounding:
        if row.patient_id in wanted:
            by_patient.setdefault(row.patient_id, []).append(row)

    emb = Embedder(seed=cfg.seed)
    prepared = []
    for pid in ids:
        record = cohort.records[pid]
        batch = batch_from_rows(record, by_patient[pid])
        prepared.append(
            (
                emb.features_of_texts(batch.sentences),
                emb.features_of_texts([e.descriptor for e in batch.evidences]),
                [batch.positives_of_sentence(i) for i in range(len(batch.sentences))],
                [batch.positives_of_evidence(j) for j in range(len(batch.evidences))],
            )
        )

    rng = np.random.default_rng(cfg.seed)
    se_curve = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in rng.permutation(len(prepared)):
            feat_s, feat_e, pos_s, pos_e = prepared[idx]
            loss = infonce_from_features(feat_s, feat_e, pos_s, pos_e, emb, cfg.tau)
            total += loss.value
            emb.head_w -= cfg.lr * loss.grads["head_w"]
            emb.head_b -= cfg.lr * loss.grads["head_b"]
        se_curve.append(total / len(prepared))

    decoder = None
    mask_curve: list[float] = []
    if cfg.train_decoder:
        dec_cfg = SegDecoderConfig(
            volume_dim=cohort.volume(ids[0]).shape[0],
            layers=cfg.decoder_layers,
            token_dim=emb.embed_dim,
            seed=cfg.seed,
        )
        decoder = SegDecoder(dec_cfg)
        samples = []
        if cfg.lambda_mask > 0.0:  # zero mask weight must leave the decoder untouched
            for pid in ids:
                record = cohort.records[pid]
                tokens = decoder.volume_to_tokens(cohort.volume(pid))
                for item in record.evidence:
                    if item.anatomy_ref is None:
                        continue
                    ev_tokens = emb.embed_tokens(tokenize(item.descriptor))
                    samples.append((tokens, ev_tokens, cohort.mask(pid, item.anatomy_ref)))
        mask_curve = train_mask_decoder(
            decoder,
            samples,
            epochs=cfg.decoder_epochs,
            lr=cfg.decoder_lr,
            lambda_mask=cfg.lambda_mask,
            lambda_dice=cfg.lambda_dice,
            lambda_bce=cfg.lambda_bce,
            seed=cfg.seed,
        )
    return emb, decoder, {"l_se": se_curve, "l_mask": mask_curve}
