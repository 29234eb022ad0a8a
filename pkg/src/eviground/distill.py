"""Grounding transfer by temperature-scaled KL distillation.

A frozen teacher grounder produces soft evidence distributions for the
sentences of generated reports; a student embedder is trained to match
them. Teacher outputs are computed once and cached, so they are bitwise
identical across epochs, and no gradient ever touches teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyDatasetError,
    InsufficientLabelsError,
    UntrainedTeacherError,
    ValidationError,
)
from .grounding import GrounderConfig, train_grounding
from .losses import PROB_FLOOR, LossWithGrad, kl_divergence, softmax
from .metrics import rank_evidences, recall_at_k
from .records import PatientRecord
from .report import ClinicalReport
from .textenc import Embedder


@dataclass
class TeacherGrounder:
    """Frozen embedder (plus optional decoder) from supervised grounding."""

    embedder: Embedder
    tau: float = 0.07
    decoder: object | None = None
    trained: bool = False


@dataclass
class DistillConfig:
    distill_temperature: float = 2.0
    lambda_kl: float = 1.0
    label_fraction: float = 1.0
    epochs: int = 20
    lr: float = 0.5
    seed: int = 0
    init_from_teacher: bool = False
    distill_masks: bool = False  # printed student objective covers evidence KL only

    def __post_init__(self):
        if self.distill_temperature <= 0:
            raise ValidationError("distill_temperature must be positive")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValidationError("label_fraction must be in (0, 1]")


def distill_loss(teacher_p: np.ndarray, student_logits: np.ndarray, tau_d: float) -> LossWithGrad:
    """tau_d^2 * KL(teacher || softmax(student_logits / tau_d)).

    Gradient is with respect to the student logits only.
    """
    q = np.asarray(teacher_p, dtype=np.float64)
    z = np.asarray(student_logits, dtype=np.float64)
    if q.shape != z.shape:
        raise ValidationError(f"length mismatch: {q.shape} vs {z.shape}")
    p = softmax(z, temperature=tau_d)
    value = tau_d * tau_d * kl_divergence(q, p)
    # only terms with q_i > 0 and p_i above the floor contribute to the value
    active = (q > 0) & (p > PROB_FLOOR)
    q_active = np.where(active, q, 0.0)
    grad = tau_d * (p * q_active.sum() - q_active)
    return LossWithGrad(value, {"student_logits": grad})


def teacher_evidence_distribution(
    teacher: TeacherGrounder,
    sentence: str,
    evidences,
    tau_d: float,
) -> np.ndarray:
    """tau_d-tempered softmax of the teacher's grounding logits."""
    from .grounding import grounding_logits

    logits = grounding_logits(sentence, evidences, teacher.embedder, teacher.tau)
    return softmax(logits, temperature=tau_d)


def train_student(
    reports: list[tuple[PatientRecord, ClinicalReport]],
    teacher: TeacherGrounder,
    cfg: DistillConfig,
) -> tuple[Embedder, list[float]]:
    """Minimize lambda_kl * distill loss over all generated sentences.

    Candidates for each sentence are restricted to its patient's evidence
    set. Returns the student and the per-epoch loss curve. With
    ``cfg.distill_masks`` set, call :func:`distill_student_decoder`
    afterwards for the optional mask stage.
    """
    if not teacher.trained:
        raise UntrainedTeacherError("teacher must be trained before distillation")
    if not reports:
        raise EmptyDatasetError("no generated reports")

    student = (
        teacher.embedder.copy()
        if cfg.init_from_teacher
        else Embedder(
            teacher.embedder.vocab_hash_dim,
            teacher.embedder.base_dim,
            teacher.embedder.embed_dim,
            seed=cfg.seed + 1,
        )
    )
    teacher_before = {k: v.copy() for k, v in teacher.embedder.params().items()}

    # cache teacher targets and head-independent features once
    items = []
    for record, parsed in reports:
        descriptors = [e.descriptor for e in record.evidence]
        feat_e = student.features_of_texts(descriptors)
        for sentence in parsed.reasoning_sentences:
            q = teacher_evidence_distribution(
                teacher, sentence, record.evidence, cfg.distill_temperature
            )
            feat_s = student.features_of_texts([sentence])
            items.append((feat_s, feat_e, q))
    if not items:
        raise EmptyDatasetError("generated reports contain no sentences")

    rng = np.random.default_rng(cfg.seed)
    curve = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in rng.permutation(len(items)):
            feat_s, feat_e, q = items[idx]
            v_s, cache_s = student.encode_features(feat_s)
            v_e, cache_e = student.encode_features(feat_e)
            logits = (v_s @ v_e.T).ravel() / teacher.tau
            loss = distill_loss(q, logits, cfg.distill_temperature)
            total += cfg.lambda_kl * loss.value
            dz = cfg.lambda_kl * loss.grads["student_logits"]
            d_vs = (dz[None, :] @ v_e) / teacher.tau
            d_ve = np.outer(dz, v_s.ravel()) / teacher.tau
            grads_s = student.backward_texts(cache_s, d_vs)
            grads_e = student.backward_texts(cache_e, d_ve)
            student.head_w -= cfg.lr * (grads_s["head_w"] + grads_e["head_w"])
            student.head_b -= cfg.lr * (grads_s["head_b"] + grads_e["head_b"])
        curve.append(total / len(items))

    after = teacher.embedder.params()
    for key, before in teacher_before.items():
        if not np.array_equal(before, after[key]):
            raise AssertionError("teacher parameters changed during distillation")
    return student, curve


def distill_student_decoder(
    reports: list[tuple[PatientRecord, ClinicalReport]],
    teacher: TeacherGrounder,
    student: Embedder,
    volumes: dict,
    cfg: DistillConfig,
):
    """Optional mask stage: fit a student decoder to the teacher's soft
    masks by soft-Dice matching. Off by default because the printed
    student objective contains only the evidence KL term."""
    from .segdecoder import SegDecoder, SegDecoderConfig, decode_mask, train_mask_decoder
    from .textenc import tokenize

    if not cfg.distill_masks:
        return None, []
    if teacher.decoder is None:
        raise ValidationError("mask distillation needs a teacher decoder")
    t_dec = teacher.decoder
    s_dec = SegDecoder(
        SegDecoderConfig(
            volume_dim=t_dec.cfg.volume_dim,
            patch=t_dec.cfg.patch,
            token_dim=t_dec.cfg.token_dim,
            layers=t_dec.cfg.layers,
            ffn_hidden=t_dec.cfg.ffn_hidden,
            seed=cfg.seed + 1,
        )
    )
    samples = []
    for record, _ in reports:
        if record.id not in volumes:
            continue
        volume = volumes[record.id]
        t_tokens = t_dec.volume_to_tokens(volume)
        s_tokens = s_dec.volume_to_tokens(volume)
        for item in record.evidence:
            if item.anatomy_ref is None:
                continue
            soft_target = decode_mask(
                t_dec, t_tokens, teacher.embedder.embed_tokens(tokenize(item.descriptor))
            )
            ev_tokens = student.embed_tokens(tokenize(item.descriptor))
            samples.append((s_tokens, ev_tokens, soft_target))
    if not samples:
        raise EmptyDatasetError("no anatomy-linked evidence to distill masks from")
    curve = train_mask_decoder(
        s_dec,
        samples,
        epochs=cfg.epochs,
        lr=2e-3,
        lambda_dice=1.0,
        lambda_bce=0.0,  # soft-Dice matching only
        seed=cfg.seed,
    )
    return s_dec, curve


def _split_r3(emb, cohort, split: str, tau: float) -> float:
    values = []
    for row in cohort.rows_for(split):
        record = cohort.records[row.patient_id]
        ranked = rank_evidences(row.sentence, record, emb, tau)
        values.append(recall_at_k(ranked, set(row.evidence_ids), 3))
    return float(np.mean(values))


def generated_reports_for(cohort, ids: list[str]) -> list[tuple[PatientRecord, ClinicalReport]]:
    """Template-rendered reports used as the distillation corpus; their
    grounding labels are never consulted."""
    from .report import parse_report

    out = []
    for pid in ids:
        out.append((cohort.records[pid], parse_report(cohort.gold_report(pid))))
    return out


def label_efficiency_experiment(
    cohort,
    fractions: list[float],
    distill_cfg: DistillConfig | None = None,
    grounder_cfg: GrounderConfig | None = None,
) -> list[dict]:
    """Per fraction: teacher on the labeled subset, student distilled on all
    generated train reports, both evaluated on the held-out split."""
    base_distill = distill_cfg or DistillConfig()
    base_grounder = grounder_cfg or GrounderConfig(train_decoder=False)
    train_ids = list(cohort.split["train"])
    rng = np.random.default_rng(base_distill.seed)
    shuffled = list(rng.permutation(train_ids))
    reports = generated_reports_for(cohort, train_ids)

    rows = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValidationError(f"fraction {fraction} outside (0, 1]")
        n_labeled = int(round(fraction * len(train_ids)))
        if n_labeled < 8:
            raise InsufficientLabelsError(
                f"fraction {fraction} keeps only {n_labeled} labeled patients"
            )
        labeled = shuffled[:n_labeled]
        emb_t, _, _ = train_grounding(cohort, base_grounder, patient_ids=labeled)
        teacher = TeacherGrounder(emb_t, tau=base_grounder.tau, trained=True)
        student, _ = train_student(reports, teacher, base_distill)
        teacher_r3 = _split_r3(teacher.embedder, cohort, "test", base_grounder.tau)
        student_r3 = _split_r3(student, cohort, "test", base_grounder.tau)
        rows.append(
            {
                "fraction": fraction,
                "teacher_r3": teacher_r3,
                "student_r3": student_r3,
                "ratio": student_r3 / teacher_r3 if teacher_r3 > 0 else 0.0,
            }
        )
    return rows
