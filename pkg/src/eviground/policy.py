"""Toy report-generating policy and the executable-reward GRPO loop.

The policy is slot-factored: one categorical distribution per decision
slot (diagnosis, concluding cue, confidence, per-domain qualifier,
per-biomarker mention/status, sentence ordering), each a linear map from
a patient-feature vector. A rollout's log-probability is the sum of its
chosen-slot log-probabilities, so the sequence-level importance ratio is
exact, and the KL to the reference policy has a closed form per slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import phrases, tensorio
from .errors import ValidationError
from .losses import LossWithGrad, softmax
from .records import BIOMARKERS, COGNITIVE_DOMAINS, PatientRecord
from .report import parse_report, render_report
from .rules import (
    EntailmentScorer,
    RewardBreakdown,
    RuleConfig,
    biomarker_abnormal,
    total_reward,
)

RATIO_EXPONENT_CLAMP = 30.0
ADVANTAGE_STD_FLOOR = 1e-8

_DIAGNOSIS_CHOICES = ("CN", "MCI", "Dementia")
_CONCLUSION_CHOICES = ("CN", "MCI", "Dementia", "omit")
_CONFIDENCE_CHOICES = ("High", "Medium", "Low", "Certain", "omit")
_DOMAIN_CHOICES = ("omit", "intact", "mild", "moderate", "severe")
# biomarker sentences report the measured status; the policy decides whether
# to name the marker at all and whether to state its status
_BIOMARKER_CHOICES = ("omit", "mention", "status")
_ORDER_CHOICES = ("domains_first", "biomarkers_first")

_QUALIFIER_SEVERITY = {"intact": 0, "mild": 1, "moderate": 2, "severe": 3}


def slot_layout() -> list[tuple[str, tuple[str, ...]]]:
    slots = [
        ("diagnosis", _DIAGNOSIS_CHOICES),
        ("conclusion", _CONCLUSION_CHOICES),
        ("confidence", _CONFIDENCE_CHOICES),
        ("order", _ORDER_CHOICES),
    ]
    slots += [(f"domain.{d}", _DOMAIN_CHOICES) for d in COGNITIVE_DOMAINS]
    slots += [(f"biomarker.{m}", _BIOMARKER_CHOICES) for m in BIOMARKERS]
    return slots


def patient_features(p: PatientRecord) -> np.ndarray:
    """Fixed standardized feature vector conditioning every slot.

    Biomarkers are centered at their abnormality thresholds, and signed
    indicator features for threshold crossings and severity bins make the
    staging decision linearly separable with wide margins.
    """
    d = p.demographics
    worst = min(p.cognition.values())
    return np.array(
        [
            (d["age"] - 72.0) / 8.0,
            1.0 if d["sex"] == "female" else 0.0,
            (d["education_years"] - 14.0) / 4.0,
            p.cognition["memory"],
            p.cognition["executive"],
            p.cognition["visuospatial"],
            p.cognition["language"],
            (p.biomarkers["abeta"] - 977.0) / 300.0,
            (p.biomarkers["ttau"] - 300.0) / 150.0,
            (p.biomarkers["ptau"] - 27.0) / 15.0,
            float(p.genetics["apoe"].count("e4")),
            1.0 if p.biomarkers["abeta"] < 977.0 else -1.0,
            1.0 if p.biomarkers["ttau"] > 300.0 else -1.0,
            1.0 if p.biomarkers["ptau"] > 27.0 else -1.0,
            1.0 if worst < -0.5 else -1.0,
            1.0 if worst < -1.5 else -1.0,
        ]
    )


FEATURE_DIM = 16


class ReportPolicy:
    """Per-slot logits = W @ features + b; zero init is uniform sampling.

    Status sentences report the record's thresholded measurement, so the
    policy chooses coverage and conclusions, not the measurements.
    """

    def __init__(self, seed: int = 0, rules: RuleConfig | None = None):
        self.seed = seed
        self.rules = rules or RuleConfig()
        self.slots = slot_layout()
        self.params: dict[str, np.ndarray] = {}
        for name, choices in self.slots:
            self.params[f"{name}.w"] = np.zeros((len(choices), FEATURE_DIM))
            self.params[f"{name}.b"] = np.zeros(len(choices))

    def copy(self) -> "ReportPolicy":
        clone = ReportPolicy(self.seed, self.rules)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def slot_probs(self, name: str, features: np.ndarray) -> np.ndarray:
        logits = self.params[f"{name}.w"] @ features + self.params[f"{name}.b"]
        return softmax(logits)

    def all_probs(self, features: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.slot_probs(name, features) for name, _ in self.slots}

    def log_prob(self, choices: dict[str, int], features: np.ndarray) -> float:
        total = 0.0
        for name, _ in self.slots:
            p = self.slot_probs(name, features)
            total += float(np.log(max(p[choices[name]], 1e-300)))
        return total

    def sample(self, features: np.ndarray, rng) -> tuple[dict[str, int], float]:
        choices = {}
        logprob = 0.0
        for name, opts in self.slots:
            p = self.slot_probs(name, features)
            idx = int(rng.choice(len(opts), p=p))
            choices[name] = idx
            logprob += float(np.log(p[idx]))
        return choices, logprob

    def mean_kl_to(self, ref: "ReportPolicy", features: np.ndarray) -> float:
        """Exact categorical KL(self || ref), averaged over slots."""
        total = 0.0
        for name, _ in self.slots:
            p = self.slot_probs(name, features)
            q = ref.slot_probs(name, features)
            total += float(np.sum(p * (np.log(p) - np.log(q))))
        return total / len(self.slots)

    # --- rendering -------------------------------------------------------------

    def render(self, p: PatientRecord, choices: dict[str, int]) -> str:
        d = p.demographics
        sentences = [phrases.lead_sentence(d["age"], d["sex"], d["education_years"])]
        domain_sents = []
        for domain in COGNITIVE_DOMAINS:
            opt = _DOMAIN_CHOICES[choices[f"domain.{domain}"]]
            if opt != "omit":
                domain_sents.append(phrases.domain_sentence(domain, _QUALIFIER_SEVERITY[opt]))
        marker_sents = []
        for marker in BIOMARKERS:
            opt = _BIOMARKER_CHOICES[choices[f"biomarker.{marker}"]]
            if opt == "mention":
                marker_sents.append(f"{phrases.BIOMARKER_PHRASES[marker]} was measured.")
            elif opt == "status":
                abnormal = biomarker_abnormal(marker, p.biomarkers[marker], self.rules)
                marker_sents.append(phrases.biomarker_sentence(marker, abnormal))
        if _ORDER_CHOICES[choices["order"]] == "domains_first":
            sentences += domain_sents + marker_sents
        else:
            sentences += marker_sents + domain_sents
        conclusion = _CONCLUSION_CHOICES[choices["conclusion"]]
        if conclusion != "omit":
            sentences.append(phrases.conclusion_sentence(conclusion))
        confidence = _CONFIDENCE_CHOICES[choices["confidence"]]
        return render_report(
            " ".join(sentences),
            _DIAGNOSIS_CHOICES[choices["diagnosis"]],
            None if confidence == "omit" else confidence,
        )

    # --- checkpoints -------------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        tensorio.save_params(directory, self.params, {"kind": "policy", "seed": self.seed})

    @classmethod
    def load(cls, directory: str | Path) -> "ReportPolicy":
        params, meta = tensorio.load_params(directory)
        pol = cls(meta.get("seed", 0))
        pol.params = params
        return pol


@dataclass
class Rollout:
    choices: dict[str, int]
    text: str
    old_logprob: float
    reward: RewardBreakdown | None = None
    advantage: float = 0.0


@dataclass
class SampleGroup:
    patient_id: str
    features: np.ndarray
    rollouts: list[Rollout] = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward.total for r in self.rollouts])

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.rollouts])


def sample_group(policy: ReportPolicy, patient: PatientRecord, g: int, seed) -> SampleGroup:
    """G seed-deterministic rollouts with recorded log-probabilities."""
    if g < 2:
        raise ValidationError("group size must be >= 2")
    rng = np.random.default_rng(seed)
    features = patient_features(patient)
    group = SampleGroup(patient.id, features)
    for _ in range(g):
        choices, logprob = policy.sample(features, rng)
        group.rollouts.append(Rollout(choices, policy.render(patient, choices), logprob))
    return group


def score_group(
    group: SampleGroup,
    patient: PatientRecord,
    cfg: RuleConfig,
    scorer: EntailmentScorer,
) -> None:
    for rollout in group.rollouts:
        rollout.reward = total_reward(parse_report(rollout.text), patient, cfg, scorer)
    advs = normalize_advantages(group.rewards)
    for rollout, a in zip(group.rollouts, advs):
        rollout.advantage = float(a)


def normalize_advantages(rewards: np.ndarray) -> np.ndarray:
    """(R - mean) / (population std + 1e-8); exactly zero for equal rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValidationError("need at least two rewards")
    if np.ptp(rewards) == 0.0:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / (rewards.std() + ADVANTAGE_STD_FLOOR)


def importance_ratio(new_logprob: float, old_logprob: float) -> float:
    """exp(new - old) with the exponent clamped to [-30, 30]."""
    return float(np.exp(np.clip(new_logprob - old_logprob, -RATIO_EXPONENT_CLAMP, RATIO_EXPONENT_CLAMP)))


def grpo_loss(
    group: SampleGroup,
    policy: ReportPolicy,
    ref_policy: ReportPolicy,
    epsilon: float = 0.2,
    beta: float = 0.1,
) -> LossWithGrad:
    """Clipped surrogate plus exact per-slot KL anchor, with policy grads."""
    if not 0.0 < epsilon < 1.0:
        raise ValidationError("epsilon must be in (0, 1)")
    if beta < 0.0:
        raise ValidationError("beta must be nonnegative")
    features = group.features
    g = len(group.rollouts)
    probs = policy.all_probs(features)
    grads = {k: np.zeros_like(v) for k, v in policy.params.items()}
    dlogits = {name: np.zeros_like(probs[name]) for name, _ in policy.slots}

    surrogate = 0.0
    for rollout in group.rollouts:
        new_lp = sum(
            float(np.log(probs[name][rollout.choices[name]])) for name, _ in policy.slots
        )
        delta = new_lp - rollout.old_logprob
        clamped = np.clip(delta, -RATIO_EXPONENT_CLAMP, RATIO_EXPONENT_CLAMP)
        rho = float(np.exp(clamped))
        a = rollout.advantage
        unclipped = rho * a
        clipped = float(np.clip(rho, 1.0 - epsilon, 1.0 + epsilon)) * a
        surrogate += -min(unclipped, clipped) / g
        # active branch's d/d(new_lp); the clipped branch is flat outside the band
        if unclipped <= clipped:
            coeff = 0.0 if clamped != delta else -a * rho / g
        else:
            coeff = -a * rho / g if (1.0 - epsilon) <= rho <= (1.0 + epsilon) else 0.0
        if coeff != 0.0:
            for name, _ in policy.slots:
                p = probs[name]
                onehot = np.zeros_like(p)
                onehot[rollout.choices[name]] = 1.0
                dlogits[name] += coeff * (onehot - p)

    kl_total = 0.0
    if beta > 0.0:
        n_slots = len(policy.slots)
        for name, _ in policy.slots:
            p = probs[name]
            q = ref_policy.slot_probs(name, features)
            # floor only guards 0*log(0) under extreme softmax underflow
            lp, lq = np.log(np.maximum(p, 1e-300)), np.log(np.maximum(q, 1e-300))
            kl_slot = float(np.sum(p * (lp - lq)))
            kl_total += kl_slot
            dlogits[name] += (beta / n_slots) * p * ((lp - lq) - kl_slot)
        kl_total /= n_slots

    for name, _ in policy.slots:
        grads[f"{name}.w"] = np.outer(dlogits[name], features)
        grads[f"{name}.b"] = dlogits[name]
    return LossWithGrad(surrogate + beta * kl_total, grads)


@dataclass
class RftConfig:
    group_size: int = 4
    epsilon: float = 0.2
    beta: float = 0.1
    iters: int = 500
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValidationError("group_size must be >= 2")
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError("epsilon must be in (0, 1)")
        if self.beta < 0.0 or self.lr <= 0.0 or self.iters < 1:
            raise ValidationError("beta >= 0, lr > 0, iters >= 1 required")


def train_rft(
    policy: ReportPolicy,
    patients: list[PatientRecord],
    rule_cfg: RuleConfig,
    scorer: EntailmentScorer,
    cfg: RftConfig,
) -> tuple[ReportPolicy, list[dict]]:
    """sample -> score -> normalize -> single update per group.

    The reference policy is snapshotted at the start and never refreshed.
    Returns the trained policy and one log row per iteration.
    """
    if not patients:
        raise ValidationError("no patients to train on")
    ref = policy.copy()
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for it in range(cfg.iters):
        patient = patients[int(rng.integers(len(patients)))]
        group = sample_group(policy, patient, cfg.group_size, rng.integers(2**63))
        score_group(group, patient, rule_cfg, scorer)
        loss = grpo_loss(group, policy, ref, cfg.epsilon, cfg.beta)
        for name, grad in loss.grads.items():
            policy.params[name] -= cfg.lr * grad
        breakdowns = [r.reward for r in group.rollouts]
        rows.append(
            {
                "iter": it,
                "mean_reward": float(np.mean([b.total for b in breakdowns])),
                "r_format": float(np.mean([b.r_format for b in breakdowns])),
                "r_nia": float(np.mean([b.r_nia for b in breakdowns])),
                "r_consistency": float(np.mean([b.r_consistency for b in breakdowns])),
                "kl_ref": policy.mean_kl_to(ref, group.features),
            }
        )
    return policy, rows


def evaluate_policy_reward(
    policy: ReportPolicy,
    patients: list[PatientRecord],
    rule_cfg: RuleConfig,
    scorer: EntailmentScorer,
    group_size: int = 4,
    seed: int = 12345,
) -> float:
    """Mean total reward of fresh rollouts across patients."""
    rng = np.random.default_rng(seed)
    totals = []
    for patient in patients:
        group = sample_group(policy, patient, group_size, rng.integers(2**63))
        score_group(group, patient, rule_cfg, scorer)
        totals.extend(group.rewards.tolist())
    return float(np.mean(totals))
