"""Executable clinical-validity rewards and the lexical entailment scorer.

Every reward is a pure, deterministic function of (parsed report, patient
record, config). Partial-credit schemes and the synthetic thresholds are
declared conventions shared with the cohort generator, not clinical
ground truth.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

from .records import BIOMARKERS, COGNITIVE_DOMAINS, LABELS, PatientRecord
from .report import ClinicalReport, format_reward, segment_sentences
from .textenc import tokenize

NIA_CAT_WEIGHT = 0.4
NIA_BIO_WEIGHT = 0.3
NIA_FEAT_WEIGHT = 0.3

QUALIFIER_TOKENS = ("intact", "normal", "mild", "moderate", "severe", "impaired", "declined")

# severity implied by a qualifier token: 0 spared .. 3 severe
_QUALIFIER_SEVERITY = {
    "intact": 0,
    "normal": 0,
    "mild": 1,
    "moderate": 2,
    "impaired": 2,
    "declined": 2,
    "severe": 3,
}

_NEGATORS = {"not", "no", "without"}
_NEGATION_WINDOW = 3

_NORMAL_STATUS_TOKENS = {"normal", "unremarkable", "preserved"}
_ABNORMAL_STATUS_TOKENS = {"abnormal", "elevated", "reduced", "lowered", "decreased", "atrophic"}
_NORMAL_STATUS_BIGRAMS = {("within", "reference"), ("within", "normal")}
_ABNORMAL_STATUS_BIGRAMS = {("below", "reference"), ("above", "reference")}


def default_label_cues() -> dict[str, list[str]]:
    return {
        "CN": ["cognitively normal", "within normal limits", "no cognitive impairment"],
        "MCI": ["mild cognitive impairment"],
        "Dementia": ["dementia", "alzheimer"],
    }


def default_domain_cues() -> dict[str, list[str]]:
    return {
        "memory": ["memory", "recall", "amnestic"],
        "executive": ["executive", "planning"],
        "visuospatial": ["visuospatial", "spatial"],
        "language": ["language", "naming", "fluency"],
    }


def default_biomarker_cues() -> dict[str, list[str]]:
    return {
        "abeta": ["abeta", "amyloid"],
        "ttau": ["total tau", "ttau", "t-tau"],
        "ptau": ["phosphorylated tau", "ptau", "p-tau"],
    }


@dataclass
class RuleConfig:
    """Thresholds, cue lexicons, and reward weights (rules.json schema)."""

    abeta_abnormal_below: float = 977.0
    ttau_abnormal_above: float = 300.0
    ptau_abnormal_above: float = 27.0
    label_cues: dict = field(default_factory=default_label_cues)
    domain_cues: dict = field(default_factory=default_domain_cues)
    biomarker_cues: dict = field(default_factory=default_biomarker_cues)
    w_format: float = 0.2
    w_nia: float = 0.5
    w_consistency: float = 0.3
    nia_consistent_threshold: float = 0.8  # r_nia cutoff used by eval tables

    def __post_init__(self):
        if min(self.w_format, self.w_nia, self.w_consistency) < 0:
            raise ValueError("reward weights must be nonnegative")
        if min(self.abeta_abnormal_below, self.ttau_abnormal_above, self.ptau_abnormal_above) <= 0:
            raise ValueError("thresholds must be positive")

    def max_total(self) -> float:
        return self.w_format + self.w_nia + self.w_consistency

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RuleConfig":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RuleConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_cat: float
    r_bio: float
    r_feat: float
    r_nia: float
    r_consistency: float
    total: float

    def to_json(self) -> dict:
        return asdict(self)


# --- shared staging rule (generator contract) --------------------------------


def severity_bin(score: float) -> int:
    """Cognitive composite z-score to severity: 0 intact .. 3 severe."""
    if score >= -0.5:
        return 0
    if score >= -1.5:
        return 1
    if score >= -2.5:
        return 2
    return 3


def biomarker_abnormal(marker: str, value: float, cfg: RuleConfig) -> bool:
    if marker == "abeta":
        return value < cfg.abeta_abnormal_below
    if marker == "ttau":
        return value > cfg.ttau_abnormal_above
    if marker == "ptau":
        return value > cfg.ptau_abnormal_above
    raise KeyError(marker)


def stage_from_values(biomarkers: dict, cognition: dict, cfg: RuleConfig) -> str:
    """Label implied by raw values; the cohort generator samples inside
    regions where this rule is constant, so it recovers gt_label exactly."""
    abnormal = sum(biomarker_abnormal(m, biomarkers[m], cfg) for m in BIOMARKERS)
    worst = max(severity_bin(cognition[d]) for d in COGNITIVE_DOMAINS)
    if abnormal >= 1 and worst >= 2:
        return "Dementia"
    if abnormal == 0 and worst == 0:
        return "CN"
    return "MCI"


# --- lexical extraction helpers ----------------------------------------------


def _status_from_tokens(tokens: list[str]) -> str | None:
    """First normal/abnormal status assertion in a token list, negation-aware."""
    for i, tok in enumerate(tokens):
        status = None
        if tok in _NORMAL_STATUS_TOKENS:
            status = "normal"
        elif tok in _ABNORMAL_STATUS_TOKENS:
            status = "abnormal"
        elif i + 1 < len(tokens):
            pair = (tok, tokens[i + 1])
            if pair in _NORMAL_STATUS_BIGRAMS:
                status = "normal"
            elif pair in _ABNORMAL_STATUS_BIGRAMS:
                status = "abnormal"
        if status is None:
            continue
        window = tokens[max(0, i - _NEGATION_WINDOW) : i]
        if any(t in _NEGATORS for t in window):
            status = "abnormal" if status == "normal" else "normal"
        return status
    return None


def _safe_tokens(text: str) -> list[str]:
    try:
        return tokenize(text)
    except Exception:
        return []


def asserted_biomarker_status(sentences: list[str], marker: str, cfg: RuleConfig) -> str | None:
    """Status asserted for a marker, from the first mentioning sentence
    that states one; None if unmentioned or statusless."""
    cues = cfg.biomarker_cues[marker]
    for sentence in sentences:
        low = sentence.lower()
        if not any(c in low for c in cues):
            continue
        status = _status_from_tokens(_safe_tokens(low))
        if status is not None:
            return status
    return None


def mentions_biomarker(sentences: list[str], marker: str, cfg: RuleConfig) -> bool:
    cues = cfg.biomarker_cues[marker]
    return any(any(c in s.lower() for c in cues) for s in sentences)


def last_label_cue(text: str, cfg: RuleConfig) -> str | None:
    """Label whose cue phrase occurs last in the text; longest wins on ties."""
    best: tuple[int, int, str] | None = None
    low = text.lower()
    for label, cues in cfg.label_cues.items():
        for cue in cues:
            for m in re.finditer(re.escape(cue), low):
                key = (m.start(), len(cue), label)
                if best is None or key[:2] > best[:2]:
                    best = key
    return best[2] if best else None


# --- reward components --------------------------------------------------------


def category_alignment(r: ClinicalReport, cfg: RuleConfig) -> float:
    """1 for a standardized label whose last reasoning cue (if any) agrees,
    0.5 when a conflicting cue is the final assertion, 0 if unparsed."""
    if r.diagnosis not in LABELS:
        return 0.0
    cue = last_label_cue(r.reasoning, cfg)
    if cue is None or cue == r.diagnosis:
        return 1.0
    return 0.5


def biomarker_consistency(r: ClinicalReport, p: PatientRecord, cfg: RuleConfig) -> float:
    """Per marker: 1/6 for mentioning it, 1/6 for a status matching the
    thresholded ground status."""
    score = 0.0
    for marker in BIOMARKERS:
        if not mentions_biomarker(r.reasoning_sentences, marker, cfg):
            continue
        score += 1.0 / 6.0
        asserted = asserted_biomarker_status(r.reasoning_sentences, marker, cfg)
        ground = "abnormal" if biomarker_abnormal(marker, p.biomarkers[marker], cfg) else "normal"
        if asserted == ground:
            score += 1.0 / 6.0
    return score


def feature_coverage(r: ClinicalReport, cfg: RuleConfig) -> float:
    """1/4 per cognitive domain assessed with a qualifier token."""
    score = 0.0
    for domain in COGNITIVE_DOMAINS:
        cues = cfg.domain_cues[domain]
        for sentence in r.reasoning_sentences:
            low = sentence.lower()
            if any(c in low for c in cues) and any(
                t in _QUALIFIER_SEVERITY for t in _safe_tokens(low)
            ):
                score += 0.25
                break
    return score


def nia_aa_reward(r_cat: float, r_bio: float, r_feat: float) -> float:
    return NIA_CAT_WEIGHT * r_cat + NIA_BIO_WEIGHT * r_bio + NIA_FEAT_WEIGHT * r_feat


# --- entailment scoring ---------------------------------------------------------


class EntailmentScorer(Protocol):
    """Classifies (premise, hypothesis) into contradiction/neutral/entailment.

    Implementations declare ``concurrency_safe``; the engine serializes
    calls to scorers that are not (see :func:`serialized`).
    """

    concurrency_safe: bool

    def classify(self, premise: str, hypothesis: str) -> str: ...


class _LockedScorer:
    concurrency_safe = True

    def __init__(self, inner: "EntailmentScorer"):
        import threading

        self._inner = inner
        self._lock = threading.Lock()

    def classify(self, premise: str, hypothesis: str) -> str:
        with self._lock:
            return self._inner.classify(premise, hypothesis)


def serialized(scorer: "EntailmentScorer") -> "EntailmentScorer":
    """Wrap a non-thread-safe scorer behind a lock; pass safe ones through."""
    if getattr(scorer, "concurrency_safe", False):
        return scorer
    return _LockedScorer(scorer)


_STAGE_INDEX = {label: i for i, label in enumerate(LABELS)}
_GENERIC_BIOMARKER_CUE = "biomarker"


class LexicalEntailmentScorer:
    """Deterministic rule system: biomarker status assertions plus cognitive
    severity imply a stage; an explicit concluding label cue is compared
    against the hypothesized diagnosis directly."""

    concurrency_safe = True

    def __init__(self, cfg: RuleConfig | None = None):
        self.cfg = cfg or RuleConfig()

    def classify(self, premise: str, hypothesis: str) -> str:
        diagnosis = self._hypothesis_label(hypothesis)
        if diagnosis is None:
            return "neutral"
        sentences = segment_sentences(premise) or [premise]
        cue = last_label_cue(premise, self.cfg)
        implied = self._implied_stage(premise, sentences)
        if cue is not None and cue != diagnosis:
            return "contradiction"
        if implied is None:
            return "entailment" if cue == diagnosis else "neutral"
        # a stage implied by the findings either supports the diagnosis or
        # contradicts it; "weak" applies only when no stage is derivable
        return "entailment" if implied == diagnosis else "contradiction"

    def _hypothesis_label(self, hypothesis: str) -> str | None:
        toks = set(_safe_tokens(hypothesis))
        for label in LABELS:
            if label.lower() in toks:
                return label
        return None

    def _implied_stage(self, premise: str, sentences: list[str]) -> str | None:
        spec_norm = 0
        spec_abn = 0
        for marker in BIOMARKERS:
            status = asserted_biomarker_status(sentences, marker, self.cfg)
            if status == "normal":
                spec_norm += 1
            elif status == "abnormal":
                spec_abn += 1

        # when at least two named markers carry statuses, they alone decide
        # the stage; qualifier wording cannot override checkable assertions
        if spec_norm + spec_abn >= 2:
            if spec_abn == 0:
                return "CN"
            if spec_abn >= 3:
                return "Dementia"
            return "MCI"

        # generic "biomarkers are normal/abnormal" reads as plural (two)
        generic = None
        for sentence in sentences:
            low = sentence.lower()
            if _GENERIC_BIOMARKER_CUE in low:
                status = _status_from_tokens(_safe_tokens(low))
                if status is not None:
                    generic = status
        bio_abn = spec_abn + (2 if generic == "abnormal" else 0)
        bio_norm = spec_norm + (2 if generic == "normal" else 0)

        # severity counts only in sentences naming a specific domain, so a
        # concluding label phrase cannot masquerade as clinical findings
        severity: int | None = None
        domain_cues = [c for cues in self.cfg.domain_cues.values() for c in cues]
        for sentence in sentences:
            low = sentence.lower()
            if not any(c in low for c in domain_cues):
                continue
            for tok in _safe_tokens(low):
                if tok in _QUALIFIER_SEVERITY:
                    sev = _QUALIFIER_SEVERITY[tok]
                    severity = sev if severity is None else max(severity, sev)

        if bio_norm == 0 and bio_abn == 0 and severity is None:
            return None
        if bio_abn >= 1 and severity is not None and severity >= 2:
            return "Dementia"
        if bio_abn == 0 and severity in (None, 0) and (bio_norm >= 1 or severity == 0):
            return "CN"
        return "MCI"


def consistency_reward(r: ClinicalReport, scorer: EntailmentScorer) -> float:
    """0 / 0.5 / 1 for contradiction / neutral / entailment of the diagnosis
    by the reasoning; an unparsed diagnosis scores 0."""
    if r.diagnosis not in LABELS:
        return 0.0
    hypothesis = f"The diagnosis is {r.diagnosis}."
    verdict = scorer.classify(r.reasoning, hypothesis)
    return {"contradiction": 0.0, "neutral": 0.5, "entailment": 1.0}[verdict]


def total_reward(
    r: ClinicalReport,
    p: PatientRecord,
    cfg: RuleConfig,
    scorer: EntailmentScorer,
) -> RewardBreakdown:
    r_format = format_reward(r)
    r_cat = category_alignment(r, cfg)
    r_bio = biomarker_consistency(r, p, cfg)
    r_feat = feature_coverage(r, cfg)
    r_nia = nia_aa_reward(r_cat, r_bio, r_feat)
    r_cons = consistency_reward(r, scorer)
    total = cfg.w_format * r_format + cfg.w_nia * r_nia + cfg.w_consistency * r_cons
    return RewardBreakdown(r_format, r_cat, r_bio, r_feat, r_nia, r_cons, total)
