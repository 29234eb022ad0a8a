"""Sentence templates shared by the gold-report renderer and the toy
report policy. Wording is fixed so the rule engine's cue lexicons match."""

from __future__ import annotations

DOMAIN_PHRASES = {
    "memory": "Memory",
    "executive": "Executive function",
    "visuospatial": "Visuospatial skills",
    "language": "Language fluency",
}

_PLURAL_DOMAINS = {"visuospatial"}

BIOMARKER_PHRASES = {
    "abeta": "CSF abeta42",
    "ttau": "Total tau",
    "ptau": "Phosphorylated tau",
}

SEVERITY_QUALIFIERS = {1: "mild", 2: "moderate", 3: "severe"}

CONCLUSIONS = {
    "CN": "Overall, findings are within normal limits.",
    "MCI": "Overall, the profile is consistent with mild cognitive impairment.",
    "Dementia": "Overall, the profile is consistent with dementia.",
}


def lead_sentence(age: float, sex: str, education_years: float) -> str:
    article = "an" if f"{age:.0f}"[0] == "8" else "a"
    return (
        f"Patient is {article} {age:.0f}-year-old {sex} "
        f"with {education_years:.0f} years of education."
    )


def domain_sentence(domain: str, severity: int) -> str:
    phrase = DOMAIN_PHRASES[domain]
    plural = domain in _PLURAL_DOMAINS
    if severity <= 0:
        return f"{phrase} {'are' if plural else 'is'} intact."
    return f"{phrase} {'show' if plural else 'shows'} {SEVERITY_QUALIFIERS[severity]} impairment."


def biomarker_sentence(marker: str, abnormal: bool) -> str:
    phrase = BIOMARKER_PHRASES[marker]
    if not abnormal:
        return f"{phrase} is within reference range."
    if marker == "abeta":
        return f"{phrase} is reduced."
    return f"{phrase} is elevated."


def conclusion_sentence(label: str) -> str:
    return CONCLUSIONS[label]


def history_sentence(label: str) -> str:
    if label == "CN":
        return "No significant comorbidities are reported."
    return "Progressive memory complaints are reported by the family."


def lab_sentence() -> str:
    return "Routine laboratory tests are unremarkable."


def genetic_sentence(apoe: str) -> str:
    return f"APOE genotype is {apoe}."


def imaging_sentence(side: str, volume_mm3: float, atrophic: bool) -> str:
    if atrophic:
        return f"MRI shows {side} hippocampal atrophy with a volume of {volume_mm3:.0f} mm3."
    return f"MRI shows a {side} hippocampal volume of {volume_mm3:.0f} mm3, within expected range."
