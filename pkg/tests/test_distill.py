"""Distillation loss, stage ordering, and teacher-freeze contracts."""

import math

import numpy as np
import pytest

from eviground import distill
from eviground.errors import (
    EmptyDatasetError,
    InsufficientLabelsError,
    UntrainedTeacherError,
)
from eviground.grounding import GrounderConfig, train_grounding
from eviground.losses import softmax
from eviground.textenc import Embedder


class TestDistillLoss:
    def test_matching_distributions_zero(self):
        logits = np.array([0.5, -0.2, 1.0])
        q = softmax(logits, temperature=2.0)
        assert distill.distill_loss(q, logits, 2.0).value == pytest.approx(0.0, abs=1e-12)

    def test_hard_teacher_uniform_student(self):
        got = distill.distill_loss(np.array([1.0, 0.0]), np.zeros(2), 1.0).value
        assert got == pytest.approx(math.log(2), abs=1e-6)

    def test_temperature_squared_scaling(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=5)
        q = softmax(rng.normal(size=5), temperature=2.0)
        from eviground.losses import kl_divergence

        want = 4.0 * kl_divergence(q, softmax(z, temperature=2.0))
        assert distill.distill_loss(q, z, 2.0).value == pytest.approx(want, abs=1e-12)

    def test_gradient_only_touches_student(self):
        lw = distill.distill_loss(np.array([0.6, 0.4]), np.array([0.1, -0.1]), 2.0)
        assert set(lw.grads) == {"student_logits"}

    def test_gradient_fd(self):
        from eviground.gradcheck import check_distill

        assert max(check_distill(s) for s in range(10)) < 1e-4

    def test_defaults_match_experimental_setup(self):
        cfg = distill.DistillConfig()
        assert cfg.distill_temperature == 2.0
        assert cfg.lambda_kl == 1.0


@pytest.fixture(scope="module")
def teacher(small_cohort):
    emb, _, _ = train_grounding(
        small_cohort, GrounderConfig(epochs=8, train_decoder=False, seed=0)
    )
    return distill.TeacherGrounder(emb, tau=0.07, trained=True)


@pytest.fixture(scope="module")
def train_reports(small_cohort):
    return distill.generated_reports_for(small_cohort, small_cohort.split["train"])


class TestTrainStudent:
    def test_untrained_teacher_rejected(self, small_cohort, train_reports):
        bad = distill.TeacherGrounder(Embedder(seed=0), trained=False)
        with pytest.raises(UntrainedTeacherError):
            distill.train_student(train_reports, bad, distill.DistillConfig())

    def test_empty_reports_rejected(self, teacher):
        with pytest.raises(EmptyDatasetError):
            distill.train_student([], teacher, distill.DistillConfig())

    def test_student_at_teacher_weights_starts_at_zero_loss(self, teacher, train_reports):
        cfg = distill.DistillConfig(epochs=1, lr=0.0, init_from_teacher=True)
        _, curve = distill.train_student(train_reports, teacher, cfg)
        assert curve[0] <= 1e-9

    def test_loss_strictly_decreases_over_first_epochs_smoothed(self, teacher, train_reports):
        cfg = distill.DistillConfig(epochs=12, lr=0.5, seed=1)
        _, curve = distill.train_student(train_reports, teacher, cfg)
        smoothed = np.convolve(curve, np.ones(3) / 3, mode="valid")[:10]
        for a, b in zip(smoothed, smoothed[1:]):
            assert b < a

    def test_teacher_bitwise_frozen(self, teacher, train_reports):
        before = {k: v.copy() for k, v in teacher.embedder.params().items()}
        distill.train_student(
            train_reports, teacher, distill.DistillConfig(epochs=2, lr=0.5)
        )
        after = teacher.embedder.params()
        for key in before:
            assert np.array_equal(before[key], after[key])


class TestLabelEfficiency:
    def test_insufficient_labels(self, small_cohort):
        with pytest.raises(InsufficientLabelsError):
            distill.label_efficiency_experiment(small_cohort, [0.1])

    def test_ratio_band(self, small_cohort):
        cfg = distill.DistillConfig(epochs=8)
        gcfg = GrounderConfig(epochs=8, train_decoder=False)
        rows = distill.label_efficiency_experiment(small_cohort, [1.0], cfg, gcfg)
        assert 0.0 <= rows[0]["ratio"] <= 1.05


class TestMaskDistillation:
    def test_off_by_default(self, teacher, train_reports):
        dec, curve = distill.distill_student_decoder(
            train_reports, teacher, Embedder(seed=9), {}, distill.DistillConfig()
        )
        assert dec is None and curve == []

    def test_requires_teacher_decoder(self, teacher, train_reports):
        from eviground.errors import ValidationError

        with pytest.raises(ValidationError):
            distill.distill_student_decoder(
                train_reports,
                teacher,
                Embedder(seed=9),
                {},
                distill.DistillConfig(distill_masks=True),
            )

    def test_soft_dice_matching_converges(self, small_cohort):
        emb, dec, _ = train_grounding(
            small_cohort,
            GrounderConfig(epochs=6, decoder_epochs=10, seed=0),
            patient_ids=small_cohort.split["train"][:6],
        )
        t = distill.TeacherGrounder(emb, tau=0.07, decoder=dec, trained=True)
        ids = small_cohort.split["train"][:6]
        reports = distill.generated_reports_for(small_cohort, ids)
        volumes = {pid: small_cohort.volume(pid) for pid in ids}
        cfg = distill.DistillConfig(epochs=12, distill_masks=True, seed=0)
        student, _ = distill.train_student(reports, t, cfg)
        s_dec, curve = distill.distill_student_decoder(reports, t, student, volumes, cfg)
        assert s_dec is not None
        assert curve[-1] < curve[0]
