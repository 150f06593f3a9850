"""Claims about the shipped default config, checked on seed means of the shared sweep."""

import pytest

SIDE_CLASSES = 6
STUDENT_SPEAKERS = 200


def test_no_dp_teacher_reaches_90_percent(default_sweep):
    assert default_sweep.teacher_mean("no_dp", "accuracy") >= 0.90


def test_offline_teacher_reaches_95_percent(default_sweep):
    assert default_sweep.teacher_mean("central_offline", "accuracy") >= 0.95


@pytest.mark.parametrize("regime", [
    "no_dp",
    "central_dp",
    "central_weak_local",
    pytest.param("local_dp", marks=pytest.mark.xfail(
        strict=True, reason="per-client noise at epsilon 2 swamps a 50-client average; see decisions ledger")),
])
def test_regime_beats_random_twice(default_sweep, regime):
    assert default_sweep.teacher_mean(regime, "accuracy") >= 2 / SIDE_CLASSES


@pytest.mark.parametrize("student", [
    "mtl_central_offline",
    pytest.param("mtl_central_weak_local", marks=pytest.mark.xfail(
        strict=True, reason="the private teacher is itself ~78% accurate, so its labels are harder to copy")),
])
def test_side_agreement_with_teacher(default_sweep, student):
    assert default_sweep.student_mean(student, "side_accuracy") >= 0.95


@pytest.mark.parametrize("student", ["baseline", "mtl_central_offline", "mtl_central_weak_local"])
def test_speaker_accuracy_far_above_random(default_sweep, student):
    assert default_sweep.student_mean(student, "speaker_accuracy") >= 10 / STUDENT_SPEAKERS


def test_first_round_snr_infinite_without_noise(default_sweep):
    assert all(m["teachers"]["no_dp"]["first_round_snr"] == "inf" for m in default_sweep.metrics)
