import math

import numpy as np
import pytest

from latentalign import anchor
from latentalign.anchor import (
    AnchorReport,
    anchor_shift,
    calibrated_shift,
    calibration_threshold,
    lower_bound_variants,
    shift_bounds,
)
from latentalign.errors import (
    DegenerateSpectrumError,
    InvalidImputationError,
    NoMissingModalityError,
)
from latentalign.spectral import EmbeddingStack, ObservationMask

from conftest import random_stack

E = np.eye(4)


def basis_stack(cols, ids=None):
    if ids is None:
        ids = tuple(f"m{i}" for i in range(len(cols)))
    return EmbeddingStack.from_columns(cols, ids)


def perturb_on_sphere(rng, z, chord):
    """Unit vector at exact Euclidean distance ``chord`` from unit ``z``."""
    t = rng.standard_normal(z.shape[0])
    t -= (t @ z) * z
    t /= np.linalg.norm(t)
    theta = 2.0 * math.asin(chord / 2.0)
    return math.cos(theta) * z + math.sin(theta) * t


class TestAnchorShift:
    def test_full_mask_is_zero(self, rng):
        stack = random_stack(rng, 6, 3, min_gap=0.1)
        assert anchor_shift(stack, ObservationMask(stack.modality_ids)) == 0.0

    def test_observed_subset_preserving_anchor(self):
        stack = basis_stack([E[:, 0], E[:, 0], E[:, 1]])
        assert anchor_shift(stack, ObservationMask(("m0", "m1"))) == \
            pytest.approx(0.0, abs=1e-12)

    def test_anchor_jump_between_directions(self):
        # full anchor e2 (two copies), observed anchor e1
        stack = basis_stack([E[:, 0], E[:, 1], E[:, 1]])
        delta = anchor_shift(stack, ObservationMask(("m0",)))
        assert delta == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_degenerate_full_raises(self):
        stack = basis_stack([E[:, 0], E[:, 1]])
        with pytest.raises(DegenerateSpectrumError):
            anchor_shift(stack, ObservationMask(("m0",)))

    def test_sign_alignment_keeps_delta_acute(self, rng):
        for _ in range(100):
            stack = random_stack(rng, 8, 4, min_gap=1e-6)
            k = int(rng.integers(1, 4))
            ids = tuple(rng.choice(stack.modality_ids, size=k, replace=False))
            try:
                delta = anchor_shift(stack, ObservationMask(ids))
            except DegenerateSpectrumError:
                continue
            assert 0.0 <= delta <= math.sqrt(2.0) + 1e-12


class TestShiftBounds:
    def test_full_mask_report(self, rng):
        stack = random_stack(rng, 6, 3, min_gap=0.1)
        report = shift_bounds(stack, ObservationMask(stack.modality_ids))
        assert report.eta == 0.0
        assert report.missing_norm == 0.0
        assert report.sigma1_omega == report.sigma1
        assert report.lower_bound == 0.0
        assert report.delta == 0.0
        assert report.epsilon_threshold == 0.0
        assert anchor.FLAG_NO_MISSING in report.flags
        assert anchor.FLAG_BOUND_VIOLATED not in report.flags

    def test_hand_case(self):
        stack = basis_stack([E[:, 0], E[:, 1], E[:, 1]])
        report = shift_bounds(stack, ObservationMask(("m0",)))
        assert report.sigma1 == pytest.approx(math.sqrt(2.0), abs=1e-12)
        assert report.sigma2 == pytest.approx(1.0, abs=1e-12)
        assert report.sigma1_omega == pytest.approx(1.0, abs=1e-12)
        assert report.eta == pytest.approx(0.0, abs=1e-12)
        assert report.lower_bound == pytest.approx(0.76537, abs=5e-6)
        assert report.upper_bound == pytest.approx(4.82843, abs=5e-6)
        assert report.delta == pytest.approx(1.41421, abs=5e-6)
        assert report.lower_bound <= report.delta <= report.upper_bound
        assert anchor.FLAG_BOUND_VIOLATED not in report.flags

    def test_bound_sandwich_battery(self, rng):
        violations = 0
        trials = 0
        while trials < 150:
            stack = random_stack(rng, 8, 4, min_gap=0.1)
            k = int(rng.integers(1, 5))
            ids = tuple(rng.choice(stack.modality_ids, size=k, replace=False))
            try:
                report = shift_bounds(stack, ObservationMask(ids))
            except DegenerateSpectrumError:
                continue
            trials += 1
            if anchor.FLAG_BOUND_VIOLATED in report.flags:
                violations += 1
        assert violations == 0

    def test_degenerate_full_gap_reports_infinite_upper(self):
        stack = basis_stack([E[:, 0], E[:, 1]])
        report = shift_bounds(stack, ObservationMask(("m0",)))
        assert math.isinf(report.upper_bound)
        assert anchor.FLAG_DEGENERATE_FULL_GAP in report.flags

    def test_degenerate_observed_raises(self):
        stack = basis_stack([E[:, 0], E[:, 1], (E[:, 0] + E[:, 1]) / math.sqrt(2),
                             E[:, 2]])
        with pytest.raises(DegenerateSpectrumError):
            shift_bounds(stack, ObservationMask(("m0", "m1")))

    def test_orthogonal_missing_column_moves_nothing_but_the_norm(self):
        base = [E[:, 0], E[:, 0], E[:, 0], E[:, 1], E[:, 1]]
        extended = base + [E[:, 2]]
        mask = ObservationMask(("m0", "m1"))
        r1 = shift_bounds(basis_stack(base), mask)
        r2 = shift_bounds(basis_stack(extended), mask)
        for name in ("sigma1", "sigma2", "sigma1_omega", "eta", "delta",
                     "lower_bound"):
            assert getattr(r2, name) == pytest.approx(getattr(r1, name),
                                                      abs=1e-12)
        # the new column is spectrally dominated and orthogonal to the
        # observed anchor: the upper bound can only move through ||Z_missing||
        assert r2.missing_norm == pytest.approx(r1.missing_norm, abs=1e-12)
        assert r2.upper_bound == pytest.approx(r1.upper_bound, abs=1e-12)
        for r in (r1, r2):
            gap = r.sigma1 - r.sigma2
            assert r.upper_bound == pytest.approx(
                math.sqrt(2.0) * r.missing_norm / gap, abs=1e-12)

    def test_report_document_fields(self, rng):
        stack = random_stack(rng, 8, 4, min_gap=0.1)
        report = shift_bounds(stack, ObservationMask(stack.modality_ids[:2]))
        doc = report.as_document()
        assert set(doc) == {
            "delta", "delta_calibrated", "sigma1", "sigma2", "sigma1_omega",
            "eta", "missing_norm", "lower_bound", "upper_bound",
            "epsilon_threshold", "flags"}
        assert doc["delta_calibrated"] is None

    def test_negative_quantities_rejected(self):
        with pytest.raises(ValueError):
            AnchorReport(delta=-0.1, sigma1=1, sigma2=0, sigma1_omega=1,
                         eta=0, missing_norm=0, lower_bound=0, upper_bound=1,
                         epsilon_threshold=0, flags=())


class TestCalibrationThreshold:
    def test_hand_case(self):
        stack = basis_stack([E[:, 0], E[:, 1], E[:, 1]])
        eps = calibration_threshold(stack, ObservationMask(("m0",)))
        expected = (math.sqrt(2) - 1) / math.sqrt(2) * math.sqrt(1 - 1 / math.sqrt(2))
        assert eps == pytest.approx(expected, abs=1e-12)
        assert eps == pytest.approx(0.15851, abs=5e-6)

    def test_second_hand_case(self):
        stack = basis_stack([E[:, 0], E[:, 1], E[:, 1], E[:, 1]])
        eps = calibration_threshold(stack, ObservationMask(("m0",)))
        expected = (math.sqrt(3) - 1) / math.sqrt(3) * math.sqrt(1 - 1 / math.sqrt(3))
        assert eps == pytest.approx(expected, abs=1e-12)

    def test_clamped_regime_is_zero(self):
        # observed part carries the whole leading direction
        stack = basis_stack([E[:, 0], E[:, 0], E[:, 1]])
        eps = calibration_threshold(stack, ObservationMask(("m0", "m1")))
        assert eps == 0.0

    def test_matches_report_identity(self, rng):
        for _ in range(30):
            stack = random_stack(rng, 8, 4, min_gap=0.1)
            mask = ObservationMask(stack.modality_ids[:2])
            try:
                report = shift_bounds(stack, mask)
                eps = calibration_threshold(stack, mask)
            except DegenerateSpectrumError:
                continue
            assert eps == pytest.approx(report.epsilon_threshold, abs=1e-12)
            gap = report.sigma1 - report.sigma2
            inner = max(0.0, 1.0 - min(
                1.0, math.sqrt(report.sigma1_omega ** 2 + report.eta ** 2)
                / report.sigma1))
            assert eps == pytest.approx(gap / math.sqrt(2) * math.sqrt(inner),
                                        abs=1e-12)

    def test_no_missing_rejected(self, rng):
        stack = random_stack(rng, 6, 3, min_gap=0.1)
        with pytest.raises(NoMissingModalityError):
            calibration_threshold(stack, ObservationMask(stack.modality_ids))


class TestCalibratedShift:
    def test_perfect_imputation(self, rng):
        for _ in range(20):
            stack = random_stack(rng, 8, 4, min_gap=0.1)
            mask = ObservationMask(stack.modality_ids[:2])
            truth = {m: stack.column(m) for m in
                     mask.complement(stack.modality_ids)}
            try:
                base = anchor_shift(stack, mask)
            except DegenerateSpectrumError:
                continue
            delta_cal, improved = calibrated_shift(stack, mask, truth)
            assert delta_cal == pytest.approx(0.0, abs=1e-9)
            if base > 1e-9:
                assert improved

    def test_random_imputation_smoke(self, rng):
        stack = random_stack(rng, 8, 4, min_gap=0.1)
        mask = ObservationMask(stack.modality_ids[:2])
        missing = mask.complement(stack.modality_ids)
        imputed = {m: rng.standard_normal(8) for m in missing}
        delta_cal, improved = calibrated_shift(stack, mask, imputed)
        assert delta_cal >= 0.0
        assert improved in (True, False)

    def test_mismatched_imputation_rejected(self, rng):
        stack = random_stack(rng, 8, 4, min_gap=0.1)
        mask = ObservationMask(stack.modality_ids[:2])
        with pytest.raises(InvalidImputationError):
            calibrated_shift(stack, mask, {"m0": np.ones(8)})

    def test_small_error_improves_and_obeys_chain(self, rng):
        improved_count = 0
        trials = 0
        while trials < 200:
            stack = random_stack(rng, 8, 4, min_gap=0.1)
            k_obs = int(rng.integers(1, 4))
            mask = ObservationMask(stack.modality_ids[:k_obs])
            missing = mask.complement(stack.modality_ids)
            try:
                eps_star = calibration_threshold(stack, mask)
                report = shift_bounds(stack, mask)
            except DegenerateSpectrumError:
                continue
            if eps_star < 1e-3:
                continue
            trials += 1
            eps = 0.9 * eps_star
            imputed = {m: perturb_on_sphere(rng, stack.column(m),
                                            float(rng.uniform(0, eps)))
                       for m in missing}
            try:
                delta_cal, improved = calibrated_shift(stack, mask, imputed)
            except DegenerateSpectrumError:
                trials -= 1
                continue
            improved_count += improved
            gap = report.sigma1 - report.sigma2
            chain = math.sqrt(2 * len(missing)) * eps / gap
            assert delta_cal <= chain + 1e-9
        assert improved_count / trials >= 0.9


def test_lower_bound_variants_ordering():
    variants = lower_bound_variants(sigma1=math.sqrt(2), sigma1_omega=1.0,
                                    eta=0.0)
    assert variants["consistent"] == pytest.approx(
        math.sqrt(2 - math.sqrt(2)), abs=1e-12)
    assert variants["main_text"] >= 0.0
    assert variants["appendix"] >= 0.0
