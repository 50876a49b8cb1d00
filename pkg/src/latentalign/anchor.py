"""Anchor-shift diagnostics for incomplete modality stacks.

The anchor of a stack is its leading left singular vector.  Dropping
modality columns moves the anchor; these routines measure that shift,
evaluate provable lower/upper envelopes for it, compute the imputation
error budget below which calibration is guaranteed to help, and compare
the shift before and after replacing missing columns with imputed ones.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from latentalign import backends
from latentalign.errors import (
    DegenerateSpectrumError,
    InvalidImputationError,
    NoMissingModalityError,
)
from latentalign.spectral import EmbeddingStack, decompose

MIN_GAP = 1e-8
SQRT2 = math.sqrt(2.0)

FLAG_DEGENERATE_FULL_GAP = "degenerate_full_gap"
FLAG_NEAR_DEGENERATE_OBSERVED = "near_degenerate_observed"
FLAG_BOUND_VIOLATED = "bound_violated"
FLAG_NO_MISSING = "no_missing_modalities"


@dataclass(frozen=True)
class AnchorReport:
    """Measured anchor shift plus every quantity in its bounds.

    ``delta`` is the sign-aligned distance between the full-stack anchor
    and the observed-submatrix anchor, so it always lies in [0, sqrt(2)].
    ``lower_bound``/``upper_bound`` bracket it; ``epsilon_threshold`` is the
    per-column imputation error below which calibration provably shrinks
    the shift.  ``flags`` carries degenerate/violation markers.
    """

    delta: float
    sigma1: float
    sigma2: float
    sigma1_omega: float
    eta: float
    missing_norm: float
    lower_bound: float
    upper_bound: float
    epsilon_threshold: float
    flags: tuple
    delta_calibrated: float = None

    def __post_init__(self):
        for name in ("delta", "sigma1", "sigma2", "sigma1_omega", "eta",
                     "missing_norm", "lower_bound", "upper_bound",
                     "epsilon_threshold"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta > SQRT2 + 1e-9:
            raise ValueError("sign-aligned delta cannot exceed sqrt(2)")

    def as_document(self):
        """Flat JSON-ready mapping (field names as in the type)."""
        return {
            "delta": self.delta,
            "delta_calibrated": self.delta_calibrated,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "sigma1_omega": self.sigma1_omega,
            "eta": self.eta,
            "missing_norm": self.missing_norm,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "epsilon_threshold": self.epsilon_threshold,
            "flags": list(self.flags),
        }

    def with_calibration(self, delta_calibrated):
        return replace(self, delta_calibrated=float(delta_calibrated))


def _leading_with_gap(mat):
    res = decompose(mat)
    s = res.singular_values
    sigma2 = float(s[1]) if s.shape[0] > 1 else 0.0
    return float(s[0]), sigma2, res.left_vectors[:, 0]


def _aligned_anchor_pair(full_mat, sub_mat):
    sigma1, sigma2, u1 = _leading_with_gap(full_mat)
    sigma1_o, sigma2_o, u1_o = _leading_with_gap(sub_mat)
    if u1 @ u1_o < 0.0:
        u1_o = -u1_o
    return (sigma1, sigma2, u1), (sigma1_o, sigma2_o, u1_o)


def _spectral_norm(mat):
    return float(backends.svd(mat)[1][0])


def _split(stack, mask):
    observed = stack.submatrix(mask)
    missing_ids = mask.complement(stack.modality_ids)
    return observed, missing_ids


def anchor_shift(stack, mask):
    """Distance between the full-stack anchor and the observed-stack anchor
    after acute sign alignment.

    Raises :class:`DegenerateSpectrumError` when either matrix has a
    leading gap below 1e-8 (the anchor direction is then ill-defined).
    """
    observed, _ = _split(stack, mask)
    full = _leading_with_gap(stack.matrix)
    sub = _leading_with_gap(observed)
    if full[0] - full[1] < MIN_GAP:
        raise DegenerateSpectrumError(
            f"full stack gap {full[0] - full[1]:.3e} below {MIN_GAP}")
    if sub[0] - sub[1] < MIN_GAP:
        raise DegenerateSpectrumError(
            f"observed submatrix gap {sub[0] - sub[1]:.3e} below {MIN_GAP}")
    u1, u1_o = full[2], sub[2]
    if u1 @ u1_o < 0.0:
        u1_o = -u1_o
    return float(np.linalg.norm(u1 - u1_o))


def _bound_ingredients(stack, mask):
    observed, missing_ids = _split(stack, mask)
    (sigma1, sigma2, u1), (sigma1_o, sigma2_o, u1_o) = _aligned_anchor_pair(
        stack.matrix, observed)
    if sigma1_o - sigma2_o < MIN_GAP:
        raise DegenerateSpectrumError(
            f"observed submatrix gap {sigma1_o - sigma2_o:.3e} below {MIN_GAP}")
    if missing_ids:
        missing = np.column_stack([stack.column(m) for m in missing_ids])
        eta = math.sqrt(float(np.sum((u1_o @ missing) ** 2)))
        missing_norm = _spectral_norm(missing)
    else:
        eta = 0.0
        missing_norm = 0.0
    delta = float(np.linalg.norm(u1 - u1_o))
    return {
        "sigma1": sigma1,
        "sigma2": sigma2,
        "sigma1_omega": sigma1_o,
        "eta": eta,
        "missing_norm": missing_norm,
        "delta": delta,
        "missing_count": len(missing_ids),
    }


def _consistent_inner(sigma1, sigma1_omega, eta):
    """1 - cos-theta envelope from ||u1_o^T Z||^2 = sigma1_o^2 + eta^2,
    with every ratio clamped where the derivation requires cos <= 1."""
    ratio = math.sqrt(sigma1_omega ** 2 + eta ** 2) / sigma1
    return max(0.0, 1.0 - min(1.0, ratio))


def lower_bound_variants(sigma1, sigma1_omega, eta):
    """The implemented lower bound alongside the two printed variants.

    ``consistent``: sqrt(2 (1 - sqrt(sigma1_o^2 + eta^2) / sigma1)), the
    algebraically valid envelope.  ``main_text`` uses the unsquared
    sigma1_o; ``appendix`` divides the squared energy by sigma1 without the
    square root.  The variants are reported for audit, never asserted.
    """
    consistent = math.sqrt(2.0 * _consistent_inner(sigma1, sigma1_omega, eta))
    main_text = math.sqrt(max(0.0, 2.0 * (1.0 - (sigma1_omega + eta ** 2) / sigma1)))
    appendix = math.sqrt(max(0.0, 2.0 - 2.0 * (sigma1_omega ** 2 + eta ** 2) / sigma1))
    return {"consistent": consistent, "main_text": main_text,
            "appendix": appendix}


def shift_bounds(stack, mask):
    """Measured anchor shift with its lower/upper envelope and the
    calibration threshold, as one report.

    A full-stack gap below 1e-8 yields an infinite upper bound and a
    degenerate flag instead of an error; a degenerate observed submatrix
    raises, since every reported quantity depends on its anchor.
    """
    q = _bound_ingredients(stack, mask)
    flags = []
    gap = q["sigma1"] - q["sigma2"]
    if gap < MIN_GAP:
        upper = math.inf
        flags.append(FLAG_DEGENERATE_FULL_GAP)
    else:
        upper = SQRT2 * q["missing_norm"] / gap
    inner = _consistent_inner(q["sigma1"], q["sigma1_omega"], q["eta"])
    lower = math.sqrt(2.0 * inner)
    if q["missing_count"] == 0:
        epsilon = 0.0
        flags.append(FLAG_NO_MISSING)
    else:
        epsilon = gap / math.sqrt(q["missing_count"]) * math.sqrt(inner)
    if not (lower - 1e-12 <= q["delta"] <= upper + 1e-12):
        flags.append(FLAG_BOUND_VIOLATED)
    return AnchorReport(
        delta=q["delta"],
        sigma1=q["sigma1"],
        sigma2=q["sigma2"],
        sigma1_omega=q["sigma1_omega"],
        eta=q["eta"],
        missing_norm=q["missing_norm"],
        lower_bound=lower,
        upper_bound=upper,
        epsilon_threshold=max(0.0, epsilon),
        flags=tuple(flags),
    )


def calibration_threshold(stack, mask):
    """Per-column imputation error budget: below it, completing the stack
    with imputed columns strictly shrinks the anchor shift."""
    missing_ids = mask.complement(stack.modality_ids)
    if not missing_ids:
        raise NoMissingModalityError(
            "calibration threshold needs at least one missing modality")
    q = _bound_ingredients(stack, mask)
    gap = q["sigma1"] - q["sigma2"]
    inner = _consistent_inner(q["sigma1"], q["sigma1_omega"], q["eta"])
    return gap / math.sqrt(q["missing_count"]) * math.sqrt(inner)


def calibrated_shift(stack, mask, imputed):
    """Anchor shift of the stack completed with imputed columns.

    ``imputed`` must cover exactly the missing modalities; the vectors are
    renormalized to unit length before stacking.  Returns
    ``(delta_calibrated, improved)`` where ``improved`` compares against
    the uncalibrated shift.
    """
    missing_ids = mask.complement(stack.modality_ids)
    if set(imputed.keys()) != set(missing_ids):
        raise InvalidImputationError(
            f"imputed set {sorted(imputed)} must equal missing modalities "
            f"{sorted(missing_ids)}")
    completed = np.array(stack.matrix)
    for m in missing_ids:
        vec = np.asarray(imputed[m], dtype=float)
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0.0:
            raise InvalidImputationError(
                f"imputed column for {m!r} cannot be normalized")
        completed[:, stack.slot_index(m)] = vec / norm
    completed_stack = EmbeddingStack(completed, stack.modality_ids)

    full = _leading_with_gap(stack.matrix)
    cal = _leading_with_gap(completed_stack.matrix)
    if full[0] - full[1] < MIN_GAP:
        raise DegenerateSpectrumError("full stack gap below 1e-8")
    if cal[0] - cal[1] < MIN_GAP:
        raise DegenerateSpectrumError("completed stack gap below 1e-8")
    u1, u1_c = full[2], cal[2]
    if u1 @ u1_c < 0.0:
        u1_c = -u1_c
    delta_cal = float(np.linalg.norm(u1 - u1_c))
    return delta_cal, bool(delta_cal < anchor_shift(stack, mask))
