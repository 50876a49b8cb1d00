"""Representation objective over completed modality stacks.

Three pieces, combined as ``total = -(align + uniformity) + alpha * matching``:

* align: per-instance softmax fraction of the leading singular value of the
  stack, pushed toward 1 to collapse all modality columns onto one
  direction;
* uniformity: batch softmax over anchor inner products, spreading the
  per-instance anchors apart;
* matching (optional): log-likelihood of a logistic head that separates
  true modality pairs from derangement-shuffled ones, kept in the printed
  sign convention.

Gradients with respect to the stack entries are analytic: singular values
differentiate as rank-one outer products and the anchor direction through
its first-order perturbation series, so no finite differencing is needed
inside training loops.
"""

import math
from dataclasses import dataclass

import numpy as np

from latentalign.errors import (
    DegenerateSpectrumError,
    InsufficientNegativesError,
    InvalidAnchorError,
    InvalidInputError,
    InvalidStackError,
)
from latentalign.seeding import stream
from latentalign.spectral import EmbeddingStack, ObservationMask, decompose

GRAD_MIN_GAP = 1e-6
DEFAULT_TAU = 0.05
DEFAULT_TAU_PRIME = 0.1
DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class MatchingHead:
    """Logistic head on mean-pooled modality pairs."""

    weights: np.ndarray
    bias: float

    def __init__(self, weights, bias=0.0):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or not np.all(np.isfinite(weights)) \
                or not math.isfinite(bias):
            raise InvalidInputError("matching head parameters must be finite")
        w = weights.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(bias))

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), 0.0)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    align_term: float
    uniformity_term: float
    matching_term: float  # None when the head is disabled
    tau: float
    tau_prime: float
    alpha: float

    def as_document(self):
        return {
            "total": self.total,
            "align_term": self.align_term,
            "uniformity_term": self.uniformity_term,
            "matching_term": self.matching_term,
            "tau": self.tau,
            "tau_prime": self.tau_prime,
            "alpha": self.alpha,
        }


def _as_matrix(stack_or_matrix):
    if isinstance(stack_or_matrix, EmbeddingStack):
        return stack_or_matrix.matrix
    arr = np.asarray(stack_or_matrix, dtype=float)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise InvalidInputError("stack must be a finite 2-d matrix")
    return arr


def _padded_singular_values(res, k):
    s = np.zeros(k)
    s[: res.p] = res.singular_values
    return s


def _softmax(values, temperature):
    scaled = values / temperature
    scaled = scaled - np.max(scaled)
    e = np.exp(scaled)
    return e / np.sum(e)


def align_term(stack, tau):
    """Softmax fraction of the leading singular value of one stack.

    Equals 1/k for orthonormal columns and approaches 1 as the columns
    become colinear; the singular values of stacks with fewer rows than
    columns are zero-padded up to k.
    """
    mat = _as_matrix(stack)
    k = mat.shape[1]
    if k < 2:
        raise InvalidStackError("alignment needs at least 2 modality slots")
    if tau <= 0.0:
        raise InvalidInputError("tau must be positive")
    svals = _padded_singular_values(decompose(mat), k)
    return float(_softmax(svals, tau)[0])


def uniformity_term(anchors, tau_prime):
    """Mean self-softmax of anchor similarities across the batch:
    (1/N) sum_i exp(<u_i, u_i>/tau') / sum_j exp(<u_i, u_j>/tau')."""
    if tau_prime <= 0.0:
        raise InvalidInputError("tau_prime must be positive")
    mat = np.stack([np.asarray(a, dtype=float) for a in anchors])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidAnchorError("anchors must be unit norm within 1e-6")
    sims = mat @ mat.T
    scaled = sims / tau_prime
    scaled -= scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    fractions = np.exp(np.diag(scaled)) / e.sum(axis=1)
    return float(np.mean(fractions))


def _derangement(n, seed):
    rng = stream(seed, "alignloss.negatives")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _observed_slots(mat, stack, mask):
    """Column indices taking part in matching: all of them, the slots named
    by an ObservationMask, or an explicit index sequence."""
    if mask is None:
        return list(range(mat.shape[1]))
    if isinstance(mask, ObservationMask):
        if not isinstance(stack, EmbeddingStack):
            raise InvalidInputError(
                "modality-id masks require EmbeddingStack inputs")
        return [j for j, m in enumerate(stack.modality_ids) if m in mask]
    return sorted(int(j) for j in mask)


def _matching_pairs(mats, masks, stacks):
    """(instance index, first slot, rest slots, first vector, rest pool)."""
    pairs = []
    for i, mat in enumerate(mats):
        observed = _observed_slots(mat, stacks[i], None if masks is None
                                   else masks[i])
        if len(observed) < 2:
            continue
        first = observed[0]
        rest = observed[1:]
        pairs.append((i, first, rest, mat[:, first],
                      mat[:, rest].mean(axis=1)))
    return pairs


def matching_term(batch, head, seed, masks=None):
    """Mean log-likelihood of the logistic head on pooled pairs.

    Positives pair each instance's first observed modality with the mean of
    its remaining observed ones; negatives swap in the rest-pool of a
    derangement partner (deterministic in the seed).  Only observed
    modalities participate.
    """
    mats = [_as_matrix(s) for s in batch]
    pairs = _matching_pairs(mats, masks, batch)
    if len(pairs) < 2:
        raise InsufficientNegativesError(
            "matching needs >= 2 instances with >= 2 observed modalities")
    perm = _derangement(len(pairs), seed)
    value, _, _, _ = _matching_value_and_grads(pairs, perm, head,
                                               [m.shape for m in mats])
    return value


def _matching_value_and_grads(pairs, perm, head, shapes):
    w = head.weights
    examples = []  # (feature, label, contributions)
    for idx, (i, first, rest, x, y) in enumerate(pairs):
        examples.append(((x + y) / 2.0, 1.0, ((i, first, 0.5),
                                              (i, rest, 0.5 / len(rest)))))
        j_i, j_first, j_rest, _, y_neg = pairs[perm[idx]]
        examples.append(((x + y_neg) / 2.0, 0.0, ((i, first, 0.5),
                                                  (j_i, j_rest, 0.5 / len(j_rest)))))
    feats = np.stack([f for f, _, _ in examples])
    labels = np.array([lab for _, lab, _ in examples])
    logits = feats @ w + head.bias
    prob = 1.0 / (1.0 + np.exp(-logits))
    prob = np.clip(prob, 1e-300, 1.0 - 1e-16)
    value = float(np.mean(labels * np.log(prob)
                          + (1.0 - labels) * np.log(1.0 - prob)))
    dlogit = (labels - prob) / len(examples)
    grads = [np.zeros(shape) for shape in shapes]
    for coeff, (_, _, contribs) in zip(dlogit, examples):
        for i, slots, weight in contribs:
            if isinstance(slots, int):
                grads[i][:, slots] += coeff * weight * w
            else:
                for j in slots:
                    grads[i][:, j] += coeff * weight * w
    dw = feats.T @ dlogit
    db = float(np.sum(dlogit))
    return value, grads, dw, db


def _batch_spectra(batch):
    mats = [_as_matrix(s) for s in batch]
    shape = mats[0].shape
    if shape[1] < 2:
        raise InvalidStackError("alignment needs at least 2 modality slots")
    for mat in mats:
        if mat.shape != shape:
            raise InvalidInputError("all stacks in a batch must share (d, k)")
    return mats, [decompose(m) for m in mats]


def rep_loss(batch, tau=DEFAULT_TAU, tau_prime=DEFAULT_TAU_PRIME,
             alpha=DEFAULT_ALPHA, head=None, masks=None, seed=0):
    """Full objective over a batch of completed stacks.

    The matching term is evaluated only when a head is supplied; its field
    is None otherwise and contributes zero to the total.
    """
    mats, spectra = _batch_spectra(batch)
    k = mats[0].shape[1]
    align_fracs = [float(_softmax(_padded_singular_values(res, k), tau)[0])
                   for res in spectra]
    anchors = [res.left_vectors[:, 0] for res in spectra]
    align = float(np.mean(align_fracs))
    uniform = uniformity_term(anchors, tau_prime)
    match = None
    if head is not None:
        match = matching_term(batch, head, seed, masks=masks)
    total = -(align + uniform) + alpha * (match if match is not None else 0.0)
    return LossBreakdown(total=total, align_term=align,
                         uniformity_term=uniform, matching_term=match,
                         tau=tau, tau_prime=tau_prime, alpha=alpha)


def _anchor_adjoint(res, grad_u1):
    """Map a gradient on u1 back to the stack entries via the first-order
    perturbation of the leading singular direction."""
    u = res.left_vectors
    v = res.right_vectors
    s = res.singular_values
    sigma1 = s[0]
    out = np.zeros((u.shape[0], v.shape[0]))
    for j in range(1, s.shape[0]):
        coeff = float(grad_u1 @ u[:, j]) / (sigma1 ** 2 - s[j] ** 2)
        out += coeff * (sigma1 * np.outer(u[:, j], v[:, 0])
                        + s[j] * np.outer(u[:, 0], v[:, j]))
    residual = grad_u1 - u @ (u.T @ grad_u1)
    out += np.outer(residual, v[:, 0]) / sigma1
    return out


def rep_loss_grad(batch, tau=DEFAULT_TAU, tau_prime=DEFAULT_TAU_PRIME,
                  alpha=DEFAULT_ALPHA, head=None, masks=None, seed=0,
                  with_head_grad=False):
    """Gradient of the total objective with respect to every stack entry.

    Requires each instance's leading spectral gap to clear 1e-6 so the
    anchor direction is differentiable; degenerate instances raise with
    their index.  With ``with_head_grad`` the head's (weight, bias)
    gradient is returned alongside the per-instance matrices.
    """
    mats, spectra = _batch_spectra(batch)
    n = len(mats)
    k = mats[0].shape[1]
    for idx, res in enumerate(spectra):
        s = res.singular_values
        sigma2 = s[1] if s.shape[0] > 1 else 0.0
        if s[0] - sigma2 < GRAD_MIN_GAP:
            raise DegenerateSpectrumError(
                f"instance {idx}: leading gap {s[0] - sigma2:.3e} below "
                f"{GRAD_MIN_GAP}")

    grads = [np.zeros_like(m) for m in mats]

    # align part: d(-mean_i softmax_1(s_i/tau)) / dZ_i
    for i, res in enumerate(spectra):
        svals = _padded_singular_values(res, k)
        soft = _softmax(svals, tau)
        a = soft[0]
        for j in range(res.p):
            weight = a * ((1.0 if j == 0 else 0.0) - soft[j]) / tau
            grads[i] -= (weight / n) * np.outer(res.left_vectors[:, j],
                                                res.right_vectors[:, j])

    # uniformity part through the anchors
    anchors = np.stack([res.left_vectors[:, 0] for res in spectra])
    sims = anchors @ anchors.T
    e = np.exp((sims - 1.0) / tau_prime)  # stable: sims <= 1
    denom = e.sum(axis=1)
    numer = np.exp((np.diag(sims) - 1.0) / tau_prime)
    anchor_grads = np.zeros_like(anchors)
    for a_idx in range(n):
        g = np.zeros(anchors.shape[1])
        # own numerator and denominator
        g += (2.0 / tau_prime) * numer[a_idx] / denom[a_idx] * anchors[a_idx]
        d_da = (2.0 / tau_prime) * e[a_idx, a_idx] * anchors[a_idx]
        for j in range(n):
            if j != a_idx:
                d_da = d_da + (1.0 / tau_prime) * e[a_idx, j] * anchors[j]
        g -= numer[a_idx] / denom[a_idx] ** 2 * d_da
        # other instances' denominators
        for i in range(n):
            if i == a_idx:
                continue
            g -= (numer[i] / denom[i] ** 2) * (1.0 / tau_prime) \
                * e[i, a_idx] * anchors[i]
        anchor_grads[a_idx] = -g / n  # loss subtracts the uniformity term
    for i, res in enumerate(spectra):
        grads[i] += _anchor_adjoint(res, anchor_grads[i])

    head_grad = None
    if head is not None:
        pairs = _matching_pairs(mats, masks, batch)
        if len(pairs) < 2:
            raise InsufficientNegativesError(
                "matching needs >= 2 instances with >= 2 observed modalities")
        perm = _derangement(len(pairs), seed)
        _, match_grads, dw, db = _matching_value_and_grads(
            pairs, perm, head, [m.shape for m in mats])
        for i in range(n):
            grads[i] += alpha * match_grads[i]
        head_grad = (alpha * dw, alpha * db)

    if with_head_grad:
        return grads, head_grad
    return grads
