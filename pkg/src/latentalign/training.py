"""Desk-scale training loop over synthetic multimodal data.

Linear unimodal encoders produce unit-norm embeddings; each batch infers
shared-latent posteriors from the observed modalities, refreshes the
generative parameters through exponentially averaged sufficient
statistics, imputes the missing columns, and steps the encoders down the
representation objective with the imputed columns held constant.  The
generative bookkeeping (warm-up on complete data, per-batch updates,
imputation) deliberately mirrors the full-batch reference fit while
staying cheap enough to run in seconds.
"""

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from latentalign import alignloss
from latentalign import latentmodel as lm
from latentalign.alignloss import MatchingHead
from latentalign.errors import (
    ConditioningError,
    DegenerateEmbeddingError,
    DegenerateSpectrumError,
    InsufficientCoverageError,
    InsufficientNegativesError,
    InvalidInputError,
    InvalidKError,
    InvalidWarmupDataError,
    RankDeficiencyError,
)
from latentalign.seeding import stream
from latentalign.spectral import ObservationMask
from latentalign.synth import MaskPattern

logger = logging.getLogger(__name__)

# The reference setup tunes 1e-5 for adaptive optimizers on deep encoders;
# plain gradient descent on toy linear encoders uses that rate scaled by
# 5e4 (documented in the README), i.e. 0.5 by default.
BASE_LEARNING_RATE = 1e-5
LEARNING_RATE_SCALE = 5e4


@dataclass(frozen=True)
class LinearEncoder:
    """Per-modality projection to unit-norm embeddings: z = Ax / ||Ax||."""

    projection: np.ndarray

    def __init__(self, projection):
        proj = np.asarray(projection, dtype=float)
        if proj.ndim != 2 or not np.all(np.isfinite(proj)):
            raise InvalidInputError("encoder projection must be a finite matrix")
        proj = proj.copy()
        proj.flags.writeable = False
        object.__setattr__(self, "projection", proj)

    def encode(self, features):
        raw = self.projection @ np.asarray(features, dtype=float)
        norm = np.linalg.norm(raw)
        if norm == 0.0 or not np.isfinite(norm):
            raise DegenerateEmbeddingError(
                "encoder produced a zero or non-finite vector")
        return raw / norm

    def encode_batch(self, features):
        raw = np.asarray(features, dtype=float) @ self.projection.T
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise DegenerateEmbeddingError(
                "encoder produced a zero or non-finite vector")
        return raw / norms[:, None]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the toy trainer.

    Temperatures tau=0.05 / tau_prime=0.1, matching weight alpha=0.1, and
    batch size 64 are the reference defaults; the learning rate is the
    reference 1e-5 scaled for plain gradient descent on linear encoders.
    """

    latent_dim: int = 4
    embed_dim: int = 16
    tau: float = 0.05
    tau_prime: float = 0.1
    alpha: float = 0.1
    learning_rate: float = BASE_LEARNING_RATE * LEARNING_RATE_SCALE
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    warmup_epochs: int = 1
    mask_policy: str = "mix:0.5"
    matching_enabled: bool = False
    imputation_enabled: bool = True
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise InvalidInputError("dimensions must be positive")
        if self.tau <= 0 or self.tau_prime <= 0:
            raise InvalidInputError("temperatures must be positive")
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidInputError("epoch counts must be nonnegative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidInputError("ema_decay must be in [0, 1)")
        MaskPattern.parse(self.mask_policy)

    def as_document(self):
        return {
            "latent_dim": self.latent_dim, "embed_dim": self.embed_dim,
            "tau": self.tau, "tau_prime": self.tau_prime, "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "seed": self.seed, "warmup_epochs": self.warmup_epochs,
            "mask_policy": self.mask_policy,
            "matching_enabled": self.matching_enabled,
            "imputation_enabled": self.imputation_enabled,
            "ema_decay": self.ema_decay,
        }

    @classmethod
    def from_document(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class Dataset:
    """Raw features per modality plus optional per-instance masks
    (None means fully observed)."""

    features: MappingProxyType
    masks: tuple = None

    def __init__(self, features, masks=None):
        feats = {}
        n = None
        for m, arr in features.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim != 2:
                raise InvalidInputError(f"features for {m!r} must be 2-d")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise InvalidInputError("feature blocks have mixed instance counts")
            feats[m] = arr
        if not feats:
            raise InvalidInputError("dataset needs at least one modality")
        if masks is not None:
            masks = tuple(masks)
            if len(masks) != n:
                raise InvalidInputError("one mask per instance required")
        object.__setattr__(self, "features", MappingProxyType(feats))
        object.__setattr__(self, "masks", masks)

    @property
    def n(self):
        return next(iter(self.features.values())).shape[0]

    @property
    def modality_ids(self):
        return tuple(self.features.keys())

    def mask_for(self, index):
        if self.masks is None:
            return ObservationMask(self.modality_ids)
        return self.masks[index]

    def fully_observed(self):
        if self.masks is None:
            return True
        full = set(self.modality_ids)
        return all(set(m.ids) == full for m in self.masks)

    @classmethod
    def from_world(cls, world, indices, masks=None):
        return cls({m: world.features[m][indices]
                    for m in world.modality_ids}, masks)


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch traces plus the final encoder and generative snapshots."""

    loss_trace: tuple
    loglik_trace: tuple
    recall1_trace: tuple
    recall5_trace: tuple
    recall10_trace: tuple
    encoders: MappingProxyType
    params: lm.GenerativeParams
    head: MatchingHead = None
    skipped_degenerate: int = 0

    def trace_rows(self):
        """Rows for the epoch CSV: epoch, loss, loglik, r1, r5, r10."""
        return [
            (e + 1, self.loss_trace[e], self.loglik_trace[e],
             self.recall1_trace[e], self.recall5_trace[e],
             self.recall10_trace[e])
            for e in range(len(self.loss_trace))
        ]

    def as_document(self):
        return {
            "loss_trace": list(self.loss_trace),
            "loglik_trace": list(self.loglik_trace),
            "recall1_trace": list(self.recall1_trace),
            "recall5_trace": list(self.recall5_trace),
            "recall10_trace": list(self.recall10_trace),
            "skipped_degenerate": self.skipped_degenerate,
        }


def encode(encoders, features, mask):
    """Unit-norm embeddings for exactly the observed modalities."""
    if set(features.keys()) != set(mask.ids):
        raise InvalidInputError("features must cover exactly the mask")
    emb = {m: encoders[m].encode(features[m]) for m in mask.ids}
    return lm.ObservedInstance(emb, mask)


def initial_encoders(modality_ids, embed_dim, raw_dims, seed):
    encoders = {}
    for m in modality_ids:
        rng = stream(seed, f"train.encoder.{m}")
        scale = 1.0 / math.sqrt(raw_dims[m])
        encoders[m] = LinearEncoder(scale * rng.standard_normal(
            (embed_dim, raw_dims[m])))
    return encoders


class _EmaStats:
    """Exponentially averaged sufficient statistics for the closed-form
    per-modality updates."""

    def __init__(self, modality_ids, embed_dim, latent_dim, decay):
        self.decay = decay
        self.stats = {m: None for m in modality_ids}
        self.embed_dim = embed_dim
        self.latent_dim = latent_dim

    def update(self, modality_id, z, means, cov_sum):
        batch = {
            "n": float(z.shape[0]),
            "sz": z.sum(axis=0),
            "szz": float(np.sum(z * z)),
            "sm": means.sum(axis=0),
            "szm": z.T @ means,
            "smm": means.T @ means,
            "sv": cov_sum,
        }
        old = self.stats[modality_id]
        if old is None:
            self.stats[modality_id] = batch
        else:
            self.stats[modality_id] = {
                key: self.decay * old[key] + batch[key] for key in batch}

    def closed_form(self, modality_id, current_loading):
        """Same block updates as the reference fit, over the averaged
        statistics: mu from the current loading, then the loading, then the
        noise scale."""
        s = self.stats[modality_id]
        if s is None or s["n"] < 2.0:
            return None
        n, d = s["n"], self.embed_dim
        mu = (s["sz"] - current_loading @ s["sm"]) / n
        second = s["sv"] + s["smm"]
        cond = np.linalg.cond(second)
        if not np.isfinite(cond) or cond > 1e12:
            raise RankDeficiencyError(
                f"averaged second moment for {modality_id!r} is singular "
                f"(condition number {cond:.3e})", condition_number=cond)
        cross = s["szm"] - np.outer(mu, s["sm"])
        loading = np.linalg.solve(second.T, cross.T).T
        resid = (s["szz"] - 2.0 * float(mu @ s["sz"]) + n * float(mu @ mu)
                 - 2.0 * float(np.sum(loading * cross))
                 + float(np.sum((loading.T @ loading) * s["smm"])))
        s2 = (resid + float(np.sum((loading.T @ loading) * s["sv"]))) / (n * d)
        degenerate = s2 < lm.SIGMA2_FLOOR
        s2 = max(s2, lm.SIGMA2_FLOOR)
        return lm.MStepResult(loading, mu, math.sqrt(s2), degenerate)


def _generative_batch_update(params, instances, stats):
    """One bi-step pass: exact posteriors, then averaged closed-form
    updates for every modality present in the batch."""
    posts = lm.grouped_posteriors(params, instances)
    by_modality = {}
    for obs, post in zip(instances, posts):
        for m in obs.mask:
            by_modality.setdefault(m, []).append((obs, post))
    for m in params.modality_ids:
        rows = by_modality.get(m)
        if not rows or len(rows) < 2:
            continue
        z = np.stack([obs.embeddings[m] for obs, _ in rows])
        means = np.stack([post.mean for _, post in rows])
        cov_sum = sum(post.cov for _, post in rows)
        stats.update(m, z, means, cov_sum)
        try:
            upd = stats.closed_form(m, params.loadings[m])
        except RankDeficiencyError as exc:
            logger.warning("skipping update for %s: %s", m, exc)
            continue
        if upd is not None:
            params = params.with_update(m, upd.loading, upd.offset,
                                        upd.noise_std)
    return params, posts


def warmup(dataset, config):
    """Initialize the generative parameters on complete data by masking one
    uniformly random modality per instance and running the per-batch
    bi-step updates for ``warmup_epochs`` passes."""
    params, _, _ = _warmup_with_stats(dataset, config)
    return params


def _warmup_with_stats(dataset, config):
    if not dataset.fully_observed():
        raise InvalidWarmupDataError("warm-up requires complete modalities")
    ids = dataset.modality_ids
    if len(ids) < 2:
        raise InvalidWarmupDataError(
            "warm-up needs at least 2 modalities to mask one out")
    if config.warmup_epochs < 1:
        raise InvalidWarmupDataError("warmup_epochs must be >= 1 for warm-up")
    encoders = initial_encoders(
        ids, config.embed_dim,
        {m: dataset.features[m].shape[1] for m in ids}, config.seed)
    embedded = {m: encoders[m].encode_batch(dataset.features[m]) for m in ids}

    full_mask = ObservationMask(ids)
    complete = [lm.ObservedInstance({m: embedded[m][i] for m in ids}, full_mask)
                for i in range(dataset.n)]
    params = lm.initialize_params(complete, config.latent_dim, ids)

    stats = _EmaStats(ids, config.embed_dim, config.latent_dim,
                      config.ema_decay)
    mask_rng = stream(config.seed, "train.warmup_mask")
    shuffle_rng = stream(config.seed, "train.warmup_shuffle")
    for _ in range(config.warmup_epochs):
        order = shuffle_rng.permutation(dataset.n)
        for start in range(0, dataset.n, config.batch_size):
            chunk = order[start:start + config.batch_size]
            if chunk.shape[0] < 2:
                continue
            instances = []
            for i in chunk:
                dropped = ids[int(mask_rng.integers(0, len(ids)))]
                kept = tuple(m for m in ids if m != dropped)
                instances.append(lm.ObservedInstance(
                    {m: embedded[m][i] for m in kept}, ObservationMask(kept)))
            params, _ = _generative_batch_update(params, instances, stats)
    return params, stats, encoders


def _pairwise_mean_cosines(encoders, data, limit=256):
    """Mean cross-modal cosine per modality pair over instances observing
    both (first ``limit`` co-observations, deterministic)."""
    ids = data.modality_ids
    sums = {}
    counts = {}
    for i in range(data.n):
        mask = data.mask_for(i)
        observed = [m for m in ids if m in mask]
        if len(observed) < 2:
            continue
        emb = {m: encoders[m].encode(data.features[m][i]) for m in observed}
        for a_pos in range(len(observed)):
            for b_pos in range(a_pos + 1, len(observed)):
                a, b = observed[a_pos], observed[b_pos]
                if counts.get((a, b), 0) >= limit:
                    continue
                sums[(a, b)] = sums.get((a, b), 0.0) + float(emb[a] @ emb[b])
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if counts and min(counts.values()) >= limit and \
                len(counts) == len(ids) * (len(ids) - 1) // 2:
            break
    return {pair: sums[pair] / counts[pair] for pair in sums}


def _sign_assignment(ids, cosines):
    """Signs making every (reachable) pair's mean cosine positive: greedy
    spanning tree over the strongest links, first modality as reference."""
    signs = {ids[0]: 1.0}
    remaining = set(ids[1:])
    links = {pair: abs(c) for pair, c in cosines.items()}
    while remaining:
        best = None
        for (a, b), strength in sorted(links.items()):
            known, unknown = (a, b) if a in signs else (b, a)
            if known not in signs or unknown not in remaining:
                continue
            if best is None or strength > best[0]:
                best = (strength, known, unknown, cosines[(a, b)]
                        if (a, b) in cosines else cosines[(b, a)])
        if best is None:
            # disconnected modality: leave its sign alone
            for m in sorted(remaining):
                signs[m] = 1.0
            break
        _, known, unknown, cos = best
        signs[unknown] = signs[known] * (1.0 if cos >= 0.0 else -1.0)
        remaining.discard(unknown)
    return signs


def _canonicalize_signs(state, data):
    """Flip encoder signs so co-observed modalities correlate positively.

    The objective is exactly invariant under flipping any modality's
    encoder (the stack's singular values and leading direction do not see
    column signs) and gradient descent is equivariant, so this only fixes
    the gauge that retrieval-by-inner-product depends on.  The generative
    blocks and averaged statistics flip along to stay consistent.
    """
    cosines = _pairwise_mean_cosines(state.encoders, data)
    if not cosines:
        return
    signs = _sign_assignment(data.modality_ids, cosines)
    for m, sign in signs.items():
        if sign >= 0.0:
            continue
        state.encoders[m] = LinearEncoder(-state.encoders[m].projection)
        if state.params is not None and m in state.params.loadings:
            state.params = state.params.with_update(
                m, -state.params.loadings[m], -state.params.offsets[m],
                state.params.noise_std[m])
        stats = state.stats.stats.get(m)
        if stats is not None:
            stats["sz"] = -stats["sz"]
            stats["szm"] = -stats["szm"]


def _coverage_check(dataset):
    counts = {m: 0 for m in dataset.modality_ids}
    for i in range(dataset.n):
        for m in dataset.mask_for(i):
            counts[m] += 1
    starved = tuple(m for m, c in counts.items() if c == 0)
    if starved:
        raise InsufficientCoverageError(
            f"modalities never observed in the training data: {starved}",
            starved=starved)


def _mean_pairwise_recall(embedded, ks):
    ids = tuple(embedded.keys())
    n = next(iter(embedded.values())).shape[0]
    pairing = np.arange(n)
    sums = {k: 0.0 for k in ks}
    pairs = 0
    for q in ids:
        for g in ids:
            if q == g:
                continue
            pairs += 1
            for k in ks:
                sums[k] += recall_at_k(embedded[q], embedded[g], pairing, k)
    return {k: sums[k] / pairs for k in ks}


def train(train_data, eval_data, config, warmup_data=None):
    """Run the full loop and return the per-epoch report.

    Per batch: encode the observed modalities, infer posteriors, update the
    generative parameters from averaged statistics, impute the missing
    columns (renormalized, held constant for the gradient), and step the
    encoders down the representation objective.  Deterministic given the
    config seed.
    """
    ids = train_data.modality_ids
    _coverage_check(train_data)
    raw_dims = {m: train_data.features[m].shape[1] for m in ids}
    encoders = initial_encoders(ids, config.embed_dim, raw_dims, config.seed)
    head = MatchingHead.zeros(config.embed_dim) if config.matching_enabled \
        else None
    stats = _EmaStats(ids, config.embed_dim, config.latent_dim,
                      config.ema_decay)
    state = _TrainState(encoders=encoders, params=None, head=head,
                        stats=stats, skipped=0, batch_counter=0)

    if warmup_data is not None and config.warmup_epochs >= 1:
        _run_warmup_phase(state, warmup_data, config)
    else:
        observed = [
            encode(encoders,
                   {m: train_data.features[m][i]
                    for m in train_data.mask_for(i).ids},
                   train_data.mask_for(i))
            for i in range(train_data.n)
        ]
        state.params = lm.initialize_params(observed, config.latent_dim, ids)

    shuffle_rng = stream(config.seed, "train.shuffle")
    loss_trace, loglik_trace = [], []
    recalls = {1: [], 5: [], 10: []}
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(train_data.n)
        epoch_loss = _run_epoch(state, train_data, order, config,
                                config.imputation_enabled, masked=True)
        loss_trace.append(epoch_loss)
        metrics = _evaluate(state.encoders, state.params, eval_data)
        loglik_trace.append(metrics["loglik"])
        for k in (1, 5, 10):
            recalls[k].append(metrics["recall"][k])

    return TrainReport(
        loss_trace=tuple(loss_trace), loglik_trace=tuple(loglik_trace),
        recall1_trace=tuple(recalls[1]), recall5_trace=tuple(recalls[5]),
        recall10_trace=tuple(recalls[10]),
        encoders=MappingProxyType(dict(state.encoders)), params=state.params,
        head=state.head, skipped_degenerate=state.skipped)


@dataclass
class _TrainState:
    encoders: dict
    params: object
    head: object
    stats: _EmaStats
    skipped: int
    batch_counter: int


def _run_warmup_phase(state, warmup_data, config):
    """Complete-data phase: generative updates see one random missing
    modality per instance, encoder steps see the full stacks."""
    if not warmup_data.fully_observed():
        raise InvalidWarmupDataError("warm-up requires complete modalities")
    ids = warmup_data.modality_ids
    if len(ids) < 2:
        raise InvalidWarmupDataError(
            "warm-up needs at least 2 modalities to mask one out")
    full_mask = ObservationMask(ids)
    complete = [
        encode(state.encoders,
               {m: warmup_data.features[m][i] for m in ids}, full_mask)
        for i in range(warmup_data.n)
    ]
    state.params = lm.initialize_params(complete, config.latent_dim, ids)
    mask_rng = stream(config.seed, "train.warmup_mask")
    shuffle_rng = stream(config.seed, "train.warmup_shuffle")
    for _ in range(config.warmup_epochs):
        order = shuffle_rng.permutation(warmup_data.n)
        _run_epoch(state, warmup_data, order, config, imputation=False,
                   masked=False, warmup_mask_rng=mask_rng)


def _run_epoch(state, data, order, config, imputation, masked,
               warmup_mask_rng=None):
    ids = data.modality_ids
    epoch_loss = 0.0
    epoch_count = 0
    for start in range(0, data.n, config.batch_size):
        chunk = order[start:start + config.batch_size]
        if chunk.shape[0] < 2:
            continue
        instances = []
        for i in chunk:
            mask = data.mask_for(i) if masked else ObservationMask(ids)
            instances.append(encode(
                state.encoders,
                {m: data.features[m][i] for m in mask.ids}, mask))
        if warmup_mask_rng is not None:
            gen_instances = []
            for obs in instances:
                dropped = ids[int(warmup_mask_rng.integers(0, len(ids)))]
                kept = tuple(m for m in ids if m != dropped)
                gen_instances.append(lm.ObservedInstance(
                    {m: obs.embeddings[m] for m in kept},
                    ObservationMask(kept)))
        else:
            gen_instances = instances
        try:
            # imputation reuses the posteriors inferred before the update,
            # matching the batch flow (infer, update, impute); in the
            # warm-up phase they are never consumed
            state.params, posts = _generative_batch_update(
                state.params, gen_instances, state.stats)
        except ConditioningError as exc:
            logger.warning("skipping batch: %s", exc)
            continue

        items = _build_batch_items(chunk, instances, posts, state.params,
                                   data, ids, imputation)
        loss_value, n_used, state.head = _loss_step(
            items, state.encoders, state.head, config, state.batch_counter)
        state.batch_counter += 1
        if n_used:
            epoch_loss += loss_value * n_used
            epoch_count += n_used
        state.skipped += len(instances) - n_used
    return epoch_loss / epoch_count if epoch_count else 0.0


@dataclass
class _BatchItem:
    stack: np.ndarray        # (d, width) unit columns
    slot_ids: tuple          # modality id per column
    trainable: tuple         # column receives encoder gradient
    raw: dict                # modality id -> raw feature row
    observed_slots: tuple    # column indices of observed modalities


def _build_batch_items(chunk, instances, posts, params, train_data, ids,
                       imputation_enabled):
    """Per-instance stacks with gradient bookkeeping: full slot order with
    imputed columns held constant, or observed-only stacks for the
    imputation-disabled ablation."""
    items = []
    for i_global, obs, post in zip(chunk, instances, posts):
        raw = {m: train_data.features[m][i_global] for m in obs.mask.ids}
        if imputation_enabled:
            cols, trainable, observed_slots = [], [], []
            ok = True
            for j, m in enumerate(ids):
                if m in obs.mask:
                    cols.append(obs.embeddings[m])
                    trainable.append(True)
                    observed_slots.append(j)
                else:
                    guess = lm.impute(params, post, m)
                    norm = np.linalg.norm(guess)
                    if norm == 0.0 or not np.isfinite(norm):
                        ok = False
                        break
                    cols.append(guess / norm)
                    trainable.append(False)
            if not ok:
                continue
            items.append(_BatchItem(np.column_stack(cols), tuple(ids),
                                    tuple(trainable), raw,
                                    tuple(observed_slots)))
        else:
            observed_ids = tuple(m for m in ids if m in obs.mask)
            if len(observed_ids) < 2:
                continue
            items.append(_BatchItem(
                np.column_stack([obs.embeddings[m] for m in observed_ids]),
                observed_ids, (True,) * len(observed_ids), raw,
                tuple(range(len(observed_ids)))))
    return items


def _loss_step(items, encoders, head, config, batch_seed):
    """Gradient step on the encoders (and head) from one batch; stacks are
    grouped by width so the batch-wide terms see matching shapes."""
    if not items:
        return 0.0, 0, head
    grad_acc = {m: np.zeros_like(encoders[m].projection) for m in encoders}
    total_loss = 0.0
    total_n = 0
    head_step = None
    for width in sorted({item.stack.shape[1] for item in items}):
        group = [item for item in items if item.stack.shape[1] == width]
        mats = [item.stack for item in group]
        masks = [item.observed_slots for item in group] if head is not None \
            else None
        try:
            breakdown = alignloss.rep_loss(
                mats, tau=config.tau, tau_prime=config.tau_prime,
                alpha=config.alpha, head=head, masks=masks, seed=batch_seed)
            out = alignloss.rep_loss_grad(
                mats, tau=config.tau, tau_prime=config.tau_prime,
                alpha=config.alpha, head=head, masks=masks, seed=batch_seed,
                with_head_grad=head is not None)
        except (DegenerateSpectrumError, InsufficientNegativesError) as exc:
            logger.warning("skipping %d-instance stack group: %s",
                           len(group), exc)
            continue
        if head is not None:
            grads, hg = out
            if hg is not None:
                head_step = hg if head_step is None else (
                    head_step[0] + hg[0], head_step[1] + hg[1])
        else:
            grads = out
        total_loss += breakdown.total * len(group)
        total_n += len(group)
        for item, grad in zip(group, grads):
            for j, m in enumerate(item.slot_ids):
                if not item.trainable[j]:
                    continue
                z = item.stack[:, j]
                g = grad[:, j]
                x = item.raw[m]
                norm = float(np.linalg.norm(encoders[m].projection @ x))
                d_raw = (g - float(g @ z) * z) / norm
                grad_acc[m] += np.outer(d_raw, x)
    if total_n == 0:
        return 0.0, 0, head
    lr = config.learning_rate
    for m, acc in grad_acc.items():
        if np.any(acc):
            encoders[m] = LinearEncoder(encoders[m].projection - lr * acc)
    if head is not None and head_step is not None:
        head = MatchingHead(head.weights - lr * head_step[0],
                            head.bias - lr * head_step[1])
    return total_loss / total_n, total_n, head


def _evaluate(encoders, params, eval_data):
    ids = eval_data.modality_ids
    embedded = {m: encoders[m].encode_batch(eval_data.features[m])
                for m in ids}
    full_mask = ObservationMask(ids)
    instances = [lm.ObservedInstance({m: embedded[m][i] for m in ids},
                                     full_mask)
                 for i in range(eval_data.n)]
    loglik = float(np.mean(lm.grouped_loglik(params, instances)))
    recall = _mean_pairwise_recall(embedded, (1, 5, 10))
    return {"loglik": loglik, "recall": recall}


def recall_at_k(queries, gallery, pairing, k):
    """Fraction of queries whose true mate ranks in the top k by inner
    product; ties resolve toward lower gallery indices."""
    queries = np.asarray(queries, dtype=float)
    gallery = np.asarray(gallery, dtype=float)
    pairing = np.asarray(pairing, dtype=int)
    if queries.shape[0] != pairing.shape[0]:
        raise InvalidInputError("one ground-truth mate per query required")
    if k < 1 or k > gallery.shape[0]:
        raise InvalidKError(
            f"k must be in [1, {gallery.shape[0]}], got {k}")
    scores = queries @ gallery.T
    mate_scores = scores[np.arange(queries.shape[0]), pairing]
    better = (scores > mate_scores[:, None]).sum(axis=1)
    col = np.arange(gallery.shape[0])
    earlier_tie = ((scores == mate_scores[:, None])
                   & (col[None, :] < pairing[:, None])).sum(axis=1)
    ranks = better + earlier_tie
    return float(np.mean(ranks < k))
