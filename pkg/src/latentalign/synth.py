"""Synthetic multimodal worlds and desk-scale experiments over them.

A world draws ground-truth generative parameters (orthonormal loadings at a
chosen signal strength), shared latents, true per-modality embeddings, and
raw features that linear encoders can learn to project.  Everything is
regenerable bit-exactly from its seed.  The experiment helpers measure
imputation error against a random-unit-vector baseline and anchor shift
before/after calibration, mirroring the qualitative gaps those comparisons
are expected to show.
"""

import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from latentalign import anchor as anchorlib
from latentalign import latentmodel as lm
from latentalign.errors import (
    DegenerateSpectrumError,
    InvalidInputError,
    InvalidSpecError,
)
from latentalign.seeding import stream
from latentalign.spectral import EmbeddingStack, ObservationMask

DEFAULT_MODALITY_IDS = ("vision", "audio", "text", "subtitle")
DEFAULT_RAW_DIM = 32
DEFAULT_RAW_NOISE = 0.1
DEFAULT_OFFSET_NORM = 0.5
SIGMA_FLOOR = 1e-9


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class SynthWorld:
    """Ground truth for experiments: generating parameters, latents, true
    embeddings, and learnable raw features, all keyed to one seed."""

    seed: int
    latent_dim: int
    embed_dim: int
    modality_ids: tuple
    n: int
    noise_std: MappingProxyType
    signal: float
    offset_norm: float
    raw_dim: int
    raw_noise: MappingProxyType
    split_fraction: float
    raw_rank: MappingProxyType
    params: lm.GenerativeParams
    latents: np.ndarray
    embeddings: MappingProxyType
    features: MappingProxyType
    raw_maps: MappingProxyType

    @property
    def train_indices(self):
        return np.arange(0, int(self.split_fraction * self.n))

    @property
    def eval_indices(self):
        return np.arange(int(self.split_fraction * self.n), self.n)

    def observed_instance(self, index, mask):
        return lm.ObservedInstance(
            {m: self.embeddings[m][index] for m in mask.ids}, mask)

    def instances(self, indices, masks):
        return [self.observed_instance(i, mask)
                for i, mask in zip(indices, masks)]

    def unit_stack(self, index):
        """True embeddings of one instance, columns normalized."""
        mat = np.column_stack([self.embeddings[m][index]
                               for m in self.modality_ids])
        return EmbeddingStack.normalized(mat, self.modality_ids)

    def manifest(self):
        return {
            "seed": self.seed,
            "latent_dim": self.latent_dim,
            "embed_dim": self.embed_dim,
            "modality_ids": list(self.modality_ids),
            "n": self.n,
            "noise_std": {m: self.noise_std[m] for m in self.modality_ids},
            "signal": self.signal,
            "offset_norm": self.offset_norm,
            "raw_dim": self.raw_dim,
            "raw_noise": {m: self.raw_noise[m] for m in self.modality_ids},
            "split_fraction": self.split_fraction,
            "raw_rank": {m: self.raw_rank[m] for m in self.modality_ids},
        }


def make_world(latent_dim=4, embed_dim=16, modality_count=4, n=5000,
               noise_std=0.05, seed=0, modality_ids=None, signal=None,
               offset_norm=DEFAULT_OFFSET_NORM, raw_dim=DEFAULT_RAW_DIM,
               raw_noise=DEFAULT_RAW_NOISE, split_fraction=0.8,
               raw_rank=None):
    """Draw a world.  Defaults give the desk-scale setup: r=4, d=16, four
    modalities, N=5000, 80/20 split.

    Loadings are orthonormal columns scaled by ``signal``; by default the
    signal is chosen so the expected squared embedding norm is 1, which
    puts the random-unit-vector imputation baseline near 2.

    ``raw_rank`` optionally limits how many leading latent coordinates a
    modality's raw features expose ({id: rank}); a rank-starved modality is
    a lossy bridge, so aligning others through it cannot recover the full
    latent.
    """
    if latent_dim > embed_dim:
        raise InvalidSpecError(
            f"latent_dim {latent_dim} exceeds embed_dim {embed_dim}")
    if modality_ids is None:
        if modality_count <= len(DEFAULT_MODALITY_IDS):
            modality_ids = DEFAULT_MODALITY_IDS[:modality_count]
        else:
            modality_ids = DEFAULT_MODALITY_IDS + tuple(
                f"m{i}" for i in range(len(DEFAULT_MODALITY_IDS),
                                       modality_count))
    modality_ids = tuple(modality_ids)
    k = len(modality_ids)
    if k < 2:
        raise InvalidSpecError("a world needs at least 2 modalities")
    if n < 10:
        raise InvalidSpecError("a world needs at least 10 instances")
    if np.isscalar(noise_std):
        noise = {m: float(noise_std) for m in modality_ids}
    else:
        noise = {m: float(s) for m, s in zip(modality_ids, noise_std)}
        if len(noise) != k:
            raise InvalidSpecError("one noise level per modality required")
    if np.isscalar(raw_noise):
        raw_noise_map = {m: float(raw_noise) for m in modality_ids}
    else:
        raw_noise_map = {m: float(raw_noise.get(m, DEFAULT_RAW_NOISE))
                         for m in modality_ids}
    mean_noise_var = float(np.mean([s ** 2 for s in noise.values()]))
    if signal is None:
        residual = 1.0 - offset_norm ** 2 - embed_dim * mean_noise_var
        signal = math.sqrt(max(residual, 0.04 * latent_dim) / latent_dim)

    loadings, offsets, stored_noise = {}, {}, {}
    for m in modality_ids:
        rng = stream(seed, f"synth.params.{m}")
        loadings[m] = signal * _orthonormal_columns(rng, embed_dim, latent_dim)
        direction = rng.standard_normal(embed_dim)
        offsets[m] = offset_norm * direction / np.linalg.norm(direction)
        stored_noise[m] = max(noise[m], SIGMA_FLOOR)
    params = lm.GenerativeParams(latent_dim, modality_ids, loadings, offsets,
                                 stored_noise)

    ranks = {m: latent_dim for m in modality_ids}
    if raw_rank:
        for m, rank in raw_rank.items():
            if m not in ranks or not 1 <= int(rank) <= latent_dim:
                raise InvalidSpecError(
                    f"raw_rank[{m!r}] must name a modality and lie in "
                    f"[1, {latent_dim}]")
            ranks[m] = int(rank)

    latents = stream(seed, "synth.latents").standard_normal((n, latent_dim))
    embeddings, features, raw_maps = {}, {}, {}
    for m in modality_ids:
        eps = stream(seed, f"synth.noise.{m}").standard_normal((n, embed_dim))
        embeddings[m] = latents @ loadings[m].T + offsets[m] + noise[m] * eps
        embeddings[m].flags.writeable = False
        raw_maps[m] = _orthonormal_columns(
            stream(seed, f"synth.rawmap.{m}"), raw_dim, latent_dim)
        raw_maps[m][:, ranks[m]:] = 0.0
        eta = stream(seed, f"synth.rawnoise.{m}").standard_normal((n, raw_dim))
        features[m] = latents @ raw_maps[m].T + raw_noise_map[m] * eta
        features[m].flags.writeable = False
        raw_maps[m].flags.writeable = False
    latents.flags.writeable = False

    return SynthWorld(
        seed=int(seed), latent_dim=latent_dim, embed_dim=embed_dim,
        modality_ids=modality_ids, n=n,
        noise_std=MappingProxyType(noise), signal=float(signal),
        offset_norm=float(offset_norm), raw_dim=raw_dim,
        raw_noise=MappingProxyType(raw_noise_map),
        split_fraction=float(split_fraction),
        raw_rank=MappingProxyType(ranks),
        params=params, latents=latents,
        embeddings=MappingProxyType(embeddings),
        features=MappingProxyType(features),
        raw_maps=MappingProxyType(raw_maps))


def world_from_manifest(doc):
    return make_world(
        latent_dim=doc["latent_dim"], embed_dim=doc["embed_dim"],
        modality_count=len(doc["modality_ids"]), n=doc["n"],
        noise_std=[doc["noise_std"][m] for m in doc["modality_ids"]],
        seed=doc["seed"], modality_ids=tuple(doc["modality_ids"]),
        signal=doc["signal"], offset_norm=doc["offset_norm"],
        raw_dim=doc["raw_dim"],
        raw_noise=(doc["raw_noise"] if np.isscalar(doc["raw_noise"])
                   else dict(doc["raw_noise"])),
        split_fraction=doc["split_fraction"],
        raw_rank=doc.get("raw_rank"))


@dataclass(frozen=True)
class MaskPattern:
    """Named observation-mask policy, deterministic given a seed.

    ``full`` observes everything; ``vt``/``at`` observe the vision-text or
    audio-text pair; ``mix`` assigns an exact fraction of instances to vt
    and the rest to at; ``random`` drops each modality independently while
    keeping at least ``min_observed``.
    """

    policy: str
    fraction: float = 0.5
    drop_prob: float = 0.3
    min_observed: int = 1

    _PAIRS = {"vt": ("vision", "text"), "at": ("audio", "text")}

    def __post_init__(self):
        if self.policy not in ("full", "vt", "at", "mix", "random"):
            raise InvalidSpecError(f"unknown mask policy {self.policy!r}")
        if self.policy == "mix" and not 0.0 <= self.fraction <= 1.0:
            raise InvalidSpecError("mix fraction must be in [0, 1]")
        if self.policy == "random" and not 0.0 <= self.drop_prob < 1.0:
            raise InvalidSpecError("drop probability must be in [0, 1)")
        if self.min_observed < 1:
            raise InvalidSpecError("at least one modality must stay observed")

    @classmethod
    def parse(cls, text):
        """Parse ``full``, ``vt``, ``at``, ``mix:<p>``, or
        ``random:<q>[:<min_obs>]``."""
        parts = str(text).split(":")
        name = parts[0]
        if name in ("full", "vt", "at"):
            return cls(policy=name)
        if name == "mix":
            return cls(policy="mix", fraction=float(parts[1]) if len(parts) > 1
                       else 0.5)
        if name == "random":
            q = float(parts[1]) if len(parts) > 1 else 0.3
            min_obs = int(parts[2]) if len(parts) > 2 else 1
            return cls(policy="random", drop_prob=q, min_observed=min_obs)
        raise InvalidSpecError(f"unknown mask policy {text!r}")

    def spec_string(self):
        if self.policy == "mix":
            return f"mix:{self.fraction:g}"
        if self.policy == "random":
            return f"random:{self.drop_prob:g}:{self.min_observed}"
        return self.policy

    def _pair_mask(self, which, modality_ids):
        pair = self._PAIRS[which]
        missing = [m for m in pair if m not in modality_ids]
        if missing:
            raise InvalidSpecError(
                f"policy {which!r} needs modalities {pair}, world has "
                f"{modality_ids}")
        return ObservationMask(tuple(m for m in modality_ids if m in pair))

    def generate(self, modality_ids, n, seed):
        """One ObservationMask per instance."""
        modality_ids = tuple(modality_ids)
        if self.policy == "full":
            return [ObservationMask(modality_ids)] * n
        if self.policy in ("vt", "at"):
            return [self._pair_mask(self.policy, modality_ids)] * n
        if self.policy == "mix":
            vt = self._pair_mask("vt", modality_ids)
            at = self._pair_mask("at", modality_ids)
            rng = stream(seed, "synth.masks.mix")
            count = int(round(self.fraction * n))
            chosen = np.zeros(n, dtype=bool)
            chosen[rng.permutation(n)[:count]] = True
            return [vt if flag else at for flag in chosen]
        rng = stream(seed, "synth.masks.random")
        masks = []
        for _ in range(n):
            while True:
                keep = tuple(m for m in modality_ids
                             if rng.random() >= self.drop_prob)
                if len(keep) >= self.min_observed:
                    masks.append(ObservationMask(keep))
                    break
        return masks


def imputation_mse(world, params, pattern, indices=None, seed=None):
    """Mean squared error of conditional-mean imputation per modality,
    next to a random-unit-vector baseline against the same targets.

    Modalities the pattern never masks are absent from the result.
    """
    if indices is None:
        indices = world.eval_indices
    if seed is None:
        seed = world.seed
    masks = pattern.generate(world.modality_ids, len(indices), seed)
    data = world.instances(indices, masks)
    posts = lm.grouped_posteriors(params, data)
    baseline_rng = stream(seed, "synth.baseline")
    errors = {m: [] for m in world.modality_ids}
    baselines = {m: [] for m in world.modality_ids}
    for idx, obs, post in zip(indices, data, posts):
        for m in obs.mask.complement(world.modality_ids):
            target = world.embeddings[m][idx]
            guess = lm.impute(params, post, m)
            errors[m].append(float(np.sum((guess - target) ** 2)))
            rand = baseline_rng.standard_normal(world.embed_dim)
            rand /= np.linalg.norm(rand)
            baselines[m].append(float(np.sum((rand - target) ** 2)))
    return {
        "per_modality": {m: float(np.mean(v)) for m, v in errors.items() if v},
        "random_baseline": {m: float(np.mean(v))
                            for m, v in baselines.items() if v},
    }


def shift_experiment(world, params, pattern, trials, seed=None):
    """Anchor shift before vs. after calibration over sampled instances.

    Per trial: measure the shift of the masked stack, impute the missing
    modalities from the observed ones, and compare the calibrated shift.
    Degenerate-spectrum instances are skipped and counted.
    """
    if len(world.modality_ids) < 3:
        raise InvalidSpecError(
            "anchor-shift experiments need at least 3 modalities")
    if seed is None:
        seed = world.seed
    rng = stream(seed, "synth.shift_trials")
    pool = world.eval_indices
    chosen = pool[rng.integers(0, len(pool), size=trials)]
    masks = pattern.generate(world.modality_ids, trials, seed)
    deltas, deltas_cal, improved = [], [], []
    skipped = 0
    for idx, mask in zip(chosen, masks):
        missing = mask.complement(world.modality_ids)
        if not missing:
            skipped += 1
            continue
        stack = world.unit_stack(idx)
        obs = world.observed_instance(idx, mask)
        post = lm.posterior_infer(params, obs)
        imputed = {m: lm.impute(params, post, m) for m in missing}
        try:
            delta = anchorlib.anchor_shift(stack, mask)
            delta_cal, better = anchorlib.calibrated_shift(stack, mask, imputed)
        except DegenerateSpectrumError:
            skipped += 1
            continue
        deltas.append(delta)
        deltas_cal.append(delta_cal)
        improved.append(better)
    if not deltas:
        raise InvalidInputError("every trial was skipped as degenerate")
    return {
        "mean_delta_missing": float(np.mean(deltas)),
        "mean_delta_calibrated": float(np.mean(deltas_cal)),
        "improved_fraction": float(np.mean(improved)),
        "trials": len(deltas),
        "skipped": skipped,
    }
