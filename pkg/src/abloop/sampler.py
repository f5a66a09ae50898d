"""Reverse-process generation: full sampling, partial-noise optimization,
and oracle-guided product-of-experts sampling.

Guidance reweights only the residue-type distributions, per position and
per step: the diffusion probability of residue r at position j is
multiplied by exp(f)^gamma where f scores the current sequence with
position j mutated to r. Positions and orientations are sampled from the
unmodified reverse kernels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constants import ALPHABET, CDR_REGIONS, N_TYPES
from .denoiser import Denoiser, DenoiserOutput, forward_many
from .diffusion import (
    NoiseSchedule,
    NoisedComplex,
    apply_mask_state,
    noise_complex,
    sample_categorical,
)
from .errors import EmptyMask, LengthMismatch, OracleFailure
from .so3 import sample_igso3_many
from .structio import Complex, save_complex, load_complex

_FORWARD_CHUNK = 64
_PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class SampleConfig:
    t_noise: int = 8
    mask_cdrs: tuple = CDR_REGIONS
    num_samples: int = 100
    max_cdr_edits: int = 4
    gamma: float = 0.0
    seed: int = 0

    def digest(self) -> str:
        payload = json.dumps({
            "t_noise": self.t_noise, "mask_cdrs": list(self.mask_cdrs),
            "num_samples": self.num_samples,
            "max_cdr_edits": self.max_cdr_edits,
            "gamma": self.gamma, "seed": self.seed,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class DesignCandidate:
    complex: Complex
    sequence: str            # residue types over the mask positions
    edit_distance: int       # Hamming distance to the seed over the mask
    provenance: tuple        # (seed id, config hash, sample index)

    @property
    def full_sequence(self) -> str:
        return self.complex.antibody_sequence


def edit_distance(a: str, b: str, mask_positions) -> int:
    """Hamming distance restricted to the mask positions."""
    if len(a) != len(b):
        raise LengthMismatch(f"length {len(a)} vs {len(b)}")
    return sum(1 for p in mask_positions if a[p] != b[p])


def mask_positions_in_antibody(c: Complex) -> list[int]:
    """Positions of the mask residues within the antibody sequence."""
    ab = c.antibody_indices.tolist()
    where = {storage: pos for pos, storage in enumerate(ab)}
    return [where[int(j)] for j in c.mask_indices]


class CachedOracle:
    """Memoizes oracle scores by exact sequence; insert-if-absent under
    the interpreter lock, so concurrent readers are safe."""

    def __init__(self, oracle):
        self.oracle = oracle
        self._cache: dict[str, float] = {}
        self.hits = 0
        self.misses = 0

    @property
    def underlying_calls(self) -> int:
        return self.misses

    def score(self, sequence: str) -> float:
        cached = self._cache.get(sequence)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        value = float(self.oracle.score(sequence))
        self._cache[sequence] = value
        return value


def cached_oracle(oracle) -> CachedOracle:
    return oracle if isinstance(oracle, CachedOracle) else CachedOracle(oracle)


def _guided_type_probs(probs: np.ndarray, base_seq: list[str], ab_pos: int,
                       oracle, gamma: float, storage_index: int) -> np.ndarray:
    """Per-position product-of-experts reweighting in log space."""
    scores = np.empty(N_TYPES)
    original = base_seq[ab_pos]
    for r in range(N_TYPES):
        base_seq[ab_pos] = ALPHABET[r]
        try:
            scores[r] = oracle.score("".join(base_seq))
        except Exception as exc:
            base_seq[ab_pos] = original
            raise OracleFailure(
                f"oracle failed at residue {storage_index} type {ALPHABET[r]}"
            ) from exc
    base_seq[ab_pos] = original
    logits = np.log(np.clip(probs, _PROB_FLOOR, None)) + gamma * scores
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def sample_from_output(noised: NoisedComplex, out: DenoiserOutput,
                       sched: NoiseSchedule, rng: np.random.Generator,
                       guidance=None) -> NoisedComplex:
    """Draw the t-1 state given the network outputs at state t.

    At t = 1 the positions and orientations take the predicted means with
    no injected noise.
    """
    t = noised.t
    c = noised.complex
    mask = c.mask_indices
    beta = sched.beta_at(t)

    if guidance is not None:
        oracle, gamma = guidance
        ab_positions = mask_positions_in_antibody(c)
        base_seq = list(c.antibody_sequence)

    types = np.empty(len(mask), dtype=int)
    for k, j in enumerate(mask):
        probs = out.type_probs[k]
        if guidance is not None:
            probs = _guided_type_probs(probs, base_seq, ab_positions[k],
                                       oracle, gamma, int(j))
        types[k] = sample_categorical(probs, rng)

    if t > 1:
        z = rng.standard_normal((len(mask), 3))
        pos = out.pos_mean + noised.whitening.scale * np.sqrt(beta) * z
        orients = sample_igso3_many(out.orient_pred, beta, rng)
    else:
        pos = out.pos_mean.copy()
        orients = out.orient_pred.copy()
    return noised.with_complex(apply_mask_state(c, types, pos, orients), t - 1)


def denoise_step(model: Denoiser, noised: NoisedComplex, sched: NoiseSchedule,
                 rng: np.random.Generator, guidance=None) -> NoisedComplex:
    """One reverse step t -> t-1 for a single complex."""
    if noised.t < 1:
        raise EmptyMask(f"cannot denoise below t=0 (t={noised.t})")
    out = forward_many(model, [noised])[0]
    return sample_from_output(noised, out, sched, rng, guidance)


def generate(model: Denoiser, seed_complex: Complex, sched: NoiseSchedule,
             cfg: SampleConfig, guidance_oracle=None,
             seed_id: str = "seed") -> list[DesignCandidate]:
    """Noise-then-denoise optimization around a seed complex.

    Each sample gets its own random stream; the forward passes are batched
    across samples. Candidates beyond the edit cap are dropped and exact
    duplicate sequences keep their first occurrence.
    """
    c = seed_complex.with_mask(cfg.mask_cdrs)
    if len(c.mask_indices) == 0:
        raise EmptyMask("mask selector produced an empty mask")
    guidance = None
    if guidance_oracle is not None and cfg.gamma > 0.0:
        guidance = (cached_oracle(guidance_oracle), cfg.gamma)

    streams = [np.random.Generator(np.random.PCG64(s))
               for s in np.random.SeedSequence(cfg.seed).spawn(cfg.num_samples)]
    states = [noise_complex(c, cfg.t_noise, sched, rng)
              for rng in streams]
    for t in range(cfg.t_noise, 0, -1):
        outputs = []
        for lo in range(0, len(states), _FORWARD_CHUNK):
            outputs.extend(forward_many(model, states[lo:lo + _FORWARD_CHUNK]))
        states = [
            sample_from_output(nc, out, sched, streams[i], guidance)
            for i, (nc, out) in enumerate(zip(states, outputs))]

    config_hash = cfg.digest()
    seed_mask_seq = c.mask_sequence
    candidates = []
    seen = set()
    for i, nc in enumerate(states):
        mask_seq = nc.complex.mask_sequence
        edits = sum(1 for a, b in zip(mask_seq, seed_mask_seq) if a != b)
        if edits > cfg.max_cdr_edits:
            continue
        if mask_seq in seen:
            continue
        seen.add(mask_seq)
        candidates.append(DesignCandidate(
            complex=nc.complex, sequence=mask_seq, edit_distance=edits,
            provenance=(seed_id, config_hash, i)))
    return candidates


# ---------------------------------------------------------------------------
# Candidate persistence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadedCandidate:
    """Candidate reconstituted from a listing; the complex is optional."""

    full_sequence: str
    sequence: str
    edit_distance: int
    provenance: tuple
    complex: Complex | None = None


def save_candidates(candidates: list, out_dir,
                    write_complexes: bool = True) -> Path:
    """Line-delimited candidate records, optionally with one complex file
    each (provenance, sequences, edit distance, complex reference)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    listing = out_dir / "candidates.jsonl"
    with listing.open("w") as fh:
        for k, cand in enumerate(candidates):
            ref = None
            if write_complexes and getattr(cand, "complex", None) is not None:
                ref = f"complexes/candidate_{k:05d}.txt"
                (out_dir / "complexes").mkdir(exist_ok=True)
                save_complex(cand.complex, out_dir / ref)
            fh.write(json.dumps({
                "seed_id": cand.provenance[0],
                "config_hash": cand.provenance[1],
                "sample_index": cand.provenance[2],
                "full_sequence": cand.full_sequence,
                "sequence": cand.sequence,
                "edit_distance": cand.edit_distance,
                "complex_file": ref,
            }, sort_keys=True) + "\n")
    return listing


def load_candidates(path) -> list[LoadedCandidate]:
    """Read a candidate listing written by save_candidates; path may be
    the directory or the candidates.jsonl file itself."""
    path = Path(path)
    if path.is_dir():
        path = path / "candidates.jsonl"
    base = path.parent
    candidates = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        cplx = load_complex(base / d["complex_file"]) if d["complex_file"] else None
        candidates.append(LoadedCandidate(
            full_sequence=d["full_sequence"], sequence=d["sequence"],
            edit_distance=d["edit_distance"],
            provenance=(d["seed_id"], d["config_hash"], d["sample_index"]),
            complex=cplx))
    return candidates
