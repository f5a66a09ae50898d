"""The iterative design loop: structure-prediction surrogate, generation,
filtering, ranking, simulated assays, oracle retraining, and the
structural-noise ablation runner.

Rounds are strictly sequential and fully deterministic for a given
campaign seed. The record store is append-only and deduplicated by
sequence: a sequence is assayed at most once per campaign.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .constants import CHARGE
from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .errors import AlignmentFailure, DegenerateConfiguration, InsufficientData, \
    InsufficientPairs, LengthMismatch
from .oracles import (
    AssayRecord,
    EnsembleOracle,
    RidgeOracle,
    SyntheticLandscape,
    assay,
    rank_candidates,
    train_ensemble,
    train_ridge,
)
from .sampler import (
    DesignCandidate,
    SampleConfig,
    generate,
    mask_positions_in_antibody,
    save_candidates,
)
from .so3 import rotation_from_axis_angle
from .structio import Complex, frames_from_ca_trace, subset_complex

PREDICTOR_MODES = ("groundTruth", "noisyPredicted", "rotatedPose", "antigenRemoved")


@dataclass(frozen=True)
class PredictorConfig:
    mode: str = "groundTruth"
    sigma_pred: float = 0.5   # angstroms, noisyPredicted
    angle_deg: float = 25.0   # rotatedPose


@dataclass(frozen=True)
class FilterConfig:
    charge_min: float | None = None
    charge_max: float | None = None
    forbidden_motifs: tuple = ()
    no_unpaired_cysteine: bool = False

    @property
    def is_empty(self) -> bool:
        return (self.charge_min is None and self.charge_max is None
                and not self.forbidden_motifs and not self.no_unpaired_cysteine)


@dataclass(frozen=True)
class CampaignConfig:
    num_rounds: int = 3
    designs_per_round: int = 24
    seeds_per_round: int = 2
    sample: SampleConfig = field(default_factory=SampleConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    guided: bool = False
    gamma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.designs_per_round < self.seeds_per_round:
            raise ValueError("designs_per_round must be >= seeds_per_round")
        if self.predictor.mode not in PREDICTOR_MODES:
            raise ValueError(f"unknown predictor mode {self.predictor.mode!r}")


@dataclass(frozen=True)
class RoundResult:
    round_id: int
    seeds: tuple
    n_generated: int
    n_filtered: int
    n_ranked: int
    n_assayed: int
    best_so_far: float
    oracle_hash: str

    def to_line(self) -> str:
        return json.dumps({
            "round_id": self.round_id, "seeds": list(self.seeds),
            "n_generated": self.n_generated, "n_filtered": self.n_filtered,
            "n_ranked": self.n_ranked, "n_assayed": self.n_assayed,
            "best_so_far": self.best_so_far, "oracle_hash": self.oracle_hash,
        }, sort_keys=True)


@dataclass(frozen=True)
class CampaignState:
    records: tuple
    current_seeds: tuple     # antibody sequences
    ridge: RidgeOracle | None = None
    ensemble: EnsembleOracle | None = None

    @property
    def best_measured(self) -> float:
        vals = [r.measured_value for r in self.records
                if r.synthesized and r.measured_value is not None]
        return max(vals) if vals else float("-inf")


@dataclass(frozen=True)
class BaselineCandidate:
    full_sequence: str
    sequence: str
    edit_distance: int
    provenance: tuple


# ---------------------------------------------------------------------------
# Structure prediction surrogate
# ---------------------------------------------------------------------------

def _kabsch_transform(mobile_pts: np.ndarray, ref_pts: np.ndarray):
    a_mean = mobile_pts.mean(axis=0)
    b_mean = ref_pts.mean(axis=0)
    ac = mobile_pts - a_mean
    bc = ref_pts - b_mean
    if np.linalg.svd(ac, compute_uv=False)[1] < 1e-8:
        raise DegenerateConfiguration("alignment points are collinear")
    u, _, vt = np.linalg.svd(ac.T @ bc)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    shift = b_mean - rot @ a_mean
    return rot, shift


def predict_structure(seed_sequence: str, starting: Complex, mode: str,
                      rng: np.random.Generator | None = None,
                      sigma_pred: float = 0.5,
                      angle_deg: float = 25.0) -> Complex:
    """Surrogate for folding a seed sequence and restoring the binding pose.

    groundTruth keeps the starting backbone; noisyPredicted perturbs the
    antibody CA trace, rebuilds frames from it, and rigidly aligns the
    framework back onto the starting antibody; rotatedPose spoils the pose
    by a rigid rotation about the antibody centroid; antigenRemoved drops
    the antigen entirely.
    """
    ab_idx = starting.antibody_indices
    if len(seed_sequence) != len(ab_idx):
        raise LengthMismatch(
            f"seed sequence length {len(seed_sequence)} != antibody size "
            f"{len(ab_idx)}")
    from .constants import AA_TO_INDEX
    new_types = starting.res_types.copy()
    for pos, storage in enumerate(ab_idx):
        new_types[storage] = AA_TO_INDEX[seed_sequence[pos]]
    base = starting.with_arrays(res_types=new_types)

    if mode == "groundTruth":
        return base
    if mode == "antigenRemoved":
        return subset_complex(base, ab_idx)
    if rng is None:
        rng = np.random.default_rng(0)

    if mode == "noisyPredicted":
        pos = base.ca_pos.copy()
        orients = base.orients.copy()
        pos[ab_idx] += sigma_pred * rng.standard_normal((len(ab_idx), 3))
        # rebuild antibody frames from the perturbed trace, chain by chain
        chains = np.array(base.chain_ids)
        for cid in sorted(set(chains[ab_idx])):
            rows = ab_idx[chains[ab_idx] == cid]
            orients[rows] = frames_from_ca_trace(pos[rows])
        fw = np.array([i for i in ab_idx
                       if i not in set(base.mask_indices.tolist())], dtype=int)
        if len(fw) < 3:
            raise AlignmentFailure("fewer than 3 framework residues to align")
        try:
            rot, shift = _kabsch_transform(pos[fw], starting.ca_pos[fw])
        except (DegenerateConfiguration, InsufficientPairs) as exc:
            raise AlignmentFailure(str(exc)) from exc
        pos[ab_idx] = pos[ab_idx] @ rot.T + shift
        orients[ab_idx] = np.einsum("ij,njk->nik", rot, orients[ab_idx])
        return base.with_arrays(ca_pos=pos, orients=orients)

    if mode == "rotatedPose":
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        rot = rotation_from_axis_angle(axis, np.deg2rad(angle_deg))
        centroid = base.ca_pos[ab_idx].mean(axis=0)
        pos = base.ca_pos.copy()
        orients = base.orients.copy()
        pos[ab_idx] = (pos[ab_idx] - centroid) @ rot.T + centroid
        orients[ab_idx] = np.einsum("ij,njk->nik", rot, orients[ab_idx])
        return base.with_arrays(ca_pos=pos, orients=orients)

    raise ValueError(f"unknown predictor mode {mode!r}")


# ---------------------------------------------------------------------------
# Developability filter
# ---------------------------------------------------------------------------

def developability_filter(candidates: list, filters: FilterConfig):
    """Sequence-level screens before promotion to assay.

    Net charge applies to the mask region; motif and cysteine rules scan
    the full antibody sequence. Each removed candidate is attributed to
    the first rule it violates; returns (kept, removal_counts).
    """
    counts = {"charge": 0, "motif": 0, "unpaired_cysteine": 0}
    if filters.is_empty:
        return list(candidates), counts
    kept = []
    for cand in candidates:
        charge = sum(CHARGE[aa] for aa in cand.sequence)
        if ((filters.charge_min is not None and charge < filters.charge_min)
                or (filters.charge_max is not None and charge > filters.charge_max)):
            counts["charge"] += 1
            continue
        full = cand.full_sequence
        if any(m in full for m in filters.forbidden_motifs):
            counts["motif"] += 1
            continue
        if filters.no_unpaired_cysteine and full.count("C") % 2 == 1:
            counts["unpaired_cysteine"] += 1
            continue
        kept.append(cand)
    return kept, counts


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0] % (2 ** 31))


def _retrain(records, positions, seed):
    try:
        ridge = train_ridge(list(records), positions=positions)
    except InsufficientData:
        ridge = None
    try:
        ensemble = train_ensemble(list(records), seed=seed, positions=positions)
    except InsufficientData:
        ensemble = None
    return ridge, ensemble


def _oracle_hash(oracle) -> str:
    if oracle is None:
        return "none"
    payload = json.dumps(oracle.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _select_seeds(records, k: int) -> tuple:
    ranked = sorted(
        (r for r in records if r.synthesized and r.measured_value is not None),
        key=lambda r: (-r.measured_value, r.sequence))
    seeds = []
    for r in ranked:
        if r.sequence not in seeds:
            seeds.append(r.sequence)
        if len(seeds) == k:
            break
    return tuple(seeds)


def run_round(state: CampaignState, cfg: CampaignConfig, model: Denoiser,
              sched: NoiseSchedule, starting: Complex,
              landscape: SyntheticLandscape, round_id: int):
    """One design round; returns (new_state, RoundResult, selected)."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, round_id, 77])))
    positions = mask_positions_in_antibody(starting)

    pool = []
    for s_i, seed_seq in enumerate(state.current_seeds):
        pred = predict_structure(seed_seq, starting, cfg.predictor.mode, rng,
                                 cfg.predictor.sigma_pred,
                                 cfg.predictor.angle_deg)
        sample_cfg = replace(cfg.sample,
                             seed=_derived_seed(cfg.seed, round_id, s_i),
                             gamma=cfg.gamma if cfg.guided else 0.0)
        guidance = state.ridge if (cfg.guided and state.ridge is not None) else None
        pool.extend(generate(model, pred, sched, sample_cfg,
                             guidance_oracle=guidance,
                             seed_id=f"r{round_id}s{s_i}"))
    n_generated = len(pool)

    kept, _ = developability_filter(pool, cfg.filters)
    assayed_before = {r.sequence for r in state.records}
    seen = set()
    fresh = []
    for cand in kept:
        fs = cand.full_sequence
        if fs in assayed_before or fs in seen:
            continue
        seen.add(fs)
        fresh.append(cand)
    n_filtered = len(fresh)

    if state.ensemble is not None:
        selected = rank_candidates(state.ensemble, fresh, cfg.designs_per_round)
    else:
        selected = fresh[:cfg.designs_per_round]
    n_ranked = len(selected)

    if not selected:
        # NoViableCandidates path: round is recorded, seeds carry forward
        result = RoundResult(
            round_id=round_id, seeds=state.current_seeds,
            n_generated=n_generated, n_filtered=n_filtered, n_ranked=0,
            n_assayed=0, best_so_far=state.best_measured,
            oracle_hash=_oracle_hash(state.ensemble))
        return state, result, []

    new_records = assay(landscape, [c.full_sequence for c in selected], rng,
                        round_id=round_id,
                        edit_distances=[c.edit_distance for c in selected])
    records = state.records + tuple(new_records)
    ridge, ensemble = _retrain(records, positions, _derived_seed(cfg.seed, 991))
    new_state = CampaignState(
        records=records,
        current_seeds=_select_seeds(records, cfg.seeds_per_round),
        ridge=ridge, ensemble=ensemble)
    result = RoundResult(
        round_id=round_id, seeds=state.current_seeds,
        n_generated=n_generated, n_filtered=n_filtered, n_ranked=n_ranked,
        n_assayed=sum(1 for r in new_records if r.synthesized),
        best_so_far=new_state.best_measured,
        oracle_hash=_oracle_hash(ensemble))
    return new_state, result, selected


def bootstrap_state(starting: Complex, landscape: SyntheticLandscape,
                    cfg: CampaignConfig) -> CampaignState:
    """Round-0 state: the starting antibody with its historical assay."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, 0, 77])))
    seq = starting.antibody_sequence
    rec = assay(landscape, [seq], rng, round_id=0, edit_distances=[0])[0]
    if not rec.synthesized:
        # the starting molecule exists by premise; measure it regardless
        rec = AssayRecord(sequence=seq,
                          measured_value=float(landscape.sigma_meas
                                               * rng.standard_normal()),
                          round_id=0, synthesized=True)
    return CampaignState(records=(rec,), current_seeds=(seq,))


@dataclass
class CampaignResult:
    rounds: list
    state: CampaignState
    selected_per_round: list


def run_campaign(starting: Complex, landscape: SyntheticLandscape,
                 model: Denoiser, sched: NoiseSchedule, cfg: CampaignConfig,
                 out_dir=None) -> CampaignResult:
    cfg.validate()
    state = bootstrap_state(starting, landscape, cfg)
    rounds = []
    per_round = []
    for round_id in range(1, cfg.num_rounds + 1):
        state, result, selected = run_round(
            state, cfg, model, sched, starting, landscape, round_id)
        rounds.append(result)
        per_round.append(selected)
    if out_dir is not None:
        _write_campaign_dir(Path(out_dir), cfg, state, rounds, per_round)
    return CampaignResult(rounds=rounds, state=state,
                          selected_per_round=per_round)


def _write_campaign_dir(out_dir: Path, cfg: CampaignConfig,
                        state: CampaignState, rounds, per_round) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rounds.jsonl").write_text(
        "".join(r.to_line() + "\n" for r in rounds))
    (out_dir / "assay_records.jsonl").write_text(
        "".join(r.to_line() + "\n" for r in state.records))
    with (out_dir / "best_so_far.csv").open("w") as fh:
        fh.write("round_id,best_so_far\n")
        for r in rounds:
            fh.write(f"{r.round_id},{r.best_so_far!r}\n")
    from .oracles import save_oracle, records_hash
    oracle_dir = out_dir / "oracles"
    oracle_dir.mkdir(exist_ok=True)
    data_hash = records_hash(list(state.records))
    if state.ridge is not None:
        save_oracle(state.ridge, oracle_dir / "ridge.json", data_hash)
    if state.ensemble is not None:
        save_oracle(state.ensemble, oracle_dir / "ensemble.json", data_hash)
    cand_dir = out_dir / "candidates"
    for result, selected in zip(rounds, per_round):
        if selected and isinstance(selected[0], DesignCandidate):
            save_candidates(selected,
                            cand_dir / f"round_{result.round_id:03d}")


# ---------------------------------------------------------------------------
# Random-mutation baseline
# ---------------------------------------------------------------------------

def random_mutation_baseline(seed_sequence: str, mask_positions, n: int,
                             max_cdr_edits: int,
                             rng: np.random.Generator) -> list[BaselineCandidate]:
    """Control arm: 1..max_cdr_edits uniform substitutions at uniformly
    chosen mask positions (always changing the residue)."""
    from .constants import ALPHABET
    mask_positions = list(mask_positions)
    out = []
    for i in range(n):
        seq = list(seed_sequence)
        if max_cdr_edits > 0:
            k = int(rng.integers(1, max_cdr_edits + 1))
            sites = rng.choice(len(mask_positions), size=k, replace=False)
            for s in sites:
                p = mask_positions[int(s)]
                options = [aa for aa in ALPHABET if aa != seq[p]]
                seq[p] = options[int(rng.integers(0, len(options)))]
        else:
            k = 0
        full = "".join(seq)
        mask_seq = "".join(full[p] for p in mask_positions)
        out.append(BaselineCandidate(
            full_sequence=full, sequence=mask_seq, edit_distance=int(k),
            provenance=("baseline", "", i)))
    return out


def run_baseline_campaign(starting: Complex, landscape: SyntheticLandscape,
                          cfg: CampaignConfig) -> CampaignResult:
    """Same loop and budget as run_campaign, but candidates come from
    random mutations and no oracle ranking is applied."""
    cfg.validate()
    positions = mask_positions_in_antibody(starting)
    state = bootstrap_state(starting, landscape, cfg)
    rounds = []
    per_round = []
    for round_id in range(1, cfg.num_rounds + 1):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, round_id, 77])))
        pool = []
        quota = cfg.designs_per_round * 2  # headroom for dedup losses
        for s_i, seed_seq in enumerate(state.current_seeds):
            per_seed = quota // len(state.current_seeds)
            pool.extend(random_mutation_baseline(
                seed_seq, positions, per_seed, cfg.sample.max_cdr_edits, rng))
        kept, _ = developability_filter(pool, cfg.filters)
        assayed_before = {r.sequence for r in state.records}
        seen = set()
        fresh = []
        for cand in kept:
            if cand.full_sequence in assayed_before or cand.full_sequence in seen:
                continue
            seen.add(cand.full_sequence)
            fresh.append(cand)
        selected = fresh[:cfg.designs_per_round]
        if not selected:
            rounds.append(RoundResult(
                round_id=round_id, seeds=state.current_seeds,
                n_generated=len(pool), n_filtered=len(fresh), n_ranked=0,
                n_assayed=0, best_so_far=state.best_measured,
                oracle_hash="none"))
            per_round.append([])
            continue
        new_records = assay(landscape, [c.full_sequence for c in selected],
                            rng, round_id=round_id,
                            edit_distances=[c.edit_distance for c in selected])
        records = state.records + tuple(new_records)
        state = CampaignState(
            records=records,
            current_seeds=_select_seeds(records, cfg.seeds_per_round))
        rounds.append(RoundResult(
            round_id=round_id, seeds=state.current_seeds,
            n_generated=len(pool), n_filtered=len(fresh),
            n_ranked=len(selected),
            n_assayed=sum(1 for r in new_records if r.synthesized),
            best_so_far=state.best_measured, oracle_hash="none"))
        per_round.append(selected)
    return CampaignResult(rounds=rounds, state=state,
                          selected_per_round=per_round)


# ---------------------------------------------------------------------------
# Structural-noise ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    mode: str
    n: int
    q1: float
    median: float
    q3: float


def ablation_run(starting: Complex, modes: list[str], model: Denoiser,
                 sched: NoiseSchedule, oracle, sample_cfg: SampleConfig,
                 top_k: int = 500, seed: int = 0, sigma_pred: float = 0.5,
                 angle_deg: float = 25.0):
    """Generate and rank candidates per structural-noise mode; returns
    (rows, raw score arrays keyed by mode)."""
    rows = []
    scores_by_mode = {}
    for k, mode in enumerate(modes):
        if mode not in PREDICTOR_MODES:
            raise ValueError(f"unknown predictor mode {mode!r}")
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, k])))
        pred = predict_structure(starting.antibody_sequence, starting, mode,
                                 rng, sigma_pred, angle_deg)
        cands = generate(model, pred, sched,
                         replace(sample_cfg, seed=_derived_seed(seed, k, 5)),
                         seed_id=f"ablate_{mode}")
        ranked = rank_candidates(oracle, cands, top_k) if cands else []
        scores = np.array([oracle.score(c.full_sequence) for c in ranked])
        scores_by_mode[mode] = scores
        if len(scores):
            q1, med, q3 = np.percentile(scores, [25, 50, 75])
        else:
            q1 = med = q3 = float("nan")
        rows.append(AblationRow(mode=mode, n=len(scores), q1=float(q1),
                                median=float(med), q3=float(q3)))
    return rows, scores_by_mode
