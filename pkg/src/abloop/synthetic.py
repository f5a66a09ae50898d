"""Procedural antibody-antigen complexes for desk-scale training.

Each complex is a jittered helical "antibody" chain with six designated
CDR segments and a short "antigen" helix docked against a randomly chosen
CDR window. Residue types follow a position- and contact-dependent rule,
so sequence is learnable from structure.
"""

from __future__ import annotations

import numpy as np

from .constants import AA_TO_INDEX, REGION_TO_INDEX
from .structio import Complex, frames_from_ca_trace

# (region, length) layout of the antibody chain
ANTIBODY_LAYOUT = (
    ("FW", 4), ("H1", 3), ("FW", 3), ("H2", 3), ("FW", 3), ("H3", 4),
    ("FW", 4), ("L1", 3), ("FW", 3), ("L2", 3), ("FW", 3), ("L3", 4), ("FW", 4),
)
ANTIGEN_LENGTH = 12
CONTACT_CUTOFF = 8.0

# residue-type groups drawn by the synthetic rule
GROUP_HYDROPHOBIC = "AVILMFW"
GROUP_POLAR = "STNQGY"
GROUP_CHARGED = "DEKR"

_HELIX_RADIUS = 2.3
_HELIX_RISE = 1.5
_HELIX_TURN = np.deg2rad(100.0)
_DOCK_DISTANCE = 8.5
_JITTER = 0.25


def _helix(n: int, phase: float = 0.0) -> np.ndarray:
    i = np.arange(n)
    ang = _HELIX_TURN * i + phase
    return np.column_stack([
        _HELIX_RADIUS * np.cos(ang),
        _HELIX_RADIUS * np.sin(ang),
        _HELIX_RISE * i,
    ])


def _min_cross_distance(pos_a: np.ndarray, pos_b: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(pos_a[:, None, :] - pos_b[None, :, :], axis=-1)
    return d.min(axis=1)


def _draw_type(rng: np.random.Generator, group_probs) -> int:
    groups = (GROUP_HYDROPHOBIC, GROUP_POLAR, GROUP_CHARGED)
    g = groups[int(np.searchsorted(np.cumsum(group_probs), rng.random()))]
    return AA_TO_INDEX[g[int(rng.integers(0, len(g)))]]


def _assign_types(rng, seq_index, contacts) -> np.ndarray:
    types = np.empty(len(seq_index), dtype=int)
    for i, (s, hit) in enumerate(zip(seq_index, contacts)):
        if hit:
            probs = (0.8, 0.1, 0.1)
        elif s % 3 == 0:
            probs = (0.1, 0.2, 0.7)
        else:
            probs = (0.15, 0.7, 0.15)
        types[i] = _draw_type(rng, probs)
    return types


def make_complex(rng: np.random.Generator) -> Complex:
    regions = []
    for name, length in ANTIBODY_LAYOUT:
        regions += [REGION_TO_INDEX[name]] * length
    n_ab = len(regions)
    ab_pos = _helix(n_ab) + _JITTER * rng.standard_normal((n_ab, 3))

    # dock the antigen alongside a random CDR segment
    cdr_idx = [i for i, r in enumerate(regions) if r != REGION_TO_INDEX["FW"]]
    pick = cdr_idx[int(rng.integers(0, len(cdr_idx)))]
    psi = rng.uniform(0.0, 2.0 * np.pi)
    z_center = ab_pos[pick, 2]
    ag_pos = _helix(ANTIGEN_LENGTH, phase=rng.uniform(0, 2 * np.pi))
    ag_pos = ag_pos - ag_pos.mean(axis=0)
    ag_pos += np.array([_DOCK_DISTANCE * np.cos(psi),
                        _DOCK_DISTANCE * np.sin(psi),
                        z_center])
    ag_pos += _JITTER * rng.standard_normal((ANTIGEN_LENGTH, 3))

    contacts_ab = _min_cross_distance(ab_pos, ag_pos) < CONTACT_CUTOFF
    contacts_ag = _min_cross_distance(ag_pos, ab_pos) < CONTACT_CUTOFF
    ab_seq_index = np.arange(1, n_ab + 1)
    ag_seq_index = np.arange(1, ANTIGEN_LENGTH + 1)
    types_ab = _assign_types(rng, ab_seq_index, contacts_ab)
    types_ag = _assign_types(rng, ag_seq_index, contacts_ag)

    pos = np.vstack([ab_pos, ag_pos])
    orients = np.vstack([frames_from_ca_trace(ab_pos), frames_from_ca_trace(ag_pos)])

    # random global pose so nothing can key on absolute coordinates
    from .so3 import random_rotation
    rot = random_rotation(rng)
    shift = rng.uniform(-20.0, 20.0, size=3)
    pos = pos @ rot.T + shift
    orients = np.einsum("ij,njk->nik", rot, orients)

    all_regions = np.array(regions + [REGION_TO_INDEX["AG"]] * ANTIGEN_LENGTH)
    mask = np.array([i for i, r in enumerate(regions)
                     if r != REGION_TO_INDEX["FW"]], dtype=int)
    antigen = np.arange(n_ab, n_ab + ANTIGEN_LENGTH)
    return Complex(
        res_types=np.concatenate([types_ab, types_ag]),
        ca_pos=pos,
        orients=orients,
        chain_ids=tuple(["A"] * n_ab + ["G"] * ANTIGEN_LENGTH),
        seq_index=np.concatenate([ab_seq_index, ag_seq_index]),
        regions=all_regions,
        mask_indices=mask,
        antigen_indices=antigen,
    )


def make_synthetic_dataset(n: int, seed: int) -> list[Complex]:
    """n procedural complexes, reproducible from the seed."""
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n)
    return [make_complex(np.random.Generator(np.random.PCG64(s)))
            for s in children]


def starting_complex(seed: int) -> Complex:
    """A designated synthetic complex to serve as the campaign's
    experimentally determined starting structure."""
    return make_synthetic_dataset(1, seed)[0]


def contact_flags(c: Complex, cutoff: float = CONTACT_CUTOFF) -> np.ndarray:
    """Per-residue flag: any cross-chain CA within cutoff."""
    chains = np.array(c.chain_ids)
    flags = np.zeros(c.n, dtype=bool)
    for i in range(c.n):
        other = chains != chains[i]
        if np.any(other):
            d = np.linalg.norm(c.ca_pos[other] - c.ca_pos[i], axis=1)
            flags[i] = bool(np.min(d) < cutoff)
    return flags


def residue_group(aa: str) -> int:
    """0 hydrophobic, 1 polar, 2 charged, 3 other."""
    if aa in GROUP_HYDROPHOBIC:
        return 0
    if aa in GROUP_POLAR:
        return 1
    if aa in GROUP_CHARGED:
        return 2
    return 3
