"""Structure ingestion, rigid frames, complexes, patches, and superposition.

A Complex stores per-residue data in parallel numpy arrays (storage order
matters; index sets refer to storage positions). All operations are pure:
they return new Complex instances and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .constants import (
    AA_TO_INDEX,
    ALPHABET,
    CDR_REGION_INDICES,
    ONE_TO_THREE,
    REGION_AG,
    REGION_TO_INDEX,
    REGIONS,
    THREE_TO_ONE,
)
from .errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    InsufficientPairs,
    MalformedRecord,
    MaskTooLarge,
)

COMPLEX_HEADER = "#abloop-complex v1"


@dataclass(frozen=True)
class BackboneRecord:
    """N/CA/C atom positions for one residue of a parsed structure."""

    res_name: str
    chain: str
    seq_index: int
    icode: str
    n_pos: np.ndarray
    ca_pos: np.ndarray
    c_pos: np.ndarray

    @property
    def res_type(self) -> int:
        return AA_TO_INDEX[THREE_TO_ONE[self.res_name]]


@dataclass(frozen=True)
class ParseWarning:
    kind: str  # "MissingAtom" or "UnknownResidue"
    chain: str
    seq_index: int
    detail: str


@dataclass(frozen=True)
class ParseResult:
    records: list[BackboneRecord]
    warnings: list[ParseWarning]


@dataclass(frozen=True)
class Residue:
    """Single-residue view of a Complex."""

    res_type: int
    ca_pos: np.ndarray
    orient: np.ndarray
    chain_id: str
    seq_index: int
    region: str


@dataclass(frozen=True)
class Complex:
    """An antibody-antigen complex with an explicit design mask.

    mask_indices and antigen_indices are sorted storage positions into the
    residue arrays. The mask is the set of residues a generation task may
    rewrite; everything else is fixed context.
    """

    res_types: np.ndarray        # (n,) int
    ca_pos: np.ndarray           # (n, 3) float
    orients: np.ndarray          # (n, 3, 3) float
    chain_ids: tuple[str, ...]   # (n,)
    seq_index: np.ndarray        # (n,) int
    regions: np.ndarray          # (n,) int, indices into REGIONS
    mask_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    antigen_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    def __post_init__(self):
        object.__setattr__(self, "res_types", np.asarray(self.res_types, dtype=int))
        object.__setattr__(self, "ca_pos", np.asarray(self.ca_pos, dtype=float))
        object.__setattr__(self, "orients", np.asarray(self.orients, dtype=float))
        object.__setattr__(self, "seq_index", np.asarray(self.seq_index, dtype=int))
        object.__setattr__(self, "regions", np.asarray(self.regions, dtype=int))
        object.__setattr__(self, "chain_ids", tuple(self.chain_ids))
        object.__setattr__(
            self, "mask_indices", np.sort(np.asarray(self.mask_indices, dtype=int)))
        object.__setattr__(
            self, "antigen_indices", np.sort(np.asarray(self.antigen_indices, dtype=int)))

    @property
    def n(self) -> int:
        return len(self.res_types)

    @property
    def antibody_indices(self) -> np.ndarray:
        ag = set(self.antigen_indices.tolist())
        return np.array([i for i in range(self.n) if i not in ag], dtype=int)

    def residue(self, i: int) -> Residue:
        return Residue(
            res_type=int(self.res_types[i]),
            ca_pos=self.ca_pos[i].copy(),
            orient=self.orients[i].copy(),
            chain_id=self.chain_ids[i],
            seq_index=int(self.seq_index[i]),
            region=REGIONS[int(self.regions[i])],
        )

    def sequence(self, indices=None) -> str:
        idx = np.arange(self.n) if indices is None else np.asarray(indices, dtype=int)
        return "".join(ALPHABET[t] for t in self.res_types[idx])

    @property
    def antibody_sequence(self) -> str:
        return self.sequence(self.antibody_indices)

    @property
    def mask_sequence(self) -> str:
        return self.sequence(self.mask_indices)

    def validate(self, frame_tol: float = 1e-6) -> None:
        """Raise ValueError on any violated structural invariant."""
        n = self.n
        for arr, shape in ((self.ca_pos, (n, 3)), (self.orients, (n, 3, 3))):
            if arr.shape != shape:
                raise ValueError(f"bad array shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(self.ca_pos)):
            raise ValueError("non-finite CA position")
        prod = np.einsum("nij,nik->njk", self.orients, self.orients)
        err = np.linalg.norm(prod - np.eye(3), axis=(1, 2))
        if np.any(err > frame_tol):
            raise ValueError(f"orientation not orthonormal (max err {err.max():.3g})")
        dets = np.linalg.det(self.orients)
        if np.any(np.abs(dets - 1.0) > frame_tol):
            raise ValueError("orientation determinant differs from +1")
        mask = set(self.mask_indices.tolist())
        antigen = set(self.antigen_indices.tolist())
        if mask & antigen:
            raise ValueError("mask and antigen index sets overlap")
        if any(i < 0 or i >= n for i in mask | antigen):
            raise ValueError("residue index out of range")
        ag_regions = set(np.flatnonzero(self.regions == REGION_AG).tolist())
        if antigen != ag_regions:
            raise ValueError("antigen indices disagree with AG region tags")

    def with_mask(self, cdr_names) -> "Complex":
        """Restrict the mask to residues tagged with the given CDR names."""
        wanted = {REGION_TO_INDEX[name] for name in cdr_names}
        idx = np.array(
            [i for i in range(self.n) if int(self.regions[i]) in wanted], dtype=int)
        return replace(self, mask_indices=idx)

    def with_arrays(self, **kwargs) -> "Complex":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# ATOM-record parsing and writing
# ---------------------------------------------------------------------------

_BACKBONE_ATOMS = ("N", "CA", "C")


def parse_backbone(text: str) -> ParseResult:
    """Parse fixed-width ATOM records into per-residue backbone records.

    Only N/CA/C atoms of the 20 standard residues are consumed. Residues
    missing any of the three atoms, or with unknown names, are dropped and
    reported as warnings. An unparseable ATOM line raises MalformedRecord.
    """
    atoms: dict[tuple, dict] = {}
    order: list[tuple] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        try:
            atom_name = line[12:16].strip()
            res_name = line[17:20].strip()
            chain = line[21].strip()
            seq = int(line[22:26])
            icode = line[26].strip() if len(line) > 26 else ""
            if atom_name in _BACKBONE_ATOMS:
                pos = np.array([float(line[30:38]), float(line[38:46]),
                                float(line[46:54])])
            else:
                continue
        except (ValueError, IndexError) as exc:
            raise MalformedRecord(f"line {lineno}: {line!r}") from exc
        key = (chain, seq, icode)
        if key not in atoms:
            atoms[key] = {"res_name": res_name}
            order.append(key)
        # first occurrence wins (alternate locations)
        atoms[key].setdefault(atom_name, pos)

    records = []
    warnings = []
    for key in sorted(order, key=lambda k: (k[0], k[1], k[2])):
        chain, seq, icode = key
        entry = atoms[key]
        res_name = entry["res_name"]
        if res_name not in THREE_TO_ONE:
            warnings.append(ParseWarning("UnknownResidue", chain, seq, res_name))
            continue
        missing = [a for a in _BACKBONE_ATOMS if a not in entry]
        if missing:
            warnings.append(
                ParseWarning("MissingAtom", chain, seq, ",".join(missing)))
            continue
        records.append(BackboneRecord(
            res_name=res_name, chain=chain, seq_index=seq, icode=icode,
            n_pos=entry["N"], ca_pos=entry["CA"], c_pos=entry["C"]))
    return ParseResult(records=records, warnings=warnings)


def write_backbone(records: list[BackboneRecord]) -> str:
    """Emit minimal fixed-width ATOM records (3 decimal places)."""
    lines = []
    serial = 1
    for rec in records:
        for atom_name, pos in (("N", rec.n_pos), ("CA", rec.ca_pos), ("C", rec.c_pos)):
            name_field = f" {atom_name:<3s}"
            lines.append(
                f"ATOM  {serial:5d} {name_field}{'':1s}{rec.res_name:>3s} "
                f"{rec.chain:1s}{rec.seq_index:4d}{rec.icode:<1s}   "
                f"{pos[0]:8.3f}{pos[1]:8.3f}{pos[2]:8.3f}"
            )
            serial += 1
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Rigid frames
# ---------------------------------------------------------------------------

def build_frame(n_pos, ca_pos, c_pos, tol: float = 1e-6) -> np.ndarray:
    """Right-handed orthonormal frame from backbone atoms.

    Columns are e1 = normalize(C - CA), e2 = Gram-Schmidt of (N - CA)
    against e1, e3 = e1 x e2. Raises DegenerateGeometry when the three
    atoms are collinear (rejected component below tol).
    """
    n_pos = np.asarray(n_pos, dtype=float)
    ca_pos = np.asarray(ca_pos, dtype=float)
    c_pos = np.asarray(c_pos, dtype=float)
    e1 = c_pos - ca_pos
    norm1 = np.linalg.norm(e1)
    if norm1 < tol:
        raise DegenerateGeometry("C and CA coincide")
    e1 = e1 / norm1
    v = n_pos - ca_pos
    v = v - np.dot(v, e1) * e1
    norm2 = np.linalg.norm(v)
    if norm2 < tol:
        raise DegenerateGeometry("N, CA, C are collinear")
    e2 = v / norm2
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3])


def frame_from_record(rec: BackboneRecord) -> np.ndarray:
    return build_frame(rec.n_pos, rec.ca_pos, rec.c_pos)


def frames_from_ca_trace(positions: np.ndarray) -> np.ndarray:
    """Per-residue frames derived from a CA trace of one chain.

    Convention: e1 points toward the next CA (away from the previous CA
    at the chain end); e2 is the Gram-Schmidt residual of the first
    non-collinear neighbor direction (previous, two ahead, or two back).
    Only a perfectly straight chain falls back to a coordinate axis; the
    construction is total and deterministic, and rotation-equivariant
    whenever a neighbor direction is usable.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    frames = np.empty((n, 3, 3))
    if n == 1:
        frames[0] = np.eye(3)
        return frames
    for i in range(n):
        if i < n - 1:
            fwd = pos[i + 1] - pos[i]
        else:
            fwd = pos[i] - pos[i - 1]
        norm1 = np.linalg.norm(fwd)
        if norm1 < 1e-9:
            frames[i] = np.eye(3)
            continue
        e1 = fwd / norm1
        candidates = []
        if i > 0:
            candidates.append(pos[i - 1] - pos[i])
        if i + 2 < n:
            candidates.append(pos[i + 2] - pos[i])
        if i >= 2:
            candidates.append(pos[i - 2] - pos[i])
        e2 = None
        for ref in candidates:
            v = ref - np.dot(ref, e1) * e1
            norm2 = np.linalg.norm(v)
            if norm2 >= 1e-8:
                e2 = v / norm2
                break
        if e2 is None:
            axis = np.zeros(3)
            axis[int(np.argmin(np.abs(e1)))] = 1.0
            v = axis - np.dot(axis, e1) * e1
            e2 = v / np.linalg.norm(v)
        frames[i] = np.column_stack([e1, e2, np.cross(e1, e2)])
    return frames


def complex_from_records(records: list[BackboneRecord],
                         cdr_spans=None) -> Complex:
    """Build a Complex from parsed backbone records.

    cdr_spans maps CDR names to (chain, first_seq, last_seq) inclusive
    spans; residues outside any span are framework. Antigen chains can be
    labeled by passing spans under the name "AG".
    """
    cdr_spans = cdr_spans or {}
    n = len(records)
    res_types = np.array([r.res_type for r in records], dtype=int)
    ca = np.array([r.ca_pos for r in records])
    orients = np.array([frame_from_record(r) for r in records])
    chains = tuple(r.chain for r in records)
    seq = np.array([r.seq_index for r in records], dtype=int)
    regions = np.full(n, REGION_TO_INDEX["FW"], dtype=int)
    for name, spans in cdr_spans.items():
        if isinstance(spans, tuple):
            spans = [spans]
        for chain, lo, hi in spans:
            for i, r in enumerate(records):
                if r.chain == chain and lo <= r.seq_index <= hi:
                    regions[i] = REGION_TO_INDEX[name]
    mask = np.array([i for i in range(n) if regions[i] in CDR_REGION_INDICES],
                    dtype=int)
    antigen = np.flatnonzero(regions == REGION_AG)
    return Complex(res_types, ca, orients, chains, seq, regions,
                   mask_indices=mask, antigen_indices=antigen)


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def _mask_runs(c: Complex) -> list[list[int]]:
    """Contiguous mask segments (same chain, consecutive sequence index)."""
    runs: list[list[int]] = []
    prev = None
    for i in c.mask_indices.tolist():
        if (prev is not None and c.chain_ids[i] == c.chain_ids[prev]
                and c.seq_index[i] == c.seq_index[prev] + 1):
            runs[-1].append(i)
        else:
            runs.append([i])
        prev = i
    return runs


def anchor_indices(c: Complex) -> list[int]:
    """Storage indices of non-mask residues flanking each mask segment."""
    mask = set(c.mask_indices.tolist())
    lookup = {(c.chain_ids[i], int(c.seq_index[i])): i for i in range(c.n)}
    anchors = []
    for run in _mask_runs(c):
        first, last = run[0], run[-1]
        for key in ((c.chain_ids[first], int(c.seq_index[first]) - 1),
                    (c.chain_ids[last], int(c.seq_index[last]) + 1)):
            j = lookup.get(key)
            if j is not None and j not in mask and j not in anchors:
                anchors.append(j)
    return anchors


def subset_complex(c: Complex, keep: np.ndarray) -> Complex:
    """Sub-complex over the given storage indices (original order kept)."""
    keep = np.sort(np.asarray(keep, dtype=int))
    remap = {int(old): new for new, old in enumerate(keep)}
    mask = np.array([remap[i] for i in c.mask_indices.tolist() if i in remap],
                    dtype=int)
    antigen = np.array(
        [remap[i] for i in c.antigen_indices.tolist() if i in remap], dtype=int)
    return Complex(
        res_types=c.res_types[keep].copy(),
        ca_pos=c.ca_pos[keep].copy(),
        orients=c.orients[keep].copy(),
        chain_ids=tuple(c.chain_ids[i] for i in keep),
        seq_index=c.seq_index[keep].copy(),
        regions=c.regions[keep].copy(),
        mask_indices=mask,
        antigen_indices=antigen,
    )


def extract_patch(c: Complex, patch_size: int) -> Complex:
    """Training patch: all mask residues plus the residues nearest to the
    anchors flanking each CDR, up to patch_size total.

    Distance is CA distance to the closest anchor; ties break toward the
    lower storage index. Original residue ordering is preserved and the
    index sets are remapped.
    """
    m = len(c.mask_indices)
    if patch_size < m + 2:
        raise MaskTooLarge(f"patch size {patch_size} cannot hold mask of {m}")
    if c.n <= patch_size:
        return c
    anchors = anchor_indices(c)
    if not anchors:
        anchors = c.mask_indices.tolist()
    dists = np.linalg.norm(
        c.ca_pos[:, None, :] - c.ca_pos[None, anchors, :], axis=-1).min(axis=1)
    mask_set = set(c.mask_indices.tolist())
    others = [i for i in range(c.n) if i not in mask_set]
    others.sort(key=lambda i: (dists[i], i))
    budget = patch_size - m
    keep = np.array(sorted(c.mask_indices.tolist() + others[:budget]), dtype=int)
    return subset_complex(c, keep)


# ---------------------------------------------------------------------------
# Rigid superposition
# ---------------------------------------------------------------------------

def kabsch_align(mobile: Complex, reference: Complex,
                 align_pairs) -> tuple[Complex, float]:
    """Rigidly superpose mobile onto reference over paired CA positions.

    align_pairs is a sequence of (mobile_index, reference_index). Returns
    the transformed complex (orientations co-rotated) and the achieved
    RMSD. The returned rotation is always proper (det +1).
    """
    pairs = list(align_pairs)
    if len(pairs) < 3:
        raise InsufficientPairs(f"need at least 3 pairs, got {len(pairs)}")
    mob_idx = np.array([p[0] for p in pairs], dtype=int)
    ref_idx = np.array([p[1] for p in pairs], dtype=int)
    a = mobile.ca_pos[mob_idx]
    b = reference.ca_pos[ref_idx]
    a_mean = a.mean(axis=0)
    b_mean = b.mean(axis=0)
    ac = a - a_mean
    bc = b - b_mean
    sing = np.linalg.svd(ac, compute_uv=False)
    if sing[1] < 1e-8:
        raise DegenerateConfiguration("paired positions are collinear")
    h = ac.T @ bc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    new_pos = (mobile.ca_pos - a_mean) @ rot.T + b_mean
    new_orients = np.einsum("ij,njk->nik", rot, mobile.orients)
    moved = mobile.with_arrays(ca_pos=new_pos, orients=new_orients)
    rmsd = float(np.sqrt(np.mean(np.sum((new_pos[mob_idx] - b) ** 2, axis=1))))
    return moved, rmsd


# ---------------------------------------------------------------------------
# Native complex format
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.6g}"


def write_complex(c: Complex) -> str:
    """Serialize to the line-delimited native format (6 significant digits).

    One record per residue: chain, sequence index, type letter, CA
    coordinates, row-major frame entries, region tag. The mask is implied
    by the CDR region tags.
    """
    lines = [COMPLEX_HEADER]
    for i in range(c.n):
        nums = list(c.ca_pos[i]) + list(c.orients[i].reshape(-1))
        lines.append(" ".join(
            [c.chain_ids[i], str(int(c.seq_index[i])), ALPHABET[c.res_types[i]]]
            + [_fmt(x) for x in nums]
            + [REGIONS[int(c.regions[i])]]))
    return "\n".join(lines) + "\n"


def read_complex(text: str) -> Complex:
    """Parse the native format; inverse of write_complex.

    Values are kept exactly as written so that write(read(write(c)))
    is byte-identical. Frames are validated at a tolerance compatible
    with 6-significant-digit storage.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != COMPLEX_HEADER:
        raise MalformedRecord("missing or wrong complex header")
    res_types, ca, orients, chains, seqs, regions = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 16:
            raise MalformedRecord(f"line {lineno}: expected 16 fields")
        try:
            chains.append(parts[0])
            seqs.append(int(parts[1]))
            res_types.append(AA_TO_INDEX[parts[2]])
            nums = [float(x) for x in parts[3:15]]
            regions.append(REGION_TO_INDEX[parts[15]])
        except (KeyError, ValueError) as exc:
            raise MalformedRecord(f"line {lineno}: {line!r}") from exc
        ca.append(nums[:3])
        orients.append(np.array(nums[3:]).reshape(3, 3))
    regions = np.array(regions, dtype=int)
    mask = np.array([i for i, r in enumerate(regions)
                     if r in CDR_REGION_INDICES], dtype=int)
    antigen = np.flatnonzero(regions == REGION_AG)
    c = Complex(np.array(res_types), np.array(ca), np.array(orients),
                tuple(chains), np.array(seqs), regions,
                mask_indices=mask, antigen_indices=antigen)
    c.validate(frame_tol=1e-4)
    return c


def save_complex(c: Complex, path) -> None:
    Path(path).write_text(write_complex(c))


def load_complex(path) -> Complex:
    return read_complex(Path(path).read_text())


def backbone_to_residue_name(res_type: int) -> str:
    return ONE_TO_THREE[ALPHABET[res_type]]
