import numpy as np
import pytest

from abloop import so3
from abloop import structio as sio
from abloop.constants import REGION_TO_INDEX
from abloop.errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    InsufficientPairs,
    MalformedRecord,
    MaskTooLarge,
)
from abloop.synthetic import make_synthetic_dataset

ATOM_LINE = ("ATOM      1  N   ALA A   1       0.000   0.000   0.000"
             "  1.00  0.00           N")


def _chain_complex(n, mask_lo, mask_hi, spacing=3.8):
    pos = np.column_stack([np.arange(n) * spacing,
                           0.3 * np.sin(np.arange(n)),
                           0.2 * np.cos(np.arange(n))])
    regions = np.full(n, REGION_TO_INDEX["FW"])
    regions[mask_lo:mask_hi] = REGION_TO_INDEX["H1"]
    return sio.Complex(
        res_types=np.zeros(n, dtype=int),
        ca_pos=pos,
        orients=sio.frames_from_ca_trace(pos),
        chain_ids=tuple("A" * n),
        seq_index=np.arange(1, n + 1),
        regions=regions,
        mask_indices=np.arange(mask_lo, mask_hi),
        antigen_indices=np.array([], dtype=int),
    )


# --- parse_backbone -------------------------------------------------------

def _atom_line(serial, name, res, chain, seq, x, y, z):
    pad = "" if len(name) == 4 else " "
    return (f"ATOM  {serial:5d} {pad}{name:<3s} {res:>3s} {chain}{seq:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}")


def test_parse_single_residue():
    text = "\n".join([
        _atom_line(1, "N", "ALA", "A", 1, 0, 0, 0),
        _atom_line(2, "CA", "ALA", "A", 1, 1, 0, 0),
        _atom_line(3, "C", "ALA", "A", 1, 2, 0, 0),
    ])
    result = sio.parse_backbone(text)
    assert len(result.records) == 1
    assert not result.warnings
    rec = result.records[0]
    assert rec.res_type == 0  # alanine is index 0 in the alphabet
    assert np.allclose(rec.ca_pos, [1, 0, 0])


def test_parse_missing_atom_warns():
    text = "\n".join([
        _atom_line(1, "N", "ALA", "A", 1, 0, 0, 0),
        _atom_line(2, "CA", "ALA", "A", 1, 1, 0, 0),
    ])
    result = sio.parse_backbone(text)
    assert result.records == []
    assert len(result.warnings) == 1
    assert result.warnings[0].kind == "MissingAtom"


def test_parse_unknown_residue_warns():
    text = "\n".join([
        _atom_line(1, "N", "UNK", "A", 1, 0, 0, 0),
        _atom_line(2, "CA", "UNK", "A", 1, 1, 0, 0),
        _atom_line(3, "C", "UNK", "A", 1, 2, 0, 0),
    ])
    result = sio.parse_backbone(text)
    assert result.records == []
    assert result.warnings[0].kind == "UnknownResidue"


def test_parse_malformed_line_raises():
    bad = "ATOM      1  CA  ALA A   1      bad....   0.000   0.000"
    with pytest.raises(MalformedRecord):
        sio.parse_backbone(bad)


def test_parse_orders_by_chain_and_index():
    lines = []
    serial = 1
    for chain, seq in (("B", 2), ("A", 5), ("A", 1)):
        for name, x in (("N", 0.0), ("CA", 1.0), ("C", 2.0)):
            lines.append(_atom_line(serial, name, "GLY", chain, seq,
                                    x + seq, 0, 0))
            serial += 1
    result = sio.parse_backbone("\n".join(lines))
    order = [(r.chain, r.seq_index) for r in result.records]
    assert order == [("A", 1), ("A", 5), ("B", 2)]


def test_backbone_roundtrip_within_format_precision():
    rng = np.random.default_rng(5)
    records = []
    for i in range(10):
        ca = rng.uniform(-50, 50, size=3)
        records.append(sio.BackboneRecord(
            res_name="LEU", chain="A", seq_index=i + 1, icode="",
            n_pos=ca + [1.2, 0.3, 0.0], ca_pos=ca, c_pos=ca + [0.0, 1.5, 0.2]))
    parsed = sio.parse_backbone(sio.write_backbone(records))
    assert len(parsed.records) == 10
    for a, b in zip(records, parsed.records):
        for atom in ("n_pos", "ca_pos", "c_pos"):
            assert np.abs(getattr(a, atom) - getattr(b, atom)).max() < 1e-3


# --- build_frame ----------------------------------------------------------

def test_build_frame_axis_aligned():
    frame = sio.build_frame([0, 1, 0], [0, 0, 0], [1, 0, 0])
    assert np.allclose(frame, np.eye(3))


def test_build_frame_collinear_raises():
    with pytest.raises(DegenerateGeometry):
        sio.build_frame([-1, 0, 0], [0, 0, 0], [1, 0, 0])


def test_build_frame_equivariance():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 1000:
        n, ca, c = rng.normal(size=(3, 3)) * 3.0
        try:
            frame = sio.build_frame(n, ca, c)
        except DegenerateGeometry:
            continue
        rot = so3.random_rotation(rng)
        shift = rng.normal(size=3)
        moved = sio.build_frame(rot @ n + shift, rot @ ca + shift,
                                rot @ c + shift)
        assert np.abs(moved - rot @ frame).max() < 1e-9
        checked += 1


def test_frames_from_ca_trace_rotation_equivariant():
    rng = np.random.default_rng(9)
    pos = np.cumsum(rng.normal(size=(12, 3)) + [3.8, 0, 0], axis=0)
    frames = sio.frames_from_ca_trace(pos)
    rot = so3.random_rotation(rng)
    moved = sio.frames_from_ca_trace(pos @ rot.T + 5.0)
    assert np.abs(moved - np.einsum("ij,njk->nik", rot, frames)).max() < 1e-9
    for f in frames:
        assert so3.is_rotation(f, 1e-9)


# --- extract_patch --------------------------------------------------------

def test_patch_noop_when_small():
    c = _chain_complex(50, 20, 24)
    patch = sio.extract_patch(c, 128)
    assert patch.n == 50
    assert np.array_equal(patch.mask_indices, c.mask_indices)


def test_patch_mask_too_large():
    c = _chain_complex(50, 20, 24)
    with pytest.raises(MaskTooLarge):
        sio.extract_patch(c, 5)


def test_patch_nearest_to_anchors_brute_force():
    c = _chain_complex(200, 100, 104)
    patch = sio.extract_patch(c, 10)
    # brute force: anchors are storage 99 and 104; pick the 6 non-mask
    # residues closest to either anchor, ties to the lower index
    anchors = [99, 104]
    dist = np.linalg.norm(
        c.ca_pos[:, None, :] - c.ca_pos[None, anchors, :], axis=-1).min(axis=1)
    others = sorted((i for i in range(200) if i not in range(100, 104)),
                    key=lambda i: (dist[i], i))[:6]
    want = sorted(others + list(range(100, 104)))
    got_original_indices = [int(s) - 1 for s in patch.seq_index]
    assert got_original_indices == want
    assert patch.n == 10
    assert set(patch.mask_indices.tolist()) <= set(range(patch.n))
    assert patch.mask_sequence == c.mask_sequence


def test_patch_matches_brute_force_on_docked_complex():
    c = make_synthetic_dataset(1, seed=4)[0]
    m = len(c.mask_indices)
    budget = m + 24
    patch = sio.extract_patch(c, budget)
    anchors = sio.anchor_indices(c)
    dist = np.linalg.norm(
        c.ca_pos[:, None, :] - c.ca_pos[None, anchors, :], axis=-1).min(axis=1)
    mask_set = set(c.mask_indices.tolist())
    others = sorted((i for i in range(c.n) if i not in mask_set),
                    key=lambda i: (dist[i], i))[:budget - m]
    want = sorted(others + list(c.mask_indices.tolist()))
    got = sorted(
        i for i in range(c.n)
        if (c.chain_ids[i], int(c.seq_index[i])) in
        {(patch.chain_ids[k], int(patch.seq_index[k])) for k in range(patch.n)})
    assert got == want
    # the antigen is docked against a CDR: brute force should have pulled
    # in antigen residues ahead of distal framework, and the patch agrees
    assert any(i in set(c.antigen_indices.tolist()) for i in want)
    assert len(patch.antigen_indices) == sum(
        1 for i in want if i in set(c.antigen_indices.tolist()))
    patch.validate()


# --- kabsch_align ---------------------------------------------------------

def test_kabsch_identity():
    c = make_synthetic_dataset(1, seed=6)[0]
    aligned, rmsd = sio.kabsch_align(c, c, [(i, i) for i in range(c.n)])
    assert rmsd < 1e-12
    assert np.abs(aligned.ca_pos - c.ca_pos).max() < 1e-9


def test_kabsch_recovers_known_transform():
    c = make_synthetic_dataset(1, seed=6)[0]
    rot = so3.rotation_from_axis_angle([0, 0, 1], np.pi / 2)
    moved = c.with_arrays(
        ca_pos=c.ca_pos @ rot.T + np.array([5.0, 0.0, 0.0]),
        orients=np.einsum("ij,njk->nik", rot, c.orients))
    back, rmsd = sio.kabsch_align(moved, c, [(i, i) for i in range(c.n)])
    assert rmsd < 1e-9
    assert np.abs(back.ca_pos - c.ca_pos).max() < 1e-9
    assert np.abs(back.orients - c.orients).max() < 1e-9


def test_kabsch_reflection_gives_proper_rotation():
    c = make_synthetic_dataset(1, seed=6)[0]
    mirrored = c.with_arrays(ca_pos=c.ca_pos * np.array([1.0, 1.0, -1.0]))
    aligned, rmsd = sio.kabsch_align(mirrored, c,
                                     [(i, i) for i in range(c.n)])
    # a reflection cannot be undone by a proper rotation
    assert rmsd > 0.1
    # the applied transform must still be a proper rotation: frames stay valid
    for f in aligned.orients:
        assert so3.is_rotation(f, 1e-9)


def test_kabsch_idempotent():
    c = make_synthetic_dataset(1, seed=8)[0]
    rng = np.random.default_rng(0)
    moved = c.with_arrays(ca_pos=c.ca_pos + rng.normal(size=c.ca_pos.shape))
    pairs = [(i, i) for i in range(c.n)]
    once, rmsd1 = sio.kabsch_align(moved, c, pairs)
    twice, rmsd2 = sio.kabsch_align(once, c, pairs)
    assert abs(rmsd1 - rmsd2) < 1e-9
    assert np.abs(once.ca_pos - twice.ca_pos).max() < 1e-9


def test_kabsch_insufficient_pairs():
    c = make_synthetic_dataset(1, seed=6)[0]
    with pytest.raises(InsufficientPairs):
        sio.kabsch_align(c, c, [(0, 0), (1, 1)])


def test_kabsch_collinear_raises():
    c = _chain_complex(10, 2, 4, spacing=3.8)
    flat = c.with_arrays(ca_pos=np.column_stack([
        np.arange(10) * 3.8, np.zeros(10), np.zeros(10)]))
    with pytest.raises(DegenerateConfiguration):
        sio.kabsch_align(flat, flat, [(i, i) for i in range(10)])


# --- native format --------------------------------------------------------

def test_complex_roundtrip_bit_exact():
    c = make_synthetic_dataset(1, seed=12)[0]
    text1 = sio.write_complex(c)
    c2 = sio.read_complex(text1)
    text2 = sio.write_complex(c2)
    assert text1 == text2
    assert np.abs(c2.ca_pos - c.ca_pos).max() < 1e-3
    assert np.array_equal(c2.res_types, c.res_types)
    assert np.array_equal(c2.mask_indices, c.mask_indices)
    assert np.array_equal(c2.antigen_indices, c.antigen_indices)


def test_read_complex_rejects_bad_header():
    with pytest.raises(MalformedRecord):
        sio.read_complex("#wrong-header\n")


def test_read_complex_rejects_bad_field_count():
    c = make_synthetic_dataset(1, seed=12)[0]
    lines = sio.write_complex(c).splitlines()
    lines[1] = lines[1] + " extra"
    with pytest.raises(MalformedRecord):
        sio.read_complex("\n".join(lines))


def test_complex_validate_catches_bad_frame():
    c = make_synthetic_dataset(1, seed=12)[0]
    orients = c.orients.copy()
    orients[0] *= 1.5
    bad = c.with_arrays(orients=orients)
    with pytest.raises(ValueError):
        bad.validate()


def test_complex_mask_antigen_disjoint():
    c = make_synthetic_dataset(1, seed=12)[0]
    bad = c.with_arrays(mask_indices=np.array([c.antigen_indices[0]]))
    with pytest.raises(ValueError):
        bad.validate()
