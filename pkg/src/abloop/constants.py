"""Residue alphabet, region labels, and physicochemical groupings."""

from __future__ import annotations

# The 20-letter alphabet in alphabetical order; residue type indices
# throughout the package are positions in this string.
ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
N_TYPES = len(ALPHABET)
AA_TO_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}
ONE_TO_THREE = {v: k for k, v in THREE_TO_ONE.items()}

# Region labels: framework, the six CDR loops, and antigen.
REGIONS = ("FW", "H1", "H2", "H3", "L1", "L2", "L3", "AG")
REGION_TO_INDEX = {r: i for i, r in enumerate(REGIONS)}
CDR_REGIONS = ("H1", "H2", "H3", "L1", "L2", "L3")
REGION_FW = REGION_TO_INDEX["FW"]
REGION_AG = REGION_TO_INDEX["AG"]
CDR_REGION_INDICES = tuple(REGION_TO_INDEX[r] for r in CDR_REGIONS)

# Physicochemical groupings used by the liability features and the
# synthetic sequence rule.
HYDROPHOBIC = set("AVILMFWC")
AROMATIC = set("FWY")
POSITIVE = set("KR")
NEGATIVE = set("DE")

# Simple integer-ish side-chain charges near pH 7.
CHARGE = {aa: 0.0 for aa in ALPHABET}
CHARGE.update({"K": 1.0, "R": 1.0, "H": 0.1, "D": -1.0, "E": -1.0})
