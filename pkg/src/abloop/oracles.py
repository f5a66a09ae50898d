"""Sequence scoring models and the simulated laboratory.

Oracles score full-length antibody sequences with features drawn from the
design (mask) positions only; the framework is constant within a campaign.
The synthetic landscape stands in for the wet lab: its parameters are
private and reachable only through assay().
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .constants import AA_TO_INDEX, AROMATIC, CHARGE, HYDROPHOBIC, N_TYPES
from .errors import InsufficientData, LengthMismatch, UnknownResidue

ORACLE_SCHEMA = 1


@dataclass(frozen=True)
class AssayRecord:
    sequence: str
    measured_value: float | None
    assay_type: str = "affinity"   # "affinity" or "liability"
    round_id: int = 0
    synthesized: bool = True

    def to_line(self) -> str:
        return json.dumps({
            "sequence": self.sequence,
            "measured_value": self.measured_value,
            "assay_type": self.assay_type,
            "round_id": self.round_id,
            "synthesized": self.synthesized,
        }, sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> "AssayRecord":
        d = json.loads(line)
        return cls(sequence=d["sequence"], measured_value=d["measured_value"],
                   assay_type=d["assay_type"], round_id=d["round_id"],
                   synthesized=d["synthesized"])


def records_hash(records: list[AssayRecord]) -> str:
    payload = "\n".join(sorted(r.to_line() for r in records))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _one_hot(sequence: str, positions) -> np.ndarray:
    feats = np.zeros(len(positions) * N_TYPES)
    for k, p in enumerate(positions):
        aa = sequence[p]
        if aa not in AA_TO_INDEX:
            raise UnknownResidue(f"letter {aa!r} at position {p}")
        feats[k * N_TYPES + AA_TO_INDEX[aa]] = 1.0
    return feats


def _varying_positions(sequences: list[str]) -> list[int]:
    ref = sequences[0]
    return [p for p in range(len(ref))
            if any(s[p] != ref[p] for s in sequences[1:])]


def _check_lengths(sequences: list[str]) -> None:
    if len({len(s) for s in sequences}) > 1:
        raise LengthMismatch("assay sequences have differing lengths")


# ---------------------------------------------------------------------------
# Ridge oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RidgeOracle:
    positions: tuple
    weights: np.ndarray    # (len(positions) * 20,)
    bias: float
    lambda_ridge: float
    train_mse: float

    def score(self, sequence: str) -> float:
        return float(self.bias + self.weights @ _one_hot(sequence, self.positions))

    def to_dict(self) -> dict:
        return {"schema": ORACLE_SCHEMA, "kind": "ridge",
                "positions": list(self.positions),
                "weights": self.weights.tolist(), "bias": self.bias,
                "lambda_ridge": self.lambda_ridge, "train_mse": self.train_mse}

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeOracle":
        return cls(positions=tuple(d["positions"]),
                   weights=np.array(d["weights"]), bias=d["bias"],
                   lambda_ridge=d["lambda_ridge"], train_mse=d["train_mse"])


def _solve_ridge(x: np.ndarray, y: np.ndarray, lam: float):
    """Centered ridge with unpenalized intercept; dual form when wide."""
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    n, f = xc.shape
    if f <= n:
        w = np.linalg.solve(xc.T @ xc + lam * np.eye(f), xc.T @ yc)
    else:
        alpha = np.linalg.solve(xc @ xc.T + lam * np.eye(n), yc)
        w = xc.T @ alpha
    bias = float(y_mean - x_mean @ w)
    return w, bias


_CV_GRID = (0.01, 0.1, 1.0, 10.0)


def train_ridge(records: list[AssayRecord], lambda_ridge: float | None = None,
                positions=None) -> RidgeOracle:
    """Closed-form regularized least squares on one-hot design features.

    With no explicit lambda, a 5-fold cross validation over a small grid
    picks it once at least 50 records are available; otherwise 1.0.
    """
    usable = [r for r in records if r.synthesized and r.measured_value is not None
              and r.assay_type == "affinity"]
    if len(usable) < 2 or len({r.sequence for r in usable}) < 2:
        raise InsufficientData("ridge training needs >= 2 distinct sequences")
    _check_lengths([r.sequence for r in usable])
    if positions is None:
        positions = _varying_positions([r.sequence for r in usable])
        if not positions:
            raise InsufficientData("no varying positions in training data")
    positions = tuple(int(p) for p in positions)
    x = np.array([_one_hot(r.sequence, positions) for r in usable])
    y = np.array([r.measured_value for r in usable])

    if lambda_ridge is None:
        if len(usable) >= 50:
            lambda_ridge = _cross_validate(x, y)
        else:
            lambda_ridge = 1.0
    w, bias = _solve_ridge(x, y, lambda_ridge)
    mse = float(np.mean((x @ w + bias - y) ** 2))
    return RidgeOracle(positions=positions, weights=w, bias=bias,
                       lambda_ridge=float(lambda_ridge), train_mse=mse)


def _cross_validate(x: np.ndarray, y: np.ndarray) -> float:
    n = len(y)
    folds = np.arange(n) % 5
    best_lam, best_err = None, np.inf
    for lam in _CV_GRID:
        err = 0.0
        for f in range(5):
            tr = folds != f
            te = ~tr
            w, bias = _solve_ridge(x[tr], y[tr], lam)
            err += float(np.sum((x[te] @ w + bias - y[te]) ** 2))
        if err < best_err - 1e-12:
            best_err, best_lam = err, lam
    return best_lam


# ---------------------------------------------------------------------------
# Ensemble oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _MlpMember:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1) @ self.w2 + self.b2


def _train_member(x, y, seed, hidden=16, epochs=300, lr=0.01):
    rng = np.random.Generator(np.random.PCG64(seed))
    f = x.shape[1]
    w1 = 0.1 * rng.standard_normal((f, hidden))
    b1 = np.zeros(hidden)
    w2 = 0.1 * rng.standard_normal(hidden)
    b2 = 0.0
    params = [w1, b1, w2, b2]
    m_t = [np.zeros_like(p) if isinstance(p, np.ndarray) else 0.0 for p in params]
    v_t = [np.zeros_like(p) if isinstance(p, np.ndarray) else 0.0 for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(y)
    for step in range(1, epochs + 1):
        a = x @ params[0] + params[1]
        h = np.tanh(a)
        pred = h @ params[2] + params[3]
        err = pred - y
        g_pred = 2.0 * err / n
        g_w2 = h.T @ g_pred
        g_b2 = float(g_pred.sum())
        g_h = np.outer(g_pred, params[2])
        g_a = g_h * (1.0 - h ** 2)
        g_w1 = x.T @ g_a
        g_b1 = g_a.sum(axis=0)
        grads = [g_w1, g_b1, g_w2, g_b2]
        corr1 = 1.0 - beta1 ** step
        corr2 = 1.0 - beta2 ** step
        for i in range(4):
            m_t[i] = beta1 * m_t[i] + (1 - beta1) * grads[i]
            v_t[i] = beta2 * v_t[i] + (1 - beta2) * (grads[i] ** 2
                                                     if isinstance(grads[i], np.ndarray)
                                                     else grads[i] ** 2)
            update = lr * (m_t[i] / corr1) / (np.sqrt(v_t[i] / corr2) + eps)
            params[i] = params[i] - update
    return _MlpMember(w1=params[0], b1=params[1], w2=params[2], b2=float(params[3]))


@dataclass(frozen=True)
class EnsembleOracle:
    positions: tuple
    members: tuple

    def _member_scores(self, sequence: str) -> np.ndarray:
        x = _one_hot(sequence, self.positions)[None, :]
        return np.array([m.predict(x)[0] for m in self.members])

    def score(self, sequence: str) -> float:
        return float(self._member_scores(sequence).mean())

    def spread(self, sequence: str) -> float:
        return float(self._member_scores(sequence).std())

    def to_dict(self) -> dict:
        return {"schema": ORACLE_SCHEMA, "kind": "ensemble",
                "positions": list(self.positions),
                "members": [{"w1": m.w1.tolist(), "b1": m.b1.tolist(),
                             "w2": m.w2.tolist(), "b2": m.b2}
                            for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleOracle":
        members = tuple(
            _MlpMember(w1=np.array(m["w1"]), b1=np.array(m["b1"]),
                       w2=np.array(m["w2"]), b2=m["b2"])
            for m in d["members"])
        return cls(positions=tuple(d["positions"]), members=members)


def train_ensemble(records: list[AssayRecord], k: int = 10, seed: int = 0,
                   positions=None) -> EnsembleOracle:
    """k identical members trained from different initialization seeds;
    the prediction is the member mean."""
    if k < 2:
        raise InsufficientData("ensemble needs at least 2 members")
    usable = [r for r in records if r.synthesized and r.measured_value is not None
              and r.assay_type == "affinity"]
    if len(usable) < 20:
        raise InsufficientData(
            f"ensemble training needs >= 20 records, got {len(usable)}")
    _check_lengths([r.sequence for r in usable])
    if positions is None:
        positions = _varying_positions([r.sequence for r in usable])
        if not positions:
            raise InsufficientData("no varying positions in training data")
    positions = tuple(int(p) for p in positions)
    x = np.array([_one_hot(r.sequence, positions) for r in usable])
    y = np.array([r.measured_value for r in usable])
    members = tuple(_train_member(x, y, seed=int(seed) + i) for i in range(k))
    return EnsembleOracle(positions=positions, members=members)


# ---------------------------------------------------------------------------
# Liability scoring
# ---------------------------------------------------------------------------

def liability_features(sequence: str, positions=None) -> np.ndarray:
    """(net charge, hydrophobic patch count, aromatic count) over the
    design positions (whole sequence when positions is None)."""
    if positions is None:
        sub = sequence
    else:
        sub = "".join(sequence[p] for p in positions)
    for aa in sub:
        if aa not in AA_TO_INDEX:
            raise UnknownResidue(f"letter {aa!r}")
    charge = sum(CHARGE[aa] for aa in sub)
    patches = 0
    run = 0
    for aa in sub:
        if aa in HYDROPHOBIC:
            run += 1
        else:
            if run >= 2:
                patches += 1
            run = 0
    if run >= 2:
        patches += 1
    aromatics = sum(1 for aa in sub if aa in AROMATIC)
    return np.array([charge, float(patches), float(aromatics)])


def liability_score(sequence: str, positions=None) -> float:
    """Deterministic polyreactivity proxy; higher is worse."""
    charge, patches, aromatics = liability_features(sequence, positions)
    return float(patches + 0.5 * aromatics + 0.4 * max(charge, 0.0))


class LiabilityOracle:
    """Feature-based liability regressor, trainable from assay records."""

    def __init__(self, positions=None):
        self.positions = tuple(positions) if positions is not None else None
        self._model = None

    def fit(self, records: list[AssayRecord], seed: int = 0) -> "LiabilityOracle":
        usable = [r for r in records if r.synthesized
                  and r.measured_value is not None and r.assay_type == "liability"]
        if len(usable) < 5:
            raise InsufficientData("liability training needs >= 5 records")
        x = np.array([liability_features(r.sequence, self.positions)
                      for r in usable])
        y = np.array([r.measured_value for r in usable])
        self._model = RandomForestRegressor(n_estimators=100, random_state=seed)
        self._model.fit(x, y)
        return self

    def score(self, sequence: str) -> float:
        feats = liability_features(sequence, self.positions)
        if self._model is None:
            charge, patches, aromatics = feats
            return float(patches + 0.5 * aromatics + 0.4 * max(charge, 0.0))
        return float(self._model.predict(feats[None, :])[0])


# ---------------------------------------------------------------------------
# The simulated laboratory
# ---------------------------------------------------------------------------

class SyntheticLandscape:
    """Hidden fitness landscape in log-fold-improvement units.

    A linear per-position term (zero at the reference residue, mostly
    deleterious elsewhere) plus pairwise epistatic terms on random
    position pairs. Parameters are private; the only sanctioned access
    is through assay().
    """

    def __init__(self, reference_sequence: str, positions, seed: int = 0,
                 sigma_meas: float = 0.1, n_epistatic_pairs: int = 4,
                 mean_effect: float = -0.3, effect_scale: float = 0.25,
                 epistasis_scale: float = 0.1,
                 p_fail_base: float = 0.05, p_fail_slope: float = 0.02,
                 p_fail_cap: float = 0.5):
        self.reference_sequence = reference_sequence
        self.positions = tuple(int(p) for p in positions)
        self.seed = seed
        self.sigma_meas = sigma_meas
        self.p_fail_base = p_fail_base
        self.p_fail_slope = p_fail_slope
        self.p_fail_cap = p_fail_cap
        rng = np.random.Generator(np.random.PCG64(seed))
        n_pos = len(self.positions)
        w = mean_effect + effect_scale * rng.standard_normal((n_pos, N_TYPES))
        for k, p in enumerate(self.positions):
            w[k, AA_TO_INDEX[reference_sequence[p]]] = 0.0
        self.__w = w
        pairs = []
        for _ in range(min(n_epistatic_pairs, n_pos * (n_pos - 1) // 2)):
            i, j = rng.choice(n_pos, size=2, replace=False)
            table = epistasis_scale * rng.standard_normal((N_TYPES, N_TYPES))
            pairs.append((int(i), int(j), table))
        self.__pairs = pairs
        self.__offset = 0.0
        self.__offset = self.__hidden_score(reference_sequence)

    def __hidden_score(self, sequence: str) -> float:
        total = 0.0
        for k, p in enumerate(self.positions):
            aa = sequence[p]
            if aa not in AA_TO_INDEX:
                raise UnknownResidue(f"letter {aa!r} at position {p}")
            total += self.__w[k, AA_TO_INDEX[aa]]
        for i, j, table in self.__pairs:
            ai = AA_TO_INDEX[sequence[self.positions[i]]]
            aj = AA_TO_INDEX[sequence[self.positions[j]]]
            total += table[ai, aj]
        return float(total - self.__offset)

    def p_fail(self, edit_distance: int) -> float:
        return min(self.p_fail_base + self.p_fail_slope * edit_distance,
                   self.p_fail_cap)


def assay(landscape: SyntheticLandscape, sequences: list[str],
          rng: np.random.Generator, round_id: int = 0,
          edit_distances=None) -> list[AssayRecord]:
    """Simulated in vitro round: Bernoulli synthesis failure by edit
    distance, then the hidden score plus Gaussian measurement noise."""
    if edit_distances is None:
        ref = landscape.reference_sequence
        edit_distances = [
            sum(1 for p in landscape.positions if s[p] != ref[p])
            for s in sequences]
    records = []
    for seq, edits in zip(sequences, edit_distances):
        p_fail = landscape.p_fail(int(edits))
        if rng.random() < p_fail:
            records.append(AssayRecord(sequence=seq, measured_value=None,
                                       round_id=round_id, synthesized=False))
            continue
        score = landscape._SyntheticLandscape__hidden_score(seq)
        noise = landscape.sigma_meas * rng.standard_normal() \
            if landscape.sigma_meas > 0 else 0.0
        records.append(AssayRecord(sequence=seq, measured_value=score + noise,
                                   round_id=round_id, synthesized=True))
    return records


# ---------------------------------------------------------------------------
# Ranking and snapshots
# ---------------------------------------------------------------------------

def rank_candidates(oracle, candidates: list, top_k: int) -> list:
    """Descending oracle score over candidate sequences; ties break toward
    lower edit distance, then input order."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scored = []
    for order, cand in enumerate(candidates):
        scored.append((-oracle.score(cand.full_sequence), cand.edit_distance,
                       order, cand))
    scored.sort(key=lambda item: item[:3])
    return [item[3] for item in scored[:min(top_k, len(scored))]]


def save_oracle(oracle, path, data_hash: str = "") -> None:
    d = oracle.to_dict()
    d["data_hash"] = data_hash
    Path(path).write_text(json.dumps(d, sort_keys=True) + "\n")


def load_oracle(path):
    d = json.loads(Path(path).read_text())
    if d.get("kind") == "ridge":
        return RidgeOracle.from_dict(d)
    if d.get("kind") == "ensemble":
        return EnsembleOracle.from_dict(d)
    raise InsufficientData(f"unknown oracle kind in {path}")
