"""Noise schedules, forward corruption kernels, the residue-type posterior,
and the three training losses.

Positions are whitened per complex (centered on the mask centroid, scaled
by the RMS distance of context CA atoms from that centroid) before the
Gaussian kernels apply; coordinates stored in complexes stay in angstroms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .constants import N_TYPES
from .errors import EmptyMask, InvalidRange, ShapeMismatch
from .so3 import sample_igso3, sample_igso3_many, scale_rot, scale_rot_many
from .structio import Complex

log = logging.getLogger(__name__)

DEFAULT_T = 100
DEFAULT_LAMBDAS = (10.0, 1.0, 1.0)  # type, position, orientation
_PROB_FLOOR = 1e-10


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates beta and their cumulative products alpha_bar."""

    kind: str
    beta: np.ndarray       # (T,), beta_1..beta_T
    alpha_bar: np.ndarray  # (T,), alpha_bar_1..alpha_bar_T

    @property
    def t_max(self) -> int:
        return len(self.beta)

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the t = 0 convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def validate(self) -> None:
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise InvalidRange("beta values must lie in (0, 1)")
        expected = np.cumprod(1.0 - self.beta)
        if np.max(np.abs(expected - self.alpha_bar)) > 1e-12:
            raise InvalidRange("alpha_bar is not the running product of 1 - beta")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise InvalidRange("alpha_bar must be strictly decreasing")

    @property
    def reaches_prior(self) -> bool:
        """Whether the terminal state is effectively fully noised."""
        return float(self.alpha_bar[-1]) < 0.01


def make_schedule(t_steps: int, kind: str = "cosine",
                  beta_min: float = 1e-4, beta_max: float = 0.5) -> NoiseSchedule:
    """Linear or squared-cosine schedule over t_steps steps."""
    if not 1 <= t_steps <= 10000:
        raise InvalidRange(f"T must be in [1, 10000], got {t_steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRange(f"need 0 < beta_min <= beta_max < 1, got "
                           f"({beta_min}, {beta_max})")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, t_steps)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(t_steps + 1) / t_steps
        f = np.cos((grid + s) / (1.0 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise InvalidRange(f"unknown schedule kind {kind!r}")
    sched = NoiseSchedule(kind=kind, beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    sched.validate()
    if not sched.reaches_prior:
        log.debug("schedule terminal alpha_bar=%.3g does not reach the prior",
                  sched.alpha_bar[-1])
    return sched


def serialize_schedule(sched: NoiseSchedule) -> str:
    lines = [f"kind {sched.kind}", f"T {sched.t_max}"]
    lines += [f"beta {b!r}" for b in sched.beta]
    return "\n".join(lines) + "\n"


def deserialize_schedule(text: str) -> NoiseSchedule:
    kind = None
    betas = []
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = line.split(maxsplit=1)
        if key == "kind":
            kind = value
        elif key == "beta":
            betas.append(float(value))
    if kind is None or not betas:
        raise InvalidRange("unparseable schedule text")
    beta = np.array(betas)
    sched = NoiseSchedule(kind=kind, beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    sched.validate()
    return sched


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------

def forward_type(s0: int, t: int, sched: NoiseSchedule,
                 n_types: int = N_TYPES) -> np.ndarray:
    """Closed-form marginal q(s_t | s_0): alpha_bar on the identity plus
    uniform leakage."""
    abar = sched.alpha_bar_at(t)
    probs = np.full(n_types, (1.0 - abar) / n_types)
    probs[s0] += abar
    return probs


def type_step_matrix(t: int, sched: NoiseSchedule,
                     n_types: int = N_TYPES) -> np.ndarray:
    """Single-step kernel q(s_t | s_{t-1}) as a (to, from) matrix."""
    beta = sched.beta_at(t)
    return ((1.0 - beta) * np.eye(n_types)
            + beta / n_types * np.ones((n_types, n_types)))


def type_posterior(st: int, s0: int, t: int, sched: NoiseSchedule,
                   n_types: int = N_TYPES) -> np.ndarray:
    """Posterior over s_{t-1} given the observed s_t and the clean s_0,
    theta_r proportional to q(s_t | s_{t-1}=r) q(s_{t-1}=r | s_0)."""
    beta = sched.beta_at(t)
    abar_prev = sched.alpha_bar_at(t - 1)
    lik = np.full(n_types, beta / n_types)
    lik[st] += 1.0 - beta
    prior = np.full(n_types, (1.0 - abar_prev) / n_types)
    prior[s0] += abar_prev
    theta = lik * prior
    return theta / theta.sum()


def type_posterior_many(st: np.ndarray, s0: np.ndarray, t: int,
                        sched: NoiseSchedule,
                        n_types: int = N_TYPES) -> np.ndarray:
    """Row-wise type_posterior for aligned arrays of observed and clean
    types; returns (m, n_types)."""
    beta = sched.beta_at(t)
    abar_prev = sched.alpha_bar_at(t - 1)
    m = len(st)
    lik = np.full((m, n_types), beta / n_types)
    lik[np.arange(m), np.asarray(st, dtype=int)] += 1.0 - beta
    prior = np.full((m, n_types), (1.0 - abar_prev) / n_types)
    prior[np.arange(m), np.asarray(s0, dtype=int)] += abar_prev
    theta = lik * prior
    return theta / theta.sum(axis=1, keepdims=True)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF categorical draw (stable across numpy versions)."""
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(probs), u)), len(probs) - 1)


def forward_pos(x0: np.ndarray, t: int, sched: NoiseSchedule,
                rng: np.random.Generator) -> np.ndarray:
    """Gaussian corruption sqrt(abar) x0 + sqrt(1 - abar) z."""
    abar = sched.alpha_bar_at(t)
    if abar == 1.0:
        return np.asarray(x0, dtype=float).copy()
    z = rng.standard_normal(np.shape(x0))
    return np.sqrt(abar) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - abar) * z


def forward_orient(o0: np.ndarray, t: int, sched: NoiseSchedule,
                   rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian corruption on SO(3) with shrunk mean."""
    abar = sched.alpha_bar_at(t)
    if abar == 1.0:
        return np.asarray(o0, dtype=float).copy()
    mean = scale_rot(o0, np.sqrt(abar))
    return sample_igso3(mean, 1.0 - abar, rng)


# ---------------------------------------------------------------------------
# Complex-level noising
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Whitening:
    """Per-complex position normalization: (x - center) / scale."""

    center: np.ndarray
    scale: float

    def whiten(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.scale

    def unwhiten(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.center


def whitening_for(c: Complex) -> Whitening:
    """Center on the mask centroid; scale by the context CA RMS distance."""
    if len(c.mask_indices) == 0:
        raise EmptyMask("cannot whiten a complex with an empty mask")
    center = c.ca_pos[c.mask_indices].mean(axis=0)
    context = np.setdiff1d(np.arange(c.n), c.mask_indices)
    if len(context) == 0:
        scale = 1.0
    else:
        scale = float(np.sqrt(
            np.mean(np.sum((c.ca_pos[context] - center) ** 2, axis=1))))
    return Whitening(center=center, scale=max(scale, 1e-6))


@dataclass(frozen=True)
class NoisedComplex:
    """A complex whose mask residues carry state at diffusion time t."""

    complex: Complex
    t: int
    whitening: Whitening

    def with_complex(self, c: Complex, t: int) -> "NoisedComplex":
        return replace(self, complex=c, t=t)


def apply_mask_state(c: Complex, types, pos, orients) -> Complex:
    new_types = c.res_types.copy()
    new_pos = c.ca_pos.copy()
    new_orients = c.orients.copy()
    new_types[c.mask_indices] = types
    new_pos[c.mask_indices] = pos
    new_orients[c.mask_indices] = orients
    return c.with_arrays(res_types=new_types, ca_pos=new_pos, orients=new_orients)


def noise_complex(c: Complex, t: int, sched: NoiseSchedule,
                  rng: np.random.Generator) -> NoisedComplex:
    """Apply t steps of forward noise to every mask residue independently;
    context residues are untouched."""
    if len(c.mask_indices) == 0:
        raise EmptyMask("noise_complex requires a non-empty mask")
    wh = whitening_for(c)
    if t == 0:
        return NoisedComplex(complex=c, t=0, whitening=wh)
    mask = c.mask_indices
    types = np.array([
        sample_categorical(forward_type(int(c.res_types[j]), t, sched), rng)
        for j in mask])
    x0w = wh.whiten(c.ca_pos[mask])
    abar = sched.alpha_bar_at(t)
    xw = np.sqrt(abar) * x0w + np.sqrt(1.0 - abar) * rng.standard_normal(x0w.shape)
    means = scale_rot_many(c.orients[mask], np.sqrt(abar))
    orients = sample_igso3_many(means, 1.0 - abar, rng)
    noised = apply_mask_state(c, types, wh.unwhiten(xw), orients)
    return NoisedComplex(complex=noised, t=t, whitening=wh)


def noise_complex_pair(c: Complex, t: int, sched: NoiseSchedule,
                       rng: np.random.Generator
                       ) -> tuple[NoisedComplex, NoisedComplex]:
    """Jointly sample the forward states at t-1 and t.

    The t-1 state comes from the closed-form marginal; the t state is one
    single-step kernel application on top of it, so the pair is an exact
    draw from the forward process.
    """
    if t < 1:
        raise InvalidRange("pair sampling needs t >= 1")
    if len(c.mask_indices) == 0:
        raise EmptyMask("noise_complex_pair requires a non-empty mask")
    wh = whitening_for(c)
    mask = c.mask_indices
    beta = sched.beta_at(t)
    abar_prev = sched.alpha_bar_at(t - 1)

    types_tm1 = []
    types_t = []
    for j in mask:
        s_tm1 = sample_categorical(
            forward_type(int(c.res_types[j]), t - 1, sched), rng)
        step = np.full(N_TYPES, beta / N_TYPES)
        step[s_tm1] += 1.0 - beta
        types_tm1.append(s_tm1)
        types_t.append(sample_categorical(step, rng))

    x0w = wh.whiten(c.ca_pos[mask])
    if abar_prev == 1.0:
        x_tm1 = x0w.copy()
    else:
        x_tm1 = (np.sqrt(abar_prev) * x0w
                 + np.sqrt(1.0 - abar_prev) * rng.standard_normal(x0w.shape))
    x_t = (np.sqrt(1.0 - beta) * x_tm1
           + np.sqrt(beta) * rng.standard_normal(x0w.shape))

    if abar_prev == 1.0:
        o_tm1 = c.orients[mask].copy()
    else:
        o_tm1 = sample_igso3_many(
            scale_rot_many(c.orients[mask], np.sqrt(abar_prev)),
            1.0 - abar_prev, rng)
    o_t = sample_igso3_many(
        scale_rot_many(o_tm1, np.sqrt(1.0 - beta)), beta, rng)

    c_tm1 = apply_mask_state(c, np.array(types_tm1), wh.unwhiten(x_tm1), o_tm1)
    c_t = apply_mask_state(c, np.array(types_t), wh.unwhiten(x_t), o_t)
    return (NoisedComplex(c_tm1, t - 1, wh), NoisedComplex(c_t, t, wh))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    l_type: float
    l_pos: float
    l_orient: float
    total: float

    @classmethod
    def from_terms(cls, l_type: float, l_pos: float, l_orient: float,
                   lambdas=DEFAULT_LAMBDAS) -> "LossBreakdown":
        lt, lp, lo = lambdas
        return cls(l_type=l_type, l_pos=l_pos, l_orient=l_orient,
                   total=lt * l_type + lp * l_pos + lo * l_orient)


def kl_categorical(p: np.ndarray, q: np.ndarray,
                   floor: float = _PROB_FLOOR) -> float:
    """KL(p || q) with the predicted distribution floored to avoid log 0."""
    p = np.asarray(p, dtype=float)
    q = np.clip(np.asarray(q, dtype=float), floor, None)
    nz = p > 0.0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def losses(pred, noised_t: NoisedComplex, noised_tm1: NoisedComplex,
           clean: Complex, sched: NoiseSchedule,
           lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    """Per-term mean losses over the mask residues.

    pred must expose type_probs (m, 20), pos_mean (m, 3) in global
    coordinates, and orient_pred (m, 3, 3). Types are scored by the KL
    between the diffusion posterior and the predicted distribution,
    positions by whitened squared error against the t-1 sample, and
    orientations by the Frobenius deviation of (O_0)^T O_hat from the
    identity.
    """
    mask = clean.mask_indices
    m = len(mask)
    type_probs = np.asarray(pred.type_probs, dtype=float)
    pos_mean = np.asarray(pred.pos_mean, dtype=float)
    orient_pred = np.asarray(pred.orient_pred, dtype=float)
    if type_probs.shape != (m, type_probs.shape[1]) or len(pos_mean) != m \
            or len(orient_pred) != m:
        raise ShapeMismatch("prediction does not cover the mask residues")
    t = noised_t.t
    wh = noised_t.whitening

    l_type = 0.0
    l_pos = 0.0
    l_orient = 0.0
    for k, j in enumerate(mask):
        post = type_posterior(int(noised_t.complex.res_types[j]),
                              int(clean.res_types[j]), t, sched,
                              n_types=type_probs.shape[1])
        l_type += kl_categorical(post, type_probs[k])
        diff = (noised_tm1.complex.ca_pos[j] - pos_mean[k]) / wh.scale
        l_pos += float(np.dot(diff, diff))
        dev = clean.orients[j].T @ orient_pred[k] - np.eye(3)
        l_orient += float(np.sum(dev * dev))
    return LossBreakdown.from_terms(l_type / m, l_pos / m, l_orient / m, lambdas)
