"""Pair conditional intensity, closed-form compensator, and decay kernels.

A user-item pair fires contributions at rate

    (psi[c] + gamma[c] * popularity) * (t - t_reg + kappa) ** -(1 + delta)

where ``c`` is the user's distinct-item contribution count (saturated at
3), ``popularity`` is the item's share of distinct backers among active
items, and ``t_reg`` the user's registration day. The power-law factor
integrates in closed form, so compensators over piecewise-constant
segments need no quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InactiveItem, PartitionError, UnknownUser
from .events import PlatformState, contribution_count, relative_popularity

PARAM_NAMES = (
    "phi", "mu", "sigma",
    "psi0", "psi1", "psi2", "psi3",
    "gamma0", "gamma1", "gamma2", "gamma3",
    "kappa", "delta",
)

N_PARAMS = len(PARAM_NAMES)
N_REGIMES = 4


@dataclass(frozen=True)
class Params:
    """The 13 positive model parameters.

    phi: item starts per day. mu: per-item end rate per day. sigma: user
    registrations per active item per day. psi/gamma: baseline and
    popularity-coupled contribution rates by contribution count 0..3.
    kappa (days) regularizes the decay at zero elapsed time; the decay
    exponent is 1 + delta.
    """

    phi: float
    mu: float
    sigma: float
    psi: tuple[float, float, float, float]
    gamma: tuple[float, float, float, float]
    kappa: float
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "psi", tuple(float(x) for x in self.psi))
        object.__setattr__(self, "gamma", tuple(float(x) for x in self.gamma))
        if len(self.psi) != N_REGIMES or len(self.gamma) != N_REGIMES:
            raise ValueError("psi and gamma must each have 4 entries")
        vec = self.to_array()
        if not np.all(np.isfinite(vec)) or np.any(vec <= 0.0):
            raise ValueError(f"all parameters must be finite and > 0, got {vec}")

    def to_array(self) -> np.ndarray:
        """Vector in the fixed order (phi, mu, sigma, psi0..3, gamma0..3, kappa, delta)."""
        return np.array(
            (self.phi, self.mu, self.sigma, *self.psi, *self.gamma, self.kappa, self.delta),
            dtype=float,
        )

    @classmethod
    def from_array(cls, vec) -> "Params":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {vec.shape}")
        return cls(
            phi=float(vec[0]), mu=float(vec[1]), sigma=float(vec[2]),
            psi=tuple(vec[3:7]), gamma=tuple(vec[7:11]),
            kappa=float(vec[11]), delta=float(vec[12]),
        )

    def to_dict(self) -> dict:
        return {name: value for name, value in zip(PARAM_NAMES, self.to_array())}

    @classmethod
    def from_dict(cls, d: dict) -> "Params":
        missing = [name for name in PARAM_NAMES if name not in d]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        return cls.from_array([float(d[name]) for name in PARAM_NAMES])


class PowerLawDecay:
    """Interest decay (w + kappa)^-(1+delta) of elapsed time w since registration.

    All methods are numpy-vectorized over ``w`` or segment bounds and work
    in log space so that extreme (kappa, delta) probes degrade to inf/nan
    rather than overflowing silently.
    """

    has_kappa = True

    def __init__(self, kappa: float, delta: float):
        if not (kappa > 0 and delta > 0):
            raise DomainError(f"kappa and delta must be > 0, got {kappa}, {delta}")
        self.kappa = float(kappa)
        self.delta = float(delta)

    def value(self, w):
        return np.exp(self.log_value(w))

    def log_value(self, w):
        return -(1.0 + self.delta) * np.log(np.asarray(w, dtype=float) + self.kappa)

    def integral(self, a, b):
        """Integral of the decay over elapsed-time interval [a, b], 0 <= a <= b."""
        la = np.log(np.asarray(a, dtype=float) + self.kappa)
        lb = np.log(np.asarray(b, dtype=float) + self.kappa)
        return (np.exp(-self.delta * la) - np.exp(-self.delta * lb)) / self.delta

    def event_terms(self, w, order=2):
        """Log-decay at elapsed times ``w`` with partials in (kappa, delta)."""
        w = np.asarray(w, dtype=float)
        x = w + self.kappa
        lx = np.log(x)
        out = {"logv": -(1.0 + self.delta) * lx}
        if order >= 1:
            out["lk"] = -(1.0 + self.delta) / x
            out["ld"] = -lx
        if order >= 2:
            out["lkk"] = (1.0 + self.delta) / (x * x)
            out["lkd"] = -1.0 / x
        return out

    def segment_terms(self, a, b, order=2):
        """Decay integral over [a, b] with partials in (kappa, delta).

        Keys: I and, by order, Ik, Id, Ikk, Ikd, Idd.
        """
        d = self.delta
        A = np.asarray(a, dtype=float) + self.kappa
        B = np.asarray(b, dtype=float) + self.kappa
        xa, xb = np.log(A), np.log(B)
        va, vb = np.exp(-d * xa), np.exp(-d * xb)
        out = {"I": (va - vb) / d}
        if order >= 1:
            out["Ik"] = vb / B - va / A
            out["Id"] = (vb * (d * xb + 1.0) - va * (d * xa + 1.0)) / d**2
        if order >= 2:
            out["Ikk"] = (1.0 + d) * (va / (A * A) - vb / (B * B))
            out["Ikd"] = -(xb * vb / B - xa * va / A)
            out["Idd"] = (va * ((d * xa + 1.0) ** 2 + 1.0)
                          - vb * ((d * xb + 1.0) ** 2 + 1.0)) / d**3
        return out


class ExponentialDecay:
    """Interest decay exp(-delta * w); the model-selection alternative kernel."""

    has_kappa = False

    def __init__(self, delta: float):
        if not delta > 0:
            raise DomainError(f"delta must be > 0, got {delta}")
        self.delta = float(delta)

    def value(self, w):
        return np.exp(-self.delta * np.asarray(w, dtype=float))

    def log_value(self, w):
        return -self.delta * np.asarray(w, dtype=float)

    def integral(self, a, b):
        d = self.delta
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return (np.exp(-d * a) - np.exp(-d * b)) / d

    def event_terms(self, w, order=2):
        w = np.asarray(w, dtype=float)
        out = {"logv": -self.delta * w}
        if order >= 1:
            out["ld"] = -w
        return out

    def segment_terms(self, a, b, order=2):
        d = self.delta
        xa = np.asarray(a, dtype=float)
        xb = np.asarray(b, dtype=float)
        va, vb = np.exp(-d * xa), np.exp(-d * xb)
        out = {"I": (va - vb) / d}
        if order >= 1:
            out["Id"] = (vb * (d * xb + 1.0) - va * (d * xa + 1.0)) / d**2
        if order >= 2:
            out["Idd"] = (va * ((d * xa + 1.0) ** 2 + 1.0)
                          - vb * ((d * xb + 1.0) ** 2 + 1.0)) / d**3
        return out


@dataclass(frozen=True)
class PairSegment:
    """A slice of one pair's risk window on which its rate multiplier is constant.

    ``lo``/``hi`` are absolute days, ``count`` the contribution-count
    regime in force, ``popularity`` the item's backer share frozen at the
    left endpoint, and ``registered_at`` the user's registration day.
    """

    lo: float
    hi: float
    count: int
    popularity: float
    registered_at: float

    def __post_init__(self):
        if not (self.registered_at <= self.lo <= self.hi):
            raise PartitionError(
                f"segment bounds must satisfy t_reg <= lo <= hi, got "
                f"({self.registered_at}, {self.lo}, {self.hi})"
            )
        if not 0 <= self.count <= 3:
            raise PartitionError(f"count must be in 0..3, got {self.count}")
        if not 0.0 <= self.popularity <= 1.0:
            raise PartitionError(f"popularity must be in [0, 1], got {self.popularity}")


def pair_intensity(p: Params, state: PlatformState, user_id, item_id, t: float) -> float:
    """Contribution rate of the pair at time t, given the current state.

    Strictly positive and finite for valid parameters; decreasing in t
    while the state is frozen.
    """
    user = state.users.get(user_id)
    if user is None:
        raise UnknownUser(f"user {user_id!r} not registered")
    if t < user.registered_at:
        raise DomainError(
            f"t={t} precedes registration of {user_id!r} at {user.registered_at}"
        )
    if item_id not in state.active_items:
        raise InactiveItem(f"item {item_id!r} not active")
    c = contribution_count(state, user_id)
    pop = relative_popularity(state, item_id)
    decay = PowerLawDecay(p.kappa, p.delta)
    return (p.psi[c] + p.gamma[c] * pop) * float(decay.value(t - user.registered_at))


def pair_compensator(p: Params, segments, t: float) -> float:
    """Integrated pair intensity up to time t over contiguous segments.

    Segments must tile the pair's window without gaps or overlaps;
    segments at or beyond t contribute nothing, and the one containing t
    is clipped. Additive over adjacent windows by construction.
    """
    segments = list(segments)
    if not segments:
        return 0.0
    decay = PowerLawDecay(p.kappa, p.delta)
    tol = 1e-9 * max(1.0, abs(t))
    total = 0.0
    prev_hi = None
    for seg in segments:
        if prev_hi is not None and abs(seg.lo - prev_hi) > tol:
            raise PartitionError(
                f"segments must be contiguous: previous hi {prev_hi}, next lo {seg.lo}"
            )
        prev_hi = seg.hi
        lo, hi = seg.lo, min(seg.hi, t)
        if hi <= lo:
            continue
        rate = p.psi[seg.count] + p.gamma[seg.count] * seg.popularity
        total += rate * float(
            decay.integral(lo - seg.registered_at, hi - seg.registered_at)
        )
    return total


def contagion_effect(p: Params) -> np.ndarray:
    """gamma[c] / psi[c] for c = 0..3: crowd pull relative to own engagement."""
    return np.asarray(p.gamma, dtype=float) / np.asarray(p.psi, dtype=float)


def derived_rates(p: Params) -> dict:
    """Interpretation-level quantities implied by the fitted rates."""
    decay = PowerLawDecay(p.kappa, p.delta)
    return {
        "new_items_per_year": 365.0 * p.phi,
        "mean_item_duration_days": 1.0 / p.mu,
        "mean_active_items": p.phi / p.mu,
        "one_day_interest_drop": 1.0 - float(decay.value(1.0) / decay.value(0.0)),
        "contagion_effect": contagion_effect(p).tolist(),
    }
