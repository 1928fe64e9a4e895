"""Exact likelihood machinery on interval sufficient statistics.

One replay of an EventLog produces three record families that make the
log-likelihood and all its derivatives O(records) to evaluate at any
parameter point:

* event terms: per contribution, the regime, item backer share, and
  elapsed time since registration just before the event;
* pair segments: each user-item risk window cut at the user's regime
  changes, carrying only the baseline (psi) exposure;
* user segments: per-user regime windows carrying the popularity-coupled
  (gamma) exposure with the item dimension summed out. Within any instant
  the backer shares of all active items sum to one, so the sum over a
  user's at-risk items collapses; the collapse is only valid while some
  active item has a backer, hence these windows exclude the spells where
  the platform has no backers at all.

The same records support restricted model variants (shared gamma, no
popularity term, exponential decay) through a linear projection of the
structured gradient and Hessian.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateData, NonFinite
from .events import (
    CONTRIBUTION,
    ITEM_END,
    ITEM_START,
    REGISTRATION,
    EventLog,
    PlatformState,
    apply_event,
)
from .intensity import ExponentialDecay, Params, PowerLawDecay

#: structured contribution-parameter order used by gradients/Hessians
BLOCK_NAMES = ("psi0", "psi1", "psi2", "psi3",
               "gamma0", "gamma1", "gamma2", "gamma3", "kappa", "delta")
N_BLOCK = len(BLOCK_NAMES)

_STATS_CACHE_VERSION = 1


class ContributionModel:
    """Structure of the contribution intensity: gamma coupling and decay kernel.

    gamma_mode is one of 'regimes' (one gamma per contribution count),
    'single' (one shared gamma), or 'none' (no popularity term);
    kernel_name is 'power' or 'exp'.
    """

    def __init__(self, gamma_mode="regimes", kernel_name="power"):
        if gamma_mode not in ("regimes", "single", "none"):
            raise ValueError(f"unknown gamma_mode {gamma_mode!r}")
        if kernel_name not in ("power", "exp"):
            raise ValueError(f"unknown kernel_name {kernel_name!r}")
        self.gamma_mode = gamma_mode
        self.kernel_name = kernel_name
        names = ["psi0", "psi1", "psi2", "psi3"]
        rows = [_unit_row(i) for i in range(4)]
        if gamma_mode == "regimes":
            names += ["gamma0", "gamma1", "gamma2", "gamma3"]
            rows += [_unit_row(4 + i) for i in range(4)]
        elif gamma_mode == "single":
            names += ["gamma"]
            rows += [_unit_row(4) + _unit_row(5) + _unit_row(6) + _unit_row(7)]
        if kernel_name == "power":
            names += ["kappa"]
            rows += [_unit_row(8)]
        names += ["delta"]
        rows += [_unit_row(9)]
        self.param_names = tuple(names)
        self.n_params = len(names)
        #: projection from the 10-slot structured block to this variant
        self.projection = np.vstack(rows)

    def expand(self, block):
        """Variant parameter vector -> (psi[4], gamma[4], kappa, delta)."""
        block = np.asarray(block, dtype=float)
        if block.shape != (self.n_params,):
            raise ValueError(
                f"expected {self.n_params} parameters for {self.param_names}, "
                f"got shape {block.shape}"
            )
        full = self.projection.T @ block
        psi, gamma = full[0:4], full[4:8]
        kappa = full[8] if self.kernel_name == "power" else None
        return psi, gamma, kappa, full[9]

    def kernel(self, block):
        psi, gamma, kappa, delta = self.expand(block)
        if self.kernel_name == "power":
            return PowerLawDecay(kappa, delta)
        return ExponentialDecay(delta)


def _unit_row(i):
    row = np.zeros(N_BLOCK)
    row[i] = 1.0
    return row


FULL_MODEL = ContributionModel("regimes", "power")


@dataclass
class SufficientStats:
    """Everything the likelihood needs, detached from the raw event list."""

    n: int
    a: int  # item starts
    b: int  # item ends
    d: int  # registrations
    k: int  # contributions
    T: float
    item_exposure: float  # integral of |I(t)| over [0, T]
    flow_log_items: float  # sum of log |I| just before end/registration events
    flow_finite: bool
    k_by_regime: np.ndarray  # (4,) contribution counts per regime

    ev_count: np.ndarray  # (k,) regime just before each contribution
    ev_pop: np.ndarray  # (k,) backer share of the target item just before
    ev_elapsed: np.ndarray  # (k,) time since the contributor registered
    ev_time: np.ndarray  # (k,) absolute event times
    ev_user: np.ndarray  # (k,) user index
    ev_item: np.ndarray  # (k,) item index

    ps_count: np.ndarray  # pair-segment regime
    ps_lo: np.ndarray  # pair-segment bounds, relative to registration
    ps_hi: np.ndarray
    ps_user: np.ndarray
    ps_item: np.ndarray

    us_count: np.ndarray  # user-segment regime
    us_lo: np.ndarray  # bounds relative to registration
    us_hi: np.ndarray
    us_user: np.ndarray

    user_ids: list = field(repr=False, default_factory=list)
    item_ids: list = field(repr=False, default_factory=list)
    log_hash: str = ""

    def for_users(self, user_indices) -> "SufficientStats":
        """Restrict the contribution-side records to a subset of users."""
        keep = np.zeros(len(self.user_ids), dtype=bool)
        keep[np.asarray(list(user_indices), dtype=int)] = True
        ev = keep[self.ev_user]
        ps = keep[self.ps_user]
        us = keep[self.us_user]
        return SufficientStats(
            n=self.n, a=self.a, b=self.b, d=self.d, k=int(np.sum(ev)), T=self.T,
            item_exposure=self.item_exposure, flow_log_items=self.flow_log_items,
            flow_finite=self.flow_finite,
            k_by_regime=np.bincount(self.ev_count[ev], minlength=4),
            ev_count=self.ev_count[ev], ev_pop=self.ev_pop[ev],
            ev_elapsed=self.ev_elapsed[ev], ev_time=self.ev_time[ev],
            ev_user=self.ev_user[ev], ev_item=self.ev_item[ev],
            ps_count=self.ps_count[ps], ps_lo=self.ps_lo[ps], ps_hi=self.ps_hi[ps],
            ps_user=self.ps_user[ps], ps_item=self.ps_item[ps],
            us_count=self.us_count[us], us_lo=self.us_lo[us], us_hi=self.us_hi[us],
            us_user=self.us_user[us],
            user_ids=self.user_ids, item_ids=self.item_ids, log_hash=self.log_hash,
        )


@dataclass
class Derivatives:
    loglik: float
    grad: np.ndarray  # (13,)
    hess: np.ndarray  # (13, 13), symmetric


def log_content_hash(log: EventLog) -> str:
    """Stable content hash of a log (canonical row encoding)."""
    h = hashlib.sha256()
    h.update(f"T={log.horizon:.17g}\n".encode())
    for e in log.events:
        h.update(f"{e.time:.17g},{e.kind},{e.user_id or ''},{e.item_id or ''}\n".encode())
    return h.hexdigest()


def build_sufficient_stats(log: EventLog) -> SufficientStats:
    """One sequential replay producing all likelihood records.

    Pair segments tile every overlapping user-item window cut only at the
    user's regime changes (at most four per pair); user segments tile each
    regime window intersected with the spells where the platform has at
    least one backer.
    """
    T = log.horizon
    state = PlatformState()
    user_index: dict = {}
    item_index: dict = {}
    reg_times: list = []
    regime_times: list = []  # per user, times of 1st..3rd distinct contributions
    item_start: list = []
    item_end: list = []

    counts = {ITEM_START: 0, ITEM_END: 0, REGISTRATION: 0, CONTRIBUTION: 0}
    exposure = 0.0
    flow_log_items = 0.0
    flow_finite = True
    prev_time = 0.0

    ev_count, ev_pop, ev_elapsed, ev_time, ev_user, ev_item = [], [], [], [], [], []

    crowd_intervals = []
    crowd_since = None

    for e in log.events:
        exposure += len(state.active_items) * (e.time - prev_time)
        prev_time = e.time
        counts[e.kind] += 1
        if e.kind == ITEM_START:
            item_index[e.item_id] = len(item_start)
            item_start.append(e.time)
            item_end.append(T)
        elif e.kind == ITEM_END:
            flow_log_items += _safe_log(len(state.active_items))
            item_end[item_index[e.item_id]] = e.time
        elif e.kind == REGISTRATION:
            n_active = len(state.active_items)
            if n_active == 0:
                flow_finite = False
            flow_log_items += _safe_log(n_active)
            user_index[e.user_id] = len(reg_times)
            reg_times.append(e.time)
            regime_times.append([])
        else:
            u = user_index[e.user_id]
            user = state.users[e.user_id]
            pop = (state.item_backers[e.item_id] / state.total_backers
                   if state.total_backers else 0.0)
            ev_count.append(user.count)
            ev_pop.append(pop)
            ev_elapsed.append(e.time - reg_times[u])
            ev_time.append(e.time)
            ev_user.append(u)
            ev_item.append(item_index[e.item_id])
            new_item = e.item_id not in user.backed_items
            if new_item and user.count < 3:
                regime_times[u].append(e.time)
        had_backers = state.total_backers > 0
        apply_event(state, e)
        has_backers = state.total_backers > 0
        if has_backers and not had_backers and crowd_since is None:
            crowd_since = e.time
        elif had_backers and not has_backers and crowd_since is not None:
            crowd_intervals.append((crowd_since, e.time))
            crowd_since = None
    exposure += len(state.active_items) * (T - prev_time)
    if crowd_since is not None:
        crowd_intervals.append((crowd_since, T))

    n_users = len(reg_times)
    n_items = len(item_start)
    reg = np.asarray(reg_times, dtype=float)
    # regime boundary matrix: column 0 is registration, columns 1..3 the
    # distinct-contribution times (T when never reached), column 4 is T
    bounds = np.full((max(n_users, 1), 5), T, dtype=float)
    if n_users:
        bounds[:, 0] = reg
        for u, times in enumerate(regime_times):
            for j, t in enumerate(times, start=1):
                bounds[u, j] = t

    ps_parts = {"count": [], "lo": [], "hi": [], "user": [], "item": []}
    if n_users and n_items:
        user_idx = np.arange(n_users)
        for j in range(n_items):
            y, z = item_start[j], item_end[j]
            if z <= y:
                continue
            for c in range(4):
                lo = np.maximum(bounds[:, c], y)
                hi = np.minimum(bounds[:, c + 1], z)
                keep = hi > lo
                if not np.any(keep):
                    continue
                ps_parts["count"].append(np.full(np.sum(keep), c, dtype=np.int8))
                ps_parts["lo"].append(lo[keep] - reg[keep])
                ps_parts["hi"].append(hi[keep] - reg[keep])
                ps_parts["user"].append(user_idx[keep])
                ps_parts["item"].append(np.full(np.sum(keep), j, dtype=np.int64))

    us_parts = {"count": [], "lo": [], "hi": [], "user": []}
    if n_users:
        user_idx = np.arange(n_users)
        for c in range(4):
            for a0, a1 in crowd_intervals:
                lo = np.maximum(bounds[:, c], a0)
                hi = np.minimum(bounds[:, c + 1], a1)
                keep = hi > lo
                if not np.any(keep):
                    continue
                us_parts["count"].append(np.full(np.sum(keep), c, dtype=np.int8))
                us_parts["lo"].append(lo[keep] - reg[keep])
                us_parts["hi"].append(hi[keep] - reg[keep])
                us_parts["user"].append(user_idx[keep])

    def _concat(parts, dtype=float):
        return (np.concatenate(parts) if parts else np.empty(0, dtype=dtype))

    k = counts[CONTRIBUTION]
    ev_count = np.asarray(ev_count, dtype=np.int8)
    return SufficientStats(
        n=len(log), a=counts[ITEM_START], b=counts[ITEM_END],
        d=counts[REGISTRATION], k=k, T=T,
        item_exposure=exposure, flow_log_items=flow_log_items, flow_finite=flow_finite,
        k_by_regime=np.bincount(ev_count, minlength=4),
        ev_count=ev_count,
        ev_pop=np.asarray(ev_pop, dtype=float),
        ev_elapsed=np.asarray(ev_elapsed, dtype=float),
        ev_time=np.asarray(ev_time, dtype=float),
        ev_user=np.asarray(ev_user, dtype=np.int64),
        ev_item=np.asarray(ev_item, dtype=np.int64),
        ps_count=_concat(ps_parts["count"], np.int8),
        ps_lo=_concat(ps_parts["lo"]),
        ps_hi=_concat(ps_parts["hi"]),
        ps_user=_concat(ps_parts["user"], np.int64),
        ps_item=_concat(ps_parts["item"], np.int64),
        us_count=_concat(us_parts["count"], np.int8),
        us_lo=_concat(us_parts["lo"]),
        us_hi=_concat(us_parts["hi"]),
        us_user=_concat(us_parts["user"], np.int64),
        user_ids=list(user_index), item_ids=list(item_index),
        log_hash=log_content_hash(log),
    )


def _safe_log(value):
    return np.log(value) if value > 0 else -np.inf


def _regime_sums(counts, weights):
    return np.bincount(counts, weights=weights, minlength=4)


def contribution_derivatives(block, stats: SufficientStats,
                             model: ContributionModel = FULL_MODEL, order=2):
    """Contribution-side loglik (flow terms excluded) with derivatives.

    Returns (loglik, grad, hess) in the variant's parameter layout; grad
    and hess are None below the requested order.
    """
    psi, gamma, kappa, delta = model.expand(block)
    if np.any(psi <= 0) or np.any(gamma < 0) or delta <= 0 or (
            kappa is not None and kappa <= 0):
        raise NonFinite(f"contribution parameters out of domain: {block}")
    kernel = model.kernel(block)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        P = psi[stats.ev_count] + gamma[stats.ev_count] * stats.ev_pop
        if np.any(P <= 0):
            raise NonFinite("zero intensity at a contribution")
        et = kernel.event_terms(stats.ev_elapsed, order)
        pst = kernel.segment_terms(stats.ps_lo, stats.ps_hi, order)
        ust = kernel.segment_terms(stats.us_lo, stats.us_hi, order)
        PS = {key: _regime_sums(stats.ps_count, val) for key, val in pst.items()}
        US = {key: _regime_sums(stats.us_count, val) for key, val in ust.items()}

        loglik = float(np.sum(np.log(P)) + np.sum(et["logv"])
                       - psi @ PS["I"] - gamma @ US["I"])
        grad = hess = None
        if order >= 1:
            inv = 1.0 / P
            g = np.zeros(N_BLOCK)
            g[0:4] = _regime_sums(stats.ev_count, inv) - PS["I"]
            g[4:8] = _regime_sums(stats.ev_count, stats.ev_pop * inv) - US["I"]
            if "Ik" in pst:
                g[8] = float(np.sum(et["lk"]) - psi @ PS["Ik"] - gamma @ US["Ik"])
            g[9] = float(np.sum(et["ld"]) - psi @ PS["Id"] - gamma @ US["Id"])
            grad = model.projection @ g
        if order >= 2:
            inv2 = inv * inv
            H = np.zeros((N_BLOCK, N_BLOCK))
            s2 = _regime_sums(stats.ev_count, inv2)
            spop2 = _regime_sums(stats.ev_count, stats.ev_pop * inv2)
            spp2 = _regime_sums(stats.ev_count, stats.ev_pop ** 2 * inv2)
            for c in range(4):
                H[c, c] = -s2[c]
                H[4 + c, 4 + c] = -spp2[c]
                H[c, 4 + c] = H[4 + c, c] = -spop2[c]
                H[c, 9] = H[9, c] = -PS["Id"][c]
                H[4 + c, 9] = H[9, 4 + c] = -US["Id"][c]
            H[9, 9] = float(-psi @ PS["Idd"] - gamma @ US["Idd"])
            if "Ik" in pst:
                for c in range(4):
                    H[c, 8] = H[8, c] = -PS["Ik"][c]
                    H[4 + c, 8] = H[8, 4 + c] = -US["Ik"][c]
                H[8, 8] = float(np.sum(et["lkk"])
                                - psi @ PS["Ikk"] - gamma @ US["Ikk"])
                H[8, 9] = H[9, 8] = float(np.sum(et["lkd"])
                                          - psi @ PS["Ikd"] - gamma @ US["Ikd"])
            hess = model.projection @ H @ model.projection.T

    if not np.isfinite(loglik):
        raise NonFinite(f"contribution loglik is not finite at {block}")
    if grad is not None and not np.all(np.isfinite(grad)):
        raise NonFinite(f"gradient is not finite at {block}")
    if hess is not None and not np.all(np.isfinite(hess)):
        raise NonFinite(f"hessian is not finite at {block}")
    return loglik, grad, hess


def flow_loglik(phi, mu, sigma, stats: SufficientStats):
    """Item-flow and registration terms of the log-likelihood."""
    if not stats.flow_finite:
        raise NonFinite(
            "a registration occurred with no active item; its model rate is zero"
        )
    return (stats.a * np.log(phi) + stats.b * np.log(mu) + stats.d * np.log(sigma)
            + stats.flow_log_items
            - phi * stats.T - (mu + sigma) * stats.item_exposure)


def derivatives(p: Params, stats: SufficientStats, order=2) -> Derivatives:
    """Log-likelihood of the full model with 13-gradient and 13x13 Hessian."""
    block = p.to_array()[3:13]
    ll_c, g_c, h_c = contribution_derivatives(block, stats, FULL_MODEL, order)
    loglik = float(flow_loglik(p.phi, p.mu, p.sigma, stats) + ll_c)
    grad = hess = None
    if order >= 1:
        grad = np.empty(13)
        grad[0] = stats.a / p.phi - stats.T
        grad[1] = stats.b / p.mu - stats.item_exposure
        grad[2] = stats.d / p.sigma - stats.item_exposure
        grad[3:] = g_c
    if order >= 2:
        hess = np.zeros((13, 13))
        hess[0, 0] = -stats.a / p.phi ** 2
        hess[1, 1] = -stats.b / p.mu ** 2
        hess[2, 2] = -stats.d / p.sigma ** 2
        hess[3:, 3:] = h_c
    return Derivatives(loglik=loglik, grad=grad, hess=hess)


def log_likelihood(p: Params, stats: SufficientStats) -> float:
    return derivatives(p, stats, order=0).loglik


def gradient(p: Params, stats: SufficientStats) -> np.ndarray:
    return derivatives(p, stats, order=1).grad


def hessian(p: Params, stats: SufficientStats) -> np.ndarray:
    return derivatives(p, stats, order=2).hess


def closed_form_rates(stats: SufficientStats):
    """Maximum-likelihood item-flow rates (phi, mu, sigma) in closed form."""
    if stats.T <= 0:
        raise DegenerateData("observation window has zero length")
    phi = stats.a / stats.T
    if stats.item_exposure <= 0:
        raise DegenerateData("no item exposure; mu and sigma are not estimable")
    mu = stats.b / stats.item_exposure
    sigma = stats.d / stats.item_exposure
    return phi, mu, sigma


def save_stats(stats: SufficientStats, path):
    """Binary cache of the sufficient statistics, keyed by the log hash."""
    np.savez_compressed(
        path,
        version=np.int64(_STATS_CACHE_VERSION),
        log_hash=np.bytes_(stats.log_hash.encode()),
        scalars=np.array([stats.n, stats.a, stats.b, stats.d, stats.k,
                          stats.T, stats.item_exposure, stats.flow_log_items,
                          float(stats.flow_finite)]),
        k_by_regime=stats.k_by_regime,
        ev=np.vstack([stats.ev_count, stats.ev_pop, stats.ev_elapsed,
                      stats.ev_time, stats.ev_user, stats.ev_item]),
        ps=np.vstack([stats.ps_count, stats.ps_lo, stats.ps_hi,
                      stats.ps_user, stats.ps_item]),
        us=np.vstack([stats.us_count, stats.us_lo, stats.us_hi, stats.us_user]),
        user_ids=np.array(stats.user_ids, dtype=object),
        item_ids=np.array(stats.item_ids, dtype=object),
    )


def load_stats(path, expected_log_hash=None) -> SufficientStats:
    with np.load(path, allow_pickle=True) as data:
        if int(data["version"]) != _STATS_CACHE_VERSION:
            raise DataError(f"unsupported stats cache version {int(data['version'])}")
        log_hash = bytes(data["log_hash"]).decode()
        if expected_log_hash is not None and log_hash != expected_log_hash:
            raise DataError("stats cache does not match the event log")
        sc = data["scalars"]
        ev, ps, us = data["ev"], data["ps"], data["us"]
        return SufficientStats(
            n=int(sc[0]), a=int(sc[1]), b=int(sc[2]), d=int(sc[3]), k=int(sc[4]),
            T=float(sc[5]), item_exposure=float(sc[6]), flow_log_items=float(sc[7]),
            flow_finite=bool(sc[8]), k_by_regime=data["k_by_regime"],
            ev_count=ev[0].astype(np.int8), ev_pop=ev[1], ev_elapsed=ev[2],
            ev_time=ev[3], ev_user=ev[4].astype(np.int64),
            ev_item=ev[5].astype(np.int64),
            ps_count=ps[0].astype(np.int8), ps_lo=ps[1], ps_hi=ps[2],
            ps_user=ps[3].astype(np.int64), ps_item=ps[4].astype(np.int64),
            us_count=us[0].astype(np.int8), us_lo=us[1], us_hi=us[2],
            us_user=us[3].astype(np.int64),
            user_ids=list(data["user_ids"]), item_ids=list(data["item_ids"]),
            log_hash=log_hash,
        )
