"""Time-rescaling goodness-of-fit diagnostics.

Transforming the observed contribution times by the overall compensator
(the sum of every pair's integrated intensity, including pairs that ended
without firing) must yield a unit-rate Poisson realization when the model
is right. The compensator is accumulated contribution-by-contribution:
between two consecutive contributions only that window's exposure needs
summing, per-user for the popularity-coupled part (backer shares sum to
one across active items) and per user-item pair only where an item starts
or ends inside the window.

On the rescaled times: interarrivals against Exponential(1), upper-tail
p-values, conditional-uniformity (Lewis) ratios, and a lag-1 dependence
diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import InsufficientData, NonIncreasing
from .events import (
    CONTRIBUTION,
    ITEM_END,
    ITEM_START,
    REGISTRATION,
    EventLog,
    PlatformState,
    apply_event,
)
from .intensity import Params, PowerLawDecay


@dataclass
class GofReport:
    transformed: np.ndarray  # rescaled contribution times
    deltas: np.ndarray  # interarrivals, first measured from zero
    p_values: np.ndarray  # upper-tail exp(-delta), from the second arrival on
    lewis_ratios: np.ndarray  # rescaled times conditioned on the last one
    ks_exponential: tuple  # (statistic, p-value) vs Exponential(1)
    ks_lewis: tuple  # (statistic, p-value) vs Uniform(0, 1)
    v_series: np.ndarray  # 1 - exp(-delta)
    lag1_pairs: np.ndarray  # (V_{r-1}, V_r) scatter rows
    lag1_correlation: float
    constant_interarrivals: bool


def rescale_times(p: Params, log: EventLog) -> np.ndarray:
    """Overall compensator evaluated at each contribution time.

    Accumulates increments over the windows between consecutive
    contributions. Within a window the baseline exposure sums one decay
    integral per user for every fully covering item, plus individual
    clipped integrals for items starting or ending inside; the
    popularity-coupled exposure sums one integral per user, restricted to
    the spells where any active item has a backer. Strictly increasing by
    construction; a non-increasing output signals numerical breakdown.
    """
    decay = PowerLawDecay(p.kappa, p.delta)
    psi = np.asarray(p.psi)
    gamma = np.asarray(p.gamma)

    reg_times, contribs, item_spans, boundaries, crowd = _scan(log)
    k = len(contribs)
    if k == 0:
        return np.empty(0)

    n_total = len(reg_times)
    reg = np.asarray(reg_times)
    regime = np.zeros(n_total, dtype=np.int64)
    out = np.empty(k)
    total = 0.0
    t_prev = 0.0
    n_users = 0
    n_active = 0  # items active at t_prev
    b_ptr = 0
    c_ptr = 0
    for r, (t_r, user_idx, is_new_item) in enumerate(contribs):
        while n_users < n_total and reg[n_users] < t_r:
            n_users += 1
        # items whose start or end falls inside this window get individual
        # clipped integrals; the rest contribute one shared integral each
        touched = {}
        while b_ptr < len(boundaries) and boundaries[b_ptr][0] <= t_r:
            _, is_start, item = boundaries[b_ptr]
            b_ptr += 1
            touched[item] = item_spans[item]
            n_active += 1 if is_start else -1
        # after popping, n_active counts items with start < t_r <= end;
        # drop the ones that only started inside this window
        n_full = n_active - sum(
            1 for y, z in touched.values() if y > t_prev and z >= t_r)
        if n_users:
            reg_w = reg[:n_users]
            c_w = regime[:n_users]
            lo = np.maximum(reg_w, t_prev) - reg_w
            hi = t_r - reg_w
            increment = 0.0
            if n_full:
                increment += n_full * float(psi[c_w] @ decay.integral(lo, hi))
            for y, z in touched.values():
                plo = np.maximum(np.maximum(reg_w, y), t_prev) - reg_w
                phi_ = np.minimum(t_r, z) - reg_w
                mask = phi_ > plo
                if np.any(mask):
                    increment += float(
                        psi[c_w[mask]] @ decay.integral(plo[mask], phi_[mask]))
            while c_ptr < len(crowd) and crowd[c_ptr][1] <= t_prev:
                c_ptr += 1
            j = c_ptr
            while j < len(crowd) and crowd[j][0] < t_r:
                a0, a1 = crowd[j]
                glo = np.maximum(np.maximum(reg_w, a0), t_prev) - reg_w
                ghi = min(t_r, a1) - reg_w
                mask = ghi > glo
                if np.any(mask):
                    increment += float(
                        gamma[c_w[mask]] @ decay.integral(glo[mask], ghi[mask]))
                j += 1
            total += increment
        out[r] = total
        if is_new_item and regime[user_idx] < 3:
            regime[user_idx] += 1
        t_prev = t_r
    if np.any(np.diff(out) <= 0) or (out.size and out[0] <= 0):
        raise NonIncreasing("rescaled times are not strictly increasing")
    return out


def _scan(log: EventLog):
    """One replay collecting the inputs the recursion needs."""
    state = PlatformState()
    reg_times = []
    user_index = {}
    contribs = []
    item_open = {}
    item_spans = []
    boundaries = []  # (time, is_start, item index), chronological
    crowd = []
    crowd_since = None
    for e in log.events:
        if e.kind == REGISTRATION:
            user_index[e.user_id] = len(reg_times)
            reg_times.append(e.time)
        elif e.kind == ITEM_START:
            item_open[e.item_id] = len(item_spans)
            item_spans.append([e.time, log.horizon])
            boundaries.append((e.time, True, item_open[e.item_id]))
        elif e.kind == ITEM_END:
            item_spans[item_open[e.item_id]][1] = e.time
            boundaries.append((e.time, False, item_open[e.item_id]))
        else:
            is_new = e.item_id not in state.users[e.user_id].backed_items
            contribs.append((e.time, user_index[e.user_id], is_new))
        had = state.total_backers > 0
        apply_event(state, e)
        has = state.total_backers > 0
        if has and not had and crowd_since is None:
            crowd_since = e.time
        elif had and not has and crowd_since is not None:
            crowd.append((crowd_since, e.time))
            crowd_since = None
    if crowd_since is not None:
        crowd.append((crowd_since, log.horizon))
    return reg_times, contribs, [tuple(s) for s in item_spans], boundaries, crowd


def uniformity_tests(transformed) -> dict:
    """Exponential(1) and conditional-uniformity checks on rescaled times.

    The Lewis statistic compares the sorted ratios t*_r / t*_k against
    their exact uniform order-statistic means r / k; its p-value uses the
    asymptotic Kolmogorov distribution, as does the exponential test.
    """
    t = np.asarray(transformed, dtype=float)
    if t.size < 2:
        raise InsufficientData("need at least 2 contributions for uniformity tests")
    deltas = np.diff(t, prepend=0.0)
    p_values = np.exp(-deltas[1:])
    ks_exp = stats.kstest(deltas, "expon", mode="asymp")
    ratios = t[:-1] / t[-1]
    positions = np.arange(1, t.size) / t.size
    lewis_stat = float(np.max(np.abs(np.sort(ratios) - positions)))
    lewis_p = float(special.kolmogorov(np.sqrt(ratios.size) * lewis_stat))
    return {
        "deltas": deltas,
        "p_values": p_values,
        "lewis_ratios": ratios,
        "ks_exponential": (float(ks_exp.statistic), float(ks_exp.pvalue)),
        "ks_lewis": (lewis_stat, lewis_p),
    }


def autocorrelation_diagnostic(transformed):
    """(V_{r-1}, V_r) scatter and lag-1 Pearson correlation of V = 1 - exp(-delta)."""
    t = np.asarray(transformed, dtype=float)
    if t.size < 3:
        raise InsufficientData("need at least 3 contributions for the lag-1 diagnostic")
    v = 1.0 - np.exp(-np.diff(t, prepend=0.0))
    pairs = np.column_stack([v[:-1], v[1:]])
    constant = bool(np.ptp(v) < 1e-12)
    if constant:
        corr = 0.0
    else:
        corr = float(np.corrcoef(v[:-1], v[1:])[0, 1])
    return pairs, corr, constant


def gof_report(p: Params, log: EventLog) -> GofReport:
    """Rescale the log's contribution times and run every diagnostic."""
    transformed = rescale_times(p, log)
    tests = uniformity_tests(transformed)
    pairs, corr, constant = autocorrelation_diagnostic(transformed)
    return GofReport(
        transformed=transformed,
        deltas=tests["deltas"],
        p_values=tests["p_values"],
        lewis_ratios=tests["lewis_ratios"],
        ks_exponential=tests["ks_exponential"],
        ks_lewis=tests["ks_lewis"],
        v_series=1.0 - np.exp(-tests["deltas"]),
        lag1_pairs=pairs,
        lag1_correlation=corr,
        constant_interarrivals=constant,
    )
