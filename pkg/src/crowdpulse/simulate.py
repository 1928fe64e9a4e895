"""Generative simulation of the full platform system by competing risks.

Each step draws waiting times for every possible next event: an item start
(exponential), an item end and a user registration (exponential, scaled by
the number of active items), and a contribution for every at-risk
user-item pair via closed-form inverse-transform sampling of the
power-law-decayed intensity. The earliest candidate is realized and all
candidates are regenerated, which is valid because every draw is already
conditioned on survival to the current time.

Two equivalent engines are provided. The pairwise engine literally draws
one candidate per pair each step. The fast engine aggregates a user's
pairs into one draw (their intensities share the same decay profile, and
the backer shares of active items sum to one, so the total is again of
closed form with the item chosen by its intensity share) and keeps cached
candidates for users whose aggregate rate multiplier did not change;
conditioning a survived draw on a later start time leaves its law
unchanged, so the cache never alters the distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .events import (
    CONTRIBUTION,
    ITEM_END,
    ITEM_START,
    REGISTRATION,
    Event,
    EventLog,
    PlatformState,
    apply_event,
    contribution_count,
    relative_popularity,
)
from .intensity import Params


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    seed: int = 0
    max_events: int = 2_000_000
    replications: int = 1
    initial_state: PlatformState | None = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if not self.max_events > 0:
            raise ValueError(f"max_events must be > 0, got {self.max_events}")


@dataclass
class SimOutput:
    log: EventLog
    daily: dict  # day grid plus cumulative items/users/contributions arrays
    summary: dict
    replication: int = 0

    @property
    def cap_exceeded(self) -> bool:
        return self.summary["cap_exceeded"]


def sample_contribution_waiting(p: Params, state: PlatformState, user_id, item_id,
                                s: float, q: float) -> float:
    """Waiting time from s until the pair's next contribution, given survival.

    Inverts the conditional survival function exp(-integrated intensity)
    at the uniform draw ``q``. The distribution is defective: the decayed
    intensity has finite total mass, so small ``q`` returns infinity.
    """
    user = state.users.get(user_id)
    if user is None or user.registered_at > s:
        raise DomainError(f"user {user_id!r} not registered by {s}")
    if item_id not in state.active_items:
        raise DomainError(f"item {item_id!r} not active at {s}")
    if not 0.0 < q <= 1.0:
        raise DomainError(f"q must be in (0, 1], got {q}")
    c = contribution_count(state, user_id)
    rate = p.psi[c] + p.gamma[c] * relative_popularity(state, item_id)
    return _invert_waiting(rate, s - user.registered_at, p.kappa, p.delta, np.log(q))


def _invert_waiting(rate, elapsed, kappa, delta, log_q):
    """Root of the survival equation for multiplier ``rate`` at offset ``elapsed``."""
    offset = elapsed + kappa
    base = offset ** -delta
    if rate <= 0.0:
        return np.inf
    shifted = base + delta * log_q / rate
    if shifted <= 0.0:
        return np.inf
    return max(shifted ** (-1.0 / delta) - offset, 0.0)


def step(p: Params, state: PlatformState, rng, horizon: float):
    """One competing-risks transition; returns the realized Event or None.

    Draws an item-start wait, an item-end and a registration wait when any
    item is active, and one contribution wait per at-risk pair, then
    applies the earliest. Returns None (state untouched) when every
    candidate lands beyond the horizon.
    """
    if state.now >= horizon:
        return None
    s = state.now
    n_items = len(state.active_items)
    best_time = s + rng.exponential(1.0 / p.phi)
    best = ("start",)
    if n_items:
        t_end = s + rng.exponential(1.0 / (p.mu * n_items))
        if t_end < best_time:
            best_time, best = t_end, ("end",)
        t_reg = s + rng.exponential(1.0 / (p.sigma * n_items))
        if t_reg < best_time:
            best_time, best = t_reg, ("register",)
    for user_id in state.users:
        for item_id in state.active_items:
            q = rng.random()
            wait = sample_contribution_waiting(p, state, user_id, item_id, s, q)
            if s + wait < best_time:
                best_time, best = s + wait, ("contribute", user_id, item_id)
    if best_time > horizon:
        return None
    if best[0] == "start":
        event = Event(best_time, ITEM_START, item_id=_fresh_item_id(state))
    elif best[0] == "end":
        items = list(state.active_items)
        event = Event(best_time, ITEM_END, item_id=items[rng.integers(len(items))])
    elif best[0] == "register":
        event = Event(best_time, REGISTRATION, user_id=_fresh_user_id(state))
    else:
        event = Event(best_time, CONTRIBUTION, user_id=best[1], item_id=best[2])
    apply_event(state, event)
    return event


def _fresh_item_id(state):
    n = len(state.active_items) + len(state.retired_items)
    while f"i{n}" in state.active_items or f"i{n}" in state.retired_items:
        n += 1
    return f"i{n}"


def _fresh_user_id(state):
    n = len(state.users)
    while f"u{n}" in state.users:
        n += 1
    return f"u{n}"


class _FastEngine:
    """Per-user aggregated candidates with invalidation-based regeneration.

    A user's aggregate contribution rate is (|I| * psi[c] + gamma[c] *
    crowd) * decay(t - registration), where ``crowd`` is 1 while any
    active item has a backer. The multiplier changes only at item starts
    and ends, at crowd on/off flips, and at the user's own events, so
    cached candidates stay valid for everyone else.
    """

    def __init__(self, p: Params, state: PlatformState, rng):
        self.p = p
        self.state = state
        self.rng = rng
        self.psi = np.asarray(p.psi)
        self.gamma = np.asarray(p.gamma)
        self.user_ids: list = []
        self.reg = np.empty(0)
        self.regime = np.empty(0, dtype=np.int64)
        self.cand = np.empty(0)
        for user_id, user in state.users.items():
            self.user_ids.append(user_id)
        if self.user_ids:
            self.reg = np.array([state.users[u].registered_at for u in self.user_ids])
            self.regime = np.array([state.users[u].count for u in self.user_ids])
            self.cand = np.empty(len(self.user_ids))
            self._resample_all()

    def _multipliers(self):
        crowd = 1.0 if self.state.total_backers > 0 else 0.0
        return (len(self.state.active_items) * self.psi[self.regime]
                + crowd * self.gamma[self.regime])

    def _candidate_times(self, rates, reg, q):
        s = self.state.now
        offset = s - reg + self.p.kappa
        with np.errstate(divide="ignore", invalid="ignore"):
            base = offset ** -self.p.delta
            shifted = base + self.p.delta * np.log(q) / rates
            waits = np.where((rates > 0) & (shifted > 0),
                             np.maximum(shifted ** (-1.0 / self.p.delta) - offset, 0.0),
                             np.inf)
        return s + waits

    def _resample_all(self):
        if len(self.user_ids) == 0:
            return
        q = self.rng.random(len(self.user_ids))
        self.cand = self._candidate_times(self._multipliers(), self.reg, q)

    def _resample_user(self, idx):
        crowd = 1.0 if self.state.total_backers > 0 else 0.0
        c = self.regime[idx]
        rate = len(self.state.active_items) * self.psi[c] + crowd * self.gamma[c]
        self.cand[idx] = self._candidate_times(
            np.array([rate]), self.reg[idx:idx + 1], self.rng.random(1))[0]

    def _add_user(self, user_id):
        self.user_ids.append(user_id)
        self.reg = np.append(self.reg, self.state.now)
        self.regime = np.append(self.regime, 0)
        self.cand = np.append(self.cand, np.inf)
        self._resample_user(len(self.user_ids) - 1)

    def _choose_item(self, regime):
        items = list(self.state.active_items)
        weights = np.array([
            self.psi[regime] + self.gamma[regime] * relative_popularity(self.state, i)
            for i in items
        ])
        u = self.rng.random() * weights.sum()
        return items[int(np.searchsorted(np.cumsum(weights), u))]

    def next_event(self, horizon):
        state, p, rng = self.state, self.p, self.rng
        s = state.now
        n_items = len(state.active_items)
        best_time = s + rng.exponential(1.0 / p.phi)
        best = ("start", None)
        if n_items:
            t_end = s + rng.exponential(1.0 / (p.mu * n_items))
            if t_end < best_time:
                best_time, best = t_end, ("end", None)
            t_reg = s + rng.exponential(1.0 / (p.sigma * n_items))
            if t_reg < best_time:
                best_time, best = t_reg, ("register", None)
        if self.cand.size:
            idx = int(np.argmin(self.cand))
            if self.cand[idx] < best_time:
                best_time, best = self.cand[idx], ("contribute", idx)
        if best_time > horizon:
            return None

        kind = best[0]
        had_crowd = state.total_backers > 0
        if kind == "start":
            event = Event(best_time, ITEM_START,
                          item_id=_fresh_item_id(state))
            apply_event(state, event)
            self._resample_all()
        elif kind == "end":
            items = list(state.active_items)
            event = Event(best_time, ITEM_END, item_id=items[rng.integers(len(items))])
            apply_event(state, event)
            self._resample_all()
        elif kind == "register":
            event = Event(best_time, REGISTRATION,
                          user_id=_fresh_user_id(state))
            apply_event(state, event)
            self._add_user(event.user_id)
        else:
            idx = best[1]
            user_id = self.user_ids[idx]
            item_id = self._choose_item(int(self.regime[idx]))
            event = Event(best_time, CONTRIBUTION, user_id=user_id, item_id=item_id)
            apply_event(state, event)
            self.regime[idx] = state.users[user_id].count
            if state.total_backers > 0 and not had_crowd:
                self._resample_all()
            else:
                self._resample_user(idx)
        return event


def run(p: Params, cfg: SimConfig, replication: int = 0, engine: str = "fast") -> SimOutput:
    """Simulate one trajectory over [now, horizon].

    ``engine='fast'`` uses aggregated cached candidates; ``'pairwise'``
    regenerates one draw per at-risk pair each step. Both sample the same
    process law; paths differ because they consume randomness differently.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(replication)]))
    state = cfg.initial_state.copy() if cfg.initial_state is not None else PlatformState()
    if state.now >= cfg.horizon:
        raise ValueError("initial state already at or beyond the horizon")
    events = []
    cap_exceeded = False
    if engine == "fast":
        eng = _FastEngine(p, state, rng)
        while True:
            if len(events) >= cfg.max_events:
                cap_exceeded = True
                break
            event = eng.next_event(cfg.horizon)
            if event is None:
                break
            events.append(event)
    elif engine == "pairwise":
        while True:
            if len(events) >= cfg.max_events:
                cap_exceeded = True
                break
            event = step(p, state, rng, cfg.horizon)
            if event is None:
                break
            events.append(event)
    else:
        raise ValueError(f"unknown engine {engine!r}")

    log = EventLog(tuple(events), horizon=cfg.horizon)
    counts = log.counts()
    return SimOutput(
        log=log,
        daily=_daily_cumulative(log),
        summary={
            "events": len(events),
            "items_started": counts[ITEM_START],
            "items_ended": counts[ITEM_END],
            "users": counts[REGISTRATION],
            "contributions": counts[CONTRIBUTION],
            "cap_exceeded": cap_exceeded,
            "seed": cfg.seed,
            "replication": replication,
        },
        replication=replication,
    )


def replicate(p: Params, cfg: SimConfig, engine: str = "fast", processes: int = 1):
    """Independent replications with seed-derived streams, optionally parallel."""
    reps = range(cfg.replications)
    if processes > 1 and cfg.replications > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=processes) as pool:
            return list(pool.map(_run_one, [(p, cfg, r, engine) for r in reps]))
    return [run(p, cfg, replication=r, engine=engine) for r in reps]


def _run_one(args):
    p, cfg, replication, engine = args
    return run(p, cfg, replication=replication, engine=engine)


def _daily_cumulative(log: EventLog) -> dict:
    days = np.arange(int(np.ceil(log.horizon)) + 1)
    series = {"day": days}
    for key, kind in (("items", ITEM_START), ("users", REGISTRATION),
                      ("contributions", CONTRIBUTION)):
        times = np.array([e.time for e in log.events if e.kind == kind])
        series[key] = np.searchsorted(np.sort(times), days, side="right")
    return series


def envelope(outputs, quantiles=(0.05, 0.5, 0.95)) -> dict:
    """Pointwise per-day quantile bands across replications."""
    if not outputs:
        raise ValueError("no replications to summarize")
    days = max((out.daily["day"] for out in outputs), key=len)
    bands = {"day": days}
    for key in ("items", "users", "contributions"):
        stacked = np.vstack([
            np.pad(out.daily[key], (0, len(days) - len(out.daily[key])), mode="edge")
            for out in outputs
        ])
        for q in quantiles:
            bands[f"{key}_p{int(round(q * 100)):02d}"] = np.quantile(stacked, q, axis=0)
    return bands
