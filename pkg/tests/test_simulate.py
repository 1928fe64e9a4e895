import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import ks_2samp

from crowdpulse.errors import DomainError
from crowdpulse.events import (
    CONTRIBUTION,
    ITEM_START,
    REGISTRATION,
    Event,
    EventLog,
    PlatformState,
    apply_event,
    replay,
)
from crowdpulse.intensity import Params
from crowdpulse.simulate import (
    SimConfig,
    envelope,
    replicate,
    run,
    sample_contribution_waiting,
    step,
)

SMALL_PLATFORM = Params(
    phi=0.5, mu=0.1, sigma=1.0,
    psi=(0.05, 0.02, 0.05, 0.08),
    gamma=(0.2, 0.1, 0.3, 0.5),
    kappa=1e-3, delta=0.3,
)


def _pair_state(reg_at=0.0):
    state = PlatformState()
    apply_event(state, Event(0.0, ITEM_START, item_id="i"))
    apply_event(state, Event(reg_at, REGISTRATION, user_id="u"))
    return state


def _survival_gap(p, elapsed, q):
    """g(x) whose root is the sampled waiting time (popularity zero here)."""
    rate = p.psi[0]

    def g(x):
        lo = elapsed + p.kappa
        hi = elapsed + x + p.kappa
        return np.log(q) + rate / p.delta * (lo ** -p.delta - hi ** -p.delta)

    return g


class TestWaitingTimeSampler:
    def test_q_one_gives_zero_wait(self):
        state = _pair_state()
        assert sample_contribution_waiting(SMALL_PLATFORM, state, "u", "i", 2.0, 1.0) == 0.0

    def test_tiny_q_gives_infinity(self):
        state = _pair_state()
        w = sample_contribution_waiting(SMALL_PLATFORM, state, "u", "i", 2.0, 1e-300)
        assert w == np.inf

    @pytest.mark.parametrize("seed", range(20))
    def test_closed_form_matches_bisection_root(self, seed):
        rng = np.random.default_rng(seed)
        p = Params(phi=1, mu=1, sigma=1,
                   psi=(rng.uniform(0.01, 0.3),) * 4,
                   gamma=(1e-12,) * 4,
                   kappa=rng.uniform(5e-4, 5e-3), delta=rng.uniform(0.1, 0.6))
        s = rng.uniform(0.0, 5.0)
        q = rng.uniform(0.01, 0.999)
        state = _pair_state()
        w = sample_contribution_waiting(p, state, "u", "i", s, q)
        g = _survival_gap(p, s - 0.0, q)
        if w == np.inf:
            assert g(1e12) < 0  # total remaining mass below -log q
        else:
            assert abs(g(w)) < 1e-10
            if w > 0:
                root = brentq(g, 0.0, w * 10 + 1.0, xtol=1e-12)
                assert root == pytest.approx(w, abs=1e-9)

    def test_pair_not_at_risk_raises(self):
        state = _pair_state(reg_at=1.0)
        with pytest.raises(DomainError):
            sample_contribution_waiting(SMALL_PLATFORM, state, "u", "i", 0.5, 0.5)
        with pytest.raises(DomainError):
            sample_contribution_waiting(SMALL_PLATFORM, state, "u", "ghost", 2.0, 0.5)

    def test_resampling_point_leaves_law_unchanged(self):
        # drawing at s, versus drawing at s then re-drawing at s + gap for
        # survivors, must give the same distribution
        p = SMALL_PLATFORM
        state = _pair_state()
        s, gap, cap = 0.5, 0.4, 40.0
        rng = np.random.default_rng(77)
        n = 4000
        direct, staged = [], []
        for _ in range(n):
            w = sample_contribution_waiting(p, state, "u", "i", s, rng.random())
            direct.append(min(w, cap))
            w1 = sample_contribution_waiting(p, state, "u", "i", s, rng.random())
            if w1 <= gap:
                staged.append(w1)
            else:
                w2 = sample_contribution_waiting(p, state, "u", "i", s + gap, rng.random())
                staged.append(min(gap + w2, cap))
        assert ks_2samp(direct, staged).pvalue > 0.01


class TestStep:
    def test_empty_platform_only_starts(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            state = PlatformState()
            event = step(SMALL_PLATFORM, state, rng, horizon=1e6)
            assert event.kind == ITEM_START

    def test_no_items_means_no_registrations(self):
        # users exist but nothing is active: ends, registrations, and
        # contributions all have rate zero
        for seed in range(10):
            rng = np.random.default_rng(seed)
            state = PlatformState()
            apply_event(state, Event(0.0, REGISTRATION, user_id="u"))
            event = step(SMALL_PLATFORM, state, rng, horizon=1e6)
            assert event.kind == ITEM_START

    def test_beyond_horizon_returns_none(self):
        rng = np.random.default_rng(0)
        state = PlatformState()
        assert step(SMALL_PLATFORM, state, rng, horizon=1e-9) is None
        assert state.now == 0.0

    def test_item_start_count_matches_rate(self):
        # mean item-start count over [0, T] across replications ~ phi * T
        p = Params(phi=2.0, mu=0.05, sigma=1e-9, psi=(1e-9,) * 4,
                   gamma=(1e-9,) * 4, kappa=1e-3, delta=0.3)
        T, reps = 10.0, 200
        total = 0
        for r in range(reps):
            out = run(p, SimConfig(horizon=T, seed=123, replications=1), replication=r)
            total += out.summary["items_started"]
        mean = total / reps
        se = np.sqrt(p.phi * T / reps)
        assert abs(mean - p.phi * T) <= 3 * se


class TestRun:
    def test_same_seed_identical_output(self):
        cfg = SimConfig(horizon=30.0, seed=5)
        out1 = run(SMALL_PLATFORM, cfg)
        out2 = run(SMALL_PLATFORM, cfg)
        assert out1.log == out2.log
        assert out1.summary == out2.summary

    def test_tiny_horizon_usually_empty(self):
        p = Params(phi=0.3, mu=0.1, sigma=0.5, psi=(1e-3,) * 4,
                   gamma=(1e-2,) * 4, kappa=1e-3, delta=0.2)
        empty = sum(
            len(run(p, SimConfig(horizon=0.001, seed=s)).log) == 0 for s in range(20)
        )
        assert empty == 20

    @pytest.mark.parametrize("engine", ["fast", "pairwise"])
    def test_log_replays_cleanly_and_respects_windows(self, engine):
        out = run(SMALL_PLATFORM, SimConfig(horizon=40.0, seed=11), engine=engine)
        assert len(out.log) > 10
        replay(out.log)  # raises on any causality violation
        reg, windows = {}, {}
        for e in out.log.events:
            if e.kind == REGISTRATION:
                reg[e.user_id] = e.time
            elif e.kind == ITEM_START:
                windows[e.item_id] = [e.time, np.inf]
            elif e.kind == "end":
                windows[e.item_id][1] = e.time
            elif e.kind == CONTRIBUTION:
                assert e.time >= reg[e.user_id]
                lo, hi = windows[e.item_id]
                assert lo <= e.time <= hi

    def test_event_cap_flags_partial_log(self):
        out = run(SMALL_PLATFORM, SimConfig(horizon=100.0, seed=3, max_events=25))
        assert out.cap_exceeded and len(out.log) == 25

    def test_engines_sample_the_same_law(self):
        p = SMALL_PLATFORM
        reps = 120
        stats = {}
        for engine in ("fast", "pairwise"):
            contribs, firsts = [], []
            for r in range(reps):
                out = run(p, SimConfig(horizon=15.0, seed=17), replication=r,
                          engine=engine)
                contribs.append(out.summary["contributions"])
                times = [e.time for e in out.log.events if e.kind == CONTRIBUTION]
                firsts.append(times[0] if times else np.inf)
            stats[engine] = (contribs, firsts)
        assert ks_2samp(stats["fast"][0], stats["pairwise"][0]).pvalue > 0.01
        assert ks_2samp(
            np.minimum(stats["fast"][1], 15.0),
            np.minimum(stats["pairwise"][1], 15.0),
        ).pvalue > 0.01

    def test_first_contribution_fraction_matches_defective_mass(self):
        # single permanent item, negligible crowd coupling: the fraction of
        # users who ever contribute follows the defective power-law mass
        psi0 = 0.0264
        p = Params(phi=1e-12, mu=1e-12, sigma=20.0, psi=(psi0, 1e-9, 1e-9, 1e-9),
                   gamma=(1e-12,) * 4, kappa=1e-3, delta=0.3)
        state = PlatformState()
        apply_event(state, Event(0.0, ITEM_START, item_id="i0"))
        T = 50.0
        out = run(p, SimConfig(horizon=T, seed=29, initial_state=state))
        reg = {e.user_id: e.time for e in out.log.events if e.kind == REGISTRATION}
        contributed = {e.user_id for e in out.log.events if e.kind == CONTRIBUTION}
        assert len(reg) > 500
        probs = np.array([
            1.0 - np.exp(-psi0 / p.delta * (p.kappa ** -p.delta
                                            - (T - t0 + p.kappa) ** -p.delta))
            for t0 in reg.values()
        ])
        expected = probs.sum()
        se = np.sqrt(np.sum(probs * (1 - probs)))
        assert abs(len(contributed) - expected) <= 4 * se


class TestReplicate:
    def test_replications_are_independent_and_deterministic(self):
        cfg = SimConfig(horizon=20.0, seed=9, replications=3)
        outs = replicate(SMALL_PLATFORM, cfg)
        assert len(outs) == 3
        assert outs[0].log != outs[1].log
        again = replicate(SMALL_PLATFORM, cfg)
        for a, b in zip(outs, again):
            assert a.log == b.log

    def test_parallel_matches_sequential(self):
        cfg = SimConfig(horizon=15.0, seed=13, replications=4)
        seq = replicate(SMALL_PLATFORM, cfg, processes=1)
        par = replicate(SMALL_PLATFORM, cfg, processes=2)
        for a, b in zip(seq, par):
            assert a.log == b.log

    def test_envelope_bands_are_ordered(self):
        cfg = SimConfig(horizon=25.0, seed=21, replications=20)
        bands = envelope(replicate(SMALL_PLATFORM, cfg))
        for key in ("items", "users", "contributions"):
            assert np.all(bands[f"{key}_p05"] <= bands[f"{key}_p50"])
            assert np.all(bands[f"{key}_p50"] <= bands[f"{key}_p95"])
        assert len(bands["day"]) == 26
