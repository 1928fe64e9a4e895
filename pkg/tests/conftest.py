"""Shared fixtures: hand-rolled random event logs independent of the simulator."""

import numpy as np
import pytest

from crowdpulse.events import (
    CONTRIBUTION,
    ITEM_END,
    ITEM_START,
    REGISTRATION,
    Event,
    EventLog,
    PlatformState,
    apply_event,
)


def make_random_log(seed=0, n_events=200, model_consistent=True, mean_gap=0.05,
                    p_start=0.08, p_end=0.05, p_register=0.35, repeat_frac=0.15):
    """Build a random valid EventLog by sampling feasible events.

    ``model_consistent`` forbids registrations while no item is active,
    matching the generative model's registration rate of zero there. The
    construction never consults the intensity model, so logs from here are
    an independent input source for likelihood and diagnostic tests.
    """
    rng = np.random.default_rng(seed)
    state = PlatformState()
    events = []
    t = 0.0
    next_item = 0
    next_user = 0
    while len(events) < n_events:
        t += rng.exponential(mean_gap)
        choices = ["start"]
        weights = [p_start]
        if state.active_items:
            choices.append("end")
            weights.append(p_end)
        if not model_consistent or state.active_items:
            choices.append("register")
            weights.append(p_register)
        pairs_possible = state.users and state.active_items
        if pairs_possible:
            choices.append("contribute")
            weights.append(1.0 - sum(weights))
        weights = np.asarray(weights) / np.sum(weights)
        action = rng.choice(choices, p=weights)
        if action == "start":
            e = Event(t, ITEM_START, item_id=f"i{next_item}")
            next_item += 1
        elif action == "end":
            item = str(rng.choice(sorted(state.active_items)))
            e = Event(t, ITEM_END, item_id=item)
        elif action == "register":
            e = Event(t, REGISTRATION, user_id=f"u{next_user}")
            next_user += 1
        else:
            user = str(rng.choice(sorted(state.users)))
            backed = sorted(state.users[user].backed_items & set(state.active_items))
            if backed and rng.random() < repeat_frac:
                item = str(rng.choice(backed))
            else:
                item = str(rng.choice(sorted(state.active_items)))
            e = Event(t, CONTRIBUTION, user_id=user, item_id=item)
        apply_event(state, e)
        events.append(e)
    return EventLog(tuple(events))


@pytest.fixture
def random_log_factory():
    return make_random_log
