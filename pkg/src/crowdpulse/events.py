"""Event vocabulary and right-continuous platform state.

Four event kinds drive the system: item start, item end, user
registration, and a user's contribution to an item. Replaying an ordered
event log through :func:`apply_event` maintains the running state that
every other module (likelihood, simulation, diagnostics) reads: the set of
active items, each user's distinct-item contribution count, each item's
distinct-backer count, and the total backers over active items.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import InactiveItem, InvalidTransition, UnknownUser

ITEM_START = "start"
ITEM_END = "end"
REGISTRATION = "register"
CONTRIBUTION = "contribute"

KINDS = (ITEM_START, ITEM_END, REGISTRATION, CONTRIBUTION)

#: Contribution counts saturate here; "3" reads as "3 or more".
MAX_COUNT = 3


@dataclass(frozen=True)
class Event:
    """One timestamped platform event.

    time is in days since platform launch. user_id is set for
    registrations and contributions, item_id for item starts/ends and
    contributions.
    """

    time: float
    kind: str
    user_id: str | None = None
    item_id: str | None = None

    def __post_init__(self):
        if not (self.time >= 0.0 and self.time < float("inf")):
            raise InvalidTransition(f"event time must be finite and >= 0, got {self.time}")
        if self.kind not in KINDS:
            raise InvalidTransition(f"unknown event kind {self.kind!r}")
        if self.kind in (ITEM_START, ITEM_END) and self.item_id is None:
            raise InvalidTransition(f"{self.kind} event requires item_id")
        if self.kind == REGISTRATION and self.user_id is None:
            raise InvalidTransition("registration event requires user_id")
        if self.kind == CONTRIBUTION and (self.user_id is None or self.item_id is None):
            raise InvalidTransition("contribution event requires user_id and item_id")


@dataclass(frozen=True)
class EventLog:
    """Strictly time-ordered events observed on [0, horizon]."""

    events: tuple[Event, ...]
    horizon: float = None  # type: ignore[assignment]

    def __post_init__(self):
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        for prev, cur in zip(events, events[1:]):
            if cur.time <= prev.time:
                raise InvalidTransition(
                    f"event times must be strictly increasing: {prev.time} then {cur.time}"
                )
        if self.horizon is None:
            horizon = events[-1].time if events else 0.0
            object.__setattr__(self, "horizon", float(horizon))
        elif events and self.horizon < events[-1].time:
            raise InvalidTransition(
                f"horizon {self.horizon} precedes last event at {events[-1].time}"
            )

    def __len__(self):
        return len(self.events)

    def counts(self):
        """Event totals as a dict keyed by kind."""
        out = {k: 0 for k in KINDS}
        for e in self.events:
            out[e.kind] += 1
        return out


@dataclass
class UserState:
    registered_at: float
    backed_items: set = field(default_factory=set)
    count: int = 0  # distinct items backed, saturated at MAX_COUNT


@dataclass
class PlatformState:
    """Mutable running state; single-writer, copy for shared snapshots."""

    now: float = 0.0
    active_items: dict = field(default_factory=dict)  # item_id -> start time
    item_backers: dict = field(default_factory=dict)  # item_id -> distinct backers
    users: dict = field(default_factory=dict)  # user_id -> UserState
    total_backers: int = 0
    retired_items: set = field(default_factory=set)  # ids of ended items

    def copy(self) -> "PlatformState":
        users = {
            u: replace(s, backed_items=set(s.backed_items)) for u, s in self.users.items()
        }
        return PlatformState(
            now=self.now,
            active_items=dict(self.active_items),
            item_backers=dict(self.item_backers),
            users=users,
            total_backers=self.total_backers,
            retired_items=set(self.retired_items),
        )


def apply_event(state: PlatformState, event: Event) -> PlatformState:
    """Advance the state by one event, validating it against the history.

    Mutates and returns ``state``. A contribution increments the item's
    backer count and the user's contribution count only when the user has
    not backed that item before (both are distinct counts); repeat
    contributions to the same item are legal events that change neither.
    """
    if event.time < state.now:
        raise InvalidTransition(
            f"event at {event.time} precedes state time {state.now}"
        )
    if event.kind == ITEM_START:
        if event.item_id in state.active_items or event.item_id in state.retired_items:
            raise InvalidTransition(f"item id {event.item_id!r} reused")
        state.active_items[event.item_id] = event.time
        state.item_backers[event.item_id] = 0
    elif event.kind == ITEM_END:
        if event.item_id not in state.active_items:
            raise InvalidTransition(f"end of unknown or inactive item {event.item_id!r}")
        del state.active_items[event.item_id]
        state.retired_items.add(event.item_id)
        state.total_backers -= state.item_backers.pop(event.item_id)
    elif event.kind == REGISTRATION:
        if event.user_id in state.users:
            raise InvalidTransition(f"user {event.user_id!r} registered twice")
        state.users[event.user_id] = UserState(registered_at=event.time)
    else:  # CONTRIBUTION
        user = state.users.get(event.user_id)
        if user is None:
            raise InvalidTransition(
                f"contribution by unregistered user {event.user_id!r}"
            )
        if event.item_id not in state.active_items:
            raise InvalidTransition(
                f"contribution to inactive item {event.item_id!r} at {event.time}"
            )
        if event.item_id not in user.backed_items:
            user.backed_items.add(event.item_id)
            user.count = min(MAX_COUNT, user.count + 1)
            state.item_backers[event.item_id] += 1
            state.total_backers += 1
    state.now = event.time
    return state


def contribution_count(state: PlatformState, user_id) -> int:
    """Distinct items the user has backed so far, saturated at 3."""
    user = state.users.get(user_id)
    if user is None:
        raise UnknownUser(f"user {user_id!r} not registered by t={state.now}")
    return user.count


def relative_popularity(state: PlatformState, item_id) -> float:
    """The item's share of distinct backers among active items.

    Returns 0 while no active item has any backer: there is no crowd
    signal to share, and this keeps the ratio finite.
    """
    if item_id not in state.active_items:
        raise InactiveItem(f"item {item_id!r} not active at t={state.now}")
    if state.total_backers == 0:
        return 0.0
    return state.item_backers[item_id] / state.total_backers


def replay(log: EventLog, state: PlatformState | None = None) -> PlatformState:
    """Apply every event in order, returning the final state."""
    state = PlatformState() if state is None else state
    for e in log.events:
        apply_event(state, e)
    return state
