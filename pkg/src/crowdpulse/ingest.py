"""Raw-table ingestion: parsing, tie-breaking jitter, and summaries.

Three CSV tables (items, users, contributions) become one strictly
ordered EventLog. Source timestamps usually have coarse resolution, so
equal-time groups are broken with sub-millisecond uniform jitter plus a
topological re-sort that keeps registration before a user's own
contribution, an item's start before its contributions, and contributions
before the item's end. The jitter stream is keyed per row, so appending
rows never perturbs existing ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import CausalityError, InvalidTransition, ParseError, SchemaError
from .events import (
    CONTRIBUTION,
    ITEM_END,
    ITEM_START,
    REGISTRATION,
    Event,
    EventLog,
    PlatformState,
    apply_event,
    relative_popularity,
)

#: One millisecond expressed in days; the jitter never exceeds this.
MILLISECOND_DAYS = 1.0 / 86_400_000.0

SECONDS_PER_DAY = 86_400.0

ITEMS_HEADER = ["item_id", "start_time", "end_time"]
USERS_HEADER = ["user_id", "registration_time"]
CONTRIBUTIONS_HEADER = ["contribution_id", "user_id", "item_id", "time"]

EVENTS_HEADER = ["time_days", "kind", "user_id", "item_id"]

# jitter stream keys, one per event slot so item starts and ends of the
# same row draw independent noise
_JITTER_START, _JITTER_END, _JITTER_REG, _JITTER_CONTRIB = 0, 1, 2, 3


@dataclass
class RawTables:
    """Parsed input rows with times in days since the earliest timestamp."""

    items: list  # (item_id, start_days, end_days | None)
    users: list  # (user_id, registration_days)
    contributions: list  # (contribution_id, user_id, item_id, days)
    time_origin: str  # earliest raw timestamp, as parsed text


@dataclass
class IngestReport:
    counts: dict
    repeat_pair_contributions: int
    ties_repaired: int
    dropped_rows: int
    flags: dict
    time_origin: str
    jitter_seed: int | None


@dataclass
class DatasetSummary:
    """Plot-ready descriptive series derived from one replay of the log."""

    users_by_item_count: dict  # distinct items backed -> number of users
    contributions_per_item: dict  # item_id -> contributions received
    first_contribution_survival: list  # (days since registration, S(t))
    daily: dict  # day -> {"active_items", "new_users", "contributions"}
    popularity_rows: list  # (time_days, item_id, relative popularity)


def _parse_time(cell, time_format, row_num, column, path):
    text = cell.strip()
    if not text:
        raise ParseError(f"{path}: empty time in row {row_num}, column {column!r}",
                         row=row_num, column=column)
    if time_format == "days":
        try:
            value = float(text)
        except ValueError:
            raise ParseError(
                f"{path}: cannot parse {text!r} as float days "
                f"(row {row_num}, column {column!r})", row=row_num, column=column
            ) from None
        return value
    try:
        stamp = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ParseError(
            f"{path}: cannot parse {text!r} as ISO-8601 "
            f"(row {row_num}, column {column!r})", row=row_num, column=column
        ) from None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp() / SECONDS_PER_DAY


def _read_rows(path, expected_header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected_header:
            raise SchemaError(
                f"{path}: header {header} does not match expected {expected_header}"
            )
        return list(reader)


def load_tables(items_path, users_path, contributions_path, time_format="iso") -> RawTables:
    """Parse the three raw tables and normalize times to days since launch.

    The launch time (t = 0) is the minimum timestamp seen anywhere in the
    three tables.
    """
    if time_format not in ("iso", "days"):
        raise SchemaError(f"time_format must be 'iso' or 'days', got {time_format!r}")

    items, users, contributions = [], [], []
    seen = set()
    for row_num, row in enumerate(_read_rows(items_path, ITEMS_HEADER), start=2):
        if len(row) != 3:
            raise ParseError(f"{items_path}: row {row_num} has {len(row)} cells", row=row_num)
        item_id = row[0].strip()
        if not item_id or ("item", item_id) in seen:
            raise SchemaError(f"{items_path}: empty or duplicate item_id in row {row_num}")
        seen.add(("item", item_id))
        start = _parse_time(row[1], time_format, row_num, "start_time", items_path)
        end = None
        if row[2].strip():
            end = _parse_time(row[2], time_format, row_num, "end_time", items_path)
        items.append((item_id, start, end))

    for row_num, row in enumerate(_read_rows(users_path, USERS_HEADER), start=2):
        if len(row) != 2:
            raise ParseError(f"{users_path}: row {row_num} has {len(row)} cells", row=row_num)
        user_id = row[0].strip()
        if not user_id or ("user", user_id) in seen:
            raise SchemaError(f"{users_path}: empty or duplicate user_id in row {row_num}")
        seen.add(("user", user_id))
        users.append((user_id, _parse_time(row[1], time_format, row_num,
                                           "registration_time", users_path)))

    for row_num, row in enumerate(_read_rows(contributions_path, CONTRIBUTIONS_HEADER),
                                  start=2):
        if len(row) != 4:
            raise ParseError(f"{contributions_path}: row {row_num} has {len(row)} cells",
                             row=row_num)
        cid = row[0].strip()
        if not cid or ("contrib", cid) in seen:
            raise SchemaError(
                f"{contributions_path}: empty or duplicate contribution_id in row {row_num}"
            )
        seen.add(("contrib", cid))
        contributions.append((cid, row[1].strip(), row[2].strip(),
                              _parse_time(row[3], time_format, row_num, "time",
                                          contributions_path)))

    all_times = ([t for _, t, _ in items]
                 + [t for _, _, t in items if t is not None]
                 + [t for _, t in users]
                 + [t for *_, t in contributions])
    if not all_times:
        raise SchemaError("no timestamps found in any table")
    origin = min(all_times)
    items = [(i, s - origin, None if e is None else e - origin) for i, s, e in items]
    users = [(u, t - origin) for u, t in users]
    contributions = [(c, u, i, t - origin) for c, u, i, t in contributions]
    return RawTables(items=items, users=users, contributions=contributions,
                     time_origin=repr(origin))


def _check_raw_causality(tables: RawTables):
    """Reject strict raw-order violations; only exact ties are repairable."""
    item_window = {i: (s, e) for i, s, e in tables.items}
    reg_time = dict(tables.users)
    for i, s, e in tables.items:
        if e is not None and e < s:
            raise CausalityError(f"item {i!r} ends at {e} before it starts at {s}")
    for cid, u, i, t in tables.contributions:
        if u not in reg_time:
            raise CausalityError(f"contribution {cid!r} references unknown user {u!r}")
        if i not in item_window:
            raise CausalityError(f"contribution {cid!r} references unknown item {i!r}")
        if t < reg_time[u]:
            raise CausalityError(
                f"contribution {cid!r} at {t} predates registration of {u!r} "
                f"at {reg_time[u]}"
            )
        start, end = item_window[i]
        if t < start:
            raise CausalityError(
                f"contribution {cid!r} at {t} predates start of item {i!r} at {start}"
            )
        if end is not None and t > end:
            raise CausalityError(
                f"contribution {cid!r} at {t} postdates end of item {i!r} at {end}"
            )


def _jitter(seed, slot, row_idx):
    rng = np.random.default_rng(np.random.SeedSequence([seed, slot, row_idx]))
    return rng.random() * MILLISECOND_DAYS


def _topological_tie_order(group):
    """Order records with equal raw timestamps so causal edges point forward.

    Among records with no pending predecessor, the one with the smallest
    jittered time goes first, which keeps the re-sort stable.
    """
    n = len(group)
    succ = [[] for _ in range(n)]
    pending = [0] * n
    by_item_start = {}
    by_user_reg = {}
    for idx, rec in enumerate(group):
        if rec["kind"] == ITEM_START:
            by_item_start[rec["item_id"]] = idx
        elif rec["kind"] == REGISTRATION:
            by_user_reg[rec["user_id"]] = idx

    def add_edge(a, b):
        succ[a].append(b)
        pending[b] += 1

    for idx, rec in enumerate(group):
        if rec["kind"] == CONTRIBUTION:
            if rec["user_id"] in by_user_reg:
                add_edge(by_user_reg[rec["user_id"]], idx)
            if rec["item_id"] in by_item_start:
                add_edge(by_item_start[rec["item_id"]], idx)
        elif rec["kind"] == ITEM_END:
            if rec["item_id"] in by_item_start:
                add_edge(by_item_start[rec["item_id"]], idx)
            for jdx, other in enumerate(group):
                if other["kind"] == CONTRIBUTION and other["item_id"] == rec["item_id"]:
                    add_edge(jdx, idx)

    ready = sorted((i for i in range(n) if pending[i] == 0),
                   key=lambda i: (group[i]["time"], i))
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        changed = False
        for j in succ[i]:
            pending[j] -= 1
            if pending[j] == 0:
                ready.append(j)
                changed = True
        if changed:
            ready.sort(key=lambda i: (group[i]["time"], i))
    if len(order) != n:
        raise CausalityError("cyclic ordering constraints among tied events")
    return order


def jitter_and_merge(tables: RawTables, seed: int | None = 0):
    """Merge the tables into a strictly ordered, causally valid EventLog.

    Every event receives independent uniform noise on [0, 1 ms); records
    sharing an identical raw timestamp are then re-sorted topologically so
    the repaired order respects registration/start/end constraints. With
    ``seed=None`` no jitter is applied and the input must already be
    strictly ordered (the canonical-export reload path).
    """
    _check_raw_causality(tables)
    records = []
    for row_idx, (item_id, start, end) in enumerate(tables.items):
        records.append({"raw": start, "kind": ITEM_START, "item_id": item_id,
                        "user_id": None, "slot": _JITTER_START, "row": row_idx})
        if end is not None:
            records.append({"raw": end, "kind": ITEM_END, "item_id": item_id,
                            "user_id": None, "slot": _JITTER_END, "row": row_idx})
    for row_idx, (user_id, reg) in enumerate(tables.users):
        records.append({"raw": reg, "kind": REGISTRATION, "item_id": None,
                        "user_id": user_id, "slot": _JITTER_REG, "row": row_idx})
    for row_idx, (cid, user_id, item_id, t) in enumerate(tables.contributions):
        records.append({"raw": t, "kind": CONTRIBUTION, "item_id": item_id,
                        "user_id": user_id, "slot": _JITTER_CONTRIB, "row": row_idx})

    ties_repaired = 0
    if seed is None:
        for rec in records:
            rec["time"] = rec["raw"]
    else:
        for rec in records:
            rec["time"] = rec["raw"] + _jitter(seed, rec["slot"], rec["row"])
        groups = {}
        for rec in records:
            groups.setdefault(rec["raw"], []).append(rec)
        for raw, group in groups.items():
            if len(group) < 2:
                continue
            order = _topological_tie_order(group)
            times = sorted(rec["time"] for rec in group)
            if [group[i]["time"] for i in order] != times:
                ties_repaired += 1
            for slot_time, idx in zip(times, order):
                group[idx]["time"] = slot_time

    records.sort(key=lambda rec: rec["time"])
    for prev, cur in zip(records, records[1:]):
        if cur["time"] <= prev["time"]:
            raise CausalityError(
                f"events closer than the jitter scale at raw times "
                f"{prev['raw']} and {cur['raw']}; re-run with exact (pre-ordered) "
                f"input or distinct timestamps"
            )

    events = tuple(Event(rec["time"], rec["kind"], user_id=rec["user_id"],
                         item_id=rec["item_id"]) for rec in records)
    try:
        log = EventLog(events)
        repeat_pairs = _validate_replay(log)
    except InvalidTransition as exc:
        raise CausalityError(
            f"log does not replay cleanly after tie repair: {exc}"
        ) from exc

    counts = log.counts()
    report = IngestReport(
        counts=counts,
        repeat_pair_contributions=repeat_pairs,
        ties_repaired=ties_repaired,
        dropped_rows=0,
        flags={"repeat_pair_contributions": repeat_pairs},
        time_origin=tables.time_origin,
        jitter_seed=seed,
    )
    return log, report


def _validate_replay(log: EventLog) -> int:
    state = PlatformState()
    repeats = 0
    for e in log.events:
        if (e.kind == CONTRIBUTION
                and e.user_id in state.users
                and e.item_id in state.users[e.user_id].backed_items):
            repeats += 1
        apply_event(state, e)
    return repeats


def summarize(log: EventLog) -> DatasetSummary:
    """Descriptive series: engagement histograms, survival, daily tempo."""
    state = PlatformState()
    contributions_per_item = {}
    first_contribution = {}
    daily_new_users = {}
    daily_contributions = {}
    popularity_rows = []
    for e in log.events:
        if e.kind == REGISTRATION:
            day = int(e.time)
            daily_new_users[day] = daily_new_users.get(day, 0) + 1
        elif e.kind == CONTRIBUTION:
            day = int(e.time)
            daily_contributions[day] = daily_contributions.get(day, 0) + 1
            contributions_per_item[e.item_id] = contributions_per_item.get(e.item_id, 0) + 1
            first_contribution.setdefault(e.user_id, e.time)
        apply_event(state, e)
        if e.kind in (ITEM_START, ITEM_END, CONTRIBUTION) and state.total_backers > 0:
            for item in state.active_items:
                popularity_rows.append((e.time, item, relative_popularity(state, item)))

    users_by_item_count = {}
    for user_id, user in state.users.items():
        k = len(user.backed_items)
        users_by_item_count[k] = users_by_item_count.get(k, 0) + 1

    durations, observed = [], []
    for user_id, user in state.users.items():
        if user_id in first_contribution:
            durations.append(first_contribution[user_id] - user.registered_at)
            observed.append(True)
        else:
            durations.append(log.horizon - user.registered_at)
            observed.append(False)
    survival = _kaplan_meier(np.asarray(durations), np.asarray(observed, dtype=bool))

    active_per_day = {}
    item_windows = []
    open_items = {}
    for e in log.events:
        if e.kind == ITEM_START:
            open_items[e.item_id] = e.time
        elif e.kind == ITEM_END:
            item_windows.append((open_items.pop(e.item_id), e.time))
    item_windows.extend((start, log.horizon) for start in open_items.values())
    for day in range(int(np.ceil(log.horizon)) + 1):
        active_per_day[day] = sum(1 for s, z in item_windows if s <= day < z)

    days = sorted(set(active_per_day) | set(daily_new_users) | set(daily_contributions))
    daily = {
        day: {
            "active_items": active_per_day.get(day, 0),
            "new_users": daily_new_users.get(day, 0),
            "contributions": daily_contributions.get(day, 0),
        }
        for day in days
    }
    return DatasetSummary(
        users_by_item_count=users_by_item_count,
        contributions_per_item=contributions_per_item,
        first_contribution_survival=survival,
        daily=daily,
        popularity_rows=popularity_rows,
    )


def _kaplan_meier(durations, observed):
    """Product-limit survival estimate with right censoring."""
    if durations.size == 0:
        return []
    order = np.argsort(durations, kind="stable")
    durations, observed = durations[order], observed[order]
    at_risk = durations.size
    survival = 1.0
    points = [(0.0, 1.0)]
    idx = 0
    while idx < durations.size:
        t = durations[idx]
        deaths = 0
        removed = 0
        while idx < durations.size and durations[idx] == t:
            deaths += int(observed[idx])
            removed += 1
            idx += 1
        if deaths:
            survival *= 1.0 - deaths / at_risk
            points.append((float(t), float(survival)))
        at_risk -= removed
    return points


def export_events(log: EventLog, path):
    """Write the canonical events.csv (17 significant digits, lossless)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for e in log.events:
            writer.writerow([f"{e.time:.17g}", e.kind, e.user_id or "", e.item_id or ""])


def load_events(path) -> EventLog:
    """Reload a canonical events.csv without jitter; must replay cleanly."""
    events = []
    for row_num, row in enumerate(_read_rows(path, EVENTS_HEADER), start=2):
        if len(row) != 4:
            raise ParseError(f"{path}: row {row_num} has {len(row)} cells", row=row_num)
        time_str, kind, user_id, item_id = row
        try:
            t = float(time_str)
        except ValueError:
            raise ParseError(f"{path}: bad time {time_str!r} in row {row_num}",
                             row=row_num, column="time_days") from None
        events.append(Event(t, kind.strip(), user_id=user_id.strip() or None,
                            item_id=item_id.strip() or None))
    log = EventLog(tuple(events))
    _validate_replay(log)
    return log


def write_tables(log: EventLog, items_path, users_path, contributions_path):
    """Export a log back into the three raw tables (times in float days)."""
    open_items, item_rows, user_rows, contribution_rows = {}, {}, [], []
    for e in log.events:
        if e.kind == ITEM_START:
            open_items[e.item_id] = e.time
            item_rows[e.item_id] = [e.item_id, f"{e.time:.17g}", ""]
        elif e.kind == ITEM_END:
            item_rows[e.item_id][2] = f"{e.time:.17g}"
        elif e.kind == REGISTRATION:
            user_rows.append([e.user_id, f"{e.time:.17g}"])
        else:
            contribution_rows.append(
                [f"c{len(contribution_rows)}", e.user_id, e.item_id, f"{e.time:.17g}"]
            )
    with open(items_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ITEMS_HEADER)
        writer.writerows(item_rows.values())
    with open(users_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(USERS_HEADER)
        writer.writerows(user_rows)
    with open(contributions_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONTRIBUTIONS_HEADER)
        writer.writerows(contribution_rows)
