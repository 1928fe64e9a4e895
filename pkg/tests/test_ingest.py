import csv

import numpy as np
import pytest

from crowdpulse.errors import CausalityError, ParseError, SchemaError
from crowdpulse.events import CONTRIBUTION, REGISTRATION, EventLog, replay
from crowdpulse.ingest import (
    MILLISECOND_DAYS,
    DatasetSummary,
    export_events,
    jitter_and_merge,
    load_events,
    load_tables,
    summarize,
    write_tables,
)
from tests.conftest import make_random_log


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_tables(tmp_path, items, users, contributions):
    paths = (tmp_path / "items.csv", tmp_path / "users.csv", tmp_path / "contributions.csv")
    _write_csv(paths[0], ["item_id", "start_time", "end_time"], items)
    _write_csv(paths[1], ["user_id", "registration_time"], users)
    _write_csv(paths[2], ["contribution_id", "user_id", "item_id", "time"], contributions)
    return paths


ISO_ITEMS = [["i1", "1970-01-01T00:00:00Z", "1970-01-10T00:00:00Z"],
             ["i2", "1970-01-02T00:00:00Z", ""]]
ISO_USERS = [["u1", "1970-01-02T00:00:00Z"], ["u2", "1970-01-03T12:00:00Z"]]
ISO_CONTRIBS = [["c1", "u1", "i1", "1970-01-02T00:00:00Z"],
                ["c2", "u2", "i1", "1970-01-04T00:00:00Z"],
                ["c3", "u2", "i2", "1970-01-04T00:00:00Z"]]


class TestLoadTables:
    def test_row_counts_and_day_conversion(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        tables = load_tables(*paths, time_format="iso")
        assert len(tables.items) == 2
        assert len(tables.users) == 2
        assert len(tables.contributions) == 3
        # origin is the minimum timestamp (1970-01-01), so i2 starts at day 1
        assert tables.items[1][1] == pytest.approx(1.0)
        assert tables.items[0][2] == pytest.approx(9.0)
        assert tables.items[1][2] is None

    def test_malformed_time_names_row(self, tmp_path):
        bad_users = [["u1", "not-a-time"]]
        paths = _write_tables(tmp_path, ISO_ITEMS, bad_users, [])
        with pytest.raises(ParseError) as err:
            load_tables(*paths, time_format="iso")
        assert err.value.row == 2

    def test_header_mismatch_raises(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        _write_csv(paths[0], ["id", "begin", "finish"], [])
        with pytest.raises(SchemaError):
            load_tables(*paths)

    def test_duplicate_id_raises(self, tmp_path):
        items = ISO_ITEMS + [["i1", "1970-01-05T00:00:00Z", ""]]
        paths = _write_tables(tmp_path, items, ISO_USERS, ISO_CONTRIBS)
        with pytest.raises(SchemaError):
            load_tables(*paths)

    def test_float_days_format(self, tmp_path):
        paths = _write_tables(tmp_path, [["i1", "0.0", "5.5"]], [["u1", "1.25"]], [])
        tables = load_tables(*paths, time_format="days")
        assert tables.users[0][1] == pytest.approx(1.25)


class TestJitterAndMerge:
    def test_ties_become_strictly_ordered(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        log, report = jitter_and_merge(load_tables(*paths), seed=1)
        times = [e.time for e in log.events]
        assert all(b > a for a, b in zip(times, times[1:]))
        assert report.counts == {"start": 2, "end": 1, "register": 2, "contribute": 3}

    def test_registration_ordered_before_tied_contribution(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        log, _ = jitter_and_merge(load_tables(*paths), seed=5)
        kinds = {(e.kind, e.user_id): e.time for e in log.events}
        assert kinds[(REGISTRATION, "u1")] < kinds[(CONTRIBUTION, "u1")]

    def test_jitter_stays_below_one_millisecond(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        tables = load_tables(*paths)
        raw = sorted([t for _, t, _ in tables.items]
                     + [t for _, _, t in tables.items if t is not None]
                     + [t for _, t in tables.users]
                     + [t for *_, t in tables.contributions])
        log, _ = jitter_and_merge(tables, seed=9)
        jittered = sorted(e.time for e in log.events)
        for a, b in zip(raw, jittered):
            assert 0.0 <= b - a < MILLISECOND_DAYS

    def test_same_seed_is_deterministic(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        log1, _ = jitter_and_merge(load_tables(*paths), seed=2)
        log2, _ = jitter_and_merge(load_tables(*paths), seed=2)
        assert log1 == log2

    def test_jitter_keyed_per_row(self, tmp_path):
        # appending a user must not change the jitter of existing rows
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        log1, _ = jitter_and_merge(load_tables(*paths), seed=3)
        paths = _write_tables(tmp_path, ISO_ITEMS,
                              ISO_USERS + [["u3", "1970-02-01T00:00:00Z"]], ISO_CONTRIBS)
        log2, _ = jitter_and_merge(load_tables(*paths), seed=3)
        times1 = {(e.kind, e.user_id, e.item_id): e.time for e in log1.events}
        times2 = {(e.kind, e.user_id, e.item_id): e.time for e in log2.events}
        for key, t in times1.items():
            assert times2[key] == t

    def test_replays_cleanly(self, tmp_path):
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, ISO_CONTRIBS)
        log, _ = jitter_and_merge(load_tables(*paths), seed=0)
        replay(log)

    def test_repeat_pairs_flagged(self, tmp_path):
        contribs = ISO_CONTRIBS + [["c4", "u1", "i1", "1970-01-05T00:00:00Z"]]
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, contribs)
        _, report = jitter_and_merge(load_tables(*paths), seed=0)
        assert report.repeat_pair_contributions == 1

    def test_contribution_before_registration_rejected(self, tmp_path):
        contribs = [["c1", "u1", "i1", "1970-01-01T12:00:00Z"]]
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, contribs)
        with pytest.raises(CausalityError):
            jitter_and_merge(load_tables(*paths), seed=0)

    def test_contribution_after_item_end_rejected(self, tmp_path):
        contribs = [["c1", "u1", "i1", "1970-03-01T00:00:00Z"]]
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, contribs)
        with pytest.raises(CausalityError):
            jitter_and_merge(load_tables(*paths), seed=0)

    def test_contribution_tied_with_item_end_ordered_before(self, tmp_path):
        contribs = ISO_CONTRIBS + [["c4", "u1", "i1", "1970-01-10T00:00:00Z"]]
        paths = _write_tables(tmp_path, ISO_ITEMS, ISO_USERS, contribs)
        log, _ = jitter_and_merge(load_tables(*paths), seed=4)
        replay(log)


class TestCanonicalRoundTrip:
    def test_export_reload_identical(self, tmp_path):
        log = make_random_log(seed=8, n_events=250)
        path = tmp_path / "events.csv"
        export_events(log, path)
        assert load_events(path) == log

    def test_table_round_trip_without_jitter(self, tmp_path):
        log = make_random_log(seed=12, n_events=300)
        paths = (tmp_path / "i.csv", tmp_path / "u.csv", tmp_path / "c.csv")
        write_tables(log, *paths)
        tables = load_tables(*paths, time_format="days")
        relogged, _ = jitter_and_merge(tables, seed=None)
        # reloading re-zeroes the clock at the earliest timestamp
        shift = log.events[0].time
        got = [(e.time, e.kind, e.user_id, e.item_id) for e in relogged.events]
        want = [(e.time - shift, e.kind, e.user_id, e.item_id) for e in log.events]
        np.testing.assert_allclose([g[0] for g in got], [w[0] for w in want],
                                   rtol=0, atol=1e-12)
        assert [g[1:] for g in got] == [w[1:] for w in want]


class TestSummarize:
    def test_one_user_two_items_histogram(self, tmp_path):
        paths = _write_tables(
            tmp_path,
            [["i1", "1970-01-01T00:00:00Z", ""], ["i2", "1970-01-01T06:00:00Z", ""]],
            [["u1", "1970-01-01T12:00:00Z"]],
            [["c1", "u1", "i1", "1970-01-02T00:00:00Z"],
             ["c2", "u1", "i2", "1970-01-03T00:00:00Z"]],
        )
        log, _ = jitter_and_merge(load_tables(*paths), seed=0)
        summary = summarize(log)
        assert summary.users_by_item_count == {2: 1}
        assert summary.contributions_per_item == {"i1": 1, "i2": 1}

    def test_empty_log_yields_empty_series(self):
        summary = summarize(EventLog(()))
        assert summary.users_by_item_count == {}
        assert summary.contributions_per_item == {}
        assert summary.first_contribution_survival == []
        assert summary.popularity_rows == []

    def test_daily_counts_reconcile_with_totals(self):
        log = make_random_log(seed=21, n_events=500)
        summary = summarize(log)
        counts = log.counts()
        assert sum(d["new_users"] for d in summary.daily.values()) == counts["register"]
        assert sum(d["contributions"] for d in summary.daily.values()) == counts["contribute"]

    def test_survival_starts_at_one_and_decreases(self):
        log = make_random_log(seed=4, n_events=400)
        surv = summarize(log).first_contribution_survival
        assert surv[0] == (0.0, 1.0)
        values = [s for _, s in surv]
        assert all(b <= a for a, b in zip(values, values[1:]))
