"""Per-user bounded, time-windowed click/impression history (the streaming-
phase user session server, in-process).

Each user carries two lists, clicked and unclicked, capped at 5 entries and
scoped to the last 3 days. An impression is recorded as unclicked right away;
a later click on the same ad adds a clicked entry and retires the matching
unclicked one, so a single exposure is never counted twice.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any

WINDOW_SECONDS = 3 * 24 * 3600
CAPACITY = 5


def _identity(ad) -> Any:
    ident = getattr(ad, "identity", None)
    return ident() if callable(ident) else ad


@dataclass
class _Entry:
    ad: Any
    ts: int
    seq: int  # arrival order, breaks timestamp ties deterministically


@dataclass
class _UserHistory:
    clicked: list[_Entry] = field(default_factory=list)
    unclicked: list[_Entry] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """Hashmap of user histories; per-user operations serialize, users don't."""

    def __init__(self, capacity: int = CAPACITY, window_seconds: int = WINDOW_SECONDS):
        self.capacity = capacity
        self.window_seconds = window_seconds
        self._users: dict[str, _UserHistory] = {}
        self._lock = threading.Lock()
        self._seq = 0

    def _user(self, user_id: str) -> _UserHistory:
        with self._lock:
            hist = self._users.get(user_id)
            if hist is None:
                hist = self._users[user_id] = _UserHistory()
            return hist

    def record_event(self, user_id: str, ad, clicked: bool, ts: int) -> None:
        """Insert one behavior event, keeping ts order and the capacity cap."""
        if ts < 0:
            raise ValueError(f"negative timestamp {ts}")
        hist = self._user(user_id)
        with self._lock:
            seq = self._seq = self._seq + 1
        with hist.lock:
            target = hist.clicked if clicked else hist.unclicked
            if clicked:
                self._retire_unclicked(hist, ad, ts)
            self._insert(target, _Entry(ad, ts, seq))

    def _insert(self, entries: list[_Entry], entry: _Entry) -> None:
        pos = len(entries)
        while pos > 0 and (entries[pos - 1].ts, entries[pos - 1].seq) > (entry.ts, entry.seq):
            pos -= 1
        entries.insert(pos, entry)
        if len(entries) > self.capacity:
            del entries[0]

    def _retire_unclicked(self, hist: _UserHistory, ad, click_ts: int) -> None:
        ident = _identity(ad)
        for i in range(len(hist.unclicked) - 1, -1, -1):
            e = hist.unclicked[i]
            if e.ts <= click_ts and _identity(e.ad) == ident:
                del hist.unclicked[i]
                return

    def get_history(self, user_id: str, now: int) -> tuple[tuple, tuple]:
        """(clicked, unclicked) ads within the window, most recent first.

        Unknown users get two empty tuples; expired entries are purged lazily.
        """
        with self._lock:
            hist = self._users.get(user_id)
        if hist is None:
            return (), ()
        cutoff = now - self.window_seconds
        with hist.lock:
            for entries in (hist.clicked, hist.unclicked):
                while entries and entries[0].ts <= cutoff:
                    del entries[0]
            clicked = tuple(e.ad for e in reversed(hist.clicked))
            unclicked = tuple(e.ad for e in reversed(hist.unclicked))
        return clicked, unclicked

    def user_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._users)

    # -- snapshot / restore (TSV: user_id \t {clk|unclk} \t ts \t ad fields) --

    def snapshot(self, path) -> None:
        from .ingest import serialize_ad

        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for user_id in self.user_ids():
                hist = self._users[user_id]
                with hist.lock:
                    for tag, entries in (("clk", hist.clicked), ("unclk", hist.unclicked)):
                        for e in entries:
                            fh.write(f"{user_id}\t{tag}\t{e.ts}\t{serialize_ad(e.ad)}\n")

    @classmethod
    def restore(cls, path, schemas, vocab, capacity: int = CAPACITY,
                window_seconds: int = WINDOW_SECONDS) -> "SessionStore":
        from .ingest import parse_ad

        store = cls(capacity=capacity, window_seconds=window_seconds)
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                user_id, tag, ts, ad_text = line.rstrip("\n").split("\t")
                group = "clicked" if tag == "clk" else "unclicked"
                ad = parse_ad(ad_text, schemas[group], vocab)
                store.record_event(user_id, ad, clicked=(tag == "clk"), ts=int(ts))
        return store
