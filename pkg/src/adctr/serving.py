"""Desk-scale replica of the online phase: a model server scoring candidate
batches, an ad server running the two-round ranking protocol against the
session store, an event-log replayer, and an optional line-delimited TCP
protocol between the two halves.

Two-round protocol per request: round 1 scores every candidate with the
user's clicked/unclicked history and no contextual ads, and the highest-pCTR
candidate wins (ties go to the lowest ordinal). Round 2 re-scores the
remaining candidates with the winner as the single contextual ad and keeps
the top slots-1 of them. The re-scoring round runs exactly once.

Event log (TSV), replayed in file order, timestamps non-decreasing per user:

    IMP \\t ts \\t user_id \\t ad_fields          # impression -> unclicked
    CLICK \\t ts \\t user_id \\t ad_fields        # click -> clicked
    REQ \\t ts \\t user_id \\t request_id \\t slots \\t ad_fields|ad_fields|...

REQ candidates carry the target-schema ad fields; the user_id field is filled
in from the request. Behavior events become visible to requests only after
the configured propagation lag.

Wire protocol (one line per message):

    RANK <user_id> <now> <slots> <ad_id,ad_id,...>
    OK <ad_id>:<pctr>:<round> ...   |   ERR <message>
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .ingest import LabeledExample, ParseError, parse_ad, _parse_fields
from .models import ModelParams, forward_batch
from .schema import EncodedInstance, GroupSchema, Vocabulary
from .session import SessionStore


@dataclass(frozen=True)
class RankRequest:
    request_id: str
    user_id: str
    now: int
    candidates: tuple[EncodedInstance, ...]
    slots: int = 4

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("rank request needs at least one candidate")
        if self.slots < 1:
            raise ValueError("slots must be >= 1")
        seen: set = set()
        deduped = []
        for c in self.candidates:
            key = c.identity()
            if key not in seen:
                seen.add(key)
                deduped.append(c)
        object.__setattr__(self, "candidates", tuple(deduped))


@dataclass(frozen=True)
class RankedAd:
    ad: EncodedInstance
    pctr: float
    round: int


@dataclass(frozen=True)
class RankResult:
    request_id: str
    ranked: tuple[RankedAd, ...]

    @property
    def winner(self) -> RankedAd:
        return self.ranked[0]


def score_batch(model: ModelParams, history: tuple[Sequence, Sequence],
                contextual: Sequence[EncodedInstance],
                candidates: Sequence[EncodedInstance], now: int = 0,
                user_id: str = "") -> list[float]:
    """Eval-mode pCTR for each candidate, all sharing the same auxiliary sets;
    output order follows the candidate order."""
    clicked, unclicked = history
    examples = [LabeledExample(label=0, timestamp=now, user_id=user_id, target=c,
                               contextual=tuple(contextual), clicked=tuple(clicked),
                               unclicked=tuple(unclicked))
                for c in candidates]
    pctr, _ = forward_batch(model, examples, mode="eval")
    return [float(p) for p in pctr]


class ModelScorer:
    """Model-server half: scores candidate batches and counts forwards."""

    def __init__(self, model: ModelParams):
        self.model = model
        self.forward_count = 0

    def score(self, candidates, contextual, clicked, unclicked, now=0, user_id="") -> list[float]:
        self.forward_count += len(candidates)
        return score_batch(self.model, (clicked, unclicked), contextual, candidates,
                           now=now, user_id=user_id)


class StubScorer:
    """Context-insensitive scorer with a fixed per-ad score; used to check
    protocol shape independently of any trained model."""

    def __init__(self, score_of: Callable[[EncodedInstance], float]):
        self.score_of = score_of
        self.forward_count = 0

    def score(self, candidates, contextual, clicked, unclicked, now=0, user_id="") -> list[float]:
        self.forward_count += len(candidates)
        return [float(self.score_of(c)) for c in candidates]


def rank_request(scorer, store: SessionStore, req: RankRequest,
                 bids: Mapping | None = None) -> RankResult:
    """Two-round contextual-promotion ranking. With bids given, ads are
    ordered by pctr * bid instead of raw pctr (bids keyed by ad identity)."""
    clicked, unclicked = store.get_history(req.user_id, req.now)

    def key(ad: EncodedInstance, pctr: float) -> float:
        return pctr * float(bids[ad.identity()]) if bids is not None else pctr

    scores1 = scorer.score(req.candidates, (), clicked, unclicked,
                           now=req.now, user_id=req.user_id)
    keys1 = [key(ad, p) for ad, p in zip(req.candidates, scores1)]
    win = int(np.argmax(keys1))  # first occurrence wins ties
    ranked = [RankedAd(req.candidates[win], scores1[win], 1)]

    rest = [c for i, c in enumerate(req.candidates) if i != win]
    if rest:
        scores2 = scorer.score(rest, (req.candidates[win],), clicked, unclicked,
                               now=req.now, user_id=req.user_id)
        order = sorted(range(len(rest)), key=lambda i: (-key(rest[i], scores2[i]), i))
        ranked.extend(RankedAd(rest[i], scores2[i], 2) for i in order[: req.slots - 1])
    return RankResult(request_id=req.request_id, ranked=tuple(ranked))


class AdServer:
    """Ad-server half: owns the session store, serializes per-user requests."""

    def __init__(self, scorer, store: SessionStore, bids: Mapping | None = None):
        self.scorer = scorer
        self.store = store
        self.bids = bids
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _user_lock(self, user_id: str) -> threading.Lock:
        with self._guard:
            lock = self._locks.get(user_id)
            if lock is None:
                lock = self._locks[user_id] = threading.Lock()
            return lock

    def rank(self, req: RankRequest) -> RankResult:
        with self._user_lock(req.user_id):
            return rank_request(self.scorer, self.store, req, bids=self.bids)

    def record(self, user_id: str, ad, clicked: bool, ts: int) -> None:
        with self._user_lock(user_id):
            self.store.record_event(user_id, ad, clicked, ts)


# ---------------------------------------------------------------------------
# event-log replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimEvent:
    kind: str  # "imp" | "click" | "req"
    ts: int
    user_id: str
    ad: EncodedInstance | None = None
    request: RankRequest | None = None


def parse_events(path, schemas: Mapping[str, GroupSchema], vocab: Vocabulary) -> list[SimEvent]:
    events: list[SimEvent] = []
    cache: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            tag = cols[0]
            if tag in ("IMP", "CLICK"):
                if len(cols) != 4:
                    raise ParseError(f"{tag} line needs 4 columns", lineno)
                group = "clicked" if tag == "CLICK" else "unclicked"
                ad = parse_ad(cols[3], schemas[group], vocab, lineno, cache)
                events.append(SimEvent(kind=tag.lower(), ts=int(cols[1]), user_id=cols[2], ad=ad))
            elif tag == "REQ":
                if len(cols) != 6:
                    raise ParseError("REQ line needs 6 columns", lineno)
                ts, user_id = int(cols[1]), cols[2]
                candidates = tuple(
                    _encode_candidate(text, user_id, schemas["target"], vocab, lineno)
                    for text in cols[5].split("|"))
                events.append(SimEvent(kind="req", ts=ts, user_id=user_id,
                                       request=RankRequest(request_id=cols[3], user_id=user_id,
                                                           now=ts, candidates=candidates,
                                                           slots=int(cols[4]))))
            else:
                raise ParseError(f"unknown event tag {tag!r}", lineno)
    return events


def _encode_candidate(text: str, user_id: str, target_schema: GroupSchema,
                      vocab: Vocabulary, lineno: int) -> EncodedInstance:
    record = _parse_fields(text, lineno)
    record.setdefault("user_id", (user_id,))
    from .schema import encode_instance

    return encode_instance(record, target_schema, vocab)


def replay_session(scorer, store: SessionStore, events: Sequence[SimEvent],
                   lag_seconds: int = 0, bids: Mapping | None = None) -> list[RankResult]:
    """Interleave behavior events and rank requests; events reach the store
    only once the replay clock is at least lag_seconds past them."""
    last_ts: dict[str, int] = {}
    for ev in events:
        if ev.ts < last_ts.get(ev.user_id, ev.ts):
            raise ValueError(f"timestamps go backwards for user {ev.user_id!r}")
        last_ts[ev.user_id] = ev.ts

    server = AdServer(scorer, store, bids=bids)
    pending: list[SimEvent] = []
    results: list[RankResult] = []

    def flush(now: int) -> None:
        while pending and pending[0].ts + lag_seconds <= now:
            ev = pending.pop(0)
            server.record(ev.user_id, ev.ad, ev.kind == "click", ev.ts)

    for ev in events:
        if ev.kind == "req":
            flush(ev.ts)
            results.append(server.rank(ev.request))
        else:
            pending.append(ev)
    for ev in pending:
        server.record(ev.user_id, ev.ad, ev.kind == "click", ev.ts)
    return results


def ad_display_id(inst: EncodedInstance) -> str:
    return inst.raw_dict().get("ad_id", ("?",))[0]


def write_results(path, results: Sequence[RankResult]) -> None:
    """request_id \\t position \\t ad_id \\t round \\t pctr rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for res in results:
            for pos, ranked in enumerate(res.ranked):
                fh.write(f"{res.request_id}\t{pos}\t{ad_display_id(ranked.ad)}"
                         f"\t{ranked.round}\t{ranked.pctr:.6f}\n")


# ---------------------------------------------------------------------------
# line protocol over a local socket
# ---------------------------------------------------------------------------

class RankProtocolServer:
    """Threaded TCP server speaking the RANK line protocol. Candidates are
    referenced by ad_id against a preloaded catalog of target-schema ads."""

    def __init__(self, ad_server: AdServer, catalog: Mapping[str, Mapping[str, Sequence[str]]],
                 target_schema: GroupSchema, vocab: Vocabulary,
                 host: str = "127.0.0.1", port: int = 0):
        self.ad_server = ad_server
        self.catalog = dict(catalog)
        self.target_schema = target_schema
        self.vocab = vocab
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    reply = outer.handle_line(raw.decode("utf-8").rstrip("\r\n"))
                    self.wfile.write((reply + "\n").encode("utf-8"))
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def handle_line(self, line: str) -> str:
        try:
            parts = line.split(" ")
            if len(parts) != 5 or parts[0] != "RANK":
                return "ERR malformed request"
            _, user_id, now, slots, ad_ids = parts
            candidates = []
            from .schema import encode_instance

            for ad_id in ad_ids.split(","):
                record = self.catalog.get(ad_id)
                if record is None:
                    return f"ERR unknown ad {ad_id}"
                rec = dict(record)
                rec.setdefault("user_id", (user_id,))
                candidates.append(encode_instance(rec, self.target_schema, self.vocab))
            req = RankRequest(request_id="-", user_id=user_id, now=int(now),
                              candidates=tuple(candidates), slots=int(slots))
            res = self.ad_server.rank(req)
            body = " ".join(f"{ad_display_id(r.ad)}:{r.pctr:.6f}:{r.round}" for r in res.ranked)
            return f"OK {body}"
        except Exception as exc:  # protocol boundary: report, don't crash the server
            return f"ERR {exc}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def rank_over_socket(host: str, port: int, user_id: str, now: int, slots: int,
                     ad_ids: Sequence[str]) -> str:
    """One-shot client helper for the RANK protocol."""
    with socket.create_connection((host, port)) as conn:
        conn.sendall(f"RANK {user_id} {now} {slots} {','.join(ad_ids)}\n".encode("utf-8"))
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = conn.recv(4096)
            if not chunk:
                break
            buf += chunk
    return buf.decode("utf-8").rstrip("\n")


def load_catalog(path, target_schema: GroupSchema) -> dict[str, dict[str, tuple[str, ...]]]:
    """Catalog file: ad_id \\t field=value;... (target-schema ad fields)."""
    catalog: dict[str, dict[str, tuple[str, ...]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            ad_id, _, fields = line.partition("\t")
            catalog[ad_id] = _parse_fields(fields, lineno)
    return catalog
