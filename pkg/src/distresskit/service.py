"""HTTP service for the human-annotation campaign.

One session per annotator walks two passes over their batch (binary
distress first, then the experiential Likert pass), each in its own fixed
random order with four attention items mixed in. Timing is measured
server-side between first serve and accepted submission, so client clocks
are never trusted. State lives in a single append-only JSONL event log; the
in-memory index is rebuilt by replaying it, which also makes session
creation idempotent across restarts.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import jsonl
from .crowd import PASS_DISTRESS, PASS_LIKERT, PASSES

log = logging.getLogger(__name__)

API_VERSION = 1
ATTENTION_PER_PASS = 4
_MIN_RESPONSE_TIME = 1e-6

SESSION_ACTIVE = "active"
SESSION_COMPLETED = "completed"
SESSION_ABANDONED = "abandoned"


class ServiceError(RuntimeError):
    pass


class UnknownSession(ServiceError):
    pass


class NotOnPanel(ServiceError):
    pass


@dataclass(frozen=True)
class CampaignItem:
    item_id: str
    text: str
    is_attention: bool = False
    expected: object = None


@dataclass
class Campaign:
    """Static campaign definition: batches, item texts, attention items."""

    seed: int
    likert_scale: int
    batches: list[dict]
    tweets: dict[str, str]
    attention_items: dict[str, list[CampaignItem]]

    def validate(self) -> "Campaign":
        if self.likert_scale < 2:
            raise ServiceError("likert_scale must be >= 2")
        for pass_name in PASSES:
            items = self.attention_items.get(pass_name, [])
            if len(items) != ATTENTION_PER_PASS:
                raise ServiceError(
                    f"campaign needs {ATTENTION_PER_PASS} attention items for {pass_name}"
                )
        seen: set[str] = set()
        for batch in self.batches:
            for annotator in batch["annotator_ids"]:
                if annotator in seen:
                    raise ServiceError(f"annotator {annotator} appears in two panels")
                seen.add(annotator)
            for tweet_id in batch["tweet_ids"]:
                if tweet_id not in self.tweets:
                    raise ServiceError(f"batch tweet {tweet_id} has no text")
        return self

    def batch_for(self, annotator_id: str) -> dict | None:
        for batch in self.batches:
            if annotator_id in batch["annotator_ids"]:
                return batch
        return None

    def to_obj(self) -> dict:
        return {
            "version": API_VERSION,
            "seed": self.seed,
            "likert_scale": self.likert_scale,
            "batches": self.batches,
            "tweets": self.tweets,
            "attention_items": {
                pass_name: [
                    {"item_id": i.item_id, "text": i.text, "expected": i.expected}
                    for i in items
                ]
                for pass_name, items in self.attention_items.items()
            },
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Campaign":
        attention = {
            pass_name: [
                CampaignItem(
                    item_id=i["item_id"], text=i["text"],
                    is_attention=True, expected=i.get("expected"),
                )
                for i in items
            ]
            for pass_name, items in obj.get("attention_items", {}).items()
        }
        return cls(
            seed=int(obj.get("seed", 0)),
            likert_scale=int(obj.get("likert_scale", 7)),
            batches=list(obj["batches"]),
            tweets=dict(obj["tweets"]),
            attention_items=attention,
        ).validate()


def default_attention_items(likert_scale: int = 7) -> dict[str, list[CampaignItem]]:
    """Instructed-response items, directive embedded in the item text."""
    target = (likert_scale + 1) // 2
    binary = [
        CampaignItem(
            item_id=f"attn-b{i}",
            text="Please select 'Yes' for this item.",
            is_attention=True,
            expected=True,
        )
        for i in range(1, ATTENTION_PER_PASS + 1)
    ]
    likert = [
        CampaignItem(
            item_id=f"attn-l{i}",
            text=f"Please select '{target}' for this item.",
            is_attention=True,
            expected=target,
        )
        for i in range(1, ATTENTION_PER_PASS + 1)
    ]
    return {PASS_DISTRESS: binary, PASS_LIKERT: likert}


def _session_id(seed: int, annotator_id: str) -> str:
    h = hashlib.blake2b(annotator_id.encode("utf-8"), digest_size=12,
                        key=f"session|{seed}".encode())
    return h.hexdigest()


def _pass_order(seed: int, annotator_id: str, pass_name: str, item_ids: list[str]) -> list[str]:
    h = hashlib.blake2b(f"{annotator_id}|{pass_name}".encode("utf-8"), digest_size=8,
                        key=f"order|{seed}".encode())
    rng = random.Random(int.from_bytes(h.digest(), "big"))
    order = list(item_ids)
    rng.shuffle(order)
    return order


@dataclass
class Session:
    session_id: str
    annotator_id: str
    batch_id: int
    order_pass1: list[str]
    order_pass2: list[str]
    cursor: int = 0
    state: str = SESSION_ACTIVE
    served_at: dict[str, float] = field(default_factory=dict)
    last_activity: float = 0.0

    @property
    def total_items(self) -> int:
        return len(self.order_pass1) + len(self.order_pass2)

    def current(self) -> tuple[str, str, int] | None:
        """(pass_name, item_id, position_within_pass) or None when done."""
        if self.cursor >= self.total_items:
            return None
        if self.cursor < len(self.order_pass1):
            return PASS_DISTRESS, self.order_pass1[self.cursor], self.cursor
        pos = self.cursor - len(self.order_pass1)
        return PASS_LIKERT, self.order_pass2[pos], pos

    def current_ref(self) -> str | None:
        cur = self.current()
        if cur is None:
            return None
        pass_name, _, pos = cur
        return f"{pass_name}:{pos}"


class SessionStore:
    """All campaign state, backed by the append-only event log.

    A single writer lock serializes mutations; the log is replayed on
    construction so a restarted server resumes every session exactly
    where it stopped.
    """

    def __init__(
        self,
        campaign: Campaign,
        log_path: str,
        clock: Callable[[], float] = time.time,
        idle_timeout: float | None = None,
    ):
        self.campaign = campaign.validate()
        self.log_path = log_path
        self.clock = clock
        self.idle_timeout = idle_timeout
        self._lock = threading.RLock()
        self.sessions: dict[str, Session] = {}
        self._by_annotator: dict[str, str] = {}
        self.responses: list[dict] = []
        self._response_keys: set[tuple[str, str, str]] = set()
        if os.path.exists(log_path):
            self._replay()
        self._fh = open(log_path, "a", encoding="utf-8")

    # -- log handling --------------------------------------------------

    def _append_event(self, event: dict) -> None:
        jsonl.append_jsonl_line(self._fh, event)

    def _replay(self) -> None:
        for event in jsonl.read_jsonl(self.log_path):
            kind = event.get("event")
            if kind == "session_started":
                session = Session(
                    session_id=event["session_id"],
                    annotator_id=event["annotator_id"],
                    batch_id=event["batch_id"],
                    order_pass1=list(event["order_pass1"]),
                    order_pass2=list(event["order_pass2"]),
                    last_activity=float(event.get("at", 0.0)),
                )
                self.sessions[session.session_id] = session
                self._by_annotator[session.annotator_id] = session.session_id
            elif kind == "item_served":
                session = self.sessions.get(event["session_id"])
                if session is not None:
                    session.served_at.setdefault(event["item_ref"], float(event["at"]))
                    session.last_activity = float(event["at"])
            elif kind == "submission":
                session = self.sessions.get(event["session_id"])
                if session is None:
                    continue
                session.cursor += 1
                session.last_activity = float(event["received_at"])
                self._store_response(event)
            elif kind == "session_completed":
                session = self.sessions.get(event["session_id"])
                if session is not None:
                    session.state = SESSION_COMPLETED
        log.info("replayed %d sessions, %d responses from %s",
                 len(self.sessions), len(self.responses), self.log_path)

    def _store_response(self, event: dict) -> None:
        key = (event["annotator_id"], event["item_id"], event["pass"])
        self._response_keys.add(key)
        self.responses.append({
            "annotator_id": event["annotator_id"],
            "tweet_id": event["item_id"],
            "pass": event["pass"],
            "value": event["value"],
            "response_time": event["response_time"],
            "presented_position": event["position"],
            "is_attention": event["is_attention"],
            "session_id": event["session_id"],
        })

    # -- session lifecycle ----------------------------------------------

    def start_session(self, annotator_id: str) -> Session:
        """Create or return this annotator's session (idempotent)."""
        with self._lock:
            existing_id = self._by_annotator.get(annotator_id)
            if existing_id is not None:
                return self.sessions[existing_id]
            batch = self.campaign.batch_for(annotator_id)
            if batch is None:
                raise NotOnPanel(f"annotator {annotator_id} is not on any panel")
            attn = self.campaign.attention_items
            pass1_items = list(batch["tweet_ids"]) + [i.item_id for i in attn[PASS_DISTRESS]]
            pass2_items = list(batch["tweet_ids"]) + [i.item_id for i in attn[PASS_LIKERT]]
            now = self.clock()
            session = Session(
                session_id=_session_id(self.campaign.seed, annotator_id),
                annotator_id=annotator_id,
                batch_id=batch["batch_id"],
                order_pass1=_pass_order(self.campaign.seed, annotator_id, PASS_DISTRESS, pass1_items),
                order_pass2=_pass_order(self.campaign.seed, annotator_id, PASS_LIKERT, pass2_items),
                last_activity=now,
            )
            self.sessions[session.session_id] = session
            self._by_annotator[annotator_id] = session.session_id
            self._append_event({
                "event": "session_started",
                "session_id": session.session_id,
                "annotator_id": annotator_id,
                "batch_id": session.batch_id,
                "order_pass1": session.order_pass1,
                "order_pass2": session.order_pass2,
                "at": now,
            })
            return session

    def _get_session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise UnknownSession(f"unknown session: {session_id}")
        if (
            session.state == SESSION_ACTIVE
            and self.idle_timeout is not None
            and self.clock() - session.last_activity > self.idle_timeout
        ):
            session.state = SESSION_ABANDONED
            self._append_event({
                "event": "session_abandoned",
                "session_id": session_id,
                "at": self.clock(),
            })
        return session

    def _item(self, pass_name: str, item_id: str) -> CampaignItem:
        for item in self.campaign.attention_items[pass_name]:
            if item.item_id == item_id:
                return item
        return CampaignItem(item_id=item_id, text=self.campaign.tweets[item_id])

    def next_item(self, session_id: str) -> dict:
        """The session's current item, or a done marker.

        Serving is idempotent: refetching the current item keeps the
        original served_at so retries cannot reset the response clock.
        """
        with self._lock:
            session = self._get_session(session_id)
            if session.state == SESSION_COMPLETED:
                return {"api_version": API_VERSION, "done": True}
            if session.state == SESSION_ABANDONED:
                raise ServiceError(f"session {session_id} was abandoned")
            current = session.current()
            if current is None:
                return {"api_version": API_VERSION, "done": True}
            pass_name, item_id, pos = current
            ref = session.current_ref()
            if ref not in session.served_at:
                now = self.clock()
                session.served_at[ref] = now
                session.last_activity = now
                self._append_event({
                    "event": "item_served",
                    "session_id": session_id,
                    "item_ref": ref,
                    "at": now,
                })
            item = self._item(pass_name, item_id)
            widget = "binary" if pass_name == PASS_DISTRESS else "likert"
            return {
                "api_version": API_VERSION,
                "done": False,
                "item": {
                    "item_ref": ref,
                    "text": item.text,
                    "pass": pass_name,
                    "widget": widget,
                    "scale": 2 if widget == "binary" else self.campaign.likert_scale,
                    "position": session.cursor + 1,
                    "total": session.total_items,
                },
            }

    def _normalize_value(self, pass_name: str, value) -> object:
        if pass_name == PASS_DISTRESS:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.strip().lower() in ("yes", "no"):
                return value.strip().lower() == "yes"
            raise ValueError(f"binary pass expects yes/no, got {value!r}")
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"likert pass expects an integer, got {value!r}")
        if not 1 <= value <= self.campaign.likert_scale:
            raise ValueError(
                f"likert value {value} outside 1..{self.campaign.likert_scale}"
            )
        return value

    def submit(self, session_id: str, item_ref: str, value) -> dict:
        """Accept the current item's answer; anything else is rejected.

        Out-of-order, duplicate, or out-of-domain submissions leave the
        log untouched.
        """
        with self._lock:
            session = self._get_session(session_id)
            if session.state == SESSION_ABANDONED:
                return self._reject("session abandoned")
            if session.state == SESSION_COMPLETED:
                return self._reject("session already completed")
            expected_ref = session.current_ref()
            if expected_ref is None:
                return self._reject("no pending item")
            if item_ref != expected_ref:
                return self._reject(
                    f"stale or out-of-order item_ref {item_ref!r}; current is {expected_ref!r}"
                )
            served = session.served_at.get(item_ref)
            if served is None:
                return self._reject("item was never served")
            pass_name, item_id, pos = session.current()
            try:
                normalized = self._normalize_value(pass_name, value)
            except ValueError as exc:
                return self._reject(str(exc))
            received = self.clock()
            response_time = max(received - served, _MIN_RESPONSE_TIME)
            item = self._item(pass_name, item_id)
            event = {
                "event": "submission",
                "session_id": session_id,
                "annotator_id": session.annotator_id,
                "item_ref": item_ref,
                "item_id": item_id,
                "pass": pass_name,
                "value": normalized,
                "served_at": served,
                "received_at": received,
                "response_time": response_time,
                "position": pos,
                "is_attention": item.is_attention,
            }
            self._append_event(event)
            self._store_response(event)
            session.cursor += 1
            session.last_activity = received
            if session.current() is None:
                session.state = SESSION_COMPLETED
                self._append_event({
                    "event": "session_completed",
                    "session_id": session_id,
                    "at": received,
                })
            return {
                "api_version": API_VERSION,
                "accepted": True,
                "response_time": response_time,
                "done": session.state == SESSION_COMPLETED,
            }

    @staticmethod
    def _reject(reason: str) -> dict:
        return {"api_version": API_VERSION, "accepted": False, "reason": reason}

    def session_view(self, session: Session) -> dict:
        return {
            "api_version": API_VERSION,
            "session_id": session.session_id,
            "annotator_id": session.annotator_id,
            "batch_id": session.batch_id,
            "state": session.state,
            "cursor": session.cursor,
            "total_items": session.total_items,
            "pass_order": list(PASSES),
        }

    def export_responses(self) -> list[dict]:
        with self._lock:
            return list(self.responses)

    def close(self) -> None:
        self._fh.close()


def create_app(store: SessionStore):
    """FastAPI wrapper exposing the campaign API."""
    from fastapi import FastAPI, HTTPException
    from pydantic import BaseModel

    class StartBody(BaseModel):
        annotator_id: str

    class SubmitBody(BaseModel):
        item_ref: str
        value: object = None

    app = FastAPI(title="distresskit annotation service")
    app.state.store = store

    @app.post("/sessions")
    def start_session(body: StartBody):
        try:
            session = store.start_session(body.annotator_id)
        except NotOnPanel as exc:
            raise HTTPException(status_code=403, detail=str(exc))
        return store.session_view(session)

    @app.get("/sessions/{session_id}")
    def session_status(session_id: str):
        try:
            session = store._get_session(session_id)
        except UnknownSession as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return store.session_view(session)

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        try:
            return store.next_item(session_id)
        except UnknownSession as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ServiceError as exc:
            raise HTTPException(status_code=410, detail=str(exc))

    @app.post("/sessions/{session_id}/submit")
    def submit(session_id: str, body: SubmitBody):
        try:
            result = store.submit(session_id, body.item_ref, body.value)
        except UnknownSession as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if not result["accepted"]:
            from fastapi.responses import JSONResponse

            return JSONResponse(status_code=409, content=result)
        return result

    @app.get("/export")
    def export():
        return {"api_version": API_VERSION, "responses": store.export_responses()}

    return app
