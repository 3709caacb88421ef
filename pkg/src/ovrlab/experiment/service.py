"""HTTP service for MUSHRA-style listening experiments.

Participants are registered into sessions whose presentation order (screen
shuffle, per-screen condition shuffle, opaque stimulus tokens) is derived
from a recorded seed string; everything derived is persisted in the
session's first log record, so a restarted server replays state from disk
and never re-derives.  Ratings are de-anonymized server-side and appended
to the per-session log before the request is acknowledged; a session whose
every screen has an accepted submission is complete and frozen.

Blinding: no response body for a session ever contains a condition label;
clients see opaque hex tokens only.  The token→label mapping lives in the
server-side log.
"""

from __future__ import annotations

import csv
import io
import logging
import random
import re
import threading
import time
import uuid
from pathlib import Path
from typing import Any, Dict, Optional

from fastapi import Body, FastAPI, HTTPException, Request, Response
from pydantic import BaseModel

from ..errors import VersionError
from .config import ExperimentConfig
from .store import RecordStore

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def _error(status: int, code: str, message: str, headers=None) -> HTTPException:
    return HTTPException(
        status_code=status, detail={"code": code, "message": message}, headers=headers
    )


def derive_presentation(config: ExperimentConfig, seed_token: str) -> dict:
    """Deterministically derive a session's shuffles and stimulus tokens.

    Pure function of (config, seed_token); the result is persisted in the
    session's "created" record, which is the authority on replay.
    """
    rng = random.Random(seed_token)
    used = set()

    def fresh_token() -> str:
        while True:
            tok = f"{rng.getrandbits(64):016x}"
            if tok not in used:
                used.add(tok)
                return tok

    screen_order = [s.screen_id for s in config.screens]
    rng.shuffle(screen_order)
    condition_orders = {}
    tokens = {}
    reference_tokens = {}
    for screen in config.screens:  # config order, independent of the screen shuffle
        order = list(screen.conditions())
        rng.shuffle(order)
        condition_orders[screen.screen_id] = order
        tokens[screen.screen_id] = {fresh_token(): cond for cond in order}
        reference_tokens[screen.screen_id] = fresh_token()
    training = None
    if config.training_screen is not None:
        t_order = list(config.training_screen.conditions())
        rng.shuffle(t_order)
        training = {
            "condition_order": t_order,
            "tokens": {fresh_token(): cond for cond in t_order},
            "reference_token": fresh_token(),
        }
    return {
        "screen_order": screen_order,
        "condition_orders": condition_orders,
        "tokens": tokens,
        "reference_tokens": reference_tokens,
        "training": training,
    }


class _Session:
    """Runtime view of one session: presentation maps, ratings, log handle."""

    def __init__(self, config: ExperimentConfig, store: RecordStore, created: dict):
        self.config = config
        self.store = store
        self.lock = threading.Lock()
        self.session_id = created["session_id"]
        self.participant_id = created["participant_id"]
        self.seed_token = created["seed_token"]
        self.created_at = created["created_at"]
        self.screen_order = list(created["screen_order"])
        self.condition_orders = {k: list(v) for k, v in created["condition_orders"].items()}
        self.tokens = {k: dict(v) for k, v in created["tokens"].items()}
        self.reference_tokens = dict(created["reference_tokens"])
        self.training = created.get("training")
        # condition_label -> rating, last accepted submission per screen
        self.ratings: Dict[str, Dict[str, int]] = {}
        self._token_paths = self._build_token_paths()

    def _build_token_paths(self) -> Dict[str, str]:
        paths = {}
        for screen in self.config.screens:
            by_label = {s.condition_label: s.path for s in screen.stimuli}
            for tok, cond in self.tokens.get(screen.screen_id, {}).items():
                paths[tok] = by_label[cond]
            ref_tok = self.reference_tokens.get(screen.screen_id)
            if ref_tok is not None:
                paths[ref_tok] = screen.reference_stimulus
        if self.training is not None and self.config.training_screen is not None:
            t_screen = self.config.training_screen
            by_label = {s.condition_label: s.path for s in t_screen.stimuli}
            for tok, cond in self.training["tokens"].items():
                paths[tok] = by_label[cond]
            paths[self.training["reference_token"]] = t_screen.reference_stimulus
        return paths

    @property
    def complete(self) -> bool:
        return all(sid in self.ratings for sid in self.screen_order)

    @property
    def status(self) -> str:
        return "complete" if self.complete else "in_progress"

    def stimulus_path(self, token: str) -> Optional[str]:
        return self._token_paths.get(token)

    def presentation_tokens(self, screen_id: str):
        """Tokens of one screen in presentation order."""
        label_to_token = {cond: tok for tok, cond in self.tokens[screen_id].items()}
        return [label_to_token[cond] for cond in self.condition_orders[screen_id]]

    def apply_ratings_record(self, record: dict) -> None:
        screen_id = record["screen_id"]
        if screen_id not in self.condition_orders:
            logger.warning("session %s: dropping ratings for unknown screen %r",
                           self.session_id, screen_id)
            return
        self.ratings[screen_id] = {str(k): int(v) for k, v in record["ratings"].items()}


class _Registry:
    """All sessions of one experiment; owns creation and replay."""

    def __init__(self, config: ExperimentConfig, data_dir):
        self.config = config
        self.sessions_dir = Path(data_dir) / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()
        self.sessions: Dict[str, _Session] = {}
        self._replay_all()

    def _replay_all(self) -> None:
        for path in sorted(self.sessions_dir.glob("*.jsonl")):
            store = RecordStore(path)
            records = store.records
            if not records:
                logger.warning("%s: empty or fully torn log, ignoring", path)
                continue
            created = records[0]
            if created.get("type") != "created":
                logger.warning("%s: first record is not a creation record, ignoring", path)
                continue
            schema = created.get("schema")
            if schema != SCHEMA_VERSION:
                raise VersionError(
                    f"{path}: record schema {schema!r} unsupported (expected {SCHEMA_VERSION})"
                )
            if created.get("experiment_id") != self.config.experiment_id:
                logger.warning("%s: belongs to experiment %r, ignoring",
                               path, created.get("experiment_id"))
                continue
            session = _Session(self.config, store, created)
            for record in records[1:]:
                if record.get("type") == "ratings":
                    session.apply_ratings_record(record)
                else:
                    logger.warning("%s: skipping record of type %r", path, record.get("type"))
            self.sessions[session.session_id] = session
        by_created = sorted(self.sessions.values(), key=lambda s: (s.created_at, s.session_id))
        self.sessions = {s.session_id: s for s in by_created}

    def create_session(self, participant_id: str) -> _Session:
        with self.lock:
            for session in self.sessions.values():
                if session.participant_id == participant_id and not session.complete:
                    raise _error(
                        409,
                        "active_session_exists",
                        f"participant {participant_id!r} already has active session "
                        f"{session.session_id}",
                    )
            n_prior = sum(
                1 for s in self.sessions.values() if s.participant_id == participant_id
            )
            seed_token = f"{self.config.seed}:{participant_id}:{n_prior}"
            presentation = derive_presentation(self.config, seed_token)
            while True:
                session_id = uuid.uuid4().hex[:12]
                if session_id not in self.sessions and not (
                    self.sessions_dir / f"{session_id}.jsonl"
                ).exists():
                    break
            created = {
                "type": "created",
                "schema": SCHEMA_VERSION,
                "session_id": session_id,
                "participant_id": participant_id,
                "experiment_id": self.config.experiment_id,
                "seed_token": seed_token,
                "created_at": time.time(),
                "screen_order": presentation["screen_order"],
                "condition_orders": presentation["condition_orders"],
                "tokens": presentation["tokens"],
                "reference_tokens": presentation["reference_tokens"],
                "training": presentation["training"],
            }
            store = RecordStore(self.sessions_dir / f"{session_id}.jsonl")
            store.append(created)  # persisted before the response is built
            session = _Session(self.config, store, created)
            self.sessions[session_id] = session
            return session

    def get(self, session_id: str) -> _Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise _error(404, "unknown_session", f"no session {session_id!r}")
        return session


_RANGE_RE = re.compile(r"bytes=(\d*)-(\d*)")


def _resolve_range(header: str, size: int):
    """Return (start, end) inclusive for a satisfiable single range.

    Returns None when the header is malformed (caller serves the full body,
    status 200); raises for a syntactically valid but unsatisfiable range
    (416 with Content-Range: bytes */size).
    """
    match = _RANGE_RE.fullmatch(header.strip())
    if match is None:
        return None
    first, last = match.groups()
    if first == "" and last == "":
        return None
    unsatisfiable = _error(
        416,
        "unsatisfiable_range",
        f"range {header!r} not satisfiable for {size} bytes",
        headers={"Content-Range": f"bytes */{size}"},
    )
    if first == "":
        suffix = int(last)
        if suffix == 0 or size == 0:
            raise unsatisfiable
        return max(0, size - suffix), size - 1
    start = int(first)
    if start >= size:
        raise unsatisfiable
    end = int(last) if last else size - 1
    if end < start:
        return None
    return start, min(end, size - 1)


class SessionRequest(BaseModel):
    participant_id: str
    experiment_id: str


def create_app(config: ExperimentConfig, data_dir) -> FastAPI:
    registry = _Registry(config, data_dir)
    app = FastAPI(title="listening-test service")
    app.state.registry = registry

    def _screen_payload(session: _Session, index: Optional[int], screen, tokens_in_order,
                        reference_token: str, ratings: Optional[Dict[str, int]]):
        sid = session.session_id
        payload = {
            "screen_id": screen.screen_id,
            "index": index,
            "n_screens": len(session.screen_order),
            "reference": {"url": f"/sessions/{sid}/stimuli/{reference_token}"},
            "stimuli": [
                {"token": tok, "url": f"/sessions/{sid}/stimuli/{tok}"}
                for tok in tokens_in_order
            ],
            "loop_playback": config.ui_options.loop_playback,
            "require_full_scale_use": config.ui_options.require_full_scale_use,
        }
        if ratings is not None:
            label_to_token = {cond: tok for tok, cond in session.tokens[screen.screen_id].items()}
            payload["ratings"] = {label_to_token[cond]: val for cond, val in ratings.items()}
        else:
            payload["ratings"] = None
        return payload

    def _check_experiment(experiment_id: str) -> None:
        if experiment_id != config.experiment_id:
            raise _error(404, "unknown_experiment", f"no experiment {experiment_id!r}")

    @app.get("/experiments/{experiment_id}")
    def experiment_info(experiment_id: str):
        _check_experiment(experiment_id)
        return {
            "experiment_id": config.experiment_id,
            "n_screens": len(config.screens),
            "screens": [
                {"screen_id": s.screen_id, "n_stimuli": len(s.stimuli)} for s in config.screens
            ],
            "training_screen": config.training_screen is not None,
            "ui_options": {
                "require_full_scale_use": config.ui_options.require_full_scale_use,
                "loop_playback": config.ui_options.loop_playback,
            },
        }

    @app.post("/sessions", status_code=201)
    def create_session(request: SessionRequest):
        _check_experiment(request.experiment_id)
        if not request.participant_id.strip():
            raise _error(422, "invalid_participant", "participant_id must be non-empty")
        session = registry.create_session(request.participant_id)
        return _session_state(session.session_id)

    @app.get("/sessions/{session_id}")
    def _session_state(session_id: str):
        session = registry.get(session_id)
        return {
            "session_id": session.session_id,
            "participant_id": session.participant_id,
            "experiment_id": config.experiment_id,
            "status": session.status,
            "created_at": session.created_at,
            "n_screens": len(session.screen_order),
            "screens": [
                {"index": i, "screen_id": sid, "submitted": sid in session.ratings}
                for i, sid in enumerate(session.screen_order)
            ],
            "training_available": session.training is not None,
            "ui_options": {
                "require_full_scale_use": config.ui_options.require_full_scale_use,
                "loop_playback": config.ui_options.loop_playback,
            },
        }

    @app.get("/sessions/{session_id}/screens/{index}")
    def screen_descriptor(session_id: str, index: int):
        session = registry.get(session_id)
        if not 0 <= index < len(session.screen_order):
            raise _error(404, "unknown_screen",
                         f"screen index {index} out of range 0..{len(session.screen_order) - 1}")
        screen_id = session.screen_order[index]
        screen = config.screen(screen_id)
        payload = _screen_payload(
            session,
            index,
            screen,
            session.presentation_tokens(screen_id),
            session.reference_tokens[screen_id],
            session.ratings.get(screen_id),
        )
        payload["submitted"] = screen_id in session.ratings
        payload["session_status"] = session.status
        return payload

    @app.get("/sessions/{session_id}/training")
    def training_descriptor(session_id: str):
        session = registry.get(session_id)
        if session.training is None or config.training_screen is None:
            raise _error(404, "unknown_screen", "experiment has no training screen")
        t_screen = config.training_screen
        label_to_token = {cond: tok for tok, cond in session.training["tokens"].items()}
        tokens_in_order = [label_to_token[c] for c in session.training["condition_order"]]
        payload = _screen_payload(
            session, None, t_screen, tokens_in_order,
            session.training["reference_token"], None,
        )
        payload["training"] = True
        return payload

    @app.get("/sessions/{session_id}/stimuli/{token}")
    def stimulus(session_id: str, token: str, request: Request):
        session = registry.get(session_id)
        path = session.stimulus_path(token)
        if path is None:
            raise _error(404, "unknown_token", f"no stimulus token {token!r} in this session")
        data = Path(path).read_bytes()
        size = len(data)
        headers = {"Accept-Ranges": "bytes"}
        range_header = request.headers.get("range")
        if range_header:
            span = _resolve_range(range_header, size)
            if span is not None:
                start, end = span
                headers["Content-Range"] = f"bytes {start}-{end}/{size}"
                return Response(
                    content=data[start : end + 1],
                    status_code=206,
                    media_type="audio/wav",
                    headers=headers,
                )
        return Response(content=data, media_type="audio/wav", headers=headers)

    @app.post("/sessions/{session_id}/screens/{index}/ratings")
    def submit_ratings(session_id: str, index: int, ratings: Dict[str, Any] = Body(...)):
        session = registry.get(session_id)
        if not 0 <= index < len(session.screen_order):
            raise _error(404, "unknown_screen",
                         f"screen index {index} out of range 0..{len(session.screen_order) - 1}")
        screen_id = session.screen_order[index]
        with session.lock:
            if session.complete:
                raise _error(409, "session_frozen",
                             "session is complete; ratings are frozen")
            token_map = session.tokens[screen_id]
            unknown = sorted(set(ratings) - set(token_map))
            if unknown:
                raise _error(422, "unknown_token",
                             f"tokens not on this screen: {', '.join(unknown)}")
            missing = sorted(set(token_map) - set(ratings))
            if missing:
                raise _error(422, "missing_tokens",
                             f"missing ratings for tokens: {', '.join(missing)}")
            for tok, value in ratings.items():
                if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 100:
                    raise _error(422, "invalid_rating",
                                 f"rating for {tok} must be an integer in [0, 100], got {value!r}")
            if config.ui_options.require_full_scale_use and max(ratings.values()) != 100:
                raise _error(422, "full_scale_required",
                             "at least one stimulus must be rated 100")
            cond_ratings = {token_map[tok]: int(val) for tok, val in ratings.items()}
            record = {
                "type": "ratings",
                "schema": SCHEMA_VERSION,
                "screen_id": screen_id,
                "ratings": cond_ratings,
                "submitted_at": time.time(),
            }
            session.store.append(record)  # durable before the in-memory state or ack
            session.ratings[screen_id] = cond_ratings
            return {
                "status": "accepted",
                "screen_id": screen_id,
                "session_status": session.status,
            }

    @app.get("/experiments/{experiment_id}/sessions")
    def session_metadata(experiment_id: str):
        _check_experiment(experiment_id)
        rows = sorted(registry.sessions.values(),
                      key=lambda s: (s.created_at, s.session_id))
        return {
            "experiment_id": config.experiment_id,
            "sessions": [
                {
                    "session_id": s.session_id,
                    "participant_id": s.participant_id,
                    "status": s.status,
                    "created_at": s.created_at,
                    "n_screens": len(s.screen_order),
                    "n_submitted": len(s.ratings),
                }
                for s in rows
            ],
        }

    @app.get("/experiments/{experiment_id}/export")
    def export_ratings(experiment_id: str, partial: bool = False):
        _check_experiment(experiment_id)
        included = [
            s
            for s in registry.sessions.values()
            if s.complete or partial
        ]
        included.sort(key=lambda s: (s.participant_id, s.created_at, s.session_id))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["participant", "screen_id", "condition", "rating"])
        for session in included:
            for screen in config.screens:  # stable config order for screens and conditions
                ratings = session.ratings.get(screen.screen_id)
                if ratings is None:
                    continue
                for stim in screen.stimuli:
                    cond = stim.condition_label
                    if cond not in ratings:
                        continue
                    out_label = (
                        "hidden_reference" if cond == screen.hidden_reference_label else cond
                    )
                    writer.writerow(
                        [session.participant_id, screen.screen_id, out_label, ratings[cond]]
                    )
        return Response(content=buf.getvalue(), media_type="text/csv; charset=utf-8")

    return app
