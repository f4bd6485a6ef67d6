"""HTTP session service for interactive critiquing.

Wraps one loaded model (+ blender) behind a small JSON API: create a session
from a known user or a cold keyphrase profile, critique keyphrases positively
or negatively, inspect or reset the session. Sessions live in memory with
idle eviction; model and blender weights are never mutated.
"""

from __future__ import annotations

import threading
import time
import uuid
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .critique import CritiqueSession, normalize_polarity

DEFAULT_SESSION_TTL = 30 * 60.0


class StartSessionRequest(BaseModel):
    user_id: Optional[str] = None
    keyphrases: Optional[list] = None


class CritiqueRequest(BaseModel):
    keyphrase: str | int
    polarity: str


class _SessionRecord:
    def __init__(self, session, user_id=None):
        self.session_id = uuid.uuid4().hex
        self.session = session
        self.user_id = user_id
        self.created = time.monotonic()
        self.last_active = self.created
        self.lock = threading.Lock()


def create_app(
    model=None,
    blender=None,
    data=None,
    top_n=10,
    max_turns=10,
    explanation_top_k=10,
    session_ttl=DEFAULT_SESSION_TTL,
    checkpoint_info=None,
):
    app = FastAPI(title="critvae session service")
    sessions: dict = {}
    store_lock = threading.Lock()

    def require_model():
        if model is None or blender is None or data is None:
            raise HTTPException(status_code=503, detail="no model loaded")

    def evict_idle():
        now = time.monotonic()
        with store_lock:
            for sid in [s for s, rec in sessions.items() if now - rec.last_active > session_ttl]:
                del sessions[sid]

    def get_record(session_id):
        evict_idle()
        with store_lock:
            rec = sessions.get(session_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        rec.last_active = time.monotonic()
        return rec

    def keyphrase_index(value):
        if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
            idx = int(value)
            if not 0 <= idx < data.n_keyphrases:
                raise HTTPException(status_code=422, detail=f"keyphrase index {idx} out of range")
            return idx
        idx = data.keyphrase_index.get(str(value).strip().lower())
        if idx is None:
            raise HTTPException(status_code=422, detail=f"unknown keyphrase {value!r}")
        return idx

    def recommendations_payload(session):
        items = session.top_items(top_n)
        return [
            {
                "rank": rank,
                "item_index": int(i),
                "item_id": data.item_ids[i],
                "score": round(float(session.scores[i]), 6),
            }
            for rank, i in enumerate(items, start=1)
        ]

    def explanation_payload(session):
        kscores = model.decode_explanations(session.current_latent[None])[0]
        from .metrics import rank_order

        top = rank_order(kscores)[:explanation_top_k]
        return [
            {
                "keyphrase_index": int(k),
                "keyphrase": data.keyphrases[k],
                "score": round(float(kscores[k]), 6),
            }
            for k in top
        ]

    def history_payload(session):
        return [
            {
                "turn": c.step + 1,
                "keyphrase_index": c.keyphrase,
                "keyphrase": data.keyphrases[c.keyphrase] if c.keyphrase >= 0 else None,
                "polarity": c.polarity,
            }
            for c, _ in session.history
        ]

    def state_payload(rec):
        return {
            "session_id": rec.session_id,
            "user_id": rec.user_id,
            "turn": rec.session.turn,
            "max_turns": max_turns,
            "recommendations": recommendations_payload(rec.session),
            "explanation": explanation_payload(rec.session),
            "history": history_payload(rec.session),
        }

    @app.post("/sessions", status_code=201)
    def start_session(req: StartSessionRequest):
        require_model()
        evict_idle()
        if req.user_id is not None:
            if req.user_id not in data.user_index:
                raise HTTPException(status_code=404, detail=f"unknown user {req.user_id!r}")
            u = data.user_index[req.user_id]
            z_u = model.latent_means(data, [u])[0]
            seen = data.items_of(u, "train")
            rec = _SessionRecord(
                CritiqueSession(model, blender, z_u, seen_items=seen, max_turns=max_turns),
                user_id=req.user_id,
            )
        elif req.keyphrases:
            import numpy as np

            row = np.zeros(data.n_keyphrases)
            for name in req.keyphrases:
                row[keyphrase_index(name)] = 1.0
            z_u = model.encode("k_plus", row).mu[0]  # cold start: unimodal expert
            rec = _SessionRecord(
                CritiqueSession(model, blender, z_u, seen_items=(), max_turns=max_turns)
            )
        else:
            raise HTTPException(status_code=422, detail="need user_id or keyphrases")
        with store_lock:
            sessions[rec.session_id] = rec
        return state_payload(rec)

    @app.post("/sessions/{session_id}/critiques")
    def critique(session_id: str, req: CritiqueRequest):
        require_model()
        rec = get_record(session_id)
        try:
            polarity = normalize_polarity(req.polarity)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        idx = keyphrase_index(req.keyphrase)
        with rec.lock:
            if rec.session.turn >= max_turns:
                raise HTTPException(status_code=409, detail="maximum turns reached")
            rec.session.apply_critique(idx, polarity)
            return {
                "session_id": rec.session_id,
                "turn": rec.session.turn,
                "recommendations": recommendations_payload(rec.session),
                "history": history_payload(rec.session),
            }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        require_model()
        rec = get_record(session_id)
        with rec.lock:
            return state_payload(rec)

    @app.delete("/sessions/{session_id}")
    def reset_session(session_id: str):
        require_model()
        rec = get_record(session_id)
        with rec.lock:
            rec.session.reset()
            return state_payload(rec)

    @app.get("/models")
    def models():
        if model is None:
            return {"models": []}
        info = {
            "variant": model.variant_enum.value,
            "latent_dim": model.latent_dim,
            "checkpoint_hash": model.store_.values_hash(),
            "top_n": top_n,
            "max_turns": max_turns,
        }
        if checkpoint_info:
            info.update(checkpoint_info)
        return {"models": [info]}

    @app.get("/keyphrases")
    def keyphrases():
        require_model()
        return {"keyphrases": list(data.keyphrases)}

    return app
