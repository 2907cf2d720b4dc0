"""HTTP answer service wrapping the query pipeline."""

from __future__ import annotations

import hashlib
import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from . import __version__
from .backends import BackendError, Backends
from .core import PipelineConfig, Question, config_digest
from .fusion import RetrievalError
from .pipeline import AnswerError, run_query

log = logging.getLogger(__name__)


def create_app(cfg: PipelineConfig, backends: Backends) -> FastAPI:
    app = FastAPI(title="kadr answer service", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__, "config_digest": config_digest(cfg)}

    @app.post("/answer")
    async def answer(request: Request) -> JSONResponse:
        try:
            payload = await request.json()
        except Exception:
            return JSONResponse({"error": "request body must be JSON"}, status_code=400)
        question_text = payload.get("question") if isinstance(payload, dict) else None
        if not isinstance(question_text, str) or not question_text.strip():
            return JSONResponse({"error": "field 'question' must be a nonempty string"}, status_code=400)
        text = question_text.strip()
        question_id = "q-" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]
        question = Question(question_id=question_id, text=text)
        try:
            result = await run_in_threadpool(run_query, question, cfg, backends)
        except (RetrievalError, AnswerError, BackendError) as exc:
            log.warning("backend unavailable for %s: %s", question_id, exc)
            return JSONResponse({"error": str(exc)}, status_code=503)
        except Exception as exc:
            log.exception("internal error answering %s", question_id)
            return JSONResponse({"error": f"internal error: {exc}"}, status_code=500)
        return JSONResponse(result.to_dict(include_timings=True))

    return app


def serve(cfg: PipelineConfig, backends: Backends, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Run the answer service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(cfg, backends), host=host, port=port)
