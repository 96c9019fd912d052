"""HTTP face of the experiment harness.

One POST endpoint per invocation: /commands/{name} takes a CommandRequest,
runs the command synchronously, and returns its summary and artifact list.
Domain errors map to stable categories the CLI turns into exit codes:

    config                -> 400
    missing-prerequisite  -> 409
    numeric               -> 422
    internal              -> 500
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import load_config
from ..errors import ConfigError, MissingPrerequisiteError
from ..pipeline import COMMANDS, run_command
from .schemas import CommandRequest, CommandResponse, HealthResponse

log = logging.getLogger("protodiff.api")

_STATUS = {"config": 400, "missing-prerequisite": 409, "numeric": 422,
           "internal": 500}


def _error_response(category: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=_STATUS[category],
                        content={"error": {"category": category,
                                           "message": message}})


def create_app() -> FastAPI:
    app = FastAPI(title="protodiff", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def _request_error(request: Request, exc: RequestValidationError):
        problems = "; ".join(
            "{}: {}".format(".".join(str(p) for p in err["loc"]), err["msg"])
            for err in exc.errors())
        return _error_response("config", f"invalid request: {problems}")

    @app.get("/health", response_model=HealthResponse)
    async def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__,
                              commands=list(COMMANDS))

    # errors are mapped inside the endpoint rather than via app-level
    # Exception handlers: the server-error middleware re-raises after
    # responding, which would break in-process (ASGI transport) clients
    @app.post("/commands/{name}", response_model=CommandResponse)
    async def command(name: str, req: CommandRequest):
        try:
            if name not in COMMANDS:
                raise ConfigError(f"unknown command {name!r}; "
                                  f"available: {', '.join(COMMANDS)}")
            cfg = load_config(req.config_path, out_dir=req.out, seed=req.seed)
            result = run_command(name, cfg, head=req.head, count=req.count,
                                 image_ids=req.image_ids)
            return CommandResponse(**result)
        except ConfigError as exc:
            return _error_response("config", str(exc))
        except MissingPrerequisiteError as exc:
            return _error_response("missing-prerequisite", str(exc))
        except ArithmeticError as exc:
            return _error_response("numeric", str(exc))
        except Exception as exc:
            log.exception("command %s failed", name)
            return _error_response("internal", f"{type(exc).__name__}: {exc}")

    return app
