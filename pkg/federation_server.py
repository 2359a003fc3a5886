"""HTTP+JSON front of the FederationCoordinator: /register, /round and /update."""
from functools import partial
import asyncio
import logging

import uvicorn
from mcp.server import FastMCP
from pydantic import ValidationError
from starlette.requests import Request
from starlette.responses import JSONResponse

from federation import FederationCoordinator, ProtocolError, update_from_payload
from models import Ack, ErrorResponse, RegisterRequest, RegisterResponse, UpdatePayload

# Get logger for this module
logger = logging.getLogger(__name__)


def _error(status: int, error_type: str, message: str, **details) -> JSONResponse:
    error = ErrorResponse(error_type=error_type, message=message, details=details)
    return JSONResponse(error.model_dump(), status_code=status)


async def _in_worker(fn, *args):
    """Coordinator calls hold a lock and do numpy work; keep them off the event loop"""
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(None, partial(fn, *args))


def build_server(coordinator: FederationCoordinator) -> FastMCP:
    """FastMCP app whose custom routes speak the round protocol"""
    mcp = FastMCP("FedILC")

    @mcp.custom_route("/register", methods=["POST"])
    async def register(request: Request) -> JSONResponse:
        try:
            body = await request.body()
            register_request = RegisterRequest.model_validate_json(body or b"{}")
            client_id = await _in_worker(coordinator.register, register_request.silo_index)
        except ValidationError as e:
            return _error(400, "ValidationError", "Malformed register request", errors=str(e))
        except ProtocolError as e:
            return _error(e.status, e.error_type, str(e))
        response = RegisterResponse(client_id=client_id, config=coordinator.config, model=coordinator.spec)
        return JSONResponse(response.model_dump(mode="json", by_alias=True))

    @mcp.custom_route("/round", methods=["GET"])
    async def current_round(request: Request) -> JSONResponse:
        ticket = await _in_worker(coordinator.ticket)
        return JSONResponse(ticket.model_dump(mode="json", by_alias=True))

    @mcp.custom_route("/update", methods=["POST"])
    async def update(request: Request) -> JSONResponse:
        try:
            payload = UpdatePayload.model_validate_json(await request.body())
            client_update = update_from_payload(payload)
            round_closed = await _in_worker(coordinator.submit, client_update, payload.round)
        except ValidationError as e:
            return _error(400, "ValidationError", "Malformed update", errors=str(e))
        except ProtocolError as e:
            logger.warning(f"Rejected update: {e}")
            return _error(e.status, e.error_type, str(e))
        return JSONResponse(Ack(round=payload.round, round_closed=round_closed).model_dump())

    return mcp


async def serve_until_done(coordinator: FederationCoordinator, host: str, port: int,
                           poll_seconds: float = 0.2, grace_seconds: float = 2.0) -> None:
    """Serve until the last round closes, then give clients time to see status "done" """
    app = build_server(coordinator).sse_app()
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level="warning"))
    serve_task = asyncio.create_task(server.serve())
    logger.info(f"Federation server listening on http://{host}:{port}")
    try:
        while not coordinator.finished and not serve_task.done():
            await asyncio.sleep(poll_seconds)
        await asyncio.sleep(grace_seconds)
    finally:
        server.should_exit = True
        await serve_task
