"""Client side of the round protocol: one process per silo, talking to the server over HTTP."""
from typing import Optional
import logging
import time

import httpx
import numpy as np

from aggregation import VarianceDiag
from datasets import LabeledDataset
from federation import ProtocolError, client_update, payload_from_update
from log_config import set_round
from models import Ack, ErrorResponse, ModelSpec, RegisterRequest, RegisterResponse, RoundConfig, RoundTicket
from nn_engine import ParamVector

# Get logger for this module
logger = logging.getLogger(__name__)


class ServerUnavailableError(RuntimeError):
    """Raised when the server cannot be reached after all retries"""
    pass


def _raise_for_error(response: httpx.Response) -> None:
    if response.status_code < 400:
        return
    try:
        error = ErrorResponse.model_validate_json(response.content)
        raise ProtocolError(error.message, status=response.status_code, error_type=error.error_type)
    except ValueError as e:
        if isinstance(e, ProtocolError):
            raise
        raise ProtocolError(f"HTTP {response.status_code}: {response.text[:200]}",
                            status=response.status_code) from e


class SiloClient:
    """Registers one silo, then computes and uploads an update for every open round"""

    def __init__(self, http: httpx.Client, silo: LabeledDataset, silo_index: Optional[int] = None,
                 poll_seconds: float = 0.2, max_attempts: int = 5, backoff_seconds: float = 0.5):
        self.http = http
        self.silo = silo
        self.silo_index = silo_index
        self.poll_seconds = poll_seconds
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.client_id: Optional[int] = None
        self.config: Optional[RoundConfig] = None
        self.spec: Optional[ModelSpec] = None
        self.last_round = -1

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        """Retry transport failures with exponential backoff"""
        for attempt in range(self.max_attempts):
            try:
                return self.http.request(method, path, **kwargs)
            except httpx.TransportError as e:
                delay = self.backoff_seconds * 2 ** attempt
                logger.warning(f"{method} {path} failed ({e}); attempt {attempt + 1}/{self.max_attempts}")
                if attempt + 1 < self.max_attempts:
                    time.sleep(delay)
        raise ServerUnavailableError(f"{method} {path}: server unreachable after {self.max_attempts} attempts")

    def register(self) -> int:
        request = RegisterRequest(silo_index=self.silo_index)
        response = self._request("POST", "/register", json=request.model_dump())
        _raise_for_error(response)
        registered = RegisterResponse.model_validate_json(response.content)
        if registered.model.input_size != self.silo.n_features:
            raise ProtocolError(f"server model expects {registered.model.input_size} features, "
                                f"silo has {self.silo.n_features}")
        self.client_id = registered.client_id
        self.config = registered.config
        self.spec = registered.model
        logger.info(f"Registered as client {self.client_id} ({self.config.mode.value}, {self.silo.size} samples)")
        return self.client_id

    def step(self) -> str:
        """Poll once; returns the round status or "submitted" when an update went out"""
        if self.client_id is None:
            raise ProtocolError("client is not registered")
        response = self._request("GET", "/round")
        _raise_for_error(response)
        ticket = RoundTicket.model_validate_json(response.content)
        if ticket.status != "open" or ticket.round == self.last_round:
            return ticket.status

        set_round(ticket.round)
        w = ParamVector.from_values(self.spec, np.asarray(ticket.w, dtype=np.float64))
        v_bar_prev = VarianceDiag(np.asarray(ticket.v_bar_prev, dtype=np.float64))
        update = client_update(self.silo, w, self.config, self.spec, v_bar_prev, self.client_id, ticket.round)
        payload = payload_from_update(update, ticket.round)

        response = self._request("POST", "/update", content=payload.model_dump_json())
        try:
            _raise_for_error(response)
        except ProtocolError as e:
            if e.status != 409:
                raise
            logger.warning(f"Update for round {ticket.round} not accepted: {e}")
            self.last_round = ticket.round
            return "stale"
        ack = Ack.model_validate_json(response.content)
        self.last_round = ticket.round
        logger.debug(f"Round {ack.round} acknowledged (closed={ack.round_closed})")
        return "submitted"

    def run(self) -> int:
        """Register and follow the server until it reports "done"; returns rounds submitted"""
        self.register()
        submitted = 0
        while True:
            status = self.step()
            if status == "done":
                break
            if status == "submitted":
                submitted += 1
            else:
                time.sleep(self.poll_seconds)
        logger.info(f"Server finished; client {self.client_id} submitted {submitted} updates")
        return submitted
