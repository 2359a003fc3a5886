"""Round-based federated protocol: client updates, server combine, coordinator and in-process runner."""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math
import threading
import time

import numpy as np
import pandas as pd

from aggregation import (
    VarianceDiag, arith_mean, fishr_loss, fishr_penalty_grad, grad_variance_diag,
    mean_variance, weighted_geo_mean,
)
from datasets import FederationDataset, LabeledDataset
from log_config import set_round
from metrics import evaluate, group_accuracy
from models import (
    AlgoMode, EvalReport, ModelSpec, OptimizerKind, RoundConfig, RoundLog, RoundRecord,
    RoundTicket, UpdatePayload,
)
from nn_engine import (
    AdamState, Batch, ParamVector, adam_step, backward_full, init_params, per_sample_head_grads, sgd_step,
)

# Get logger for this module
logger = logging.getLogger(__name__)

ROUND_COLUMNS = ["round", "train_loss", "val_loss", "ood_loss", "ood_acc", "ood_auroc", "ood_auprc"]

ChunkGradient = Callable[[ModelSpec, ParamVector, Batch], np.ndarray]


class ProtocolError(ValueError):
    """Raised when an update or request breaks the round protocol"""

    def __init__(self, message: str, status: int = 400, error_type: str = "ProtocolError"):
        super().__init__(message)
        self.status = status
        self.error_type = error_type


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    """What a client uploads each round"""
    client_id: int
    grad: np.ndarray
    var_diag: VarianceDiag
    n_e: int

    def __post_init__(self):
        if self.n_e < 1:
            raise ProtocolError(f"client {self.client_id}: sample count must be >= 1")
        if not np.isfinite(self.grad).all():
            raise ProtocolError(f"client {self.client_id}: gradient has non-finite entries")


@dataclass(frozen=True, eq=False)
class ServerState:
    """Global model, optimizer state and the variance mean broadcast to clients"""
    w: ParamVector
    adam: AdamState
    v_bar_prev: VarianceDiag
    round: int = 0
    fishr_loss: float = 0.0


def init_server_state(spec: ModelSpec, config: RoundConfig) -> ServerState:
    w = init_params(spec, config.seed)
    adam = AdamState.fresh(
        spec.param_count, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
        eps=config.eps, weight_decay=config.weight_decay,
    )
    return ServerState(w=w, adam=adam, v_bar_prev=VarianceDiag.zeros(spec.head_param_count))


def client_rng(seed: int, client_id: int, round_no: int) -> np.random.Generator:
    """Independent stream per (root seed, client, round)"""
    return np.random.default_rng([seed, client_id, round_no])


def draw_batch(silo: LabeledDataset, config: RoundConfig, client_id: int, round_no: int) -> Batch:
    """Seeded mini-batch without replacement, or the whole silo when it is small enough"""
    if silo.size == 0:
        raise ProtocolError(f"client {client_id} has an empty silo")
    inputs = silo.inputs.reshape(silo.size, -1)
    if config.batch_size >= silo.size:
        return Batch(inputs, silo.labels)
    index = client_rng(config.seed, client_id, round_no).choice(silo.size, size=config.batch_size, replace=False)
    return Batch(inputs[index], silo.labels[index])


def _with_penalty(grad: np.ndarray, spec: ModelSpec, w: ParamVector, batch: Batch,
                  v_bar_prev: VarianceDiag, config: RoundConfig) -> np.ndarray:
    if not config.penalty_active:
        return grad
    grad = grad.copy()
    head = w.head
    grad[head.offset:head.stop] += config.fishr_lambda * fishr_penalty_grad(spec, w, batch, v_bar_prev)
    return grad


def client_update_inter(silo: LabeledDataset, w: ParamVector, config: RoundConfig, spec: ModelSpec,
                        v_bar_prev: VarianceDiag, client_id: int = 0, round_no: int = 0) -> ClientUpdate:
    """One batch gradient plus the head-gradient variance"""
    batch = draw_batch(silo, config, client_id, round_no)
    grad = _with_penalty(backward_full(spec, w, batch), spec, w, batch, v_bar_prev, config)
    var_diag = grad_variance_diag(per_sample_head_grads(spec, w, batch))
    return ClientUpdate(client_id=client_id, grad=grad, var_diag=var_diag, n_e=batch.size)


def client_update_intra(silo: LabeledDataset, w: ParamVector, config: RoundConfig, spec: ModelSpec,
                        v_bar_prev: VarianceDiag, client_id: int = 0, round_no: int = 0,
                        chunk_gradient: ChunkGradient = backward_full) -> ClientUpdate:
    """Aggregate chunk gradients inside the silo (geometric, or arithmetic for fishr_intra_arith)"""
    batch = draw_batch(silo, config, client_id, round_no)
    chunk_grads = [
        chunk_gradient(spec, w, Batch(batch.inputs[start:start + config.geo_chunk],
                                      batch.labels[start:start + config.geo_chunk]))
        for start in range(0, batch.size, config.geo_chunk)
    ]
    combine = arith_mean if config.mode == AlgoMode.FISHR_INTRA_ARITH else weighted_geo_mean
    grad = _with_penalty(combine(chunk_grads), spec, w, batch, v_bar_prev, config)
    var_diag = grad_variance_diag(per_sample_head_grads(spec, w, batch))
    return ClientUpdate(client_id=client_id, grad=grad, var_diag=var_diag, n_e=batch.size)


def client_update(silo: LabeledDataset, w: ParamVector, config: RoundConfig, spec: ModelSpec,
                  v_bar_prev: VarianceDiag, client_id: int, round_no: int) -> ClientUpdate:
    update_fn = client_update_intra if config.mode.intra_silo else client_update_inter
    return update_fn(silo, w, config, spec, v_bar_prev, client_id, round_no)


def _check_update(update: ClientUpdate, n_params: int, n_head: int) -> None:
    if update.grad.shape != (n_params,):
        raise ProtocolError(f"client {update.client_id}: gradient has shape {update.grad.shape}, expected ({n_params},)")
    if update.var_diag.values.shape != (n_head,):
        raise ProtocolError(
            f"client {update.client_id}: variance has shape {update.var_diag.values.shape}, expected ({n_head},)"
        )


def server_round(state: ServerState, updates: Sequence[ClientUpdate], config: RoundConfig) -> ServerState:
    """Combine client gradients by mode, take one optimizer step, refresh the variance mean"""
    if not updates:
        raise ProtocolError("a round needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in round: {ids}")
    for update in ordered:
        _check_update(update, state.w.values.shape[0], state.v_bar_prev.values.shape[0])

    grads = np.stack([u.grad for u in ordered])
    combined = weighted_geo_mean(grads) if config.mode.geometric_server else arith_mean(grads)
    if config.optimizer == OptimizerKind.ADAM:
        w, adam = adam_step(state.adam, state.w, combined)
    else:
        w, adam = sgd_step(state.w, combined, config.lr, config.weight_decay), state.adam

    variances = [u.var_diag for u in ordered]
    v_bar = VarianceDiag(mean_variance(variances), sum(u.n_e for u in ordered))
    return ServerState(w=w, adam=adam, v_bar_prev=v_bar, round=state.round + 1, fishr_loss=fishr_loss(variances))


class Evaluator:
    """Scores the global model on every silo and the OOD set"""

    def __init__(self, fed_data: FederationDataset, spec: ModelSpec):
        self.spec = spec
        self.fed_data = fed_data
        self._train = [silo.train.as_batch() for silo in fed_data.silos]
        self._val = [silo.val.as_batch() for silo in fed_data.silos]
        self._ood = fed_data.ood_test.as_batch()

    def _pooled_loss(self, w: ParamVector, batches: List[Batch]) -> Tuple[float, List[float]]:
        losses, accuracies, sizes = [], [], []
        for batch in batches:
            loss, acc, _, _ = evaluate(self.spec, w, batch.inputs, batch.labels)
            losses.append(loss)
            accuracies.append(acc)
            sizes.append(batch.size)
        return float(np.dot(losses, sizes) / np.sum(sizes)), accuracies

    def _subenv_accuracy(self, w: ParamVector) -> Dict[str, float]:
        result = {}
        for silo_index, (silo, batch) in enumerate(zip(self.fed_data.silos, self._val)):
            tags = silo.val.attributes.get("sub_env")
            if tags is None:
                continue
            for env, acc in group_accuracy(self.spec, w, batch.inputs, batch.labels, tags).items():
                result[f"silo{silo_index}/env{env}"] = acc
        return result

    def evaluate(self, w: ParamVector, round_no: int, server_fishr_loss: float = 0.0) -> Tuple[RoundRecord, EvalReport]:
        train_loss, _ = self._pooled_loss(w, self._train)
        val_loss, per_silo_accuracy = self._pooled_loss(w, self._val)
        ood_loss, ood_acc, ood_auroc, ood_auprc = evaluate(self.spec, w, self._ood.inputs, self._ood.labels)
        record = RoundRecord(
            round=round_no, train_loss=train_loss, val_loss=val_loss, ood_loss=ood_loss, ood_acc=ood_acc,
            ood_auroc=ood_auroc, ood_auprc=ood_auprc, fishr_loss=server_fishr_loss,
        )
        report = EvalReport(
            loss=ood_loss, accuracy=ood_acc, auroc=ood_auroc, auprc=ood_auprc,
            per_silo_accuracy=per_silo_accuracy, per_subenv_accuracy=self._subenv_accuracy(w),
        )
        return record, report


class FederationCoordinator:
    """Server side of the protocol, shared by the in-process runner and the HTTP server"""

    def __init__(self, fed_data: FederationDataset, config: RoundConfig, spec: ModelSpec,
                 on_finished: Optional[Callable[[RoundLog], None]] = None):
        self.config = config
        self.spec = spec
        self.n_clients = len(fed_data.silos)
        self.evaluator = Evaluator(fed_data, spec)
        self.state = init_server_state(spec, config)
        self.log = RoundLog()
        self.on_finished = on_finished
        self._registered: set = set()
        self._pending: Dict[int, ClientUpdate] = {}
        self._best_loss = math.inf
        self._lock = threading.Lock()

    @property
    def status(self) -> str:
        if self.state.round >= self.config.rounds:
            return "done"
        if len(self._registered) < self.n_clients:
            return "waiting"
        return "open"

    @property
    def finished(self) -> bool:
        return self.status == "done"

    def register(self, silo_index: Optional[int] = None) -> int:
        with self._lock:
            if silo_index is None:
                free = [i for i in range(self.n_clients) if i not in self._registered]
                if not free:
                    raise ProtocolError("all client slots are taken", status=409, error_type="RegistrationError")
                silo_index = free[0]
            if not 0 <= silo_index < self.n_clients:
                raise ProtocolError(f"silo index {silo_index} out of range [0, {self.n_clients})",
                                    error_type="RegistrationError")
            if silo_index in self._registered:
                raise ProtocolError(f"silo {silo_index} is already registered", status=409,
                                    error_type="RegistrationError")
            self._registered.add(silo_index)
            logger.info(f"Registered client {silo_index} ({len(self._registered)}/{self.n_clients})")
            return silo_index

    def broadcast(self) -> Tuple[int, ParamVector, VarianceDiag]:
        with self._lock:
            return self.state.round, self.state.w, self.state.v_bar_prev

    def ticket(self) -> RoundTicket:
        with self._lock:
            status = self.status
            return RoundTicket(
                round=self.state.round,
                status=status,
                mode=self.config.mode,
                fishr_lambda=self.config.fishr_lambda,
                w=self.state.w.values.tolist() if status == "open" else [],
                v_bar_prev=self.state.v_bar_prev.values.tolist() if status == "open" else [],
            )

    def submit(self, update: ClientUpdate, round_no: int) -> bool:
        """Queue one client update; closes the round once every client reported"""
        with self._lock:
            status = self.status
            if status != "open":
                raise ProtocolError(f"round is not open (status {status})", status=409, error_type="StaleRound")
            if round_no != self.state.round:
                raise ProtocolError(f"update for round {round_no}, server is at round {self.state.round}",
                                    status=409, error_type="StaleRound")
            if update.client_id not in self._registered:
                raise ProtocolError(f"client {update.client_id} is not registered", error_type="UnknownClient")
            if update.client_id in self._pending:
                raise ProtocolError(f"client {update.client_id} already reported round {round_no}",
                                    status=409, error_type="DuplicateUpdate")
            _check_update(update, self.state.w.values.shape[0], self.state.v_bar_prev.values.shape[0])
            self._pending[update.client_id] = update
            if len(self._pending) < self.n_clients:
                return False
            self._close_round()
            return True

    def _close_round(self) -> None:
        round_start = time.time()
        updates = list(self._pending.values())
        self._pending.clear()
        self.state = server_round(self.state, updates, self.config)
        set_round(self.state.round)

        record, report = self.evaluator.evaluate(self.state.w, self.state.round, self.state.fishr_loss)
        self.log.records.append(record)
        if record.ood_loss < self._best_loss:
            self._best_loss = record.ood_loss
            self.log.best_round = record.round
            self.log.best_report = report
        logger.debug(f"train {record.train_loss:.4f} val {record.val_loss:.4f} ood {record.ood_loss:.4f} "
                     f"acc {record.ood_acc:.3f} fishr {record.fishr_loss:.3g} "
                     f"in {time.time() - round_start:.2f}s")

        if self.finished:
            logger.info(f"Finished {self.state.round} rounds; best OOD loss {self._best_loss:.4f} "
                        f"at round {self.log.best_round}")
            if self.on_finished is not None:
                self.on_finished(self.log)


def update_from_payload(payload: UpdatePayload) -> ClientUpdate:
    values = np.asarray(payload.var_diag, dtype=np.float64)
    try:
        var_diag = VarianceDiag(values, payload.n)
    except ValueError as e:
        raise ProtocolError(f"client {payload.client_id}: {e}") from e
    return ClientUpdate(
        client_id=payload.client_id,
        grad=np.asarray(payload.grad, dtype=np.float64),
        var_diag=var_diag,
        n_e=payload.n,
    )


def payload_from_update(update: ClientUpdate, round_no: int) -> UpdatePayload:
    return UpdatePayload(
        client_id=update.client_id,
        round=round_no,
        grad=update.grad.tolist(),
        var_diag=update.var_diag.values.tolist(),
        n=update.n_e,
    )


def run_experiment(fed_data: FederationDataset, config: RoundConfig, spec: ModelSpec) -> RoundLog:
    """All rounds in-process; clients report in ascending id order"""
    if spec.input_size != fed_data.n_features:
        raise ProtocolError(f"model expects {spec.input_size} features, data has {fed_data.n_features}")
    start_time = time.time()
    set_round(0)
    coordinator = FederationCoordinator(fed_data, config, spec)
    for silo_index in range(coordinator.n_clients):
        coordinator.register(silo_index)

    logger.info(f"Running {config.rounds} rounds of {config.mode.value} with {coordinator.n_clients} clients "
                f"(lambda={config.fishr_lambda}, seed={config.seed})")
    while coordinator.status == "open":
        round_no, w, v_bar_prev = coordinator.broadcast()
        for client_id, silo in enumerate(fed_data.silos):
            update = client_update(silo.train, w, config, spec, v_bar_prev, client_id, round_no)
            coordinator.submit(update, round_no)

    logger.info(f"Experiment finished in {time.time() - start_time:.2f}s")
    return coordinator.log


def round_log_csv(log: RoundLog) -> str:
    """Per-round CSV with the fixed column set; floats with 17 significant digits"""
    frame = pd.DataFrame([record.model_dump() for record in log.records], columns=ROUND_COLUMNS)
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
