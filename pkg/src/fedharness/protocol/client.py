"""Client side: train on FIT_INS, evaluate on EVAL_INS, stop on DONE.

A client only ever talks to the server.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import metrics
from ..model import evaluate, forward_loss_grad, train_local
from ..monitor import NetCounter, Registry, parse_address
from ..params import ParamVector
from ..storage import Experiment
from .messages import Message, MessageType, ProtocolError, error, join
from .transport import Connection, ConnectionClosed, SocketConnection

log = logging.getLogger(__name__)

POLL_INTERVAL = 1.0
CONNECT_RETRIES = 10

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_PROTOCOL = 2


def derive_shuffle_seed(base: int, rnd: int, client_id: int) -> int:
    ss = np.random.SeedSequence([base, rnd, client_id])
    return int(ss.generate_state(1, np.uint64)[0])


class ClientNode:
    """Message handler holding one client's data and model state."""

    def __init__(self, client_id: int, experiment: Experiment):
        self.client_id = client_id
        self.experiment = experiment
        cfg = experiment.config
        self.spec = cfg.model_spec()
        self.x_train, self.y_train, self.x_test, self.y_test = experiment.load_client_data(client_id)
        self.params: Optional[ParamVector] = None
        self.finished = False

    def _epoch_hook(self, rnd: int):
        def hook(epoch: int, params: ParamVector) -> None:
            loss, confusion = evaluate(self.spec, params, self.x_test, self.y_test)
            report = metrics.compute(confusion)
            self.experiment.append_epoch_record(self.client_id, {
                "client_id": self.client_id,
                "round": rnd,
                "epoch": epoch,
                "loss": loss,
                "num_examples": int(len(self.y_test)),
                "confusion": confusion.tolist(),
                "accuracy": report.accuracy,
                "micro_f1": report.micro_f1,
                "macro_f1": report.macro_f1,
                "weighted_f1": report.weighted_f1,
                "metrics": report.to_dict(),
            })
        return hook

    def fit(self, msg: Message) -> Message:
        cfg = replace(msg.train, shuffle_seed=derive_shuffle_seed(msg.train.shuffle_seed, msg.round,
                                                                 self.client_id))
        trained = train_local(self.spec, msg.params, self.x_train, self.y_train, cfg,
                              self._epoch_hook(msg.round))
        self.params = trained
        train_loss, _ = forward_loss_grad(self.spec, trained, self.x_train, self.y_train)
        return Message(MessageType.FIT_RES, msg.round, client_id=self.client_id, params=trained,
                       num_examples=int(len(self.y_train)), loss=train_loss)

    def evaluate(self, msg: Message) -> Message:
        self.params = msg.params
        loss, confusion = evaluate(self.spec, msg.params, self.x_test, self.y_test)
        return Message(MessageType.EVAL_RES, msg.round, client_id=self.client_id,
                       num_examples=int(len(self.y_test)), loss=loss, confusion=confusion)

    def handle(self, msg: Message) -> Optional[Message]:
        """Process one server message; return the reply, if any."""
        if msg.type == MessageType.FIT_INS:
            return self.fit(msg)
        if msg.type == MessageType.EVAL_INS:
            return self.evaluate(msg)
        if msg.type == MessageType.DONE:
            if self.params is not None:
                self.experiment.save_params(f"client-{self.client_id}-final", self.params)
            self.finished = True
            return None
        if msg.type in (MessageType.JOIN_ACK, MessageType.ERROR):
            return None
        return error(f"client cannot handle {msg.type.name}", msg.round)


def client_loop(conn: Connection, node: ClientNode) -> int:
    """Drive ``node`` from ``conn`` until DONE; returns an exit status."""
    try:
        conn.send(join(node.client_id))
        while not node.finished:
            try:
                msg = conn.recv()
            except ProtocolError as exc:
                log.error("client %d: malformed message: %s", node.client_id, exc)
                try:
                    conn.send(error(str(exc)))
                except ConnectionClosed:
                    pass
                return EXIT_PROTOCOL
            reply = node.handle(msg)
            if reply is not None:
                conn.send(reply)
        return EXIT_OK
    except ConnectionClosed as exc:
        log.error("client %d: connection lost: %s", node.client_id, exc)
        return EXIT_FAILED
    finally:
        conn.close()


def wait_for_experiment(path: str | os.PathLike, client_id: int, poll_interval: float = POLL_INTERVAL,
                        timeout: Optional[float] = None) -> Experiment:
    exp = Experiment(Path(path))
    deadline = None if timeout is None else time.monotonic() + timeout
    while not (exp.is_initialized() and exp.client_dir(client_id).is_dir()):
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError(f"experiment {path} was not initialized in time")
        time.sleep(poll_interval)
    return exp


def run_client(server_address: str, client_id: int, experiment_path: str | os.PathLike,
               registry: Optional[Registry] = None, poll_interval: float = POLL_INTERVAL,
               retries: int = CONNECT_RETRIES, wait_timeout: Optional[float] = None) -> int:
    exp = wait_for_experiment(experiment_path, client_id, poll_interval, wait_timeout)
    node = ClientNode(client_id, exp)
    host, port = parse_address(server_address)
    counter = NetCounter(registry, "client", str(client_id))
    for attempt in range(retries + 1):
        try:
            conn = SocketConnection.connect(host, port, counter)
            break
        except OSError as exc:
            if attempt == retries:
                log.error("client %d: cannot reach %s: %s", client_id, server_address, exc)
                return EXIT_FAILED
            time.sleep(poll_interval)
    return client_loop(conn, node)

