"""Server round loop.

The loop is written against a small client-pool interface so the same code
drives TCP clients, threaded in-memory clients and the single-threaded
deterministic simulation:

1. wait until ``min_available_clients`` have joined;
2. per round, sample ``ceil(fraction_fit * connected)`` clients, send FIT_INS,
   collect FIT_RES until all answered or ``round_timeout`` passed;
3. aggregate (results sorted by client id), send EVAL_INS to every
   connected client and log the weighted loss/accuracy;
4. after the last round send DONE and promote ``.temp`` into ``runs/``.

Replies for an older round are discarded and listed in the round record.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..model import ModelSpec, TrainConfig, init_params
from ..monitor import ACCURACY, LOSS, ROUND, NetCounter, Registry, parse_address
from ..params import ParamVector
from ..storage import Experiment, ExperimentConfig
from ..strategies import EvalResult, FitResult, StrategyConfig, StrategyState, aggregate, aggregate_eval, init_state
from .messages import Message, MessageType, ProtocolError, done, error, frame, unframe
from .transport import Connection, ConnectionClosed, SocketConnection

log = logging.getLogger(__name__)

DEFAULT_ROUND_TIMEOUT = 300.0
JOIN_TIMEOUT = 30.0


class ServerError(Exception):
    pass


class ServerStopped(ServerError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    listen_address: str = "127.0.0.1:8080"
    rounds: int = 1
    min_available_clients: int = 1
    fraction_fit: float = 1.0
    round_timeout: float = DEFAULT_ROUND_TIMEOUT
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    model: Optional[ModelSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    experiment_name: str = "experiment"

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.min_available_clients < 1:
            raise ValueError("min_available_clients must be >= 1")
        if not 0 < self.fraction_fit <= 1:
            raise ValueError("fraction_fit must lie in (0, 1]")
        if not self.round_timeout > 0:
            raise ValueError("round_timeout must be positive")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> ServerConfig:
        return cls(
            listen_address=cfg.server.address,
            rounds=cfg.rounds,
            min_available_clients=cfg.server.min_available_clients,
            fraction_fit=cfg.server.fraction_fit,
            round_timeout=cfg.server.round_timeout,
            strategy=cfg.fl_strategy,
            model=cfg.model_spec(),
            train=cfg.train_config(shuffle_seed=cfg.seed),
            seed=cfg.seed,
            experiment_name=cfg.experiment_name,
        )


@dataclass
class RunSummary:
    status: str
    rounds_completed: int
    history: list[dict]
    final_params: ParamVector
    state: StrategyState
    run_id: Optional[int] = None


class ClientPool:
    """What the round loop needs from the set of connected clients."""

    def ids(self) -> list[int]:
        raise NotImplementedError

    def wait_for(self, n: int, timeout: Optional[float], stop: threading.Event) -> bool:
        raise NotImplementedError

    def exchange(self, rnd: int, requests: dict[int, Message], expect: MessageType,
                 timeout: float) -> tuple[dict[int, Message], list[dict]]:
        raise NotImplementedError

    def broadcast(self, msg: Message) -> None:
        raise NotImplementedError

    def drain(self, timeout: float) -> bool:
        raise NotImplementedError


class ThreadedPool(ClientPool):
    """Clients on their own connections; one reader thread per connection.

    Readers push ``(client_id, message)`` into a single inbox consumed by
    the round loop.
    """

    def __init__(self, counter: Optional[NetCounter] = None, registry: Optional[Registry] = None):
        self.counter = counter
        self.registry = registry
        self._conns: dict[int, Connection] = {}
        self._inbox: queue.Queue = queue.Queue()
        self._cond = threading.Condition()
        self._threads: list[threading.Thread] = []

    def attach(self, conn: Connection) -> None:
        t = threading.Thread(target=self._reader, args=(conn,), daemon=True, name="server-conn")
        self._threads.append(t)
        t.start()

    def _reader(self, conn: Connection) -> None:
        try:
            hello = conn.recv(timeout=JOIN_TIMEOUT)
        except ProtocolError as exc:
            self._reject(conn, f"malformed message: {exc}")
            return
        except (TimeoutError, ConnectionClosed) as exc:
            log.warning("dropping connection before JOIN: %s", exc)
            conn.close()
            return
        if hello.type != MessageType.JOIN:
            self._reject(conn, f"expected JOIN, got {hello.type.name}")
            return
        cid = hello.client_id
        with self._cond:
            if cid in self._conns:
                self._reject(conn, f"client id {cid} already connected")
                return
            self._conns[cid] = conn
            self._cond.notify_all()
        log.info("client %d joined", cid)
        try:
            conn.send(Message(MessageType.JOIN_ACK, 0, client_id=cid))
            while True:
                self._inbox.put((cid, conn.recv()))
        except ProtocolError as exc:
            self._reject(conn, f"malformed message: {exc}")
        except ConnectionClosed:
            pass
        with self._cond:
            if self._conns.get(cid) is conn:
                del self._conns[cid]
            self._cond.notify_all()
        self._inbox.put((cid, None))

    def _reject(self, conn: Connection, reason: str) -> None:
        log.warning("rejecting connection: %s", reason)
        try:
            conn.send(error(reason))
        except ConnectionClosed:
            pass
        conn.close()

    def ids(self) -> list[int]:
        with self._cond:
            return sorted(self._conns)

    def wait_for(self, n: int, timeout: Optional[float], stop: threading.Event) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while len(self._conns) < n:
                if stop.is_set():
                    return False
                left = 0.1 if deadline is None else min(0.1, deadline - time.monotonic())
                if left <= 0:
                    return False
                self._cond.wait(left)
        return True

    def _send(self, cid: int, msg: Message) -> bool:
        with self._cond:
            conn = self._conns.get(cid)
        if conn is None:
            return False
        try:
            conn.send(msg)
            return True
        except ConnectionClosed:
            return False

    def exchange(self, rnd, requests, expect, timeout):
        pending = {cid for cid, msg in requests.items() if self._send(cid, msg)}
        if self.registry is not None and expect == MessageType.FIT_RES:
            self.registry.mark("fit_ins")
        replies: dict[int, Message] = {}
        discarded: list[dict] = []
        deadline = time.monotonic() + timeout
        while pending:
            left = deadline - time.monotonic()
            if left <= 0:
                break
            try:
                cid, msg = self._inbox.get(timeout=left)
            except queue.Empty:
                break
            if msg is None:
                pending.discard(cid)
            elif msg.type == expect and msg.round == rnd and cid in pending and msg.client_id == cid:
                replies[cid] = msg
                pending.discard(cid)
                if self.registry is not None and expect == MessageType.FIT_RES:
                    self.registry.mark("fit_res")
            elif msg.type == MessageType.ERROR:
                log.warning("client %d reported an error: %s", cid, msg.text)
                pending.discard(cid)
            else:
                log.info("discarding %s from client %d for round %d (current round %d)",
                         msg.type.name, cid, msg.round, rnd)
                discarded.append({"client_id": cid, "type": msg.type.name, "round": msg.round})
        return replies, discarded

    def broadcast(self, msg: Message) -> None:
        for cid in self.ids():
            self._send(cid, msg)

    def drain(self, timeout: float) -> bool:
        """Wait until every client has disconnected."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._conns:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(min(left, 0.1))
        return True


class DirectPool(ClientPool):
    """Single-threaded pool calling client handlers in ascending id order.

    Messages still go through the wire encoding so byte counts match the
    networked setup.
    """

    def __init__(self, nodes: dict, server_counter: Optional[NetCounter] = None,
                 client_counters: Optional[dict[int, NetCounter]] = None,
                 registry: Optional[Registry] = None):
        self.nodes = nodes
        self.server_counter = server_counter or NetCounter()
        self.client_counters = client_counters or {cid: NetCounter() for cid in nodes}
        self.registry = registry

    def ids(self) -> list[int]:
        return sorted(self.nodes)

    def wait_for(self, n, timeout, stop):
        return len(self.nodes) >= n

    def _deliver(self, cid: int, msg: Message) -> Optional[Message]:
        data = frame(msg)
        self.server_counter.add_out(len(data))
        self.client_counters[cid].add_in(len(data))
        reply = self.nodes[cid].handle(unframe(data)[0])
        if reply is None:
            return None
        data = frame(reply)
        self.client_counters[cid].add_out(len(data))
        self.server_counter.add_in(len(data))
        return unframe(data)[0]

    def exchange(self, rnd, requests, expect, timeout):
        replies = {}
        for cid in sorted(requests):
            if self.registry is not None and expect == MessageType.FIT_RES:
                self.registry.mark("fit_ins")
            reply = self._deliver(cid, requests[cid])
            if reply is not None and reply.type == expect and reply.round == rnd:
                replies[cid] = reply
                if self.registry is not None and expect == MessageType.FIT_RES:
                    self.registry.mark("fit_res")
        return replies, []

    def broadcast(self, msg):
        for cid in self.ids():
            self._deliver(cid, msg)

    def drain(self, timeout):
        return True


RoundCallback = Callable[[int, list[FitResult], StrategyState], None]


class Server:
    def __init__(self, cfg: ServerConfig, experiment: Optional[Experiment], pool: ClientPool,
                 registry: Optional[Registry] = None, on_round: Optional[RoundCallback] = None,
                 barrier_timeout: Optional[float] = None):
        if cfg.model is None:
            raise ServerError("server config has no model spec")
        self.cfg = cfg
        self.experiment = experiment
        self.pool = pool
        self.registry = registry
        self.on_round = on_round
        self.barrier_timeout = barrier_timeout
        self.status = "created"
        self.rounds_started = 0
        self.history: list[dict] = []
        self.before_finalize: list[Callable[[], None]] = []
        self._stop = threading.Event()
        self._rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.state = init_state(cfg.strategy, init_params(cfg.model))

    def stop(self) -> None:
        self._stop.set()

    def _gauge(self, name: str, value: float) -> None:
        if self.registry is not None:
            self.registry.set(name, value, experiment=self.cfg.experiment_name)

    def _sample(self, ids: list[int]) -> list[int]:
        k = math.ceil(self.cfg.fraction_fit * len(ids))
        return sorted(int(c) for c in self._rng.choice(ids, size=k, replace=False))

    def _record(self, record: dict) -> None:
        self.history.append(record)
        if self.experiment is not None:
            self.experiment.append_round_record(record)

    def _round(self, rnd: int) -> bool:
        sampled = self._sample(self.pool.ids())
        ins = {cid: Message(MessageType.FIT_INS, rnd, params=self.state.params, train=self.cfg.train)
               for cid in sampled}
        fit_replies, discarded = self.pool.exchange(rnd, ins, MessageType.FIT_RES, self.cfg.round_timeout)
        results = [FitResult(cid, m.params, m.num_examples, m.loss) for cid, m in sorted(fit_replies.items())]
        record = {"round": rnd, "sampled": sampled, "participants": sorted(fit_replies),
                  "discarded": discarded}
        if not results:
            record.update(status="failed", loss_distributed=None, accuracy_distributed=None, evaluated=[])
            self._record(record)
            log.error("round %d: no client answered within %.1fs", rnd, self.cfg.round_timeout)
            return False
        self.state = aggregate(self.state, results)
        if self.experiment is not None:
            self.experiment.save_params(f"global-round-{rnd}", self.state.params)
        if self.on_round is not None:
            self.on_round(rnd, results, self.state)

        evals = {cid: Message(MessageType.EVAL_INS, rnd, params=self.state.params) for cid in self.pool.ids()}
        eval_replies, late = self.pool.exchange(rnd, evals, MessageType.EVAL_RES, self.cfg.round_timeout)
        discarded.extend(late)
        eval_results = [EvalResult(cid, m.num_examples, m.loss, m.confusion)
                        for cid, m in sorted(eval_replies.items())]
        loss = acc = None
        if eval_results:
            loss, acc = aggregate_eval(eval_results)
        n_train = sum(r.num_examples for r in results)
        record.update(
            status="ok",
            evaluated=sorted(eval_replies),
            loss_distributed=loss,
            accuracy_distributed=acc,
            train_loss=sum(r.num_examples * r.train_loss for r in results) / n_train,
        )
        self._record(record)
        self._gauge(ROUND, rnd)
        if acc is not None:
            self._gauge(ACCURACY, acc)
            self._gauge(LOSS, loss)
        log.info("round %d: %d/%d fit results, accuracy=%s loss=%s", rnd, len(results), len(sampled), acc, loss)
        return True

    def run(self) -> RunSummary:
        self.status = "waiting"
        log.info("waiting for %d client(s)", self.cfg.min_available_clients)
        if not self.pool.wait_for(self.cfg.min_available_clients, self.barrier_timeout, self._stop):
            self.status = "stopped"
            self.pool.broadcast(done(0))
            raise ServerStopped(
                f"only {len(self.pool.ids())} of {self.cfg.min_available_clients} required clients connected"
            )
        self.status = "running"
        if self.experiment is not None:
            self.experiment.temp.mkdir(exist_ok=True)
            self.experiment.save_params("global-round-0", self.state.params)
        status = "completed"
        for rnd in range(1, self.cfg.rounds + 1):
            if self._stop.is_set():
                status = "stopped"
                break
            self.rounds_started = rnd
            if not self._round(rnd):
                status = "aborted"
                break
        self.pool.broadcast(done(self.rounds_started))
        if not self.pool.drain(self.cfg.round_timeout):
            log.warning("some clients did not disconnect after DONE")
        for hook in self.before_finalize:
            hook()
        run_id = self.experiment.finalize_run() if self.experiment is not None else None
        self.status = status
        completed = sum(1 for r in self.history if r["status"] == "ok")
        return RunSummary(status, completed, self.history, self.state.params, self.state, run_id)


class TcpServer:
    """Listening socket feeding accepted connections into a :class:`ThreadedPool`."""

    def __init__(self, cfg: ServerConfig, experiment: Optional[Experiment], registry: Optional[Registry] = None,
                 barrier_timeout: Optional[float] = None, on_round: Optional[RoundCallback] = None):
        self.registry = registry
        self.counter = NetCounter(registry, "server", "0")
        self.pool = ThreadedPool(self.counter, registry)
        self.server = Server(cfg, experiment, self.pool, registry, on_round, barrier_timeout)
        host, port = parse_address(cfg.listen_address)
        try:
            self.sock = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise ServerError(f"cannot bind {cfg.listen_address}: {exc}") from exc
        self._closing = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept, daemon=True, name="server-accept")
        self._accept_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def _accept(self) -> None:
        while not self._closing.is_set():
            try:
                sock, _ = self.sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.pool.attach(SocketConnection(sock, self.counter))

    def serve(self) -> RunSummary:
        try:
            return self.server.run()
        finally:
            self.close()

    def close(self) -> None:
        self._closing.set()
        try:
            self.sock.close()
        except OSError:
            pass


def run_server(cfg: ServerConfig, experiment: Optional[Experiment], registry: Optional[Registry] = None,
               barrier_timeout: Optional[float] = None) -> RunSummary:
    return TcpServer(cfg, experiment, registry, barrier_timeout).serve()
