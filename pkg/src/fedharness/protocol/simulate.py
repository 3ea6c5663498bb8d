"""In-process runs of a whole experiment.

``deterministic`` calls the clients one after another in ascending id order
on the calling thread. ``concurrent`` gives each client its own thread and
an in-memory framed connection to the server. Both aggregate results in
client-id order, so they produce the same global model.
"""

from __future__ import annotations

import threading
from typing import Optional

from ..monitor import NetCounter, Registry
from ..storage import Experiment
from .client import ClientNode, client_loop
from .server import DirectPool, RoundCallback, RunSummary, Server, ServerConfig, ServerError, ThreadedPool
from .transport import pipe

MODES = ("deterministic", "concurrent")


def simulate(cfg: ServerConfig, num_clients: int, experiment: Experiment, mode: str = "deterministic",
             registry: Optional[Registry] = None, on_round: Optional[RoundCallback] = None) -> RunSummary:
    if mode in ("det", "conc"):
        mode = {"det": "deterministic", "conc": "concurrent"}[mode]
    if mode not in MODES:
        raise ValueError(f"unknown simulation mode {mode!r}")
    available = experiment.num_data_clients()
    if available != num_clients:
        raise ServerError(f"experiment has data for {available} clients, simulation asked for {num_clients}")
    if num_clients < cfg.min_available_clients:
        raise ServerError(f"{num_clients} simulated clients can never satisfy "
                          f"min_available_clients={cfg.min_available_clients}")
    nodes = {cid: ClientNode(cid, experiment) for cid in range(num_clients)}
    server_counter = NetCounter(registry, "server", "0")
    client_counters = {cid: NetCounter(registry, "client", str(cid)) for cid in nodes}

    if mode == "deterministic":
        pool = DirectPool(nodes, server_counter, client_counters, registry)
        return Server(cfg, experiment, pool, registry, on_round).run()

    pool = ThreadedPool(server_counter, registry)
    threads = []
    exits: dict[int, int] = {}
    for cid, node in nodes.items():
        server_end, client_end = pipe(server_counter, client_counters[cid])
        pool.attach(server_end)

        def work(c=client_end, n=node):
            exits[n.client_id] = client_loop(c, n)

        t = threading.Thread(target=work, name=f"sim-client-{cid}", daemon=True)
        threads.append(t)
        t.start()
    # all simulated clients exist up front; start only once every one has joined
    pool.wait_for(num_clients, cfg.round_timeout, threading.Event())
    try:
        return Server(cfg, experiment, pool, registry, on_round).run()
    finally:
        for t in threads:
            t.join(timeout=cfg.round_timeout)
