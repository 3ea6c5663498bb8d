import dataclasses
import threading
import time

import numpy as np
import pytest

from fedharness.partition import PartitionSpec
from fedharness.protocol import Message, MessageType, ServerConfig
from fedharness.protocol.messages import join
from fedharness.protocol.server import Server, ThreadedPool
from fedharness.protocol.transport import pipe
from fedharness.storage import DatasetConfig, ExperimentConfig, ServerSettings, init_experiment


def synthetic_config(name="exp", clients=3, rounds=2, epochs=1, lr=0.5, strategy=None, **server):
    from fedharness.strategies import StrategyConfig

    return ExperimentConfig(
        experiment_name=name,
        dataset=DatasetConfig("synthetic", num_classes=3, samples_per_class=40, feature_dim=8, seed=1),
        partition=PartitionSpec(clients, seed=2),
        model={"kind": "logreg", "init_seed": 3},
        fl_strategy=strategy or StrategyConfig("fedavg"),
        rounds=rounds,
        local_epochs=epochs,
        batch_size=16,
        learning_rate=lr,
        seed=4,
        server=ServerSettings(**{"min_available_clients": 1, "round_timeout": 30.0, **server}),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_experiment(tmp_path):
    def make(**kw):
        return init_experiment(tmp_path / "root", synthetic_config(**kw))

    return make


def fake_client(conn, cid, late_round=None, delay=0.0, answer_fit=True):
    """Scripted client: echoes params back, optionally late for one round."""
    conn.send(join(cid))
    while True:
        msg = conn.recv(timeout=30)
        if msg.type == MessageType.FIT_INS:
            if not answer_fit:
                continue
            if msg.round == late_round:
                time.sleep(delay)
            conn.send(Message(MessageType.FIT_RES, msg.round, client_id=cid, params=msg.params,
                              num_examples=5, loss=0.0))
        elif msg.type == MessageType.EVAL_INS:
            conn.send(Message(MessageType.EVAL_RES, msg.round, client_id=cid, num_examples=4, loss=1.0,
                              confusion=np.diag([2, 2, 0])))
        elif msg.type == MessageType.DONE:
            conn.close()
            return


def threaded_server(exp, scripts, **cfg_over):
    pool = ThreadedPool()
    for cid, kwargs in scripts.items():
        server_end, client_end = pipe()
        pool.attach(server_end)
        threading.Thread(target=fake_client, args=(client_end, cid), kwargs=kwargs, daemon=True).start()
    pool.wait_for(len(scripts), 5, threading.Event())
    seen = []
    server = Server(dataclasses.replace(ServerConfig.from_experiment(exp.config), **cfg_over), exp, pool,
                    on_round=lambda rnd, results, state: seen.append((rnd, results, state)))
    return server, seen
