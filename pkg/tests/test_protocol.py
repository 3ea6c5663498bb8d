import dataclasses
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import threaded_server

from fedharness.model import TrainConfig, init_params, train_local
from fedharness.params import ParamVector
from fedharness.protocol import (
    ClientNode,
    Message,
    MessageType,
    ProtocolError,
    ServerConfig,
    TcpServer,
    client_loop,
    decode,
    encode,
    frame,
    run_client,
    simulate,
    unframe,
)
from fedharness.protocol.client import derive_shuffle_seed
from fedharness.protocol.messages import done, error
from fedharness.protocol.server import ServerStopped, ThreadedPool
from fedharness.protocol.transport import pipe
from fedharness.storage import load_params, read_json_lines
from fedharness.strategies import StrategyConfig, aggregate, init_state

finite = st.floats(allow_nan=False, allow_infinity=False)
u32 = st.integers(0, 2**32 - 1)
params = st.builds(lambda v, l: ParamVector(np.array(v, dtype=float), l),
                   st.lists(finite, min_size=1, max_size=20), st.text(max_size=12))
train_cfgs = st.builds(TrainConfig, st.integers(1, 50), st.integers(1, 512), st.floats(1e-6, 10.0),
                       st.integers(0, 2**64 - 1))
confusions = st.integers(1, 5).flatmap(
    lambda c: st.lists(st.integers(0, 2**40), min_size=c * c, max_size=c * c).map(
        lambda v: np.array(v, dtype=np.int64).reshape(c, c)))

messages = st.one_of(
    st.builds(lambda r, c: Message(MessageType.JOIN, r, client_id=c), u32, u32),
    st.builds(lambda r, c: Message(MessageType.JOIN_ACK, r, client_id=c), u32, u32),
    st.builds(lambda r, p, t: Message(MessageType.FIT_INS, r, params=p, train=t), u32, params, train_cfgs),
    st.builds(lambda r, c, n, l, p: Message(MessageType.FIT_RES, r, client_id=c, num_examples=n, loss=l, params=p),
              u32, u32, u32, finite, params),
    st.builds(lambda r, p: Message(MessageType.EVAL_INS, r, params=p), u32, params),
    st.builds(lambda r, c, n, l, m: Message(MessageType.EVAL_RES, r, client_id=c, num_examples=n, loss=l,
                                            confusion=m), u32, u32, u32, finite, confusions),
    st.builds(lambda r: Message(MessageType.DONE, r), u32),
    st.builds(lambda r, t: Message(MessageType.ERROR, r, text=t), u32, st.text(max_size=40)),
)


class TestFraming:
    @settings(max_examples=300)
    @given(messages)
    def test_round_trip(self, msg):
        data = frame(msg)
        back, used = unframe(data)
        assert used == len(data)
        assert encode(back) == encode(msg)
        assert int.from_bytes(data[:4], "big") == len(data) - 4
        assert data[4] == int(msg.type)

    @settings(max_examples=50)
    @given(st.lists(messages, min_size=1, max_size=8))
    def test_stream_of_frames(self, batch):
        stream = b"".join(frame(m) for m in batch)
        out, off = [], 0
        while off < len(stream):
            m, used = unframe(stream[off:])
            out.append(m)
            off += used
        assert [encode(m) for m in out] == [encode(m) for m in batch]

    @pytest.mark.parametrize("payload", [b"", b"\x09\x00\x00\x00\x00", b"\x07\x00\x00\x00\x00\x00",
                                         b"\x01\x00\x00\x00\x00\x00\x00"])
    def test_malformed_payloads(self, payload):
        with pytest.raises(ProtocolError):
            decode(payload)

    def test_truncated_frame(self):
        data = frame(done(3))
        with pytest.raises(ProtocolError):
            unframe(data[:-1])
        with pytest.raises(ProtocolError):
            unframe(data[:2])

    def test_message_equality_is_by_encoding(self):
        p = ParamVector(np.array([1.0]), "x")
        assert Message(MessageType.EVAL_INS, 1, params=p) == Message(MessageType.EVAL_INS, 1, params=p)
        assert Message(MessageType.EVAL_INS, 1, params=p) != Message(MessageType.EVAL_INS, 2, params=p)


def start_client(exp, cid):
    server_end, client_end = pipe()
    node = ClientNode(cid, exp)
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("exit", client_loop(client_end, node)), daemon=True)
    t.start()
    assert server_end.recv(timeout=5).type == MessageType.JOIN
    return server_end, node, t, box


class TestClient:
    def test_done_first_writes_nothing(self, make_experiment):
        exp = make_experiment()
        conn, _, t, box = start_client(exp, 0)
        conn.send(done())
        t.join(5)
        assert box["exit"] == 0
        assert not (exp.temp / "results" / "client-0.jsonl").exists()

    def test_fit_with_two_epochs_logs_two_records(self, make_experiment):
        exp = make_experiment(epochs=2)
        cfg = exp.config
        spec = cfg.model_spec()
        conn, node, t, box = start_client(exp, 1)
        conn.send(Message(MessageType.FIT_INS, 1, params=init_params(spec), train=cfg.train_config(5)))
        reply = conn.recv(timeout=10)
        assert reply.type == MessageType.FIT_RES and reply.round == 1 and reply.client_id == 1
        assert reply.num_examples == len(node.y_train)
        records, skipped = read_json_lines(exp.epoch_log(1))
        assert skipped == 0 and [r["epoch"] for r in records] == [1, 2]
        assert all(r["round"] == 1 and np.sum(r["confusion"]) == len(node.y_test) for r in records)
        conn.send(done(1))
        t.join(5)
        assert box["exit"] == 0
        assert load_params(exp.temp / "results" / "params" / "client-1-final.bin") == reply.params

    def test_malformed_message_gets_error_reply(self, make_experiment):
        exp = make_experiment()
        conn, _, t, box = start_client(exp, 0)
        conn.send_raw(b"\x00\x00\x00\x05\x63\x00\x00\x00\x01")
        reply = conn.recv(timeout=5)
        t.join(5)
        assert reply.type == MessageType.ERROR
        assert box["exit"] != 0

    def test_connection_refused(self, make_experiment):
        exp = make_experiment()
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        assert run_client(f"127.0.0.1:{port}", 0, exp.path, poll_interval=0.01, retries=2) != 0


def server_config(exp, **over):
    return dataclasses.replace(ServerConfig.from_experiment(exp.config), listen_address="127.0.0.1:0", **over)


def test_single_client_single_round_matches_local_training(make_experiment):
    exp = make_experiment(clients=1, rounds=1)
    cfg = server_config(exp)
    summary = simulate(cfg, 1, exp)
    x, y, _, _ = exp.load_client_data(0)
    train = TrainConfig(cfg.train.local_epochs, cfg.train.batch_size, cfg.train.learning_rate,
                        derive_shuffle_seed(cfg.seed, 1, 0))
    expected = train_local(cfg.model, init_params(cfg.model), x, y, train)
    assert summary.final_params.values.tobytes() == expected.values.tobytes()


def test_three_clients_three_rounds(make_experiment):
    exp = make_experiment(clients=3, rounds=3)
    summary = simulate(server_config(exp), 3, exp)
    assert summary.status == "completed" and summary.rounds_completed == 3
    records, _ = read_json_lines(exp.run_path(summary.run_id) / "logs" / "server.jsonl")
    assert [r["round"] for r in records] == [1, 2, 3]
    assert all(r["loss_distributed"] is not None and 0 <= r["accuracy_distributed"] <= 1 for r in records)


@pytest.mark.parametrize("mode", ["det", "conc"])
def test_client_final_params_equal_last_global(make_experiment, mode):
    exp = make_experiment(clients=2, rounds=2)
    summary = simulate(server_config(exp), 2, exp, mode)
    params_dir = exp.run_path(summary.run_id) / "results" / "params"
    final = load_params(params_dir / "global-round-2.bin")
    assert final == summary.final_params
    for cid in (0, 1):
        assert load_params(params_dir / f"client-{cid}-final.bin") == final


def run_files(exp, run_id):
    root = exp.run_path(run_id)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_deterministic_runs_are_identical(tmp_path):
    from conftest import synthetic_config
    from fedharness.storage import init_experiment

    outs = []
    for root in ("a", "b"):
        exp = init_experiment(tmp_path / root, synthetic_config(clients=3, rounds=2, epochs=2,
                                                                strategy=StrategyConfig("fedyogi")))
        summary = simulate(server_config(exp), 3, exp)
        outs.append(run_files(exp, summary.run_id))
    assert outs[0].keys() == outs[1].keys()
    assert outs[0] == outs[1]


def test_concurrent_matches_deterministic(make_experiment):
    exp = make_experiment(clients=4, rounds=3, strategy=StrategyConfig("fedavgm"))
    det = simulate(server_config(exp), 4, exp, "deterministic")
    conc = simulate(server_config(exp), 4, exp, "concurrent")
    assert np.max(np.abs(det.final_params.values - conc.final_params.values)) <= 1e-12
    assert [r["participants"] for r in det.history] == [r["participants"] for r in conc.history]


def test_ten_clients_all_participate(make_experiment):
    exp = make_experiment(clients=10, rounds=2)
    summary = simulate(server_config(exp, fraction_fit=1.0), 10, exp)
    assert [len(r["participants"]) for r in summary.history] == [10, 10]


def test_fraction_fit_samples_subset(make_experiment):
    exp = make_experiment(clients=5, rounds=3)
    a = simulate(server_config(exp, fraction_fit=0.5), 5, exp)
    b = simulate(server_config(exp, fraction_fit=0.5), 5, exp)
    assert all(len(r["sampled"]) == 3 for r in a.history)
    assert [r["sampled"] for r in a.history] == [r["sampled"] for r in b.history]
    assert all(r["evaluated"] == [0, 1, 2, 3, 4] for r in a.history)


def test_simulate_checks_client_count(make_experiment):
    exp = make_experiment(clients=3)
    from fedharness.protocol import ServerError

    with pytest.raises(ServerError):
        simulate(server_config(exp), 4, exp)
    with pytest.raises(ServerError):
        simulate(server_config(exp, min_available_clients=5), 3, exp)


def test_server_config_validation():
    with pytest.raises(ValueError):
        ServerConfig(rounds=0)
    with pytest.raises(ValueError):
        ServerConfig(fraction_fit=0.0)
    with pytest.raises(ValueError):
        ServerConfig(round_timeout=0)


def test_barrier_holds_with_too_few_clients(make_experiment):
    exp = make_experiment(clients=2)
    cfg = server_config(exp, min_available_clients=2, round_timeout=0.3)
    server = TcpServer(cfg, exp)
    host, port = server.address
    outcome = {}

    def serve():
        try:
            server.serve()
        except ServerStopped as exc:
            outcome["stopped"] = exc

    st_thread = threading.Thread(target=serve, daemon=True)
    st_thread.start()
    client = {}
    ct = threading.Thread(target=lambda: client.setdefault("exit", run_client(f"{host}:{port}", 0, exp.path)),
                          daemon=True)
    ct.start()
    deadline = time.monotonic() + 5
    while server.pool.ids() != [0] and time.monotonic() < deadline:
        time.sleep(0.01)
    time.sleep(3 * cfg.round_timeout)
    assert server.server.status == "waiting"
    assert server.server.rounds_started == 0
    server.server.stop()
    st_thread.join(5)
    ct.join(5)
    assert "stopped" in outcome
    assert client["exit"] == 0
    assert not exp.runs.exists() or exp.run_ids() == []


def test_tcp_run_end_to_end(make_experiment):
    exp = make_experiment(clients=2, rounds=2)
    server = TcpServer(server_config(exp, min_available_clients=2), exp)
    host, port = server.address
    exits = {}
    threads = [threading.Thread(target=lambda c=c: exits.setdefault(c, run_client(f"{host}:{port}", c, exp.path)),
                                daemon=True) for c in (0, 1)]
    for t in threads:
        t.start()
    summary = server.serve()
    for t in threads:
        t.join(10)
    assert summary.status == "completed" and exits == {0: 0, 1: 0}
    det = simulate(server_config(exp), 2, exp)
    assert det.final_params == summary.final_params
    assert server.counter.bytes_in > 0 and server.counter.bytes_out > 0


def test_stale_fit_res_is_discarded(make_experiment):
    exp = make_experiment(clients=2, rounds=2)
    server, seen = threaded_server(exp, {0: {}, 1: {"late_round": 1, "delay": 0.6}}, round_timeout=0.3)
    summary = server.run()
    first, second = summary.history
    assert first["participants"] == [0]
    assert {"client_id": 1, "type": "FIT_RES", "round": 1} in first["discarded"] + second["discarded"]
    assert second["participants"] == [0, 1]
    # global params replay from exactly the accepted results
    state = init_state(server.cfg.strategy, init_params(server.cfg.model))
    params_dir = exp.run_path(summary.run_id) / "results" / "params"
    for (rnd, results, _), record in zip(seen, summary.history):
        assert [r.client_id for r in results] == record["participants"]
        state = aggregate(state, results)
        assert load_params(params_dir / f"global-round-{rnd}.bin") == state.params


def test_round_without_results_aborts(make_experiment):
    exp = make_experiment(clients=1, rounds=3)
    server, _ = threaded_server(exp, {0: {"answer_fit": False}}, round_timeout=0.2)
    summary = server.run()
    assert summary.status == "aborted" and summary.rounds_completed == 0
    assert summary.history[0]["status"] == "failed"
    records, _ = read_json_lines(exp.run_path(summary.run_id) / "logs" / "server.jsonl")
    assert len(records) == 1


def test_server_rejects_garbage_from_client():
    pool = ThreadedPool()
    server_end, client_end = pipe()
    pool.attach(server_end)
    client_end.send_raw(b"\x00\x00\x00\x01\x63")
    assert client_end.recv(timeout=5).type == MessageType.ERROR
    server_end2, client_end2 = pipe()
    pool.attach(server_end2)
    client_end2.send(error("hello"))
    assert client_end2.recv(timeout=5).type == MessageType.ERROR
    assert pool.ids() == []
