import math
import threading
import time
import urllib.request

import pytest
from conftest import synthetic_config
from hypothesis import given
from hypothesis import strategies as st

from fedharness.model import init_params
from fedharness.monitor import (
    ACCURACY,
    BYTES_IN,
    BYTES_OUT,
    CPU,
    ROUND,
    ExpositionError,
    NetCounter,
    Registry,
    Sampler,
    parse_address,
    parse_exposition,
    render_exposition,
    serve_metrics,
    start_sampler,
)
from fedharness.protocol import ClientNode, Message, MessageType, ServerConfig, client_loop, simulate
from fedharness.protocol.messages import done, frame
from fedharness.protocol.transport import pipe
from fedharness.storage import init_experiment, read_json_lines


def fetch(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return resp.status, resp.read().decode()


class TestExposition:
    def test_example_lines(self):
        r = Registry()
        r.set(CPU, 12.5, role="client", id="3")
        r.inc(BYTES_IN, 123456, role="client", id="3")
        text = r.render()
        assert 'fedharness_cpu_percent{id="3",role="client"} 12.5' in text.splitlines()
        assert parse_exposition(text)[(BYTES_IN, (("id", "3"), ("role", "client")))] == 123456

    def test_empty_registry(self):
        assert Registry().render() == ""
        assert parse_exposition("") == {}

    @pytest.mark.parametrize("line", ["no value", 'x{a=1} 2', "x{} ", "9name 1", 'x{a="1"} one'])
    def test_bad_lines(self, line):
        with pytest.raises(ExpositionError):
            parse_exposition(line + "\n")

    def test_comments_and_special_values(self):
        parsed = parse_exposition("# HELP x y\nx NaN\ny +Inf\nz -1.5e3 1700000000\n")
        assert math.isnan(parsed[("x", ())]) and parsed[("y", ())] == math.inf
        assert parsed[("z", ())] == -1500.0

    @given(st.dictionaries(st.from_regex(r"[a-z_][a-z0-9_]{0,8}", fullmatch=True), st.text(max_size=10),
                           max_size=3),
           st.floats(allow_nan=False))
    def test_render_parse_round_trip(self, labels, value):
        values = {("fedharness_x", tuple(sorted(labels.items()))): value}
        assert parse_exposition(render_exposition(values)) == values


class TestRegistry:
    def test_counters_only_grow(self):
        r = Registry()
        with pytest.raises(ValueError):
            r.inc(BYTES_OUT, -1)

    def test_net_counter_totals(self):
        r = Registry()
        a, b = NetCounter(r, "client", "1"), NetCounter(r, "client", "2")
        a.add_out(10)
        b.add_out(5)
        a.add_in(3)
        assert r.total(BYTES_OUT) == 15 and r.get(BYTES_IN, role="client", id="1") == 3
        assert (a.bytes_in, a.bytes_out) == (3, 10)


class TestSampler:
    def test_idle_cpu_is_low(self):
        s = Sampler(0.3, Registry())
        samples = []
        for _ in range(3):
            time.sleep(0.3)
            samples.append(s.sample())
        assert all(x.cpu_percent < 5 for x in samples)

    def test_busy_cpu_is_visible(self):
        s = Sampler(1.0, Registry())
        end = time.monotonic() + 0.3
        while time.monotonic() < end:
            pass
        assert s.sample().cpu_percent > 50

    def test_counters_never_decrease(self):
        counter = NetCounter()
        s = Sampler(1.0, Registry(), counter)
        prev = None
        for i in range(10):
            counter.add_in(i)
            counter.add_out(2 * i)
            cur = s.sample()
            if prev:
                assert cur.bytes_in >= prev.bytes_in and cur.bytes_out >= prev.bytes_out
            prev = cur

    def test_spacing(self, tmp_path):
        sink = tmp_path / "metrics.jsonl"
        sampler = start_sampler(1.0, sink)
        time.sleep(5.0)
        sampler.stop()
        sampler.stop()
        records, _ = read_json_lines(sink)
        assert 4 <= len(records) <= 6
        gaps = [b["timestamp"] - a["timestamp"] for a, b in zip(records, records[1:])]
        assert all(0.8 <= g <= 1.2 for g in gaps)
        assert set(records[0]) == {"timestamp", "cpu_percent", "bytes_in", "bytes_out"}

    def test_sink_failure_is_not_fatal(self):
        def bad(_):
            raise RuntimeError("disk full")

        s = Sampler(1.0, Registry(), sink=bad)
        assert s.sample().cpu_percent >= 0

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            Sampler(0, Registry())


class TestEndpoint:
    def test_metrics_endpoint_parses(self):
        r = Registry()
        endpoint = serve_metrics("127.0.0.1:0", r)
        try:
            status, body = fetch(endpoint.url)
            assert status == 200 and parse_exposition(body) == {}
            r.set(ROUND, 2, experiment="e")
            r.set(CPU, 3.25, role="server", id="0")
            _, body = fetch(endpoint.url)
            for line in body.splitlines():
                assert parse_exposition(line) != {}
            assert parse_exposition(body)[(ROUND, (("experiment", "e"),))] == 2
            with pytest.raises(urllib.error.HTTPError):
                fetch(endpoint.url.replace("/metrics", "/other"))
        finally:
            endpoint.close()

    def test_round_gauge_after_one_round(self, tmp_path):
        exp = init_experiment(tmp_path, synthetic_config(rounds=1))
        registry = Registry()
        endpoint = serve_metrics(("127.0.0.1", 0), registry)
        try:
            simulate(ServerConfig.from_experiment(exp.config), 3, exp, registry=registry)
            parsed = parse_exposition(fetch(endpoint.url)[1])
        finally:
            endpoint.close()
        assert parsed[(ROUND, (("experiment", "exp"),))] == 1
        assert 0 <= parsed[(ACCURACY, (("experiment", "exp"),))] <= 1

    def test_bind_failure(self):
        first = serve_metrics("127.0.0.1:0", Registry())
        try:
            with pytest.raises(OSError):
                serve_metrics(first.address, Registry())
        finally:
            first.close()


def test_bytes_out_covers_fit_res(tmp_path):
    exp = init_experiment(tmp_path, synthetic_config())
    registry = Registry()
    counter = NetCounter(registry, "client", "0")
    server_end, client_end = pipe(None, counter)
    t = threading.Thread(target=client_loop, args=(client_end, ClientNode(0, exp)), daemon=True)
    t.start()
    server_end.recv(timeout=5)
    cfg = exp.config
    server_end.send(Message(MessageType.FIT_INS, 1, params=init_params(cfg.model_spec()),
                            train=cfg.train_config()))
    reply = server_end.recv(timeout=10)
    assert reply.type == MessageType.FIT_RES
    assert counter.bytes_out >= len(frame(reply))
    assert registry.get(BYTES_OUT, role="client", id="0") == counter.bytes_out
    server_end.send(done())
    t.join(5)


def test_parse_address():
    assert parse_address("0.0.0.0:9100") == ("0.0.0.0", 9100)
    assert parse_address(":9100") == ("127.0.0.1", 9100)
    with pytest.raises(ValueError):
        parse_address("9100")
