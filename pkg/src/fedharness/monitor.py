"""Process resource sampling and a text-exposition ``/metrics`` endpoint."""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional, Union

log = logging.getLogger(__name__)

PREFIX = "fedharness_"
CPU = PREFIX + "cpu_percent"
BYTES_IN = PREFIX + "net_bytes_in_total"
BYTES_OUT = PREFIX + "net_bytes_out_total"
ROUND = PREFIX + "round"
ACCURACY = PREFIX + "accuracy_distributed"
LOSS = PREFIX + "loss_distributed"

Labels = tuple[tuple[str, str], ...]


def _labels(labels: Optional[dict]) -> Labels:
    return tuple(sorted((str(k), str(v)) for k, v in (labels or {}).items()))


class Registry:
    """Gauges and counters keyed by (name, labels).

    Writes take a lock; readers get a copied snapshot.
    """

    def __init__(self) -> None:
        self._values: dict[tuple[str, Labels], float] = {}
        self._lock = threading.Lock()
        self.events: list[tuple[float, str]] = []

    def set(self, name: str, value: float, **labels) -> None:
        with self._lock:
            self._values[(name, _labels(labels))] = float(value)

    def inc(self, name: str, amount: float = 1.0, **labels) -> None:
        if amount < 0:
            raise ValueError("counters only go up")
        key = (name, _labels(labels))
        with self._lock:
            self._values[key] = self._values.get(key, 0.0) + amount

    def get(self, name: str, **labels) -> float:
        return self._values.get((name, _labels(labels)), 0.0)

    def total(self, name: str) -> float:
        return sum(v for (n, _), v in self.snapshot().items() if n == name)

    def mark(self, event: str) -> None:
        with self._lock:
            self.events.append((time.monotonic(), event))

    def snapshot(self) -> dict[tuple[str, Labels], float]:
        with self._lock:
            return dict(self._values)

    def render(self) -> str:
        return render_exposition(self.snapshot())


class NetCounter:
    """Byte counters for one endpoint (role, id), feeding a registry."""

    def __init__(self, registry: Optional[Registry] = None, role: str = "client", ident: str = "0"):
        self.registry = registry
        self.labels = {"role": role, "id": str(ident)}
        self.bytes_in = 0
        self.bytes_out = 0
        self._lock = threading.Lock()

    def add_in(self, n: int) -> None:
        with self._lock:
            self.bytes_in += n
        if self.registry is not None:
            self.registry.inc(BYTES_IN, n, **self.labels)

    def add_out(self, n: int) -> None:
        with self._lock:
            self.bytes_out += n
        if self.registry is not None:
            self.registry.inc(BYTES_OUT, n, **self.labels)


def _fmt_value(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "+Inf" if v > 0 else "-Inf"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _escape(v: str) -> str:
    return v.replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def render_exposition(values: dict[tuple[str, Labels], float]) -> str:
    lines = []
    for (name, labels), value in sorted(values.items()):
        body = ",".join(f'{k}="{_escape(v)}"' for k, v in labels)
        lines.append(f"{name}{{{body}}} {_fmt_value(value)}")
    return "\n".join(lines) + ("\n" if lines else "")


_NAME = r"[a-zA-Z_:][a-zA-Z0-9_:]*"
_LABEL = r'[a-zA-Z_][a-zA-Z0-9_]*="(?:[^"\\\n]|\\[\\n"])*"'
_SAMPLE = re.compile(
    rf"^(?P<name>{_NAME})(?:\{{(?P<labels>(?:{_LABEL})(?:,{_LABEL})*,?)?\}})?"
    r" (?P<value>[-+]?(?:\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|Inf|NaN))"
    r"(?: (?P<ts>-?\d+))?$"
)
_LABEL_PAIR = re.compile(r'([a-zA-Z_][a-zA-Z0-9_]*)="((?:[^"\\\n]|\\[\\n"])*)"')


class ExpositionError(ValueError):
    pass


def _unescape(v: str) -> str:
    return re.sub(r"\\(.)", lambda m: "\n" if m.group(1) == "n" else m.group(1), v)


def parse_exposition(text: str) -> dict[tuple[str, Labels], float]:
    """Parse text exposition output; raise on any line outside the grammar."""
    out = {}
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line or line.startswith("#"):
            continue
        m = _SAMPLE.match(line)
        if m is None:
            raise ExpositionError(f"line {lineno}: {line!r}")
        labels = tuple(sorted((k, _unescape(v)) for k, v in _LABEL_PAIR.findall(m.group("labels") or "")))
        out[(m.group("name"), labels)] = float(m.group("value").replace("Inf", "inf"))
    return out


@dataclass
class ResourceSample:
    timestamp: float
    cpu_percent: float
    bytes_in: int
    bytes_out: int

    def to_dict(self) -> dict:
        return asdict(self)


Sink = Union[Callable[[ResourceSample], None], str, Path, None]


class Sampler:
    """Background thread taking one :class:`ResourceSample` per interval."""

    def __init__(self, interval: float, registry: Registry, counter: Optional[NetCounter] = None,
                 sink: Sink = None, role: str = "server", ident: str = "0"):
        if not interval > 0:
            raise ValueError("interval must be positive")
        self.interval = interval
        self.registry = registry
        self.counter = counter
        self.labels = {"role": role, "id": str(ident)}
        self.samples: list[ResourceSample] = []
        self._sink = sink
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"sampler-{role}-{ident}", daemon=True)
        self._last_cpu = time.process_time()
        self._last_wall = time.monotonic()

    def _bytes(self) -> tuple[int, int]:
        if self.counter is not None:
            return self.counter.bytes_in, self.counter.bytes_out
        return int(self.registry.total(BYTES_IN)), int(self.registry.total(BYTES_OUT))

    def sample(self) -> ResourceSample:
        cpu, wall = time.process_time(), time.monotonic()
        elapsed = wall - self._last_wall
        pct = max(0.0, 100.0 * (cpu - self._last_cpu) / elapsed) if elapsed > 0 else 0.0
        self._last_cpu, self._last_wall = cpu, wall
        b_in, b_out = self._bytes()
        s = ResourceSample(time.time(), pct, b_in, b_out)
        self.samples.append(s)
        self.registry.set(CPU, pct, **self.labels)
        self._emit(s)
        return s

    def _emit(self, s: ResourceSample) -> None:
        try:
            if callable(self._sink):
                self._sink(s)
            elif self._sink is not None:
                with open(self._sink, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(s.to_dict()) + "\n")
        except Exception:  # sampling must never take the run down
            log.exception("resource sample sink failed")

    def _run(self) -> None:
        start = time.monotonic()
        k = 1
        while not self._stop.wait(max(0.0, start + k * self.interval - time.monotonic())):
            try:
                self.sample()
            except Exception:
                log.exception("resource sampling failed")
            k += 1

    def start(self) -> Sampler:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive() and threading.current_thread() is not self._thread:
            self._thread.join()


def start_sampler(interval_seconds: float = 10.0, sink: Sink = None, registry: Optional[Registry] = None,
                  counter: Optional[NetCounter] = None, role: str = "server", ident: str = "0") -> Sampler:
    return Sampler(interval_seconds, registry or Registry(), counter, sink, role, ident).start()


class MetricsEndpoint:
    def __init__(self, server: ThreadingHTTPServer):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, name="metrics-http", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}/metrics"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()


def parse_address(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address {addr!r} must look like host:port")
    return host or default_host, int(port)


def serve_metrics(bind_address: str | tuple[str, int], registry: Registry) -> MetricsEndpoint:
    if isinstance(bind_address, str):
        bind_address = parse_address(bind_address)

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            if self.path.split("?", 1)[0] != "/metrics":
                self.send_error(404)
                return
            body = registry.render().encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "text/plain; version=0.0.4; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            log.debug("metrics: " + fmt, *args)

    return MetricsEndpoint(ThreadingHTTPServer(bind_address, Handler))
