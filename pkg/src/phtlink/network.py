"""Drives a full run over in-process queues or TCP sockets.

Both transports move the same frames between the same actors; the in-process
engine still encodes and decodes every message so that what each actor sees,
byte for byte, matches what it would receive from a socket. The returned
RunOutcome carries the validated result, the per-channel logical message
trace, every raw frame each endpoint received (for privacy byte-scans), all
audit logs and the TSE storage handle (for deletion checks).

Per-sender message order is preserved by construction: the in-process engine
uses FIFO queues, the TCP transport keeps one long-lived connection per
(sender, destination) pair. Cross-sender interleaving is unspecified, so
traces are compared per channel, never globally.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

from .analysis import ValidatedResult
from .errors import DecodeError, PhtError
from .manifest import TrainManifest
from .stations import (
    AWAITING_DATA,
    DataStationActor,
    DataStationConfig,
    Outgoing,
    ResearcherActor,
    TimeoutExpired,
    TseActor,
    TseConfig,
    TseStorage,
)
from .wire import MAX_PAYLOAD_DEFAULT, decode, encode, message_type_name, read_frame

DEFAULT_TSE_TIMEOUT = 60.0


@dataclass
class RunSetup:
    manifest: TrainManifest
    stations: list[DataStationConfig]
    tse: TseConfig
    max_payload: int = MAX_PAYLOAD_DEFAULT


@dataclass
class RunOutcome:
    outcome: str  # "completed" | "aborted"
    reason: str | None
    result: ValidatedResult | None
    result_bytes: bytes | None
    traces: dict[tuple[str, str], list[tuple[str, str, int]]]
    received_bytes: dict[str, list[bytes]]
    audit_logs: dict[str, list[dict]]
    storage: TseStorage
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.outcome == "completed"

    def logical_trace(self) -> dict[tuple[str, str], list[tuple[str, str, int]]]:
        """Per-channel (sender, receiver) sequences of (type, run_id, seq)."""
        return {k: list(v) for k, v in self.traces.items()}


def _build_actors(setup: RunSetup):
    researcher_id = setup.manifest.researcher_id
    actors: dict[str, object] = {
        cfg.station_id: DataStationActor(cfg) for cfg in setup.stations
    }
    tse = TseActor(setup.tse)
    actors[setup.tse.station_id] = tse
    return researcher_id, actors, tse


def run_network(
    setup: RunSetup,
    transport: str = "inproc",
    tse_timeout: float = DEFAULT_TSE_TIMEOUT,
    run_timeout: float = 60.0,
) -> RunOutcome:
    """Run one train end to end and return the outcome plus full telemetry."""
    if transport == "inproc":
        return _run_inproc(setup)
    if transport == "tcp":
        return _run_tcp(setup, tse_timeout=tse_timeout, run_timeout=run_timeout)
    raise ValueError(f"unknown transport {transport!r}")


# ---------------------------------------------------------------------------
# In-process transport
# ---------------------------------------------------------------------------

def _run_inproc(setup: RunSetup) -> RunOutcome:
    started = time.perf_counter()
    researcher_id, actors, tse = _build_actors(setup)
    endpoints = {aid: f"inproc:{aid}" for aid in actors}
    endpoints[researcher_id] = f"inproc:{researcher_id}"
    researcher = ResearcherActor(researcher_id, setup.manifest, endpoints)
    actors[researcher_id] = researcher

    queues: dict[str, deque] = {aid: deque() for aid in actors}
    traces: dict[tuple[str, str], list] = defaultdict(list)
    received: dict[str, list[bytes]] = defaultdict(list)

    def dispatch(outgoing: list[Outgoing]) -> None:
        for out in outgoing:
            if out.dest not in queues:
                continue  # unknown destination: drop, like an unroutable frame
            queues[out.dest].append(encode(out.message))

    dispatch(researcher.start())

    order = sorted(actors)
    timeout_injected = False
    while True:
        progress = False
        for aid in order:
            if not queues[aid]:
                continue
            frame = queues[aid].popleft()
            received[aid].append(frame)
            msg = decode(frame, setup.max_payload)
            traces[(msg.sender, aid)].append(
                (message_type_name(msg), msg.run_id, msg.seq)
            )
            dispatch(actors[aid].handle(msg))
            progress = True
        if progress:
            continue
        # quiescent: simulate the TSE's data deadline, then give up
        if not researcher.done and tse.phase == AWAITING_DATA and not timeout_injected:
            timeout_injected = True
            dispatch(tse.handle(TimeoutExpired(setup.manifest.run_id)))
            continue
        break

    return _finish(researcher, tse, traces, received, actors, started)


# ---------------------------------------------------------------------------
# TCP transport
# ---------------------------------------------------------------------------

class TcpNode:
    """One endpoint: a listening socket, a single worker thread consuming an
    ordered inbox, and one persistent client connection per destination."""

    def __init__(
        self,
        node_id: str,
        handler,
        address_book: dict[str, str],
        max_payload: int = MAX_PAYLOAD_DEFAULT,
        idle_timeout: float | None = None,
        on_idle=None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.node_id = node_id
        self.handler = handler
        self.address_book = address_book
        self.max_payload = max_payload
        self.idle_timeout = idle_timeout
        self.on_idle = on_idle
        self._server = socket.create_server((host, port))
        self.address = "{}:{}".format(*self._server.getsockname())
        self._inbox: queue.Queue = queue.Queue()
        # per-destination connection, keyed with the address it was opened
        # to, so a peer that reappears elsewhere gets a fresh connection
        self._conns: dict[str, tuple[str, socket.socket]] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._last_activity = time.monotonic()
        self.received_bytes: list[bytes] = []
        self.traces: dict[tuple[str, str], list] = defaultdict(list)

    def start(self) -> None:
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        worker = threading.Thread(target=self._worker_loop, daemon=True)
        self._threads += [accept, worker]
        accept.start()
        worker.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            self._threads.append(reader)
            reader.start()

    def _read_loop(self, conn: socket.socket) -> None:
        stream = conn.makefile("rb")
        try:
            while not self._stop.is_set():
                frame = read_frame(stream, self.max_payload)
                if frame is None:
                    return
                self._inbox.put(frame)
        except (DecodeError, OSError):
            return  # bad or dead connection: drop it
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                frame = self._inbox.get(timeout=0.05)
            except queue.Empty:
                if (
                    self.on_idle is not None
                    and self.idle_timeout is not None
                    and time.monotonic() - self._last_activity > self.idle_timeout
                ):
                    self._last_activity = time.monotonic()
                    self._run_handler_event(None)
                continue
            self._last_activity = time.monotonic()
            self.received_bytes.append(frame)
            try:
                msg = decode(frame, self.max_payload)
            except DecodeError:
                continue
            self.traces[(msg.sender, self.node_id)].append(
                (message_type_name(msg), msg.run_id, msg.seq)
            )
            self._run_handler_event(msg)

    def _run_handler_event(self, msg) -> None:
        try:
            outgoing = self.handler(msg) if msg is not None else self.on_idle()
        except PhtError:
            return
        for out in outgoing or []:
            self.send(out.dest, encode(out.message))

    def _drop_conn(self, dest: str) -> None:
        cached = self._conns.pop(dest, None)
        if cached is not None:
            try:
                cached[1].close()
            except OSError:
                pass

    def send(self, dest: str, frame: bytes) -> None:
        address = self.address_book.get(dest)
        if address is None:
            return
        cached = self._conns.get(dest)
        if cached is not None and cached[0] != address:
            self._drop_conn(dest)
            cached = None
        for _ in range(2):  # one reconnect retry on a dead cached connection
            if cached is None:
                host, port = address.rsplit(":", 1)
                try:
                    conn = socket.create_connection((host, int(port)), timeout=5.0)
                except OSError:
                    return
                cached = (address, conn)
                self._conns[dest] = cached
            try:
                cached[1].sendall(frame)
                return
            except OSError:
                self._drop_conn(dest)
                cached = None

    def stop(self) -> None:
        self._stop.set()
        try:
            self._server.close()
        except OSError:
            pass
        for _, conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass


def _run_tcp(setup: RunSetup, tse_timeout: float, run_timeout: float) -> RunOutcome:
    started = time.perf_counter()
    researcher_id, actors, tse = _build_actors(setup)
    address_book: dict[str, str] = {}

    nodes: dict[str, TcpNode] = {}
    for aid, actor in actors.items():
        on_idle = None
        idle = None
        if actor is tse:
            idle = tse_timeout

            def on_idle(run_id=setup.manifest.run_id):
                return tse.handle(TimeoutExpired(run_id))

        nodes[aid] = TcpNode(
            aid,
            actor.handle,
            address_book,
            setup.max_payload,
            idle_timeout=idle,
            on_idle=on_idle,
        )

    researcher = ResearcherActor(researcher_id, setup.manifest, {})
    researcher_node = TcpNode(
        researcher_id, researcher.handle, address_book, setup.max_payload
    )
    nodes[researcher_id] = researcher_node

    for aid, node in nodes.items():
        address_book[aid] = node.address
    researcher.endpoints = dict(address_book)

    for node in nodes.values():
        node.start()
    for out in researcher.start():
        researcher_node.send(out.dest, encode(out.message))

    deadline = time.monotonic() + run_timeout
    while not researcher.done and time.monotonic() < deadline:
        time.sleep(0.01)
    # let in-flight tails (acks) drain before tearing down
    time.sleep(0.05)
    for node in nodes.values():
        node.stop()

    traces: dict[tuple[str, str], list] = defaultdict(list)
    received: dict[str, list[bytes]] = defaultdict(list)
    for aid, node in nodes.items():
        received[aid] = list(node.received_bytes)
        for channel, entries in node.traces.items():
            traces[channel].extend(entries)

    all_actors = dict(actors)
    all_actors[researcher_id] = researcher
    return _finish(researcher, tse, traces, received, all_actors, started)


def _finish(researcher, tse, traces, received, actors, started) -> RunOutcome:
    if researcher.outcome is None:
        outcome, reason, result = "aborted", "Stalled", None
    elif researcher.outcome[0] == "completed":
        outcome, reason, result = "completed", None, researcher.outcome[1]
    else:
        outcome, reason, result = "aborted", researcher.outcome[1], None

    audit_logs = {}
    for aid, actor in actors.items():
        audit_logs[aid] = list(actor.audit.events)

    return RunOutcome(
        outcome=outcome,
        reason=reason,
        result=result,
        result_bytes=result.to_canonical_json() if result is not None else None,
        traces=dict(traces),
        received_bytes=dict(received),
        audit_logs=audit_logs,
        storage=tse.storage,
        timings={"total_s": time.perf_counter() - started},
    )
