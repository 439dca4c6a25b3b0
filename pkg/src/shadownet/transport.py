"""Three-party channels with round bookkeeping and transcript capture.

Protocols are written SPMD style: every party runs the same function
against its own :class:`PartyContext`.  Each call to
:meth:`PartyContext.exchange` is one round.  All three parties call it for
every round (with nothing to send if idle), so round indices agree
everywhere without coordination.

Two transports share that interface: an in-process hub of FIFO queues, and
a full TCP mesh (loopback or one process per party).
"""

from __future__ import annotations

import json
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

from .errors import ProtocolMisuseError, TransportError
from .ring import DEFAULT, CommonRandomness, RingParams, derive_seed, generator

P0, P1, P2 = 0, 1, 2
PARTIES = (P0, P1, P2)
DEFAULT_TIMEOUT = 60.0

_HEADER = struct.Struct("<IB")


class Record(NamedTuple):
    round: int
    sender: int
    receiver: int
    nbytes: int
    tag: str

    def as_json(self) -> str:
        return json.dumps({"round": self.round, "from": self.sender, "to": self.receiver,
                           "bytes": self.nbytes, "tag": self.tag})


@dataclass
class Transcript:
    records: list[Record] = field(default_factory=list)

    @classmethod
    def merge(cls, *record_lists: Iterable[Record]) -> "Transcript":
        recs = [r for rl in record_lists for r in rl]
        recs.sort(key=lambda r: (r.round, r.sender, r.receiver))
        return cls(recs)

    @property
    def total_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)

    @property
    def rounds(self) -> int:
        return len({r.round for r in self.records})

    def measured_cost(self, tag=None, exclude=None) -> tuple[int, int]:
        """``(rounds, bytes)`` over records matching ``tag``.

        ``tag`` and ``exclude`` may be a string or a collection of strings.
        Rounds are the number of distinct round indices among matches.
        """
        recs = self.filter(tag, exclude)
        return len({r.round for r in recs}), sum(r.nbytes for r in recs)

    def filter(self, tag=None, exclude=None) -> list[Record]:
        inc = {tag} if isinstance(tag, str) else (set(tag) if tag is not None else None)
        exc = {exclude} if isinstance(exclude, str) else set(exclude or ())
        return [r for r in self.records
                if (inc is None or r.tag in inc) and r.tag not in exc]

    def since(self, mark: int) -> "Transcript":
        """Records from round index ``mark`` onward."""
        return Transcript([r for r in self.records if r.round >= mark])

    def to_jsonl(self) -> str:
        return "".join(r.as_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        recs = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                recs.append(Record(d["round"], d["from"], d["to"], d["bytes"], d["tag"]))
        return cls(recs)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Transcript) and self.records == other.records


def measured_cost(transcript: Transcript, tag=None) -> tuple[int, int]:
    return transcript.measured_cost(tag)


# -- framing --------------------------------------------------------------

def pack_frame(tag: str, payload: bytes) -> bytes:
    t = tag.encode()
    if len(t) > 255:
        raise ProtocolMisuseError("tag longer than 255 bytes")
    return _HEADER.pack(len(payload), len(t)) + t + payload


def unpack_frame(buf: bytes) -> tuple[str, bytes]:
    n, tl = _HEADER.unpack_from(buf, 0)
    off = _HEADER.size
    tag = buf[off:off + tl].decode()
    payload = buf[off + tl:off + tl + n]
    if len(payload) != n:
        raise TransportError("truncated frame")
    return tag, payload


_ABORT = object()


class SessionAborted(TransportError):
    """Raised in a party whose peer failed first."""


class InProcessHub:
    """FIFO queue per directed edge between the three parties."""

    def __init__(self, timeout=DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.queues = {(s, r): queue.Queue() for s in PARTIES for r in PARTIES if s != r}

    def endpoint(self, pid: int) -> "_HubEndpoint":
        return _HubEndpoint(self, pid)

    def abort(self):
        for q in self.queues.values():
            q.put(_ABORT)


class _HubEndpoint:
    def __init__(self, hub: InProcessHub, pid: int):
        self.hub = hub
        self.pid = pid

    def send(self, to: int, frame: bytes) -> None:
        self.hub.queues[(self.pid, to)].put(frame)

    def recv(self, frm: int) -> bytes:
        try:
            item = self.hub.queues[(frm, self.pid)].get(timeout=self.hub.timeout)
        except queue.Empty:
            raise TransportError(f"timed out waiting on edge P{frm}->P{self.pid}",
                                 edge=(frm, self.pid)) from None
        if item is _ABORT:
            raise SessionAborted("session aborted", edge=(frm, self.pid))
        return item

    def abort(self):
        self.hub.abort()

    def close(self):
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        b = sock.recv(min(n, 1 << 20))
        if not b:
            raise ConnectionError("peer closed connection")
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


class TcpEndpoint:
    """One party's side of a full TCP mesh.

    Party ``i`` dials every party with a lower id and accepts from every
    party with a higher id; the dialler announces itself with one byte.
    A reader thread per peer drains frames into a queue, so sends never
    deadlock against a peer that is sending at the same time.
    """

    def __init__(self, pid: int, endpoints, timeout=DEFAULT_TIMEOUT, listener=None):
        self.pid = pid
        self.timeout = timeout
        self.socks: dict[int, socket.socket] = {}
        self.inbox = {peer: queue.Queue() for peer in PARTIES if peer != pid}
        self._closed = False
        self._send_lock = threading.Lock()
        if listener is None:
            listener = bind_listener(endpoints[pid])
        try:
            self._connect(endpoints, listener)
        finally:
            listener.close()
        for peer, s in self.socks.items():
            threading.Thread(target=self._reader, args=(peer, s), daemon=True).start()

    def _connect(self, endpoints, listener):
        deadline = time.monotonic() + self.timeout
        for peer in range(self.pid):
            host, port = endpoints[peer]
            while True:
                try:
                    s = socket.create_connection((host, port), timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(
                            f"could not reach P{peer} at {host}:{port} (edge P{self.pid}->P{peer})",
                            edge=(self.pid, peer)) from None
                    time.sleep(0.05)
            s.settimeout(None)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.sendall(bytes([self.pid]))
            self.socks[peer] = s
        pending = set(range(self.pid + 1, 3))
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = min(pending)
                raise TransportError(
                    f"P{missing} never connected (edge P{missing}->P{self.pid})",
                    edge=(missing, self.pid))
            listener.settimeout(remaining)
            try:
                s, _ = listener.accept()
            except socket.timeout:
                continue
            s.settimeout(None)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            peer = _recv_exact(s, 1)[0]
            if peer not in pending:
                s.close()
                raise TransportError(f"unexpected hello from party {peer}")
            pending.discard(peer)
            self.socks[peer] = s

    def _reader(self, peer, s):
        try:
            while True:
                head = _recv_exact(s, _HEADER.size)
                n, tl = _HEADER.unpack(head)
                self.inbox[peer].put(head + _recv_exact(s, tl + n))
        except (OSError, ConnectionError):
            self.inbox[peer].put(_ABORT)

    def send(self, to: int, frame: bytes) -> None:
        try:
            with self._send_lock:
                self.socks[to].sendall(frame)
        except OSError as e:
            raise TransportError(f"send failed on edge P{self.pid}->P{to}: {e}",
                                 edge=(self.pid, to)) from None

    def recv(self, frm: int) -> bytes:
        try:
            item = self.inbox[frm].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(f"timed out waiting on edge P{frm}->P{self.pid}",
                                 edge=(frm, self.pid)) from None
        if item is _ABORT:
            raise SessionAborted(f"connection lost on edge P{frm}->P{self.pid}",
                                 edge=(frm, self.pid))
        return item

    def abort(self):
        self.close()

    def close(self):
        if self._closed:
            return
        self._closed = True
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def bind_listener(addr) -> socket.socket:
    host, port = addr
    ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    ls.bind((host, port))
    ls.listen(4)
    return ls


def parse_endpoints(text: str | None = None):
    """``host:port,host:port,host:port`` or the SHADOWNET_P0/P1/P2 variables."""
    if text:
        items = [t.strip() for t in text.split(",")]
    else:
        items = [os.environ.get(f"SHADOWNET_P{i}") for i in PARTIES]
        if not all(items):
            raise TransportError("tcp mode needs --endpoints or SHADOWNET_P0/P1/P2")
    if len(items) != 3:
        raise TransportError(f"expected three endpoints, got {len(items)}")
    out = []
    for it in items:
        host, _, port = it.rpartition(":")
        out.append((host or "127.0.0.1", int(port)))
    return out


# -- party context --------------------------------------------------------

class PartyContext:
    """Everything one party needs to run protocols: channels, rounds, randomness."""

    def __init__(self, pid: int, endpoint, seed, params: RingParams = DEFAULT):
        if pid not in PARTIES:
            raise ProtocolMisuseError(f"party id must be 0, 1 or 2, got {pid}")
        self.pid = pid
        self.endpoint = endpoint
        self.seed = seed
        self.params = params
        self.round = 0
        self.records: list[Record] = []
        self.rng = generator(seed, "party", pid)
        self._common: dict[int, CommonRandomness] = {}

    @property
    def is_helper(self) -> bool:
        return self.pid == P2

    def common(self, peer: int) -> CommonRandomness:
        """Common randomness shared with ``peer``."""
        if peer not in self._common:
            a, b = sorted((self.pid, peer))
            self._common[peer] = CommonRandomness(derive_seed(self.seed, "pair", a, b))
        return self._common[peer]

    def exchange(self, tag: str, sends: dict[int, bytes] | None = None,
                 expect: Iterable[int] = ()) -> dict[int, bytes]:
        """One round: send ``sends`` and wait for one frame from each of ``expect``."""
        idx = self.round
        self.round += 1
        for to, payload in sorted((sends or {}).items()):
            if to == self.pid or to not in PARTIES:
                raise ProtocolMisuseError(f"P{self.pid} cannot send to {to}")
            self.records.append(Record(idx, self.pid, to, len(payload), tag))
            self.endpoint.send(to, pack_frame(tag, payload))
        got = {}
        for frm in expect:
            rtag, payload = unpack_frame(self.endpoint.recv(frm))
            if rtag != tag:
                raise ProtocolMisuseError(
                    f"P{self.pid} expected {tag!r} from P{frm} in round {idx}, got {rtag!r}")
            got[frm] = payload
        return got

    @property
    def transcript(self) -> Transcript:
        return Transcript(list(self.records))


# -- sessions -------------------------------------------------------------

_KINDS = {"inproc": "inproc", "in-process": "inproc",
          "tcp": "tcp", "tcp-loopback": "tcp"}


class Session:
    """Three party contexts driven from one process, one thread per party."""

    def __init__(self, kind: str, seed, params: RingParams = DEFAULT, endpoints=None,
                 timeout=DEFAULT_TIMEOUT):
        try:
            self.kind = _KINDS[kind]
        except KeyError:
            raise ValueError(f"unknown transport kind {kind!r}") from None
        self.seed = seed
        self.params = params
        if self.kind == "inproc":
            hub = InProcessHub(timeout)
            eps = [hub.endpoint(i) for i in PARTIES]
        else:
            eps = _tcp_mesh(endpoints, timeout)
        self.parties = [PartyContext(i, eps[i], seed, params) for i in PARTIES]

    @property
    def round(self) -> int:
        return self.parties[0].round

    @property
    def transcript(self) -> Transcript:
        return Transcript.merge(*(p.records for p in self.parties))

    def run(self, fn: Callable, args=None):
        """Run ``fn(ctx, *args[i])`` for each party concurrently; return the three results."""
        args = args or [()] * 3
        results = [None] * 3
        errors: list = [None] * 3

        def body(i):
            try:
                results[i] = fn(self.parties[i], *args[i])
            except BaseException as e:  # noqa: BLE001 - re-raised below
                errors[i] = e
                self.parties[i].endpoint.abort()

        threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in PARTIES]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        failed = [e for e in errors if e is not None]
        if failed:
            real = [e for e in failed if not isinstance(e, SessionAborted)]
            raise (real or failed)[0]
        return results

    def exchange(self, plan, tag: str = "exchange") -> dict:
        """Deliver one round of ``(sender, receiver, payload)`` messages."""
        plan = list(plan)
        if not plan:
            raise ProtocolMisuseError("a round must carry at least one message")
        edges = [(s, r) for s, r, _ in plan]
        if len(set(edges)) != len(edges):
            raise ProtocolMisuseError("duplicate edge in round plan")

        def body(ctx):
            sends = {r: bytes(p) for s, r, p in plan if s == ctx.pid}
            expect = sorted(s for s, r, _ in plan if r == ctx.pid)
            return ctx.exchange(tag, sends, expect)

        out = self.run(body)
        return {(s, r): out[r][s] for s, r in edges}

    def close(self):
        for p in self.parties:
            p.endpoint.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _tcp_mesh(endpoints, timeout):
    if endpoints is None:
        listeners = [bind_listener(("127.0.0.1", 0)) for _ in PARTIES]
        endpoints = [ls.getsockname() for ls in listeners]
    else:
        listeners = [bind_listener(ep) for ep in endpoints]
    eps: list = [None] * 3
    errs: list = [None] * 3

    def setup(i):
        try:
            eps[i] = TcpEndpoint(i, endpoints, timeout, listener=listeners[i])
        except Exception as e:  # noqa: BLE001
            errs[i] = e

    threads = [threading.Thread(target=setup, args=(i,)) for i in PARTIES]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if any(errs):
        for ep in eps:
            if ep is not None:
                ep.close()
        raise next(e for e in errs if e)
    return eps


def open_session(kind: str = "inproc", seed=0, params: RingParams = DEFAULT,
                 endpoints=None, timeout=DEFAULT_TIMEOUT) -> Session:
    return Session(kind, seed, params, endpoints, timeout)


def connect_party(pid: int, endpoints, seed, params: RingParams = DEFAULT,
                  timeout=DEFAULT_TIMEOUT) -> PartyContext:
    """Context for a single party in its own process (tcp mode)."""
    return PartyContext(pid, TcpEndpoint(pid, endpoints, timeout), seed, params)
