"""TSO and DSO agents exchanging boundary payloads over a transport.

Wire format: one message per line,

    kind=state session=ab12 k=3 dir=tso-dso dso=1 t.want=1 a.x=2x1:1,0 a.lam=2x1:0,0|crc=1a2b3c4d

Text fields are percent-encoded; arrays carry their shape and %.17g values so
every double round-trips exactly; the trailing crc32 covers everything before
the bar.  Handshake (hello) and shutdown (bye) messages are not counted as
exchange messages.
"""
from __future__ import annotations

import hashlib
import queue
import socket
import threading
import uuid
import zlib
from dataclasses import dataclass, field
from enum import Enum
from urllib.parse import quote, unquote

import numpy as np

from .apps.dispatch import qp_dso_side, qp_tso_side
from .apps.pf import PfDsoSide, PfTsoSide, pf_layout
from .hgd import (BoundaryLayout, BoundaryResponse, BoundaryState, CoordinatedProblem, DsoResult,
                  DsoSide, EquivalentResponse, HgdConfig, HgdTrace, LinearResponse, SubproblemError,
                  TransCorrection, TsoResult, TsoSide, run_hgd)
from .kkt import SolverError
from .model import ItdCase, dso_view, tso_view

DEFAULT_TIMEOUT = 30.0
APPS = ("pf", "ed", "opf", "se")


class RuntimeProtocolError(RuntimeError):
    pass


class MalformedMessageError(RuntimeProtocolError):
    pass


class ChecksumError(MalformedMessageError):
    pass


class CoordTimeoutError(TimeoutError):
    pass


class Direction(str, Enum):
    TSO_TO_DSO = "tso-dso"
    DSO_TO_TSO = "dso-tso"


# -- messages ---------------------------------------------------------------------------------

@dataclass
class CoordMessage:
    kind: str                      # hello, state, response, error, bye
    session: str
    k: int
    direction: Direction
    dso: int
    text: dict[str, str] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]

    def key(self) -> tuple:
        return (self.session, self.k, self.direction, self.dso, self.kind)

    def state(self) -> BoundaryState:
        return BoundaryState(self.arrays["x"], self.arrays["lam"])

    def response(self) -> BoundaryResponse:
        return BoundaryResponse(self.arrays["f"], self.arrays["l"])


PAYLOAD = ("x", "lam", "f", "l")
OMITTED = "-"   # value list of a block that is not exchanged; decoded as zeros


def _fmt_array(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=float)
    shape = "x".join(str(d) for d in a.shape)
    return shape + ":" + ",".join("%.17g" % v for v in a.ravel())


@dataclass(frozen=True)
class Omitted:
    """Placeholder for a block that travels as its shape only."""

    shape: tuple[int, ...]


def _parse_array(s: str) -> np.ndarray:
    shape_s, _, vals = s.partition(":")
    if not _:
        raise MalformedMessageError(f"array field without shape: {s[:40]!r}")
    try:
        shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
        if vals == OMITTED:
            return np.zeros(shape)
        data = np.array([float(v) for v in vals.split(",")] if vals else [], dtype=float)
        return data.reshape(shape)
    except ValueError as exc:
        raise MalformedMessageError(f"bad array field: {exc}") from exc


def serialize(msg: CoordMessage) -> bytes:
    parts = [f"kind={quote(msg.kind, safe='')}", f"session={quote(msg.session, safe='')}",
             f"k={msg.k}", f"dir={msg.direction.value}", f"dso={msg.dso}"]
    parts += [f"t.{name}={quote(v, safe='')}" for name, v in sorted(msg.text.items())]
    parts += [f"a.{name}=" + ("x".join(map(str, v.shape)) + ":" + OMITTED if isinstance(v, Omitted)
                              else _fmt_array(v)) for name, v in sorted(msg.arrays.items())]
    body = " ".join(parts)
    return f"{body}|crc={zlib.crc32(body.encode()):08x}\n".encode()


def deserialize(line: bytes | str) -> CoordMessage:
    s = line.decode() if isinstance(line, bytes) else line
    if not s.endswith("\n"):
        raise MalformedMessageError("truncated message (no line terminator)")
    body, bar, crc = s[:-1].rpartition("|crc=")
    if not bar or len(crc) != 8:
        raise MalformedMessageError("message has no checksum trailer")
    try:
        expected = int(crc, 16)
    except ValueError as exc:
        raise MalformedMessageError(f"bad checksum field {crc!r}") from exc
    if zlib.crc32(body.encode()) != expected:
        raise ChecksumError("checksum mismatch")
    head: dict[str, str] = {}
    text: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for tok in body.split(" "):
        name, eq, val = tok.partition("=")
        if not eq:
            raise MalformedMessageError(f"field without value: {tok[:40]!r}")
        if name.startswith("t."):
            text[name[2:]] = unquote(val)
        elif name.startswith("a."):
            arrays[name[2:]] = _parse_array(val)
        else:
            head[name] = val
    try:
        return CoordMessage(unquote(head["kind"]), unquote(head["session"]), int(head["k"]),
                            Direction(head["dir"]), int(head["dso"]), text, arrays)
    except (KeyError, ValueError) as exc:
        raise MalformedMessageError(f"bad header: {exc}") from exc


# -- transports --------------------------------------------------------------------------------

class Channel:
    """One TSO-DSO link. Rejects duplicates and checks the expected direction."""

    def __init__(self):
        self._seen: set[tuple] = set()
        self.payload_scalars = 0    # boundary-payload numbers written by this end

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, msg: CoordMessage) -> None:
        self._send_bytes(serialize(msg))
        self.payload_scalars += sum(np.size(v) for name, v in msg.arrays.items()
                                    if name in PAYLOAD and not isinstance(v, Omitted))

    def receive(self, expected: Direction, timeout: float = DEFAULT_TIMEOUT) -> CoordMessage:
        msg = deserialize(self._recv_bytes(timeout))
        if msg.direction is not expected:
            raise RuntimeProtocolError(f"expected a {expected.value} message, got {msg.direction.value}")
        if msg.key() in self._seen:
            raise RuntimeProtocolError(f"duplicate message {msg.kind} k={msg.k} dso={msg.dso}")
        self._seen.add(msg.key())
        return msg


class MemoryChannel(Channel):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self.inbox = inbox
        self.outbox = outbox

    def _send_bytes(self, data):
        self.outbox.put(data)

    def _recv_bytes(self, timeout):
        try:
            data = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise CoordTimeoutError("no message within timeout") from None
        if data is None:
            raise CoordTimeoutError("peer closed the link")
        return data

    def close(self):
        self.outbox.put(None)


def memory_pair() -> tuple[MemoryChannel, MemoryChannel]:
    """(TSO end, DSO end) of an in-process link."""
    a, b = queue.Queue(), queue.Queue()
    return MemoryChannel(a, b), MemoryChannel(b, a)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self.reader = sock.makefile("rb")

    def _send_bytes(self, data):
        self.sock.sendall(data)

    def _recv_bytes(self, timeout):
        self.sock.settimeout(timeout)
        try:
            line = self.reader.readline()
        except (socket.timeout, TimeoutError):
            raise CoordTimeoutError("no message within timeout") from None
        except OSError as exc:
            raise CoordTimeoutError(f"link failed: {exc}") from None
        if not line:
            raise CoordTimeoutError("peer closed the link")
        return line

    def close(self):
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


# -- payload codecs ------------------------------------------------------------------------------

def _encode_response(resp, arrays: dict, text: dict) -> None:
    if resp is None:
        return
    if isinstance(resp, EquivalentResponse):
        text["resp"] = "equivalent"
        arrays["yeq_re"] = np.real(resp.y_eq)
        arrays["yeq_im"] = np.imag(resp.y_eq)
    elif isinstance(resp, LinearResponse):
        text["resp"] = "linear"
        text["resp_shape"] = f"{resp.n_x},{resp.n_f}"
        arrays["D"] = resp.D
    else:
        raise RuntimeProtocolError(f"response type {type(resp).__name__} cannot be sent")


def _decode_response(msg: CoordMessage):
    kind = msg.text.get("resp")
    if kind is None:
        return None
    if kind == "equivalent":
        return EquivalentResponse(msg.arrays["yeq_re"] + 1j * msg.arrays["yeq_im"])
    if kind == "linear":
        n_x, n_f = (int(v) for v in msg.text["resp_shape"].split(","))
        return LinearResponse(msg.arrays["D"], n_x, n_f)
    raise MalformedMessageError(f"unknown response kind {kind!r}")


def _omitted_blocks(L: BoundaryLayout) -> tuple[str, ...]:
    flags = {"x": L.send_x, "lam": L.send_lam, "f": L.send_f, "l": L.send_l}
    return tuple(name for name, sent in flags.items() if not sent)


def interface_fingerprint(case: ItdCase, dso: int) -> str:
    """Hash of what both operators share for one link: case name, base and boundary buses."""
    bd = [b for b in case.boundary if case.dso_assignment.get(b) == dso]
    text = f"{case.name}|{case.base_mva!r}|{bd}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- agents ------------------------------------------------------------------------------------------

def build_tso_side(app: str, tso_case: ItdCase) -> tuple[TsoSide, BoundaryLayout, BoundaryState | None]:
    if app == "pf":
        return PfTsoSide(tso_case), pf_layout(tso_case), None
    if app in APPS:
        side, xi0 = qp_tso_side(app, tso_case)
        return side, side.layout, xi0
    raise ValueError(f"unknown app {app!r}")


def build_dso_side(app: str, dso_case: ItdCase, dso: int, response_mode: str = "equivalent") -> DsoSide:
    if app == "pf":
        return PfDsoSide(dso_case, dso, response_mode)
    if app in APPS:
        return qp_dso_side(app, dso_case, dso)
    raise ValueError(f"unknown app {app!r}")


class DsoAgent:
    """Serves one DSO side over a channel until the TSO says bye.

    The agent is built from the DSO's own view; `stop_after` drops the link
    after that many answered rounds (fault injection).
    """

    def __init__(self, side: DsoSide, channel: Channel, fingerprint: str,
                 timeout: float = DEFAULT_TIMEOUT, stop_after: int | None = None):
        self.side = side
        self.dso = side.dso
        self.channel = channel
        self.fingerprint = fingerprint
        self.timeout = timeout
        self.stop_after = stop_after
        self.rounds = 0
        self.omit: tuple[str, ...] = ()
        self.error: BaseException | None = None

    def run(self) -> None:
        ch, d = self.channel, self.dso
        try:
            ch.send(CoordMessage("hello", "", 0, Direction.DSO_TO_TSO, d,
                                 {"fingerprint": self.fingerprint}))
            welcome = ch.receive(Direction.TSO_TO_DSO, self.timeout)
            if welcome.kind != "hello":
                raise RuntimeProtocolError(welcome.text.get("reason", f"handshake refused ({welcome.kind})"))
            session = welcome.session
            self.omit = tuple(filter(None, welcome.text.get("omit", "").split(",")))
            last_k = 0
            while True:
                msg = ch.receive(Direction.TSO_TO_DSO, self.timeout)
                if msg.kind == "bye":
                    return
                if msg.session != session or msg.kind != "state":
                    raise RuntimeProtocolError(f"unexpected {msg.kind} message in session {msg.session!r}")
                if msg.k <= last_k:
                    raise RuntimeProtocolError(f"iteration {msg.k} does not follow {last_k}")
                last_k = msg.k
                if self.stop_after is not None and self.rounds >= self.stop_after:
                    return
                ch.send(self._answer(msg))
                self.rounds += 1
        except BaseException as exc:  # surfaced to whoever joins the agent
            self.error = exc
        finally:
            ch.close()

    def _answer(self, msg: CoordMessage) -> CoordMessage:
        trans = None
        if "eta" in msg.arrays:
            trans = TransCorrection(msg.arrays["eta"], msg.arrays["f_prev"])
        try:
            res = self.side.solve(msg.state(), trans, msg.text.get("want") == "1")
        except (SolverError, ArithmeticError) as exc:
            return CoordMessage("error", msg.session, msg.k, Direction.DSO_TO_TSO, self.dso,
                                {"reason": str(exc)})
        text = {"status": res.status, "slack": repr(float(res.slack))}
        arrays = {"f": res.y.f, "l": res.y.l}
        for name in set(self.omit) & set(arrays):
            # only identically zero blocks are dropped; anything else still travels
            if not np.any(arrays[name]):
                arrays[name] = Omitted(arrays[name].shape)
        _encode_response(res.response, arrays, text)
        return CoordMessage("response", msg.session, msg.k, Direction.DSO_TO_TSO, self.dso, text, arrays)


class RemoteDso(DsoSide):
    """TSO-side proxy for a DSO agent on the other end of a channel."""

    def __init__(self, dso: int, channel: Channel, session: str, timeout: float = DEFAULT_TIMEOUT,
                 omit: tuple[str, ...] = ()):
        self.dso = dso
        self.omit = omit
        self.channel = channel
        self.session = session
        self.timeout = timeout
        self.sent = 0
        self.received = 0

    def submit(self, k, xi, trans=None, want_response=False):
        arrays = {"x": xi.x, "lam": xi.lam}
        for name in set(self.omit) & set(arrays):
            arrays[name] = Omitted(arrays[name].shape)
        if trans is not None:
            arrays["eta"], arrays["f_prev"] = trans.eta, trans.f_prev
        self.channel.send(CoordMessage("state", self.session, k, Direction.TSO_TO_DSO, self.dso,
                                       {"want": "1" if want_response else "0"}, arrays))
        self.sent += 1

    def collect(self, k):
        try:
            msg = self.channel.receive(Direction.DSO_TO_TSO, self.timeout)
        except CoordTimeoutError as exc:
            raise CoordTimeoutError(f"timeout waiting for DSO {self.dso} at iteration {k}: {exc}") from None
        self.received += 1
        if msg.session != self.session or msg.k != k or msg.dso != self.dso:
            raise RuntimeProtocolError(
                f"protocol-order violation: expected DSO {self.dso} iteration {k}, "
                f"got DSO {msg.dso} iteration {msg.k}")
        if msg.kind == "error":
            raise SubproblemError(msg.text.get("reason", "remote failure"), k, f"DSO {self.dso}")
        if msg.kind != "response":
            raise RuntimeProtocolError(f"unexpected {msg.kind} message from DSO {self.dso}")
        return DsoResult(msg.response(), response=_decode_response(msg),
                         status=msg.text.get("status", "ok"), slack=float(msg.text.get("slack", "0")))

    def solve(self, xi, trans=None, want_response=False):
        raise RuntimeProtocolError("remote DSOs are driven through submit/collect")


@dataclass
class DistributedSolution:
    """What the TSO ends up holding: its own solve and the last boundary responses."""

    tso: TsoResult
    xi: BoundaryState
    y: BoundaryResponse
    dso_status: dict[int, str]


class _TsoProblem(CoordinatedProblem):
    def __init__(self, layout: BoundaryLayout, tso: TsoSide, dsos: dict[int, DsoSide],
                 xi0: BoundaryState | None):
        self.layout = layout
        self.tso = tso
        self.dsos = dsos
        self._xi0 = xi0

    def initial_state(self):
        if self._xi0 is not None:
            return BoundaryState(self._xi0.x.copy(), self._xi0.lam.copy())
        nb = self.layout.nb
        return BoundaryState(np.vstack([np.ones(nb), np.zeros(nb)]), np.zeros((2, nb)))

    def refresh_for_assembly(self):
        return False

    def assemble(self, tso_result, dso_results):
        L = self.layout
        y = BoundaryResponse.merge([(L.columns(d), dso_results[d].y) for d in L.dsos], L)
        return DistributedSolution(tso_result, tso_result.xi, y,
                                   {d: r.status for d, r in dso_results.items()})


class TsoCoordinator:
    """Runs the HGD loop on the TSO side over one channel per DSO."""

    def __init__(self, app: str, tso_case: ItdCase, timeout: float = DEFAULT_TIMEOUT):
        self.app = app
        self.case = tso_case
        self.timeout = timeout
        self.side, self.layout, self.xi0 = build_tso_side(app, tso_case)
        self.session = uuid.uuid4().hex[:12]
        self.links: dict[int, Channel] = {}

    def expected_dsos(self) -> tuple[int, ...]:
        return self.layout.dsos

    def admit(self, channel: Channel) -> int:
        """Handshake one incoming link; returns its DSO index."""
        hello = channel.receive(Direction.DSO_TO_TSO, self.timeout)
        d = hello.dso
        reason = None
        if hello.kind != "hello":
            reason = f"expected hello, got {hello.kind}"
        elif d not in self.expected_dsos():
            reason = f"DSO {d} is not part of this case"
        elif d in self.links:
            reason = f"DSO {d} is already connected"
        elif hello.text.get("fingerprint") != interface_fingerprint(self.case, d):
            reason = f"case fingerprint mismatch for DSO {d}"
        if reason is not None:
            channel.send(CoordMessage("error", self.session, 0, Direction.TSO_TO_DSO, d, {"reason": reason}))
            channel.close()
            raise RuntimeProtocolError(reason)
        channel.send(CoordMessage("hello", self.session, 0, Direction.TSO_TO_DSO, d,
                                  {"omit": ",".join(_omitted_blocks(self.layout))}))
        self.links[d] = channel
        return d

    def run(self, cfg: HgdConfig) -> tuple[DistributedSolution, HgdTrace]:
        missing = set(self.expected_dsos()) - set(self.links)
        if missing:
            raise RuntimeProtocolError(f"DSOs {sorted(missing)} are not connected")
        omit = _omitted_blocks(self.layout)
        proxies = {d: RemoteDso(d, self.links[d], self.session, self.timeout, omit)
                   for d in self.expected_dsos()}
        prob = _TsoProblem(self.layout, self.side, proxies, self.xi0)
        try:
            sol, trace = run_hgd(prob, cfg)
        finally:
            self.close()
        wire = sum(p.sent + p.received for p in proxies.values())
        if wire != trace.messages:
            trace.notes.append(f"wire message count {wire} differs from engine count {trace.messages}")
        # no slave data on this side: the global residual is not computable here
        trace.global_kkt_residual = None
        return sol, trace

    def close(self) -> None:
        for d, ch in self.links.items():
            try:
                ch.send(CoordMessage("bye", self.session, 0, Direction.TSO_TO_DSO, d))
            except OSError:
                pass
            ch.close()


def _start(agent: DsoAgent) -> threading.Thread:
    t = threading.Thread(target=agent.run, name=f"dso-{agent.dso}", daemon=True)
    t.start()
    return t


def run_distributed(case: ItdCase, app: str, transport: str = "memory", cfg: HgdConfig | None = None,
                    response_mode: str = "equivalent", timeout: float = DEFAULT_TIMEOUT,
                    stop_after: dict[int, int] | None = None) -> tuple[DistributedSolution, HgdTrace]:
    """Run one app with the TSO and every DSO as separate agents in this process.

    The TSO agent is built from tso_view(case) and each DSO agent from its own
    dso_view; they talk only through `transport` ("memory" or "tcp" loopback).
    """
    cfg = cfg or HgdConfig()
    stop_after = stop_after or {}
    coord = TsoCoordinator(app, tso_view(case), timeout)
    agents = []
    server = None
    try:
        if transport == "memory":
            for d in coord.expected_dsos():
                t_end, d_end = memory_pair()
                agent = DsoAgent(build_dso_side(app, dso_view(case, d), d, response_mode), d_end,
                                 interface_fingerprint(case, d), timeout, stop_after.get(d))
                agents.append((agent, _start(agent)))
                coord.admit(t_end)
        elif transport == "tcp":
            server = socket.create_server(("127.0.0.1", 0))
            port = server.getsockname()[1]
            server.settimeout(timeout)
            for d in coord.expected_dsos():
                sock = socket.create_connection(("127.0.0.1", port), timeout=timeout)
                agent = DsoAgent(build_dso_side(app, dso_view(case, d), d, response_mode),
                                 SocketChannel(sock), interface_fingerprint(case, d), timeout,
                                 stop_after.get(d))
                agents.append((agent, _start(agent)))
                conn, _ = server.accept()
                coord.admit(SocketChannel(conn))
        else:
            raise ValueError(f"unknown transport {transport!r}")
        return coord.run(cfg)
    finally:
        if server is not None:
            server.close()
        for agent, thread in agents:
            thread.join(timeout=5)


def serve_tso(case: ItdCase, app: str, listen: str, cfg: HgdConfig | None = None,
              timeout: float = DEFAULT_TIMEOUT) -> tuple[DistributedSolution, HgdTrace]:
    """Listen for every DSO of the case, then run the loop (one process per operator)."""
    coord = TsoCoordinator(app, tso_view(case), timeout)
    host, port = parse_address(listen)
    with socket.create_server((host, port)) as server:
        server.settimeout(timeout)
        while set(coord.links) != set(coord.expected_dsos()):
            try:
                conn, _ = server.accept()
            except (socket.timeout, TimeoutError):
                raise CoordTimeoutError("not every DSO connected within the timeout") from None
            coord.admit(SocketChannel(conn))
    return coord.run(cfg or HgdConfig())


def serve_dso(case: ItdCase, app: str, dso: int, connect: str, response_mode: str = "equivalent",
              timeout: float = DEFAULT_TIMEOUT) -> DsoAgent:
    """Connect to a TSO and answer until it says bye; keeps only this DSO's view."""
    if dso not in case.dsos:
        raise ValueError(f"case has no DSO {dso}")
    side = build_dso_side(app, dso_view(case, dso), dso, response_mode)
    fp = interface_fingerprint(case, dso)
    host, port = parse_address(connect)
    sock = socket.create_connection((host, port), timeout=timeout)
    agent = DsoAgent(side, SocketChannel(sock), fp, timeout)
    agent.run()
    if agent.error is not None:
        raise agent.error
    return agent


def trace_gap(a: HgdTrace, b: HgdTrace) -> float:
    """Largest difference between two traces' exchanged vectors (inf if lengths differ)."""
    if a.n_iter != b.n_iter:
        return float("inf")
    gap = 0.0
    for ia, ib in zip(a.iterations, b.iterations):
        gap = max(gap, float(np.abs(ia.xi.vector() - ib.xi.vector()).max(initial=0.0)),
                  float(np.abs(ia.y_sent.vector() - ib.y_sent.vector()).max(initial=0.0)))
    return gap

