import json
import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import case
from tdcoord.apps.dispatch import build_tdced, build_tdopf_dc, build_tdse, run_tdced
from tdcoord.apps.pf import build_tdpf
from tdcoord.hgd import HgdConfig, SubproblemError, run_hgd
from tdcoord.runtime import (ChecksumError, CoordMessage, CoordTimeoutError, Direction, DsoAgent,
                             MalformedMessageError, Omitted, RuntimeProtocolError, TsoCoordinator,
                             build_dso_side, deserialize, interface_fingerprint, memory_pair, parse_address,
                             run_distributed, serialize, serve_dso, serve_tso, trace_gap)
from tdcoord.model import bundled_case_path, case_from_dict, dso_view, tso_view

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF, blacklist_characters="="), min_size=1,
                max_size=8)
finite = st.floats(allow_nan=False, allow_infinity=True, width=64)


@st.composite
def messages(draw):
    arrs = draw(st.dictionaries(st.sampled_from(["x", "lam", "f", "l", "D", "eta"]),
                                arrays(float, st.tuples(st.integers(0, 3), st.integers(0, 3)), elements=finite),
                                max_size=4))
    return CoordMessage(draw(st.sampled_from(["hello", "state", "response", "error", "bye"])),
                        draw(st.text(max_size=12)), draw(st.integers(0, 10 ** 6)),
                        draw(st.sampled_from(list(Direction))), draw(st.integers(0, 99)),
                        draw(st.dictionaries(names, st.text(max_size=20), max_size=3)), arrs)


def same(a: CoordMessage, b: CoordMessage) -> bool:
    if (a.kind, a.session, a.k, a.direction, a.dso, a.text) != (b.kind, b.session, b.k, b.direction, b.dso, b.text):
        return False
    return a.arrays.keys() == b.arrays.keys() and all(
        a.arrays[n].shape == b.arrays[n].shape and np.array_equal(a.arrays[n], b.arrays[n]) for n in a.arrays)


# -- wire format --------------------------------------------------------------------------------

@given(messages())
def test_serialize_round_trip(msg):
    line = serialize(msg)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert same(deserialize(line), msg)


def test_doubles_survive_exactly():
    v = np.array([[0.1, 1 / 3, np.nextafter(1.0, 2.0), -5e-324, 1.7976931348623157e308]])
    back = deserialize(serialize(CoordMessage("state", "s", 1, Direction.TSO_TO_DSO, 1, arrays={"x": v})))
    assert back.arrays["x"].tobytes() == v.tobytes()


def test_omitted_block_travels_as_shape():
    msg = CoordMessage("state", "s", 1, Direction.TSO_TO_DSO, 1,
                       arrays={"x": Omitted((1, 2)), "lam": np.array([[3.0, 4.0]])})
    line = serialize(msg)
    assert b"a.x=1x2:-" in line
    back = deserialize(line)
    assert np.array_equal(back.arrays["x"], np.zeros((1, 2)))


def test_truncated_and_corrupted():
    line = serialize(CoordMessage("state", "s", 1, Direction.TSO_TO_DSO, 1, arrays={"x": np.ones((1, 1))}))
    with pytest.raises(MalformedMessageError, match="truncated"):
        deserialize(line[:-1])
    with pytest.raises(MalformedMessageError):
        deserialize(line[:20] + b"\n")
    bad = line.replace(b"k=1", b"k=2")
    with pytest.raises(ChecksumError):
        deserialize(bad)


def test_channel_rejects_duplicates_and_wrong_direction():
    a, b = memory_pair()
    msg = CoordMessage("state", "s", 1, Direction.TSO_TO_DSO, 1)
    a.send(msg)
    a.send(msg)
    assert b.receive(Direction.TSO_TO_DSO, 1).k == 1
    with pytest.raises(RuntimeProtocolError, match="duplicate"):
        b.receive(Direction.TSO_TO_DSO, 1)
    a.send(CoordMessage("state", "s", 2, Direction.TSO_TO_DSO, 1))
    with pytest.raises(RuntimeProtocolError, match="expected a dso-tso"):
        b.receive(Direction.DSO_TO_TSO, 1)


def test_memory_channel_timeout():
    _, b = memory_pair()
    with pytest.raises(CoordTimeoutError):
        b.receive(Direction.TSO_TO_DSO, 0.01)


def test_parse_address():
    assert parse_address("127.0.0.1:7001") == ("127.0.0.1", 7001)
    assert parse_address(":7001") == ("127.0.0.1", 7001)
    for bad in ("localhost", "host:port", ""):
        with pytest.raises(ValueError):
            parse_address(bad)


def test_fingerprint_covers_interface_only():
    c = case("ieee14_itd")
    assert interface_fingerprint(c, 1) != interface_fingerprint(c, 2)
    assert interface_fingerprint(c, 1) == interface_fingerprint(dso_view(c, 1), 1)
    assert interface_fingerprint(c, 1) == interface_fingerprint(tso_view(c), 1)


# -- distributed runs ---------------------------------------------------------------------------------

@pytest.mark.parametrize("name,app", [("b2s1", "pf"), ("ieee14_itd", "pf"), ("ed_quadratic", "ed"),
                                      ("opf_asym", "opf"), ("se_noisy", "se")])
def test_memory_run_reproduces_in_process_trace(name, app):
    build = {"pf": build_tdpf, "ed": build_tdced, "opf": build_tdopf_dc, "se": build_tdse}[app]
    cfg = HgdConfig(epsilon=1e-9, variant="modified-dist")
    _, ref = run_hgd(build(case(name)), cfg)
    sol, tr = run_distributed(case(name), app, "memory", cfg)
    assert trace_gap(ref, tr) == 0.0
    assert tr.messages == ref.messages == 2 * len(case(name).dsos) * tr.n_iter
    assert tr.global_kkt_residual is None
    assert not [n for n in tr.notes if "wire message count" in n]
    assert np.array_equal(sol.xi.vector(), tr.final_state.vector())


def test_tcp_matches_memory():
    cfg = HgdConfig(epsilon=1e-9)
    _, a = run_distributed(case("ieee14_itd"), "pf", "memory", cfg)
    _, b = run_distributed(case("ieee14_itd"), "pf", "tcp", cfg)
    assert trace_gap(a, b) == 0.0


def test_killed_dso_times_out():
    with pytest.raises(CoordTimeoutError, match="timeout waiting for DSO 2 at iteration 4"):
        run_distributed(case("ieee14_itd"), "pf", "memory", HgdConfig(epsilon=1e-14, max_iter=20),
                        timeout=0.5, stop_after={2: 3})


def test_remote_subproblem_failure_surfaces():
    d = json.loads(bundled_case_path("ed_congested").read_text())
    d["branches"][1]["flow_limit"] = 0.3
    with pytest.raises(SubproblemError, match="DSO 1"):
        run_distributed(case_from_dict(d), "ed", "memory", timeout=2)


def test_unknown_transport_and_app():
    with pytest.raises(ValueError):
        run_distributed(case("b2s1"), "pf", "carrier-pigeon")
    with pytest.raises(ValueError):
        build_dso_side("uc", dso_view(case("b2s1"), 1), 1)


def _agent(c, d, fp=None, app="pf"):
    t_end, d_end = memory_pair()
    side = build_dso_side(app, dso_view(c, d), d)
    agent = DsoAgent(side, d_end, fp or interface_fingerprint(c, d), 2.0)
    th = threading.Thread(target=agent.run, daemon=True)
    th.start()
    return t_end, agent, th


def test_fingerprint_mismatch_refused():
    c = case("b2s1")
    coord = TsoCoordinator("pf", tso_view(c), 2.0)
    t_end, agent, th = _agent(c, 1, fp="0" * 16)
    with pytest.raises(RuntimeProtocolError, match="fingerprint mismatch"):
        coord.admit(t_end)
    th.join(2)
    assert isinstance(agent.error, RuntimeProtocolError)


def test_duplicate_and_foreign_dso_refused():
    c = case("b2s1")
    coord = TsoCoordinator("pf", tso_view(c), 2.0)
    t1, _, _ = _agent(c, 1)
    assert coord.admit(t1) == 1
    t2, _, _ = _agent(c, 1)
    with pytest.raises(RuntimeProtocolError, match="already connected"):
        coord.admit(t2)
    coord.close()


def test_run_requires_every_dso():
    coord = TsoCoordinator("pf", tso_view(case("ieee14_itd")), 1.0)
    with pytest.raises(RuntimeProtocolError, match=r"DSOs \[1, 2\]"):
        coord.run(HgdConfig())


def test_separate_serve_entry_points():
    c = case("ed_quadratic")
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    addr = f"127.0.0.1:{port}"
    out = {}

    def tso():
        out["tso"] = serve_tso(c, "ed", addr, HgdConfig(epsilon=1e-9), timeout=10)

    def dso(d):
        for _ in range(200):   # the TSO may not be listening yet
            try:
                out[d] = serve_dso(c, "ed", d, addr, timeout=10)
                return
            except ConnectionRefusedError:
                time.sleep(0.01)

    threads = [threading.Thread(target=tso, daemon=True)]
    threads += [threading.Thread(target=dso, args=(d,), daemon=True) for d in c.dsos]
    for t in threads:
        t.start()
    for t in threads:
        t.join(20)
    _, _, ref = run_tdced(c, "basic", HgdConfig(epsilon=1e-9))
    assert trace_gap(out["tso"][1], ref) == 0.0
    assert all(out[d].rounds == ref.n_iter for d in c.dsos)
