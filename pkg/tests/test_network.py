"""End-to-end runs over both transports: equality, isolation, failure paths."""

import socket

import pytest

from conftest import make_scenario
from phtlink.analysis import AnalysisSpec, DisclosurePolicy
from phtlink.encoding import b64encode
from phtlink.linkage import LinkageParams
from phtlink.network import run_network
from phtlink.pseudonym import Salt
from phtlink.stations import WIPED
from phtlink.synth import generate_population, generate_vertical_demo, SyntheticPopulationSpec


def demo_scenario(seed=4, n_a=80, n_b=25, **kwargs):
    ds_a, ds_b, truth = generate_vertical_demo(n_a, n_b, seed=seed)
    return make_scenario(ds_a, ds_b, truth, **kwargs)


class TestInProcess:
    def test_happy_path_completes_and_wipes(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        assert out.completed
        assert out.result.audit["run"]["records_linked"] == len(scn.truth)
        assert out.storage.wiped and out.storage.inventory() == ()

    def test_exactly_one_result_return_in_trace(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        returns = [
            entry
            for channel, entries in out.traces.items()
            for entry in entries
            if entry[0] == "ResultReturn"
        ]
        assert len(returns) == 1

    def test_happy_path_message_arrows(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        types = {
            channel: [e[0] for e in entries] for channel, entries in out.traces.items()
        }
        assert types[("researcher", "A")] == ["TrainDispatch"]
        assert types[("researcher", "B")] == ["TrainDispatch"]
        assert types[("researcher", "TSE")] == ["TrainDispatch"]
        assert types[("A", "B")] == ["SaltOffer"]
        assert types[("B", "A")] == ["Ack"]
        assert types[("A", "TSE")] == ["DataTransfer"]
        assert types[("B", "TSE")] == ["DataTransfer"]
        assert types[("TSE", "researcher")][-1] == "ResultReturn"
        assert "Ack" in types[("A", "researcher")]

    def test_per_sender_sequence_numbers_increase(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        by_sender: dict[str, list[int]] = {}
        for (sender, _), entries in out.traces.items():
            for _, _, seq in entries:
                by_sender.setdefault(sender, []).append(seq)
        for sender, seqs in by_sender.items():
            assert sorted(set(seqs)) == sorted(seqs), sender

    def test_researcher_sees_only_allowed_message_types(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        for (sender, dest), entries in out.traces.items():
            if dest != "researcher":
                continue
            for entry in entries:
                assert entry[0] in ("Ack", "ResultReturn", "Abort")

    def test_tamper_aborts_and_wipes_other_station_data(self):
        scn = demo_scenario(fault_b="tamper")
        out = run_network(scn.setup, transport="inproc")
        assert out.outcome == "aborted"
        assert out.reason == "OuterIntegrityFailure@B"
        assert out.storage.wiped and out.storage.inventory() == ()

    def test_silent_station_hits_simulated_timeout(self):
        scn = demo_scenario(fault_b="no_send")
        out = run_network(scn.setup, transport="inproc")
        assert out.outcome == "aborted" and out.reason == "Timeout"
        assert out.storage.wiped

    def test_expired_manifest_aborts(self):
        scn = demo_scenario(expiry="2000-01-01T00:00:00Z")
        out = run_network(scn.setup, transport="inproc")
        assert out.outcome == "aborted" and out.reason == "Expired"


class TestPartyIsolation:
    def test_station_a_never_receives_station_b_dataset_bytes(self):
        ds_a, ds_b, truth = generate_vertical_demo(80, 25, seed=4)
        ds_b.rows[0].payload["income"] = 31415926  # distinctive canary value
        scn = make_scenario(ds_a, ds_b, truth)
        out = run_network(scn.setup, transport="inproc")
        assert out.completed
        for frame in out.received_bytes["A"]:
            assert b"31415926" not in frame
        types = {c: [e[0] for e in v] for c, v in out.traces.items()}
        assert set(types.get(("B", "A"), [])) <= {"Ack", "Abort"}
        assert all(t[0] in ("TrainDispatch", "Ack") for v in
                   (out.traces.get(("researcher", "A"), []), out.traces.get(("B", "A"), []))
                   for t in v)

    def test_tse_inbox_contains_no_salt_bytes(self):
        salt = Salt(bytes(range(32)), "run-0001")
        scn = demo_scenario(reuse_salt_a=salt)
        out = run_network(scn.setup, transport="inproc")
        assert out.completed
        needles = (salt.bytes, b64encode(salt.bytes).encode(), salt.bytes.hex().encode())
        for frame in out.received_bytes["TSE"]:
            for needle in needles:
                assert needle not in frame

    def test_tse_inbox_contains_no_raw_qid_strings(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="inproc")
        assert out.completed
        canaries = []
        for row in scn.ds_a.rows[:10]:
            qid = row.qid
            canaries.append(qid.date_of_birth.encode())
            canaries.append("|".join(qid.as_tuple()).encode())
        blob = b"".join(out.received_bytes["TSE"])
        for canary in canaries:
            assert canary not in blob


class TestTcp:
    def test_happy_path_over_sockets(self):
        scn = demo_scenario()
        out = run_network(scn.setup, transport="tcp", tse_timeout=5.0, run_timeout=30.0)
        assert out.completed
        assert out.storage.wiped

    def test_transport_independence_bytes_and_traces(self):
        results = {}
        for transport in ("inproc", "tcp"):
            scn = demo_scenario(seed=9)
            results[transport] = run_network(
                scn.setup, transport=transport, tse_timeout=5.0, run_timeout=30.0
            )
        assert results["inproc"].completed and results["tcp"].completed
        assert results["inproc"].result_bytes == results["tcp"].result_bytes
        assert results["inproc"].logical_trace() == results["tcp"].logical_trace()

    def test_killed_station_aborts_via_timeout(self):
        scn = demo_scenario(fault_b="no_send")
        out = run_network(scn.setup, transport="tcp", tse_timeout=1.0, run_timeout=15.0)
        assert out.outcome == "aborted" and out.reason == "Timeout"
        assert out.storage.wiped

    def test_garbage_connection_is_dropped_and_node_keeps_serving(self):
        import time

        from phtlink.network import TcpNode
        from phtlink.wire import Ack, encode

        seen = []
        node = TcpNode("X", lambda msg: seen.append(msg) or [], {})
        node.start()
        try:
            host, port = node.address.rsplit(":", 1)
            junk = socket.create_connection((host, int(port)))
            junk.sendall(b"this is not a frame at all")
            junk.close()

            good = socket.create_connection((host, int(port)))
            good.sendall(encode(Ack("run-1", 1, "Y", "OK")))
            good.close()
            deadline = time.monotonic() + 5.0
            while not seen and time.monotonic() < deadline:
                time.sleep(0.01)
        finally:
            node.stop()
        assert len(seen) == 1 and seen[0].status == "OK"


class TestProbabilisticEndToEnd:
    def test_perturbed_population_links_probabilistically(self):
        large, small, truth = generate_population(
            SyntheticPopulationSpec(
                n_large=150, n_small=60, overlap_fraction=0.6,
                perturbation_rate=0.1, seed=21,
            )
        )
        scn = make_scenario(
            large, small, truth,
            variables_a=("age",), variables_b=("activity",),
            analysis=AnalysisSpec("binned_association", ("age", "activity"), bin_width=10),
            disclosure=DisclosurePolicy(k_min=2),
            linkage=LinkageParams(mode="probabilistic", blocking_fields=()),
        )
        out = run_network(scn.setup, transport="inproc")
        assert out.completed
        linked = out.result.audit["run"]["records_linked"]
        assert linked >= int(0.8 * len(truth))
