import numpy as np
import pytest

from zerosim.errors import PlanError, ProtocolError, ValidationError
from zerosim.simnet import Phase, Send, run_collective, run_phase
from zerosim.topology import INTER, INTRA, ClusterTopology, TrafficLedger


def test_ring_step_delivery_and_accounting():
    topo = ClusterTopology(nodes=2, gpus_per_node=2)
    ledger = TrafficLedger()
    plan = {r: [Send(dst=(r + 1) % 4, payload=("v", r), payload_bytes=10)] for r in range(4)}
    delivered = run_phase(plan, topo, ledger, "ring")
    assert sorted(delivered) == [0, 1, 2, 3]
    assert delivered[1] == [(0, ("v", 0))]
    assert delivered[0] == [(3, ("v", 3))]
    # 0->1 and 2->3 stay on-node, 1->2 and 3->0 cross
    assert ledger.physical_bytes(cls=INTRA) == 20
    assert ledger.physical_bytes(cls=INTER) == 20
    assert ledger.physical[("ring", INTRA)].messages == 2
    assert ledger.conservation_holds()


def test_alltoall_with_self_copies():
    topo = ClusterTopology(nodes=2, gpus_per_node=2)
    ledger = TrafficLedger()
    plan = {
        r: [Send(dst=d, payload=(r, d), payload_bytes=5) for d in range(4)]
        for r in range(4)
    }
    delivered = run_phase(plan, topo, ledger, "a2a")
    for d in range(4):
        assert [src for src, _ in delivered[d]] == [0, 1, 2, 3]  # sorted by source
        assert delivered[d][d][1] == (d, d)  # self-copy is delivered
    # 12 real messages, 4 free self-copies
    assert sum(b.messages for b in ledger.physical.values()) == 12
    assert ledger.physical_bytes() == 60


def test_duplicate_message_rejected_but_tags_distinguish():
    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    with pytest.raises(PlanError):
        run_phase(
            {0: [Send(dst=1, payload="a", payload_bytes=1), Send(dst=1, payload="b", payload_bytes=1)]},
            topo, TrafficLedger(), "dup",
        )
    delivered = run_phase(
        {0: [Send(dst=1, payload="a", payload_bytes=1, tag=1), Send(dst=1, payload="b", payload_bytes=1, tag=0)]},
        topo, TrafficLedger(), "tagged",
    )
    assert delivered[1] == [(0, "b"), (0, "a")]  # tag order breaks the tie


def test_unknown_ranks_rejected():
    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    with pytest.raises(PlanError):
        run_phase({5: [Send(dst=0, payload=None, payload_bytes=1)]}, topo, TrafficLedger(), "bad")
    with pytest.raises(PlanError):
        run_phase({0: [Send(dst=9, payload=None, payload_bytes=1)]}, topo, TrafficLedger(), "bad")


def test_event_log_records_messages():
    topo = ClusterTopology(nodes=2, gpus_per_node=1)
    log = []
    run_phase(
        {0: [Send(dst=1, payload=None, payload_bytes=7, metadata_bytes=2)]},
        topo, TrafficLedger(), "x", event_log=log,
    )
    assert log == [{"phase": "x", "src": 0, "dst": 1, "bytes": 9, "class": INTER}]


def _shift_program(world, values):
    def make(rank):
        def program(rank=rank):
            received = yield Phase(
                "shift", [Send(dst=(rank + 1) % world, payload=values[rank], payload_bytes=8)]
            )
            return received[0][1] + 1
        return program()
    return make


def test_collective_runs_to_completion():
    topo = ClusterTopology(nodes=2, gpus_per_node=2)
    ledger = TrafficLedger()
    outputs, trace = run_collective(_shift_program(4, [10, 20, 30, 40]), 4, topo, ledger, "shift")
    assert outputs == [41, 11, 21, 31]
    assert [p.name for p in trace.phases] == ["shift"]
    assert trace.phases[0].intra_messages == 2
    assert trace.phases[0].inter_messages == 2
    assert trace.phases[0].intra_bytes == 16


def test_phase_name_mismatch_raises():
    def make(rank):
        def program():
            yield Phase("a" if rank == 0 else "b", [])
            return None
        return program()

    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    with pytest.raises(ProtocolError):
        run_collective(make, 2, topo, TrafficLedger(), "bad")


def test_early_return_subset_raises():
    def make(rank):
        def program():
            if rank == 0:
                return 0
            yield Phase("p", [])
            return 1
        return program()

    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    with pytest.raises(ProtocolError):
        run_collective(make, 2, topo, TrafficLedger(), "bad")


def test_phase_stats_skip_self_sends():
    def make(rank):
        def program():
            yield Phase("p", [Send(dst=rank, payload=None, payload_bytes=100)])
            return None
        return program()

    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    ledger = TrafficLedger()
    _, trace = run_collective(make, 2, topo, ledger, "selfies")
    assert trace.phases[0].intra_messages == 0
    assert trace.phases[0].intra_bytes == 0
    assert ledger.physical_bytes() == 0


def _sum_exchange_program(world, rng_seed):
    rng = np.random.default_rng(rng_seed)
    data = rng.normal(size=(world, 16))

    def make(rank):
        def program(rank=rank):
            acc = data[rank].copy()
            for step in range(3):
                sends = [
                    Send(dst=d, payload=acc.copy(), payload_bytes=acc.nbytes) for d in range(world)
                ]
                received = yield Phase(f"step{step}", sends)
                acc = np.zeros_like(acc)
                for _src, arr in received:
                    acc += arr
            return acc
        return program()
    return make


def test_serial_and_thread_schedulers_agree():
    topo = ClusterTopology(nodes=2, gpus_per_node=2)
    out_serial, _ = run_collective(_sum_exchange_program(4, 7), 4, topo, TrafficLedger(), "s", scheduler="serial")
    out_threads, _ = run_collective(_sum_exchange_program(4, 7), 4, topo, TrafficLedger(), "s", scheduler="threads")
    for a, b in zip(out_serial, out_threads):
        assert np.array_equal(a, b)


def test_run_collective_validation():
    topo = ClusterTopology(nodes=1, gpus_per_node=2)
    with pytest.raises(ValidationError):
        run_collective(_shift_program(4, [0] * 4), 4, topo, TrafficLedger(), "x")
    with pytest.raises(ValidationError):
        run_collective(_shift_program(2, [0, 0]), 2, topo, TrafficLedger(), "x", scheduler="fibers")
