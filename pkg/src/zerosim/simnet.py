"""Deterministic bulk-synchronous message passing between simulated ranks.

A rank program is a generator: it yields a Phase (a named list of sends) and
is resumed with the messages delivered to it in that phase, sorted by source
rank.  All ranks advance in lockstep; a phase-name mismatch or early return on
a subset of ranks is a protocol error.  Results never depend on the order in
which rank programs are advanced, which the thread scheduler exercises.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import PlanError, ProtocolError, ValidationError
from .topology import INTRA, ClusterTopology, CollectiveTrace, PhaseStats, TrafficLedger, classify_link


@dataclass
class Send:
    """One outgoing message: payload object plus its wire accounting."""

    dst: int
    payload: object
    payload_bytes: int
    metadata_bytes: int = 0
    padding_bytes: int = 0
    tag: int = 0


@dataclass
class Phase:
    name: str
    sends: list[Send] = field(default_factory=list)


def run_phase(plan: dict[int, list[Send]], topo: ClusterTopology, ledger: TrafficLedger,
              label: str, event_log=None) -> dict[int, list[tuple[int, object]]]:
    """Execute one exchange: returns dst -> [(src, payload)] sorted by source.

    `plan` maps each sending rank to its sends.  Duplicate (src, dst, tag)
    triples are rejected.  Self-sends are delivered but cost nothing.
    """
    deliveries: dict[int, list] = {}
    seen = set()
    for src, sends in plan.items():
        if not 0 <= src < topo.world:
            raise PlanError(f"unknown source rank {src}")
        for s in sends:
            if not 0 <= s.dst < topo.world:
                raise PlanError(f"unknown destination rank {s.dst}")
            key = (src, s.dst, s.tag)
            if key in seen:
                raise PlanError(f"duplicate message {key} in one phase")
            seen.add(key)
            ledger.record_message(
                label, src, s.dst, topo,
                payload=s.payload_bytes, metadata=s.metadata_bytes, padding=s.padding_bytes,
            )
            deliveries.setdefault(s.dst, []).append((src, s.tag, s.payload))
            if event_log is not None:
                event_log.append({
                    "phase": label,
                    "src": src,
                    "dst": s.dst,
                    "bytes": s.payload_bytes + s.metadata_bytes + s.padding_bytes,
                    "class": classify_link(src, s.dst, topo),
                })
    return {
        dst: [(src, payload) for src, _tag, payload in sorted(items, key=lambda x: (x[0], x[1]))]
        for dst, items in deliveries.items()
    }


def _phase_stats(name, plan, topo) -> PhaseStats:
    st = PhaseStats(name=name)
    for src, sends in plan.items():
        for s in sends:
            if s.dst == src:
                continue
            total = s.payload_bytes + s.metadata_bytes + s.padding_bytes
            if classify_link(src, s.dst, topo) == INTRA:
                st.intra_messages += 1
                st.intra_bytes += total
            else:
                st.inter_messages += 1
                st.inter_bytes += total
    return st


def run_collective(make_program, world: int, topo: ClusterTopology, ledger: TrafficLedger,
                   label: str, scheduler: str = "serial", event_log=None):
    """Drive one generator per rank to completion in lockstep.

    make_program(rank) must return a generator that yields Phase objects and
    finally returns the rank's output.  Returns (outputs by rank, trace).
    """
    if world != topo.world:
        raise ValidationError(f"program world {world} != topology world {topo.world}")
    if scheduler not in ("serial", "threads"):
        raise ValidationError(f"unknown scheduler {scheduler!r}")
    gens = [make_program(r) for r in range(world)]
    outputs: list = [None] * world
    done = [False] * world
    inbox: list = [None] * world
    trace = CollectiveTrace(label=label)

    def advance(rank):
        # returns ("phase", Phase) or ("done", value)
        try:
            if inbox[rank] is None:
                return ("phase", next(gens[rank]))
            msg = inbox[rank]
            inbox[rank] = None
            return ("phase", gens[rank].send(msg))
        except StopIteration as stop:
            return ("done", stop.value)

    pool = ThreadPoolExecutor(max_workers=min(world, 16)) if scheduler == "threads" else None
    try:
        round_no = 0
        while not all(done):
            live = [r for r in range(world) if not done[r]]
            if pool is not None:
                results = list(pool.map(advance, live))
            else:
                results = [advance(r) for r in live]
            phases = {}
            for rank, (kind, value) in zip(live, results):
                if kind == "done":
                    outputs[rank] = value
                    done[rank] = True
                else:
                    phases[rank] = value
            if phases and (len(phases) != len(live)):
                raise ProtocolError(f"ranks {sorted(set(live) - set(phases))} returned early at round {round_no}")
            if not phases:
                break
            names = {p.name for p in phases.values()}
            if len(names) != 1:
                raise ProtocolError(f"phase name mismatch at round {round_no}: {sorted(names)}")
            plan = {rank: phase.sends for rank, phase in phases.items()}
            trace.phases.append(_phase_stats(names.pop(), plan, topo))
            delivered = run_phase(plan, topo, ledger, label, event_log=event_log)
            for rank in phases:
                inbox[rank] = delivered.get(rank, [])
            round_no += 1
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    return outputs, trace
