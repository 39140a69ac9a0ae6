"""Cluster shape, link classification, traffic accounting, latency model.

The ledger keeps two books:

* physical counters: every simulated message, at its true byte size, keyed by
  (collective label, link class).  Self-copies cost 0.  These drive the
  conservation checks and the "no cross-node traffic" assertions.

* volume rows: per collective, the bytes one node boundary must carry in a
  bandwidth-optimal hierarchical realization of that collective, with the
  node's own share included.  This is the standard way communication volume
  tables for sharded training are quoted (an all-gather of M fp16 params
  "costs 2*M bytes" even though a node physically imports (Y-1)/Y of that),
  and it is what ``normalized_cross_node_volume`` reports.  Collectives record
  their own rows because the idealization depends on the dataflow: gathers
  count unique bytes entering a node, scatter/all-to-all hops count unique
  bytes leaving one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ValidationError

INTRA, INTER = "intra", "inter"


@dataclass(frozen=True)
class ClusterTopology:
    """nodes x gpus_per_node grid; rank r lives on node r // gpus_per_node."""

    nodes: int
    gpus_per_node: int

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ValidationError("topology dimensions must be >= 1")

    @property
    def world(self) -> int:
        return self.nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.world:
            raise ValidationError(f"rank {rank} outside world of {self.world}")
        return rank // self.gpus_per_node

    def ranks_on_node(self, node: int) -> range:
        return range(node * self.gpus_per_node, (node + 1) * self.gpus_per_node)


def classify_link(src: int, dst: int, topo: ClusterTopology) -> str:
    """INTRA for same-node pairs (including self), INTER across nodes."""
    return INTRA if topo.node_of(src) == topo.node_of(dst) else INTER


def span_class(ranks, topo: ClusterTopology) -> str:
    """Link class of a group taken as a whole: INTER once it spans 2+ nodes."""
    nodes = {topo.node_of(r) for r in ranks}
    return INTER if len(nodes) > 1 else INTRA


@dataclass
class _Bytes:
    payload: int = 0
    metadata: int = 0
    padding: int = 0
    messages: int = 0

    def add(self, payload=0, metadata=0, padding=0, messages=0):
        self.payload += payload
        self.metadata += metadata
        self.padding += padding
        self.messages += messages


class TrafficLedger:
    """Byte accounting for one experiment (typically one training step)."""

    def __init__(self):
        self.physical: dict[tuple[str, str], _Bytes] = {}
        self.volume: dict[tuple[str, str], _Bytes] = {}
        # (label, rank) -> [sent_payload, received_payload]
        self.per_rank: dict[tuple[str, int], list[int]] = {}

    def record_message(self, label, src, dst, topo, *, payload, metadata=0, padding=0):
        if src == dst:
            return  # self-copies never hit a link
        cls = classify_link(src, dst, topo)
        self.physical.setdefault((label, cls), _Bytes()).add(payload, metadata, padding, 1)
        self.per_rank.setdefault((label, src), [0, 0])[0] += payload
        self.per_rank.setdefault((label, dst), [0, 0])[1] += payload

    def record_volume(self, label, cls, *, payload, metadata=0, padding=0):
        self.volume.setdefault((label, cls), _Bytes()).add(payload, metadata, padding)

    # -- queries ----------------------------------------------------------

    def physical_bytes(self, label=None, cls=None) -> int:
        return sum(
            b.payload
            for (lb, lc), b in self.physical.items()
            if (label is None or lb == label) and (cls is None or lc == cls)
        )

    def volume_bytes(self, cls, label=None, kind="payload") -> int:
        return sum(
            getattr(b, kind)
            for (lb, lc), b in self.volume.items()
            if lc == cls and (label is None or lb == label)
        )

    def labels(self):
        keys = {lb for lb, _ in self.volume} | {lb for lb, _ in self.physical}
        return sorted(keys)

    def conservation_holds(self) -> bool:
        """Per collective, total payload sent must equal total received."""
        totals: dict[str, list[int]] = {}
        for (label, _rank), (sent, recv) in self.per_rank.items():
            t = totals.setdefault(label, [0, 0])
            t[0] += sent
            t[1] += recv
        return all(sent == recv for sent, recv in totals.values())

    def to_csv(self, m_params: int) -> str:
        """Volume-row export: one line per (collective, link_class)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["collective", "link_class", "payload_bytes", "metadata_bytes", "padding_bytes", "normalized_volume"]
        )
        for (label, cls) in sorted(self.volume):
            b = self.volume[(label, cls)]
            w.writerow([label, cls, b.payload, b.metadata, b.padding, repr(b.payload / (2 * m_params))])
        return buf.getvalue()


def normalized_cross_node_volume(ledger: TrafficLedger, m_params: int, label=None) -> float:
    """Cross-node payload bytes divided by 2*M: volume in fp16-model units.

    Metadata (scales) and padding are excluded; they are reported in their own
    ledger columns.
    """
    if m_params <= 0:
        raise ValidationError("m_params must be positive")
    return ledger.volume_bytes(INTER, label=label) / (2 * m_params)


@dataclass(frozen=True)
class LinkParams:
    """Alpha-beta cost model: alpha seconds per message, beta bytes/second."""

    intra_alpha: float = 1e-6
    intra_beta: float = 300e9
    inter_alpha: float = 5e-6
    inter_beta: float = 25e9

    def __post_init__(self):
        if min(self.intra_alpha, self.inter_alpha) < 0:
            raise ValidationError("alpha must be >= 0")
        if min(self.intra_beta, self.inter_beta) <= 0:
            raise ValidationError("beta must be > 0")


@dataclass
class PhaseStats:
    name: str
    intra_messages: int = 0
    intra_bytes: int = 0
    inter_messages: int = 0
    inter_bytes: int = 0
    compute_seconds: float = 0.0


@dataclass
class CollectiveTrace:
    label: str
    phases: list[PhaseStats] = field(default_factory=list)

    def totals(self):
        im = sum(p.intra_messages for p in self.phases)
        ib = sum(p.intra_bytes for p in self.phases)
        em = sum(p.inter_messages for p in self.phases)
        eb = sum(p.inter_bytes for p in self.phases)
        cs = sum(p.compute_seconds for p in self.phases)
        return im, ib, em, eb, cs


@dataclass
class LatencyEstimate:
    label: str
    total_seconds: float
    intra_seconds: float
    inter_seconds: float
    compute_seconds: float
    stages: int


def estimate_latency(trace: CollectiveTrace, links: LinkParams, stages: int = 1, overlap: bool = True) -> LatencyEstimate:
    """Alpha-beta cost of a trace, optionally pipelined over `stages` chunks.

    intra and inter phase costs are alpha * messages + bytes / beta summed over
    the trace.  Without overlap the two simply add.  With overlap and S stages
    the first chunk pays both phases while the remaining S-1 chunks hide the
    cheaper phase behind the more expensive one:

        T = (T_intra + T_inter) / S + (S - 1) * max(T_intra, T_inter) / S

    S = 1 reduces to the plain sum.  Message counts come from the trace, so a
    collective that actually ran in S pipeline stages carries S times the
    per-message alpha cost, which is what makes very deep pipelines lose.
    """
    if stages < 1:
        raise ValidationError("stages must be >= 1")
    im, ib, em, eb, cs = trace.totals()
    t_intra = links.intra_alpha * im + ib / links.intra_beta
    t_inter = links.inter_alpha * em + eb / links.inter_beta
    if overlap:
        total = (t_intra + t_inter) / stages + (stages - 1) * max(t_intra, t_inter) / stages
    else:
        total = t_intra + t_inter
    return LatencyEstimate(
        label=trace.label,
        total_seconds=total + cs,
        intra_seconds=t_intra,
        inter_seconds=t_inter,
        compute_seconds=cs,
        stages=stages,
    )


def pipelined_seconds(trace: CollectiveTrace, links: LinkParams, stages: int) -> float:
    """What-if cost of splitting the trace's workload into `stages` chunks.

    Unlike estimate_latency, which prices a trace exactly as it ran, this
    treats the trace as the single-shot execution of a workload and models the
    effect of chunking it: bytes stay fixed while message counts scale with the
    stage count, then the two phases overlap as in estimate_latency.
    """
    if stages < 1:
        raise ValidationError("stages must be >= 1")
    im, ib, em, eb, cs = trace.totals()
    t_intra = links.intra_alpha * im * stages + ib / links.intra_beta
    t_inter = links.inter_alpha * em * stages + eb / links.inter_beta
    return (t_intra + t_inter) / stages + (stages - 1) * max(t_intra, t_inter) / stages + cs


def optimal_stages(trace: CollectiveTrace, links: LinkParams, max_stages: int = 8):
    """(stage count, seconds) minimizing pipelined_seconds; ties go to fewer stages."""
    if max_stages < 1:
        raise ValidationError("max_stages must be >= 1")
    best_s, best_t = 1, pipelined_seconds(trace, links, 1)
    for s in range(2, max_stages + 1):
        t = pipelined_seconds(trace, links, s)
        if t < best_t:
            best_s, best_t = s, t
    return best_s, best_t
