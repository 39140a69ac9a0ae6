"""Parameter partitioning and the per-device memory model.

Primary partitions split a flat parameter vector contiguously and as evenly
as possible across all ranks.  Secondary partitions re-shard the full vector
inside each group of consecutive ranks (a node, by default), giving every
group one complete copy: that is what lets the backward gather stay on-node
at the price of holding model_size / group_size extra fp16 elements per rank.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .errors import ValidationError
from .topology import ClusterTopology

FP16_BYTES = 2

MEMORY_MODES = ("DP", "ZeRO3", "hpZ", "MiCS")


@dataclass(frozen=True)
class PartitionSpec:
    """Primary and secondary shard ranges for one flat parameter vector."""

    total_elems: int
    world: int
    group_size: int

    def __post_init__(self):
        if self.total_elems < 0:
            raise ValidationError("total_elems must be >= 0")
        if self.world < 1:
            raise ValidationError("world must be >= 1")
        if not 1 <= self.group_size <= self.world:
            raise ValidationError("group_size must be in [1, world]")
        if self.world % self.group_size:
            raise ValidationError(
                f"group_size {self.group_size} must divide world {self.world}"
            )

    @property
    def num_groups(self) -> int:
        return self.world // self.group_size

    def _check_rank(self, rank: int):
        if not 0 <= rank < self.world:
            raise ValidationError(f"rank {rank} out of range for world {self.world}")

    @staticmethod
    def _balanced(total: int, parts: int, index: int) -> tuple[int, int]:
        base, rem = divmod(total, parts)
        start = index * base + min(index, rem)
        return start, start + base + (1 if index < rem else 0)

    def primary_range(self, rank: int) -> tuple[int, int]:
        """Contiguous balanced share of [0, total_elems) owned by this rank."""
        self._check_rank(rank)
        return self._balanced(self.total_elems, self.world, rank)

    def primary_slice(self, rank: int) -> slice:
        start, stop = self.primary_range(rank)
        return slice(start, stop)

    def group_ranks(self, rank: int) -> range:
        self._check_rank(rank)
        g = rank // self.group_size
        return range(g * self.group_size, (g + 1) * self.group_size)

    def groups(self) -> list[list[int]]:
        return [list(self.group_ranks(g * self.group_size)) for g in range(self.num_groups)]

    def secondary_range(self, rank: int) -> tuple[int, int]:
        """This rank's share of the full vector within its own group.

        Every group covers [0, total_elems) completely, so gathering the
        secondary shards of one group rebuilds the whole vector.
        """
        self._check_rank(rank)
        return self._balanced(self.total_elems, self.group_size, rank % self.group_size)

    def secondary_slice(self, rank: int) -> slice:
        start, stop = self.secondary_range(rank)
        return slice(start, stop)


def build_partitions(total_elems: int, topo: ClusterTopology, group_size=None) -> PartitionSpec:
    """Partition spec for a topology; groups default to one node each."""
    if group_size is None:
        group_size = topo.gpus_per_node
    return PartitionSpec(total_elems=total_elems, world=topo.world, group_size=group_size)


def memory_per_device(mode: str, m_params: int, world: int, group_size: int = 1,
                      k_optim: int = 12) -> float:
    """Model-state bytes held per device under one sharding mode.

    Counts fp16 params + fp16 grads (4 bytes per param) plus k_optim bytes of
    optimizer state per param (fp32 master, momentum and variance make 12):

      DP     every device holds everything: (4 + k) * M
      ZeRO3  everything sharded over all devices: (4 + k) * M / world
      hpZ    ZeRO3 plus an fp16 secondary param copy sharded inside each
             group: (4 + k) * M / world + 2 * M / group_size
      MiCS   everything sharded inside the group only: (4 + k) * M / group_size
    """
    if mode not in MEMORY_MODES:
        raise ValidationError(f"unknown memory mode {mode!r}, expected one of {MEMORY_MODES}")
    if m_params <= 0 or world < 1 or k_optim < 0:
        raise ValidationError("m_params must be positive, world >= 1, k_optim >= 0")
    if not 1 <= group_size <= world or world % group_size:
        raise ValidationError("group_size must divide world")
    full = (4 + k_optim) * m_params
    if mode == "DP":
        return float(full)
    if mode == "ZeRO3":
        return full / world
    if mode == "MiCS":
        return full / group_size
    return full / world + FP16_BYTES * m_params / group_size


def memory_report(m_params: int, world: int, group_size: int, k_optim: int = 12) -> str:
    """CSV of per-device bytes for every mode, with ratios against ZeRO3."""
    zero3 = memory_per_device("ZeRO3", m_params, world, group_size, k_optim)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "model_params", "world", "group_size", "optim_bytes_per_param",
                "bytes_per_device", "ratio_vs_zero3"])
    for mode in MEMORY_MODES:
        b = memory_per_device(mode, m_params, world, group_size, k_optim)
        w.writerow([mode, m_params, world, group_size, k_optim, repr(b), repr(b / zero3)])
    return buf.getvalue()
