"""Deterministic simulator for sharded-training communication.

Every rank runs as a generator inside one process, all collectives move real
numpy buffers through an in-memory fabric, and a traffic ledger accounts for
every byte.  The collectives implement plain ring/all-to-all baselines plus
three bandwidth reducers: block-quantized weight gathers, node-local secondary
weight shards, and a two-hop quantized gradient reduce-scatter.
"""

from .errors import (
    SimError,
    ValidationError,
    ConfigError,
    IntegrityError,
    PlanError,
    ProtocolError,
)
from .quantizer import (
    FlatTensor,
    QuantConfig,
    QuantizedTensor,
    QuantErrorStats,
    quantize,
    dequantize,
    fused_dequant_reduce_quant,
    quant_error_stats,
)
from .topology import (
    INTRA,
    INTER,
    ClusterTopology,
    TrafficLedger,
    LinkParams,
    CollectiveTrace,
    LatencyEstimate,
    estimate_latency,
    pipelined_seconds,
    optimal_stages,
    normalized_cross_node_volume,
)
from .simnet import Send, Phase, run_phase, run_collective
from .collectives import (
    BlockCodec,
    PassthroughCodec,
    GatherResult,
    ReduceResult,
    ReorderPermutation,
    all_gather_baseline,
    all_gather_qwz,
    reduce_scatter_ring,
    reduce_scatter_ring_naive_quant,
    reorder_mapping,
    qgz_1hop,
    qgz_2hop,
)
from .partitioner import (
    PartitionSpec,
    build_partitions,
    MEMORY_MODES,
    memory_per_device,
    memory_report,
)
from .engine import (
    ToyTaskConfig,
    ZeroConfig,
    StepRecord,
    TrainRecord,
    TrainingEngine,
    train_toy,
    step_volumes,
    gradient_check,
)

__version__ = "0.1.0"

__all__ = [
    "SimError",
    "ValidationError",
    "ConfigError",
    "IntegrityError",
    "PlanError",
    "ProtocolError",
    "FlatTensor",
    "QuantConfig",
    "QuantizedTensor",
    "QuantErrorStats",
    "quantize",
    "dequantize",
    "fused_dequant_reduce_quant",
    "quant_error_stats",
    "INTRA",
    "INTER",
    "ClusterTopology",
    "TrafficLedger",
    "LinkParams",
    "CollectiveTrace",
    "LatencyEstimate",
    "estimate_latency",
    "pipelined_seconds",
    "optimal_stages",
    "normalized_cross_node_volume",
    "Send",
    "Phase",
    "run_phase",
    "run_collective",
    "BlockCodec",
    "PassthroughCodec",
    "GatherResult",
    "ReduceResult",
    "ReorderPermutation",
    "all_gather_baseline",
    "all_gather_qwz",
    "reduce_scatter_ring",
    "reduce_scatter_ring_naive_quant",
    "reorder_mapping",
    "qgz_1hop",
    "qgz_2hop",
    "PartitionSpec",
    "build_partitions",
    "MEMORY_MODES",
    "memory_per_device",
    "memory_report",
    "ToyTaskConfig",
    "ZeroConfig",
    "StepRecord",
    "TrainRecord",
    "TrainingEngine",
    "train_toy",
    "step_volumes",
    "gradient_check",
    "__version__",
]
