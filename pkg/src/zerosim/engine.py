"""Toy data-parallel training engine driving the simulated collectives.

The engine trains a small MLP on a teacher-student regression task with the
exact communication pattern of fully sharded training: gather fp16 params,
forward, re-gather, backward, reduce-scatter fp16 grads, then an Adam update
on the float64 masters of each rank's own shard.  Masters, moments and all
per-rank math live in one process, but every tensor that would cross a device
boundary goes through the simulated collectives and is rounded to fp16 at the
boundary, so quantization switches change training exactly the way they
change the wire.

Adam runs vectorized over the full flat vector.  It is elementwise, and the
reduce-scattered gradient shards are reassembled contiguously first, so this
is identical to every rank updating its own shard.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .collectives import (
    BlockCodec,
    all_gather_baseline,
    all_gather_qwz,
    qgz_2hop,
    reduce_scatter_ring,
)
from .errors import ConfigError, ValidationError
from .partitioner import build_partitions
from .quantizer import FlatTensor, QuantConfig
from .topology import (
    ClusterTopology,
    LinkParams,
    TrafficLedger,
    estimate_latency,
    normalized_cross_node_volume,
)

FWD_GATHER = "fwd_allgather"
BWD_GATHER = "bwd_allgather"
GRAD_REDUCE = "reduce_scatter"


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class ToyTaskConfig:
    """Teacher-student regression: noisy outputs of a frozen random MLP.

    Targets sit at a constant offset from zero and the student's output bias
    starts there (the usual init-to-target-mean trick).  Those few large bias
    entries make the flat parameter vector magnitude-heterogeneous, which is
    exactly the regime where per-block quantization scales matter.
    """

    in_dim: int = 16
    hidden: tuple = (64, 64, 64)
    out_dim: int = 8
    noise_sigma: float = 0.3
    output_offset: float = 4.0
    # ratio of the largest to the smallest input feature scale; features are
    # geomspaced across it and power-normalized so activations keep unit
    # variance.  1.0 leaves inputs untouched.  Larger ratios spread first
    # layer gradient magnitudes, the regime separating block scales from
    # whole-tensor scales.
    input_scale_range: float = 1.0
    eval_samples: int = 512

    def layer_dims(self):
        return [self.in_dim, *self.hidden, self.out_dim]


@dataclass(frozen=True)
class ZeroConfig:
    """Cluster shape, step schedule and the three communication switches."""

    nodes: int = 2
    gpus_per_node: int = 2
    steps: int = 500
    batch_per_rank: int = 8
    lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    quantized_weight_gather: bool = False
    hierarchical_secondary_gather: bool = False
    quantized_grad_reduce: bool = False
    weight_quant: QuantConfig = QuantConfig(bit_width=8, block_size=2048)
    grad_quant: QuantConfig = QuantConfig(bit_width=4, block_size=512)
    grad_intra_quant: QuantConfig | None = None  # defaults to grad_quant
    grad_stages: int = 1
    # fraction of steps whose reduce-scatter runs quantized, interleaved
    # evenly across the run (1.0 every step, 0.5 every other step, 0 never)
    grad_quant_fraction: float = 1.0
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ValidationError("cluster must have at least one gpu on one node")
        if self.steps < 1 or self.batch_per_rank < 1:
            raise ValidationError("steps and batch_per_rank must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not 0.0 <= self.grad_quant_fraction <= 1.0:
            raise ValidationError("grad_quant_fraction must be in [0, 1]")
        if self.grad_stages < 1:
            raise ValidationError("grad_stages must be >= 1")


@dataclass
class StepRecord:
    step: int
    loss: float
    fwd_gather_volume: float
    bwd_gather_volume: float
    reduce_volume: float
    est_latency_s: float
    quantized_weights: bool
    secondary_gather: bool
    quantized_grads: bool


@dataclass
class TrainRecord:
    steps: list = field(default_factory=list)  # StepRecord
    final_loss: float = math.nan
    initial_loss: float = math.nan
    diverged: bool = False
    m_params: int = 0
    padded_params: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "fwd_gather_volume", "bwd_gather_volume",
                    "reduce_volume", "est_latency_s", "quantized_weights",
                    "secondary_gather", "quantized_grads"])
        for r in self.steps:
            w.writerow([r.step, repr(r.loss), repr(r.fwd_gather_volume),
                        repr(r.bwd_gather_volume), repr(r.reduce_volume),
                        repr(r.est_latency_s), int(r.quantized_weights),
                        int(r.secondary_gather), int(r.quantized_grads)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# MLP on a flat parameter vector


def param_count(dims) -> int:
    return sum((d_in + 1) * d_out for d_in, d_out in zip(dims, dims[1:]))


def unflatten(params: np.ndarray, dims):
    """Views (W, b) per layer over one flat vector; W is (fan_in, fan_out)."""
    layers = []
    off = 0
    for d_in, d_out in zip(dims, dims[1:]):
        w = params[off:off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = params[off:off + d_out]
        off += d_out
        layers.append((w, b))
    return layers


def init_params(dims, rng, scale=1.0, output_bias=0.0) -> np.ndarray:
    parts = []
    last = len(dims) - 2
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        parts.append(rng.normal(size=d_in * d_out) * (scale / math.sqrt(d_in)))
        parts.append(np.full(d_out, output_bias if i == last else 0.0))
    return np.concatenate(parts)


def mlp_forward(params: np.ndarray, x: np.ndarray, dims):
    """Returns (output, activations); tanh on every layer but the last."""
    layers = unflatten(params, dims)
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = z if i == len(layers) - 1 else np.tanh(z)
        acts.append(h)
    return h, acts


def mlp_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray, dims,
                      denom: int | None = None):
    """Squared-error loss sum/denom and its gradient as one flat vector.

    loss = sum over samples of 0.5 * ||out - y||^2, divided by denom (the
    global batch size when several ranks each hold a slice of the batch, so
    that summing per-rank gradients yields the global mean gradient).
    """
    if denom is None:
        denom = len(x)
    layers = unflatten(params, dims)
    out, acts = mlp_forward(params, x, dims)
    diff = out - y
    loss = 0.5 * float(np.sum(diff * diff)) / denom
    grad = np.zeros_like(params)
    glayers = unflatten(grad, dims)
    delta = diff / denom
    for i in reversed(range(len(layers))):
        w, _b = layers[i]
        gw, gb = glayers[i]
        gw += acts[i].T @ delta
        gb += delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] * acts[i])
    return loss, grad


def gradient_check(seed=0, rel_tol=1e-4) -> float:
    """Central-difference check of the analytic gradient on a tiny MLP."""
    rng = np.random.default_rng(seed)
    dims = [4, 5, 3]
    params = init_params(dims, rng)
    x = rng.normal(size=(2, 4))
    y = rng.normal(size=(2, 3))
    _, grad = mlp_loss_and_grad(params, x, y, dims)
    eps = 1e-6
    numeric = np.zeros_like(grad)
    for i in range(len(params)):
        bump = np.zeros_like(params)
        bump[i] = eps
        lp, _ = mlp_loss_and_grad(params + bump, x, y, dims)
        lm, _ = mlp_loss_and_grad(params - bump, x, y, dims)
        numeric[i] = (lp - lm) / (2 * eps)
    denom = np.maximum(np.abs(numeric), 1e-8)
    max_rel = float(np.max(np.abs(grad - numeric) / denom))
    if max_rel > rel_tol:
        raise ValidationError(f"gradient check failed: max relative error {max_rel}")
    return max_rel


def half_round(x: np.ndarray) -> np.ndarray:
    """Round to the nearest fp16 value, carried in float64."""
    with np.errstate(over="ignore"):
        return x.astype(np.float16).astype(np.float64)


# ---------------------------------------------------------------------------
# engine


class TrainingEngine:
    """One training run: simulated cluster, toy task, per-step records."""

    def __init__(self, task: ToyTaskConfig = ToyTaskConfig(), cfg: ZeroConfig = ZeroConfig()):
        self.task = task
        self.cfg = cfg
        self.topo = ClusterTopology(nodes=cfg.nodes, gpus_per_node=cfg.gpus_per_node)
        self.world = self.topo.world
        self.dims = task.layer_dims()
        self.m_params = param_count(self.dims)
        if task.input_scale_range < 1.0:
            raise ValidationError("input_scale_range must be >= 1")
        if cfg.quantized_grad_reduce and cfg.grad_quant.mode != "blocked":
            raise ConfigError(
                "the gradient reduce codec must use blocked mode so hop-one "
                "messages can be sliced; block_size equal to the slice length "
                "gives one scale per transmitted tensor")
        scales = np.geomspace(1.0, task.input_scale_range, task.in_dim)
        self.input_scales = scales * np.sqrt(task.in_dim / np.sum(scales * scales))

        # pad so primary shards are equal and the two-hop reducer's slices are
        # block-aligned for any of this run's codecs
        align = self.world * cfg.grad_stages * max(
            cfg.grad_quant.block_size,
            (cfg.grad_intra_quant or cfg.grad_quant).block_size,
        )
        self.padded = math.ceil(self.m_params / align) * align
        self.spec = build_partitions(self.padded, self.topo)

        seqs = np.random.SeedSequence(cfg.seed).spawn(4)
        teacher_rng, init_rng, self.data_rng, eval_rng = map(np.random.default_rng, seqs)
        self.teacher = init_params(self.dims, teacher_rng, scale=1.5)
        self.master = np.zeros(self.padded, dtype=np.float64)
        self.master[:self.m_params] = init_params(self.dims, init_rng,
                                                  output_bias=task.output_offset)
        self.adam_m = np.zeros(self.padded)
        self.adam_v = np.zeros(self.padded)
        self.adam_t = 0

        self.eval_x = eval_rng.normal(size=(task.eval_samples, task.in_dim)) * self.input_scales
        teach_out, _ = mlp_forward(self.teacher, self.eval_x, self.dims)
        self.eval_y = (teach_out + task.output_offset
                       + task.noise_sigma * eval_rng.normal(size=teach_out.shape))

        self.links = LinkParams()
        self.weight_codec = BlockCodec(cfg.weight_quant)
        self.grad_codec = BlockCodec(cfg.grad_quant)
        self.grad_intra_codec = (
            BlockCodec(cfg.grad_intra_quant) if cfg.grad_intra_quant is not None else None
        )

    # -- data ---------------------------------------------------------------

    def _batch(self):
        b_total = self.world * self.cfg.batch_per_rank
        x = self.data_rng.normal(size=(b_total, self.task.in_dim)) * self.input_scales
        out, _ = mlp_forward(self.teacher, x, self.dims)
        y = (out + self.task.output_offset
             + self.task.noise_sigma * self.data_rng.normal(size=out.shape))
        return x, y

    def eval_loss(self) -> float:
        params = half_round(self.master[:self.m_params])
        if not np.all(np.isfinite(params)):
            return math.inf
        loss, _ = mlp_loss_and_grad(params, self.eval_x, self.eval_y, self.dims)
        return loss

    # -- one step -----------------------------------------------------------

    def _grad_reduce_quantized(self, step_index: int) -> bool:
        if not self.cfg.quantized_grad_reduce:
            return False
        f = self.cfg.grad_quant_fraction
        return math.floor((step_index + 1) * f) - math.floor(step_index * f) == 1

    def run_step(self, step_index: int) -> StepRecord:
        cfg = self.cfg
        ledger = TrafficLedger()
        traces = []  # (trace, pipeline stages)

        if not np.all(np.isfinite(self.master)):
            raise ValidationError("masters are non-finite; training diverged")
        shards16 = [
            FlatTensor(half_round(self.master[self.spec.primary_slice(r)]))
            for r in range(self.world)
        ]

        # gather weights for the forward pass
        if cfg.quantized_weight_gather:
            res = all_gather_qwz(shards16, self.weight_codec, self.topo, ledger,
                                 label=FWD_GATHER, valid_elems=self.m_params)
        else:
            res = all_gather_baseline(shards16, self.topo, ledger,
                                      label=FWD_GATHER, valid_elems=self.m_params)
        traces.append((res.trace, 1))
        # gathered copies are identical on every rank; devices store them fp16
        consumed_fwd = half_round(res.gathered[0].values)

        x, y = self._batch()
        fwd_params = consumed_fwd[:self.m_params]
        out, _ = mlp_forward(fwd_params, x, self.dims)
        diff = out - y
        loss = 0.5 * float(np.sum(diff * diff)) / len(x)

        # gather weights again for the backward pass, then free them; the
        # secondary copy holds slices of the forward-consumed values, so with
        # quantized gathers the backward still sees the round-tripped weights
        if cfg.hierarchical_secondary_gather:
            sec = [
                FlatTensor(consumed_fwd[self.spec.secondary_slice(r)])
                for r in range(self.world)
            ]
            res = all_gather_baseline(sec, self.topo, ledger, label=BWD_GATHER,
                                      groups=self.spec.groups(), valid_elems=self.m_params)
        elif cfg.quantized_weight_gather:
            res = all_gather_qwz(shards16, self.weight_codec, self.topo, ledger,
                                 label=BWD_GATHER, valid_elems=self.m_params)
        else:
            res = all_gather_baseline(shards16, self.topo, ledger,
                                      label=BWD_GATHER, valid_elems=self.m_params)
        traces.append((res.trace, 1))
        bwd_params = half_round(res.gathered[0].values)[:self.m_params]

        # per-rank backward on its slice of the global batch
        b = cfg.batch_per_rank
        grads = []
        for r in range(self.world):
            _, g = mlp_loss_and_grad(bwd_params, x[r * b:(r + 1) * b], y[r * b:(r + 1) * b],
                                     self.dims, denom=len(x))
            gpad = np.zeros(self.padded)
            gpad[:self.m_params] = g
            g16 = half_round(gpad)
            if not np.all(np.isfinite(g16)):
                raise ValidationError("gradients are non-finite; training diverged")
            grads.append(FlatTensor(g16))

        quant_grads = self._grad_reduce_quantized(step_index)
        if quant_grads:
            red = qgz_2hop(grads, self.grad_codec, self.topo, ledger,
                           stages=cfg.grad_stages, intra_codec=self.grad_intra_codec,
                           label=GRAD_REDUCE, valid_elems=self.m_params)
            traces.append((red.trace, cfg.grad_stages))
        else:
            red = reduce_scatter_ring(grads, self.topo, ledger,
                                      label=GRAD_REDUCE, valid_elems=self.m_params)
            traces.append((red.trace, 1))
        grad_full = np.concatenate([s.values for s in red.shards])

        # Adam on the float64 masters (elementwise, so shard-wise == full-vector)
        self.adam_t += 1
        t = self.adam_t
        self.adam_m = cfg.adam_beta1 * self.adam_m + (1 - cfg.adam_beta1) * grad_full
        self.adam_v = cfg.adam_beta2 * self.adam_v + (1 - cfg.adam_beta2) * grad_full ** 2
        m_hat = self.adam_m / (1 - cfg.adam_beta1 ** t)
        v_hat = self.adam_v / (1 - cfg.adam_beta2 ** t)
        self.master -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

        latency = sum(
            estimate_latency(tr, self.links, stages=st).total_seconds for tr, st in traces
        )
        return StepRecord(
            step=step_index,
            loss=loss,
            fwd_gather_volume=normalized_cross_node_volume(ledger, self.m_params, label=FWD_GATHER),
            bwd_gather_volume=normalized_cross_node_volume(ledger, self.m_params, label=BWD_GATHER),
            reduce_volume=normalized_cross_node_volume(ledger, self.m_params, label=GRAD_REDUCE),
            est_latency_s=latency,
            quantized_weights=cfg.quantized_weight_gather,
            secondary_gather=cfg.hierarchical_secondary_gather,
            quantized_grads=quant_grads,
        )

    # -- full runs ----------------------------------------------------------

    def train(self) -> TrainRecord:
        rec = TrainRecord(m_params=self.m_params, padded_params=self.padded)
        rec.initial_loss = self.eval_loss()
        limit = self.cfg.divergence_factor * max(rec.initial_loss, 1.0)
        for step in range(self.cfg.steps):
            try:
                sr = self.run_step(step)
            except ValidationError:
                rec.diverged = True
                break
            rec.steps.append(sr)
            if not math.isfinite(sr.loss) or sr.loss > limit:
                rec.diverged = True
                break
        rec.final_loss = self.eval_loss()
        if not math.isfinite(rec.final_loss) or rec.final_loss > limit:
            rec.diverged = True
        return rec


def train_toy(task: ToyTaskConfig = ToyTaskConfig(), cfg: ZeroConfig = ZeroConfig()) -> TrainRecord:
    return TrainingEngine(task, cfg).train()


def step_volumes(cfg: ZeroConfig, m_params: int):
    """Communication-only pass of one training step on a dummy tensor.

    Runs the three collectives with the given switches on zero-filled data of
    the real padded size and returns (ledger, per-label normalized cross-node
    volumes, traces).  No model, so it stays fast for large tensors.
    """
    topo = ClusterTopology(nodes=cfg.nodes, gpus_per_node=cfg.gpus_per_node)
    world = topo.world
    intra_q = cfg.grad_intra_quant or cfg.grad_quant
    align = world * cfg.grad_stages * max(cfg.grad_quant.block_size, intra_q.block_size)
    padded = math.ceil(m_params / align) * align
    spec = build_partitions(padded, topo)
    flat = np.zeros(padded)
    shards = [FlatTensor(flat[spec.primary_slice(r)]) for r in range(world)]
    ledger = TrafficLedger()
    traces = []

    if cfg.quantized_weight_gather:
        res = all_gather_qwz(shards, BlockCodec(cfg.weight_quant), topo, ledger,
                             label=FWD_GATHER, valid_elems=m_params)
    else:
        res = all_gather_baseline(shards, topo, ledger, label=FWD_GATHER, valid_elems=m_params)
    traces.append((res.trace, 1))

    if cfg.hierarchical_secondary_gather:
        sec = [FlatTensor(flat[spec.secondary_slice(r)]) for r in range(world)]
        res = all_gather_baseline(sec, topo, ledger, label=BWD_GATHER,
                                  groups=spec.groups(), valid_elems=m_params)
    elif cfg.quantized_weight_gather:
        res = all_gather_qwz(shards, BlockCodec(cfg.weight_quant), topo, ledger,
                             label=BWD_GATHER, valid_elems=m_params)
    else:
        res = all_gather_baseline(shards, topo, ledger, label=BWD_GATHER, valid_elems=m_params)
    traces.append((res.trace, 1))

    grads = [FlatTensor(flat) for _ in range(world)]
    if cfg.quantized_grad_reduce:
        red = qgz_2hop(grads, BlockCodec(cfg.grad_quant), topo, ledger,
                       stages=cfg.grad_stages,
                       intra_codec=BlockCodec(intra_q) if cfg.grad_intra_quant else None,
                       label=GRAD_REDUCE, valid_elems=m_params)
        traces.append((red.trace, cfg.grad_stages))
    else:
        red = reduce_scatter_ring(grads, topo, ledger, label=GRAD_REDUCE, valid_elems=m_params)
        traces.append((red.trace, 1))

    volumes = {
        label: normalized_cross_node_volume(ledger, m_params, label=label)
        for label in (FWD_GATHER, BWD_GATHER, GRAD_REDUCE)
    }
    return ledger, volumes, traces
