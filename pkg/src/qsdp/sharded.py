"""Deterministic multi-worker simulation of sharded training with quantized
collectives.

Every worker permanently owns a contiguous 1/P slice of each layer.  A step
runs a forward pass (quantize own shard, all-gather, compute, discard), a
backward pass (gather again, compute gradients), and one reduce-scatter per
layer that leaves each worker with the average of all workers' dequantized
gradient contributions restricted to its shard.  Dense layers are quantized;
bias and normalization layers always travel at full precision.

Randomness is keyed per (step, layer, phase, source worker, bucket start), so
any worker count replays exactly the same quantization draws as the
single-process reference implementation, and the two must agree bit for bit.

Communication accounting is peer-to-peer: a shard's encoded message crossing
to P-1 other workers is counted P-1 times, and transfers that stay on a
worker cost nothing.  Full-precision transfers carry no framing and are
charged at 32 bits per element (by ledger convention; the math stays
float64).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .quantize import dequantize, quantize_bucket
from .wire import decode, encode

__all__ = [
    "LayerSpec",
    "QuantConfig",
    "NetworkModel",
    "Transfer",
    "LedgerEntry",
    "CommLedger",
    "ShardedModel",
    "shard_bounds",
    "shard_parameters",
    "simulate_step_time",
    "bucket_rng",
    "mlp_layer_specs",
    "init_mlp_params",
    "make_batch",
    "ShardedMLP",
    "ReferenceMLP",
    "PHASE_W_FWD",
    "PHASE_W_BWD",
    "PHASE_GRAD",
]

PHASE_W_FWD = 0
PHASE_W_BWD = 1
PHASE_GRAD = 2


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str           # dense | bias | norm
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in ("dense", "bias", "norm"):
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class QuantConfig:
    quantize_weights: bool = True
    quantize_gradients: bool = True
    weight_bits: int = 8
    gradient_bits: int = 8
    bucket_size: int = 1024
    raw_bits: int = 32            # ledger width of uncompressed weight transfers
    raw_gradient_bits: int = 32   # dense-gradient ledger width when unquantized

    def __post_init__(self):
        for name in ("weight_bits", "gradient_bits"):
            if not 1 <= getattr(self, name) <= 16:
                raise ValueError(f"{name} must be in [1, 16]")
        if self.bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")
        if self.raw_bits % 8 or self.raw_gradient_bits % 8:
            raise ValueError("raw transfer widths must be whole bytes")


@dataclass(frozen=True)
class NetworkModel:
    """Simulated interconnect; communication may overlap with compute.

    With overlap (the default, matching prefetching sharded runtimes) a step
    costs latency * collectives + max(compute, transport).  overlap=False
    gives the strictly serial sum of the three terms.
    """

    bandwidth_bps: float
    latency_s: float = 0.0
    compute_time_s: float = 0.0
    overlap: bool = True

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class Transfer:
    collective: str     # allgather | reducescatter
    layer: str
    bit_width: int
    nbytes: int         # bytes of one message copy
    copies: int         # boundary crossings for this message
    payload_bits: int   # code/value bits, framing excluded

    @property
    def total_bits(self) -> int:
        return self.nbytes * 8 * self.copies


@dataclass
class LedgerEntry:
    step: int
    allgather_bits: int = 0
    reducescatter_bits: int = 0
    allgather_payload_bits: int = 0
    reducescatter_payload_bits: int = 0
    allgather_events: int = 0
    reducescatter_events: int = 0
    transfers: list[Transfer] = field(default_factory=list)
    step_time_s: float = 0.0

    @property
    def total_bits(self) -> int:
        return self.allgather_bits + self.reducescatter_bits

    @property
    def collective_count(self) -> int:
        return self.allgather_events + self.reducescatter_events

    def record(self, transfer: Transfer) -> None:
        self.transfers.append(transfer)
        bits = transfer.total_bits
        payload = transfer.payload_bits * transfer.copies
        if transfer.collective == "allgather":
            self.allgather_bits += bits
            self.allgather_payload_bits += payload
        else:
            self.reducescatter_bits += bits
            self.reducescatter_payload_bits += payload


class CommLedger:
    """Per-step communication record with CSV export."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def append(self, entry: LedgerEntry) -> None:
        self.entries.append(entry)

    def to_csv(self, path, no_timestamp: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            if not no_timestamp:
                import datetime

                fh.write(f"# generated {datetime.datetime.now().isoformat()}\n")
            w = csv.writer(fh)
            w.writerow(["step", "allgather_bits", "reducescatter_bits", "step_time_s"])
            for e in self.entries:
                w.writerow(
                    [e.step, e.allgather_bits, e.reducescatter_bits, repr(e.step_time_s)]
                )


def simulate_step_time(entry: LedgerEntry, network: NetworkModel) -> float:
    """Deterministic step time for one ledger entry under a network model."""
    transport = entry.total_bits / network.bandwidth_bps
    overhead = network.latency_s * entry.collective_count
    if network.overlap:
        return overhead + max(network.compute_time_s, transport)
    return network.compute_time_s + transport + overhead


def shard_bounds(size: int, P: int) -> list[tuple[int, int]]:
    """Contiguous partition; the remainder goes to the last worker."""
    if P < 1:
        raise ValueError("P must be >= 1")
    base = size // P
    bounds = [(p * base, (p + 1) * base) for p in range(P - 1)]
    bounds.append(((P - 1) * base, size))
    return bounds


@dataclass
class ShardedModel:
    layers: list[LayerSpec]
    P: int
    bounds: dict[str, list[tuple[int, int]]]
    shards: dict[str, list[np.ndarray]]

    def full(self, name: str) -> np.ndarray:
        return np.concatenate(self.shards[name])


def shard_parameters(
    params: dict[str, np.ndarray], layers: list[LayerSpec], P: int
) -> ShardedModel:
    """Assign each worker its contiguous slice of every layer."""
    bounds, shards = {}, {}
    for layer in layers:
        flat = np.asarray(params[layer.name], dtype=float).ravel()
        if flat.size != layer.size:
            raise ValueError(f"layer {layer.name}: expected {layer.size} parameters")
        if P > flat.size:
            warnings.warn(
                f"layer {layer.name}: P={P} exceeds size {flat.size}; "
                "kept whole on one worker",
                RuntimeWarning,
            )
        b = shard_bounds(flat.size, P)
        bounds[layer.name] = b
        shards[layer.name] = [flat[s:e].copy() for s, e in b]
    return ShardedModel(layers=list(layers), P=P, bounds=bounds, shards=shards)


def bucket_rng(
    root_seed: int, step: int, layer_idx: int, phase: int, worker: int, start: int
) -> np.random.Generator:
    """Deterministic generator for one quantization event."""
    ss = np.random.SeedSequence((root_seed, step, layer_idx, phase, worker, start))
    return np.random.default_rng(ss)


def _segment_blocks(seg, global_start, bucket_size, bits, inner, rng_for_start):
    blocks = []
    for j in range(0, seg.size, bucket_size):
        rng = rng_for_start(global_start + j)
        blocks.append(quantize_bucket(seg[j : j + bucket_size], bits, inner, rng))
    return blocks


# ---------------------------------------------------------------------------
# Toy MLP: alternating dense and bias layers, tanh between pairs.
# ---------------------------------------------------------------------------


def mlp_layer_specs(widths: list[int]) -> list[LayerSpec]:
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    specs = []
    for i in range(len(widths) - 1):
        specs.append(LayerSpec(f"dense{i}", "dense", (widths[i], widths[i + 1])))
        specs.append(LayerSpec(f"bias{i}", "bias", (widths[i + 1],)))
    return specs


def init_mlp_params(widths: list[int], param_seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((param_seed, 0)))
    params = {}
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        params[f"dense{i}"] = rng.standard_normal(fan_in * widths[i + 1]) / math.sqrt(
            fan_in
        )
        params[f"bias{i}"] = 0.01 * rng.standard_normal(widths[i + 1])
    return params


def make_batch(
    widths: list[int], batch: int, data_seed: int, step: int
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic regression batch from a fixed random linear teacher."""
    teacher_rng = np.random.default_rng(np.random.SeedSequence((data_seed, 1)))
    w_teacher = teacher_rng.standard_normal((widths[0], widths[-1])) / math.sqrt(
        widths[0]
    )
    batch_rng = np.random.default_rng(np.random.SeedSequence((data_seed, 2, step)))
    x = batch_rng.standard_normal((batch, widths[0]))
    return x, x @ w_teacher


@dataclass(frozen=True)
class SimConfig:
    widths: tuple[int, ...]
    P: int
    batch: int
    lr: float
    quant: QuantConfig
    root_seed: int = 0
    param_seed: int = 0
    data_seed: int = 0
    fixed_batch: bool = False   # reuse the step-0 batch (full-batch descent)

    def __post_init__(self):
        if self.batch % self.P != 0:
            raise ValueError("batch must divide evenly across workers")


class ShardedMLP:
    """The P-worker protocol simulation with exact transport accounting."""

    def __init__(self, config: SimConfig, network: NetworkModel | None = None):
        self.cfg = config
        self.quant = config.quant
        self.layers = mlp_layer_specs(list(config.widths))
        params = init_mlp_params(list(config.widths), config.param_seed)
        self.model = shard_parameters(params, self.layers, config.P)
        self.network = network
        self.ledger = CommLedger()
        self._pairs = len(config.widths) - 1

    # -- transport -----------------------------------------------------

    def _gather(self, step: int, layer_idx: int, phase: int, entry: LedgerEntry):
        """All-gather one layer; returns the assembled full tensor."""
        layer = self.layers[layer_idx]
        P = self.cfg.P
        quantized = layer.kind == "dense" and self.quant.quantize_weights
        parts = []
        for q, (s, e) in enumerate(self.model.bounds[layer.name]):
            seg = self.model.shards[layer.name][q]
            if seg.size == 0:
                continue
            if quantized:
                blocks = _segment_blocks(
                    seg,
                    s,
                    self.quant.bucket_size,
                    self.quant.weight_bits,
                    "shift",
                    lambda start: bucket_rng(
                        self.cfg.root_seed, step, layer_idx, phase, 0, start
                    ),
                )
                wire = encode(blocks)
                received = decode(wire)  # what every peer reconstructs
                parts.append(
                    np.concatenate([dequantize(b, "shift") for b in received])
                )
                entry.record(
                    Transfer(
                        collective="allgather",
                        layer=layer.name,
                        bit_width=self.quant.weight_bits,
                        nbytes=len(wire),
                        copies=P - 1,
                        payload_bits=seg.size * self.quant.weight_bits,
                    )
                )
            else:
                width = self.quant.raw_bits if layer.kind == "dense" else 32
                parts.append(seg.copy())
                entry.record(
                    Transfer(
                        collective="allgather",
                        layer=layer.name,
                        bit_width=width,
                        nbytes=seg.size * width // 8,
                        copies=P - 1,
                        payload_bits=seg.size * width,
                    )
                )
        entry.allgather_events += 1
        return np.concatenate(parts)

    def _reduce_scatter(self, step, layer_idx, per_worker_grads, entry):
        """Average dequantized contributions per destination shard."""
        layer = self.layers[layer_idx]
        P = self.cfg.P
        quantized = layer.kind == "dense" and self.quant.quantize_gradients
        averaged = []
        for q, (s, e) in enumerate(self.model.bounds[layer.name]):
            if e == s:
                averaged.append(np.zeros(0))
                continue
            acc = np.zeros(e - s)
            for p in range(P):
                seg = per_worker_grads[p][s:e]
                if quantized:
                    blocks = _segment_blocks(
                        seg,
                        s,
                        self.quant.bucket_size,
                        self.quant.gradient_bits,
                        "uniform_stochastic",
                        lambda start: bucket_rng(
                            self.cfg.root_seed, step, layer_idx, PHASE_GRAD, p, start
                        ),
                    )
                    wire = encode(blocks)
                    vals = np.concatenate(
                        [dequantize(b, "uniform_stochastic") for b in decode(wire)]
                    )
                    if p != q:
                        entry.record(
                            Transfer(
                                collective="reducescatter",
                                layer=layer.name,
                                bit_width=self.quant.gradient_bits,
                                nbytes=len(wire),
                                copies=1,
                                payload_bits=seg.size * self.quant.gradient_bits,
                            )
                        )
                else:
                    width = (
                        self.quant.raw_gradient_bits if layer.kind == "dense" else 32
                    )
                    vals = seg
                    if p != q:
                        entry.record(
                            Transfer(
                                collective="reducescatter",
                                layer=layer.name,
                                bit_width=width,
                                nbytes=seg.size * width // 8,
                                copies=1,
                                payload_bits=seg.size * width,
                            )
                        )
                acc = acc + vals
            averaged.append(acc / P)
        entry.reducescatter_events += 1
        return averaged

    # -- per-layer building blocks --------------------------------------

    def forward_layer(self, step, pair_idx, inputs, entry):
        """Gather one dense+bias pair and compute every worker's output."""
        w_full = self._gather(step, 2 * pair_idx, PHASE_W_FWD, entry)
        b_full = self._gather(step, 2 * pair_idx + 1, PHASE_W_FWD, entry)
        w = w_full.reshape(self.layers[2 * pair_idx].shape)
        zs = [h @ w + b_full for h in inputs]
        last = pair_idx == self._pairs - 1
        return [z if last else np.tanh(z) for z in zs]

    def backward_layer(self, step, pair_idx, inputs, outputs, dzs, entry):
        """Re-gather the pair, sync gradients, update shards.

        Returns the dz for the previous pair (None at the input).
        """
        dense_idx = 2 * pair_idx
        w_full = self._gather(step, dense_idx, PHASE_W_BWD, entry)
        self._gather(step, dense_idx + 1, PHASE_W_BWD, entry)  # bias, fp32
        w = w_full.reshape(self.layers[dense_idx].shape)
        P = self.cfg.P
        dw = [(inputs[p].T @ dzs[p]).ravel() for p in range(P)]
        db = [dzs[p].sum(axis=0) for p in range(P)]
        dz_prev = None
        if pair_idx > 0:
            dz_prev = [
                (dzs[p] @ w.T) * (1.0 - outputs[p] ** 2) for p in range(P)
            ]
        avg_w = self._reduce_scatter(step, dense_idx, dw, entry)
        avg_b = self._reduce_scatter(step, dense_idx + 1, db, entry)
        lr = self.cfg.lr
        for q in range(P):
            self.model.shards[self.layers[dense_idx].name][q] -= lr * avg_w[q]
            self.model.shards[self.layers[dense_idx + 1].name][q] -= lr * avg_b[q]
        return dz_prev

    # -- one full step ---------------------------------------------------

    def train_step(self, step: int) -> tuple[float, LedgerEntry]:
        cfg = self.cfg
        entry = LedgerEntry(step=step)
        data_step = 0 if cfg.fixed_batch else step
        x, y = make_batch(list(cfg.widths), cfg.batch, cfg.data_seed, data_step)
        rows = cfg.batch // cfg.P
        xs = [x[p * rows : (p + 1) * rows] for p in range(cfg.P)]
        ys = [y[p * rows : (p + 1) * rows] for p in range(cfg.P)]

        inputs, outputs = [], []  # per pair: list over workers
        hs = xs
        for i in range(self._pairs):
            inputs.append(hs)
            outs = self.forward_layer(step, i, hs, entry)
            outputs.append(outs)
            hs = outs

        losses = [
            float(((hs[p] - ys[p]) ** 2).sum() / (2 * rows)) for p in range(cfg.P)
        ]
        loss = float(np.mean(losses))
        dzs = [(hs[p] - ys[p]) / rows for p in range(cfg.P)]
        for i in range(self._pairs - 1, -1, -1):
            dzs = self.backward_layer(step, i, inputs[i], outputs[i - 1] if i else None, dzs, entry)
            if i and dzs is None:
                raise RuntimeError("missing upstream gradient")

        if self.network is not None:
            entry.step_time_s = simulate_step_time(entry, self.network)
        self.ledger.append(entry)
        return loss, entry

    def run(self, steps: int) -> list[float]:
        return [self.train_step(t)[0] for t in range(steps)]

    def full_params(self) -> dict[str, np.ndarray]:
        return {layer.name: self.model.full(layer.name) for layer in self.layers}


class ReferenceMLP:
    """Single-process execution of the same quantized iteration.

    Holds full tensors, replays the identical per-(step, layer, phase,
    worker, bucket) quantization draws, and performs no transport.  Used as
    the bit-exact comparison target for the sharded simulation.
    """

    def __init__(self, config: SimConfig):
        self.cfg = config
        self.quant = config.quant
        self.layers = mlp_layer_specs(list(config.widths))
        self.params = {
            k: np.asarray(v, dtype=float).copy()
            for k, v in init_mlp_params(list(config.widths), config.param_seed).items()
        }
        self._pairs = len(config.widths) - 1

    def _quantized_view(self, step, layer_idx, phase):
        layer = self.layers[layer_idx]
        flat = self.params[layer.name]
        if not (layer.kind == "dense" and self.quant.quantize_weights):
            return flat.copy()
        parts = []
        for s, e in shard_bounds(flat.size, self.cfg.P):
            if e == s:
                continue
            blocks = _segment_blocks(
                flat[s:e],
                s,
                self.quant.bucket_size,
                self.quant.weight_bits,
                "shift",
                lambda start: bucket_rng(
                    self.cfg.root_seed, step, layer_idx, phase, 0, start
                ),
            )
            parts.append(np.concatenate([dequantize(b, "shift") for b in blocks]))
        return np.concatenate(parts)

    def _averaged_gradient(self, step, layer_idx, per_worker_grads):
        layer = self.layers[layer_idx]
        P = self.cfg.P
        quantized = layer.kind == "dense" and self.quant.quantize_gradients
        segments = []
        for q, (s, e) in enumerate(shard_bounds(layer.size, P)):
            if e == s:
                segments.append(np.zeros(0))
                continue
            acc = np.zeros(e - s)
            for p in range(P):
                seg = per_worker_grads[p][s:e]
                if quantized:
                    blocks = _segment_blocks(
                        seg,
                        s,
                        self.quant.bucket_size,
                        self.quant.gradient_bits,
                        "uniform_stochastic",
                        lambda start: bucket_rng(
                            self.cfg.root_seed, step, layer_idx, PHASE_GRAD, p, start
                        ),
                    )
                    vals = np.concatenate(
                        [dequantize(b, "uniform_stochastic") for b in blocks]
                    )
                else:
                    vals = seg
                acc = acc + vals
            segments.append(acc / P)
        return np.concatenate(segments)

    def train_step(self, step: int) -> float:
        cfg = self.cfg
        data_step = 0 if cfg.fixed_batch else step
        x, y = make_batch(list(cfg.widths), cfg.batch, cfg.data_seed, data_step)
        rows = cfg.batch // cfg.P
        xs = [x[p * rows : (p + 1) * rows] for p in range(cfg.P)]
        ys = [y[p * rows : (p + 1) * rows] for p in range(cfg.P)]

        inputs, outputs = [], []
        hs = xs
        for i in range(self._pairs):
            w = self._quantized_view(step, 2 * i, PHASE_W_FWD).reshape(
                self.layers[2 * i].shape
            )
            b = self._quantized_view(step, 2 * i + 1, PHASE_W_FWD)
            inputs.append(hs)
            zs = [h @ w + b for h in hs]
            outs = [z if i == self._pairs - 1 else np.tanh(z) for z in zs]
            outputs.append(outs)
            hs = outs

        losses = [
            float(((hs[p] - ys[p]) ** 2).sum() / (2 * rows)) for p in range(cfg.P)
        ]
        dzs = [(hs[p] - ys[p]) / rows for p in range(cfg.P)]
        for i in range(self._pairs - 1, -1, -1):
            w = self._quantized_view(step, 2 * i, PHASE_W_BWD).reshape(
                self.layers[2 * i].shape
            )
            dw = [(inputs[i][p].T @ dzs[p]).ravel() for p in range(cfg.P)]
            db = [dzs[p].sum(axis=0) for p in range(cfg.P)]
            new_dzs = None
            if i > 0:
                new_dzs = [
                    (dzs[p] @ w.T) * (1.0 - outputs[i - 1][p] ** 2)
                    for p in range(cfg.P)
                ]
            self.params[f"dense{i}"] -= cfg.lr * self._averaged_gradient(
                step, 2 * i, dw
            )
            self.params[f"bias{i}"] -= cfg.lr * self._averaged_gradient(
                step, 2 * i + 1, db
            )
            dzs = new_dzs
        return float(np.mean(losses))

    def run(self, steps: int) -> list[float]:
        return [self.train_step(t) for t in range(steps)]
