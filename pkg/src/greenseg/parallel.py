"""Simulated data-parallel training on one machine.

Each rank owns a private replica (parameters, batch-norm buffers, optimizer
state) and runs forward/backward in its own thread.  Gradients meet at a
single reduction point that sums in rank order with float64 accumulation,
so the reduced gradient is the same on every rank and does not depend on
how the ranks are numbered (exact for the magnitudes seen in practice).
"""
from __future__ import annotations

import enum
import hashlib
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import backward, forward
from .tensor import Precision


class ReplicaDivergence(RuntimeError):
    pass


# -- all-reduce ------------------------------------------------------------

def allreduce_mean(per_rank_grads: list) -> dict:
    """Elementwise mean over ranks of name -> array maps, independent of rank order."""
    if not per_rank_grads:
        raise ValueError("no ranks")
    keys = set(per_rank_grads[0])
    for r, g in enumerate(per_rank_grads):
        if set(g) != keys:
            missing = keys ^ set(g)
            raise KeyError(f"rank {r} key set differs: {sorted(missing)}")
    out = {}
    n = len(per_rank_grads)
    for k in per_rank_grads[0]:
        ref = np.asarray(per_rank_grads[0][k])
        for r, g in enumerate(per_rank_grads):
            if np.shape(g[k]) != ref.shape:
                raise ValueError(f"rank {r} shape {np.shape(g[k])} != {ref.shape} for {k!r}")
        # sort per element, then sum in a fixed order: the result does not
        # depend on which rank contributed which value
        stack = np.sort(np.stack([np.asarray(g[k], dtype=np.float64) for g in per_rank_grads]), axis=0)
        acc = np.zeros(ref.shape, dtype=np.float64)
        for row in stack:
            acc += row
        out[k] = (acc / n).astype(ref.dtype if ref.dtype.kind == "f" else np.float32)
    return out


# -- buckets ---------------------------------------------------------------

@dataclass
class Bucket:
    names: list
    nbytes: int
    capacity_bytes: int


def bucket_gradients(param_sizes, capacity_bytes: int) -> list[Bucket]:
    """Greedy fill in reverse parameter order.

    ``param_sizes`` is an ordered list of ``(name, nbytes)``.
    """
    param_sizes = list(param_sizes)
    if param_sizes and max(s for _, s in param_sizes) > capacity_bytes:
        name, size = max(param_sizes, key=lambda t: t[1])
        raise ValueError(f"parameter {name!r} ({size} B) exceeds bucket capacity {capacity_bytes} B")
    buckets = []
    cur, cur_bytes = [], 0
    for name, size in reversed(param_sizes):
        if cur and cur_bytes + size > capacity_bytes:
            buckets.append(Bucket(cur, cur_bytes, capacity_bytes))
            cur, cur_bytes = [], 0
        cur.append(name)
        cur_bytes += size
    if cur:
        buckets.append(Bucket(cur, cur_bytes, capacity_bytes))
    return buckets


# -- PowerSGD --------------------------------------------------------------

def orthonormalize(p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Modified Gram-Schmidt on the columns; degenerate columns become zero."""
    p = np.array(p, dtype=np.float64)
    for i in range(p.shape[1]):
        for j in range(i):
            p[:, i] -= (p[:, j] @ p[:, i]) * p[:, j]
        norm = np.linalg.norm(p[:, i])
        if norm > tol:
            p[:, i] /= norm
        else:
            p[:, i] = 0.0
    return p


def as_matrix(g: np.ndarray) -> np.ndarray:
    """Fold leading dimension against the rest (n = out_channels)."""
    return np.asarray(g).reshape(g.shape[0], -1)


@dataclass
class PowerSgdState:
    rank: int = 4
    seed: int = 0
    error_feedback: bool = True
    q: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)  # (rank_index, key) -> n x m

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("PowerSGD rank must be >= 1")

    def q_for(self, key: str, n: int, m: int) -> np.ndarray:
        r = min(self.rank, n, m)
        q = self.q.get(key)
        if q is None or q.shape != (m, r):
            rng = np.random.default_rng([self.seed, zlib.crc32(key.encode())])
            q = rng.standard_normal((m, r))
            self.q[key] = q
        return q

    def error_for(self, rank_index: int, key: str, shape) -> np.ndarray:
        e = self.errors.get((rank_index, key))
        if e is None or e.shape != tuple(shape):
            e = np.zeros(shape, dtype=np.float64)
            self.errors[(rank_index, key)] = e
        return e


def powersgd_reduce(mats: list, state: PowerSgdState, key: str = "M"):
    """One power-iteration step across ranks.

    Returns ``(P, Q)`` with ``P`` orthonormal (n x r) and ``P @ Q.T`` the
    compressed mean gradient.  Error buffers and the warm-start ``Q`` are
    updated in ``state``.
    """
    n, m = mats[0].shape
    q = state.q_for(key, n, m)
    primes = []
    for i, mat in enumerate(mats):
        mp = np.asarray(mat, dtype=np.float64)
        if state.error_feedback:
            mp = mp + state.error_for(i, key, (n, m))
        primes.append(mp)
    p = sum(mp @ q for mp in primes) / len(primes)
    p = orthonormalize(p)
    q = sum(mp.T @ p for mp in primes) / len(primes)
    approx = p @ q.T
    if state.error_feedback:
        for i, mp in enumerate(primes):
            state.errors[(i, key)] = mp - approx
    state.q[key] = q
    return p, q


def powersgd_compress(M, state: PowerSgdState, key: str = "M"):
    """Single-rank compression of an n x m matrix: ``(P, Q)``."""
    return powersgd_reduce([np.asarray(M)], state, key)


def powersgd_decompress(P, Q, shape=None) -> np.ndarray:
    P, Q = np.asarray(P), np.asarray(Q)
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != Q.shape[1]:
        raise ValueError(f"factor shapes {P.shape} and {Q.shape} are incompatible")
    out = P @ Q.T
    return out.reshape(shape) if shape is not None else out


# -- 8-bit quantization ----------------------------------------------------

def quantize_tensor(g):
    g = np.asarray(g, dtype=np.float64)
    peak = float(np.abs(g).max()) if g.size else 0.0
    if peak == 0.0:
        return np.zeros(g.shape, np.int8), 0.0
    scale = peak / 127.0
    codes = np.clip(np.rint(g / scale), -127, 127).astype(np.int8)
    return codes, scale


def quantize_grads_8bit(grads: dict):
    """Per-tensor symmetric int8: ``scale = max|g|/127``, ``code = round(g/scale)``."""
    codes, scales = {}, {}
    for k, g in grads.items():
        codes[k], scales[k] = quantize_tensor(g)
    return codes, scales


def dequantize_grads(codes: dict, scales: dict, dtype=np.float32) -> dict:
    return {k: (c.astype(np.float64) * scales[k]).astype(dtype) for k, c in codes.items()}


# -- DDP -------------------------------------------------------------------

class CompressorKind(str, enum.Enum):
    NONE = "none"
    POWERSGD = "powersgd"
    INT8 = "int8"


@dataclass(frozen=True)
class Compressor:
    kind: CompressorKind = CompressorKind.NONE
    rank: int = 4

    @classmethod
    def parse(cls, text) -> "Compressor":
        if isinstance(text, Compressor):
            return text
        text = str(text).strip().lower()
        if text.startswith("powersgd"):
            r = text[len("powersgd"):].strip("():= ")
            return cls(CompressorKind.POWERSGD, int(r) if r else 4)
        return cls(CompressorKind(text))


NONE = Compressor()


@dataclass
class Replica:
    params: dict
    buffers: dict
    optimizer: object


@dataclass
class StepMetrics:
    loss: float
    bytes_raw: int
    bytes_sent: int
    seconds: float
    world_size: int

    def to_dict(self):
        return dict(loss=self.loss, bytes_raw=self.bytes_raw, bytes_sent=self.bytes_sent,
                    step_seconds=self.seconds, world_size=self.world_size)


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class RankGroup:
    """``world_size`` identical replicas of a model plus the reduction channel."""

    def __init__(self, model, world_size: int, make_optimizer, loss: str = "dice",
                 precision=Precision.F32, powersgd_seed: int = 0, bucket_cap_bytes: int | None = None,
                 find_unused_parameters: bool = False, broadcast_buffers: bool = True, verify: bool = True):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        self.model = model
        self.world_size = world_size
        self.graph = model.training_graph(loss)
        self.precision = Precision(precision)
        self.replicas = []
        for _ in range(world_size):
            params = {k: v.copy() for k, v in model.params.items()}
            self.replicas.append(Replica(params, {k: v.copy() for k, v in model.buffers.items()},
                                         make_optimizer(params)))
        self.powersgd = PowerSgdState(seed=powersgd_seed)
        self.bucket_cap_bytes = bucket_cap_bytes
        self.find_unused_parameters = find_unused_parameters
        self.broadcast_buffers = broadcast_buffers
        self.verify = verify
        self._pool = ThreadPoolExecutor(max_workers=world_size) if world_size > 1 else None

    @property
    def params(self) -> dict:
        return self.replicas[0].params

    @property
    def buffers(self) -> dict:
        return self.replicas[0].buffers

    def digests(self) -> list[str]:
        return [params_digest(r.params) for r in self.replicas]

    def set_lr(self, lr: float):
        for r in self.replicas:
            r.optimizer.lr = lr

    def sync_to_model(self):
        """Copy rank-0 parameters and buffers back into the wrapped model."""
        self.model.params.clear()
        self.model.params.update({k: v.copy() for k, v in self.params.items()})
        self.model.buffers.clear()
        self.model.buffers.update({k: v.copy() for k, v in self.buffers.items()})

    def close(self):
        if self._pool:
            self._pool.shutdown()
            self._pool = None

    def _local(self, rank: int, images, masks):
        rep = self.replicas[rank]
        tr = forward(self.graph, {"image": images, "mask": masks}, rep.params, rep.buffers,
                     training=True, precision=self.precision)
        grads = backward(tr, "loss")
        if self.find_unused_parameters:
            used = _reachable_params(self.graph, "loss")
            for k in grads:
                if k not in used:
                    grads[k] = np.zeros_like(grads[k])
        return float(tr.values["loss"]), grads


def _reachable_params(graph, loss_node):
    needed = {loss_node}
    used = set()
    for n in reversed(graph.nodes):
        if n.name in needed:
            needed.update(n.inputs)
            used.update(n.params)
    return used


def _reduce(group: RankGroup, grads: list, compressor: Compressor):
    names = list(grads[0])
    raw = sum(grads[0][k].nbytes for k in names)
    kind = compressor.kind
    if kind is CompressorKind.NONE:
        if group.bucket_cap_bytes:
            out = {}
            sizes = [(k, grads[0][k].nbytes) for k in names]
            for b in bucket_gradients(sizes, group.bucket_cap_bytes):
                flat = [{"b": np.concatenate([g[k].ravel() for k in b.names])} for g in grads]
                red = allreduce_mean(flat)["b"]
                off = 0
                for k in b.names:
                    size = grads[0][k].size
                    out[k] = red[off:off + size].reshape(grads[0][k].shape)
                    off += size
            return out, raw, raw
        return allreduce_mean(grads), raw, raw
    if kind is CompressorKind.INT8:
        deq, sent = [], 0
        for g in grads:
            codes, scales = quantize_grads_8bit(g)
            deq.append(dequantize_grads(codes, scales))
        sent = sum(grads[0][k].size + 4 for k in names)
        return allreduce_mean(deq), raw, sent
    # PowerSGD: matrices compressed, vectors sent raw
    group.powersgd.rank = compressor.rank
    out, sent = {}, 0
    vectors = [k for k in names if grads[0][k].ndim < 2]
    if vectors:
        out.update(allreduce_mean([{k: g[k] for k in vectors} for g in grads]))
        sent += sum(grads[0][k].nbytes for k in vectors)
    for k in names:
        if grads[0][k].ndim < 2:
            continue
        shape = grads[0][k].shape
        mats = [as_matrix(g[k]) for g in grads]
        p, q = powersgd_reduce(mats, group.powersgd, k)
        out[k] = powersgd_decompress(p, q, shape).astype(np.float32)
        sent += (p.size + q.size) * 4
    return out, raw, sent


def ddp_train_step(group: RankGroup, shards, compressor=NONE) -> StepMetrics:
    """Local forward/backward per rank, reduce, identical optimizer step.

    ``shards`` is one ``(images, masks)`` pair per rank, all of equal size.
    """
    compressor = Compressor.parse(compressor)
    shards = list(shards)
    if len(shards) != group.world_size:
        raise ValueError(f"expected {group.world_size} shards, got {len(shards)}")
    sizes = {len(s[0]) for s in shards}
    if len(sizes) != 1:
        raise ValueError(f"shards must be equal-sized, got sizes {sorted(sizes)}")
    t0 = time.perf_counter()
    if group._pool is None:
        results = [group._local(0, *shards[0])]
    else:
        futs = [group._pool.submit(group._local, r, *shards[r]) for r in range(group.world_size)]
        results = [f.result() for f in futs]
    losses = [r[0] for r in results]
    grads = [r[1] for r in results]
    reduced, raw, sent = _reduce(group, grads, compressor)
    for rep in group.replicas:
        rep.optimizer.step(rep.params, reduced)
    if group.broadcast_buffers and group.world_size > 1:
        src = group.replicas[0].buffers
        for rep in group.replicas[1:]:
            for k, v in src.items():
                rep.buffers[k][...] = v
    if group.verify and group.world_size > 1:
        digests = group.digests()
        if len(set(digests)) != 1:
            raise ReplicaDivergence(f"replica parameters diverged: {digests}")
    return StepMetrics(float(np.mean(losses)), raw, sent, time.perf_counter() - t0, group.world_size)


def shard_batch(images, masks, world_size: int):
    """Split a batch into ``world_size`` equal shards (trailing remainder dropped)."""
    per = len(images) // world_size
    if per == 0:
        raise ValueError(f"batch of {len(images)} cannot be split across {world_size} ranks")
    return [(images[r * per:(r + 1) * per], masks[r * per:(r + 1) * per]) for r in range(world_size)]
