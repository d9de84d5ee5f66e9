"""Data-parallel training loop: p coding workers, one reducing master.

Each iteration runs two half-steps.  In the left half every worker codes
its shard against the current pair and accumulates the left-step partial
sums; the master reduces them in ascending node order, solves the
closed-form left update, and broadcasts the new left factor.  The right
half mirrors it.  Per half-step the master receives exactly one
partial-sum message per worker and sends one single-factor broadcast per
worker, so traffic depends on (m, n1, n2, p) but never on the dataset
size.

The per-iteration objective is evaluated in closed form from the very
sums used for the update (plus the dataset energy), which costs nothing
extra at the workers; coding-time objectives come from the workers'
explicit residuals.  Cancellation limits the closed-form value's absolute
accuracy to about 1e-16 times the dataset energy, which is far below the
1e-9 relative slack the monotonicity guarantee is tested at.
"""

from __future__ import annotations

import csv
import enum
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .coding import (
    BatchCodes,
    FixedSparsity,
    SparseCode,
    omp2d_batch,
    threshold_code_batch,
)
from .data import PatchSet, shard_dataset
from .linalg import ShapeMismatch, polar_factor
from .transport import (
    BroadcastDicts,
    Disconnected,
    Envelope,
    EnvelopeKind,
    InMemoryTransport,
    MASTER,
    ShardAssign,
    stamp_byte_size,
)
from .update import (
    DictionaryPair,
    DictMode,
    PartialSums,
    Side,
    ZeroColumn,
    accumulate_left,
    accumulate_left_ortho,
    accumulate_right,
    accumulate_right_ortho,
    update_left_general,
    update_right_general,
)


class MissingNode(ValueError):
    """A reduction is missing one or more node ids."""


class DuplicateNode(ValueError):
    """Two partial sums claim the same node id."""


class PhaseMismatch(ValueError):
    """Partial sums from different half-steps were mixed."""


class WorkerFailure(RuntimeError):
    """A worker died mid-run; carries the metrics collected so far."""

    def __init__(self, node_id: int, metrics: "RunMetrics"):
        super().__init__(f"worker {node_id} failed")
        self.node_id = node_id
        self.metrics = metrics


@dataclass(frozen=True)
class TrainConfig:
    mode: DictMode
    m: int
    n1: int
    n2: int
    sparsity: int
    iterations: int
    nodes: int
    seed: int
    ridge: bool = True
    initial_pair: Optional[DictionaryPair] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.mode is DictMode.ORTHONORMAL and not (self.n1 == self.m == self.n2):
            raise ShapeMismatch("orthonormal mode requires n1 = n2 = m")
        if not 1 <= self.sparsity <= self.n1 * self.n2:
            raise ValueError(f"sparsity must be in [1, {self.n1 * self.n2}]")
        if self.initial_pair is not None:
            p = self.initial_pair
            if p.mode is not self.mode or (p.m, p.n1, p.n2) != (self.m, self.n1, self.n2):
                raise ShapeMismatch("initial pair does not match the configuration")


@dataclass
class IterationMetrics:
    iteration: int
    objective: float
    rmse: float
    code_seconds: float
    update_seconds: float
    bytes_up: int
    bytes_down: int
    # objective checkpoints inside the iteration, in execution order
    after_coding_left: float = 0.0
    after_left_update: float = 0.0
    after_coding_right: float = 0.0
    # per half-step traffic (bytes_up/_down are their sums)
    left_bytes_up: int = 0
    left_bytes_down: int = 0
    right_bytes_up: int = 0
    right_bytes_down: int = 0


CSV_COLUMNS = ("iter", "objective", "rmse", "code_seconds", "update_seconds",
               "bytes_up", "bytes_down")


@dataclass
class RunMetrics:
    samples: int
    patch_side: int
    nodes: int
    mode: str
    sparsity: int
    initial_objective: float = 0.0
    initial_rmse: float = 0.0
    setup_bytes_down: int = 0
    loop_seconds: float = 0.0
    iterations: list[IterationMetrics] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for it in self.iterations:
                writer.writerow([
                    it.iteration, f"{it.objective:.17g}", f"{it.rmse:.17g}",
                    f"{it.code_seconds:.6f}", f"{it.update_seconds:.6f}",
                    it.bytes_up, it.bytes_down,
                ])

    def summary(self) -> dict:
        return {
            "samples": self.samples,
            "patch_side": self.patch_side,
            "nodes": self.nodes,
            "mode": self.mode,
            "sparsity": self.sparsity,
            "iterations": len(self.iterations),
            "initial_objective": self.initial_objective,
            "initial_rmse": self.initial_rmse,
            "final_objective": self.iterations[-1].objective if self.iterations else None,
            "final_rmse": self.iterations[-1].rmse if self.iterations else None,
            "setup_bytes_down": self.setup_bytes_down,
            "loop_seconds": self.loop_seconds,
            "objective_checkpoints": [
                [it.after_coding_left, it.after_left_update,
                 it.after_coding_right, it.objective]
                for it in self.iterations
            ],
            "bytes_per_phase": [
                [it.left_bytes_up, it.left_bytes_down,
                 it.right_bytes_up, it.right_bytes_down]
                for it in self.iterations
            ],
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class TrainResult:
    pair: DictionaryPair
    metrics: RunMetrics
    codes: list[SparseCode]
    history: Optional[list[DictionaryPair]] = None


def init_dictionaries(config: TrainConfig, dataset: PatchSet) -> DictionaryPair:
    """Seeded initial pair: unit-normalized Gaussian columns in general
    mode, polar factors of Gaussian matrices in orthonormal mode.

    When the configuration carries an explicit initial pair it is
    returned unchanged.
    """
    if dataset.count < 1:
        raise ValueError("dataset is empty")
    if config.initial_pair is not None:
        return config.initial_pair
    rng = np.random.default_rng([config.seed, 0x5EB0])
    d1 = rng.standard_normal((config.m, config.n1))
    d2 = rng.standard_normal((config.m, config.n2))
    if config.mode is DictMode.ORTHONORMAL:
        return DictionaryPair(DictMode.ORTHONORMAL, polar_factor(d1), polar_factor(d2))
    d1 /= np.linalg.norm(d1, axis=0)
    d2 /= np.linalg.norm(d2, axis=0)
    return DictionaryPair(DictMode.GENERAL, d1, d2)


def objective(dataset, codes, pair: DictionaryPair) -> float:
    """Exact sum of squared Frobenius reconstruction residuals."""
    y = dataset.patches if isinstance(dataset, PatchSet) else np.asarray(dataset, float)
    if y.shape[1:] != (pair.m, pair.m):
        raise ShapeMismatch(f"patches are {y.shape[1:]}, dictionary expects m={pair.m}")
    if isinstance(codes, BatchCodes):
        dense_all = codes.to_dense()
        n = len(codes)
    else:
        dense_all = None
        n = len(codes)
    if n != y.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} patches vs {n} codes")
    total = 0.0
    chunk = 8192
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        if dense_all is not None:
            x = dense_all[lo:hi]
        else:
            x = np.zeros((hi - lo, pair.n1, pair.n2))
            for k in range(lo, hi):
                code = codes[k]
                if (code.n1, code.n2) != (pair.n1, pair.n2):
                    raise ShapeMismatch("code shape does not match the dictionary")
                x[k - lo, code.rows, code.cols] = code.values
        resid = y[lo:hi] - np.matmul(np.matmul(pair.left, x), pair.right.T)
        total += float(np.einsum("kij,kij->", resid, resid))
    return total


def rmse(dataset, codes, pair: DictionaryPair) -> float:
    """Per-pixel root mean squared representation error."""
    y = dataset.patches if isinstance(dataset, PatchSet) else np.asarray(dataset, float)
    return float(np.sqrt(objective(dataset, codes, pair) / y[0].size / y.shape[0]))


def reduce_partials(partials: list[PartialSums], p: int) -> PartialSums:
    """Sum per-node partials element-wise, in ascending node_id order.

    The worst-coded-sample fields of node 0 are kept on the result (they
    feed the dead-atom replacement policy).
    """
    ids = [part.node_id for part in partials]
    if len(set(ids)) != len(ids):
        raise DuplicateNode(f"duplicate node ids in {sorted(ids)}")
    if sorted(ids) != list(range(p)):
        raise MissingNode(f"expected nodes 0..{p - 1}, got {sorted(ids)}")
    ordered = sorted(partials, key=lambda part: part.node_id)
    first = ordered[0]
    if any(part.phase is not first.phase for part in ordered):
        raise PhaseMismatch("mixed left/right partial sums")
    has_gram = first.gram is not None
    for part in ordered:
        if (part.gram is not None) != has_gram or part.cross.shape != first.cross.shape:
            raise ShapeMismatch("partial sums have inconsistent shapes")
        if has_gram and part.gram.shape != first.gram.shape:
            raise ShapeMismatch("partial sums have inconsistent shapes")
    gram = np.zeros_like(first.gram) if has_gram else None
    cross = np.zeros_like(first.cross)
    count = 0
    residate = 0.0
    energy = 0.0
    for part in ordered:
        if has_gram:
            gram += part.gram
        cross += part.cross
        count += part.sample_count
        residate += part.coding_residual_sq
        energy += part.code_energy_sq
    return PartialSums(
        first.phase, MASTER, count, gram, cross,
        residate, energy, first.worst_index, first.worst_residual_sq,
    )


# ---------------------------------------------------------------------------
# worker node

class WorkerNode:
    """Shard-owning node: codes its shard and accumulates partial sums.

    Driven entirely by received envelopes; replies with partial-sum
    envelopes.  See the module docstring for the message flow.
    """

    def __init__(self, node_id: int, dataset: PatchSet, config: TrainConfig):
        self.node_id = node_id
        self.config = config
        self.dataset = dataset
        self.indices: Optional[np.ndarray] = None
        self.patches: Optional[np.ndarray] = None
        self.left: Optional[np.ndarray] = None
        self.right: Optional[np.ndarray] = None
        self.codes: Optional[BatchCodes] = None
        self.iterations_done = 0
        self.finished = False
        self.error: Optional[BaseException] = None

    def _pair(self) -> DictionaryPair:
        return DictionaryPair(self.config.mode, self.left, self.right)

    def _code_and_accumulate(self, side: Side) -> PartialSums:
        pair = self._pair()
        if self.config.mode is DictMode.ORTHONORMAL:
            codes = threshold_code_batch(self.patches, pair, self.config.sparsity)
            if side is Side.LEFT:
                part = accumulate_left_ortho(self.patches, codes, pair.right)
            else:
                part = accumulate_right_ortho(self.patches, codes, pair.left)
        else:
            codes = omp2d_batch(self.patches, pair, FixedSparsity(self.config.sparsity))
            if side is Side.LEFT:
                part = accumulate_left(self.patches, codes, pair.right)
            else:
                part = accumulate_right(self.patches, codes, pair.left)
        self.codes = codes
        part.node_id = self.node_id
        part.coding_residual_sq = float(codes.residual_sq.sum())
        part.code_energy_sq = codes.values_energy_sq
        worst = int(np.argmax(codes.residual_sq))
        part.worst_index = int(self.indices[worst])
        part.worst_residual_sq = float(codes.residual_sq[worst])
        return part

    def _reply(self, side: Side) -> Envelope:
        kind = EnvelopeKind.PARTIAL_LEFT if side is Side.LEFT else EnvelopeKind.PARTIAL_RIGHT
        return Envelope(kind, self.node_id, self._code_and_accumulate(side))

    def handle(self, env: Envelope) -> Optional[Envelope]:
        if env.kind is EnvelopeKind.SHARD_ASSIGN:
            self.indices = env.payload.indices
            self.patches = np.ascontiguousarray(self.dataset.patches[self.indices])
            return None
        if env.kind is not EnvelopeKind.BROADCAST_DICTS:
            raise ValueError(f"worker cannot handle {env.kind!r}")
        payload = env.payload
        if payload.left is not None:
            self.left = payload.left
        if payload.right is not None:
            self.right = payload.right
        both = payload.left is not None and payload.right is not None
        if both:
            return self._reply(Side.LEFT)
        if payload.left is not None:
            return self._reply(Side.RIGHT)
        # right-factor broadcast closes the iteration
        self.iterations_done += 1
        if self.iterations_done >= self.config.iterations:
            self.finished = True
            return None
        return self._reply(Side.LEFT)

    def run(self, transport) -> None:
        """Message loop for threaded execution."""
        try:
            while not self.finished:
                try:
                    env = transport.recv()
                except Disconnected:
                    break
                reply = self.handle(env)
                if reply is not None:
                    transport.send(reply)
        except BaseException as exc:  # propagate through the channel close
            self.error = exc
        finally:
            transport.close()


# ---------------------------------------------------------------------------
# runners: how the master drives its p workers

class InlineChannel:
    """Master-side channel that executes the worker synchronously."""

    def __init__(self, worker: WorkerNode):
        self.worker = worker
        self._inbox: list[Envelope] = []
        self._dead = False

    def send(self, env: Envelope) -> None:
        stamp_byte_size(env)
        if self._dead:
            raise Disconnected("worker already failed")
        try:
            reply = self.worker.handle(env)
        except Exception as exc:
            self.worker.error = exc
            self._dead = True
            return
        if reply is not None:
            self._inbox.append(stamp_byte_size(reply))

    def recv(self) -> Envelope:
        if self._inbox:
            return self._inbox.pop(0)
        raise Disconnected("no pending reply from inline worker")

    def close(self) -> None:
        self._dead = True


class InlineRunner:
    """Runs every worker in the master thread (single-threaded trainer)."""

    def __init__(self):
        self.workers: list[WorkerNode] = []
        self.channels: list[InlineChannel] = []

    def start(self, workers: list[WorkerNode]) -> None:
        self.workers = workers
        self.channels = [InlineChannel(w) for w in workers]

    def shutdown(self) -> None:
        for ch in self.channels:
            ch.close()


class ThreadedRunner:
    """Hosts each worker in its own thread over in-memory transports."""

    def __init__(self):
        self.workers: list[WorkerNode] = []
        self.channels: list[InMemoryTransport] = []
        self.threads: list[threading.Thread] = []

    def start(self, workers: list[WorkerNode]) -> None:
        self.workers = workers
        for worker in workers:
            master_end, worker_end = InMemoryTransport.pair()
            thread = threading.Thread(
                target=worker.run, args=(worker_end,),
                name=f"sepdl-worker-{worker.node_id}", daemon=True,
            )
            self.channels.append(master_end)
            self.threads.append(thread)
            thread.start()

    def shutdown(self) -> None:
        for ch in self.channels:
            ch.close()
        for thread in self.threads:
            thread.join(timeout=30.0)


# ---------------------------------------------------------------------------
# master

def _fix_sign(v: np.ndarray) -> np.ndarray:
    peak = int(np.argmax(np.abs(v)))
    return -v if v[peak] < 0 else v


def _replacement_from_patch(patch: np.ndarray, side: Side):
    """Dead-atom substitutes from the worst-coded patch of node 0.

    Column j is replaced by the patch's (j mod m)-th left (resp. right)
    singular vector, so simultaneous dead atoms get distinct directions.
    """
    u, _, vt = np.linalg.svd(patch)
    m = patch.shape[0]

    def pick(j: int) -> np.ndarray:
        col = u[:, j % m] if side is Side.LEFT else vt[j % m, :]
        return _fix_sign(col)

    return pick


def _general_update(reduced: PartialSums, side: Side, dataset: PatchSet, ridge: bool):
    update = update_left_general if side is Side.LEFT else update_right_general
    try:
        return update(reduced.gram, reduced.cross, ridge=ridge)
    except ZeroColumn:
        if reduced.worst_index < 0:
            raise
        patch = dataset.patches[reduced.worst_index]
        return update(reduced.gram, reduced.cross, ridge=ridge,
                      replacement=_replacement_from_patch(patch, side))


def _obj_general(sum_ysq: float, unnorm: np.ndarray, reduced: PartialSums) -> float:
    cross_term = float(np.einsum("ij,ji->", unnorm, reduced.cross))
    quad = float(np.einsum("ij,ji->", unnorm.T @ unnorm, reduced.gram))
    return sum_ysq - 2.0 * cross_term + quad

def _obj_ortho(sum_ysq: float, factor: np.ndarray, reduced: PartialSums) -> float:
    return sum_ysq - 2.0 * float(np.einsum("ij,ij->", factor, reduced.cross)) \
        + reduced.code_energy_sq


def train(
    config: TrainConfig,
    dataset: PatchSet,
    runner=None,
    *,
    record_history: bool = False,
) -> TrainResult:
    """Run the full K-iteration training loop; see the module docstring.

    ``runner`` defaults to single-threaded inline execution for one node
    and one thread per worker otherwise.  BLAS pools are pinned to one
    thread inside the loop so that reductions are deterministic and
    scaling comes from the worker threads alone.
    """
    if dataset.m != config.m:
        raise ShapeMismatch(f"dataset patches are {dataset.m}x{dataset.m}, "
                            f"config expects {config.m}")
    p = config.nodes
    shards = shard_dataset(dataset, p, config.seed)
    pair = init_dictionaries(config, dataset)
    if runner is None:
        runner = InlineRunner() if p == 1 else ThreadedRunner()
    metrics = RunMetrics(
        samples=dataset.count, patch_side=dataset.m, nodes=p,
        mode=config.mode.value, sparsity=config.sparsity,
    )
    sum_ysq = float(np.einsum("kij,kij->", dataset.patches, dataset.patches))
    denom = dataset.count * dataset.m * dataset.m
    history: list[DictionaryPair] = []

    workers = [WorkerNode(i, dataset, config) for i in range(p)]
    runner.start(workers)
    channels = runner.channels
    left, right = pair.left, pair.right
    try:
        with threadpool_limits(limits=1):
            for i in range(p):
                env = Envelope(EnvelopeKind.SHARD_ASSIGN, MASTER,
                               ShardAssign(i, shards[i].sample_indices))
                channels[i].send(env)
                metrics.setup_bytes_down += env.byte_size

            # the initial both-factor broadcast triggers the first coding
            # pass, so it belongs to the timed region
            loop_start = time.perf_counter()
            trigger_time = loop_start
            for i in range(p):
                env = Envelope(EnvelopeKind.BROADCAST_DICTS, MASTER,
                               BroadcastDicts(config.mode, left, right))
                channels[i].send(env)
                metrics.setup_bytes_down += env.byte_size
            for k in range(1, config.iterations + 1):
                it = IterationMetrics(k, 0.0, 0.0, 0.0, 0.0, 0, 0)

                # ---- left half-step
                parts, up = _collect(channels, workers, metrics)
                code_done = time.perf_counter()
                it.left_bytes_up = up
                reduced = reduce_partials(parts, p)
                it.after_coding_left = reduced.coding_residual_sq
                if k == 1:
                    metrics.initial_objective = reduced.coding_residual_sq
                    metrics.initial_rmse = float(np.sqrt(reduced.coding_residual_sq / denom))
                if config.mode is DictMode.ORTHONORMAL:
                    left = polar_factor(reduced.cross)
                    it.after_left_update = _obj_ortho(sum_ysq, left, reduced)
                else:
                    left, w1 = _general_update(reduced, Side.LEFT, dataset, config.ridge)
                    it.after_left_update = _obj_general(
                        sum_ysq, left / w1.diag[None, :], reduced)
                it.left_bytes_down = _broadcast(
                    channels, BroadcastDicts(config.mode, left=left, right=None))
                update_done = time.perf_counter()
                it.code_seconds += code_done - trigger_time
                it.update_seconds += update_done - code_done
                trigger_time = update_done

                # ---- right half-step
                parts, up = _collect(channels, workers, metrics)
                code_done = time.perf_counter()
                it.right_bytes_up = up
                reduced = reduce_partials(parts, p)
                it.after_coding_right = reduced.coding_residual_sq
                w2 = None
                if config.mode is DictMode.ORTHONORMAL:
                    right = polar_factor(reduced.cross)
                    it.objective = _obj_ortho(sum_ysq, right, reduced)
                else:
                    right, w2 = _general_update(reduced, Side.RIGHT, dataset, config.ridge)
                    it.objective = _obj_general(
                        sum_ysq, right / w2.diag[None, :], reduced)
                it.right_bytes_down = _broadcast(
                    channels, BroadcastDicts(config.mode, left=None, right=right))
                update_done = time.perf_counter()
                it.code_seconds += code_done - trigger_time
                it.update_seconds += update_done - code_done
                trigger_time = update_done

                it.rmse = float(np.sqrt(max(it.objective, 0.0) / denom))
                it.bytes_up = it.left_bytes_up + it.right_bytes_up
                it.bytes_down = it.left_bytes_down + it.right_bytes_down
                metrics.iterations.append(it)
                if record_history:
                    history.append(DictionaryPair(config.mode, left, right))
            metrics.loop_seconds = time.perf_counter() - loop_start
    finally:
        runner.shutdown()

    final_pair = DictionaryPair(config.mode, left, right)
    codes = _gather_codes(workers, dataset.count, w2)
    return TrainResult(final_pair, metrics, codes,
                       history if record_history else None)


def _collect(channels, workers, metrics: RunMetrics) -> tuple[list[PartialSums], int]:
    parts, up = [], 0
    for i, ch in enumerate(channels):
        try:
            env = ch.recv()
        except Disconnected as exc:
            raise WorkerFailure(i, metrics) from (workers[i].error or exc)
        if env.kind not in (EnvelopeKind.PARTIAL_LEFT, EnvelopeKind.PARTIAL_RIGHT):
            raise PhaseMismatch(f"unexpected {env.kind!r} from worker {i}")
        parts.append(env.payload)
        up += env.byte_size
    return parts, up


def _broadcast(channels, payload: BroadcastDicts) -> int:
    down = 0
    for ch in channels:
        env = Envelope(EnvelopeKind.BROADCAST_DICTS, MASTER, payload)
        ch.send(env)
        down += env.byte_size
    return down


def _gather_codes(workers, count: int, w2) -> list[SparseCode]:
    """Assemble per-sample codes in global order.

    The codes come from the final right half-step; in general mode they
    are compensated by the inverse of the right normalization so they
    pair with the returned (normalized) right factor.
    """
    out: list[Optional[SparseCode]] = [None] * count
    for worker in workers:
        codes = worker.codes
        if codes is None:
            continue
        if w2 is not None:
            codes.scale_columns(1.0 / w2.diag)
        for local_k, code in enumerate(codes.to_codes()):
            out[int(worker.indices[local_k])] = code
    missing = [k for k, c in enumerate(out) if c is None]
    if missing:
        raise RuntimeError(f"samples {missing[:5]}... were never coded")
    return out  # type: ignore[return-value]
