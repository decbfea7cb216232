"""Deterministic simulator of the asynchronous two-choice process.

An oblivious adversary fixes an interleaving of the low-level steps of
increment operations (first read, second read, update) before the run; the
simulator then replays that schedule. Each operation draws its two bin
indices from its thread's private stream at the read events and copies the
bin weights it sees there; at the update event it increments the bin whose
copied value was smaller (ties to the lower index). Because the adversary
never sees the random choices, physically copying at the reads is
observationally equivalent to drawing everything at the update, and it
keeps the replay single threaded and reproducible.

Time is the global count of scheduled shared-memory events; potentials are
sampled at update events only. An operation's contention is the number of
distinct other operations with at least one event strictly inside its
(start, finish) window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .balance import (
    LoadState,
    LoadVector,
    PotentialParams,
    Trajectory,
    TrajectoryBuilder,
    WeightDistribution,
)
from .rng import PairStream, schedule_rng, thread_rngs

READ1, READ2, UPDATE = 0, 1, 2
PHASE_NAMES = ("read1", "read2", "update")

SERIAL = "serial"
ROUND_ROBIN = "round-robin"
RANDOM_INTERLEAVE = "random-interleave"
STAMPEDE = "stampede"
BLOCK_RESET = "block-reset"
ADVERSARY_KINDS = (SERIAL, ROUND_ROBIN, RANDOM_INTERLEAVE, STAMPEDE, BLOCK_RESET)

OPLOG_HEADER = "op,thread,start,finish,contention,choice_i,choice_j,updated,correct"

# good-step margin used for simulator instrumentation: operations with
# contention <= ratio * threads pick the lesser bin with probability
# >= 1/2 + 1/5 in the analyzed regime
GOOD_MARGIN = 0.2


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulated run."""

    bins: int
    threads: int
    ratio: int = 16
    total_ops: int = 100_000
    adversary: str = RANDOM_INTERLEAVE
    block_size: int | None = None
    seed: int = 0
    weight: WeightDistribution = field(default_factory=WeightDistribution.unit)

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.total_ops < 0:
            raise ValueError("total_ops must be >= 0")
        if self.adversary not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind: {self.adversary!r}")

    @property
    def contention_bound(self) -> int:
        """The good/bad classification threshold: ratio * threads."""
        return self.ratio * self.threads

    @property
    def bin_ratio_met(self) -> bool:
        """Whether bins >= 4 * ratio * threads (the analyzed regime).

        Informational only; other regimes run fine and are worth probing.
        """
        return self.bins >= 4 * self.ratio * self.threads


@dataclass(frozen=True)
class ScheduleEvent:
    thread: int
    op: int
    phase: int


@dataclass(frozen=True)
class Schedule:
    """A lazily generated total order of (thread, op, phase) events.

    The event order is a pure function of (kind, threads, total_ops, seed,
    block_size): it never consumes simulation randomness, which is what
    makes the adversary oblivious.
    """

    kind: str
    threads: int
    total_ops: int
    seed: int = 0
    block_size: int | None = None

    def __post_init__(self):
        if self.kind not in ADVERSARY_KINDS:
            raise ValueError(f"unknown adversary kind: {self.kind!r}")
        if self.block_size is not None and self.block_size > self.threads:
            raise ValueError("stampede block size must not exceed thread count")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block size must be >= 1")

    def events(self) -> Iterator[tuple[int, int, int]]:
        """Yield raw (thread, op, phase) tuples in schedule order."""
        n = self.threads
        total = self.total_ops
        if total == 0:
            return
        if self.kind == SERIAL:
            for op in range(total):
                t = op % n
                yield (t, op, READ1)
                yield (t, op, READ2)
                yield (t, op, UPDATE)
        elif self.kind == ROUND_ROBIN:
            turn = [0]

            def cyclic(active, rng):
                slot = turn[0] % len(active)
                turn[0] += 1
                return slot

            yield from self._interleaved(cyclic)
        elif self.kind == RANDOM_INTERLEAVE:
            rng = schedule_rng(self.seed)
            yield from self._interleaved(
                lambda active, r: int(r.integers(0, len(active))), rng
            )
        elif self.kind == STAMPEDE:
            yield from self._stampede_blocks(self.block_size or n, 0)
        else:  # BLOCK_RESET: n-op stampedes alternating with serial stretches
            op = 0
            while op < total:
                block = min(n, total - op)
                yield from self._stampede_blocks(block, op, limit=block)
                op += block
                stretch = min(n, total - op)
                for k in range(stretch):
                    t = (op + k) % n
                    yield (t, op + k, READ1)
                    yield (t, op + k, READ2)
                    yield (t, op + k, UPDATE)
                op += stretch

    def _interleaved(self, pick: Callable, rng=None) -> Iterator[tuple[int, int, int]]:
        """One op per thread at a time, advanced one phase per visit."""
        n = self.threads
        total = self.total_ops
        next_op = 0
        current = [-1] * n   # op id per thread, -1 when idle
        phase = [0] * n
        active = list(range(n))
        while active:
            slot = pick(active, rng)
            t = active[slot]
            if current[t] < 0:
                if next_op >= total:
                    active.pop(slot)
                    continue
                current[t] = next_op
                next_op += 1
            p = phase[t]
            yield (t, current[t], p)
            if p == UPDATE:
                current[t] = -1
                phase[t] = 0
                if next_op >= total:
                    active.pop(slot)
            else:
                phase[t] = p + 1

    def _stampede_blocks(self, block: int, first_op: int, limit: int | None = None
                         ) -> Iterator[tuple[int, int, int]]:
        """Blocks of `block` ops: all first reads, all second reads, then
        all updates back to back. Threads 0..block-1 serve each block."""
        total = limit if limit is not None else self.total_ops
        op = 0
        while op < total:
            b = min(block, total - op)
            ids = [first_op + op + k for k in range(b)]
            for k in range(b):
                yield (k, ids[k], READ1)
            for k in range(b):
                yield (k, ids[k], READ2)
            for k in range(b):
                yield (k, ids[k], UPDATE)
            op += b

    def materialize(self) -> list[ScheduleEvent]:
        return [ScheduleEvent(*e) for e in self.events()]


def generate_schedule(config: SimConfig) -> Schedule:
    """Build the adversary's schedule for a config.

    The schedule derives its randomness (random-interleave only) from the
    scheduler's dedicated child stream of config.seed, so schedule shape
    and simulation choices are independent.
    """
    return Schedule(
        kind=config.adversary,
        threads=config.threads,
        total_ops=config.total_ops,
        seed=config.seed,
        block_size=config.block_size,
    )


def validate_schedule(schedule: Schedule) -> None:
    """Check the structural invariants of a schedule; raises on violation.

    Per op: phases appear exactly once each, in read1 < read2 < update
    order. Globally: at most `threads` operations pending at any prefix.
    Per thread: operations do not overlap and belong to one thread only.
    """
    n = schedule.threads
    seen_phase: dict[int, int] = {}
    op_thread: dict[int, int] = {}
    thread_open: dict[int, int] = {}
    pending = 0
    completed = 0
    for idx, (t, op, phase) in enumerate(schedule.events()):
        if not 0 <= t < n:
            raise AssertionError(f"event {idx}: thread {t} out of range")
        if phase == READ1:
            if op in seen_phase:
                raise AssertionError(f"op {op}: duplicate read1")
            if t in thread_open:
                raise AssertionError(f"thread {t}: overlapping ops {thread_open[t]} and {op}")
            seen_phase[op] = READ1
            op_thread[op] = t
            thread_open[t] = op
            pending += 1
            if pending > n:
                raise AssertionError(f"event {idx}: {pending} pending ops exceed {n} threads")
        else:
            if seen_phase.get(op) != phase - 1:
                raise AssertionError(f"op {op}: phase {PHASE_NAMES[phase]} out of order")
            if op_thread[op] != t:
                raise AssertionError(f"op {op}: thread changed mid-operation")
            seen_phase[op] = phase
            if phase == UPDATE:
                del thread_open[t]
                del seen_phase[op]
                pending -= 1
                completed += 1
    if pending != 0:
        raise AssertionError(f"{pending} operations never completed")
    if completed != schedule.total_ops:
        raise AssertionError(f"completed {completed} of {schedule.total_ops} ops")


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OperationRecord:
    """One completed increment operation."""

    op: int
    thread: int
    start: int
    finish: int
    contention: int
    choice_i: int
    choice_j: int
    value_i: float
    value_j: float
    updated: int
    post_value: float
    correct_choice: bool
    untouched: bool


@dataclass
class OpLog:
    """Columnar log of completed operations, in completion order."""

    op: np.ndarray
    thread: np.ndarray
    start: np.ndarray
    finish: np.ndarray
    contention: np.ndarray
    choice_i: np.ndarray
    choice_j: np.ndarray
    value_i: np.ndarray
    value_j: np.ndarray
    updated: np.ndarray
    post_value: np.ndarray
    correct: np.ndarray
    untouched: np.ndarray

    def __len__(self) -> int:
        return len(self.op)

    def record(self, k: int) -> OperationRecord:
        return OperationRecord(
            op=int(self.op[k]), thread=int(self.thread[k]),
            start=int(self.start[k]), finish=int(self.finish[k]),
            contention=int(self.contention[k]),
            choice_i=int(self.choice_i[k]), choice_j=int(self.choice_j[k]),
            value_i=float(self.value_i[k]), value_j=float(self.value_j[k]),
            updated=int(self.updated[k]), post_value=float(self.post_value[k]),
            correct_choice=bool(self.correct[k]), untouched=bool(self.untouched[k]),
        )

    def write_csv(self, path, header_comments: Iterable[str] = ()) -> None:
        with open(path, "w", newline="") as f:
            for line in header_comments:
                f.write(f"# {line}\n")
            f.write(OPLOG_HEADER + "\n")
            w = csv.writer(f)
            for k in range(len(self.op)):
                w.writerow([
                    int(self.op[k]), int(self.thread[k]), int(self.start[k]),
                    int(self.finish[k]), int(self.contention[k]),
                    int(self.choice_i[k]), int(self.choice_j[k]),
                    int(self.updated[k]), int(self.correct[k]),
                ])


@dataclass
class SimResult:
    loads: LoadVector
    log: OpLog
    trajectory: Trajectory


def simulate(config: SimConfig, schedule: Schedule | None = None,
             params: PotentialParams | None = None) -> SimResult:
    """Replay a schedule against fresh bins.

    Choices come from per-thread streams derived from config.seed; a fixed
    schedule with a different seed replays the same event order with
    different choices. One trajectory row is recorded per update event.
    """
    if schedule is None:
        schedule = generate_schedule(config)
    if schedule.threads != config.threads:
        raise ValueError("schedule was generated for a different thread count")
    if schedule.total_ops != config.total_ops:
        raise ValueError("schedule was generated for a different op budget")

    n = config.threads
    m = config.bins
    unit = config.weight.is_unit
    params = params or PotentialParams.from_good_margin(
        GOOD_MARGIN, moment_bound=config.weight.moment_bound
    )
    state = LoadState(m, params, unit=unit)
    weights = state.weights

    rngs = thread_rngs(config.seed, n)
    pair_streams = []
    weight_rngs = []
    for rng in rngs:
        idx_rng, w_rng = rng.spawn(2)
        pair_streams.append(PairStream(idx_rng, m))
        weight_rngs.append(w_rng)

    total = config.total_ops
    a_op = np.zeros(total, dtype=np.int64)
    a_thread = np.zeros(total, dtype=np.int64)
    a_start = np.zeros(total, dtype=np.int64)
    a_finish = np.zeros(total, dtype=np.int64)
    a_cont = np.zeros(total, dtype=np.int64)
    a_ci = np.zeros(total, dtype=np.int64)
    a_cj = np.zeros(total, dtype=np.int64)
    a_vi = np.zeros(total, dtype=np.float64)
    a_vj = np.zeros(total, dtype=np.float64)
    a_upd = np.zeros(total, dtype=np.int64)
    a_post = np.zeros(total, dtype=np.float64)
    a_corr = np.zeros(total, dtype=np.bool_)
    a_unt = np.zeros(total, dtype=np.bool_)
    traj = TrajectoryBuilder(total)

    # per-thread pending op state: [op, start, i, j, vi, vj, seen, touched]
    pend: list[list | None] = [None] * n
    done = 0
    event_idx = -1

    for t, op, phase in schedule.events():
        event_idx += 1
        if phase == READ1:
            i, j = pair_streams[t].next_pair()
            cur = [op, event_idx, i, j, weights[i], 0.0, set(), set()]
            pend[t] = cur
            # this op's read touches bin i; note it for other pending ops
            for u in range(n):
                other = pend[u]
                if other is not None and u != t:
                    other[6].add(op)
                    other[7].add(i)
        elif phase == READ2:
            cur = pend[t]
            if cur is None or cur[0] != op:
                raise ValueError(f"schedule event {event_idx}: read2 without read1")
            j = cur[3]
            cur[5] = weights[j]
            for u in range(n):
                other = pend[u]
                if other is not None and u != t:
                    other[6].add(op)
                    other[7].add(j)
        else:  # UPDATE
            cur = pend[t]
            if cur is None or cur[0] != op:
                raise ValueError(f"schedule event {event_idx}: update without reads")
            pend[t] = None
            _, start, i, j, vi, vj, seen, touched = cur
            # stale comparison; ties (including i == j) to the lower index
            if vj < vi or (vj == vi and j < i):
                chosen = j
            else:
                chosen = i
            w = 1 if unit else float(weight_rngs[t].exponential(config.weight.mean))
            true_min = i if (weights[i], i) <= (weights[j], j) else j
            state.add(chosen, w)
            for u in range(n):
                other = pend[u]
                if other is not None:
                    other[6].add(op)
                    other[7].add(chosen)
            k = done
            a_op[k] = op
            a_thread[k] = t
            a_start[k] = start
            a_finish[k] = event_idx
            a_cont[k] = len(seen)
            a_ci[k] = i
            a_cj[k] = j
            a_vi[k] = vi
            a_vj[k] = vj
            a_upd[k] = chosen
            a_post[k] = weights[chosen]
            a_corr[k] = chosen == true_min
            a_unt[k] = chosen not in touched
            traj.append(state.snapshot_row(event_idx))
            done += 1

    if done != total:
        raise ValueError(f"schedule completed {done} of {total} operations")
    log = OpLog(
        op=a_op, thread=a_thread, start=a_start, finish=a_finish,
        contention=a_cont, choice_i=a_ci, choice_j=a_cj,
        value_i=a_vi, value_j=a_vj, updated=a_upd, post_value=a_post,
        correct=a_corr, untouched=a_unt,
    )
    return SimResult(loads=state.load_vector(), log=log, trajectory=traj.build())


# ---------------------------------------------------------------------------
# classification and drift reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassificationSummary:
    total: int
    good: int
    bad: int
    fraction_good: float
    fraction_correct_good: float
    fraction_correct_bad: float
    fraction_untouched_good: float


def classify_operations(log: OpLog, config: SimConfig) -> tuple[np.ndarray, ClassificationSummary]:
    """Label each op good (contention <= ratio*threads) or bad.

    Returns the boolean good mask plus summary fractions: how often the
    updated bin was the true lesser of the pair, split by class, and how
    often a good op's bin went untouched during the op.
    """
    bound = config.contention_bound
    good = np.asarray(log.contention) <= bound
    total = len(good)
    ngood = int(good.sum())
    nbad = total - ngood
    correct = np.asarray(log.correct)
    untouched = np.asarray(log.untouched)

    def frac(mask_num, mask_den) -> float:
        d = int(mask_den.sum())
        return float((mask_num & mask_den).sum() / d) if d else float("nan")

    summary = ClassificationSummary(
        total=total,
        good=ngood,
        bad=nbad,
        fraction_good=ngood / total if total else float("nan"),
        fraction_correct_good=frac(correct, good),
        fraction_correct_bad=frac(correct, ~good),
        fraction_untouched_good=frac(untouched, good),
    )
    return good, summary


@dataclass(frozen=True)
class WindowStats:
    index: int
    first_op: int
    last_op: int
    max_gamma: float
    end_gamma: float
    bad_ops: int
    flagged: bool


def drift_report(trajectory: Trajectory, log: OpLog, window: int, bins: int,
                 gamma_flag_multiple: float = 8.0) -> list[WindowStats]:
    """Per-window potential statistics over consecutive completed ops.

    The window length is the classification bound (ratio * threads), so the
    bad-op count per window checks the few-bad-ops-per-stretch property and
    end_gamma > gamma_flag_multiple * bins flags drift escapes.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    gamma = np.asarray(trajectory.gamma)
    cont = np.asarray(log.contention)
    if len(gamma) != len(cont):
        raise ValueError("trajectory and log must cover the same operations")
    out = []
    for w, lo in enumerate(range(0, len(gamma), window)):
        hi = min(lo + window, len(gamma))
        seg = gamma[lo:hi]
        end = float(seg[-1])
        bad = int((cont[lo:hi] > window).sum())
        out.append(WindowStats(
            index=w, first_op=lo, last_op=hi - 1,
            max_gamma=float(seg.max()), end_gamma=end,
            bad_ops=bad, flagged=end > gamma_flag_multiple * bins,
        ))
    return out
