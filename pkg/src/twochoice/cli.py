"""Experiment driver: every run is a subcommand that writes CSV artifacts.

Configuration comes from an optional plain-text key=value file plus
per-key flag overrides; every resolved value records where it came from
(default, file, or flag) and the full resolved config is embedded as
comment lines at the top of every CSV the run writes. Output goes to the
directory named by --out, the TWOCHOICE_OUT environment variable, or
./results, in that order of defaults.

Measurement experiments (counter, queue, stm) repeat each timed run and
report mean and standard deviation; simulator and sequential experiments
are deterministic per seed and write identical files on identical configs.
A failed consistency oracle makes the process exit nonzero after writing a
diagnostics dump.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .adversary import ADVERSARY_KINDS, SimConfig, classify_operations, drift_report, simulate
from .affinity import try_pin_current_thread
from .balance import WeightDistribution, run_sequential
from .dlin import history_from_simulation, linearize_costs, tail_report
from .multicounter import MultiCounter
from .multiqueue import EMPTY, MultiQueue, RankOracle
from .rng import make_rng, thread_rngs
from .stm import STM_CSV_HEADER, run_stm_benchmark

ENV_OUTDIR = "TWOCHOICE_OUT"

_REQUIRED = object()


class ConfigError(ValueError):
    """Bad experiment configuration; the message names the offending key."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> list[int]:
    return [int(part) for part in str(text).split(",") if part.strip() != ""]


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "ints": _parse_ints,
}

# key -> (type tag, default); _REQUIRED marks keys a config must supply
SCHEMAS: dict[str, dict[str, tuple[str, object]]] = {
    "seq": {
        "bins": ("int", 64),
        "steps": ("int", 100_000),
        "beta": ("float", 1.0),
        "weight": ("str", "unit"),
        "seeds": ("ints", [1, 2, 3, 4, 5]),
        "snapshot_every": ("int", 1000),
        "out": ("str", None),
    },
    "sim": {
        "bins": ("int", 256),
        "threads": ("int", 4),
        "ratio": ("int", 16),
        "ops": ("int", 100_000),
        "adversary": ("str", "stampede"),
        "block_size": ("int", 0),  # 0: use thread count
        "seeds": ("ints", [1, 2, 3]),
        "gamma_flag_multiple": ("float", 8.0),
        "out": ("str", None),
    },
    "counter": {
        "mode": ("str", "throughput"),
        "threads_max": ("int", 0),  # 0: hardware threads
        "cell_ratios": ("ints", [1, 2, 4]),
        "duration": ("float", 1.0),
        "repeats": ("int", 10),
        "cells": ("int", 64),
        "increments": ("int", 1_000_000),
        "cadence": ("int", 10_000),
        "seed": ("int", 1),
        "pin": ("bool", True),
        "out": ("str", None),
    },
    "queue": {
        "mode": ("str", "quality"),
        "queues": ("int", 64),
        "prefill": ("int", 1_000_000),
        "dequeues": ("int", 500_000),
        "threads": ("int", 0),  # 0: hardware threads
        "duration": ("float", 1.0),
        "repeats": ("int", 10),
        "seed": ("int", 1),
        "pin": ("bool", True),
        "out": ("str", None),
    },
    "stm": {
        "threads_max": ("int", 0),  # 0: hardware threads
        "objects": ("ints", [10_000, 100_000, 1_000_000]),
        "duration": ("float", 1.0),
        "repeats": ("int", 10),
        "delta": ("int", 0),  # 0: default margin for the clock size
        "clock_cells": ("int", 64),
        "seed": ("int", 1),
        "pin": ("bool", True),
        "out": ("str", None),
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def outdir(self) -> Path:
        out = self.params.get("out")
        if out is None:
            out = os.environ.get(ENV_OUTDIR, "results")
        return Path(out)

    def header_comments(self) -> list[str]:
        lines = [f"experiment = {self.experiment}"]
        for key in sorted(self.params):
            value = self.params[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value} ({self.provenance[key]})")
        return lines


def read_kv_file(path) -> dict[str, str]:
    """Parse `key = value` lines; # starts a comment."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def parse_config(experiment: str, config_file=None, flag_values: dict | None = None,
                 schemas: dict | None = None) -> ExperimentConfig:
    """Resolve defaults, file values, then flag overrides, tracking provenance."""
    schemas = schemas or SCHEMAS
    if experiment not in schemas:
        raise ConfigError(f"unknown experiment: {experiment!r}")
    schema = schemas[experiment]
    params: dict = {}
    provenance: dict = {}
    for key, (_, default) in schema.items():
        params[key] = default
        provenance[key] = "default"

    def apply(source: str, items: dict) -> None:
        for key, raw in items.items():
            if raw is None:
                continue
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} for experiment {experiment!r}")
            tag = schema[key][0]
            try:
                params[key] = _PARSERS[tag](raw)
            except (TypeError, ValueError):
                raise ConfigError(
                    f"key {key!r}: cannot parse {raw!r} as {tag}"
                ) from None
            provenance[key] = source

    if config_file is not None:
        apply("file", read_kv_file(config_file))
    if flag_values:
        apply("flag", flag_values)
    missing = [k for k, v in params.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r} for {experiment!r}")
    return ExperimentConfig(experiment=experiment, params=params, provenance=provenance)


def _write_csv(path: Path, comments: list[str], header: str, rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def _hardware_threads() -> int:
    return os.cpu_count() or 1


def _fail(outdir: Path, name: str, detail: str) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    dump = outdir / f"{name}_diagnostics.txt"
    dump.write_text(detail + "\n")
    print(f"ORACLE FAILURE [{name}]: {detail}", file=sys.stderr)
    print(f"diagnostics written to {dump}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_seq(cfg: ExperimentConfig) -> int:
    p = cfg.params
    weight = (WeightDistribution.unit() if p["weight"] == "unit"
              else WeightDistribution.exponential())
    outdir = cfg.outdir
    for seed in p["seeds"]:
        traj, loads = run_sequential(
            p["bins"], p["steps"], p["beta"], weight=weight, rng=seed,
            snapshot_every=p["snapshot_every"],
        )
        if weight.is_unit and loads.total != p["steps"]:
            return _fail(outdir, "seq",
                         f"seed {seed}: total {loads.total} != steps {p['steps']}")
        path = outdir / f"seq_b{p['beta']:g}_seed{seed}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        traj.write_csv(path, header_comments=cfg.header_comments() + [f"seed = {seed}"])
        print(f"seq seed={seed}: gap_max={traj.gap.max():.0f} -> {path}")
    return 0


def run_sim(cfg: ExperimentConfig) -> int:
    p = cfg.params
    outdir = cfg.outdir
    for seed in p["seeds"]:
        sim_cfg = SimConfig(
            bins=p["bins"], threads=p["threads"], ratio=p["ratio"],
            total_ops=p["ops"], adversary=p["adversary"],
            block_size=p["block_size"] or None, seed=seed,
        )
        res = simulate(sim_cfg)
        if res.loads.total != p["ops"]:
            return _fail(outdir, "sim",
                         f"seed {seed}: total {res.loads.total} != ops {p['ops']}")
        comments = cfg.header_comments() + [f"seed = {seed}"]
        traj_path = outdir / f"sim_{p['adversary']}_seed{seed}_trajectory.csv"
        ops_path = outdir / f"sim_{p['adversary']}_seed{seed}_ops.csv"
        traj_path.parent.mkdir(parents=True, exist_ok=True)
        res.trajectory.write_csv(traj_path, header_comments=comments)
        res.log.write_csv(ops_path, header_comments=comments)
        _, summary = classify_operations(res.log, sim_cfg)
        windows = drift_report(res.trajectory, res.log, sim_cfg.contention_bound,
                               sim_cfg.bins, p["gamma_flag_multiple"])
        flagged = sum(w.flagged for w in windows)
        costs = linearize_costs(history_from_simulation(res.log, sim_cfg.bins),
                                "counter", sim_cfg.bins)
        tail = tail_report(costs, sim_cfg.bins)
        tail.write_csv(outdir / f"sim_{p['adversary']}_seed{seed}_tail.csv",
                       header_comments=comments)
        print(f"sim seed={seed}: gap_max={res.trajectory.gap.max():.0f} "
              f"good={summary.fraction_good:.3f} flagged_windows={flagged} "
              f"p99_cost={tail.p99:.0f} -> {traj_path}")
    return 0


def _counter_throughput_once(threads: int, cells: int, duration: float,
                             seed: int, pin: bool) -> tuple[float, bool, int]:
    counter = MultiCounter(cells)
    rngs = thread_rngs(seed, threads)
    counts = [0] * threads
    pinned = [False] * threads
    stop = threading.Event()

    def worker(k: int) -> None:
        if pin:
            pinned[k] = try_pin_current_thread(k)
        rng = rngs[k]
        inc = counter.increment
        n = 0
        while not stop.is_set():
            inc(rng)
            n += 1
        counts[k] = n

    workers = [threading.Thread(target=worker, args=(k,)) for k in range(threads)]
    t0 = time.perf_counter()
    for w in workers:
        w.start()
    time.sleep(duration)
    stop.set()
    for w in workers:
        w.join()
    elapsed = time.perf_counter() - t0
    total = sum(counts)
    conserved = counter.exact_total() == total
    return total / elapsed, conserved, sum(pinned)


def run_counter(cfg: ExperimentConfig) -> int:
    p = cfg.params
    outdir = cfg.outdir
    if p["mode"] == "quality":
        counter = MultiCounter(p["cells"])
        rng = make_rng(p["seed"])
        read_rng = make_rng(p["seed"] + 1)
        rows = []
        for k in range(1, p["increments"] + 1):
            counter.increment(rng)
            if k % p["cadence"] == 0:
                values = counter.snapshot()
                rows.append([k, counter.read(read_rng),
                             max(values) - min(values)])
        if counter.exact_total() != p["increments"]:
            return _fail(outdir, "counter",
                         f"total {counter.exact_total()} != {p['increments']}")
        path = outdir / "counter_quality.csv"
        _write_csv(path, cfg.header_comments(), "increments,scaled_read,gap", rows)
        print(f"counter quality: final_gap={rows[-1][2]} -> {path}")
        return 0
    if p["mode"] != "throughput":
        raise ConfigError(f"key 'mode': unknown counter mode {p['mode']!r}")
    threads_max = p["threads_max"] or _hardware_threads()
    rows = []
    for threads in range(1, threads_max + 1):
        for ratio in p["cell_ratios"]:
            cells = max(1, ratio * threads)
            rates = []
            pinned = 0
            for rep in range(p["repeats"]):
                rate, conserved, pinned = _counter_throughput_once(
                    threads, cells, p["duration"], p["seed"] + rep, p["pin"])
                if not conserved:
                    return _fail(outdir, "counter",
                                 f"threads={threads} cells={cells} rep={rep}: "
                                 "cell sum != completed increments")
                rates.append(rate)
            mean = statistics.fmean(rates)
            std = statistics.pstdev(rates) if len(rates) > 1 else 0.0
            rows.append([threads, ratio, cells, repr(mean), repr(std), 1])
            print(f"counter threads={threads} ratio={ratio}: {mean:,.0f} ops/s "
                  f"(pinned {pinned}/{threads})")
    path = outdir / "counter_throughput.csv"
    _write_csv(path, cfg.header_comments(),
               "threads,ratio,cells,ops_per_sec_mean,ops_per_sec_std,conserved", rows)
    return 0


def run_queue(cfg: ExperimentConfig) -> int:
    p = cfg.params
    outdir = cfg.outdir
    if p["mode"] == "quality":
        rng = make_rng(p["seed"])
        oracle = RankOracle(capacity=max(1024, p["prefill"] + 1))
        q = MultiQueue(p["queues"], oracle=oracle)
        for k in range(p["prefill"]):
            q.enqueue(k, rng)
        got = 0
        while got < p["dequeues"]:
            if q.dequeue(rng) is EMPTY:
                return _fail(outdir, "queue", "ran out of elements during quality run")
            got += 1
        ranks = [r[1] for r in q.rank_log]
        path = outdir / "queue_ranks.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        q.write_rank_csv(path, header_comments=cfg.header_comments())
        mean_rank = sum(ranks) / len(ranks)
        print(f"queue quality: mean_rank={mean_rank:.1f} max_rank={max(ranks)} -> {path}")
        return 0
    if p["mode"] != "stress":
        raise ConfigError(f"key 'mode': unknown queue mode {p['mode']!r}")
    threads = p["threads"] or _hardware_threads()
    rows = []
    for rep in range(p["repeats"]):
        q = MultiQueue(p["queues"])
        rngs = thread_rngs(p["seed"] + rep, threads)
        produced: list[list] = [[] for _ in range(threads)]
        consumed: list[list] = [[] for _ in range(threads)]
        pinned = [False] * threads
        stop = threading.Event()

        def worker(k: int) -> None:
            if p["pin"]:
                pinned[k] = try_pin_current_thread(k)
            rng = rngs[k]
            step = 0
            while not stop.is_set():
                if step % 2 == 0:
                    item = (k, step)
                    q.enqueue(item, rng, thread=k)
                    produced[k].append(item)
                else:
                    got = q.dequeue(rng)
                    if got is not EMPTY:
                        consumed[k].append(got)
                step += 1
            # drain own view later; nothing thread-local to flush

        workers = [threading.Thread(target=worker, args=(k,)) for k in range(threads)]
        for w in workers:
            w.start()
        time.sleep(p["duration"])
        stop.set()
        for w in workers:
            w.join()
        leftovers = q.drain()
        want = Counter(x for lane in produced for x in lane)
        got = Counter(x for lane in consumed for x in lane) + Counter(leftovers)
        if want != got:
            missing = want - got
            extra = got - want
            return _fail(outdir, "queue",
                         f"rep={rep}: lost={sum(missing.values())} "
                         f"duplicated_or_invented={sum(extra.values())}")
        total_in = sum(len(lane) for lane in produced)
        dequeued = sum(len(lane) for lane in consumed)
        rows.append([threads, p["queues"], repr(p["duration"]), total_in,
                     dequeued, len(leftovers), 1])
        print(f"queue stress rep={rep}: enq={total_in} deq={dequeued} "
              f"left={len(leftovers)} (pinned {sum(pinned)}/{threads})")
    path = outdir / "queue_stress.csv"
    _write_csv(path, cfg.header_comments(),
               "threads,queues,duration,enqueued,dequeued,drained,consistent", rows)
    return 0


def run_stm(cfg: ExperimentConfig) -> int:
    p = cfg.params
    outdir = cfg.outdir
    threads_max = p["threads_max"] or _hardware_threads()
    summary_rows = []
    for objects in p["objects"]:
        rows = []
        for threads in range(1, threads_max + 1):
            for kind in ("exact", "multicounter"):
                rates = []
                abort_rates = []
                for rep in range(p["repeats"]):
                    res = run_stm_benchmark(
                        threads, objects, p["duration"], clock_kind=kind,
                        delta=p["delta"] or None, seed=p["seed"] + rep,
                        clock_cells=p["clock_cells"], pin=p["pin"],
                    )
                    if not res.consistent:
                        return _fail(
                            outdir, "stm",
                            f"objects={objects} threads={threads} clock={kind} "
                            f"rep={rep}: cell sum != 2 * commits "
                            f"(commits={res.commits})")
                    rows.append(res.csv_row())
                    rates.append(res.commits_per_sec)
                    abort_rates.append(res.aborts_per_commit)
                summary_rows.append([
                    threads, objects, kind, rows[-1][3],
                    repr(statistics.fmean(rates)),
                    repr(statistics.pstdev(rates) if len(rates) > 1 else 0.0),
                    repr(statistics.fmean(abort_rates)), 1,
                ])
                print(f"stm objects={objects} threads={threads} clock={kind}: "
                      f"{statistics.fmean(rates):,.0f} commits/s "
                      f"aborts/commit={statistics.fmean(abort_rates):.3f} "
                      f"(pinned {res.pinned_threads}/{threads})")
        _write_csv(outdir / f"stm_objects{objects}.csv", cfg.header_comments(),
                   STM_CSV_HEADER, rows)
    _write_csv(outdir / "stm_summary.csv", cfg.header_comments(),
               "threads,objects,clock,delta,commits_per_sec_mean,"
               "commits_per_sec_std,aborts_per_commit_mean,consistent",
               summary_rows)
    return 0


RUNNERS = {
    "seq": run_seq,
    "sim": run_sim,
    "counter": run_counter,
    "queue": run_queue,
    "stm": run_stm,
}


def run(cfg: ExperimentConfig) -> int:
    """Dispatch to the experiment runner; returns the process exit code."""
    return RUNNERS[cfg.experiment](cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twochoice",
        description="Relaxed-structure experiments; results land as CSV files.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for experiment, schema in SCHEMAS.items():
        p = sub.add_parser(experiment)
        p.add_argument("--config", default=None, help="key = value file")
        for key in schema:
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"kv_{key}", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {
        key[len("kv_"):]: value
        for key, value in vars(args).items()
        if key.startswith("kv_")
    }
    try:
        cfg = parse_config(args.experiment, config_file=args.config, flag_values=flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
