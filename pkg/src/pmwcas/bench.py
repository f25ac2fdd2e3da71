"""Zipf-skewed multi-word increment benchmark.

Every operation picks ``k`` distinct words, reads them, and swaps each to
its value plus one, retrying with fresh reads until it succeeds.  Words are
drawn by Zipf rank and ranks are scattered over the heap by a seeded
permutation.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import os
import random
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .core import OpStats, increment_steps, run
from .pmem import DramHeap, HeapLayout, MappedHeap, Variant
from .words import TAG_MASK

ALGORITHMS = ("df", "nodf", "pcas")
BACKENDS = ("dram", "real")
ORDERS = ("index", "contended-first")


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    algorithm: str = "nodf"
    threads: int = 1
    k: int = 3
    word_count: int = 1_000_000
    alpha: float = 0.0
    block_size: int = 256
    timeout: float = 10.0
    max_ops: int = 1_000_000
    seed: int = 0
    backend: str = "dram"
    order: str = "index"
    scatter: bool = True
    max_targets: int = 8
    instrument: bool = True
    path: str | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise BenchConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.backend not in BACKENDS:
            raise BenchConfigError(f"backend must be one of {BACKENDS}")
        if self.order not in ORDERS:
            raise BenchConfigError(f"order must be one of {ORDERS}")
        if self.algorithm == "pcas" and self.k != 1:
            raise BenchConfigError("pcas runs need k == 1")
        if not 1 <= self.k <= self.max_targets:
            raise BenchConfigError(f"k must be in 1..{self.max_targets}")
        if self.k > self.word_count:
            raise BenchConfigError("k exceeds the number of words")
        bs = self.block_size
        if bs < 8 or bs & (bs - 1):
            raise BenchConfigError(f"block size {bs} is not a power of two >= 8")
        if self.threads < 1 or self.max_ops < 1 or self.timeout <= 0 or self.alpha < 0:
            raise BenchConfigError("threads, max_ops and timeout must be positive, alpha non-negative")


class ZipfSampler:
    """Inverse-CDF sampler of ranks ``1..n`` with Pr(r) proportional to ``r**-alpha``."""

    def __init__(self, n: int, alpha: float):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n
        self.alpha = alpha
        weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** alpha
        self.normalization = float(weights.sum())
        cdf = np.cumsum(weights) / self.normalization
        cdf[-1] = 1.0
        self.cdf = cdf

    def pmf(self, rank: int) -> float:
        return (1.0 / rank ** self.alpha) / self.normalization

    def sample(self, u: float) -> int:
        """Smallest rank whose CDF exceeds ``u``."""
        return min(int(np.searchsorted(self.cdf, u, side="right")) + 1, self.n)

    def sample_many(self, u: np.ndarray) -> np.ndarray:
        r = np.searchsorted(self.cdf, u, side="right") + 1
        return np.minimum(r, self.n)


def rank_permutation(n: int, seed: int, scatter: bool = True) -> np.ndarray:
    """Word index for each rank (index ``rank - 1``)."""
    if not scatter:
        return np.arange(n)
    return np.random.default_rng([seed, 0x5EED]).permutation(n)


class RankStream:
    """Batched stream of (word index, rank) draws for one worker."""

    def __init__(self, sampler: ZipfSampler, rng: np.random.Generator, perm: np.ndarray | None = None,
                 batch: int = 8192):
        self._sampler = sampler
        self._rng = rng
        self._perm = np.arange(sampler.n) if perm is None else np.asarray(perm)
        self._batch = batch
        self._ranks: list[int] = []
        self._index: list[int] = []
        self._pos = 0

    def _refill(self) -> None:
        ranks = self._sampler.sample_many(self._rng.random(self._batch))
        self._ranks = ranks.tolist()
        self._index = self._perm[ranks - 1].tolist()
        self._pos = 0

    def next(self) -> tuple[int, int]:
        if self._pos >= len(self._ranks):
            self._refill()
        p = self._pos
        self._pos = p + 1
        return self._index[p], self._ranks[p]

    def take(self, n: int) -> tuple[list[int], list[int]]:
        if self._pos + n > len(self._ranks):
            self._refill()
        p = self._pos
        self._pos = p + n
        return self._index[p:p + n], self._ranks[p:p + n]


def build_op(stream: RankStream, k: int, order: str = "index") -> list[int]:
    """``k`` distinct word indices, resampling duplicates, in embedding order."""
    index, ranks = stream.take(k)
    if len(set(index)) < k:
        chosen: dict[int, int] = {}
        for i, r in zip(index, ranks):
            chosen.setdefault(i, r)
        while len(chosen) < k:
            i, r = stream.next()
            chosen.setdefault(i, r)
        index, ranks = list(chosen), list(chosen.values())
    if order == "contended-first":
        return [i for _, i in sorted(zip(ranks, index))]
    index.sort()
    return index


@dataclass
class BenchReport:
    config: BenchConfig
    succeeded: int = 0
    failed_attempts: int = 0
    elapsed_s: float = 0.0
    throughput: float = 0.0
    p1_us: float = 0.0
    p50_us: float = 0.0
    p99_us: float = 0.0
    payload_sum: int = 0
    residual_tags: int = 0
    instrumentation: dict = field(default_factory=dict)

    @property
    def invariant_ok(self) -> bool:
        return self.residual_tags == 0 and self.payload_sum == self.config.k * self.succeeded

    def to_json(self) -> dict:
        out = asdict(self)
        out["invariant_ok"] = self.invariant_ok
        return out

    @classmethod
    def from_json(cls, data: dict) -> "BenchReport":
        data = dict(data)
        data.pop("invariant_ok", None)
        data["config"] = BenchConfig(**data["config"])
        return cls(**data)


class _Reservoir:
    def __init__(self, size: int, rng: random.Random):
        self.size = size
        self.rng = rng
        self.seen = 0
        self.samples: list[int] = []

    def add(self, x: int) -> None:
        self.seen += 1
        if len(self.samples) < self.size:
            self.samples.append(x)
        else:
            j = self.rng.randrange(self.seen)
            if j < self.size:
                self.samples[j] = x


def _make_heap(cfg: BenchConfig):
    variant = Variant(cfg.algorithm)
    if cfg.backend == "dram":
        layout = HeapLayout(cfg.word_count, cfg.block_size, cfg.threads, cfg.max_targets)
        return DramHeap(layout, variant), None
    path = cfg.path
    tmp = None
    if path is None:
        fd, tmp = tempfile.mkstemp(prefix="pmwcas-", suffix=".heap")
        os.close(fd)
        path = tmp
    heap = MappedHeap.create(path, cfg.word_count, cfg.block_size, cfg.threads, variant, cfg.max_targets)
    return heap, tmp


def _worker(heap, cfg: BenchConfig, wid: int, sampler: ZipfSampler, perm, start: threading.Barrier,
            deadline_box: list, out: list) -> None:
    stream = RankStream(sampler, np.random.default_rng([cfg.seed, wid]), perm)
    reservoir = _Reservoir(10_000, random.Random(cfg.seed * 1000 + wid))
    stats = OpStats() if cfg.instrument else None
    slot = wid
    dword = heap.descriptor_word(slot)
    dirty = cfg.algorithm == "df"
    is_pcas = cfg.algorithm == "pcas"
    k, order, max_ops = cfg.k, cfg.order, cfg.max_ops
    clock = time.perf_counter_ns
    succeeded = failed = 0
    start.wait()
    deadline = deadline_box[0]
    while succeeded < max_ops and clock() < deadline:
        targets = build_op(stream, k, order)
        t0 = clock()
        failed += run(heap, increment_steps(slot, dword, targets, dirty, is_pcas), stats)
        reservoir.add(clock() - t0)
        succeeded += 1
    out[wid] = (succeeded, failed, reservoir.samples, stats)


def run_bench(cfg: BenchConfig) -> BenchReport:
    heap, tmp = _make_heap(cfg)
    try:
        sampler = ZipfSampler(cfg.word_count, cfg.alpha)
        perm = rank_permutation(cfg.word_count, cfg.seed, cfg.scatter)
        out: list = [None] * cfg.threads
        barrier = threading.Barrier(cfg.threads + 1)
        deadline_box = [0]
        threads = [
            threading.Thread(target=_worker, args=(heap, cfg, w, sampler, perm, barrier, deadline_box, out),
                             daemon=True)
            for w in range(cfg.threads)
        ]
        for t in threads:
            t.start()
        t_start = time.perf_counter_ns()
        deadline_box[0] = t_start + int(cfg.timeout * 1e9)
        barrier.wait()
        for t in threads:
            t.join()
        elapsed = (time.perf_counter_ns() - t_start) / 1e9

        report = BenchReport(cfg)
        samples: list[int] = []
        total = OpStats()
        for succeeded, failed, lat, stats in out:
            report.succeeded += succeeded
            report.failed_attempts += failed
            samples.extend(lat)
            if stats is not None:
                total += stats
        report.elapsed_s = elapsed
        report.throughput = report.succeeded / elapsed if elapsed > 0 else 0.0
        if samples:
            p1, p50, p99 = np.percentile(np.asarray(samples, dtype=np.float64), [1, 50, 99]) / 1e3
            report.p1_us, report.p50_us, report.p99_us = float(p1), float(p50), float(p99)
        if cfg.instrument:
            report.instrumentation = total.as_dict()
        data = heap.data_words()
        report.payload_sum = sum(w >> 2 for w in data)
        report.residual_tags = sum(1 for w in data if w & TAG_MASK)
        return report
    finally:
        heap.close()
        if tmp is not None:
            os.unlink(tmp)


# -- reporting ---------------------------------------------------------------

CONFIG_COLUMNS = ["algorithm", "threads", "k", "alpha", "block_size", "word_count", "timeout",
                  "max_ops", "seed", "backend", "order", "scatter"]
METRIC_COLUMNS = ["succeeded", "failed_attempts", "elapsed_s", "throughput", "p1_us", "p50_us", "p99_us",
                  "payload_sum", "residual_tags", "invariant_ok"]
STAT_COLUMNS = [f.name for f in fields(OpStats)]
CSV_COLUMNS = CONFIG_COLUMNS + METRIC_COLUMNS + STAT_COLUMNS


def report_row(report: BenchReport) -> dict:
    row = {c: getattr(report.config, c) for c in CONFIG_COLUMNS}
    row.update({c: getattr(report, c) for c in METRIC_COLUMNS})
    row.update({c: report.instrumentation.get(c, "") for c in STAT_COLUMNS})
    return row


def emit_report(reports: BenchReport | list[BenchReport], fmt: str = "csv") -> bytes:
    """CSV with one row per run, or a JSON document holding every full report."""
    if isinstance(reports, BenchReport):
        reports = [reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(report_row(r))
        return buf.getvalue().encode()
    if fmt == "json":
        doc = [r.to_json() for r in reports]
        return (json.dumps(doc[0] if len(doc) == 1 else doc, indent=2) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


_SWEEPABLE = {
    "algorithm": str, "threads": int, "k": int, "alpha": float, "block_size": int,
    "word_count": int, "order": str, "timeout": float, "max_ops": int, "seed": int, "backend": str,
}


def parse_sweep(specs: list[str]) -> list[tuple[str, list]]:
    """``["threads=1,2", "alpha=0,1"]`` (or ``;``-joined) -> parameter value lists."""
    axes = []
    for spec in specs:
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            name, sep, values = part.partition("=")
            name = name.strip().replace("-", "_")
            if name == "targets":
                name = "k"
            if not sep or name not in _SWEEPABLE:
                raise BenchConfigError(f"cannot sweep {part!r}; use one of {sorted(_SWEEPABLE)}")
            conv = _SWEEPABLE[name]
            axes.append((name, [conv(v) for v in values.split(",") if v.strip()]))
    return axes


def sweep_configs(base: BenchConfig, axes: list[tuple[str, list]]) -> list[BenchConfig]:
    if not axes:
        return [base]
    names = [n for n, _ in axes]
    return [replace(base, **dict(zip(names, combo))) for combo in itertools.product(*(v for _, v in axes))]


def run_sweep(configs: list[BenchConfig]) -> list[BenchReport]:
    return [run_bench(c) for c in configs]
