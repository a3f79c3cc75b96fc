"""Multi-step architecture filtering.

1. enumerate the Cartesian product of a search space (lazily, fixed order);
2. keep candidates whose analytic kMACs/pixel fall in a band;
3. sample, cost with a pluggable runtime model, keep those near a target;
4. rank by an externally supplied metric.

Enumeration order: stage 1 varies slowest; within a stage the order is
``C, R1, E1, F1, R2, E2, F2`` with each set in its listed order.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .model import ModelConfig, StageConfig, analytic_kmacs

logger = logging.getLogger(__name__)

STAGE_KEYS = ("C", "R1", "E1", "F1", "R2", "E2", "F2")


@dataclass(frozen=True)
class SearchSpace:
    """Per-stage value sets plus the fixed part of the configuration."""

    role: str
    stages: tuple  # of dicts mapping STAGE_KEYS -> tuple of values
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, st in enumerate(self.stages):
            for key in STAGE_KEYS:
                vals = st.get(key)
                if not vals:
                    raise ValueError(f"stages[{i}].{key}: value set must be non-empty")

    @property
    def cardinality(self) -> int:
        return math.prod(len(st[k]) for st in self.stages for k in STAGE_KEYS)

    def stage_options(self, i: int) -> list[StageConfig]:
        st = self.stages[i]
        return [StageConfig.of(*vals) for vals in itertools.product(*(st[k] for k in STAGE_KEYS))]

    def template(self) -> ModelConfig:
        first = tuple(StageConfig.of(*(st[k][0] for k in STAGE_KEYS)) for st in self.stages)
        return ModelConfig(role=self.role, stages=first, **self.base).validate()

    def hp_names(self) -> list[str]:
        names = []
        for i in range(len(self.stages)):
            s = i + 1
            names += [f"C{s}", f"R{s}1", f"E{s}1", f"F{s}1", f"R{s}2", f"E{s}2", f"F{s}2"]
        return names

    @classmethod
    def from_json(cls, path) -> "SearchSpace":
        doc = json.loads(Path(path).read_text())
        stages = tuple({k: tuple(int(v) for v in st[k]) for k in STAGE_KEYS} for st in doc["stages"])
        return cls(doc["role"], stages, dict(doc.get("base", {})))


def _space(role, rows):
    return SearchSpace(role, tuple(dict(zip(STAGE_KEYS, (tuple(v) for v in row))) for row in rows))


# Outer encoder search sets.
TABLE5A = _space("outer_encoder", [
    ([32, 64], [1, 2], [1], [1, 2], [1, 2], [1, 2, 4], [1, 2]),
    ([64, 96], [2, 4], [1], [1], [1, 2, 3], [1, 2, 4], [1, 2]),
    ([96, 128, 160], [2, 4, 6], [1], [1], [2, 4], [1, 2, 4], [1, 2]),
])

# Outer decoder search sets.
TABLE5B = _space("outer_decoder", [
    ([96, 128, 160], [2, 3, 4], [1], [1], [2, 3], [1, 2, 4], [1, 2]),
    ([64, 96], [1, 2, 3], [1], [1], [1, 2], [1, 2, 4], [1, 2]),
    ([32, 64], [1, 2], [1, 2], [1, 2], [1, 2], [1, 2, 3], [1, 2]),
])

SPACES = {"table5a": TABLE5A, "table5b": TABLE5B}


def load_space(name_or_path: str) -> SearchSpace:
    if name_or_path in SPACES:
        return SPACES[name_or_path]
    return SearchSpace.from_json(name_or_path)


# ---------------------------------------------------------------------------
# Stage 1: enumeration
# ---------------------------------------------------------------------------


def enumerate_space(space: SearchSpace) -> tuple[Iterator[ModelConfig], int]:
    """``(stream, cardinality)``; the stream yields configs lazily in the
    documented order.  Stage values are validated once up front, so each
    yielded config is a cheap copy of a validated template."""
    template = space.template()
    options = [space.stage_options(i) for i in range(len(space.stages))]
    for i, opts in enumerate(options):
        for st in opts:
            replace(template, stages=template.stages[:i] + (st,) + template.stages[i + 1:]).validate()
    proto = dict(template.__dict__)

    def stream() -> Iterator[ModelConfig]:
        for stages in itertools.product(*options):
            cfg = object.__new__(ModelConfig)
            d = cfg.__dict__
            d.update(proto)
            d["stages"] = stages
            yield cfg

    return stream(), space.cardinality


def config_key(cfg: ModelConfig) -> str:
    """Stable text key for a configuration's searched values, e.g. ``160-3-1-1-2-1-2/...``."""
    return "/".join("-".join(str(v) for v in st.as_tuple()) for st in cfg.stages)


# ---------------------------------------------------------------------------
# Stage 2: kMACs filter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateRecord:
    config: ModelConfig
    kmacs_per_pixel: float
    index: int
    runtime_ms: Optional[float] = None
    metric: Optional[float] = None


def filter_by_macs(stream: Iterable[ModelConfig], lo: float, hi: float, workers: int = 1,
                   chunk: int = 65536) -> Iterator[CandidateRecord]:
    """Keep configurations with ``lo <= kMACs/pixel <= hi``.

    With ``workers > 1`` chunks are costed concurrently; results are still
    yielded in enumeration order.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")

    def run(batch):
        out = []
        for idx, cfg in batch:
            k = analytic_kmacs(cfg)
            if lo <= k <= hi:
                out.append(CandidateRecord(cfg, k, idx))
        return out

    indexed = enumerate(stream)
    if workers <= 1:
        for idx, cfg in indexed:
            k = analytic_kmacs(cfg)
            if lo <= k <= hi:
                yield CandidateRecord(cfg, k, idx)
        return
    batches = iter(lambda: list(itertools.islice(indexed, chunk)), [])
    with ThreadPoolExecutor(workers) as pool:
        for result in pool.map(run, batches):
            yield from result


# ---------------------------------------------------------------------------
# Stage 3: sampled runtime filter
# ---------------------------------------------------------------------------


CostModel = Callable[[CandidateRecord], float]


def constant_cost(ms: float) -> CostModel:
    return lambda rec: float(ms)


def kmacs_linear_cost(a: float, b: float = 0.0) -> CostModel:
    """``a * kMACs/pixel + b`` milliseconds per tile."""
    return lambda rec: a * rec.kmacs_per_pixel + b


def table_cost(path) -> CostModel:
    """Look runtimes up in a CSV with columns ``config_key,runtime_ms``."""
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["config_key"]] = float(row["runtime_ms"])

    def cost(rec: CandidateRecord) -> float:
        return table[config_key(rec.config)]

    return cost


def sample_and_cost(records, n: int, seed: int, cm: CostModel, target_ms: float, tol: float,
                    stats: Optional[dict] = None) -> list[CandidateRecord]:
    """Uniformly sample ``n`` records without replacement, cost them, and keep
    those within ``tol * target_ms`` of the target.  Results keep enumeration
    order.  Cost-model failures drop the record and are counted in
    ``stats["failed"]``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    records = list(records)
    if n >= len(records):
        picked = records
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(records), size=n, replace=False))
        picked = [records[i] for i in idx]
    kept, failed = [], 0
    for rec in picked:
        try:
            ms = float(cm(rec))
        except Exception as exc:  # a broken measurement must not stop the search
            logger.warning("cost model failed on candidate %d: %s", rec.index, exc)
            failed += 1
            continue
        if not math.isfinite(ms):
            failed += 1
            continue
        if abs(ms - target_ms) <= tol * target_ms:
            kept.append(replace(rec, runtime_ms=ms))
    if stats is not None:
        stats.update(sampled=len(picked), failed=failed, retained=len(kept))
    return kept


# ---------------------------------------------------------------------------
# Stage 4: ranking
# ---------------------------------------------------------------------------


def rank_candidates(records, k: int, key: str = "metric", descending: bool = False) -> list[CandidateRecord]:
    """Top ``k`` by ``key``; ties go to the smaller enumeration index."""
    records = list(records)
    for rec in records:
        v = getattr(rec, key)
        if v is None:
            raise ValueError(f"candidate {rec.index} has no {key}")
    sign = -1.0 if descending else 1.0
    return sorted(records, key=lambda r: (sign * getattr(r, key), r.index))[:k]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_records_csv(records, path, space: SearchSpace) -> None:
    names = space.hp_names()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", *names, "kmacs", "runtime_ms", "metric"])
        for rec in records:
            hps = [v for st in rec.config.stages for v in st.as_tuple()]
            w.writerow([rec.index, *hps, repr(rec.kmacs_per_pixel),
                        "" if rec.runtime_ms is None else repr(rec.runtime_ms),
                        "" if rec.metric is None else repr(rec.metric)])


def read_records_csv(path, space: SearchSpace) -> list[CandidateRecord]:
    template = space.template()
    names = space.hp_names()
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = [int(row[n]) for n in names]
            stages = tuple(StageConfig.of(*vals[i:i + 7]) for i in range(0, len(vals), 7))
            cfg = replace(template, stages=stages).validate()
            kmacs = float(row["kmacs"]) if row.get("kmacs") else analytic_kmacs(cfg)
            out.append(CandidateRecord(
                cfg, kmacs, int(row["config_id"]),
                float(row["runtime_ms"]) if row.get("runtime_ms") else None,
                float(row["metric"]) if row.get("metric") else None,
            ))
    return out
