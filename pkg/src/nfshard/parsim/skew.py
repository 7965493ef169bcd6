"""Load skew across cores and the per-slot histogram used for rebalancing."""

from __future__ import annotations

from dataclasses import dataclass

from ..rss import IndirectionTable, RssConfigBundle, core_loads


@dataclass
class SkewReport:
    cores: int
    shares: list[float]
    max_mean: float
    histogram: list[int]  # packets per indirection-table slot, all interfaces summed
    default_queue: int  # packets that bypassed the table

    def to_text(self) -> str:
        shares = " ".join(f"{s:.4f}" for s in self.shares)
        return f"cores: {self.cores}\nmax/mean: {self.max_mean:.4f}\nshares: {shares}\n" \
               f"default-queue packets: {self.default_queue}"


def slot_histogram(bundle: RssConfigBundle, trace) -> tuple[list[int], int]:
    engine = bundle.engine()
    size = next(iter(bundle.configs.values())).table.size
    hist = [0] * size
    default = 0
    for p in trace:
        slot = engine.entry(p.in_iface, p)
        if slot is None:
            default += 1
        else:
            hist[slot] += 1
    return hist, default


def measure_skew(metrics, table: IndirectionTable, bundle: RssConfigBundle, trace) -> SkewReport:
    """Per-core shares under ``table`` (shared by all interfaces) plus the slot histogram.

    ``metrics`` may be None; the shares are recomputed from the histogram so
    that the same trace can be evaluated under a different table.
    """
    hist, default = slot_histogram(bundle, trace)
    cores = metrics.cores if metrics is not None else table.cores
    loads = core_loads(table, hist, cores)
    loads[0] += default
    total = sum(loads)
    shares = [x / total if total else 0.0 for x in loads]
    mean = total / cores if cores else 0
    return SkewReport(cores, shares, max(loads) / mean if mean else 0.0, hist, default)
