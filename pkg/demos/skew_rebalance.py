"""
Skewed traffic and indirection-table rebalancing
================================================

With Zipf traffic a handful of flows carry most packets. A round-robin
indirection table then overloads whichever cores those flows hash to.
Reassigning table entries by measured load evens things out, but only down
to the granularity of one entry: a single huge flow stays on one core.
"""

import numpy as np

from nfshard.corpus import corpus_entry
from nfshard.keygen import KeySearchConfig
from nfshard.parsim import TrafficSpec, gen_traffic, measure_skew
from nfshard.pipeline import analyze
from nfshard.rss import IndirectionTable, rebalance_table

fw = corpus_entry("fw").model()
table = IndirectionTable.round_robin(16)
bundle = analyze(fw, seed=5, config=KeySearchConfig(seed=5, verify_samples=10_000)).bundle.with_tables(table)

# 50k packets over 1000 flows; the top 48 flows carry about 80% of them
trace = gen_traffic(TrafficSpec(distribution="zipf"), seed=1)
before = measure_skew(None, table, bundle, trace)
balanced = rebalance_table(table, before.histogram, 16)
after = measure_skew(None, balanced, bundle.with_tables(balanced), trace)
print("zipf trace, max/mean core load")
print(f"  round robin: {before.max_mean:.2f}")
print(f"  rebalanced:  {after.max_mean:.2f}")
print("  busiest entry carries", f"{max(before.histogram) / len(trace):.1%}", "of all packets")
print("  per-core shares after:", np.round(after.shares, 3))

# One flow only: every packet hashes to the same entry, and no table can
# split it.
elephant = gen_traffic(TrafficSpec(packets=5000, flows=1), seed=1)
e_before = measure_skew(None, table, bundle, elephant)
e_after = measure_skew(None, rebalance_table(table, e_before.histogram, 16), bundle, elephant)
print(f"single flow: {e_before.max_mean:.1f} before, {e_after.max_mean:.1f} after (16 cores)")
