"""
Locks versus shared-nothing under churn
=======================================

With locks, established flows only need read locks. Every new flow takes a
write lock. As the churn rate rises, so does the number of write locks, while
the shared-nothing deployment never touches another core's state.
"""

from nfshard.corpus import corpus_entry
from nfshard.keygen import KeySearchConfig
from nfshard.parsim import SimConfig, TrafficSpec, exec_lock_based, exec_shared_nothing, gen_traffic
from nfshard.pipeline import analyze
from nfshard.rss import IndirectionTable

fw = corpus_entry("fw").model()
bundle = analyze(fw, seed=1, config=KeySearchConfig(seed=1, verify_samples=10_000)).bundle
bundle = bundle.with_tables(IndirectionTable.round_robin(8))

print(f"{'churn/1000 pkts':>16} {'read locks':>11} {'write locks':>12} {'restarts':>9} {'cross-core':>11}")
for churn in (0, 1, 10, 100):
    trace = gen_traffic(TrafficSpec(packets=50_000, reply_ratio=0.3, churn=churn), seed=2)
    _, locks = exec_lock_based(fw, trace, SimConfig(8, seed=2))
    _, sn = exec_shared_nothing(fw, bundle, trace, SimConfig(8))
    print(f"{churn:>16} {locks.read_locks:>11} {locks.write_locks:>12} {locks.restarts:>9} "
          f"{sn.cross_core_accesses:>11}")
