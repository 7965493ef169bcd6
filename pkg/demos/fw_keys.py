"""
Steering a stateful firewall without shared state
=================================================

A firewall remembers connections opened from the LAN and only lets WAN
packets through if they answer one of them. To run it on many cores with no
locks, the request and its reply must reach the same core.
"""

from nfshard.corpus import corpus_entry
from nfshard.keygen import KeySearchConfig
from nfshard.nf.packet import Packet, ip
from nfshard.pipeline import analyze

fw = corpus_entry("fw").model()

# Analyze the model: enumerate its paths, collect every state access and
# work out which packets must meet on one core.
report = analyze(fw, seed=7, config=KeySearchConfig(seed=7, verify_samples=200_000))
print(report.to_text().split("----- BEGIN")[0])

# The constraint ties the WAN packet's source to the LAN packet's destination,
# and the ports likewise. Any key pair satisfying it hashes a reply exactly
# like its request.
engine = report.bundle.engine()
request = Packet(0, 0, "lan", ipv4_src=ip("10.0.0.5"), ipv4_dst=ip("93.184.216.34"), sport=40000, dport=443)
reply = Packet(1, 1, "wan", ipv4_src=ip("93.184.216.34"), ipv4_dst=ip("10.0.0.5"), sport=443, dport=40000)
print("request core:", engine.steer("lan", request))
print("reply core:  ", engine.steer("wan", reply))

# A packet of some other connection lands wherever its own hash says.
other = Packet(2, 2, "lan", ipv4_src=ip("10.0.0.6"), ipv4_dst=ip("93.184.216.34"), sport=40001, dport=443)
print("other core:  ", engine.steer("lan", other))
