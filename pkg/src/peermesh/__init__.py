"""peermesh: a desk-scale peer-to-peer substrate.

Content-addressed block exchange, Kademlia-style discovery, delta-CRDT
replication, and credit-based RPC, all runnable either on a deterministic
discrete-event network simulator (with full NAT traversal modeling) or over
real loopback sockets for live demos.
"""

__version__ = "0.1.0"

from .ids import Cid, Key256, Keypair, PeerId, compute_cid, xor_distance
from .node import NodeConfig, node_start
from .scenarios import (ScenarioReport, run_scenario, scenario_throughput,
                        scenario_traversal)

__all__ = [
    "Cid",
    "Key256",
    "Keypair",
    "NodeConfig",
    "PeerId",
    "ScenarioReport",
    "compute_cid",
    "node_start",
    "run_scenario",
    "scenario_throughput",
    "scenario_traversal",
    "xor_distance",
    "__version__",
]
