"""Named end-to-end experiments with deterministic reports.

A scenario is a closed simulation: it builds its own network from a
seed, runs one experiment, grades the outcome against the claims it
exists to check, and returns a ScenarioReport. Reports serialize
canonically, so one seed yields one byte sequence, which is what makes
them diffable across machines and commits.

Scenario files (for the command line) are small YAML mappings naming
the scenario, the seed, and optional parameter overrides for scaled
down runs.
"""

from dataclasses import dataclass, field

import yaml

from .errors import PeermeshError
from .ids import Keypair
from .live import canonical_json
from .rpc import RpcService, bench_rpc
from .simnet import LinkProfile, SimNetwork
from .traversal import (ConnectionManager, TraversalConfig,
                        traversal_experiment)


class BadScenario(PeermeshError):
    """Scenario file rejected; the message names the offending field."""


# The endpoint population used by the pair experiment: shares of hosts
# behind each translator behavior, matching the deployment measurements
# this architecture was sized against. With these weights the closed
# form for the share of pairs that settle on a direct or punched path
# is 0.6976.
DEFAULT_POPULATION = {
    "full_cone": 0.12,
    "addr_restricted": 0.20,
    "port_restricted": 0.40,
    "symmetric": 0.28,
}

PROFILE_ORDER = ("local", "lan", "wan", "intercontinental")

PROFILES = {
    "local": LinkProfile(latency_us=50, bytes_per_sec=1_250_000_000),
    "lan": LinkProfile(latency_us=500, bytes_per_sec=125_000_000),
    "wan": LinkProfile(latency_us=15_000, bytes_per_sec=12_500_000),
    "intercontinental": LinkProfile(latency_us=40_000, bytes_per_sec=6_250_000),
}

PAYLOAD_SIZES = (128, 262144)

# Reference throughput columns, queries per second, as measured on the
# reference hardware deployment. Reported beside the simulated numbers
# for orientation only; no check asserts against them, because a
# discrete-event model prices per-byte costs differently than a kernel
# network stack does.
REFERENCE_QPS = {
    "local": {"128": 10000, "262144": 850},
    "lan": {"128": 8000, "262144": 600},
    "wan": {"128": 3000, "262144": 280},
    "intercontinental": {"128": 1200, "262144": 110},
}


@dataclass
class ScenarioReport:
    """Outcome of one scenario run: metrics plus graded checks."""

    name: str
    seed: int
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)  # {"check","ok","detail"}

    @property
    def passed(self):
        return all(c["ok"] for c in self.checks)

    def check(self, label, ok, detail):
        self.checks.append({"check": label, "ok": bool(ok), "detail": detail})

    def to_mapping(self):
        return {"name": self.name, "seed": self.seed, "passed": self.passed,
                "metrics": self.metrics, "checks": self.checks}

    def to_json_bytes(self):
        return canonical_json(self.to_mapping()) + b"\n"

    def to_text(self):
        lines = ["scenario %s (seed %d): %s" % (
            self.name, self.seed, "PASS" if self.passed else "FAIL")]
        for c in self.checks:
            lines.append("  [%s] %-40s %s" % (
                "ok" if c["ok"] else "FAIL", c["check"], c["detail"]))
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------- traversal


def scenario_traversal(seed, pairs=10000, probe_pairs=300):
    """Pair experiment over the mixed population plus two boundary probes.

    The mixed run draws both endpoints from DEFAULT_POPULATION and must
    land the direct-or-punched share within two points of the closed
    form; the boundary probes pin the extremes (all public hosts never
    need help, all symmetric pairs always ride the relay).
    """
    report = ScenarioReport("traversal", seed)
    mixed = traversal_experiment(DEFAULT_POPULATION, pairs=pairs, seed=seed)
    all_public = traversal_experiment({"public": 1.0}, pairs=probe_pairs,
                                      seed=seed + 1)
    all_sym = traversal_experiment({"symmetric": 1.0}, pairs=probe_pairs,
                                   seed=seed + 2)
    report.metrics = {
        "population": DEFAULT_POPULATION,
        "pairs": pairs,
        "probe_pairs": probe_pairs,
        "mixed": _trim(mixed),
        "all_public": _trim(all_public),
        "all_symmetric": _trim(all_sym),
    }

    rate = mixed["direct_or_punched_rate"]
    report.check("mixed-rate-in-band", abs(rate - 0.698) <= 0.02,
                 "direct+punched %.4f, band [0.6780, 0.7180]" % rate)
    report.check("mixed-full-connectivity", mixed["unreachable"] == 0,
                 "%d of %d pairs unreachable" % (mixed["unreachable"], pairs))
    settled = mixed["direct"] + mixed["punched"] + mixed["relayed"]
    report.check("mixed-remainder-relayed", settled == pairs,
                 "direct %d + punched %d + relayed %d = %d" % (
                     mixed["direct"], mixed["punched"], mixed["relayed"],
                     settled))
    report.check("all-public-direct", all_public["direct"] == probe_pairs,
                 "%d of %d pairs direct" % (all_public["direct"], probe_pairs))
    sym_ok = (all_sym["relayed"] == probe_pairs
              and all_sym["direct"] + all_sym["punched"] == 0
              and all_sym["unreachable"] == 0)
    report.check("all-symmetric-relayed", sym_ok,
                 "direct %d punched %d relayed %d unreachable %d" % (
                     all_sym["direct"], all_sym["punched"],
                     all_sym["relayed"], all_sym["unreachable"]))
    return report


def _trim(experiment):
    keep = ("direct", "punched", "relayed", "unreachable",
            "direct_or_punched_rate")
    return {k: experiment[k] for k in keep}


# ------------------------------------------------------ throughput matrix


def scenario_throughput(seed, concurrency=1000, max_calls=3000):
    """Echo-load matrix: four link profiles by two payload sizes.

    Absolute queries-per-second depend on what a transport stack
    charges per byte, so the grid is graded on orderings only: farther
    links must be strictly slower at both payload sizes, and the large
    payload must be slower than the small one on every link. The
    reference hardware columns ride along in the metrics, unasserted.
    """
    report = ScenarioReport("throughput", seed)
    qps = {}
    p50 = {}
    p99 = {}
    for pi, profile in enumerate(PROFILE_ORDER):
        qps[profile] = {}
        p50[profile] = {}
        p99[profile] = {}
        for si, size in enumerate(PAYLOAD_SIZES):
            cell = bench_cell(seed + 10 * pi + si, PROFILES[profile],
                               size, concurrency, max_calls)
            qps[profile][str(size)] = round(cell["qps"], 1)
            p50[profile][str(size)] = cell["p50"]
            p99[profile][str(size)] = cell["p99"]
    report.metrics = {
        "concurrency": concurrency,
        "max_calls": max_calls,
        "payload_sizes": list(PAYLOAD_SIZES),
        "profiles": {name: {"latency_us": PROFILES[name].latency_us,
                            "bytes_per_sec": PROFILES[name].bytes_per_sec}
                     for name in PROFILE_ORDER},
        "qps": qps,
        "p50_us": p50,
        "p99_us": p99,
        "reference_qps": REFERENCE_QPS,
    }

    for size in PAYLOAD_SIZES:
        col = [qps[p][str(size)] for p in PROFILE_ORDER]
        ok = all(col[i] > col[i + 1] for i in range(len(col) - 1))
        report.check("qps-decreasing-with-distance-%d" % size, ok,
                     " > ".join("%.1f" % q for q in col))
    for profile in PROFILE_ORDER:
        small = qps[profile][str(PAYLOAD_SIZES[0])]
        large = qps[profile][str(PAYLOAD_SIZES[1])]
        report.check("small-payload-faster-%s" % profile, small > large,
                     "%.1f qps at %dB vs %.1f qps at %dB" % (
                         small, PAYLOAD_SIZES[0], large, PAYLOAD_SIZES[1]))
    return report


def bench_cell(seed, link, size, concurrency, max_calls):
    net = SimNetwork(seed=seed, trace_enabled=False)
    cfg = TraversalConfig(sign_hellos=False, auto_renew_reservation=False)
    sides = []
    for _ in range(2):
        host = net.add_node(link=link)
        mgr = ConnectionManager(host, Keypair.generate(host.rng), cfg)
        mgr.start()
        sides.append((host, RpcService(mgr)))
    conn_fut = sides[0][1].mgr.connect_addr(sides[1][0].address)
    net.run_until_done(conn_fut, limit_us=net.now_us + 30_000_000)
    fut = bench_rpc(sides[0][1], sides[1][1], size, concurrency,
                    600_000_000, max_calls=max_calls)
    return net.run_until_done(fut, limit_us=net.now_us + 1_800_000_000)


# ------------------------------------------------------------ dispatch


SCENARIOS = {
    "traversal": (scenario_traversal, {"pairs", "probe_pairs"}),
    "throughput": (scenario_throughput, {"concurrency", "max_calls"}),
}


def run_scenario(name, seed, **params):
    entry = SCENARIOS.get(name)
    if entry is None:
        raise BadScenario("unknown scenario %r (have: %s)"
                          % (name, ", ".join(sorted(SCENARIOS))))
    fn, allowed = entry
    for key in params:
        if key not in allowed:
            raise BadScenario("scenario %s takes no parameter %r"
                              % (name, key))
    return fn(seed, **params)


def load_scenario_file(path):
    """Parse a scenario file into (name, seed, params)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh.read())
    except OSError as exc:
        raise BadScenario("cannot read %s: %s" % (path, exc))
    except yaml.YAMLError as exc:
        raise BadScenario("%s is not valid yaml: %s" % (path, exc))
    if not isinstance(data, dict):
        raise BadScenario("scenario file must be a mapping")
    name = data.get("scenario")
    if not isinstance(name, str):
        raise BadScenario("scenario: expected a name string")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise BadScenario("seed: expected an integer")
    params = data.get("params", {})
    if params is None:
        params = {}
    if not isinstance(params, dict):
        raise BadScenario("params: expected a mapping")
    for key, value in params.items():
        if not isinstance(value, int) or isinstance(value, bool):
            raise BadScenario("params.%s: expected an integer" % key)
    unknown = set(data) - {"scenario", "seed", "params"}
    if unknown:
        raise BadScenario("unknown key %r in scenario file"
                          % sorted(unknown)[0])
    return name, seed, params
