"""Scenario tour in the deterministic simulator.

Runs a scaled-down traversal census and the full throughput matrix
without touching a single real socket, then proves determinism by
running one of them twice and comparing report bytes. Takes about half
a minute:

    python3 demos/sim_scenarios.py
"""

import sys

sys.path.insert(0, "src")

from peermesh.scenarios import run_scenario


def main():
    # 500 pairs keeps this quick; the shipped default is 10000, where
    # the statistical band is four standard errors wide.
    print("-- address-translation census (500 endpoint pairs) --")
    report = run_scenario("traversal", seed=5, pairs=500, probe_pairs=60)
    sys.stdout.write(report.to_text())

    print()
    print("-- echo throughput matrix (200 concurrent callers) --")
    report = run_scenario("throughput", seed=3, concurrency=200,
                          max_calls=800)
    sys.stdout.write(report.to_text())
    qps = report.metrics["qps"]
    print()
    print("   qps grid:")
    for profile in ("local", "lan", "wan", "intercontinental"):
        row = qps[profile]
        print("   %-17s %12.1f qps @128B %10.1f qps @256KiB"
              % (profile, row["128"], row["262144"]))

    print()
    print("-- determinism: same seed, same bytes --")
    a = run_scenario("traversal", seed=5, pairs=200, probe_pairs=40)
    b = run_scenario("traversal", seed=5, pairs=200, probe_pairs=40)
    assert a.to_json_bytes() == b.to_json_bytes()
    print("   two runs of (traversal, seed 5) agree on all %d report bytes"
          % len(a.to_json_bytes()))


if __name__ == "__main__":
    main()
