"""Fill the protocol cache: every method on every seed, plus the MBO reference.

    python benchmarks/run_protocol.py [method ...]

Progress goes to stdout. Records already cached are skipped, so the script can be
restarted after an interruption.
"""
import sys
import time

from voltvar import protocol


def main(argv):
    methods = argv or ["alsac", "mbo", "ctde", "sac_delta0.5", "sac_delta5", "ddpg_delta0.5", "ddpg_delta5"]
    proto = protocol.Protocol()
    for method in methods:
        seeds = [None] if method == "mbo" else list(proto.seeds)
        for seed in seeds:
            if protocol.cached(method, seed, proto):
                print(f"{method} seed {seed}: cached", flush=True)
                continue
            start = time.time()

            def tick(row, method=method, seed=seed):
                if row["episode"] % 50 == 49:
                    print(f"  {method} seed {seed} episode {row['episode'] + 1}: "
                          f"cost {row['mean_cost_pu']:.4f} lambda {row['lambda']:.3f} "
                          f"[{time.time() - start:.0f} s]", flush=True)

            rec = protocol.result(method, seed, proto, progress=tick)
            print(f"{method} seed {seed}: loss {rec['test_loss_mw']:.5f} MW, "
                  f"violation {rec['test_violation_pu']:.5f} p.u. [{rec['seconds']:.0f} s]", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
