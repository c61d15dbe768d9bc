"""Command-line interface: solve benchmarks, compare against reference tables,
list domains, and render report figures from result/trace CSVs."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import bench
from .domains import DOMAIN_DIR_ENV, list_domains


def _add_solve(sub):
    p = sub.add_parser("solve", help="run a solver on a domain and write CSV")
    p.add_argument("--domain", required=True,
                   help="builtin:tiger | builtin:gridsmall | file:PATH | name "
                        f"(searched in ${DOMAIN_DIR_ENV}, cwd, packaged data)")
    p.add_argument("--agents", type=int, default=None,
                   help="agent count for builtin: domains")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--gamma", type=float, default=None,
                   help="override the model's discount")
    p.add_argument("--algo", required=True, choices=bench.ALGORITHMS)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--time-limit", type=float, default=None, help="seconds per run")
    p.add_argument("--epsilon0", type=float, default=0.5)
    p.add_argument("--temperature-coeff", type=float, default=4.0)
    p.add_argument("--prune", type=float, default=0.0,
                   help="occupancy pruning threshold (0 = exact)")
    p.add_argument("--guard", type=int, default=200_000,
                   help="enumeration guard for exhaustive selections")
    p.add_argument("--output", default="results.csv")
    p.add_argument("--trace-out", default=None,
                   help="also write the per-episode solver trace CSV here")
    p.add_argument("--no-timing", action="store_true",
                   help="omit wall-clock columns so reruns diff byte-identically")
    return p


def _cmd_solve(args) -> int:
    spec = bench.RunSpec(
        domain=args.domain, algorithm=args.algo, horizon=args.horizon,
        agents=args.agents, gamma=args.gamma, seeds=args.seeds,
        seed_base=args.seed_base, episodes=args.episodes,
        time_limit=args.time_limit, epsilon0=args.epsilon0,
        temperature_coeff=args.temperature_coeff, prune_eps=args.prune,
        guard=args.guard, include_timing=not args.no_timing)
    rows = bench.run_benchmark(spec, trace_path=args.trace_out)
    bench.write_csv(args.output, rows)
    for row in rows:
        print(",".join(str(row[c]) for c in bench.CSV_COLUMNS))
    return 0


def _cmd_compare(args) -> int:
    rows, code = bench.compare_reference(args.csv, tolerance=args.tolerance)
    width = max((len(r.domain) for r in rows), default=6)
    for r in rows:
        print(f"{r.domain:{width}s} n={r.n} h={r.horizon:<3d} {r.algorithm:10s} "
              f"ours={r.ours:>12s} ref={r.reference:>8s}  {r.status}")
    if code:
        print("FAIL: at least one result is worse than the reference beyond "
              f"tolerance {args.tolerance}", file=sys.stderr)
    return code


def _cmd_list_domains(_args) -> int:
    groups = list_domains()
    for group, names in groups.items():
        print(f"{group}:")
        for name in names:
            print(f"  {name}")
    return 0


def _cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    made = []

    if args.trace:
        by_run: dict[tuple, list[dict]] = {}
        with open(args.trace, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["domain"], row["algorithm"], row["horizon"], row["seed"])
                by_run.setdefault(key, []).append(row)
        fig, ax = plt.subplots(figsize=(6.5, 4))
        for (domain, algo, horizon, seed), recs in sorted(by_run.items()):
            xs = [int(r["episode"]) for r in recs]
            ys = [float(r["best_value"]) for r in recs]
            ax.plot(xs, ys, label=f"{domain} h={horizon} {algo} seed {seed}")
        ax.set_xlabel("episode")
        ax.set_ylabel("best evaluated return")
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        path = outdir / "trace.png"
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
        made.append(path)

    if args.csv:
        table = bench.reference_table()
        picked: dict[tuple, tuple[str, bool]] = {}
        with open(args.csv, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["value"] == bench.OOT:
                    continue
                key = (row["domain"], row["n"], row["horizon"], row["algorithm"])
                is_best = row["seed"] == "best"
                if key not in picked or is_best:
                    picked[key] = (row["value"], is_best)
        labels, ours, refs = [], [], []
        for (domain, n, horizon, algo), (value, _) in sorted(picked.items()):
            ref = table.lookup(domain, int(n), int(horizon), algo)
            if not isinstance(ref, (int, float)):
                continue
            labels.append(f"{domain}({n}) h{horizon}\n{algo}")
            ours.append(float(value))
            refs.append(float(ref))
        if labels:
            import numpy as np
            x = np.arange(len(labels))
            fig, ax = plt.subplots(figsize=(max(6.5, 1.1 * len(labels)), 4))
            ax.bar(x - 0.18, ours, width=0.36, label="this run")
            ax.bar(x + 0.18, refs, width=0.36, label="reference")
            ax.set_xticks(x)
            ax.set_xticklabels(labels, fontsize=7)
            ax.set_ylabel("best value")
            ax.legend()
            ax.grid(axis="y", alpha=0.3)
            path = outdir / "comparison.png"
            fig.tight_layout()
            fig.savefig(path, dpi=150)
            plt.close(fig)
            made.append(path)

    for path in made:
        print(f"wrote {path}")
    if not made:
        print("nothing to report: pass --trace and/or --csv", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="seqplan",
        description="Finite-horizon Dec-POMDP planning via sequential-move "
                    "occupancy states")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_solve(sub)
    p = sub.add_parser("compare", help="diff a results CSV against the reference tables")
    p.add_argument("csv")
    p.add_argument("--tolerance", type=float, default=0.02)
    sub.add_parser("list-domains", help="show resolvable domain names")
    p = sub.add_parser("report", help="render figures for result/trace CSVs")
    p.add_argument("--csv", default=None, help="results CSV (for reference comparison)")
    p.add_argument("--trace", default=None, help="trace CSV from solve --trace-out")
    p.add_argument("--outdir", default="report")
    args = parser.parse_args(argv)
    if args.command == "solve":
        return _cmd_solve(args)
    if args.command == "compare":
        return _cmd_compare(args)
    if args.command == "list-domains":
        return _cmd_list_domains(args)
    if args.command == "report":
        return _cmd_report(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
