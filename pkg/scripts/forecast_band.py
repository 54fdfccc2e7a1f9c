"""Per-cycle energy forecast with its confidence band for one simulated cell.

Prints each cycle's observed energy, forecast, band and flag next to the
simulator's label, then a hit/miss summary for energy_surge. ``--csv``
writes the table for plotting.

Usage: python3 scripts/forecast_band.py [--cycles 300] [--seed 0] [--anomaly-rate 0.05] [--csv band.csv]
"""

from __future__ import annotations

import argparse
import csv

from cyclewatch.analytics import AnalyticsConfig, CellDetector
from cyclewatch.simulator import AnomalyKind, CellConfig, simulate_cell


def band_table(cycles: int, seed: int, anomaly_rate: float, cfg: AnalyticsConfig) -> list[dict]:
    cell = CellConfig("cell01", seed=seed, anomaly_rate=anomaly_rate)
    det = CellDetector(cell.cell_id, cfg)
    rows = []
    for f, label in simulate_cell(cell, cycles):
        rep = det.energy_step(f.cycle_index, f.scalars["energy_kwh"])
        if rep is None:
            continue
        rows.append({"cycle": f.cycle_index, **{k: rep.extra[k] for k in ("observed", "forecast", "lo", "hi")},
                     "flagged": rep.flagged, "label": label.kind.value if label else ""})
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--cycles", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--anomaly-rate", type=float, default=0.05)
    ap.add_argument("--z", type=float, default=3.0)
    ap.add_argument("--csv", help="write the table here")
    ap.add_argument("--all", action="store_true", help="print every cycle, not only flagged or labeled ones")
    args = ap.parse_args()

    rows = band_table(args.cycles, args.seed, args.anomaly_rate, AnalyticsConfig(z=args.z))
    print(f"{'cycle':>5s} {'observed':>9s} {'forecast':>9s} {'lo':>9s} {'hi':>9s}  flag  label")
    for r in rows:
        if args.all or r["flagged"] or r["label"]:
            print(f"{r['cycle']:5d} {r['observed']:9.4f} {r['forecast']:9.4f} {r['lo']:9.4f} {r['hi']:9.4f}"
                  f"  {'*' if r['flagged'] else ' ':4s}  {r['label']}")

    surge = [r for r in rows if r["label"] == AnomalyKind.ENERGY_SURGE.value]
    other = [r for r in rows if r["label"] != AnomalyKind.ENERGY_SURGE.value]
    print(f"\nenergy_surge flagged: {sum(r['flagged'] for r in surge)}/{len(surge)}")
    print(f"other cycles flagged: {sum(r['flagged'] for r in other)}/{len(other)}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
