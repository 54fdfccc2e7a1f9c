"""Columnar vs NDJSON size for simulated telemetry, with a per-parameter breakdown.

Frames are assembled from the simulator's payload stream exactly as the
pipeline does, without the broker and log in between.

Usage: python3 scripts/compression_report.py [--cells 10] [--duration 3600] [--store PATH]
"""

from __future__ import annotations

import argparse
import json
import tempfile
import time
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np

from cyclewatch.columnstore import MAX_GROUP_CYCLES, ColumnStore, encode_column
from cyclewatch.model import ParameterCatalog
from cyclewatch.pipeline import LogAssembly, encode_raw
from cyclewatch.simulator import default_cells, stream_payloads


def assemble(cells: int, duration_s: int, seed: int) -> dict[str, list]:
    catalog = ParameterCatalog.demo()
    asm = LogAssembly(catalog)
    by_cell: dict[str, list] = defaultdict(list)
    for i, (topic, payload) in enumerate(stream_payloads(default_cells(cells, seed), duration_s)):
        for f in asm.feed(i, encode_raw(topic, payload)):
            by_cell[f.cell_id].append(f)
    return by_cell


def param_breakdown(by_cell: dict[str, list], params: tuple[str, ...]) -> list[dict]:
    """Encoding choice and bytes per parameter, over the same 256-cycle slices the store uses."""
    enc: dict[str, Counter] = {p: Counter() for p in params}
    size = Counter()
    count = Counter()
    for frames in by_cell.values():
        for k in range(0, len(frames), MAX_GROUP_CYCLES):
            ticks = np.concatenate([f.ticks for f in frames[k:k + MAX_GROUP_CYCLES]], axis=1)
            for i, p in enumerate(params):
                chunk = encode_column(ticks[i], param_id=p)
                enc[p][chunk.encoding] += 1
                size[p] += len(chunk.to_bytes())
                count[p] += chunk.value_count
    return [{"param": p, "encoding": enc[p].most_common(1)[0][0], "bytes": size[p],
             "bytes_per_value": size[p] / max(count[p], 1)} for p in params]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--cells", type=int, default=10)
    ap.add_argument("--duration", type=int, default=3600, help="simulated seconds")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--store", help="keep the store here instead of a temporary directory")
    ap.add_argument("--top", type=int, default=12, help="largest parameters to list")
    args = ap.parse_args()

    t0 = time.perf_counter()
    by_cell = assemble(args.cells, args.duration, args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(args.store) if args.store else Path(tmp) / "store.ccf"
        with ColumnStore.create(path, ParameterCatalog.demo()) as st:
            for cell in sorted(by_cell):
                st.write_rowgroup(by_cell[cell])
            report = st.compression_stats()
            params = st.params
    rows = param_breakdown(by_cell, params)

    print(json.dumps(report.to_json(), indent=2))
    print(f"cycles: {sum(map(len, by_cell.values()))} over {len(by_cell)} cells")
    print(f"encodings: {dict(Counter(r['encoding'] for r in rows))}")
    print(f"\n{'parameter':32s} {'encoding':13s} {'bytes':>9s} {'B/value':>8s}")
    for r in sorted(rows, key=lambda r: -r["bytes"])[:args.top]:
        print(f"{r['param']:32s} {r['encoding']:13s} {r['bytes']:9d} {r['bytes_per_value']:8.3f}")
    print(f"\nelapsed: {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
