import json
import signal
import socket
import subprocess
import sys
import time

import pytest

from cyclewatch.analytics import AnalyticsConfig
from cyclewatch.columnstore import ColumnStore
from cyclewatch.config import RunConfig
from cyclewatch.eventlog import EventLog
from cyclewatch.model import ParameterCatalog
from cyclewatch.pipeline import (
    RAW_TOPIC,
    LogAssembly,
    analyze_store,
    decode_raw,
    encode_raw,
    run_pipeline,
)
from cyclewatch.simulator import CellConfig, simulate_cycle, stream_payloads


def test_raw_record_roundtrip():
    rec = encode_raw("flatform/cell01/scale/data", b'{"a":1}')
    assert decode_raw(rec) == ("flatform/cell01/scale/data", b'{"a":1}')
    with pytest.raises(ValueError):
        decode_raw(b"no separator")


def test_assembly_drops_duplicates_and_tracks_resume():
    cat = ParameterCatalog.demo()
    payloads = [p for _, p in stream_payloads([CellConfig("cell01")], 150)]
    clean = LogAssembly(cat)
    frames = [f for i, p in enumerate(payloads) for f in clean.feed(i, encode_raw("t", p))]
    # replay every payload twice, plus a stale re-send of an early block
    dup = LogAssembly(cat)
    stream = []
    for i, p in enumerate(payloads):
        stream += [p, p]
        if i == 100:
            stream += payloads[10:30]
    got = [f for i, p in enumerate(stream) for f in dup.feed(i, encode_raw("t", p))]
    assert [f.cycle_index for f in got] == [f.cycle_index for f in frames]
    assert all(a.equals(b) for a, b in zip(got, frames))
    assert dup.duplicates == len(stream) - len(payloads)
    # the open cycle begins where the last emitted one ended; 7 records per second
    open_sec = (frames[-1].end_ts_ms - CellConfig("cell01").epoch_start_ms) // 1000
    assert clean.resume_offset(len(payloads)) == 7 * open_sec


def test_pin_holds_resume_offset_until_unpinned():
    cat = ParameterCatalog.demo()
    cfg = CellConfig("cell01")
    payloads = [p for _, p in stream_payloads([cfg], 150)]
    asm = LogAssembly(cat)
    frames = [f for i, p in enumerate(payloads) for f in asm.feed(i, encode_raw("t", p))]
    first_sec = (frames[0].start_ts_ms - cfg.epoch_start_ms) // 1000
    asm.pin("cell01", frames[0].start_ts_ms // 1000)
    assert asm.resume_offset(len(payloads)) == 7 * first_sec
    asm.unpin("cell01")
    open_sec = (frames[-1].end_ts_ms - cfg.epoch_start_ms) // 1000
    assert asm.resume_offset(len(payloads)) == 7 * open_sec


def test_assembly_frames_equal_simulator():
    cat = ParameterCatalog.demo()
    cfg = CellConfig("cell02", seed=5)
    asm = LogAssembly(cat)
    frames = [f for i, (_, p) in enumerate(stream_payloads([cfg], 300)) for f in asm.feed(i, encode_raw("t", p))]
    for f in frames:
        assert f.equals(simulate_cycle(cfg, f.cycle_index)[0])


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = RunConfig(root=root, cells=2, duration_s=1500, seed=4)
    res = run_pipeline(cfg)
    return cfg, res


def test_run_counts_reconcile(small_run):
    cfg, res = small_run
    c = res.manifest["counts"]
    assert res.exit_code == 0
    assert c["publishes"] == c["acked"] == c["bridge_appends"] == c["raw_records"] == 2 * 1500 * 7
    assert c["values"] == 2 * 1500 * 40
    assert c["frames_stored"] == c["frames_analyzed"] > 0
    assert c["duplicates_dropped"] == 0
    man = json.loads(cfg.manifest.read_text())
    assert man["seed"] == 4 and man["config"]["W"] == 10
    assert set(man["versions"]) == {"cyclewatch", "python", "numpy"}


def test_offline_analyze_equals_online(small_run):
    cfg, _ = small_run
    assert analyze_store(cfg.store, AnalyticsConfig()) == cfg.reports.read_bytes()


def test_reports_have_band_columns(small_run):
    cfg, _ = small_run
    energy = [json.loads(x) for x in cfg.reports.read_text().splitlines() if '"energy"' in x]
    assert energy
    assert {"forecast", "lo", "hi", "observed"} <= set(energy[0])


def test_offsets_committed(small_run):
    cfg, res = small_run
    with EventLog(cfg.log_root, readonly=True) as elog:
        end = res.manifest["counts"]["raw_records"]
        for group in ("store", "analytics"):
            assert 0 < elog.fetch_committed(group, RAW_TOPIC) <= end


def test_rerun_is_byte_identical(small_run, tmp_path):
    cfg, _ = small_run
    cfg2 = RunConfig(root=tmp_path, cells=2, duration_s=1500, seed=4)
    assert run_pipeline(cfg2).exit_code == 0
    assert cfg2.reports.read_bytes() == cfg.reports.read_bytes()
    assert cfg2.labels.read_bytes() == cfg.labels.read_bytes()


def test_port_in_use(tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    try:
        port = s.getsockname()[1]
        res = run_pipeline(RunConfig(root=tmp_path, cells=1, duration_s=5, broker=f"127.0.0.1:{port}"))
        assert res.exit_code == 3
    finally:
        s.close()


def _cli(*args):
    return subprocess.Popen([sys.executable, "-m", "cyclewatch.cli", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)


def test_kill9_restart_matches_clean_run(tmp_path):
    args = ["run", "--cells", "3", "--duration", "3000", "--seed", "21"]
    victim = _cli(*args, "--root", str(tmp_path / "victim"))
    time.sleep(3.0)
    if victim.poll() is not None:
        pytest.skip("run finished before it could be killed")
    victim.kill()
    victim.wait()
    assert _cli(*args, "--root", str(tmp_path / "victim")).wait(120) == 0
    assert _cli(*args, "--root", str(tmp_path / "clean")).wait(120) == 0
    man = json.loads((tmp_path / "victim/manifest.json").read_text())
    assert man["counts"]["raw_records"] > man["counts"]["publishes"]  # resumed, not restarted
    for name in ("reports.ndjson", "labels.ndjson"):
        assert (tmp_path / "clean" / name).read_bytes() == (tmp_path / "victim" / name).read_bytes()


def test_sigterm_stops_within_five_seconds(tmp_path):
    p = _cli("run", "--cells", "10", "--duration", "36000", "--root", str(tmp_path))
    time.sleep(3)
    t0 = time.monotonic()
    p.send_signal(signal.SIGTERM)
    code = p.wait(10)
    assert time.monotonic() - t0 <= 5.0
    assert code == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["interrupted"] is True


def test_group_size_changes_layout_not_content(small_run, tmp_path):
    cfg, _ = small_run
    cfg8 = RunConfig(root=tmp_path, cells=2, duration_s=1500, seed=4, store_group_cycles=8)
    assert run_pipeline(cfg8).exit_code == 0
    with ColumnStore.open(cfg.store, readonly=True) as a, ColumnStore.open(cfg8.store, readonly=True) as b:
        assert max(g.n_cycles for g in b.groups) <= 8 < len(b.groups)
        fa, fb = list(a.scan()), list(b.scan())
        assert len(fa) == len(fb) and all(x.equals(y) for x, y in zip(fa, fb))
