import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
import hypothesis.extra.numpy as npst

from cyclewatch.errors import CatalogError, DegenerateCycle, UnknownParameter
from cyclewatch.model import (
    CycleAssembler,
    CycleFrame,
    DeviceClass,
    ParameterCatalog,
    TelemetrySample,
    assemble_cycle,
    normalize_param,
    resample_frame,
)


@pytest.fixture(scope="module")
def catalog():
    return ParameterCatalog.demo()


def test_demo_catalog_shape(catalog):
    assert len(catalog) == 40
    assert len(catalog.devices()) == 7
    assert catalog["inj.cycle_start"].dtype.value == "bool"


def test_demo_catalog_round_trips_through_csv(catalog):
    again = ParameterCatalog.from_csv(catalog.to_csv())
    assert list(again) == list(catalog)


def test_normalize_known_name(catalog):
    spec = normalize_param("ActSimPara1", DeviceClass.INJECTION_MACHINE, catalog)
    assert spec.canonical_id == "inj.melt_temp"


def test_normalize_is_case_insensitive(catalog):
    assert normalize_param("actsimpara1", "injection_machine", catalog).canonical_id == "inj.melt_temp"


def test_normalize_unknown(catalog):
    with pytest.raises(UnknownParameter):
        normalize_param("NoSuchName", DeviceClass.ROBOT6AX, catalog)


def test_normalize_requires_matching_device(catalog):
    with pytest.raises(UnknownParameter):
        normalize_param("ActSimPara1", DeviceClass.ROBOT6AX, catalog)


def test_normalize_is_pure(catalog):
    a = normalize_param("PwrActTot", "energy_analyzer", catalog)
    b = normalize_param("PwrActTot", "energy_analyzer", catalog)
    assert a == b


@pytest.mark.parametrize(
    "row",
    [
        "x,X,robot6ax,-,f64,5,5",
        "x,X,robot6ax,-,bool,0,2",
        "x,X,toaster,-,f64,0,1",
        "x,X,robot6ax,-,f64,0",
    ],
)
def test_catalog_rejects_bad_rows(row):
    header = "canonical_id,source_name,device_class,unit,dtype,min,max"
    with pytest.raises(CatalogError):
        ParameterCatalog.from_csv(header + "\n" + row + "\n")


def test_catalog_rejects_duplicate_ids():
    text = "canonical_id,source_name,device_class,unit,dtype,min,max\na,A,robot6ax,-,f64,0,1\na,B,robot6ax,-,f64,0,1\n"
    with pytest.raises(CatalogError):
        ParameterCatalog.from_csv(text)


# --- assembly ---------------------------------------------------------------

T0 = 1_700_000_000_000


def _stream(edges_s, total_s, params=("p1", "p2", "p3"), value=lambda p, t: float(t)):
    for t in range(total_s):
        yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 1000 * t, 1.0 if t in edges_s else 0.0)
        for p in params:
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, p, T0 + 1000 * t, value(p, t))


LAYOUT = ("flag", "p1", "p2", "p3")


def test_assemble_shape_contract():
    frames = list(assemble_cycle(_stream({0, 30}, 31), "flag", params=LAYOUT, energy_param=None, mass_param=None))
    assert len(frames) == 1
    f = frames[0]
    assert f.T == 30
    assert f.ticks.shape == (4, 30)
    assert f.start_ts_ms == T0 and f.end_ts_ms == T0 + 30_000
    np.testing.assert_array_equal(f.row("p1"), np.arange(30.0))


def test_assemble_locf_for_sparse_param():
    def gen():
        for t in range(31):
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 1000 * t, 1.0 if t in (0, 30) else 0.0)
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "p1", T0 + 1000 * t, 1.0)
            if t in (0, 29):
                yield TelemetrySample("c1", DeviceClass.AMBIENT_SENSOR, "amb.humidity", T0 + 1000 * t, 40.0 + t)

    (f,) = assemble_cycle(gen(), "flag", params=("flag", "p1", "amb.humidity"), energy_param=None, mass_param=None)
    row = f.row("amb.humidity")
    assert np.all(row[:29] == 40.0)
    assert row[29] == 69.0


def test_assemble_leading_gap_backfilled():
    def gen():
        for t in range(11):
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 1000 * t, 1.0 if t in (0, 10) else 0.0)
            if t >= 4:
                yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "p1", T0 + 1000 * t, float(t))

    (f,) = assemble_cycle(gen(), "flag", params=("flag", "p1"), energy_param=None, mass_param=None)
    np.testing.assert_array_equal(f.row("p1"), [4, 4, 4, 4, 4, 5, 6, 7, 8, 9])


def test_assemble_energy_scalar_is_difference_of_readings():
    def energy(p, t):
        if p == "e":
            return 100.0 + 0.8 * min(t, 29) / 29 if t < 30 else 100.8 + 0.01 * (t - 30)
        return 1.0

    stream = _stream({0, 30, 60}, 61, params=("e", "m"), value=energy)
    frames = list(assemble_cycle(stream, "flag", params=("flag", "e", "m"), energy_param="e", mass_param="m"))
    assert len(frames) == 2
    assert frames[0].scalars["energy_kwh"] == pytest.approx(0.8, abs=1e-12)
    assert frames[0].scalars["part_mass_g"] == 1.0
    assert [f.cycle_index for f in frames] == [0, 1]


def test_assemble_device_order_within_second_does_not_matter():
    # the edge arrives after other devices have already reported that second
    def gen():
        for t in range(21):
            yield TelemetrySample("c1", DeviceClass.ROBOT6AX, "p1", T0 + 1000 * t, float(t))
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 1000 * t, 1.0 if t in (0, 10, 20) else 0.0)

    frames = list(assemble_cycle(gen(), "flag", params=("flag", "p1"), energy_param=None, mass_param=None))
    assert [f.row("p1")[0] for f in frames] == [0.0, 10.0]


def test_assemble_ignores_late_duplicates():
    samples = list(_stream({0, 10, 20}, 21, params=("p1",)))
    replay = samples[:30] + samples[10:20] + samples[30:]
    asm = CycleAssembler(("flag", "p1"), "flag", energy_param=None, mass_param=None)
    frames = asm.push_many(replay) + asm.flush()
    clean = list(assemble_cycle(samples, "flag", params=("flag", "p1"), energy_param=None, mass_param=None))
    assert len(frames) == len(clean) == 2
    assert all(a.equals(b) for a, b in zip(frames, clean))
    assert asm.late_samples > 0


def test_assemble_stale_cycle_emitted_flagged():
    asm = CycleAssembler(("flag", "p1"), "flag", energy_param=None, mass_param=None, timeout_s=20)
    frames = asm.push_many(_stream({0}, 50, params=("p1",)))
    assert len(frames) == 1 and frames[0].stale and frames[0].T == 20
    assert asm.stale_cycles == 1


def test_assemble_preamble_before_first_edge_is_discarded():
    frames = list(assemble_cycle(_stream({5, 15}, 16, params=("p1",)), "flag", params=("flag", "p1"),
                                 energy_param=None, mass_param=None))
    assert len(frames) == 1 and frames[0].row("p1")[0] == 5.0


def test_assemble_empty_cycle_is_skipped_and_counted():
    def gen():
        for t in range(20):
            yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 1000 * t, 1.0 if t in (0, 10) else 0.0)
            if t >= 10:
                yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "p1", T0 + 1000 * t, 1.0)
        yield TelemetrySample("c1", DeviceClass.INJECTION_MACHINE, "flag", T0 + 20_000, 1.0)

    asm = CycleAssembler(("flag", "p1"), "flag", energy_param=None, mass_param=None)
    frames = asm.push_many(gen()) + asm.flush()
    # 0→10 has only flag samples; flag drops to 0 then the 20 s reading is a new edge only if preceded by 0
    assert asm.empty_cycles == 1
    assert [f.cycle_index for f in frames] == [1]


@settings(max_examples=60, deadline=None)
@given(
    lengths=st.lists(st.integers(2, 40), min_size=1, max_size=6),
    drop=st.lists(st.integers(0, 300), max_size=40),
)
def test_assembled_frames_ordered_and_never_invent_ticks(lengths, drop):
    edges = [0]
    for n in lengths:
        edges.append(edges[-1] + n)
    total = edges[-1] + 1
    dropped = set(drop)
    samples = [
        s for i, s in enumerate(_stream(set(edges), total, params=("p1",)))
        if s.param_id == "flag" or i not in dropped or (s.ts_ms - T0) // 1000 in edges
    ]
    frames = list(assemble_cycle(samples, "flag", params=("flag", "p1"), energy_param=None, mass_param=None))
    assert [f.T for f in frames] == lengths
    for a, b in zip(frames, frames[1:]):
        assert a.end_ts_ms <= b.start_ts_ms
    elapsed = total
    assert sum(f.T for f in frames) <= elapsed + len(frames)
    for f in frames:
        assert round((f.end_ts_ms - f.start_ts_ms) / 1000) - 1 <= f.T <= round((f.end_ts_ms - f.start_ts_ms) / 1000) + 1


# --- resampling -------------------------------------------------------------


def _frame(ticks):
    ticks = np.asarray(ticks, dtype=float)
    return CycleFrame("c", 0, T0, T0 + 1000 * ticks.shape[1], tuple(f"p{i}" for i in range(ticks.shape[0])), ticks)


def test_resample_linear():
    rf = resample_frame(_frame([[0.0, 10.0], [1.0, 1.0]]), 5)
    np.testing.assert_allclose(rf.grid[0], [0, 2.5, 5, 7.5, 10], atol=1e-12)


def test_resample_endpoints_on_random_frame():
    rng = np.random.default_rng(7)
    ticks = rng.normal(size=(5, 37))
    rf = resample_frame(_frame(ticks), 64)
    assert rf.grid.shape == (5, 64)
    # direct indexing oracle
    assert np.array_equal(rf.grid[:, 0], ticks[:, 0])
    assert np.array_equal(rf.grid[:, -1], ticks[:, -1])


def test_resample_matches_numpy_interp():
    rng = np.random.default_rng(3)
    ticks = rng.normal(size=(4, 29))
    rf = resample_frame(_frame(ticks), 64)
    x = np.linspace(0, 28, 64)
    for p in range(4):
        np.testing.assert_allclose(rf.grid[p], np.interp(x, np.arange(29), ticks[p]), atol=1e-12)


def test_resample_degenerate():
    with pytest.raises(DegenerateCycle):
        resample_frame(_frame([[1.0], [2.0]]), 8)


@settings(max_examples=100, deadline=None)
@given(npst.arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 50)),
                   elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_resample_identity_when_lengths_match(ticks):
    rf = resample_frame(_frame(ticks), ticks.shape[1])
    assert np.array_equal(rf.grid, ticks)
