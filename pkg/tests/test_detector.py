"""Detector: allocation verdicts, shadow divergence, reports, verdict folding."""

import random

import pytest
from hypothesis import given, settings, strategies as st

from heapprobe.detector import (
    ImpactEvent,
    ImpactReport,
    ShadowState,
    final_verdict,
)
from heapprobe.model import ImpactClass, ModelSpec, Site

CONT_BASE, CONT_SIZE = 0x10000, 64
BUF_BASE, BUF_SIZE = 0x20000, 64


class FakeMemory:
    """Byte-addressable fake process memory for the injectable reader."""

    def __init__(self):
        self.regions = {
            CONT_BASE: bytearray(CONT_SIZE),
            BUF_BASE: bytearray(BUF_SIZE),
        }

    def read(self, addr, size):
        for base, data in self.regions.items():
            if base <= addr and addr + size <= base + len(data):
                return bytes(data[addr - base:addr - base + size])
        raise AssertionError(f"read outside fake memory: {addr:#x}")

    def write(self, addr, payload):
        for base, data in self.regions.items():
            if base <= addr and addr + len(payload) <= base + len(data):
                data[addr - base:addr - base + len(payload)] = payload
                return
        raise AssertionError(f"write outside fake memory: {addr:#x}")


@pytest.fixture
def mem():
    return FakeMemory()


@pytest.fixture
def shadow(mem):
    return ShadowState(CONT_BASE, CONT_SIZE, BUF_BASE, BUF_SIZE,
                       reader=mem.read)


class TestScenarioSuite:
    """The five numbered shadow-memory states, scripted by hand."""

    def test_state_1_initial(self, shadow):
        assert shadow.check_divergence(False, 0) is None

    def test_state_2_legitimate_writes_synced(self, mem, shadow):
        mem.write(CONT_BASE, b"\x11" * 16)   # engine records a chunk
        shadow.sync_container(0, 16)
        mem.write(BUF_BASE + 8, b"\x22" * 8)  # engine buffer write
        shadow.sync_buffer(8, 8)
        assert shadow.check_divergence(False, 1) is None

    def test_state_3_divergence_during_free_is_rw_container(self, mem, shadow):
        mem.write(CONT_BASE + 0, b"\x33" * 8)  # unlink writes through fd/bk
        ev = shadow.check_divergence(True, 2)
        assert ev == ImpactEvent(ImpactClass.RW, Site.CONTAINER, 2)

    def test_state_4_divergence_during_heap_write_is_aw_container(
            self, mem, shadow):
        mem.write(CONT_BASE + 8, b"\x44" * 8)
        ev = shadow.check_divergence(False, 3)
        assert ev == ImpactEvent(ImpactClass.AW, Site.CONTAINER, 3)

    def test_state_5_divergence_in_buffer_is_aw_buffer(self, mem, shadow):
        mem.write(BUF_BASE + 16, b"\x55" * 8)
        ev = shadow.check_divergence(False, 4)
        assert ev == ImpactEvent(ImpactClass.AW, Site.BUFFER, 4)


class TestDivergence:
    def test_resync_suppresses_repeat(self, mem, shadow):
        mem.write(CONT_BASE, b"\x99" * 8)
        assert shadow.check_divergence(False, 0) is not None
        assert shadow.check_divergence(False, 1) is None

    def test_container_site_wins_when_both_diverge(self, mem, shadow):
        mem.write(CONT_BASE, b"\x01")
        mem.write(BUF_BASE, b"\x02")
        ev = shadow.check_divergence(False, 0)
        assert ev.site is Site.CONTAINER
        # both shadows resynced in one go
        assert shadow.check_divergence(False, 1) is None

    def test_family_flag_selects_rw_vs_aw(self, mem, shadow):
        mem.write(BUF_BASE, b"\x01")
        assert shadow.check_divergence(True, 0).impact is ImpactClass.RW
        mem.write(BUF_BASE, b"\x02")
        assert shadow.check_divergence(False, 1).impact is ImpactClass.AW


class TestAllocationVerdicts:
    def test_new_chunk_at_container_base_is_ac(self, shadow):
        ev = shadow.check_allocation(CONT_BASE, 16, 0)
        assert ev.impact is ImpactClass.AC and ev.site is None

    def test_new_chunk_in_buffer_is_ac(self, shadow):
        assert shadow.check_allocation(BUF_BASE + 8, 8, 0).impact is \
            ImpactClass.AC

    def test_overlap_with_live_replica_is_oc(self, shadow):
        shadow.record_chunk(0x1000, 0x20)
        ev = shadow.check_allocation(0x1010, 32, 1)
        assert ev.impact is ImpactClass.OC

    def test_disjoint_chunk_is_none(self, shadow):
        shadow.record_chunk(0x1000, 0x20)
        assert shadow.check_allocation(0x5000, 32, 1) is None

    def test_freed_replicas_ignored(self, shadow):
        shadow.record_chunk(0x1000, 0x20)
        shadow.mark_freed(0)
        assert shadow.check_allocation(0x1000, 0x20, 1) is None

    def test_ac_takes_precedence_over_oc(self, shadow):
        shadow.record_chunk(CONT_BASE - 8, 0x20)  # straddles into container
        ev = shadow.check_allocation(CONT_BASE - 8, 0x20, 1)
        assert ev.impact is ImpactClass.AC

    def test_zero_size_treated_as_one_byte(self, shadow):
        shadow.record_chunk(0x1000, 0)
        assert shadow.check_allocation(0x1000, 0, 1).impact is ImpactClass.OC
        assert shadow.check_allocation(0x1001, 0, 1) is None

    def test_brute_force_interval_oracle_10k(self, shadow):
        rng = random.Random(0x0C)
        regions = [(CONT_BASE, CONT_BASE + CONT_SIZE),
                   (BUF_BASE, BUF_BASE + BUF_SIZE)]
        reps = []
        for _ in range(40):
            base = rng.randrange(0x1000, 0x40000, 8)
            size = rng.randint(0, 64)
            live = rng.random() < 0.7
            shadow.record_chunk(base, size)
            if not live:
                shadow.mark_freed(len(reps))
            reps.append((base, max(size, 1), live))
        for _ in range(10_000):
            base = rng.randrange(0x1000, 0x40000)
            size = rng.randint(0, 96)
            lo, hi = base, base + max(size, 1)
            bytes_new = set(range(lo, hi))
            expect = None
            if any(bytes_new & set(range(a, b)) for a, b in regions):
                expect = ImpactClass.AC
            elif any(live and bytes_new & set(range(b0, b0 + sz))
                     for b0, sz, live in reps):
                expect = ImpactClass.OC
            got = shadow.check_allocation(base, size, 0)
            assert (got.impact if got else None) == expect


class TestFinalVerdict:
    def _ev(self, impact, site, idx):
        return ImpactEvent(impact, site, idx)

    def test_no_events_no_report(self):
        assert final_verdict([], ModelSpec.default(), bug="none",
                             trace_hex="", salt=0, target="t") is None

    def test_severity_order(self):
        events = [self._ev(ImpactClass.RW, Site.CONTAINER, 3),
                  self._ev(ImpactClass.AW, Site.BUFFER, 5)]
        report = final_verdict(events, ModelSpec.default(), bug="OF",
                               trace_hex="00", salt=1, target="t")
        assert report.impact == "AW" and report.action_index == 5
        assert len(report.events) == 2

    def test_ac_beats_everything(self):
        events = [self._ev(ImpactClass.AW, Site.BUFFER, 1),
                  self._ev(ImpactClass.AC, None, 9)]
        report = final_verdict(events, ModelSpec.default(), bug="FF",
                               trace_hex="00", salt=0, target="t")
        assert report.impact == "AC" and report.site == "-"

    def test_tie_goes_to_earliest(self):
        events = [self._ev(ImpactClass.RW, Site.CONTAINER, 7),
                  self._ev(ImpactClass.RW, Site.BUFFER, 2)]
        report = final_verdict(events, ModelSpec.default(), bug="OF",
                               trace_hex="00", salt=0, target="t")
        assert report.action_index == 2

    def test_impacts_filter_reporting_only(self):
        spec = ModelSpec(impacts=(ImpactClass.OC,))
        events = [self._ev(ImpactClass.RW, Site.CONTAINER, 3)]
        assert final_verdict(events, spec, bug="OF", trace_hex="00",
                             salt=0, target="t") is None


class TestReportSerialization:
    def test_round_trip(self):
        report = ImpactReport(
            impact="AW", site="container", action_index=4, bug="OF",
            trace_hex="0102ff", salt=0xDEADBEEF, target="bundled:checked",
            events=(("RW", "container", 2), ("AW", "container", 4)))
        again = ImpactReport.parse(report.serialize())
        assert again == report

    def test_stable_field_names(self):
        report = ImpactReport(impact="RW", site="-", action_index=0,
                              bug="none", trace_hex="", salt=0, target="t")
        text = report.serialize()
        for field in ("impact ", "site ", "action_index ", "bug ",
                      "trace_hex ", "salt ", "target ", "codec_version "):
            assert any(line.startswith(field)
                       for line in text.splitlines()), field


class TestHypothesisProperties:
    @given(st.lists(st.tuples(st.integers(0x1000, 0x3000),
                              st.integers(0, 64)), max_size=20),
           st.integers(0x1000, 0x3000), st.integers(0, 64))
    @settings(max_examples=300)
    def test_oc_agrees_with_interval_math(self, reps, base, size):
        mem = FakeMemory()
        shadow = ShadowState(CONT_BASE, CONT_SIZE, BUF_BASE, BUF_SIZE,
                             reader=mem.read)
        for b, s in reps:
            shadow.record_chunk(b, s)
        lo, hi = base, base + max(size, 1)
        expect = any(lo < b + max(s, 1) and b < hi for b, s in reps)
        got = shadow.check_allocation(base, size, 0)
        assert (got is not None and got.impact is ImpactClass.OC) == expect
