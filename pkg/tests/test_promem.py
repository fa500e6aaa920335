"""Segment controller behavior, pinned examples first, then oracle equivalence."""

import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from vmemsim.core import Geometry, PhysicalAddress, VirtualAddress, flat_page, page_address
from vmemsim.errors import (
    CapacityError,
    DoubleFreeError,
    LifecycleError,
    ProtocolError,
)
from vmemsim.promem import (
    ISOLATION_FAULT,
    PAGE_FAULT,
    DirectPageTable,
    ProMem,
)

from reference_model import RefModel

TINY = Geometry(256, 4, 8)


def booted(geom=TINY, vms=0):
    pm = ProMem(geom)
    pm.load_hypervisor()
    created = [pm.create_vm() for _ in range(vms)]
    return pm, created


# ---------------------------------------------------------------------------
# registers and lifecycle
# ---------------------------------------------------------------------------


def test_boot_state_is_empty():
    pm = ProMem(TINY)
    assert not pm.hypervisor_loaded()
    assert pm.tot == 0 and pm.mseg == 0
    assert pm.free_segment_count() == 8
    with pytest.raises(ProtocolError):
        pm.current(0)
    with pytest.raises(LifecycleError):
        pm.create_vm()


def test_load_hypervisor_registers():
    pm = ProMem(Geometry(4096, 512, 64))
    pm.load_hypervisor()
    assert pm.tot == 1
    assert pm.mseg == 64          # 64 // 1
    assert pm.segment_owner(0) == 0
    assert pm.allocated_pages(0) == 1    # the save slot
    assert pm.current(0) == 0
    assert pm.current(5) == 0            # untouched cpus default to the hypervisor
    with pytest.raises(LifecycleError):
        pm.load_hypervisor()


def test_mseg_tracks_owner_count():
    pm, vms = booted(Geometry(4096, 512, 64), vms=3)
    assert vms == [1, 2, 3]
    assert pm.tot == 4
    assert pm.mseg == 16          # 64 // 4
    pm.destroy_vm(2)
    assert pm.tot == 3
    assert pm.mseg == 21          # 64 // 3
    assert 2 not in pm.live


@given(st.integers(2, 40), st.integers(0, 30))
def test_mseg_formula_property(tseg, creates):
    creates = min(creates, tseg - 1)
    pm, _ = booted(Geometry(256, 2, tseg), vms=creates)
    owners = creates + 1
    assert pm.mseg == max(1, tseg // owners)


def test_create_vm_at_capacity():
    pm, _ = booted(vms=7)         # 8 owners fill 8 segments' worth of ids
    assert pm.tot == 8
    with pytest.raises(CapacityError):
        pm.create_vm()


def test_destroy_rules():
    pm, _ = booted(vms=2)
    with pytest.raises(LifecycleError):
        pm.destroy_vm(0)          # the hypervisor is permanent
    with pytest.raises(LifecycleError):
        pm.destroy_vm(9)
    pm.vm_entry(0, 1)
    with pytest.raises(LifecycleError):
        pm.destroy_vm(1)          # current on cpu 0
    pm.vm_exit(0)
    pm.destroy_vm(1)
    with pytest.raises(LifecycleError):
        pm.destroy_vm(1)          # ids are never reused
    assert pm.create_vm() == 3


def test_destroy_releases_segments():
    pm, _ = booted(vms=1)
    for _ in range(5):
        pm.allocate_page(1)
    assert pm.owned_segments(1) == [1, 2]
    pm.destroy_vm(1)
    assert pm.owned_segments(1) == []
    assert pm.free_segment_count() == 7


# ---------------------------------------------------------------------------
# entry / exit and the save-slot protocol
# ---------------------------------------------------------------------------


def test_entry_exit_round_trip():
    pm, _ = booted(vms=2)
    assert pm.current(0) == 0
    pm.vm_entry(0, 1)
    assert pm.current(0) == 1
    assert pm.save_slot[0] == 0
    pm.vm_exit(0)
    assert pm.current(0) == 0
    assert pm.save_slot[1] == 1


def test_vmidr_is_per_cpu():
    pm, _ = booted(vms=2)
    pm.vm_entry(0, 1)
    pm.vm_entry(1, 2)
    assert pm.current(0) == 1
    assert pm.current(1) == 2
    assert pm.current(2) == 0
    pm.vm_exit(0)
    assert pm.current(0) == 0
    assert pm.current(1) == 2


def test_entry_protocol_errors():
    pm, _ = booted(vms=1)
    pm.vm_entry(0, 1)
    with pytest.raises(ProtocolError):
        pm.vm_entry(0, 1)         # nested entry
    pm.vm_exit(0)
    with pytest.raises(ProtocolError):
        pm.vm_exit(0)             # exit from the hypervisor
    with pytest.raises(ProtocolError):
        pm.vm_entry(0, 0)         # the hypervisor is not a guest
    with pytest.raises(LifecycleError):
        pm.vm_entry(0, 7)


def test_entry_exit_many_round_trips_preserve_ids():
    pm, _ = booted(vms=2)
    for _ in range(10):
        pm.vm_entry(0, 1)
        pm.vm_exit(0)
        pm.vm_entry(0, 2)
        pm.vm_exit(0)
    assert pm.save_slot == {0: 0, 1: 1, 2: 2}
    assert pm.current(0) == 0


# ---------------------------------------------------------------------------
# allocation cascade
# ---------------------------------------------------------------------------


def test_alloc_fills_lowest_owned_segment_first():
    pm, _ = booted(vms=1)
    got = [pm.allocate_page(1) for _ in range(3)]
    assert [r.address for r in got] == [
        PhysicalAddress(1, 1, 0),
        PhysicalAddress(1, 2, 0),
        PhysicalAddress(1, 3, 0),
    ]
    assert all(r.claimed_segment is None and r.reclaim is None for r in got)


def test_alloc_claims_lowest_free_segment_when_owned_are_full():
    pm, _ = booted(vms=1)
    for _ in range(3):
        pm.allocate_page(1)
    r = pm.allocate_page(1)
    assert r.address == PhysicalAddress(2, 0, 0)
    assert r.claimed_segment == 2
    # claimed segments have no save slot, so page 0 carries data
    follow = pm.allocate_page(1)
    assert follow.address == PhysicalAddress(2, 1, 0)


def test_alloc_prefers_holes_in_low_segments():
    pm, _ = booted(vms=1)
    for _ in range(4):
        pm.allocate_page(1)       # fills seg 1, claims seg 2 page 0
    pm.free_page(1, PhysicalAddress(1, 2, 0))
    r = pm.allocate_page(1)
    assert r.address == PhysicalAddress(1, 2, 0)


def test_reclaim_trims_most_over_quota_owner():
    pm, _ = booted(vms=3)         # slots: hyp=0, vm1=1, vm2=2, vm3=3; mseg=2
    for _ in range(3 + 4 * 4):
        pm.allocate_page(1)       # vm1 fills seg 1 then claims and fills 4..7
    assert pm.owned_segments(1) == [1, 4, 5, 6, 7]
    for _ in range(3):
        pm.allocate_page(3)       # vm3 fills its slot segment
    r = pm.allocate_page(3, seq=99)
    notice = r.reclaim
    assert notice is not None
    assert (notice.victim, notice.excess) == (1, 3)
    assert notice.segments == (5, 6, 7)
    assert notice.pages_swapped == 12
    assert notice.seq == 99
    assert r.address == PhysicalAddress(5, 0, 0)
    assert r.claimed_segment == 5
    assert pm.owned_segments(1) == [1, 4]
    assert pm.pages_swapped_total == 12
    pm.check_invariants()


def test_reclaim_never_touches_slot_segments():
    pm, _ = booted(Geometry(256, 4, 4), vms=1)   # hyp=seg0, vm1=seg1
    for _ in range(3 + 4 + 1):
        pm.allocate_page(1)       # fill seg1, fill seg2, start seg3
    assert pm.owned_segments(1) == [1, 2, 3]
    vm2 = pm.create_vm(seq=7)     # no free segment: creation reclaims vm1
    assert vm2 == 2
    notice = pm.notices[-1]
    assert (notice.victim, notice.excess) == (1, 2)
    assert notice.segments == (2, 3)
    assert notice.pages_swapped == 5
    assert pm.owned_segments(1) == [1]           # slot segment survives
    assert pm.slot_segment[2] == 2
    pm.check_invariants()


def test_memory_full_is_recorded_not_raised():
    pm, _ = booted(vms=7)         # every segment is a slot segment; mseg=1
    for _ in range(3):
        pm.allocate_page(1)
    r = pm.allocate_page(1, seq=42)
    assert r.full
    assert r.address is None
    assert [ (m.seq, m.vm) for m in pm.memory_full_events ] == [(42, 1)]
    pm.check_invariants()


def test_alloc_for_dead_vm_raises():
    pm, _ = booted()
    with pytest.raises(LifecycleError):
        pm.allocate_page(5)


# ---------------------------------------------------------------------------
# free paths
# ---------------------------------------------------------------------------


def test_free_returns_page_to_segment():
    pm, _ = booted(vms=1)
    addr = pm.allocate_page(1).address
    assert pm.free_page(1, addr) is None
    assert pm.allocated_pages(1) == 1     # only the slot remains
    assert pm.allocate_page(1).address == addr


def test_free_cross_owner_records_fault():
    pm, _ = booted(vms=2)
    fault = pm.free_page(2, PhysicalAddress(1, 1, 0), seq=5)
    assert fault is not None
    assert (fault.seq, fault.cpu, fault.vmid, fault.segment, fault.owner) == (5, -1, 2, 1, 1)
    assert pm.faults[-1] is fault
    assert pm.segment_owner(1) == 1       # nothing changed


def test_free_slot_page_is_a_protocol_error():
    pm, _ = booted(vms=1)
    with pytest.raises(ProtocolError):
        pm.free_page(1, PhysicalAddress(1, 0, 0))


def test_double_free_raises():
    pm, _ = booted(vms=1)
    addr = pm.allocate_page(1).address
    pm.free_page(1, addr)
    with pytest.raises(DoubleFreeError):
        pm.free_page(1, addr)


def test_free_releases_empty_claimed_segment():
    pm, _ = booted(vms=1)
    for _ in range(3):
        pm.allocate_page(1)
    claimed = pm.allocate_page(1)
    assert claimed.claimed_segment == 2
    pm.free_page(1, claimed.address)
    assert pm.segment_owner(2) is None
    assert pm.owned_segments(1) == [1]
    pm.check_invariants()


def test_free_keeps_slot_segment_when_emptied():
    pm, _ = booted(vms=1)
    addr = pm.allocate_page(1).address
    pm.free_page(1, addr)
    assert pm.segment_owner(1) == 1       # pinned by the save slot


# ---------------------------------------------------------------------------
# access checks and translation
# ---------------------------------------------------------------------------


def test_check_access_three_ways():
    pm, _ = booted(vms=2)
    pm.vm_entry(0, 1)
    own = PhysicalAddress(1, 1, 0)
    other = PhysicalAddress(2, 1, 0)
    free = PhysicalAddress(7, 0, 0)
    assert pm.check_access(0, own) is None
    fault = pm.check_access(0, other, seq=3)
    assert (fault.vmid, fault.segment, fault.owner) == (1, 2, 2)
    fault = pm.check_access(0, free, seq=4)
    assert (fault.segment, fault.owner) == (7, None)
    assert len(pm.faults) == 2


def test_translate_success_fault_and_isolation():
    pm, _ = booted(vms=2)
    pm.vm_entry(0, 1)
    own_page = flat_page(pm.allocate_page(1).address, TINY)
    table = DirectPageTable(1, {0: own_page, 1: 0, 3: TINY.pages_total})
    ok = pm.translate(0, VirtualAddress(0, 17), table)
    assert ok.fault is None
    assert ok.address == page_address(own_page, TINY, 17)
    assert (ok.walks, ok.checks) == (1, 1)

    cross = pm.translate(0, VirtualAddress(1, 0), table, seq=8)
    assert cross.fault == ISOLATION_FAULT
    assert (cross.walks, cross.checks) == (1, 1)
    assert pm.faults[-1].segment == 0

    miss = pm.translate(0, VirtualAddress(2, 0), table)
    assert miss.fault == PAGE_FAULT
    assert (miss.walks, miss.checks) == (1, 0)

    wild = pm.translate(0, VirtualAddress(3, 0), table)
    assert wild.fault == PAGE_FAULT   # target outside the geometry


def test_translate_rejects_foreign_table():
    pm, _ = booted(vms=2)
    pm.vm_entry(0, 1)
    with pytest.raises(ProtocolError):
        pm.translate(0, VirtualAddress(0, 0), DirectPageTable(2, {}))


# ---------------------------------------------------------------------------
# oracle equivalence (stateful)
# ---------------------------------------------------------------------------

SGEOM = Geometry(256, 2, 5)


def pm_snapshot(pm: ProMem):
    return (
        tuple(sorted(pm.mpt.items())),
        tuple(
            (s, tuple(p for p in range(pm.geom.pages_per_segment) if pm.masks[s] >> p & 1))
            for s in sorted(pm.masks)
        ),
        tuple(sorted(pm.slot_segment.items())),
        tuple(sorted(pm.save_slot.items())),
        tuple(sorted(pm.vmidr.items())),
        tuple(sorted(pm.live)),
        pm.tot,
        pm.mseg,
        pm.next_vmid,
    )


class ControllerEquivalence(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.pm = ProMem(SGEOM)
        self.ref = RefModel(256, 2, 5)
        self.pm.load_hypervisor()
        self.ref.load_hypervisor()

    vmids = st.integers(0, 6)
    cpus = st.integers(0, 2)

    @rule()
    def create(self):
        try:
            got = self.pm.create_vm()
        except CapacityError:
            got = "capacity"
        assert got == self.ref.create_vm()

    @rule(vm=vmids)
    def destroy(self, vm):
        try:
            self.pm.destroy_vm(vm)
            got = "ok"
        except LifecycleError:
            got = "lifecycle"
        assert got == self.ref.destroy_vm(vm)

    @rule(cpu=cpus, vm=vmids)
    def entry(self, cpu, vm):
        try:
            self.pm.vm_entry(cpu, vm)
            got = "ok"
        except ProtocolError:
            got = "protocol"
        except LifecycleError:
            got = "lifecycle"
        assert got == self.ref.vm_entry(cpu, vm)

    @rule(cpu=cpus)
    def leave(self, cpu):
        try:
            self.pm.vm_exit(cpu)
            got = "ok"
        except ProtocolError:
            got = "protocol"
        assert got == self.ref.vm_exit(cpu)

    @rule(vm=vmids)
    def alloc(self, vm):
        try:
            res = self.pm.allocate_page(vm)
            if res.full:
                got = "full"
            else:
                info = None
                if res.reclaim is not None:
                    n = res.reclaim
                    info = (n.victim, n.excess, n.segments, n.pages_swapped)
                got = ("page", flat_page(res.address, SGEOM), info)
        except LifecycleError:
            got = "lifecycle"
        assert got == self.ref.alloc(vm)

    @rule(vm=vmids, seg=st.integers(0, 4), page=st.integers(0, 1))
    def free(self, vm, seg, page):
        try:
            fault = self.pm.free_page(vm, PhysicalAddress(seg, page, 0))
            got = "fault" if fault is not None else "ok"
        except LifecycleError:
            got = "lifecycle"
        except ProtocolError:
            got = "protocol"
        except DoubleFreeError:
            got = "double_free"
        assert got == self.ref.free(vm, seg, page)

    @rule(cpu=cpus, seg=st.integers(0, 4))
    def check(self, cpu, seg):
        fault = self.pm.check_access(cpu, PhysicalAddress(seg, 0, 0))
        got = "fault" if fault is not None else "allowed"
        assert got == self.ref.check(cpu, seg)

    @invariant()
    def states_agree(self):
        assert pm_snapshot(self.pm) == self.ref.snapshot()
        self.pm.check_invariants()


TestControllerEquivalence = ControllerEquivalence.TestCase
TestControllerEquivalence.settings = settings(
    max_examples=80, stateful_step_count=50, deadline=None
)
