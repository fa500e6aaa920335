"""Deterministic trace interpreter for the memory virtualization modes.

A trace is a sequence of events with strictly increasing `seq` numbers;
replaying the same trace under the same mode, geometry, and cost model
always produces the same report, byte for byte.

Modes
-----
  asmi           segment controller: single-level translation (one walk,
                 one ownership check), segment-granular allocation with
                 quota reclaim, DMA checked against segment ownership.
  nested         two-level translation (guest + real-map walk) behind a
                 virtual TLB, page-pool allocator, untranslated DMA.
  nested_shadow  like nested but accesses walk a hypervisor-maintained
                 shadow table in one step; every guest or real-map write
                 pays the eager re-derivation of affected entries.
  iommu          nested CPU path plus per-device DMA remapping through
                 root/context tables and a multi-level domain walk.
  hyperwall      nested CPU path plus raw DMA, with per-page protection
                 bits checked on every access; locked pages also resist
                 hypervisor reclaim, which is what the starvation attack
                 exploits.

Well-behaved guests are modeled by the engine itself: a successful
AllocPage installs the next sequential vpage mapping in whatever
structures the mode uses (direct table, guest+real tables, shadow,
domain table), and FreePage removes it.  Explicit gpt_write/rmap_write
events exist to model adversarial or manual mappings on top of that.
Events that a mode's hardware does not implement (hw_set outside
hyperwall, rmap_write under asmi, ...) are no-ops; the one genuinely
uninterpretable combination, a raw-target DMA under iommu, is a mode
error.

Faults never abort a run; they are recorded in the report's ledgers.
Errors that make the trace itself meaningless (entering a dead VM,
unknown ids, non-monotone seq) raise SimulationError naming the seq.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum, unique

from .baselines import (
    ASID_POLICY,
    DEFAULT_WALK_LEVELS,
    AsidMap,
    DmaRequest,
    GuestPageTable,
    PageMode,
    RealMapTable,
    RemappingTables,
    Requester,
    ShadowPageTable,
    VirtualTlb,
    hypervisor_may_touch,
    iommu_dma_translate,
    nested_translate,
    page_mode_allows,
    shadow_translate,
    shadow_update_ppage,
    shadow_update_vpage,
)
from .core import (
    HYPERVISOR,
    Geometry,
    VirtualAddress,
    flat_page,
    page_address,
)
from .errors import ModeError, SimulationError
from .promem import (
    DirectPageTable,
    IsolationFault,
    MemoryFull,
    PAGE_FAULT,
    ProMem,
    ReclaimNotice,
)

# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


@unique
class EventKind(Enum):
    CREATE_VM = "create_vm"
    DESTROY_VM = "destroy_vm"
    ENTER = "enter"
    EXIT = "exit"
    ALLOC = "alloc"
    FREE = "free"
    READ = "read"
    WRITE = "write"
    GPT_WRITE = "gpt_write"
    RMAP_WRITE = "rmap_write"
    DMA = "dma"
    DMA_RAW = "dma_raw"
    DOMAIN_ASSIGN = "domain_assign"
    HW_SET = "hw_set"
    PSWITCH = "pswitch"


#: fields each kind must carry, in wire order
EVENT_FIELDS: dict[EventKind, tuple[str, ...]] = {
    EventKind.CREATE_VM: ("vm",),
    EventKind.DESTROY_VM: ("vm",),
    EventKind.ENTER: ("vm",),
    EventKind.EXIT: (),
    EventKind.ALLOC: ("vm",),
    EventKind.FREE: ("vm", "vaddr"),
    EventKind.READ: ("vaddr",),
    EventKind.WRITE: ("vaddr",),
    EventKind.GPT_WRITE: ("vm", "vpage", "target"),
    EventKind.RMAP_WRITE: ("vm", "ppage", "phys"),
    EventKind.DMA: ("bus", "device", "function", "dva", "write"),
    EventKind.DMA_RAW: ("vm", "page", "write"),
    EventKind.DOMAIN_ASSIGN: ("domain", "vm", "bus", "device", "function"),
    EventKind.HW_SET: ("page", "mode"),
    EventKind.PSWITCH: ("vasid",),
}


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: EventKind
    cpu: int = 0
    vm: int | None = None
    vaddr: int | None = None          # flat virtual byte address
    vpage: int | None = None
    target: int | None = None         # gpt_write target page
    ppage: int | None = None
    phys: int | None = None
    bus: int | None = None
    device: int | None = None
    function: int | None = None
    dva: int | None = None            # flat device byte address
    page: int | None = None           # global physical page
    domain: int | None = None
    mode: str | None = None           # PageMode value token
    vasid: int | None = None
    write: bool | None = None


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

_SAT = (1 << 64) - 1


def sat_add(a: int, b: int) -> int:
    s = a + b
    return s if s < _SAT else _SAT


@dataclass(frozen=True)
class CostModel:
    """Cycle prices; totals accumulate with 64-bit saturating adds."""

    tlb_hit: int = 1
    pt_walk_level: int = 25
    mpt_check: int = 5
    tlb_flush: int = 200
    swap_page: int = 5000
    context_switch: int = 300
    programmed_io_word: int = 50
    dma_setup: int = 100

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"cost {name} must be a non-negative integer")

    def with_overrides(self, overrides: dict[str, int]) -> "CostModel":
        known = set(asdict(self))
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown cost keys: {sorted(bad)}")
        return replace(self, **overrides)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """Successful cross-owner access (the unsafe kind: it was not blocked)."""

    seq: int
    cpu: int
    source: str          # "cpu" | "dma"
    vm: int              # requester; -1 when the device has no known owner
    page: int
    owner: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DmaFault:
    seq: int
    bus: int
    device: int
    function: int
    dva: int
    reason: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Denial:
    """Access blocked by a per-page protection mode."""

    seq: int
    cpu: int
    requester: str
    page: int
    mode: str
    owner: int | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Counters:
    cpu_accesses: int = 0
    tlb_hits: int = 0
    tlb_misses: int = 0
    walk_steps: int = 0
    mpt_checks: int = 0
    shadow_update_steps: int = 0
    page_faults: int = 0
    allocs: int = 0
    frees: int = 0
    invalid_frees: int = 0
    pages_swapped: int = 0
    dma_ops: int = 0
    dma_completed: int = 0
    dma_blocked: int = 0
    dma_walk_steps: int = 0
    pio_transfers: int = 0
    context_switches: int = 0
    process_switches: int = 0
    tlb_flushes: int = 0
    hw_set_denied: int = 0


@dataclass(frozen=True)
class UtilSample:
    event_index: int
    owner: int
    segments: int
    pages: int


@dataclass
class MetricsReport:
    mode: str
    events: int = 0
    total_cycles: int = 0
    cycles_by_kind: dict[str, int] = field(default_factory=dict)
    counters: Counters = field(default_factory=Counters)
    isolation_faults: list[IsolationFault] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)
    dma_faults: list[DmaFault] = field(default_factory=list)
    denials: list[Denial] = field(default_factory=list)
    memory_full: list[MemoryFull] = field(default_factory=list)
    reclaims: list[ReclaimNotice] = field(default_factory=list)
    utilization: list[UtilSample] = field(default_factory=list)
    final_segments: dict[int, int] = field(default_factory=dict)
    final_pages: dict[int, int] = field(default_factory=dict)

    def ledger_dict(self) -> dict:
        return {
            "isolation_faults": [f.to_dict() for f in self.isolation_faults],
            "violations": [v.to_dict() for v in self.violations],
            "dma_faults": [f.to_dict() for f in self.dma_faults],
            "denials": [d.to_dict() for d in self.denials],
            "memory_full": [m.to_dict() for m in self.memory_full],
            "reclaims": [r.to_dict() for r in self.reclaims],
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "events": self.events,
            "total_cycles": self.total_cycles,
            "cycles_by_kind": {k: self.cycles_by_kind[k] for k in sorted(self.cycles_by_kind)},
            "counters": asdict(self.counters),
            "ledgers": self.ledger_dict(),
            "utilization": [asdict(u) for u in self.utilization],
            "final_segments": {str(k): v for k, v in sorted(self.final_segments.items())},
            "final_pages": {str(k): v for k, v in sorted(self.final_pages.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def mean_segment_utilization(self, geom: Geometry) -> float:
        """Mean over samples of (owned segments / total segments)."""
        per_index: dict[int, int] = {}
        for row in self.utilization:
            per_index[row.event_index] = per_index.get(row.event_index, 0) + row.segments
        if not per_index:
            return 0.0
        return sum(per_index.values()) / (len(per_index) * geom.total_segments)

    def mean_page_utilization(self, geom: Geometry) -> float:
        per_index: dict[int, int] = {}
        for row in self.utilization:
            per_index[row.event_index] = per_index.get(row.event_index, 0) + row.pages
        if not per_index:
            return 0.0
        return sum(per_index.values()) / (len(per_index) * geom.pages_total)


# ---------------------------------------------------------------------------
# run options and mode table
# ---------------------------------------------------------------------------

RAW_DMA = "raw"
NO_DMA = "off"
REMAP_DMA = "remap"


@dataclass(frozen=True)
class RunOptions:
    sample_interval: int = 100
    check_invariants: bool = False
    tlb_policy: str = ASID_POLICY
    tlb_entries: int = 64
    walk_levels: int = DEFAULT_WALK_LEVELS
    dma_policy: str = RAW_DMA          # raw | off; iommu always remaps


MODES = ("asmi", "nested", "nested_shadow", "iommu", "hyperwall")

_MODE_ALIASES = {
    "asmi": "asmi",
    "nested": "nested",
    "nested+shadow": "nested_shadow",
    "nested_shadow": "nested_shadow",
    "shadow": "nested_shadow",
    "iommu": "iommu",
    "hyperwall": "hyperwall",
    "hyperwall-overlay": "hyperwall",
}


def canonical_mode(name: str) -> str:
    mode = _MODE_ALIASES.get(name.strip().lower())
    if mode is None:
        raise ModeError(f"unknown mode {name!r}; known: {', '.join(MODES)}")
    return mode


# ---------------------------------------------------------------------------
# machines
# ---------------------------------------------------------------------------


class _MachineBase:
    def __init__(self, geom: Geometry, cost: CostModel, opts: RunOptions, report: MetricsReport):
        self.geom = geom
        self.cost = cost
        self.opts = opts
        self.report = report

    def charge(self, kind: EventKind, cycles: int) -> None:
        key = kind.value
        by_kind = self.report.cycles_by_kind
        by_kind[key] = sat_add(by_kind.get(key, 0), cycles)
        self.report.total_cycles = sat_add(self.report.total_cycles, cycles)

    def err(self, ev: TraceEvent, message: str) -> SimulationError:
        return SimulationError(f"event seq {ev.seq}: {message}")

    # overridden by subclasses
    def apply(self, ev: TraceEvent) -> None:
        raise NotImplementedError

    def sample(self, event_index: int) -> None:
        raise NotImplementedError

    def finalize(self) -> None:
        raise NotImplementedError

    def check_invariants(self) -> None:
        raise NotImplementedError


class AsmiMachine(_MachineBase):
    """Segment controller mode."""

    def __init__(self, geom, cost, opts, report):
        super().__init__(geom, cost, opts, report)
        self.pm = ProMem(geom)
        self.pm.load_hypervisor()
        self.tables: dict[int, DirectPageTable] = {HYPERVISOR: DirectPageTable(HYPERVISOR)}
        self.next_vpage: dict[int, int] = {HYPERVISOR: 0}
        self.device_owner: dict[tuple[int, int, int], int] = {}

    # -- helpers --

    def _table(self, ev: TraceEvent, vm: int) -> DirectPageTable:
        table = self.tables.get(vm)
        if table is None:
            raise self.err(ev, f"vm {vm} is not live")
        return table

    def _unmap_segments(self, victim: int, segments: tuple[int, ...]) -> None:
        # The victim's pages were swapped out; a well-behaved guest unmaps them.
        table = self.tables.get(victim)
        if table is None:
            return
        gone = set(segments)
        pps = self.geom.pages_per_segment
        for vpage in [v for v, p in table.entries.items() if p // pps in gone]:
            del table.entries[vpage]

    def _charge_reclaim(self, kind: EventKind, notice: ReclaimNotice | None) -> None:
        if notice is not None:
            self.charge(kind, self.cost.swap_page * notice.pages_swapped)
            self._unmap_segments(notice.victim, notice.segments)

    # -- event handlers --

    def apply(self, ev: TraceEvent) -> None:
        c = self.report.counters
        kind = ev.kind
        if kind is EventKind.CREATE_VM:
            notices_before = len(self.pm.notices)
            vm = self.pm.create_vm(ev.seq)
            if vm != ev.vm:
                raise self.err(ev, f"trace expects vm {ev.vm}, controller assigned {vm}")
            if len(self.pm.notices) > notices_before:
                self._charge_reclaim(kind, self.pm.notices[-1])
            self.tables[vm] = DirectPageTable(vm)
            self.next_vpage[vm] = 0
        elif kind is EventKind.DESTROY_VM:
            self.pm.destroy_vm(ev.vm, ev.seq)
            del self.tables[ev.vm]
            del self.next_vpage[ev.vm]
        elif kind is EventKind.ENTER:
            self.pm.vm_entry(ev.cpu, ev.vm)
            c.context_switches += 1
            self.charge(kind, self.cost.context_switch)
        elif kind is EventKind.EXIT:
            self.pm.vm_exit(ev.cpu)
            c.context_switches += 1
            self.charge(kind, self.cost.context_switch)
        elif kind is EventKind.ALLOC:
            self._table(ev, ev.vm)
            c.allocs += 1
            result = self.pm.allocate_page(ev.vm, ev.seq)
            self.charge(kind, self.cost.mpt_check)
            self._charge_reclaim(kind, result.reclaim)
            if result.address is not None:
                vpage = self.next_vpage[ev.vm]
                self.next_vpage[ev.vm] = vpage + 1
                self.tables[ev.vm].entries[vpage] = flat_page(result.address, self.geom)
        elif kind is EventKind.FREE:
            table = self._table(ev, ev.vm)
            vpage = ev.vaddr // self.geom.page_size_bytes
            page = table.entries.get(vpage)
            if page is None:
                c.invalid_frees += 1
                return
            c.frees += 1
            fault = self.pm.free_page(ev.vm, page_address(page, self.geom), ev.seq)
            if fault is None:
                del table.entries[vpage]
        elif kind in (EventKind.READ, EventKind.WRITE):
            cur = self.pm.current(ev.cpu)
            va = VirtualAddress.from_flat(ev.vaddr, self.geom)
            tr = self.pm.translate(ev.cpu, va, self.tables[cur], ev.seq)
            c.cpu_accesses += 1
            c.walk_steps += tr.walks
            c.mpt_checks += tr.checks
            if tr.fault == PAGE_FAULT:
                c.page_faults += 1
            self.charge(
                kind,
                self.cost.pt_walk_level * tr.walks + self.cost.mpt_check * tr.checks,
            )
        elif kind is EventKind.GPT_WRITE:
            self._table(ev, ev.vm).entries[ev.vpage] = ev.target
        elif kind is EventKind.RMAP_WRITE:
            pass  # no second translation level exists in this mode
        elif kind is EventKind.DMA:
            issuer = self.device_owner.get((ev.bus, ev.device, ev.function))
            self._dma(ev, issuer, ev.dva // self.geom.page_size_bytes, ev.dva)
        elif kind is EventKind.DMA_RAW:
            self._dma(ev, ev.vm, ev.page, ev.page * self.geom.page_size_bytes)
        elif kind is EventKind.DOMAIN_ASSIGN:
            DmaRequest(ev.bus, ev.device, ev.function, 0, False)  # range check only
            self.device_owner[(ev.bus, ev.device, ev.function)] = ev.vm
        elif kind is EventKind.HW_SET:
            pass  # no per-page protection bits in this mode
        elif kind is EventKind.PSWITCH:
            c.process_switches += 1
            self.charge(kind, self.cost.context_switch)
        else:  # pragma: no cover
            raise self.err(ev, f"unhandled kind {kind}")

    def _dma(self, ev: TraceEvent, issuer: int | None, page: int, dva: int) -> None:
        c = self.report.counters
        c.dma_ops += 1
        if issuer is None:
            self.report.dma_faults.append(
                DmaFault(ev.seq, ev.bus or 0, ev.device or 0, ev.function or 0, dva, "unassigned_device")
            )
            self.charge(ev.kind, self.cost.dma_setup)
            return
        if not (0 <= page < self.geom.pages_total):
            self.report.dma_faults.append(
                DmaFault(ev.seq, ev.bus or 0, ev.device or 0, ev.function or 0, dva, "range")
            )
            self.charge(ev.kind, self.cost.dma_setup)
            return
        fault = self.pm.check_owner(issuer, page_address(page, self.geom), ev.cpu, ev.seq)
        self.charge(ev.kind, self.cost.dma_setup + self.cost.mpt_check)
        if fault is None:
            c.dma_completed += 1
        else:
            c.dma_blocked += 1

    # -- bookkeeping --

    def sample(self, event_index: int) -> None:
        for vm in sorted(self.pm.live):
            self.report.utilization.append(
                UtilSample(
                    event_index,
                    vm,
                    len(self.pm.owned_segments(vm)),
                    self.pm.allocated_pages(vm),
                )
            )

    def finalize(self) -> None:
        self.report.isolation_faults.extend(self.pm.faults)
        self.report.memory_full.extend(self.pm.memory_full_events)
        self.report.reclaims.extend(self.pm.notices)
        self.report.counters.pages_swapped += self.pm.pages_swapped_total
        for vm in sorted(self.pm.live):
            self.report.final_segments[vm] = len(self.pm.owned_segments(vm))
            self.report.final_pages[vm] = self.pm.allocated_pages(vm)

    def check_invariants(self) -> None:
        self.pm.check_invariants()
        for vm, table in self.tables.items():
            assert vm in self.pm.live, f"table kept for dead vm {vm}"
            assert len(table.entries) <= self.next_vpage.get(vm, 0) + len(table.entries)


class BaselineMachine(_MachineBase):
    """Page-pool hypervisor shared by nested, shadow, iommu, and hyperwall."""

    def __init__(self, geom, cost, opts, report, *, translation: str, dma: str, hyperwall: bool):
        super().__init__(geom, cost, opts, report)
        self.translation = translation            # "vtlb" | "shadow"
        self.dma = dma                            # raw | remap | off
        self.hyperwall = hyperwall
        self.free_pages: list[int] = list(range(geom.pages_total))  # kept sorted
        self.owner_map: dict[int, int] = {}
        self.pages_of: dict[int, set[int]] = {HYPERVISOR: set()}
        self.backing: dict[int, tuple[int, int, int]] = {}  # page -> (vm, vpage, ppage)
        self.current: dict[int, int] = {}
        self.live: set[int] = {HYPERVISOR}
        self.next_vmid = 1
        self.gpt: dict[int, GuestPageTable] = {HYPERVISOR: GuestPageTable(HYPERVISOR)}
        self.rmap: dict[int, RealMapTable] = {HYPERVISOR: RealMapTable(HYPERVISOR)}
        self.shadow: dict[int, ShadowPageTable] = {}
        self.next_vpage: dict[int, int] = {HYPERVISOR: 0}
        self.vasid: dict[int, int] = {HYPERVISOR: 0}
        self.asid_map = AsidMap()
        self.tlb = VirtualTlb(opts.tlb_policy, opts.tlb_entries)
        self.remap = RemappingTables(opts.walk_levels)
        self.device_owner: dict[tuple[int, int, int], int] = {}
        self.domain_of_vm: dict[int, int] = {}
        self.page_mode: dict[int, PageMode] = {}

    # -- small helpers --

    def cur_vm(self, cpu: int) -> int:
        return self.current.get(cpu, HYPERVISOR)

    def _require_live(self, ev: TraceEvent, vm: int) -> None:
        if vm not in self.live:
            raise self.err(ev, f"vm {vm} is not live")

    def _take_lowest_page(self) -> int | None:
        return heapq.heappop(self.free_pages) if self.free_pages else None

    def _release_page(self, page: int) -> None:
        heapq.heappush(self.free_pages, page)

    def _tlb_invalidate_phys(self, page: int) -> None:
        for key in [k for k, v in self.tlb.entries.items() if v == page]:
            del self.tlb.entries[key]

    def _unmap_page(self, page: int) -> None:
        vm, vpage, ppage = self.backing.pop(page)
        self.owner_map.pop(page, None)
        self.pages_of[vm].discard(page)
        gpt = self.gpt.get(vm)
        if gpt is not None and gpt.entries.get(vpage) == (page if vm == HYPERVISOR else ppage):
            del gpt.entries[vpage]
        rmap = self.rmap.get(vm)
        if rmap is not None:
            rmap.entries.pop(ppage, None)
        shadow = self.shadow.get(vm)
        if shadow is not None:
            shadow.entries.pop(vpage, None)
        domain = self.domain_of_vm.get(vm)
        if domain is not None:
            self.remap.unmap_phys(domain, page)
        self.page_mode.pop(page, None)
        self._tlb_invalidate_phys(page)

    def _reclaim_one_page(self, requester: int) -> int | None:
        """Swap out one page from the largest other guest holder."""
        order = sorted(
            (vm for vm in self.live if vm not in (requester, HYPERVISOR)),
            key=lambda vm: (-len(self.pages_of[vm]), vm),
        )
        for victim in order:
            for page in sorted(self.pages_of[victim], reverse=True):
                if self.hyperwall and not hypervisor_may_touch(
                    self.page_mode.get(page, PageMode.HYPERVISOR_ONLY)
                ):
                    continue
                self._unmap_page(page)
                self._release_page(page)
                return page
        return None

    def _alloc_for(self, ev: TraceEvent, vm: int) -> None:
        c = self.report.counters
        c.allocs += 1
        cycles = 0
        if not self.free_pages:
            swapped = self._reclaim_one_page(vm)
            if swapped is None:
                self.report.memory_full.append(MemoryFull(ev.seq, vm))
                self.charge(ev.kind, 0)
                return
            c.pages_swapped += 1
            cycles += self.cost.swap_page
        page = self._take_lowest_page()
        assert page is not None
        self.owner_map[page] = vm
        self.pages_of[vm].add(page)
        vpage = self.next_vpage[vm]
        self.next_vpage[vm] = vpage + 1
        if vm == HYPERVISOR:
            # the hypervisor maps straight to physical pages
            self.gpt[vm].entries[vpage] = page
            self.backing[page] = (vm, vpage, page)
        else:
            ppage = vpage  # fresh guests map pages linearly
            self.gpt[vm].entries[vpage] = ppage
            self.rmap[vm].entries[ppage] = page
            self.backing[page] = (vm, vpage, ppage)
            if self.translation == "shadow":
                steps = shadow_update_vpage(self.shadow[vm], self.gpt[vm], self.rmap[vm], vpage)
                c.shadow_update_steps += steps
                cycles += self.cost.pt_walk_level * steps
            domain = self.domain_of_vm.get(vm)
            if domain is not None:
                self.remap.map_page(domain, ppage, page)
        if self.hyperwall:
            self.page_mode[page] = PageMode.HYPERVISOR_AND_DMA
        self.charge(ev.kind, cycles)

    # -- translation --

    def _translate_cpu(self, ev: TraceEvent, vm: int) -> int | None:
        """Resolve the event's vaddr to a physical page, charging as we go."""
        c = self.report.counters
        vpage = ev.vaddr // self.geom.page_size_bytes
        if vm == HYPERVISOR:
            c.walk_steps += 1
            self.charge(ev.kind, self.cost.pt_walk_level)
            page = self.gpt[HYPERVISOR].entries.get(vpage)
            if page is None or not (0 <= page < self.geom.pages_total):
                c.page_faults += 1
                return None
            return page
        if self.translation == "shadow":
            result = shadow_translate(vpage, self.shadow[vm])
            c.walk_steps += result.walks
            self.charge(ev.kind, self.cost.pt_walk_level * result.walks)
            if result.page is None:
                c.page_faults += 1
                return None
            return result.page
        real_asid = self.asid_map.assign(vm, self.vasid[vm])
        hit = self.tlb.lookup(real_asid, vpage)
        if hit is not None:
            c.tlb_hits += 1
            self.charge(ev.kind, self.cost.tlb_hit)
            return hit
        c.tlb_misses += 1
        result = nested_translate(vpage, self.gpt[vm], self.rmap[vm])
        c.walk_steps += result.walks
        self.charge(ev.kind, self.cost.pt_walk_level * result.walks)
        if result.page is None or not (0 <= result.page < self.geom.pages_total):
            c.page_faults += 1
            return None
        self.tlb.insert(real_asid, vpage, result.page)
        return result.page

    def _hyperwall_gate(self, ev: TraceEvent, requester: Requester, page: int) -> bool:
        """Returns True when the access may proceed."""
        if not self.hyperwall:
            return True
        mode = self.page_mode.get(page, PageMode.HYPERVISOR_ONLY)
        self.charge(ev.kind, self.cost.mpt_check)
        if page_mode_allows(mode, requester):
            return True
        self.report.denials.append(
            Denial(ev.seq, ev.cpu, requester.value, page, mode.value, self.owner_map.get(page))
        )
        return False

    def _access(self, ev: TraceEvent) -> None:
        c = self.report.counters
        c.cpu_accesses += 1
        vm = self.cur_vm(ev.cpu)
        page = self._translate_cpu(ev, vm)
        if page is None:
            return
        owner = self.owner_map.get(page)
        if vm == HYPERVISOR:
            requester = Requester.HYPERVISOR
        elif owner == vm:
            requester = Requester.OWNER_VM
        else:
            requester = Requester.OTHER_VM
        if not self._hyperwall_gate(ev, requester, page):
            return
        if owner is None:
            if vm != HYPERVISOR:
                c.page_faults += 1  # resolved to an unbacked frame
            return
        if owner != vm:
            self.report.violations.append(
                Violation(ev.seq, ev.cpu, "cpu", vm, page, owner)
            )

    # -- DMA --

    def _dma_remap(self, ev: TraceEvent) -> None:
        c = self.report.counters
        c.dma_ops += 1
        req = DmaRequest(ev.bus, ev.device, ev.function, ev.dva, bool(ev.write))
        result = iommu_dma_translate(req, self.remap, self.geom.page_size_bytes)
        c.dma_walk_steps += result.steps
        self.charge(ev.kind, self.cost.dma_setup + self.cost.pt_walk_level * result.steps)
        if result.fault is not None:
            self.report.dma_faults.append(
                DmaFault(ev.seq, req.bus, req.device, req.function, req.dva, result.fault)
            )
            c.dma_blocked += 1
            return
        c.dma_completed += 1

    def _dma_raw(self, ev: TraceEvent, issuer: int | None, page: int, dva: int) -> None:
        c = self.report.counters
        c.dma_ops += 1
        self.charge(ev.kind, self.cost.dma_setup)
        if not (0 <= page < self.geom.pages_total):
            self.report.dma_faults.append(
                DmaFault(ev.seq, ev.bus or 0, ev.device or 0, ev.function or 0, dva, "range")
            )
            c.dma_blocked += 1
            return
        if not self._hyperwall_gate(ev, Requester.DMA, page):
            c.dma_blocked += 1
            return
        owner = self.owner_map.get(page)
        if owner is not None and owner != issuer:
            # raw DMA lands anyway: this is the vulnerability, record and proceed
            self.report.violations.append(
                Violation(ev.seq, ev.cpu, "dma", -1 if issuer is None else issuer, page, owner)
            )
        c.dma_completed += 1

    def _dma_pio(self, ev: TraceEvent) -> None:
        c = self.report.counters
        c.dma_ops += 1
        c.pio_transfers += 1
        words = self.geom.page_size_bytes // 8
        self.charge(ev.kind, self.cost.programmed_io_word * words)

    # -- event dispatch --

    def apply(self, ev: TraceEvent) -> None:
        c = self.report.counters
        kind = ev.kind
        if kind is EventKind.CREATE_VM:
            vm = self.next_vmid
            self.next_vmid += 1
            if vm != ev.vm:
                raise self.err(ev, f"trace expects vm {ev.vm}, hypervisor assigned {vm}")
            self.live.add(vm)
            self.pages_of[vm] = set()
            self.gpt[vm] = GuestPageTable(vm)
            self.rmap[vm] = RealMapTable(vm)
            if self.translation == "shadow":
                self.shadow[vm] = ShadowPageTable(vm)
            self.next_vpage[vm] = 0
            self.vasid[vm] = 0
        elif kind is EventKind.DESTROY_VM:
            self._require_live(ev, ev.vm)
            if ev.vm == HYPERVISOR or ev.vm in self.current.values():
                raise self.err(ev, f"vm {ev.vm} cannot be destroyed now")
            for page in sorted(self.pages_of[ev.vm]):
                self._unmap_page(page)
                self._release_page(page)
            del self.pages_of[ev.vm]
            del self.gpt[ev.vm]
            del self.rmap[ev.vm]
            self.shadow.pop(ev.vm, None)
            del self.next_vpage[ev.vm]
            del self.vasid[ev.vm]
            self.asid_map.drop_vm(ev.vm)
            self.domain_of_vm.pop(ev.vm, None)
            self.live.discard(ev.vm)
        elif kind is EventKind.ENTER:
            self._require_live(ev, ev.vm)
            if self.cur_vm(ev.cpu) != HYPERVISOR or ev.vm == HYPERVISOR:
                raise self.err(ev, "entry requires the hypervisor to be current")
            self.current[ev.cpu] = ev.vm
            c.context_switches += 1
            cycles = self.cost.context_switch
            if self.translation == "vtlb" and self.tlb.on_switch():
                c.tlb_flushes += 1
                cycles += self.cost.tlb_flush
            self.charge(kind, cycles)
        elif kind is EventKind.EXIT:
            if self.cur_vm(ev.cpu) == HYPERVISOR:
                raise self.err(ev, "exit requires a guest to be current")
            self.current[ev.cpu] = HYPERVISOR
            c.context_switches += 1
            cycles = self.cost.context_switch
            if self.translation == "vtlb" and self.tlb.on_switch():
                c.tlb_flushes += 1
                cycles += self.cost.tlb_flush
            self.charge(kind, cycles)
        elif kind is EventKind.ALLOC:
            self._require_live(ev, ev.vm)
            self._alloc_for(ev, ev.vm)
        elif kind is EventKind.FREE:
            self._require_live(ev, ev.vm)
            vpage = ev.vaddr // self.geom.page_size_bytes
            mapped = self.gpt[ev.vm].entries.get(vpage)
            if mapped is None:
                c.invalid_frees += 1
                return
            page = mapped if ev.vm == HYPERVISOR else self.rmap[ev.vm].entries.get(mapped)
            if page is None or self.owner_map.get(page) != ev.vm:
                c.invalid_frees += 1
                return
            c.frees += 1
            self._unmap_page(page)
            self._release_page(page)
        elif kind in (EventKind.READ, EventKind.WRITE):
            self._access(ev)
        elif kind is EventKind.GPT_WRITE:
            self._require_live(ev, ev.vm)
            self.gpt[ev.vm].entries[ev.vpage] = ev.target
            if ev.vm != HYPERVISOR:
                for asid in self._asids_of(ev.vm):
                    self.tlb.entries.pop((asid, ev.vpage), None)
                if self.translation == "shadow":
                    steps = shadow_update_vpage(
                        self.shadow[ev.vm], self.gpt[ev.vm], self.rmap[ev.vm], ev.vpage
                    )
                    c.shadow_update_steps += steps
                    self.charge(kind, self.cost.pt_walk_level * steps)
        elif kind is EventKind.RMAP_WRITE:
            self._require_live(ev, ev.vm)
            old = self.rmap[ev.vm].entries.get(ev.ppage)
            self.rmap[ev.vm].entries[ev.ppage] = ev.phys
            if old is not None:
                self._tlb_invalidate_phys(old)
            if self.translation == "shadow" and ev.vm != HYPERVISOR:
                steps = shadow_update_ppage(
                    self.shadow[ev.vm], self.gpt[ev.vm], self.rmap[ev.vm], ev.ppage
                )
                c.shadow_update_steps += steps
                self.charge(kind, self.cost.pt_walk_level * steps)
        elif kind is EventKind.DMA:
            if self.dma == REMAP_DMA:
                self._dma_remap(ev)
            elif self.dma == RAW_DMA:
                issuer = self.device_owner.get((ev.bus, ev.device, ev.function))
                self._dma_raw(ev, issuer, ev.dva // self.geom.page_size_bytes, ev.dva)
            else:
                self._dma_pio(ev)
        elif kind is EventKind.DMA_RAW:
            if self.dma == REMAP_DMA:
                raise ModeError(
                    f"event seq {ev.seq}: raw-target DMA cannot be remapped; "
                    "this mode requires device coordinates"
                )
            if self.dma == RAW_DMA:
                self._dma_raw(ev, ev.vm, ev.page, ev.page * self.geom.page_size_bytes)
            else:
                self._dma_pio(ev)
        elif kind is EventKind.DOMAIN_ASSIGN:
            self._require_live(ev, ev.vm)
            self.remap.assign(ev.domain, ev.vm, ev.bus, ev.device, ev.function)
            self.device_owner[(ev.bus, ev.device, ev.function)] = ev.vm
            self.domain_of_vm[ev.vm] = ev.domain
            # late assignment adopts mappings that already exist
            for ppage, page in self.rmap[ev.vm].entries.items():
                self.remap.map_page(ev.domain, ppage, page)
        elif kind is EventKind.HW_SET:
            if not self.hyperwall:
                return
            if not (0 <= ev.page < self.geom.pages_total):
                raise self.err(ev, f"page {ev.page} outside the geometry")
            requester = self.cur_vm(ev.cpu)
            owner = self.owner_map.get(ev.page)
            if requester == owner or (requester == HYPERVISOR and owner is None):
                self.page_mode[ev.page] = PageMode(ev.mode)
            else:
                c.hw_set_denied += 1
        elif kind is EventKind.PSWITCH:
            vm = self.cur_vm(ev.cpu)
            self.vasid[vm] = ev.vasid
            c.process_switches += 1
            cycles = self.cost.context_switch
            if self.translation == "vtlb" and self.tlb.on_switch():
                c.tlb_flushes += 1
                cycles += self.cost.tlb_flush
            self.charge(kind, cycles)
        else:  # pragma: no cover
            raise self.err(ev, f"unhandled kind {kind}")

    def _asids_of(self, vm: int) -> list[int]:
        return [real for (v, _), real in self.asid_map._map.items() if v == vm]

    # -- bookkeeping --

    def sample(self, event_index: int) -> None:
        for vm in sorted(self.live):
            self.report.utilization.append(
                UtilSample(event_index, vm, 0, len(self.pages_of[vm]))
            )

    def finalize(self) -> None:
        for vm in sorted(self.live):
            self.report.final_pages[vm] = len(self.pages_of[vm])

    def check_invariants(self) -> None:
        assert len(self.free_pages) + len(self.owner_map) == self.geom.pages_total
        total = sum(len(p) for p in self.pages_of.values())
        assert total == len(self.owner_map)
        assert set(self.backing) == set(self.owner_map)


# ---------------------------------------------------------------------------
# run / compare
# ---------------------------------------------------------------------------


def _build_machine(mode: str, geom: Geometry, cost: CostModel, opts: RunOptions, report: MetricsReport):
    if mode == "asmi":
        return AsmiMachine(geom, cost, opts, report)
    if mode == "nested":
        return BaselineMachine(
            geom, cost, opts, report, translation="vtlb", dma=opts.dma_policy, hyperwall=False
        )
    if mode == "nested_shadow":
        return BaselineMachine(
            geom, cost, opts, report, translation="shadow", dma=opts.dma_policy, hyperwall=False
        )
    if mode == "iommu":
        return BaselineMachine(
            geom, cost, opts, report, translation="vtlb", dma=REMAP_DMA, hyperwall=False
        )
    if mode == "hyperwall":
        return BaselineMachine(
            geom, cost, opts, report, translation="vtlb", dma=opts.dma_policy, hyperwall=True
        )
    raise ModeError(f"unknown mode {mode!r}")


def run(
    trace: list[TraceEvent],
    mode: str,
    geom: Geometry | None = None,
    cost: CostModel | None = None,
    options: RunOptions | None = None,
) -> MetricsReport:
    """Replay a trace under one mode and return its metrics report."""
    geom = geom or Geometry()
    cost = cost or CostModel()
    opts = options or RunOptions()
    mode = canonical_mode(mode)
    report = MetricsReport(mode=mode)
    machine = _build_machine(mode, geom, cost, opts, report)
    interval = max(1, opts.sample_interval)
    last_seq = None
    count = 0
    for ev in trace:
        if last_seq is not None and ev.seq <= last_seq:
            raise SimulationError(
                f"event seq {ev.seq} is not greater than its predecessor {last_seq}"
            )
        last_seq = ev.seq
        machine.apply(ev)
        count += 1
        if count % interval == 0:
            machine.sample(count)
        if opts.check_invariants:
            machine.check_invariants()
    if count % interval != 0:
        machine.sample(count)
    report.events = count
    machine.finalize()
    return report


@dataclass(frozen=True)
class ComparisonRow:
    trace: str
    mode: str
    total_cycles: int
    isolation_faults: int
    violations: int
    dma_faults: int
    denials: int
    memory_full: int
    reclaims: int
    mean_seg_util: float
    mean_page_util: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    reports: dict[tuple[str, str], MetricsReport]

    def to_table(self) -> str:
        headers = (
            "trace", "mode", "cycles", "iso_faults", "violations",
            "dma_faults", "denials", "mem_full", "reclaims", "seg_util", "page_util",
        )
        body = [
            (
                r.trace, r.mode, str(r.total_cycles), str(r.isolation_faults),
                str(r.violations), str(r.dma_faults), str(r.denials),
                str(r.memory_full), str(r.reclaims),
                f"{r.mean_seg_util:.4f}", f"{r.mean_page_util:.4f}",
            )
            for r in self.rows
        ]
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(headers)]
        lines = [
            "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
            "  ".join("-" * w for w in widths),
        ]
        lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in body]
        return "\n".join(lines)


def compare(
    traces,
    modes,
    geom: Geometry | None = None,
    cost: CostModel | None = None,
    options: RunOptions | None = None,
) -> ComparisonReport:
    """Run each trace under each mode; row order is trace-major, mode-minor."""
    geom = geom or Geometry()
    if traces and isinstance(traces[0], TraceEvent):
        traces = [("trace", traces)]
    rows = []
    reports = {}
    for name, events in traces:
        for mode in modes:
            mode = canonical_mode(mode)
            rep = run(events, mode, geom, cost, options)
            reports[(name, mode)] = rep
            rows.append(
                ComparisonRow(
                    trace=name,
                    mode=mode,
                    total_cycles=rep.total_cycles,
                    isolation_faults=len(rep.isolation_faults),
                    violations=len(rep.violations),
                    dma_faults=len(rep.dma_faults),
                    denials=len(rep.denials),
                    memory_full=len(rep.memory_full),
                    reclaims=len(rep.reclaims),
                    mean_seg_util=rep.mean_segment_utilization(geom),
                    mean_page_util=rep.mean_page_utilization(geom),
                )
            )
    return ComparisonReport(rows, reports)


# ---------------------------------------------------------------------------
# analytic static-partition baseline
# ---------------------------------------------------------------------------


def static_partition_utilization(
    trace: list[TraceEvent], geom: Geometry, sample_interval: int = 100
) -> list[float]:
    """Segment utilization a static equal split would have achieved.

    Every owner (hypervisor plus each VM the trace creates) receives an
    equal, fixed share of the segment pool.  Allocations beyond the share
    are dropped, which is exactly the waste dynamic ownership avoids.
    Sampled at the same cadence as MetricsReport.utilization.
    """
    owners = {HYPERVISOR} | {ev.vm for ev in trace if ev.kind is EventKind.CREATE_VM}
    share = geom.total_segments // len(owners)
    pps = geom.pages_per_segment
    served = {vm: 0 for vm in owners}
    interval = max(1, sample_interval)

    def utilization() -> float:
        segs = sum(min(-(-pages // pps), share) for pages in served.values())
        return segs / geom.total_segments

    samples = []
    for index, ev in enumerate(trace, start=1):
        if ev.kind is EventKind.ALLOC and served[ev.vm] < share * pps:
            served[ev.vm] += 1
        elif ev.kind is EventKind.FREE and served[ev.vm] > 0:
            served[ev.vm] -= 1
        if index % interval == 0:
            samples.append(utilization())
    if len(trace) % interval != 0:
        samples.append(utilization())
    return samples
