"""Reference designs the segment controller is measured against.

Four families, each reduced to the structures that matter for walk
counts and isolation outcomes:

  nested paging    guest table (vpage -> ppage) composed with a
                   hypervisor real-map table (ppage -> physical page);
                   every miss costs two table walks.
  shadow tables    hypervisor-maintained composition (vpage -> physical
                   page) walked in one step; kept consistent by eagerly
                   re-deriving affected entries on every guest or
                   real-map write.
  virtual TLB      software TLB tagged by real ASIDs.  A hypervisor map
                   assigns each (vm, guest asid) pair a distinct real
                   ASID, so entries of different VMs can coexist without
                   flushing; the alternative policy flushes on every
                   switch instead.
  DMA remapping    per-device translation: a 256-entry root table (bus)
                   points at 32x8 context tables (device, function),
                   which name a protection domain whose page structure
                   is walked one level at a time.  A translated access
                   must land inside the device's domain.
  protection bits  per-page modes that gate hypervisor and DMA access
                   on top of an otherwise untranslated (raw) DMA path.

Raw DMA carries no protection at all: the device address is the
physical address, and cross-VM hits succeed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, unique

from .errors import MappingError, OutOfRangeError

MAX_BUS = 256
MAX_DEVICE = 32
MAX_FUNCTION = 8

DEFAULT_WALK_LEVELS = 4

# ---------------------------------------------------------------------------
# nested / shadow page tables
# ---------------------------------------------------------------------------


@dataclass
class GuestPageTable:
    owner: int
    entries: dict[int, int] = field(default_factory=dict)  # vpage -> ppage


@dataclass
class RealMapTable:
    owner: int
    entries: dict[int, int] = field(default_factory=dict)  # ppage -> phys page


@dataclass
class ShadowPageTable:
    owner: int
    entries: dict[int, int] = field(default_factory=dict)  # vpage -> phys page


@dataclass(frozen=True)
class WalkResult:
    page: int | None      # global physical page, None on fault
    walks: int
    fault: str | None     # "guest_miss" | "real_miss" | None


def nested_translate(vpage: int, gpt: GuestPageTable, rmap: RealMapTable) -> WalkResult:
    """Two-level lookup: guest table then real map, one walk each."""
    ppage = gpt.entries.get(vpage)
    if ppage is None:
        return WalkResult(None, walks=1, fault="guest_miss")
    phys = rmap.entries.get(ppage)
    if phys is None:
        return WalkResult(None, walks=2, fault="real_miss")
    return WalkResult(phys, walks=2, fault=None)


def shadow_translate(vpage: int, shadow: ShadowPageTable) -> WalkResult:
    phys = shadow.entries.get(vpage)
    if phys is None:
        return WalkResult(None, walks=1, fault="guest_miss")
    return WalkResult(phys, walks=1, fault=None)


def shadow_update_vpage(
    shadow: ShadowPageTable, gpt: GuestPageTable, rmap: RealMapTable, vpage: int
) -> int:
    """Re-derive one shadow entry after a guest table write.

    Returns the number of real-map walks spent.
    """
    ppage = gpt.entries.get(vpage)
    phys = rmap.entries.get(ppage) if ppage is not None else None
    if phys is None:
        shadow.entries.pop(vpage, None)
    else:
        shadow.entries[vpage] = phys
    return 1


def shadow_update_ppage(
    shadow: ShadowPageTable, gpt: GuestPageTable, rmap: RealMapTable, ppage: int
) -> int:
    """Re-derive every shadow entry affected by a real-map write."""
    steps = 0
    for vpage, mapped in gpt.entries.items():
        if mapped == ppage:
            steps += shadow_update_vpage(shadow, gpt, rmap, vpage)
    return steps


# ---------------------------------------------------------------------------
# virtual TLB with ASID map
# ---------------------------------------------------------------------------

FLUSH_POLICY = "flush"
ASID_POLICY = "asid"


class AsidMap:
    """Injective hypervisor map from (vm, guest asid) to a real ASID."""

    def __init__(self) -> None:
        self._map: dict[tuple[int, int], int] = {}
        self._next = 1

    def assign(self, vm: int, guest_asid: int) -> int:
        key = (vm, guest_asid)
        if key not in self._map:
            self._map[key] = self._next
            self._next += 1
        return self._map[key]

    def lookup(self, vm: int, guest_asid: int) -> int:
        key = (vm, guest_asid)
        if key not in self._map:
            raise MappingError(f"no real ASID for vm {vm} guest asid {guest_asid}")
        return self._map[key]

    def drop_vm(self, vm: int) -> None:
        # Real ASIDs are retired, never recycled: stale TLB entries keyed by
        # them can never match again.
        for key in [k for k in self._map if k[0] == vm]:
            del self._map[key]


class VirtualTlb:
    """Software TLB keyed by (real asid, vpage), FIFO eviction.

    capacity 0 disables the TLB entirely: every lookup misses and
    inserts are dropped.
    """

    def __init__(self, policy: str = ASID_POLICY, capacity: int = 64):
        if policy not in (FLUSH_POLICY, ASID_POLICY):
            raise OutOfRangeError(f"unknown TLB policy {policy!r}")
        self.policy = policy
        self.capacity = capacity
        self.entries: dict[tuple[int, int], int] = {}

    def lookup(self, real_asid: int, vpage: int) -> int | None:
        return self.entries.get((real_asid, vpage))

    def insert(self, real_asid: int, vpage: int, phys: int) -> None:
        if self.capacity <= 0:
            return
        key = (real_asid, vpage)
        if key not in self.entries and len(self.entries) >= self.capacity:
            self.entries.pop(next(iter(self.entries)))
        self.entries[key] = phys

    def invalidate_page(self, real_asid: int, vpage: int) -> None:
        self.entries.pop((real_asid, vpage), None)

    def flush(self) -> int:
        n = len(self.entries)
        self.entries.clear()
        return n

    def on_switch(self) -> bool:
        """Returns True when the policy forces (and performs) a full flush."""
        if self.policy == FLUSH_POLICY:
            self.flush()
            return True
        return False


# ---------------------------------------------------------------------------
# DMA remapping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DmaRequest:
    bus: int
    device: int
    function: int
    dva: int          # device-issued flat byte address
    is_write: bool

    def __post_init__(self) -> None:
        if not (0 <= self.bus < MAX_BUS):
            raise OutOfRangeError(f"bus {self.bus} outside 0..{MAX_BUS - 1}")
        if not (0 <= self.device < MAX_DEVICE):
            raise OutOfRangeError(f"device {self.device} outside 0..{MAX_DEVICE - 1}")
        if not (0 <= self.function < MAX_FUNCTION):
            raise OutOfRangeError(f"function {self.function} outside 0..{MAX_FUNCTION - 1}")
        if self.dva < 0:
            raise OutOfRangeError(f"dva {self.dva} is negative")


@dataclass
class ProtectionDomain:
    domain_id: int
    vm: int
    pages: set[int] = field(default_factory=set)
    devices: set[tuple[int, int, int]] = field(default_factory=set)
    table: dict[int, int] = field(default_factory=dict)  # dva page -> phys page


@dataclass(frozen=True)
class DmaResult:
    page: int | None
    steps: int            # table lookups plus walk levels actually performed
    fault: str | None     # "no_root" | "no_context" | "no_mapping" | "domain_mismatch"


class RemappingTables:
    """Root table by bus, context tables by (device, function), domains."""

    def __init__(self, levels: int = DEFAULT_WALK_LEVELS):
        if levels < 1:
            raise OutOfRangeError(f"walk depth must be >= 1, got {levels}")
        self.levels = levels
        self.root: dict[int, dict[tuple[int, int], int]] = {}
        self.domains: dict[int, ProtectionDomain] = {}

    def assign(self, domain_id: int, vm: int, bus: int, device: int, function: int) -> ProtectionDomain:
        # Range discipline matches DmaRequest.
        DmaRequest(bus, device, function, 0, False)
        dom = self.domains.get(domain_id)
        if dom is None:
            dom = ProtectionDomain(domain_id, vm)
            self.domains[domain_id] = dom
        context = self.root.setdefault(bus, {})
        context[(device, function)] = domain_id
        dom.devices.add((bus, device, function))
        return dom

    def domain_of_device(self, bus: int, device: int, function: int) -> ProtectionDomain | None:
        context = self.root.get(bus)
        if context is None:
            return None
        domain_id = context.get((device, function))
        return None if domain_id is None else self.domains[domain_id]

    def map_page(self, domain_id: int, dva_page: int, phys_page: int) -> None:
        dom = self.domains[domain_id]
        dom.table[dva_page] = phys_page
        dom.pages.add(phys_page)

    def unmap_phys(self, domain_id: int, phys_page: int) -> None:
        dom = self.domains.get(domain_id)
        if dom is None:
            return
        dom.pages.discard(phys_page)
        for dva_page in [d for d, p in dom.table.items() if p == phys_page]:
            del dom.table[dva_page]


def iommu_dma_translate(
    req: DmaRequest, tables: RemappingTables, page_size: int
) -> DmaResult:
    """Per-device translation with domain containment.

    Steps: one root lookup, one context lookup, then `levels` walk steps
    through the domain's page structure, charged only as far as the walk
    actually gets.
    """
    context = tables.root.get(req.bus)
    if context is None:
        return DmaResult(None, steps=1, fault="no_root")
    domain_id = context.get((req.device, req.function))
    if domain_id is None:
        return DmaResult(None, steps=2, fault="no_context")
    dom = tables.domains[domain_id]
    steps = 2 + tables.levels
    phys = dom.table.get(req.dva // page_size)
    if phys is None:
        return DmaResult(None, steps=steps, fault="no_mapping")
    if phys not in dom.pages:
        return DmaResult(None, steps=steps, fault="domain_mismatch")
    return DmaResult(phys, steps=steps, fault=None)


# ---------------------------------------------------------------------------
# raw DMA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawDmaOutcome:
    page: int
    cross_owner: int | None   # owner hit when it is not the issuing VM


def raw_dma_access(vm: int, target_page: int, owner_of_page) -> RawDmaOutcome:
    """Untranslated DMA: always lands; cross-VM hits are reported, not blocked."""
    owner = owner_of_page(target_page)
    cross = owner if (owner is not None and owner != vm) else None
    return RawDmaOutcome(target_page, cross)


# ---------------------------------------------------------------------------
# per-page protection bits
# ---------------------------------------------------------------------------


@unique
class PageMode(Enum):
    HYPERVISOR_ONLY = "hyp_only"        # unassigned page
    HYPERVISOR_AND_DMA = "hyp_dma"      # assigned; hypervisor and DMA allowed
    HYPERVISOR_DENIED = "hyp_denied"    # assigned; DMA allowed, hypervisor not
    LOCKED = "locked"                   # assigned; neither hypervisor nor DMA


@unique
class Requester(Enum):
    HYPERVISOR = "hypervisor"
    OWNER_VM = "owner_vm"
    OTHER_VM = "other_vm"
    DMA = "dma"


# Per-mode allow sets.  Other VMs are never allowed, whatever the mode.
_ALLOWED: dict[PageMode, frozenset[Requester]] = {
    PageMode.HYPERVISOR_ONLY: frozenset({Requester.HYPERVISOR}),
    PageMode.HYPERVISOR_AND_DMA: frozenset(
        {Requester.HYPERVISOR, Requester.OWNER_VM, Requester.DMA}
    ),
    PageMode.HYPERVISOR_DENIED: frozenset({Requester.OWNER_VM, Requester.DMA}),
    PageMode.LOCKED: frozenset({Requester.OWNER_VM}),
}


def page_mode_allows(mode: PageMode, requester: Requester) -> bool:
    return requester in _ALLOWED[mode]


def hypervisor_may_touch(mode: PageMode) -> bool:
    """Whether the hypervisor can reclaim/swap a page in this mode."""
    return page_mode_allows(mode, Requester.HYPERVISOR)
