"""Composition root: DRAM, configuration, wiring, and run orchestration.

A Machine owns one PE cluster (cache + MMU + TLB), the coherent
interconnect, sparse DRAM, and optionally the translation-rewriter agent.
Runs are deterministic: the same configuration and trace produce
bit-identical statistics and memory images.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

from . import addressing
from .addressing import PAGE_SHIFT, PAGE_SIZE, TranslationFault
from .coherence import (
    LINE_BYTES,
    Cache,
    CoherentInterconnect,
    Counters,
    LatencyConfig,
)
from .lightv import LightV, WatermarkWindow, WM_SPAN_FRAMES
from .mmu import Mmu, Tlb

_LINE_MASK = LINE_BYTES - 1

FAULT_ABORT = "abort"
FAULT_RECORD = "record"

STATS_COLUMNS = (
    "total_cycles",
    "data_hits",
    "data_misses",
    "walk_reads",
    "snoops_issued",
    "snoops_acked",
    "dram_reads",
    "dram_writes",
    "lines_manipulated",
)


class ConfigError(ValueError):
    """Invalid machine configuration; message names the offending field."""


class TraceError(ValueError):
    pass


class TraceAbort(RuntimeError):
    """A trace access faulted under the abort policy."""

    def __init__(self, index, asid, va, fault):
        super().__init__(
            f"trace[{index}]: fault at va {va:#x} (level {fault.level},"
            f" pte @ {fault.pte_address:#x})"
        )
        self.index = index
        self.asid = asid
        self.va = va
        self.fault = fault


class AllocatorExhausted(RuntimeError):
    pass


class SimClock:
    """Monotonic cycle counter."""

    def __init__(self):
        self.now = 0

    def advance(self, cycles: int):
        if cycles < 0:
            raise ValueError("clock cannot move backwards")
        self.now += cycles


class Dram:
    """Sparse 64-byte-line store; unwritten bytes read as zero.

    Line-granular reads/writes model fabric traffic and are counted;
    the qword/byte accessors are the uncounted direct port used for
    table construction, oracles, and debug readback.
    """

    def __init__(self, base: int, size: int):
        if base % PAGE_SIZE or size % PAGE_SIZE or size <= 0:
            raise ValueError("DRAM aperture must be page-aligned and non-empty")
        if base + size > (1 << addressing.PA_BITS):
            raise ValueError("DRAM aperture exceeds the physical address width")
        self.base = base
        self.size = size
        self._lines = {}
        self.reads = 0
        self.writes = 0

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    def contains_line(self, line_addr: int) -> bool:
        return self.base <= line_addr and line_addr + LINE_BYTES <= self.base + self.size

    def _check(self, addr: int, n: int = 1):
        if not (self.base <= addr and addr + n <= self.base + self.size):
            raise ValueError(f"address outside DRAM aperture: {addr:#x}")

    def read_line(self, line_addr: int) -> bytes:
        self._check(line_addr, LINE_BYTES)
        self.reads += 1
        stored = self._lines.get(line_addr)
        return bytes(LINE_BYTES) if stored is None else bytes(stored)

    def write_line(self, line_addr: int, payload):
        self._check(line_addr, LINE_BYTES)
        if len(payload) != LINE_BYTES:
            raise ValueError("line payload must be 64 bytes")
        self.writes += 1
        self._lines[line_addr] = bytearray(payload)

    def read_qword(self, addr: int) -> int:
        self._check(addr, 8)
        line = self._lines.get(addr & ~_LINE_MASK)
        if line is None:
            return 0
        off = addr & _LINE_MASK
        return int.from_bytes(line[off : off + 8], "little")

    def write_qword(self, addr: int, value: int):
        self._check(addr, 8)
        line_addr = addr & ~_LINE_MASK
        line = self._lines.get(line_addr)
        if line is None:
            line = self._lines[line_addr] = bytearray(LINE_BYTES)
        off = addr & _LINE_MASK
        line[off : off + 8] = value.to_bytes(8, "little")

    def read_bytes(self, addr: int, n: int) -> bytes:
        self._check(addr, n)
        out = bytearray(n)
        i = 0
        while i < n:
            a = addr + i
            line = self._lines.get(a & ~_LINE_MASK)
            off = a & _LINE_MASK
            take = min(LINE_BYTES - off, n - i)
            if line is not None:
                out[i : i + take] = line[off : off + take]
            i += take
        return bytes(out)

    def write_bytes(self, addr: int, data: bytes):
        self._check(addr, len(data))
        for i, b in enumerate(data):
            a = addr + i
            line_addr = a & ~_LINE_MASK
            line = self._lines.get(line_addr)
            if line is None:
                line = self._lines[line_addr] = bytearray(LINE_BYTES)
            line[a & _LINE_MASK] = b

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for line_addr in sorted(self._lines):
            payload = self._lines[line_addr]
            if any(payload):
                h.update(line_addr.to_bytes(8, "little"))
                h.update(payload)
        return h.hexdigest()

    def clone(self) -> "Dram":
        """Deep copy of the current image (counters reset)."""
        other = Dram(self.base, self.size)
        other._lines = {addr: bytearray(line) for addr, line in self._lines.items()}
        return other


class FrameAllocator:
    """Bump allocator handing out 4 KB frames from the DRAM aperture."""

    def __init__(self, dram: Dram, start_pfn: Optional[int] = None):
        self.dram = dram
        self._next = start_pfn if start_pfn is not None else dram.base >> PAGE_SHIFT
        self._limit = (dram.base + dram.size) >> PAGE_SHIFT
        self.allocated = 0

    @property
    def next_pfn(self) -> int:
        return self._next

    def alloc(self) -> int:
        if self._next >= self._limit:
            raise AllocatorExhausted("no free frames left in the DRAM aperture")
        pfn = self._next
        self._next += 1
        self.allocated += 1
        return pfn


@dataclass
class MachineConfig:
    dram_base: int = 0x8000_0000
    dram_size: int = 0x8000_0000
    watermark_base_pfn: int = 0x20_0000
    cache_sets: int = 256
    cache_ways: int = 4
    tlb_entries: int = 64
    latencies: LatencyConfig = field(default_factory=LatencyConfig)
    mode: str = "absent"
    cache_ptes: bool = False
    fault_policy: str = FAULT_ABORT
    strict_isolation: bool = True
    debug_tlb_check: bool = False

    def validate(self):
        try:
            Dram(self.dram_base, self.dram_size)
        except ValueError as exc:
            raise ConfigError(f"dram_base/dram_size: {exc}") from None
        try:
            window = WatermarkWindow(self.watermark_base_pfn)
        except ValueError as exc:
            raise ConfigError(f"watermark_base_pfn: {exc}") from None
        lo = self.watermark_base_pfn << PAGE_SHIFT
        hi = (self.watermark_base_pfn + WM_SPAN_FRAMES) << PAGE_SHIFT
        if lo < self.dram_base + self.dram_size and self.dram_base < hi:
            raise ConfigError(
                "watermark_base_pfn: watermark window overlaps the DRAM aperture"
            )
        if self.cache_sets <= 0 or self.cache_sets & (self.cache_sets - 1):
            raise ConfigError("cache_sets: must be a power of two")
        if self.cache_ways <= 0:
            raise ConfigError("cache_ways: must be positive")
        if self.tlb_entries < 0:
            raise ConfigError("tlb_entries: must be >= 0")
        try:
            self.latencies.validate()
        except ValueError as exc:
            raise ConfigError(f"latencies: {exc}") from None
        if self.mode not in ("absent", "passive", "active"):
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.fault_policy not in (FAULT_ABORT, FAULT_RECORD):
            raise ConfigError(f"fault_policy: unknown policy {self.fault_policy!r}")
        return window

    def to_dict(self) -> dict:
        d = {
            "dram_base": hex(self.dram_base),
            "dram_size": hex(self.dram_size),
            "watermark_base_pfn": hex(self.watermark_base_pfn),
            "geometry": {
                "cache_sets": self.cache_sets,
                "cache_ways": self.cache_ways,
                "line_bytes": LINE_BYTES,
            },
            "tlb_entries": self.tlb_entries,
            "latencies": vars(self.latencies).copy(),
            "mode": self.mode,
            "cache_ptes": self.cache_ptes,
            "fault_policy": self.fault_policy,
            "strict_isolation": self.strict_isolation,
            "debug_tlb_check": self.debug_tlb_check,
        }
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "MachineConfig":
        def num(value):
            return int(value, 0) if isinstance(value, str) else int(value)

        cfg = cls()
        geometry = data.get("geometry", {})
        if "line_bytes" in geometry and num(geometry["line_bytes"]) != LINE_BYTES:
            raise ConfigError("geometry.line_bytes: only 64-byte lines are modeled")
        if "cache_sets" in geometry:
            cfg.cache_sets = num(geometry["cache_sets"])
        if "cache_ways" in geometry:
            cfg.cache_ways = num(geometry["cache_ways"])
        for key in ("dram_base", "dram_size", "watermark_base_pfn", "tlb_entries"):
            if key in data:
                setattr(cfg, key, num(data[key]))
        if "latencies" in data:
            lat = vars(cfg.latencies).copy()
            for k, v in data["latencies"].items():
                if k not in lat:
                    raise ConfigError(f"latencies.{k}: unknown latency")
                lat[k] = num(v)
            cfg.latencies = LatencyConfig(**lat)
        for key in ("mode", "fault_policy"):
            if key in data:
                setattr(cfg, key, data[key])
        for key in ("cache_ptes", "strict_isolation", "debug_tlb_check"):
            if key in data:
                setattr(cfg, key, bool(data[key]))
        cfg.validate()
        return cfg

    def with_mode(self, mode: str) -> "MachineConfig":
        return replace(self, mode=mode, latencies=replace(self.latencies))


def load_config(path: str) -> MachineConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file: {exc}") from None
    return MachineConfig.from_dict(data)


@dataclass(frozen=True)
class FaultRecord:
    index: int
    asid: int
    va: int
    level: int
    pte_address: int


@dataclass
class RunStats:
    total_cycles: int
    data_hits: int
    data_misses: int
    walk_reads: int
    snoops_issued: int
    snoops_acked: int
    dram_reads: int
    dram_writes: int
    lines_manipulated: int
    trace_digest: str
    faults: tuple = ()

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in STATS_COLUMNS}

    def text(self) -> str:
        width = max(len(n) for n in STATS_COLUMNS)
        lines = [f"  {n:<{width}} {getattr(self, n)}" for n in STATS_COLUMNS]
        if self.faults:
            lines.append(f"  {'faults':<{width}} {len(self.faults)}")
        return "\n".join(lines)


@dataclass
class OverheadReport:
    cycles_base: int
    cycles_other: int
    relative: float
    counter_deltas: dict

    def text(self, label: str) -> str:
        return (
            f"{label}: {self.cycles_other} vs {self.cycles_base} cycles,"
            f" overhead {self.relative * 100:+.4f}%"
        )


def compare_runs(stats_a: RunStats, stats_b: RunStats) -> OverheadReport:
    """Relative cycle overhead of run b over run a (same trace required)."""
    if stats_a.trace_digest != stats_b.trace_digest:
        raise ValueError("runs executed different traces")
    deltas = {
        name: getattr(stats_b, name) - getattr(stats_a, name)
        for name in STATS_COLUMNS
    }
    relative = (
        (stats_b.total_cycles - stats_a.total_cycles) / stats_a.total_cycles
        if stats_a.total_cycles
        else 0.0
    )
    return OverheadReport(stats_a.total_cycles, stats_b.total_cycles, relative, deltas)


def trace_digest(trace) -> str:
    h = hashlib.sha256()
    pack = struct.Struct("<IQBH").pack
    for asid, op, va, value in trace:
        h.update(pack(asid, va, 1 if op == "W" else 0, (value or 0) & 0xFFFF))
    return h.hexdigest()


def parse_trace(text: str):
    """Parse trace lines: `asid op va [data]`, ops R/W, hex fields."""
    trace = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) not in (3, 4):
            raise TraceError(f"line {lineno}: expected 'asid op va [data]'")
        op = parts[1].upper()
        if op not in ("R", "W"):
            raise TraceError(f"line {lineno}: op must be R or W")
        try:
            asid = addressing._hex_field(parts[0])
            va = addressing._hex_field(parts[2])
            value = addressing._hex_field(parts[3]) if len(parts) == 4 else None
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if op == "W" and value is None:
            raise TraceError(f"line {lineno}: write needs a data byte")
        trace.append((asid, op, va, value))
    return trace


def format_trace(trace) -> str:
    lines = []
    for asid, op, va, value in trace:
        if op == "W":
            lines.append(f"{asid:#x} W {va:#x} {value:#x}")
        else:
            lines.append(f"{asid:#x} R {va:#x}")
    return "\n".join(lines) + ("\n" if lines else "")


class Machine:
    """One fully wired simulator instance."""

    def __init__(self, config: MachineConfig):
        window = config.validate()
        self.config = config
        self.clock = SimClock()
        self.counters = Counters()
        self.dram = Dram(config.dram_base, config.dram_size)
        self.allocator = FrameAllocator(self.dram)
        self.cache = Cache(config.cache_sets, config.cache_ways)
        self.cci = CoherentInterconnect(
            self.dram, config.latencies, self.counters, self.clock
        )
        self.spaces = {}
        self.tlb = Tlb(config.tlb_entries)
        self.lightv = None
        if config.mode in ("passive", "active"):
            self.lightv = LightV(window, self.dram, config.latencies, self.spaces)
            self.cci.register_agent(self.lightv.handle_snoop)
            self.cci.add_writeback_hook(self.lightv.on_writeback)
        self.mmu = Mmu(
            self.cci,
            self.cache,
            self.tlb,
            self.spaces,
            cache_ptes=config.cache_ptes,
            debug_tlb_check=config.debug_tlb_check,
            expected_translation=self._expected_translation,
        )
        if self.lightv is not None:
            self.lightv.wire(
                tlb_invalidate_range=self.mmu.tlb_invalidate_range,
                invalidate_cache_line=lambda line: self.cci.invalidate_line(
                    self.cache, line
                ),
            )

    def _expected_translation(self, asid: int, va: int):
        if self.lightv is not None:
            return self.lightv.expected_pa(asid, va)
        try:
            return addressing.reference_walk(self.spaces[asid], va, self.dram)
        except TranslationFault:
            return None

    @property
    def agent_count(self) -> int:
        return len(self.cci.agents)

    def register_space(self, asid: int, mappings) -> addressing.AddressSpace:
        space = addressing.build_tables(mappings, self.dram, self.allocator, asid)
        self.spaces[asid] = space
        return space

    def activate_rules(self, rules, strict: Optional[bool] = None):
        if self.config.mode != "active":
            raise RuntimeError(f"machine mode is {self.config.mode!r}, not active")
        if strict is None:
            strict = self.config.strict_isolation
        self.lightv.activate(rules, strict=strict)

    def deactivate_rule(self, rule_id: int):
        self.lightv.deactivate(rule_id)

    def mem_read(self, asid: int, va: int) -> int:
        return self.mmu.mem_read(asid, va)

    def mem_write(self, asid: int, va: int, value: int):
        self.mmu.mem_write(asid, va, value)

    def flush_cache(self):
        self.cci.flush(self.cache)

    def invalidate_page_lines(self, pa_base: int):
        for k in range(PAGE_SIZE // LINE_BYTES):
            self.cci.invalidate_line(self.cache, pa_base + (k << 6))

    def read_frame(self, pfn: int) -> bytes:
        return self.dram.read_bytes(pfn << PAGE_SHIFT, PAGE_SIZE)

    def run_trace(self, trace, digest: Optional[str] = None) -> RunStats:
        """Execute accesses in order, returning this run's statistics.

        Faults follow the configured policy: `abort` raises TraceAbort,
        `record` logs a FaultRecord and continues.
        """
        counters0 = self.counters.snapshot()
        cycles0 = self.clock.now
        dram_reads0, dram_writes0 = self.dram.reads, self.dram.writes
        manip0 = self.lightv.lines_manipulated if self.lightv else 0
        faults = []
        record = self.config.fault_policy == FAULT_RECORD
        mem_read, mem_write = self.mmu.mem_read, self.mmu.mem_write
        for index, (asid, op, va, value) in enumerate(trace):
            try:
                if op == "W":
                    mem_write(asid, va, value)
                else:
                    mem_read(asid, va)
            except TranslationFault as fault:
                if not record:
                    raise TraceAbort(index, asid, va, fault) from None
                faults.append(
                    FaultRecord(index, asid, va, fault.level, fault.pte_address)
                )
        c = self.counters
        return RunStats(
            total_cycles=self.clock.now - cycles0,
            data_hits=c.data_hits - counters0["data_hits"],
            data_misses=c.data_misses - counters0["data_misses"],
            walk_reads=c.walk_reads - counters0["walk_reads"],
            snoops_issued=c.snoops_issued - counters0["snoops_issued"],
            snoops_acked=c.snoops_acked - counters0["snoops_acked"],
            dram_reads=self.dram.reads - dram_reads0,
            dram_writes=self.dram.writes - dram_writes0,
            lines_manipulated=(self.lightv.lines_manipulated - manip0)
            if self.lightv
            else 0,
            trace_digest=digest if digest is not None else trace_digest(trace),
            faults=tuple(faults),
        )
