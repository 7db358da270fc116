"""Periodic tag scanning.

Subscriptions are grouped into per-period scan lists.  Before each cycle a
list is planned: array-element subscriptions are coalesced into one read
from the first to the highest requested element, BOOL-array bits ride on
their underlying DINT words, and the resulting reads are packed greedily
into Multi-Requests until either the encoded request or the estimated
response would cross the PLC buffer limit.  Outputs are written on demand
(whole-span when more than one element of a coalesced span is dirty) and
read back every cycle with drift notifications when the PLC side changed.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field, replace

from . import cip
from .cip import CipRequest, CipType, CipValue
from .client import PlcClient, PlcEndpoint, PlcError, Phase
from .tags import TagRef, bool_remap, format_tag, parse_tag, to_epath

log = logging.getLogger(__name__)

UNKNOWN_TYPE_WIDTH = 4  # sizing assumption until the first read fixes the type


class Direction(enum.Enum):
    INPUT = "in"
    OUTPUT = "out"


class Quality(enum.Enum):
    STALE = "stale"
    OK = "ok"
    ERROR = "error"


@dataclass
class TransferStats:
    count: int = 0
    errors: int = 0
    overruns: int = 0
    last_s: float | None = None
    min_s: float | None = None
    max_s: float | None = None

    def record(self, duration: float) -> None:
        self.count += 1
        self.last_s = duration
        self.min_s = duration if self.min_s is None else min(self.min_s, duration)
        self.max_s = duration if self.max_s is None else max(self.max_s, duration)


class Subscription:
    """One scanned tag: address, expectations, and the current value cell."""

    def __init__(
        self,
        plc_name: str,
        ref: TagRef,
        period_s: float,
        direction: Direction,
        elem_type: CipType | None,
        coalesce: bool,
        on_drift=None,
    ):
        self.plc_name = plc_name
        self.ref = ref
        self.period_s = period_s
        self.direction = direction
        self.elem_type = elem_type
        self.type_declared = elem_type is not None
        self.coalesce = coalesce
        self.on_drift = on_drift
        self.value: CipValue | None = None
        self.timestamp: float | None = None
        self.quality = Quality.STALE
        self.dirty = False
        self.pending = None
        self.readback_seen = False

    def __repr__(self):
        return f"<Subscription {self.plc_name}:{format_tag(self.ref)} @{self.period_s}s>"

    def wire_type(self) -> CipType | None:
        """Element type as transferred: DINT words for BOOL-array bits."""
        if self.ref.bool_array:
            return CipType.DINT
        return self.elem_type


@dataclass
class ReadOp:
    """One planned read and where its elements go."""

    request: CipRequest
    inner_size: int
    response_estimate: int
    expected_type: CipType | None
    # (subscription, element offset within the read, bit index or None)
    targets: list[tuple[Subscription, int, int | None]]
    cache_key: tuple[float, str, CipType] | None = None
    start_element: int | None = None


@dataclass
class ScanPlan:
    transfers: list[list[ReadOp]]
    unplannable: list[Subscription]


@dataclass
class ScanList:
    period_s: float
    members: list[Subscription] = field(default_factory=list)
    stats: TransferStats = field(default_factory=TransferStats)
    plan: ScanPlan | None = None
    next_tick: float | None = None


class _PlcUnit:
    """Per-PLC worker state: client, scan lists, caches, command queue."""

    def __init__(self, name: str, client: PlcClient):
        self.name = name
        self.client = client
        self.lists: dict[float, ScanList] = {}
        # (period, base chain, wire type) -> {element index: raw value}
        self.span_cache: dict[tuple[float, str, CipType], dict[int, object]] = {}
        self.queue: queue.Queue = queue.Queue()
        self.thread: threading.Thread | None = None
        self.running = False


def _group_base(sub: Subscription) -> str:
    return format_tag(sub.ref.base())


def _read_element(sub: Subscription) -> int:
    """Element index as transferred (DINT word index for BOOL-array bits)."""
    if sub.ref.bool_array:
        dint_ref, _bit = bool_remap(sub.ref)
        return dint_ref.final_element
    element = sub.ref.final_element
    if element is None:
        raise ValueError(f"{format_tag(sub.ref)} has no element index")
    return element


def _read_bit(sub: Subscription) -> int | None:
    if sub.ref.bool_array:
        return bool_remap(sub.ref)[1]
    return None


class TagScanner:
    """Scan-list manager and executor for any number of PLCs.

    With batching disabled every read is its own wire round trip; the
    default packs reads into Multi-Requests under the buffer limit.
    """

    def __init__(self, batching: bool = True):
        self.batching = batching
        self.on_sample = None  # fn(wall_ms, period_ms, transfer_ms)
        self._units: dict[str, _PlcUnit] = {}
        self._cell_lock = threading.Lock()
        self._started = False

    # -- membership ----------------------------------------------------------

    def add_plc(
        self, name: str, endpoint: PlcEndpoint, connected: bool = False
    ) -> None:
        if name in self._units:
            raise ValueError(f"plc {name!r} already defined")
        unit = _PlcUnit(name, PlcClient(endpoint, prefer_connected=connected))
        self._units[name] = unit
        if self._started:
            self._start_unit(unit)

    def add_tag(
        self,
        plc_name: str,
        ref: TagRef | str,
        period_s: float,
        direction: Direction | str = Direction.INPUT,
        elem_type: CipType | None = None,
        coalesce: bool = True,
        bool_array: bool = False,
        on_drift=None,
    ) -> Subscription:
        if isinstance(ref, str):
            ref = parse_tag(ref, bool_array=bool_array)
        elif bool_array and not ref.bool_array:
            ref = replace(ref, bool_array=True)
        if isinstance(direction, str):
            direction = Direction(direction)
        if period_s <= 0:
            raise ValueError("period must be positive")
        if ref.bool_array and elem_type not in (None, CipType.BOOL):
            raise ValueError("bool-array tags carry BOOL elements")
        unit = self._unit(plc_name)
        sub = Subscription(
            plc_name, ref, period_s, direction,
            CipType.BOOL if ref.bool_array else elem_type,
            coalesce, on_drift,
        )

        def attach():
            sl = unit.lists.get(period_s)
            if sl is None:
                sl = ScanList(period_s)
                unit.lists[period_s] = sl
            sl.members.append(sub)
            sl.plan = None
            return sub

        return self._submit(unit, attach)

    def replace_tag(self, sub: Subscription, new_ref: TagRef | str) -> None:
        """Point an existing subscription at a different tag, in place."""
        if isinstance(new_ref, str):
            new_ref = parse_tag(new_ref, bool_array=sub.ref.bool_array)
        unit = self._unit(sub.plc_name)

        def swap():
            sub.ref = new_ref
            sub.quality = Quality.STALE
            sub.value = None
            sub.readback_seen = False
            if not sub.type_declared:
                sub.elem_type = None
            sl = unit.lists.get(sub.period_s)
            if sl is not None:
                sl.plan = None

        self._submit(unit, swap)

    # -- value access ----------------------------------------------------------

    def snapshot(self, sub: Subscription):
        """Consistent (value, timestamp, quality) triple."""
        with self._cell_lock:
            return sub.value, sub.timestamp, sub.quality

    def value_of(self, sub: Subscription):
        value, _ts, _q = self.snapshot(sub)
        return value.scalar if value is not None else None

    def stats(self, plc_name: str, period_s: float) -> TransferStats:
        unit = self._unit(plc_name)
        sl = unit.lists.get(period_s)
        if sl is None:
            raise KeyError(f"no scan list with period {period_s} on {plc_name}")
        with self._cell_lock:
            return replace(sl.stats)

    def stat_value(self, path: str):
        """Pseudo-tag access: <plc>/<period_ms>/errors|last_ms|min_ms|max_ms."""
        try:
            plc_name, period_ms, item = path.split("/")
            period_s = float(period_ms) / 1000.0
        except ValueError:
            raise KeyError(f"bad stats path {path!r}") from None
        stats = self.stats(plc_name, period_s)
        if item == "errors":
            return stats.errors
        if item == "count":
            return stats.count
        if item == "overruns":
            return stats.overruns
        if item in ("last_ms", "min_ms", "max_ms"):
            seconds = getattr(stats, item.replace("_ms", "_s"))
            return None if seconds is None else seconds * 1000.0
        raise KeyError(f"unknown stats item {item!r}")

    def connection_phase(self, plc_name: str) -> Phase:
        return self._unit(plc_name).client.phase

    def plan_info(self, plc_name: str, period_s: float) -> list[int]:
        """Reads per planned transfer for one list (planning it if needed)."""
        unit = self._unit(plc_name)

        def inspect():
            sl = unit.lists[period_s]
            if sl.plan is None:
                sl.plan = self._plan_list(unit, sl)
            return [len(transfer) for transfer in sl.plan.transfers]

        return self._submit(unit, inspect)

    # -- planning ----------------------------------------------------------------

    def _plan_list(self, unit: _PlcUnit, sl: ScanList) -> ScanPlan:
        limit = unit.client.endpoint.buffer_limit
        ops: list[ReadOp] = []
        unplannable: list[Subscription] = []
        groups: dict[tuple[str, CipType], list[Subscription]] = {}
        solo: list[Subscription] = []

        for sub in sl.members:
            wire_type = sub.wire_type()
            indexed = sub.ref.bool_array or sub.ref.final_element is not None
            if sub.coalesce and indexed and wire_type is not None:
                groups.setdefault((_group_base(sub), wire_type), []).append(sub)
            else:
                solo.append(sub)

        for (base, wire_type), subs in groups.items():
            elements = [_read_element(s) for s in subs]
            first, high = min(elements), max(elements)
            count = high - first + 1
            start_ref = subs[0].ref
            if start_ref.bool_array:
                start_ref = bool_remap(start_ref)[0]
            read_ref = start_ref.with_final_element(first)
            request = cip.build_read_request(to_epath(read_ref), count)
            inner = len(cip.encode_request(request))
            estimate = cip.estimate_response_size(wire_type, count)
            if (
                cip.wrapped_request_size(inner) <= limit
                and estimate <= limit
            ):
                targets = [
                    (s, e - first, _read_bit(s)) for s, e in zip(subs, elements)
                ]
                ops.append(ReadOp(
                    request, inner, estimate, wire_type, targets,
                    cache_key=(sl.period_s, base, wire_type),
                    start_element=first,
                ))
            else:
                # span too large for one transfer: separate element reads
                solo.extend(subs)

        for sub in solo:
            op = self._solo_op(unit, sl, sub, limit)
            if op is None:
                unplannable.append(sub)
            else:
                ops.append(op)

        return ScanPlan(self._pack(ops, limit), unplannable)

    def _solo_op(
        self, unit: _PlcUnit, sl: ScanList, sub: Subscription, limit: int
    ) -> ReadOp | None:
        wire_type = sub.wire_type()
        if sub.ref.bool_array:
            read_ref = bool_remap(sub.ref)[0]
            element = read_ref.final_element
        else:
            read_ref = sub.ref
            element = sub.ref.final_element
        request = cip.build_read_request(to_epath(read_ref), 1)
        inner = len(cip.encode_request(request))
        width = wire_type.width if wire_type is not None else UNKNOWN_TYPE_WIDTH
        estimate = 4 + 2 + width
        if cip.wrapped_request_size(inner) > limit or estimate > limit:
            return None
        cache_key = None
        if element is not None and wire_type is not None:
            cache_key = (sl.period_s, _group_base(sub), wire_type)
        return ReadOp(
            request, inner, estimate, wire_type,
            [(sub, 0, _read_bit(sub))],
            cache_key=cache_key,
            start_element=element,
        )

    def _pack(self, ops: list[ReadOp], limit: int) -> list[list[ReadOp]]:
        if not self.batching:
            return [[op] for op in ops]
        transfers: list[list[ReadOp]] = []
        current: list[ReadOp] = []
        for op in ops:
            if current:
                inner_sizes = [o.inner_size for o in current] + [op.inner_size]
                responses = [o.response_estimate for o in current] + [op.response_estimate]
                request_ok = (
                    cip.wrapped_request_size(cip.multi_request_size(inner_sizes))
                    <= limit
                )
                response_ok = cip.multi_response_size(responses) <= limit
                if request_ok and response_ok:
                    current.append(op)
                    continue
                transfers.append(current)
            current = [op]
        if current:
            transfers.append(current)
        return transfers

    # -- scanning -------------------------------------------------------------

    def scan_once(self, plc_name: str, period_s: float | None = None) -> None:
        """Run one cycle of one list (or all lists) synchronously."""
        unit = self._unit(plc_name)

        def run():
            lists = (
                [unit.lists[period_s]] if period_s is not None
                else list(unit.lists.values())
            )
            for sl in lists:
                self._scan_list(unit, sl)

        self._submit(unit, run)

    def _scan_list(self, unit: _PlcUnit, sl: ScanList) -> None:
        now = time.time()
        if not unit.client.ensure_connected():
            with self._cell_lock:
                sl.stats.errors += 1
                for sub in sl.members:
                    sub.quality = Quality.ERROR
            return
        if sl.plan is None:
            sl.plan = self._plan_list(unit, sl)
        plan = sl.plan
        with self._cell_lock:
            for sub in plan.unplannable:
                sub.quality = Quality.ERROR
        started = time.monotonic()
        any_ok = False
        for transfer in plan.transfers:
            try:
                if len(transfer) == 1:
                    responses = [unit.client.round_trip(transfer[0].request)]
                else:
                    multi = cip.build_multi_request([op.request for op in transfer])
                    reply = unit.client.round_trip(multi)
                    responses = cip.split_multi_response(reply, len(transfer))
            except (PlcError, cip.CipError) as exc:
                log.debug("transfer failed on %s: %s", unit.name, exc)
                with self._cell_lock:
                    sl.stats.errors += 1
                    for op in transfer:
                        for sub, _off, _bit in op.targets:
                            sub.quality = Quality.ERROR
                if unit.client.phase is Phase.DISCONNECTED:
                    break  # session gone; remaining transfers can't run
                continue
            for op, resp in zip(transfer, responses):
                if self._absorb_read(unit, sl, op, resp, now):
                    any_ok = True
        duration = time.monotonic() - started
        if any_ok:
            with self._cell_lock:
                sl.stats.record(duration)
            if self.on_sample is not None:
                self.on_sample(
                    int(now * 1000), round(sl.period_s * 1000), duration * 1000.0
                )

    def _absorb_read(
        self, unit: _PlcUnit, sl: ScanList, op: ReadOp, resp: cip.CipResponse, now: float
    ) -> bool:
        try:
            value = cip.parse_read_response(resp)
        except cip.CipError as exc:
            log.debug("read failed on %s: %s", unit.name, exc)
            with self._cell_lock:
                sl.stats.errors += 1
                for sub, _off, _bit in op.targets:
                    sub.quality = Quality.ERROR
            return False
        if op.expected_type is not None and value.type is not op.expected_type:
            with self._cell_lock:
                sl.stats.errors += 1
                for sub, _off, _bit in op.targets:
                    sub.quality = Quality.ERROR
            log.warning(
                "%s: expected %s, PLC sent %s", unit.name,
                op.expected_type.name, value.type.name,
            )
            return False
        if op.cache_key is not None and op.start_element is not None:
            cache = unit.span_cache.setdefault(op.cache_key, {})
            for i, element in enumerate(value.elements):
                cache[op.start_element + i] = element
        discovered = False
        with self._cell_lock:
            for sub, offset, bit in op.targets:
                if offset >= len(value.elements):
                    sub.quality = Quality.ERROR
                    continue
                raw = value.elements[offset]
                if bit is not None:
                    cell = CipValue(CipType.BOOL, (bool((raw >> bit) & 1),))
                else:
                    cell = CipValue(value.type, (raw,))
                if sub.elem_type is None and bit is None:
                    sub.elem_type = value.type
                    discovered = True
                self._apply_cell(sub, cell, now)
        if discovered:
            sl.plan = None
        return True

    def _apply_cell(self, sub: Subscription, cell: CipValue, now: float) -> None:
        """Store a freshly read value; outputs get drift detection."""
        if sub.direction is Direction.OUTPUT and sub.readback_seen:
            old = sub.value
            if old is not None and old.elements != cell.elements and not sub.dirty:
                sub.value = cell
                sub.timestamp = now
                sub.quality = Quality.OK
                if sub.on_drift is not None:
                    self._notify_drift(sub, old, cell)
                return
            if old is not None and old.elements == cell.elements:
                sub.timestamp = now
                sub.quality = Quality.OK
                return
        sub.value = cell
        sub.timestamp = now
        sub.quality = Quality.OK
        sub.readback_seen = True

    def _notify_drift(self, sub: Subscription, old: CipValue, new: CipValue) -> None:
        try:
            sub.on_drift(sub, old, new)
        except Exception:
            log.exception("drift callback failed for %s", format_tag(sub.ref))

    # -- writing --------------------------------------------------------------

    def write(self, sub: Subscription, value, immediate: bool = True) -> None:
        """Queue a value for an output tag; immediate flushes right away."""
        if sub.direction is not Direction.OUTPUT:
            raise ValueError(f"{format_tag(sub.ref)} is not an output")
        unit = self._unit(sub.plc_name)

        def stage():
            sub.pending = value
            sub.dirty = True
            if immediate:
                self._flush_unit(unit)

        self._submit(unit, stage)

    def flush(self, plc_name: str | None = None) -> None:
        """Write out all dirty output values."""
        units = [self._unit(plc_name)] if plc_name else list(self._units.values())
        for unit in units:
            self._submit(unit, lambda u=unit: self._flush_unit(u))

    def _flush_unit(self, unit: _PlcUnit) -> None:
        if not unit.client.ensure_connected():
            with self._cell_lock:
                for sl in unit.lists.values():
                    for sub in sl.members:
                        if sub.dirty:
                            sub.quality = Quality.ERROR
            return
        for sl in unit.lists.values():
            dirty = [s for s in sl.members if s.dirty]
            if not dirty:
                continue
            groups: dict[tuple[str, CipType], list[Subscription]] = {}
            singles: list[Subscription] = []
            for sub in dirty:
                wire_type = sub.wire_type()
                indexed = sub.ref.bool_array or sub.ref.final_element is not None
                if sub.coalesce and indexed and wire_type is not None:
                    groups.setdefault((_group_base(sub), wire_type), []).append(sub)
                else:
                    singles.append(sub)
            for (base, wire_type), subs in groups.items():
                self._write_group(unit, sl, base, wire_type, subs)
            for sub in singles:
                self._write_single(unit, sl, sub)

    def _write_single(self, unit: _PlcUnit, sl: ScanList, sub: Subscription) -> None:
        if sub.ref.bool_array:
            # read-modify-write of the word holding this bit
            self._write_group(unit, sl, _group_base(sub), CipType.DINT, [sub])
            return
        if sub.elem_type is None:
            discovered = self._discover_type(unit, sl, sub)
            if not discovered:
                return
        value = CipValue(sub.elem_type, (sub.pending,))
        request = cip.build_write_request(to_epath(sub.ref), value)
        if self._send_write(unit, sl, request, [sub]):
            with self._cell_lock:
                sub.value = value
                sub.timestamp = time.time()
                sub.quality = Quality.OK
                sub.dirty = False
                sub.readback_seen = True

    def _write_group(
        self,
        unit: _PlcUnit,
        sl: ScanList,
        base: str,
        wire_type: CipType,
        dirty_subs: list[Subscription],
    ) -> None:
        # all subscribed outputs of this span define first-to-highest
        members = [
            s for s in sl.members
            if s.direction is Direction.OUTPUT and s.coalesce
            and s.wire_type() is wire_type
            and (s.ref.bool_array or s.ref.final_element is not None)
            and _group_base(s) == base
        ]
        span_elements = sorted({_read_element(s) for s in members})
        cache = unit.span_cache.setdefault((sl.period_s, base, wire_type), {})

        # fold pending values into per-element words
        pending: dict[int, object] = {}
        for sub in dirty_subs:
            element = _read_element(sub)
            if sub.ref.bool_array:
                bit = _read_bit(sub)
                word = pending.get(element)
                if word is None:
                    word = cache.get(element)
                if word is None:
                    word = self._fetch_element(unit, sl, sub, element, wire_type)
                    if word is None:
                        return
                word = int(word) & 0xFFFFFFFF
                if sub.pending:
                    word |= 1 << bit
                else:
                    word &= ~(1 << bit) & 0xFFFFFFFF
                if word >= 1 << 31:
                    word -= 1 << 32
                pending[element] = word
            else:
                pending[element] = sub.pending

        touched = sorted(pending)
        read_ref = dirty_subs[0].ref
        if read_ref.bool_array:
            read_ref = bool_remap(read_ref)[0]

        if len(touched) == 1:
            element = touched[0]
            value = CipValue(wire_type, (pending[element],))
            request = cip.build_write_request(
                to_epath(read_ref.with_final_element(element)), value
            )
            if self._send_write(unit, sl, request, dirty_subs):
                cache[element] = value.elements[0]
                self._settle_writes(dirty_subs, wire_type)
            return

        # more than one element dirty: write the whole first-to-highest span
        first, high = span_elements[0], span_elements[-1]
        first = min(first, touched[0])
        high = max(high, touched[-1])
        elements = []
        for element in range(first, high + 1):
            if element in pending:
                elements.append(pending[element])
            elif element in cache:
                elements.append(cache[element])
            else:
                fetched = self._fetch_span(unit, sl, read_ref, first, high - first + 1, cache)
                if fetched is None:
                    return
                elements = [
                    pending.get(e, cache[e]) for e in range(first, high + 1)
                ]
                break
        value = CipValue(wire_type, elements)
        request = cip.build_write_request(
            to_epath(read_ref.with_final_element(first)), value
        )
        limit = unit.client.endpoint.buffer_limit
        if cip.wrapped_request_size(len(cip.encode_request(request))) > limit:
            # span write won't fit; write the dirty elements one by one
            for element in touched:
                single = CipValue(wire_type, (pending[element],))
                request = cip.build_write_request(
                    to_epath(read_ref.with_final_element(element)), single
                )
                if self._send_write(unit, sl, request, dirty_subs):
                    cache[element] = pending[element]
            self._settle_writes(dirty_subs, wire_type)
            return
        if self._send_write(unit, sl, request, dirty_subs):
            for i, element in enumerate(range(first, high + 1)):
                cache[element] = elements[i]
            self._settle_writes(dirty_subs, wire_type)

    def _settle_writes(self, subs: list[Subscription], wire_type: CipType) -> None:
        now = time.time()
        with self._cell_lock:
            for sub in subs:
                if sub.ref.bool_array:
                    sub.value = CipValue(CipType.BOOL, (bool(sub.pending),))
                else:
                    sub.value = CipValue(wire_type, (sub.pending,))
                sub.timestamp = now
                sub.quality = Quality.OK
                sub.dirty = False
                sub.readback_seen = True

    def _send_write(
        self, unit: _PlcUnit, sl: ScanList, request: CipRequest, subs: list[Subscription]
    ) -> bool:
        try:
            cip.parse_write_response(unit.client.round_trip(request))
            return True
        except (PlcError, cip.CipError) as exc:
            log.warning("write failed on %s: %s", unit.name, exc)
            with self._cell_lock:
                sl.stats.errors += 1
                for sub in subs:
                    sub.quality = Quality.ERROR
            return False

    def _fetch_element(
        self, unit: _PlcUnit, sl: ScanList, sub: Subscription, element: int,
        wire_type: CipType,
    ):
        """Read one element so a bit write can modify the full word."""
        read_ref = sub.ref
        if read_ref.bool_array:
            read_ref = bool_remap(read_ref)[0]
        request = cip.build_read_request(
            to_epath(read_ref.with_final_element(element)), 1
        )
        try:
            value = cip.parse_read_response(unit.client.round_trip(request))
        except (PlcError, cip.CipError) as exc:
            log.warning("read-before-write failed on %s: %s", unit.name, exc)
            with self._cell_lock:
                sl.stats.errors += 1
                sub.quality = Quality.ERROR
            return None
        return value.elements[0]

    def _fetch_span(
        self, unit: _PlcUnit, sl: ScanList, read_ref: TagRef, first: int, count: int,
        cache: dict[int, object],
    ):
        request = cip.build_read_request(
            to_epath(read_ref.with_final_element(first)), count
        )
        try:
            value = cip.parse_read_response(unit.client.round_trip(request))
        except (PlcError, cip.CipError) as exc:
            log.warning("read-before-write failed on %s: %s", unit.name, exc)
            with self._cell_lock:
                sl.stats.errors += 1
            return None
        for i, element in enumerate(value.elements):
            cache[first + i] = element
        return value

    def _discover_type(self, unit: _PlcUnit, sl: ScanList, sub: Subscription) -> bool:
        request = cip.build_read_request(to_epath(sub.ref), 1)
        try:
            value = cip.parse_read_response(unit.client.round_trip(request))
        except (PlcError, cip.CipError) as exc:
            log.warning("type discovery failed for %s: %s", format_tag(sub.ref), exc)
            with self._cell_lock:
                sl.stats.errors += 1
                sub.quality = Quality.ERROR
            return False
        sub.elem_type = value.type
        sl.plan = None
        return True

    # -- worker threads ---------------------------------------------------------

    def start(self) -> None:
        self._started = True
        for unit in self._units.values():
            self._start_unit(unit)

    def stop(self) -> None:
        self._started = False
        for unit in self._units.values():
            unit.running = False
            unit.queue.put(None)
        for unit in self._units.values():
            if unit.thread is not None:
                unit.thread.join(timeout=10)
                unit.thread = None
            unit.client.close()

    def _start_unit(self, unit: _PlcUnit) -> None:
        if unit.thread is not None and unit.thread.is_alive():
            return
        unit.running = True
        unit.thread = threading.Thread(
            target=self._worker, args=(unit,), name=f"scan-{unit.name}", daemon=True
        )
        unit.thread.start()

    def _worker(self, unit: _PlcUnit) -> None:
        while unit.running:
            now = time.monotonic()
            due: list[ScanList] = []
            next_due = now + 0.2
            for sl in unit.lists.values():
                if sl.next_tick is None:
                    sl.next_tick = now
                if sl.next_tick <= now:
                    due.append(sl)
                else:
                    next_due = min(next_due, sl.next_tick)
            for sl in due:
                self._scan_list(unit, sl)
                sl.next_tick += sl.period_s
                finished = time.monotonic()
                if sl.next_tick <= finished:
                    missed = int((finished - sl.next_tick) // sl.period_s) + 1
                    with self._cell_lock:
                        sl.stats.overruns += missed
                    sl.next_tick += missed * sl.period_s
            if due:
                continue  # membership may have changed timing; recompute
            timeout = max(0.0, min(next_due - time.monotonic(), 0.2))
            try:
                item = unit.queue.get(timeout=timeout)
            except queue.Empty:
                continue
            if item is None:
                break
            fn, future = item
            try:
                future.set_result(fn())
            except BaseException as exc:  # propagate to the submitting thread
                future.set_exception(exc)

    def _submit(self, unit: _PlcUnit, fn):
        if unit.thread is not None and unit.thread.is_alive():
            future: Future = Future()
            unit.queue.put((fn, future))
            return future.result(timeout=60)
        return fn()

    def _unit(self, plc_name: str) -> _PlcUnit:
        try:
            return self._units[plc_name]
        except KeyError:
            raise KeyError(f"unknown plc {plc_name!r}") from None


# ---------------------------------------------------------------------------
# scan configuration files

class ConfigError(ValueError):
    """Scan config line that does not follow the grammar."""


@dataclass
class PlcSpec:
    name: str
    host: str
    port: int
    slot: int
    limit: int
    connected: bool


@dataclass
class TagSpec:
    plc: str
    tag: str
    period_ms: float
    direction: Direction
    elem_type: CipType | None
    elements: int
    coalesce: bool
    bool_array: bool


@dataclass
class ScanConfig:
    plcs: list[PlcSpec] = field(default_factory=list)
    tags: list[TagSpec] = field(default_factory=list)


def parse_scan_config(text: str) -> ScanConfig:
    """Parse the line-oriented scan config.

    plc <name> <host>[:<port>] slot=<n> [limit=<bytes>] [connected]
    tag <plcname> <tagref> period=<ms> dir=<in|out> [type=<T>]
        [elements=<n>] [no-coalesce] [bool-array]
    """
    config = ScanConfig()
    names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        words = line.split()
        kind, args = words[0], words[1:]
        try:
            if kind == "plc":
                spec = _parse_plc_line(args)
                if spec.name in names:
                    raise ConfigError(f"plc {spec.name!r} defined twice")
                names.add(spec.name)
                config.plcs.append(spec)
            elif kind == "tag":
                spec = _parse_tag_line(args)
                if spec.plc not in names:
                    raise ConfigError(f"tag references undefined plc {spec.plc!r}")
                config.tags.append(spec)
            else:
                raise ConfigError(f"unknown directive {kind!r}")
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return config


def _parse_plc_line(args: list[str]) -> PlcSpec:
    if len(args) < 2:
        raise ConfigError("plc needs a name and a host")
    name, host = args[0], args[1]
    port = 0xAF12
    if ":" in host:
        host, _, port_text = host.rpartition(":")
        try:
            port = int(port_text)
        except ValueError:
            raise ConfigError(f"bad port {port_text!r}") from None
    slot = None
    limit = 500
    connected = False
    for word in args[2:]:
        if word == "connected":
            connected = True
        elif word.startswith("slot="):
            slot = _int_option(word)
        elif word.startswith("limit="):
            limit = _int_option(word)
        else:
            raise ConfigError(f"unknown plc option {word!r}")
    if slot is None:
        raise ConfigError("plc line missing slot=<n>")
    return PlcSpec(name, host, port, slot, limit, connected)


def _parse_tag_line(args: list[str]) -> TagSpec:
    if len(args) < 2:
        raise ConfigError("tag needs a plc name and a tag reference")
    plc, tag = args[0], args[1]
    period_ms = None
    direction = None
    elem_type = None
    elements = 1
    coalesce = True
    bool_array = False
    for word in args[2:]:
        if word == "no-coalesce":
            coalesce = False
        elif word == "bool-array":
            bool_array = True
        elif word.startswith("period="):
            period_ms = _float_option(word)
        elif word.startswith("dir="):
            value = word.split("=", 1)[1]
            try:
                direction = Direction(value)
            except ValueError:
                raise ConfigError(f"dir must be in or out, not {value!r}") from None
        elif word.startswith("type="):
            value = word.split("=", 1)[1]
            try:
                elem_type = CipType[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown type {value!r}") from None
        elif word.startswith("elements="):
            elements = _int_option(word)
            if elements < 1:
                raise ConfigError("elements must be at least 1")
        else:
            raise ConfigError(f"unknown tag option {word!r}")
    if period_ms is None or period_ms <= 0:
        raise ConfigError("tag line missing period=<ms>")
    if direction is None:
        raise ConfigError("tag line missing dir=<in|out>")
    try:
        parse_tag(tag)
    except Exception as exc:
        raise ConfigError(f"bad tag {tag!r}: {exc}") from None
    if bool_array and elem_type not in (None, CipType.BOOL):
        raise ConfigError("bool-array tags must be type BOOL")
    return TagSpec(plc, tag, period_ms, direction, elem_type, elements, coalesce, bool_array)


def _int_option(word: str) -> int:
    key, _, value = word.partition("=")
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} needs an integer, not {value!r}") from None


def _float_option(word: str) -> float:
    key, _, value = word.partition("=")
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} needs a number, not {value!r}") from None


def apply_scan_config(scanner: TagScanner, config: ScanConfig) -> list[Subscription]:
    """Create the PLCs and subscriptions a parsed config describes."""
    subs = []
    for plc in config.plcs:
        endpoint = PlcEndpoint(
            host=plc.host, port=plc.port, slot=plc.slot, buffer_limit=plc.limit
        )
        scanner.add_plc(plc.name, endpoint, connected=plc.connected)
    for spec in config.tags:
        base = parse_tag(spec.tag, bool_array=spec.bool_array)
        period_s = spec.period_ms / 1000.0
        if spec.elements == 1:
            refs = [base]
        else:
            start = base.final_element if base.final_element is not None else 0
            refs = [base.with_final_element(start + i) for i in range(spec.elements)]
        for ref in refs:
            subs.append(scanner.add_tag(
                spec.plc, ref, period_s, spec.direction,
                elem_type=spec.elem_type, coalesce=spec.coalesce,
                bool_array=spec.bool_array,
            ))
    return subs
