"""Append-only receipt store with retention, query, aggregation and export.

On-disk layout (when a directory is given)::

    <root>/segments/0000.jsonl   canonical receipts, one per line
    <root>/index.jsonl           {"receipt_id", "segment", "position"} per append
    <root>/tombstones.jsonl      residue of purged receipts
    <root>/.lock                 cross-process writer lock

Without a directory the store lives in memory only.  Appends and purges are
serialized; readers work on a snapshot of the current log.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from filelock import FileLock

from routereceipt.receipt import (
    RETENTION_CLASSES,
    ReceiptError,
    RouteReceipt,
    canonical_json,
    canonical_serialize,
    format_timestamp,
    parse_receipt,
    parse_timestamp,
)
from routereceipt.redact import EMPTY_POLICY, AudienceView, RedactionPolicy, audience_rank, view_for

logger = logging.getLogger(__name__)

METRICS = (
    "fallback_rate",
    "tier_change_rate",
    "alias_resolution_histogram",
    "safety_intervention_rate",
    "incomplete_rate",
)


class StoreError(ReceiptError):
    pass


class DuplicateReceiptError(StoreError):
    def __init__(self, receipt_id: str):
        self.receipt_id = receipt_id
        super().__init__(f"receipt {receipt_id!r} already stored")


class ReceiptNotFoundError(StoreError, KeyError):
    def __init__(self, receipt_id: str):
        self.receipt_id = receipt_id
        super().__init__(f"no receipt {receipt_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class ReceiptPurgedError(StoreError):
    def __init__(self, tombstone: "Tombstone"):
        self.tombstone = tombstone
        super().__init__(f"receipt {tombstone.receipt_id!r} was purged at {tombstone.purged_at}")


def _as_datetime(value: str | datetime | None) -> datetime | None:
    if value is None or isinstance(value, datetime):
        return value
    return parse_timestamp(value)


# --------------------------------------------------------------------------
# retention

_DURATION_RE = re.compile(r"^(\d+)\s*([smhdw])$")
_UNITS = {"s": "seconds", "m": "minutes", "h": "hours", "d": "days", "w": "weeks"}


def parse_duration(text: str) -> timedelta | None:
    """``"24h"``, ``"90d"``, ``"3600s"``; ``"never"`` gives None."""
    text = text.strip().lower()
    if text in ("never", "never_expires"):
        return None
    m = _DURATION_RE.match(text)
    if m is None:
        raise ValueError(f"bad duration {text!r}; use e.g. 24h, 90d or never")
    return timedelta(**{_UNITS[m.group(2)]: int(m.group(1))})


@dataclass(frozen=True)
class RetentionRule:
    ephemeral: timedelta = timedelta(hours=24)
    standard: timedelta = timedelta(days=90)
    regulated: timedelta = timedelta(days=365)

    def __post_init__(self):
        if self.ephemeral > self.standard:
            raise ValueError("ephemeral TTL must not exceed standard TTL")

    def ttl(self, retention_class: str | None) -> timedelta | None:
        """Time to live for a class; None means the receipt never expires."""
        if retention_class == "audit_hold":
            return None
        if retention_class in ("ephemeral", "regulated"):
            return getattr(self, retention_class)
        # absent and "unknown" fall back to standard
        return self.standard

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None, base: "RetentionRule | None" = None) -> "RetentionRule":
        environ = os.environ if environ is None else environ
        base = base or cls()
        kwargs = {}
        for name in ("ephemeral", "standard", "regulated"):
            raw = environ.get(f"RR_RETENTION_{name.upper()}")
            if raw:
                value = parse_duration(raw)
                if value is None:
                    raise ValueError(f"only audit_hold may never expire; got never for {name}")
                kwargs[name] = value
        return cls(**{**{n: getattr(base, n) for n in ("ephemeral", "standard", "regulated")}, **kwargs})

    @classmethod
    def from_json(cls, data: Mapping) -> "RetentionRule":
        kwargs = {}
        for name in ("ephemeral", "standard", "regulated"):
            if name in data:
                value = parse_duration(str(data[name]))
                if value is None:
                    raise ValueError(f"only audit_hold may never expire; got never for {name}")
                kwargs[name] = value
        if "audit_hold" in data and parse_duration(str(data["audit_hold"])) is not None:
            raise ValueError("audit_hold receipts never expire")
        return cls(**kwargs)


@dataclass(frozen=True)
class Tombstone:
    receipt_id: str
    served_at: str
    retention_class: str | None
    purged_at: str

    def to_json(self) -> dict:
        return {"receipt_id": self.receipt_id, "served_at": self.served_at,
                "retention_class": self.retention_class, "purged_at": self.purged_at}


@dataclass(frozen=True)
class PurgeReport:
    now: str
    purged: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"now": self.now, "purged": list(self.purged)}


# --------------------------------------------------------------------------
# query / aggregate


@dataclass(frozen=True)
class ReceiptFilter:
    """Conjunctive filter; the time range is half-open ``[start, end)``."""

    start: datetime | None = None
    end: datetime | None = None
    requested_model: str | None = None
    fallback_status: str | None = None
    region_class: str | None = None
    completion_status: str | None = None
    retention_class: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "start", _as_datetime(self.start))
        object.__setattr__(self, "end", _as_datetime(self.end))
        if self.start is not None and self.end is not None and self.start > self.end:
            raise ValueError("filter start is after end")
        if self.retention_class is not None and self.retention_class not in RETENTION_CLASSES:
            raise ValueError(f"unknown retention_class {self.retention_class!r}")

    def matches(self, r: RouteReceipt) -> bool:
        at = r.served_at_dt
        if self.start is not None and at < self.start:
            return False
        if self.end is not None and at >= self.end:
            return False
        checks = (
            (self.requested_model, r.requested_model),
            (self.fallback_status, r.fallback.status),
            (self.region_class, r.region_class),
            (self.completion_status, r.completion_status),
            (self.retention_class, r.retention_class),
        )
        return all(want is None or want == got for want, got in checks)


@dataclass(frozen=True)
class AggregateReport:
    metric: str
    window: tuple[str | None, str | None]
    value: float | dict
    denominator: int

    def to_json(self) -> dict:
        return {"metric": self.metric, "window": {"from": self.window[0], "to": self.window[1]},
                "value": self.value, "denominator": self.denominator}


def compute_aggregate(metric: str, receipts: Iterable[RouteReceipt]) -> tuple[float | dict, int]:
    receipts = list(receipts)
    if metric == "fallback_rate":
        hits, denom = sum(r.fallback.status == "occurred" for r in receipts), len(receipts)
    elif metric == "safety_intervention_rate":
        hits, denom = sum(r.safety.status == "intervened" for r in receipts), len(receipts)
    elif metric == "incomplete_rate":
        hits, denom = sum(r.completion_status != "complete" for r in receipts), len(receipts)
    elif metric == "tier_change_rate":
        both = [r.service_tier for r in receipts
                if r.service_tier is not None and r.service_tier.requested is not None]
        hits, denom = sum(t.requested != t.effective for t in both), len(both)
    elif metric == "alias_resolution_histogram":
        counts = Counter(r.resolved_model for r in receipts if r.resolved_model is not None)
        return dict(sorted(counts.items())), sum(counts.values())
    else:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return (hits / denom if denom else 0.0), denom


# --------------------------------------------------------------------------
# store


@dataclass
class _State:
    receipts: dict[str, RouteReceipt] = field(default_factory=dict)
    canonical: dict[str, str] = field(default_factory=dict)
    positions: dict[str, int] = field(default_factory=dict)
    tombstones: dict[str, Tombstone] = field(default_factory=dict)
    next_position: int = 0


class ReceiptStore:
    def __init__(self, root: str | Path | None = None, segment_size: int = 10_000):
        self.root = Path(root) if root is not None else None
        self.segment_size = segment_size
        self._lock = threading.RLock()
        self._state = _State()
        self._disk_seen = (0, 0)
        self._file_lock = None
        if self.root is not None:
            (self.root / "segments").mkdir(parents=True, exist_ok=True)
            self._file_lock = FileLock(str(self.root / ".lock"))
            with self._file_lock:
                self._load()

    def __len__(self) -> int:
        return len(self._state.receipts)

    def __contains__(self, receipt_id: str) -> bool:
        return receipt_id in self._state.receipts

    # -- persistence -----------------------------------------------------

    @property
    def _index_path(self) -> Path:
        return self.root / "index.jsonl"

    @property
    def _tombstone_path(self) -> Path:
        return self.root / "tombstones.jsonl"

    def _segment_path(self, number: int) -> Path:
        return self.root / "segments" / f"{number:04d}.jsonl"

    def _load(self) -> None:
        state = _State()
        if self._tombstone_path.exists():
            for line in self._tombstone_path.read_text("utf-8").splitlines():
                if line.strip():
                    t = Tombstone(**json.loads(line))
                    state.tombstones[t.receipt_id] = t
        positions: dict[str, int] = {}
        if self._index_path.exists():
            for line in self._index_path.read_text("utf-8").splitlines():
                if line.strip():
                    entry = json.loads(line)
                    positions[entry["receipt_id"]] = entry["position"]
        for seg in sorted((self.root / "segments").glob("*.jsonl")):
            for line in seg.read_text("utf-8").splitlines():
                if not line.strip():
                    continue
                receipt = parse_receipt(line)
                state.receipts[receipt.receipt_id] = receipt
                state.canonical[receipt.receipt_id] = line
        if set(state.receipts) - set(positions):
            # index lost or truncated: rebuild in segment order
            logger.warning("rebuilding store index under %s", self.root)
            positions = {rid: i for i, rid in enumerate(state.receipts)}
            with open(self._index_path, "w", encoding="utf-8") as fh:
                for rid, pos in positions.items():
                    fh.write(canonical_json({"receipt_id": rid, "segment": pos // self.segment_size,
                                             "position": pos}) + "\n")
        state.positions = {rid: positions[rid] for rid in state.receipts}
        all_positions = list(positions.values())
        state.next_position = max(all_positions) + 1 if all_positions else 0
        self._state = state
        self._disk_seen = self._disk_marker()

    def _disk_marker(self) -> tuple[int, int]:
        return tuple(p.stat().st_size if p.exists() else 0 for p in (self._index_path, self._tombstone_path))

    def _refresh_if_stale(self) -> None:
        # another process may have appended or purged since we loaded
        if self.root is None:
            return
        if self._disk_marker() != self._disk_seen:
            self._load()

    def _write_locked(self):
        if self._file_lock is None:
            return _NullContext()
        return self._file_lock

    # -- writes ----------------------------------------------------------

    def append(self, receipt: RouteReceipt | str | bytes | Mapping) -> int:
        """Validate and persist a receipt; returns its position in the log."""
        if not isinstance(receipt, RouteReceipt):
            receipt = parse_receipt(receipt)
        else:
            receipt = parse_receipt(receipt.to_json())
        text = canonical_serialize(receipt)
        with self._lock, self._write_locked():
            self._refresh_if_stale()
            state = self._state
            rid = receipt.receipt_id
            if rid in state.receipts or rid in state.tombstones:
                raise DuplicateReceiptError(rid)
            position = state.next_position
            if self.root is not None:
                segment = position // self.segment_size
                with open(self._segment_path(segment), "a", encoding="utf-8") as fh:
                    fh.write(text + "\n")
                line = canonical_json({"receipt_id": rid, "segment": segment, "position": position})
                with open(self._index_path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                self._disk_seen = self._disk_marker()
            state.receipts[rid] = receipt
            state.canonical[rid] = text
            state.positions[rid] = position
            state.next_position = position + 1
            return position

    def import_jsonl(self, lines: Iterable[str]) -> int:
        count = 0
        for line in lines:
            if line.strip():
                self.append(line)
                count += 1
        return count

    def enforce_retention(self, rules: RetentionRule | None = None, now: datetime | str | None = None) -> PurgeReport:
        """Replace every expired receipt with a tombstone.  audit_hold never expires."""
        rules = rules or RetentionRule()
        now = _as_datetime(now) or datetime.now(timezone.utc)
        now_text = format_timestamp(now)
        with self._lock, self._write_locked():
            self._refresh_if_stale()
            state = self._state
            expired = []
            for rid, receipt in state.receipts.items():
                ttl = rules.ttl(receipt.retention_class)
                if ttl is not None and now - receipt.served_at_dt > ttl:
                    expired.append(rid)
            if not expired:
                return PurgeReport(now=now_text)
            expired.sort(key=lambda rid: state.positions[rid])
            stones = [Tombstone(rid, state.receipts[rid].served_at, state.receipts[rid].retention_class,
                                now_text) for rid in expired]
            if self.root is not None:
                self._compact(set(expired))
                with open(self._tombstone_path, "a", encoding="utf-8") as fh:
                    for t in stones:
                        fh.write(canonical_json(t.to_json()) + "\n")
                self._disk_seen = self._disk_marker()
            for t in stones:
                del state.receipts[t.receipt_id]
                del state.canonical[t.receipt_id]
                del state.positions[t.receipt_id]
                state.tombstones[t.receipt_id] = t
            return PurgeReport(now=now_text, purged=tuple(expired))

    def _compact(self, drop: set[str]) -> None:
        state = self._state
        touched = {state.positions[rid] // self.segment_size for rid in drop}
        for number in sorted(touched):
            keep = [rid for rid, pos in state.positions.items()
                    if pos // self.segment_size == number and rid not in drop]
            keep.sort(key=lambda rid: state.positions[rid])
            path = self._segment_path(number)
            tmp = path.with_suffix(".jsonl.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for rid in keep:
                    fh.write(state.canonical[rid] + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)

    # -- reads -----------------------------------------------------------

    def _snapshot(self) -> list[RouteReceipt]:
        with self._lock:
            return list(self._state.receipts.values())

    def _raw(self, receipt_id: str) -> RouteReceipt:
        with self._lock:
            state = self._state
            if receipt_id in state.receipts:
                return state.receipts[receipt_id]
            if receipt_id in state.tombstones:
                raise ReceiptPurgedError(state.tombstones[receipt_id])
        raise ReceiptNotFoundError(receipt_id)

    def get(self, receipt_id: str, audience: str = "auditor",
            policy: RedactionPolicy = EMPTY_POLICY) -> AudienceView:
        audience_rank(audience)
        return view_for(self._raw(receipt_id), audience, policy)

    def get_canonical(self, receipt_id: str) -> str:
        """Stored canonical text (full receipt, auditor-level access)."""
        self._raw(receipt_id)
        return self._state.canonical[receipt_id]

    def tombstone(self, receipt_id: str) -> Tombstone | None:
        return self._state.tombstones.get(receipt_id)

    def position(self, receipt_id: str) -> int:
        self._raw(receipt_id)
        return self._state.positions[receipt_id]

    @staticmethod
    def _order_key(r: RouteReceipt):
        return (r.served_at_dt, r.receipt_id)

    def select(self, flt: ReceiptFilter | None = None) -> list[RouteReceipt]:
        flt = flt or ReceiptFilter()
        return sorted((r for r in self._snapshot() if flt.matches(r)), key=self._order_key)

    def query(self, flt: ReceiptFilter | None = None) -> list[str]:
        """Matching ids ordered by served_at, ties by receipt_id."""
        return [r.receipt_id for r in self.select(flt)]

    def aggregate(self, metric: str, start: datetime | str | None = None,
                  end: datetime | str | None = None, requested_model: str | None = None) -> AggregateReport:
        flt = ReceiptFilter(start=start, end=end, requested_model=requested_model)
        value, denom = compute_aggregate(metric, self.select(flt))
        window = tuple(None if t is None else format_timestamp(t) for t in (flt.start, flt.end))
        return AggregateReport(metric=metric, window=window, value=value, denominator=denom)

    def export_jsonl(self, flt: ReceiptFilter | None = None, audience: str = "auditor",
                     policy: RedactionPolicy = EMPTY_POLICY) -> Iterator[str]:
        """One canonical view per line, in query order."""
        audience_rank(audience)
        for receipt in self.select(flt):
            yield canonical_serialize(view_for(receipt, audience, policy).receipt)

    def previous_resolution(self, receipt: RouteReceipt) -> str | None:
        """resolved_model of the latest earlier receipt for the same requested_model."""
        if receipt.requested_model is None:
            return None
        key = self._order_key(receipt)
        best = None
        for r in self._snapshot():
            if (r.requested_model == receipt.requested_model and r.resolved_model is not None
                    and self._order_key(r) < key and (best is None or self._order_key(r) > self._order_key(best))):
                best = r
        return None if best is None else best.resolved_model


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
