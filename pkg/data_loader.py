"""Offline loaders: every source file becomes a sequence of core records.

Rows that fail parsing or break a record invariant are skipped and counted, never raised,
so that rows_read == len(records) + skipped for every loader."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Dict, Generic, Iterator, List, Mapping, Optional, Sequence, TypeVar

import pandas as pd
from dateutil import parser as date_parser

from chain_records import (
    KNOWN_LABELS, BlockMeta, LabelRegistry, MempoolObs, PriceRow, PriceTable, SandwichRecord, TxRecord,
    normalize_address, normalize_hash,
)
from config import IngestConfig
from errors import ConfigurationError, InputError, MevAnalyticsError

logger = logging.getLogger(__name__)

T = TypeVar("T")

TX_COLUMNS = (
    "tx_hash", "block_number", "block_index", "from_addr", "to_addr",
    "max_fee_per_gas_gwei", "max_priority_fee_per_gas_gwei", "effective_gas_price_gwei",
    "gas_used", "value_wei", "block_timestamp",
)
BLOCK_COLUMNS = (
    "block_number", "timestamp", "tx_count", "builder_addr", "base_fee_per_gas_gwei", "mev_payment_eth",
)
MEMPOOL_COLUMNS = ("tx_hash", "first_seen_ms", "region")
SANDWICH_COLUMNS = ("block_number", "front_hash", "victim_hash", "back_hash", "cost_usd", "profit_usd")
PRICE_COLUMNS = ("date", "avg_gas_price_gwei", "eth_close_usd")

__all__ = [
    "IngestConfig", "LoadResult", "DataBundle", "load_transactions", "load_blocks", "load_mempool",
    "load_labels", "load_sandwiches", "load_prices", "load_bundle", "mempool_join_rate",
]


@dataclass
class LoadResult(Generic[T]):
    records: List[T]
    skipped: int = 0
    source: str = ""
    merged: int = 0  # duplicate sightings folded into an earlier one

    @property
    def rows_read(self) -> int:
        return len(self.records) + self.skipped + self.merged

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[T]:
        return iter(self.records)

    def __getitem__(self, item):
        return self.records[item]


def _read_table(path: Path, fmt: str, required: Sequence[str]) -> pd.DataFrame:
    """Read a delimiter-separated or line-delimited file as a frame of strings"""
    path = Path(path)
    if fmt == "csv":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    elif fmt == "jsonl":
        if path.stat().st_size == 0:
            frame = pd.DataFrame(columns=list(required))
        else:
            frame = pd.read_json(path, lines=True, dtype=False)
            frame = frame.astype(object).where(frame.notna(), "").astype(str)
    else:
        raise ConfigurationError(f"Unsupported format {fmt!r} for {path}")

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ConfigurationError(f"{path} is missing required columns: {', '.join(missing)}")
    return frame


def _optional_address(raw: str) -> Optional[str]:
    return normalize_address(raw) if raw else None


def _build(frame: pd.DataFrame, make: Callable[[object], T], source: str) -> LoadResult[T]:
    records, skipped = [], 0
    for row in frame.itertuples(index=False):
        try:
            records.append(make(row))
        except (ValueError, TypeError, MevAnalyticsError) as e:
            skipped += 1
            logger.debug("Skipping %s row: %s", source, e)
    if skipped:
        logger.warning("Skipped %d of %d %s rows", skipped, len(frame), source)
    return LoadResult(records=records, skipped=skipped, source=source)


def _make_tx(row) -> TxRecord:
    tx = TxRecord(
        tx_hash=normalize_hash(row.tx_hash),
        block_number=int(row.block_number),
        block_index=int(row.block_index),
        from_addr=normalize_address(row.from_addr),
        to_addr=_optional_address(row.to_addr),
        max_fee_per_gas=float(row.max_fee_per_gas_gwei),
        max_priority_fee_per_gas=float(row.max_priority_fee_per_gas_gwei),
        effective_gas_price=float(row.effective_gas_price_gwei),
        gas_used=int(row.gas_used),
        value=int(row.value_wei),
        block_timestamp=int(row.block_timestamp),
    )
    if tx.from_addr is None:
        raise ValueError("missing from_addr")
    problems = tx.fee_violations()
    if problems or tx.value < 0:
        raise ValueError("; ".join(problems) or "negative value")
    return tx


def load_transactions(path: Path, fmt: str = "csv") -> LoadResult[TxRecord]:
    """One TxRecord per valid row, ordered by (block_number, block_index)"""
    frame = _read_table(path, fmt, TX_COLUMNS)
    result = _build(frame, _make_tx, "transactions")
    result.records.sort(key=lambda t: (t.block_number, t.block_index))
    return result


def _make_block(row) -> BlockMeta:
    return BlockMeta(
        block_number=int(row.block_number),
        timestamp=int(float(row.timestamp)),
        tx_count=int(row.tx_count),
        builder_addr=_optional_address(row.builder_addr),
        base_fee_per_gas=float(row.base_fee_per_gas_gwei),
        mev_payment=float(row.mev_payment_eth or 0.0),
    )


def load_blocks(path: Path, fmt: str = "csv") -> LoadResult[BlockMeta]:
    frame = _read_table(path, fmt, BLOCK_COLUMNS)
    result = _build(frame, _make_block, "blocks")
    result.records.sort(key=lambda b: b.block_number)
    return result


def load_mempool(path: Path, fmt: str = "jsonl") -> LoadResult[MempoolObs]:
    """Deduplicate sightings to the earliest first_seen per hash across regions"""
    frame = _read_table(path, fmt, MEMPOOL_COLUMNS)
    result = _build(
        frame,
        lambda row: MempoolObs(
            tx_hash=normalize_hash(row.tx_hash),
            first_seen=int(float(row.first_seen_ms)),
            region=str(row.region),
        ),
        "mempool",
    )
    earliest: Dict[str, MempoolObs] = {}
    for obs in result.records:
        best = earliest.get(obs.tx_hash)
        if best is None or (obs.first_seen, obs.region) < (best.first_seen, best.region):
            earliest[obs.tx_hash] = obs
    duplicates = len(result.records) - len(earliest)
    records = [earliest[h] for h in sorted(earliest)]
    logger.info("Mempool: %d sightings -> %d unique hashes", len(result.records), len(records))
    return LoadResult(records=records, skipped=result.skipped, source="mempool", merged=duplicates)


def load_labels(path: Path) -> LabelRegistry:
    """Accepts {address: [labels]} or [{"address": ..., "labels": [...]}]; duplicates merge.

    Malformed addresses and unknown label names are skipped and counted."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    entries: Dict[str, set] = {}
    skipped = 0
    if isinstance(raw, Mapping):
        pairs = list(raw.items())
    elif isinstance(raw, list):
        pairs = [(item.get("address"), item.get("labels", [])) if isinstance(item, Mapping) else (None, None)
                 for item in raw]
    else:
        raise ConfigurationError(f"{path}: label file must be an object or a list")
    for addr, labels in pairs:
        if isinstance(labels, str):
            labels = [labels]
        try:
            key = normalize_address(addr)
        except InputError as e:
            skipped += 1
            logger.debug("Skipping label entry: %s", e)
            continue
        if key is None or labels is None:
            skipped += 1
            continue
        known = {label for label in labels if label in KNOWN_LABELS}
        skipped += len(labels) - len(known)
        if known:
            entries.setdefault(key, set()).update(known)
    if skipped:
        logger.warning("Skipped %d label entries from %s", skipped, path)
    return LabelRegistry(entries, skipped=skipped)


def load_sandwiches(path: Path, fmt: str = "csv") -> LoadResult[SandwichRecord]:
    frame = _read_table(path, fmt, SANDWICH_COLUMNS)
    return _build(
        frame,
        lambda row: SandwichRecord(
            block_number=int(row.block_number),
            front_hash=normalize_hash(row.front_hash),
            victim_hash=normalize_hash(row.victim_hash),
            back_hash=normalize_hash(row.back_hash),
            cost_usd=float(row.cost_usd or 0.0),
            profit_usd=float(row.profit_usd or 0.0),
        ),
        "sandwiches",
    )


def load_prices(path: Path, fmt: str = "csv") -> PriceTable:
    """Duplicate dates: last row wins, with a warning. Unparseable or non-positive rows are skipped."""
    frame = _read_table(path, fmt, PRICE_COLUMNS)
    rows: Dict[date, PriceRow] = {}
    skipped = 0
    for row in frame.itertuples(index=False):
        try:
            day = date_parser.isoparse(str(row.date)).date()
            price = PriceRow(avg_gas_price=float(row.avg_gas_price_gwei), eth_close_usd=float(row.eth_close_usd))
            if not (price.avg_gas_price > 0 and price.eth_close_usd > 0):
                raise ValueError(f"non-positive price on {day}")
        except (ValueError, TypeError, OverflowError) as e:
            skipped += 1
            logger.debug("Skipping price row: %s", e)
            continue
        if day in rows:
            logger.warning("Duplicate price row for %s; keeping the last one", day)
        rows[day] = price
    if skipped:
        logger.warning("Skipped %d of %d price rows", skipped, len(frame))
    return PriceTable(rows, skipped=skipped)


@dataclass
class DataBundle:
    transactions: List[TxRecord] = field(default_factory=list)
    blocks: List[BlockMeta] = field(default_factory=list)
    mempool: Dict[str, MempoolObs] = field(default_factory=dict)
    labels: LabelRegistry = field(default_factory=LabelRegistry)
    sandwiches: List[SandwichRecord] = field(default_factory=list)
    prices: PriceTable = field(default_factory=PriceTable)
    skipped: Dict[str, int] = field(default_factory=dict)
    loaded: tuple = ()

    def has(self, source: str) -> bool:
        return source in self.loaded


def load_bundle(ingest: IngestConfig, sources: Sequence[str], max_workers: int = 4) -> DataBundle:
    """Load the requested sources; loaders are independent so they run side by side"""
    ingest.check_paths(sources)
    loaders = {
        "transactions": lambda p, f: load_transactions(p, f),
        "blocks": lambda p, f: load_blocks(p, f),
        "mempool": lambda p, f: load_mempool(p, f),
        "labels": lambda p, f: load_labels(p),
        "sandwiches": lambda p, f: load_sandwiches(p, f),
        "prices": lambda p, f: load_prices(p, f),
    }
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {
            s: pool.submit(loaders[s], ingest.path_for(s), ingest.format_for(s)) for s in sources
        }
        results = {s: fut.result() for s, fut in futures.items()}

    bundle = DataBundle(loaded=tuple(sources))
    for source, result in results.items():
        bundle.skipped[source] = result.skipped
    if "transactions" in results:
        bundle.transactions = results["transactions"].records
    if "blocks" in results:
        bundle.blocks = results["blocks"].records
    if "mempool" in results:
        bundle.mempool = {obs.tx_hash: obs for obs in results["mempool"].records}
    if "labels" in results:
        bundle.labels = results["labels"]
    if "sandwiches" in results:
        bundle.sandwiches = results["sandwiches"].records
    if "prices" in results:
        bundle.prices = results["prices"]
    return bundle


def mempool_join_rate(txs: Sequence[TxRecord], mempool: Mapping[str, MempoolObs]) -> float:
    """Share of finalized transactions that were ever seen in the public mempool"""
    if not txs:
        return 0.0
    return sum(1 for tx in txs if tx.tx_hash in mempool) / len(txs)
