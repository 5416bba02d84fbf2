"""Domain records shared by every stage: transactions, blocks, mempool sightings,
address labels, prices and sandwich triples, plus the dataset validation report."""

import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from config import GWEI_PER_ETH, WEI_PER_ETH
from errors import InputError, MissingPriceError

logger = logging.getLogger(__name__)

ADDRESS_RE = re.compile(r"^0x[0-9a-fA-F]{40}$")
HASH_RE = re.compile(r"^0x[0-9a-fA-F]{64}$")


class AddressLabel(str, Enum):
    DEX = "DEX"
    CEX = "CEX"
    MEV_BUILDER = "MEV_BUILDER"


KNOWN_LABELS = frozenset(label.value for label in AddressLabel)


def normalize_address(addr: Optional[str]) -> Optional[str]:
    """Lowercase a hex address; empty values mean 'no address' (contract creation)"""
    if addr is None:
        return None
    addr = str(addr).strip()
    if not addr or addr.lower() in ("none", "null", "nan"):
        return None
    if not ADDRESS_RE.match(addr):
        raise InputError(f"Malformed address: {addr!r}")
    return addr.lower()


def normalize_hash(tx_hash: str) -> str:
    tx_hash = str(tx_hash).strip()
    if not HASH_RE.match(tx_hash):
        raise InputError(f"Malformed transaction hash: {tx_hash!r}")
    return tx_hash.lower()


def gwei_to_eth(gwei: float) -> float:
    return gwei / GWEI_PER_ETH


def wei_to_eth(wei: float) -> float:
    return wei / WEI_PER_ETH


def utc_date(timestamp: float) -> date:
    return datetime.fromtimestamp(timestamp, tz=timezone.utc).date()


@dataclass(frozen=True)
class TxRecord:
    """One finalized transaction. Fee fields are Gwei per gas, value is Wei."""

    tx_hash: str
    block_number: int
    block_index: int
    from_addr: str
    to_addr: Optional[str]
    max_fee_per_gas: float
    max_priority_fee_per_gas: float
    effective_gas_price: float
    gas_used: int
    value: int
    block_timestamp: int

    def fee_violations(self) -> List[str]:
        problems = []
        if self.block_index < 0:
            problems.append("negative block_index")
        for name in ("max_fee_per_gas", "max_priority_fee_per_gas", "effective_gas_price", "gas_used"):
            if getattr(self, name) < 0:
                problems.append(f"negative {name}")
        if self.max_priority_fee_per_gas > self.max_fee_per_gas:
            problems.append("max_priority_fee_per_gas above max_fee_per_gas")
        return problems

    @property
    def gas_fee_eth(self) -> float:
        return gwei_to_eth(self.gas_used * self.effective_gas_price)

    @property
    def day(self) -> date:
        return utc_date(self.block_timestamp)


@dataclass(frozen=True)
class BlockMeta:
    block_number: int
    timestamp: int
    tx_count: int
    builder_addr: Optional[str]
    base_fee_per_gas: float  # Gwei
    mev_payment: float  # ETH paid builder -> validator, 0 if none

    def __post_init__(self):
        if self.tx_count < 0 or self.mev_payment < 0 or self.base_fee_per_gas < 0:
            raise InputError(f"Block {self.block_number} has negative count or fee fields")

    @property
    def day(self) -> date:
        return utc_date(self.timestamp)


@dataclass(frozen=True)
class MempoolObs:
    tx_hash: str
    first_seen: int  # UTC milliseconds
    region: str = ""

    def __post_init__(self):
        if self.first_seen <= 0:
            raise InputError(f"first_seen must be positive for {self.tx_hash}")


@dataclass(frozen=True)
class SandwichRecord:
    block_number: int
    front_hash: str
    victim_hash: str
    back_hash: str
    cost_usd: float = 0.0
    profit_usd: float = 0.0

    def __post_init__(self):
        if len({self.front_hash, self.victim_hash, self.back_hash}) != 3:
            raise InputError(f"Sandwich legs in block {self.block_number} are not distinct")

    @property
    def hashes(self) -> Tuple[str, str, str]:
        return self.front_hash, self.victim_hash, self.back_hash


class LabelRegistry:
    """Read-only address -> label-set lookup. Unknown addresses have no labels."""

    def __init__(self, labels: Optional[Mapping[str, Iterable[str]]] = None, skipped: int = 0):
        merged: Dict[str, set] = defaultdict(set)
        for addr, addr_labels in (labels or {}).items():
            key = normalize_address(addr)
            if key is None:
                continue
            for label in addr_labels:
                if label not in KNOWN_LABELS:
                    raise InputError(f"Unknown label {label!r} for {key}")
                merged[key].add(label)
        self._labels = MappingProxyType({k: frozenset(v) for k, v in merged.items()})
        self.skipped = skipped  # entries the loader dropped

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, addr: str) -> bool:
        return str(addr).lower() in self._labels

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelRegistry) and dict(self._labels) == dict(other._labels)

    def lookup(self, addr: Optional[str]) -> FrozenSet[str]:
        if addr is None:
            return frozenset()
        return self._labels.get(addr.lower(), frozenset())

    def has_label(self, addr: Optional[str], label: AddressLabel) -> bool:
        return label.value in self.lookup(addr)

    def addresses_with(self, label: AddressLabel) -> List[str]:
        return sorted(a for a, labels in self._labels.items() if label.value in labels)

    def items(self):
        return self._labels.items()


@dataclass(frozen=True)
class PriceRow:
    avg_gas_price: float  # Gwei
    eth_close_usd: float


class PriceTable:
    """UTC date -> (average gas price in Gwei, ETH close in USD)"""

    def __init__(self, rows: Optional[Mapping[date, PriceRow]] = None, skipped: int = 0):
        for day, row in (rows or {}).items():
            if row.avg_gas_price <= 0 or row.eth_close_usd <= 0:
                raise InputError(f"Price row for {day} must be positive")
        self._rows = MappingProxyType(dict(rows or {}))
        self.skipped = skipped

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, day: date) -> bool:
        return day in self._rows

    def get(self, day: date) -> PriceRow:
        try:
            return self._rows[day]
        except KeyError:
            raise MissingPriceError(day) from None

    def dates(self) -> List[date]:
        return sorted(self._rows)


def classify_address(registry: LabelRegistry, addr: str) -> FrozenSet[str]:
    """Label set of an address; raises InputError on malformed hex"""
    key = normalize_address(addr)
    if key is None:
        raise InputError("Empty address")
    return registry.lookup(key)


@dataclass
class ValidationReport:
    n_transactions: int = 0
    n_blocks: int = 0
    duplicate_hashes: List[str] = field(default_factory=list)
    gap_blocks: List[int] = field(default_factory=list)
    fee_violations: Dict[str, List[str]] = field(default_factory=dict)
    clean_transactions: int = 0

    @property
    def n_violations(self) -> int:
        return len(self.duplicate_hashes) + len(self.gap_blocks) + len(self.fee_violations)

    def as_rows(self) -> List[Tuple[str, object]]:
        return [
            ("transactions", self.n_transactions),
            ("blocks", self.n_blocks),
            ("duplicate_hashes", len(self.duplicate_hashes)),
            ("gap_blocks", len(self.gap_blocks)),
            ("fee_violations", len(self.fee_violations)),
            ("clean_transactions", self.clean_transactions),
        ]


def validate_dataset(txs: Sequence[TxRecord], blocks: Sequence[BlockMeta]) -> ValidationReport:
    """Collect every structural problem instead of raising"""
    report = ValidationReport(n_transactions=len(txs), n_blocks=len(blocks))

    hash_counts = Counter(tx.tx_hash for tx in txs)
    report.duplicate_hashes = sorted(h for h, c in hash_counts.items() if c > 1)

    indices_by_block: Dict[int, List[int]] = defaultdict(list)
    for tx in txs:
        indices_by_block[tx.block_number].append(tx.block_index)
        problems = tx.fee_violations()
        if problems:
            report.fee_violations[tx.tx_hash] = problems

    gaps = set()
    for block in blocks:
        indices = sorted(indices_by_block.get(block.block_number, []))
        if indices != list(range(block.tx_count)):
            gaps.add(block.block_number)
    known_blocks = {b.block_number for b in blocks}
    for block_number, indices in indices_by_block.items():
        if block_number in known_blocks:
            continue
        # blocks without metadata are checked for contiguity only
        if sorted(indices) != list(range(len(indices))):
            gaps.add(block_number)
    report.gap_blocks = sorted(gaps)

    bad = set(report.duplicate_hashes) | set(report.fee_violations)
    bad_blocks = set(report.gap_blocks)
    report.clean_transactions = sum(
        1 for tx in txs if tx.tx_hash not in bad and tx.block_number not in bad_blocks
    )
    if report.n_violations:
        logger.warning(
            "Dataset validation: %d duplicates, %d gap blocks, %d fee violations",
            len(report.duplicate_hashes), len(report.gap_blocks), len(report.fee_violations),
        )
    return report


def group_by_day(txs: Iterable[TxRecord]) -> Dict[date, List[TxRecord]]:
    """Bucket transactions by the UTC date of their block, preserving input order"""
    days: Dict[date, List[TxRecord]] = defaultdict(list)
    for tx in txs:
        days[tx.day].append(tx)
    return dict(sorted(days.items()))


def group_by_block(txs: Iterable[TxRecord]) -> Dict[int, List[TxRecord]]:
    blocks: Dict[int, List[TxRecord]] = defaultdict(list)
    for tx in txs:
        blocks[tx.block_number].append(tx)
    return {n: sorted(b, key=lambda t: t.block_index) for n, b in sorted(blocks.items())}
