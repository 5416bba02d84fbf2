"""Builder market shares, concentration indices and validator revenue series."""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chain_records import AddressLabel, BlockMeta, LabelRegistry, TxRecord, gwei_to_eth
from errors import InputError

logger = logging.getLogger(__name__)

NON_MEV = "non-mev"

Window = Optional[Tuple[Optional[date], Optional[date]]]


def _in_window(day: date, window: Window, exclude: Iterable[date] = ()) -> bool:
    if window is not None:
        start, end = window
        if start and day < start:
            return False
        if end and day > end:
            return False
    return day not in set(exclude)


def _builder_key(block: BlockMeta, registry: Optional[LabelRegistry]) -> str:
    if block.builder_addr is None:
        return NON_MEV
    if registry is not None and not registry.has_label(block.builder_addr, AddressLabel.MEV_BUILDER):
        return NON_MEV
    return block.builder_addr


@dataclass(frozen=True)
class BuilderShare:
    block_count: int
    block_share: float
    mev_eth: float


def builder_shares(
    blocks: Sequence[BlockMeta], registry: Optional[LabelRegistry] = None, window: Window = None
) -> Dict[str, BuilderShare]:
    """Block counts and shares per builder; unlabelled builders fall into the non-MEV bucket"""
    counts: Dict[str, int] = defaultdict(int)
    payments: Dict[str, float] = defaultdict(float)
    for block in blocks:
        if not _in_window(block.day, window):
            continue
        key = _builder_key(block, registry)
        counts[key] += 1
        payments[key] += block.mev_payment
    total = sum(counts.values())
    if total == 0:
        return {}
    ordered = sorted(counts, key=lambda k: (-counts[k], k))
    return {k: BuilderShare(counts[k], counts[k] / total, payments[k]) for k in ordered}


def shares_frame(shares: Dict[str, BuilderShare]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"builder": k, "block_count": v.block_count, "block_share": v.block_share, "mev_eth": v.mev_eth}
         for k, v in shares.items()],
        columns=["builder", "block_count", "block_share", "mev_eth"],
    )


def mev_only_counts(shares: Dict[str, BuilderShare]) -> List[int]:
    return [v.block_count for k, v in shares.items() if k != NON_MEV]


def mev_only_shares(shares: Dict[str, BuilderShare]) -> List[float]:
    """Shares renormalised over MEV-built blocks"""
    counts = mev_only_counts(shares)
    total = sum(counts)
    return [c / total for c in counts] if total else []


def herfindahl(shares: Iterable[float]) -> float:
    """Sum of squared percentage shares, 0-10,000 scale"""
    values = np.asarray(list(shares), dtype=float)
    if values.size == 0:
        raise InputError("Herfindahl index of an empty market")
    if np.any(values < 0) or abs(values.sum() - 1.0) > 1e-9:
        raise InputError(f"Shares must be non-negative and sum to 1, got {values.sum():.12f}")
    return float(np.sum((100.0 * values) ** 2))


def herfindahl_counts(counts: Iterable[int]) -> float:
    """Herfindahl index from block counts: 10,000 * sum(c^2) / N^2 in integer arithmetic.

    An equal n-way split gives exactly 10000 / n."""
    values = [int(c) for c in counts]
    if not values or any(c < 0 for c in values) or sum(values) == 0:
        raise InputError("Herfindahl index needs non-negative counts with a positive total")
    return 10_000 * sum(c * c for c in values) / sum(values) ** 2


def concentration_ratio(shares: Iterable[float], k: int = 3) -> float:
    values = sorted(shares, reverse=True)
    return float(sum(values[:k]))


def mev_block_share(blocks: Sequence[BlockMeta], registry: Optional[LabelRegistry] = None, window: Window = None) -> float:
    kept = [b for b in blocks if _in_window(b.day, window)]
    if not kept:
        return 0.0
    return sum(1 for b in kept if _builder_key(b, registry) != NON_MEV) / len(kept)


def daily_mev_share(blocks: Sequence[BlockMeta], registry: Optional[LabelRegistry] = None) -> pd.DataFrame:
    days: Dict[date, List[int]] = defaultdict(lambda: [0, 0])
    for block in blocks:
        tally = days[block.day]
        tally[0] += 1
        tally[1] += int(_builder_key(block, registry) != NON_MEV)
    rows = [
        {"date": d, "blocks": n, "mev_blocks": m, "mev_share": m / n}
        for d, (n, m) in sorted(days.items())
    ]
    return pd.DataFrame(rows, columns=["date", "blocks", "mev_blocks", "mev_share"])


@dataclass
class RevenueSeries:
    daily: pd.DataFrame
    excluded: List[date] = field(default_factory=list)
    unmatched_transactions: int = 0


def validator_revenue(
    blocks: Sequence[BlockMeta],
    txs: Sequence[TxRecord],
    window: Window = None,
    exclusions: Iterable[date] = (),
) -> RevenueSeries:
    """Daily net gas revenue (tips above the base fee) and builder payments, in ETH"""
    exclusions = sorted(set(exclusions))
    by_number = {b.block_number: b for b in blocks}
    net_gas: Dict[date, float] = defaultdict(float)
    payments: Dict[date, float] = defaultdict(float)
    seen_days = set()

    for block in blocks:
        if not _in_window(block.day, window):
            continue
        seen_days.add(block.day)
        payments[block.day] += block.mev_payment

    unmatched = 0
    for tx in txs:
        block = by_number.get(tx.block_number)
        if block is None:
            unmatched += 1
            continue
        if not _in_window(block.day, window):
            continue
        net_gas[block.day] += gwei_to_eth(tx.gas_used * (tx.effective_gas_price - block.base_fee_per_gas))
    if unmatched:
        logger.warning("%d transactions have no block metadata; left out of revenue", unmatched)

    excluded = [d for d in exclusions if d in seen_days]
    for d in excluded:
        logger.info("Revenue series excludes %s", d)
    rows = []
    for d in sorted(seen_days):
        if d in exclusions:
            continue
        total = net_gas[d] + payments[d]
        rows.append({
            "date": d,
            "net_gas_eth": net_gas[d],
            "mev_payment_eth": payments[d],
            "total_eth": total,
            "mev_share": payments[d] / total if total > 0 else float("nan"),
        })
    frame = pd.DataFrame(rows, columns=["date", "net_gas_eth", "mev_payment_eth", "total_eth", "mev_share"])
    return RevenueSeries(daily=frame, excluded=excluded, unmatched_transactions=unmatched)


def revenue_summary(series: RevenueSeries) -> Dict[str, float]:
    daily = series.daily
    if daily.empty:
        return {"days": 0, "median_total_eth": float("nan"), "mev_revenue_share": float("nan")}
    total = daily["total_eth"].sum()
    return {
        "days": int(len(daily)),
        "median_total_eth": float(daily["total_eth"].median()),
        "mev_revenue_share": float(daily["mev_payment_eth"].sum() / total) if total > 0 else float("nan"),
    }
