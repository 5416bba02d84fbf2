import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chain_records import AddressLabel, LabelRegistry, MempoolObs, SandwichRecord, TxRecord, group_by_block
from config import CONTINUOUS_REGRESSOR, FLOAT_FORMAT, LABEL_REGRESSORS, SANDWICH_REGRESSORS
from errors import DataError

logger = logging.getLogger(__name__)


def regressor_names(buckets: int = 4, extended: bool = False) -> List[str]:
    """Column order of the placement model; the last mempool bucket is the omitted baseline"""
    names = [f"mempool_q{i}" for i in range(1, buckets)]
    names.append(CONTINUOUS_REGRESSOR)
    names.extend(LABEL_REGRESSORS)
    if extended:
        names.extend(SANDWICH_REGRESSORS)
    return names


@dataclass(frozen=True)
class DesignRow:
    tx_hash: str
    block_number: int
    block_index: int
    block_bucket: int  # dependent variable, 1..buckets
    mempool_bucket: Optional[int]
    max_fee_per_gas: float
    to_dex: int
    from_dex: int
    to_mev: int
    from_mev: int
    block_position: float
    mempool_position: Optional[float]
    front_run: int = 0
    back_run: int = 0
    buckets: int = 4

    @property
    def block_quartile(self) -> int:
        return self.block_bucket

    @property
    def in_mempool(self) -> int:
        return int(self.mempool_position is not None)

    @property
    def mempool_dummies(self) -> Tuple[int, ...]:
        return tuple(int(self.mempool_bucket == b) for b in range(1, self.buckets))

    @property
    def mempool_q1(self) -> int:
        return self.mempool_dummies[0]

    @property
    def mempool_q2(self) -> int:
        return self.mempool_dummies[1] if self.buckets > 2 else 0

    @property
    def mempool_q3(self) -> int:
        return self.mempool_dummies[2] if self.buckets > 3 else 0

    def value(self, name: str) -> float:
        if name.startswith("mempool_q"):
            return float(self.mempool_bucket == int(name[len("mempool_q"):]))
        return float(getattr(self, name))


@dataclass
class DayData:
    day: Optional[date]
    transactions: List[TxRecord]
    mempool: Mapping[str, MempoolObs] = field(default_factory=dict)


@dataclass(frozen=True)
class DesignMatrix:
    names: Tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    hashes: Tuple[str, ...] = ()
    buckets: int = 4

    @property
    def n_obs(self) -> int:
        return int(self.X.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def constant_columns(self) -> List[str]:
        if self.n_obs == 0:
            return list(self.names)
        return [n for i, n in enumerate(self.names) if np.all(self.X[:, i] == self.X[0, i])]

    def drop(self, columns: Iterable[str]) -> "DesignMatrix":
        columns = set(columns)
        keep = [i for i, n in enumerate(self.names) if n not in columns]
        return replace(self, names=tuple(self.names[i] for i in keep), X=self.X[:, keep])


def normalize_block_positions(block: Sequence[TxRecord]) -> Dict[str, float]:
    """index / (n - 1); a single-transaction block sits at 0"""
    n = len(block)
    indices = sorted(tx.block_index for tx in block)
    if indices != list(range(n)):
        number = block[0].block_number if block else None
        raise DataError(f"Block {number} does not carry indices 0..{n - 1} exactly once")
    if n == 1:
        return {block[0].tx_hash: 0.0}
    return {tx.tx_hash: tx.block_index / (n - 1) for tx in block}


def mempool_positions(block: Sequence[TxRecord], obs: Mapping[str, MempoolObs]) -> Dict[str, Optional[float]]:
    """Arrival rank among the block's mempool-observed transactions, scaled to [0, 1]"""
    seen = sorted(
        (obs[tx.tx_hash].first_seen, tx.tx_hash) for tx in block if tx.tx_hash in obs
    )
    positions: Dict[str, Optional[float]] = {tx.tx_hash: None for tx in block}
    m = len(seen)
    for rank, (_, tx_hash) in enumerate(seen):
        positions[tx_hash] = rank / (m - 1) if m > 1 else 0.0
    return positions


def quartile(position: float, buckets: int = 4) -> int:
    """Closed-upper buckets: p <= 1/B -> 1, p <= 2/B -> 2, ..."""
    if not 0.0 <= position <= 1.0:
        raise ValueError(f"position {position} is outside [0, 1]")
    for b in range(1, buckets):
        if position <= b / buckets:
            return b
    return buckets


def build_design_rows(
    day: DayData,
    registry: LabelRegistry,
    sandwiches: Optional[Sequence[SandwichRecord]] = None,
    extended: bool = False,
    buckets: int = 4,
) -> List[DesignRow]:
    """One row per transaction of the day, ordered by (block_number, block_index)"""
    if not day.transactions:
        logger.warning("No blocks for %s; design is empty", day.day)
        return []

    front_hashes, back_hashes = set(), set()
    if extended:
        for s in sandwiches or ():
            front_hashes.add(s.front_hash)
            back_hashes.add(s.back_hash)

    rows: List[DesignRow] = []
    for block in group_by_block(day.transactions).values():
        block_pos = normalize_block_positions(block)
        mem_pos = mempool_positions(block, day.mempool)
        for tx in block:
            mp = mem_pos[tx.tx_hash]
            if tx.to_addr is None:
                to_dex = from_dex = to_mev = from_mev = 0
            else:
                to_dex = int(registry.has_label(tx.to_addr, AddressLabel.DEX))
                from_dex = int(registry.has_label(tx.from_addr, AddressLabel.DEX))
                to_mev = int(registry.has_label(tx.to_addr, AddressLabel.MEV_BUILDER))
                from_mev = int(registry.has_label(tx.from_addr, AddressLabel.MEV_BUILDER))
            front = int(tx.tx_hash in front_hashes)
            rows.append(DesignRow(
                tx_hash=tx.tx_hash,
                block_number=tx.block_number,
                block_index=tx.block_index,
                block_bucket=quartile(block_pos[tx.tx_hash], buckets),
                mempool_bucket=quartile(mp, buckets) if mp is not None else None,
                max_fee_per_gas=tx.max_fee_per_gas,
                to_dex=to_dex,
                from_dex=from_dex,
                to_mev=to_mev,
                from_mev=from_mev,
                block_position=block_pos[tx.tx_hash],
                mempool_position=mp,
                front_run=front,
                back_run=int(tx.tx_hash in back_hashes and not front),
                buckets=buckets,
            ))
    return rows


def design_matrix(rows: Sequence[DesignRow], names: Optional[Sequence[str]] = None) -> DesignMatrix:
    buckets = rows[0].buckets if rows else 4
    if names is None:
        names = regressor_names(buckets)
    X = np.array([[r.value(n) for n in names] for r in rows], dtype=float).reshape(len(rows), len(names))
    y = np.array([r.block_bucket for r in rows], dtype=int)
    return DesignMatrix(names=tuple(names), X=X, y=y, hashes=tuple(r.tx_hash for r in rows), buckets=buckets)


def design_rows_frame(rows: Sequence[DesignRow]) -> pd.DataFrame:
    """Audit view of the design, one line per transaction"""
    return pd.DataFrame([
        {**asdict(r), "in_mempool": r.in_mempool, **{f"mempool_q{i + 1}": d for i, d in enumerate(r.mempool_dummies)}}
        for r in rows
    ])


def dump_design_rows(rows: Sequence[DesignRow], path: Path) -> int:
    frame = design_rows_frame(rows)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return len(frame)
