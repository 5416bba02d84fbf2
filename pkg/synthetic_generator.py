"""Seeded synthetic chain data with a known placement model behind it.

Two entry points: `generate_design_rows` draws design rows straight from the ordered-probit law
(for estimator recovery), `generate_synthetic_day` builds a full day of blocks, mempool sightings,
labels, prices and planted sandwiches in the ingest formats.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from chain_records import (
    AddressLabel, BlockMeta, LabelRegistry, MempoolObs, PriceRow, PriceTable, SandwichRecord, TxRecord,
)
from config import IngestConfig, SynthConfig
from data_loader import BLOCK_COLUMNS, PRICE_COLUMNS, SANDWICH_COLUMNS, TX_COLUMNS
from errors import ConfigurationError
from position_builder import DesignRow

logger = logging.getLogger(__name__)

__all__ = [
    "SynthConfig", "SyntheticDay", "day_seed", "generate_design_rows", "generate_synthetic_day",
    "write_synthetic_bundle",
]

REGIONS = ("us-east", "eu-west", "ap-southeast")
BLOCK_SECONDS = 12
BLOCKS_PER_CALENDAR_DAY = 7200
FIRST_BLOCK = 20_000_000
_EPOCH = date(2024, 1, 1)


def day_seed(seed: int, day: date) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, int(day.strftime("%Y%m%d"))])


def _check_feasible(config: SynthConfig) -> None:
    if config.sandwich_rate * 3 > config.txs_per_block_min:
        raise ConfigurationError(
            f"sandwich_rate {config.sandwich_rate} needs {config.sandwich_rate * 3:.1f} legs per block, "
            f"but blocks may hold only {config.txs_per_block_min} transactions"
        )


def _hex(rng: np.random.Generator, nbytes: int) -> str:
    return "0x" + rng.bytes(nbytes).hex()


@dataclass
class _Features:
    to_kind: np.ndarray  # 0 plain, 1 DEX, 2 MEV builder, 3 contract creation
    from_kind: np.ndarray  # 0 plain, 1 DEX, 2 MEV builder
    max_fee: np.ndarray
    priority: np.ndarray

    def dummies(self) -> Dict[str, np.ndarray]:
        created = self.to_kind == 3
        return {
            "to_dex": (self.to_kind == 1).astype(int),
            "to_mev": (self.to_kind == 2).astype(int),
            "from_dex": ((self.from_kind == 1) & ~created).astype(int),
            "from_mev": ((self.from_kind == 2) & ~created).astype(int),
        }


def _draw_features(config: SynthConfig, rng: np.random.Generator, n: int) -> _Features:
    p_plain_to = 1.0 - config.p_to_dex - config.p_to_mev - config.p_contract_creation
    to_kind = rng.choice(4, size=n, p=[max(p_plain_to, 0.0), config.p_to_dex, config.p_to_mev, config.p_contract_creation])
    from_kind = rng.choice(3, size=n, p=[max(1.0 - config.p_from_dex - config.p_from_mev, 0.0), config.p_from_dex, config.p_from_mev])
    priority = rng.exponential(config.priority_fee_mean_gwei, size=n) if config.priority_fee_mean_gwei > 0 else np.zeros(n)
    headroom = rng.exponential(config.max_fee_headroom_gwei, size=n) if config.max_fee_headroom_gwei > 0 else np.zeros(n)
    max_fee = config.base_fee_gwei + priority + headroom
    return _Features(to_kind, from_kind, max_fee, priority)


def _latent_index(config: SynthConfig, features: _Features) -> np.ndarray:
    index = config.beta.get("max_fee_per_gas", 0.0) * features.max_fee
    for name, column in features.dummies().items():
        index = index + config.beta.get(name, 0.0) * column
    return index


def generate_design_rows(config: SynthConfig, n: int, seed: Optional[int] = None) -> List[DesignRow]:
    """Rows whose block bucket follows the ordered-probit law at the configured truth"""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    buckets = len(config.cutpoints) + 1
    features = _draw_features(config, rng, n)
    mempool_bucket = rng.integers(1, buckets + 1, size=n)
    index = _latent_index(config, features)
    for i in range(1, buckets):
        index = index + config.beta.get(f"mempool_q{i}", 0.0) * (mempool_bucket == i)
    latent = index + rng.standard_normal(n)
    block_bucket = np.searchsorted(np.asarray(config.cutpoints), latent) + 1

    mem_pos = (mempool_bucket - rng.random(n)) / buckets
    blk_pos = (block_bucket - rng.random(n)) / buckets
    dummies = features.dummies()
    return [
        DesignRow(
            tx_hash=f"0x{i:064x}",
            block_number=i // 200,
            block_index=i % 200,
            block_bucket=int(block_bucket[i]),
            mempool_bucket=int(mempool_bucket[i]),
            max_fee_per_gas=float(features.max_fee[i]),
            to_dex=int(dummies["to_dex"][i]),
            from_dex=int(dummies["from_dex"][i]),
            to_mev=int(dummies["to_mev"][i]),
            from_mev=int(dummies["from_mev"][i]),
            block_position=float(blk_pos[i]),
            mempool_position=float(mem_pos[i]),
            buckets=buckets,
        )
        for i in range(n)
    ]


@dataclass
class SyntheticDay:
    day: date
    transactions: List[TxRecord] = field(default_factory=list)
    blocks: List[BlockMeta] = field(default_factory=list)
    mempool: List[MempoolObs] = field(default_factory=list)
    labels: LabelRegistry = field(default_factory=LabelRegistry)
    sandwiches: List[SandwichRecord] = field(default_factory=list)
    prices: PriceTable = field(default_factory=PriceTable)


@dataclass
class _Pools:
    dex: List[str]
    cex: List[str]
    builders: List[str]
    proposers: List[str]
    searchers: List[str]

    def registry(self) -> LabelRegistry:
        labels: Dict[str, List[str]] = {}
        for addr in self.dex:
            labels.setdefault(addr, []).append(AddressLabel.DEX.value)
        for addr in self.cex:
            labels.setdefault(addr, []).append(AddressLabel.CEX.value)
        for addr in self.builders:
            labels.setdefault(addr, []).append(AddressLabel.MEV_BUILDER.value)
        return LabelRegistry(labels)

    def pick(self, kind: int, rng: np.random.Generator) -> str:
        """1 draws a DEX pool, 2 a builder, anything else a fresh address"""
        if kind == 1:
            return self.dex[rng.integers(len(self.dex))]
        if kind == 2:
            return self.builders[rng.integers(len(self.builders))]
        return _hex(rng, 20)


def _pools(config: SynthConfig) -> _Pools:
    # address pools depend only on the run seed so labels agree across days
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    return _Pools(
        dex=[_hex(rng, 20) for _ in range(config.dex_pool_size)],
        cex=[_hex(rng, 20) for _ in range(config.cex_pool_size)],
        builders=[_hex(rng, 20) for _ in range(config.builder_pool_size)],
        proposers=[_hex(rng, 20) for _ in range(5)],
        searchers=[_hex(rng, 20) for _ in range(max(config.builder_pool_size, 5))],
    )


def _gas_used(config: SynthConfig, rng: np.random.Generator) -> int:
    return int(max(21_000, round(rng.exponential(config.gas_used_mean))))


def generate_synthetic_day(config: SynthConfig, seed: Optional[int] = None, day: Optional[date] = None) -> SyntheticDay:
    """One UTC day of blocks ordered by the latent placement index; sandwich triples ride on the front leg's index"""
    _check_feasible(config)
    day = day or config.start_date
    rng = np.random.default_rng(day_seed(config.seed if seed is None else seed, day))
    pools = _pools(config)
    registry = pools.registry()

    day_start = int(datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp())
    first_block = FIRST_BLOCK + (day - _EPOCH).days * BLOCKS_PER_CALENDAR_DAY
    out = SyntheticDay(
        day=day,
        labels=registry,
        prices=PriceTable({day: PriceRow(config.avg_gas_price_gwei, config.eth_close_usd)}),
    )

    for b in range(config.blocks_per_day):
        number = first_block + b
        timestamp = day_start + BLOCK_SECONDS * b + 1
        n_tx = max(config.txs_per_block_min, int(rng.poisson(config.txs_per_block_mean)))
        n_sandwich = min(int(rng.poisson(config.sandwich_rate)), n_tx // 6)
        n_normal = n_tx - 3 * n_sandwich

        features = _draw_features(config, rng, n_normal)
        latent = _latent_index(config, features) + rng.standard_normal(n_normal)
        order = np.argsort(latent, kind="stable")

        observed: List[str] = []
        mev_block = rng.random() < config.mev_block_share
        builder = pools.builders[rng.integers(len(pools.builders))] if mev_block else pools.proposers[rng.integers(len(pools.proposers))]
        eth_usd = config.eth_close_usd

        def fees(priority: float, headroom: float) -> Tuple[float, float, float]:
            effective = config.base_fee_gwei + priority
            return effective + headroom, priority, effective

        # rank among the ordinary transactions -> sandwich legs placed just before it
        inserts: Dict[int, List[TxRecord]] = {}
        sorted_latent = latent[order]
        for s in range(n_sandwich):
            pool = pools.dex[rng.integers(len(pools.dex))]
            attacker = pools.searchers[rng.integers(len(pools.searchers))]
            victim_sender = _hex(rng, 20)
            baseline = config.base_fee_gwei + config.priority_fee_mean_gwei
            legs = []
            for role in ("front", "victim", "back"):
                if role == "back":
                    effective = config.backrun_fee_multiplier * baseline * rng.uniform(0.5, 1.5)
                    priority = max(effective - config.base_fee_gwei, 0.0)
                else:
                    priority = float(rng.exponential(config.priority_fee_mean_gwei)) if config.priority_fee_mean_gwei > 0 else 0.0
                max_fee, priority, effective = fees(priority, config.max_fee_headroom_gwei)
                legs.append(TxRecord(
                    tx_hash=_hex(rng, 32),
                    block_number=number,
                    block_index=0,
                    from_addr=victim_sender if role == "victim" else attacker,
                    to_addr=pool,
                    max_fee_per_gas=max_fee,
                    max_priority_fee_per_gas=priority,
                    effective_gas_price=effective,
                    gas_used=_gas_used(config, rng),
                    value=0 if role == "back" else int(rng.integers(10 ** 15, 10 ** 18)),
                    block_timestamp=timestamp,
                ))
                observed.append(legs[-1].tx_hash)
            front_latent = (
                config.beta.get("max_fee_per_gas", 0.0) * legs[0].max_fee_per_gas
                + config.beta.get("to_dex", 0.0)
                + config.beta.get("front_run", 0.0)
                + rng.standard_normal()
            )
            inserts.setdefault(int(np.searchsorted(sorted_latent, front_latent)), []).extend(legs)
            cost = sum(leg.gas_fee_eth for leg in (legs[0], legs[2])) * eth_usd
            out.sandwiches.append(SandwichRecord(
                block_number=number,
                front_hash=legs[0].tx_hash,
                victim_hash=legs[1].tx_hash,
                back_hash=legs[2].tx_hash,
                cost_usd=float(cost),
                profit_usd=float(rng.exponential(50.0)),
            ))

        ordinary: List[TxRecord] = []
        for i in order:
            kind_to, kind_from = int(features.to_kind[i]), int(features.from_kind[i])
            to_addr = None if kind_to == 3 else pools.pick(kind_to, rng)
            from_addr = pools.pick(kind_from, rng)
            priority = float(features.priority[i])
            tx = TxRecord(
                tx_hash=_hex(rng, 32),
                block_number=number,
                block_index=0,
                from_addr=from_addr,
                to_addr=to_addr,
                max_fee_per_gas=float(features.max_fee[i]),
                max_priority_fee_per_gas=priority,
                effective_gas_price=config.base_fee_gwei + priority,
                gas_used=_gas_used(config, rng),
                value=int(rng.integers(1, 10 ** 18)),
                block_timestamp=timestamp,
            )
            ordinary.append(tx)
            if rng.random() < config.mempool_coverage:
                observed.append(tx.tx_hash)

        sequence: List[TxRecord] = []
        for rank in range(len(ordinary) + 1):
            sequence.extend(inserts.get(rank, ()))
            if rank < len(ordinary):
                sequence.append(ordinary[rank])
        block_txs = [replace(tx, block_index=i) for i, tx in enumerate(sequence)]

        # arrival order in the public mempool is unrelated to block order
        arrival = rng.permutation(len(observed))
        window_ms = BLOCK_SECONDS * 1000
        for rank, pos in enumerate(arrival):
            first_seen = (timestamp - BLOCK_SECONDS) * 1000 + int(rank * window_ms / max(len(observed), 1)) + 1
            out.mempool.append(MempoolObs(observed[pos], first_seen, REGIONS[int(rng.integers(len(REGIONS)))]))

        out.transactions.extend(block_txs)
        out.blocks.append(BlockMeta(
            block_number=number,
            timestamp=timestamp,
            tx_count=len(block_txs),
            builder_addr=builder,
            base_fee_per_gas=config.base_fee_gwei,
            mev_payment=float(rng.exponential(config.mev_payment_mean_eth)) if mev_block and config.mev_payment_mean_eth > 0 else 0.0,
        ))

    logger.info(
        "Synthetic %s: %d blocks, %d transactions, %d sandwiches",
        day, len(out.blocks), len(out.transactions), len(out.sandwiches),
    )
    return out


def _tx_row(tx: TxRecord) -> Dict[str, object]:
    return {
        "tx_hash": tx.tx_hash,
        "block_number": tx.block_number,
        "block_index": tx.block_index,
        "from_addr": tx.from_addr,
        "to_addr": tx.to_addr or "",
        "max_fee_per_gas_gwei": repr(tx.max_fee_per_gas),
        "max_priority_fee_per_gas_gwei": repr(tx.max_priority_fee_per_gas),
        "effective_gas_price_gwei": repr(tx.effective_gas_price),
        "gas_used": tx.gas_used,
        "value_wei": str(tx.value),
        "block_timestamp": tx.block_timestamp,
    }


def write_synthetic_bundle(
    config: SynthConfig, out_dir: Path, days: int = 1, seed: Optional[int] = None, max_workers: int = 4
) -> IngestConfig:
    """Generate `days` consecutive days and write the six ingest files; returns the matching ingest config"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dates = [config.start_date + timedelta(days=i) for i in range(days)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        generated = list(pool.map(lambda d: generate_synthetic_day(config, seed, d), dates))

    paths = {
        "transactions": out_dir / "transactions.csv",
        "blocks": out_dir / "blocks.csv",
        "mempool": out_dir / "mempool.jsonl",
        "labels": out_dir / "labels.json",
        "sandwiches": out_dir / "sandwiches.csv",
        "prices": out_dir / "prices.csv",
    }

    txs = [_tx_row(tx) for d in generated for tx in d.transactions]
    pd.DataFrame(txs, columns=list(TX_COLUMNS)).to_csv(paths["transactions"], index=False)

    blocks = [
        {
            "block_number": b.block_number,
            "timestamp": b.timestamp,
            "tx_count": b.tx_count,
            "builder_addr": b.builder_addr or "",
            "base_fee_per_gas_gwei": repr(b.base_fee_per_gas),
            "mev_payment_eth": repr(b.mev_payment),
        }
        for d in generated for b in d.blocks
    ]
    pd.DataFrame(blocks, columns=list(BLOCK_COLUMNS)).to_csv(paths["blocks"], index=False)

    with open(paths["mempool"], "w", encoding="utf-8") as f:
        for d in generated:
            for obs in d.mempool:
                f.write(json.dumps({"tx_hash": obs.tx_hash, "first_seen_ms": obs.first_seen, "region": obs.region}) + "\n")

    labels = {addr: sorted(tags) for addr, tags in generated[0].labels.items()} if generated else {}
    with open(paths["labels"], "w", encoding="utf-8") as f:
        json.dump(dict(sorted(labels.items())), f, indent=2)

    sandwiches = [
        {
            "block_number": s.block_number,
            "front_hash": s.front_hash,
            "victim_hash": s.victim_hash,
            "back_hash": s.back_hash,
            "cost_usd": repr(s.cost_usd),
            "profit_usd": repr(s.profit_usd),
        }
        for d in generated for s in d.sandwiches
    ]
    pd.DataFrame(sandwiches, columns=list(SANDWICH_COLUMNS)).to_csv(paths["sandwiches"], index=False)

    prices = [
        {"date": d.day.isoformat(), "avg_gas_price_gwei": repr(config.avg_gas_price_gwei), "eth_close_usd": repr(config.eth_close_usd)}
        for d in generated
    ]
    pd.DataFrame(prices, columns=list(PRICE_COLUMNS)).to_csv(paths["prices"], index=False)

    logger.info("Wrote synthetic bundle for %d days to %s", days, out_dir)
    return IngestConfig(**{k: v for k, v in paths.items()}, start=dates[0] if dates else None, end=dates[-1] if dates else None)
