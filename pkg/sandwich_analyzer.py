"""Sandwich attack analytics: joining vendor triples to chain data, back-run fee tests,
displacement statistics, constant-product harm, the daily effect regression and skewness tests."""

import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy import optimize, stats

from chain_records import (
    AddressLabel, BlockMeta, LabelRegistry, MempoolObs, SandwichRecord, TxRecord, group_by_block, utc_date,
)
from errors import (
    DataError, DomainError, InferenceError, InputError, RankDeficientError, UndefinedRatioError,
    UndefinedStatisticError,
)
from position_builder import mempool_positions, normalize_block_positions

logger = logging.getLogger(__name__)

LEGS = ("front", "victim", "back")
EFFECT_REGRESSORS = (
    "sandwich_cost_usd",
    "gas_fee_eth",
    "block_sandwiches",
    "max_priority_fee",
    "sandwich_profit_usd",
    "mev_payment_eth",
)


@dataclass(frozen=True)
class EnrichedSandwich:
    record: SandwichRecord
    front: TxRecord
    victim: TxRecord
    back: TxRecord
    block_positions: Tuple[float, float, float]
    mempool_positions: Tuple[Optional[float], Optional[float], Optional[float]]
    block_sandwiches: int = 1
    mev_payment: float = 0.0

    @property
    def legs(self) -> Tuple[TxRecord, TxRecord, TxRecord]:
        return self.front, self.victim, self.back

    @property
    def gas_fees_eth(self) -> Tuple[float, float, float]:
        return tuple(tx.gas_fee_eth for tx in self.legs)

    @property
    def day(self) -> date:
        return self.front.day

    def leg(self, name: str) -> TxRecord:
        return self.legs[LEGS.index(name)]


@dataclass
class JoinResult:
    records: List[EnrichedSandwich]
    dropped: int = 0
    block_counts: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def join_sandwiches(
    sandwiches: Sequence[SandwichRecord],
    txs: Sequence[TxRecord],
    blocks: Sequence[BlockMeta] = (),
    mempool: Optional[Mapping[str, MempoolObs]] = None,
) -> JoinResult:
    """Resolve each triple's hashes; triples with a missing or misordered leg are dropped"""
    by_hash = {tx.tx_hash: tx for tx in txs}
    payments = {b.block_number: b.mev_payment for b in blocks}
    block_txs = group_by_block(txs)
    mempool = mempool or {}

    resolved = []
    dropped = 0
    for s in sandwiches:
        legs = [by_hash.get(h) for h in s.hashes]
        if any(leg is None for leg in legs):
            dropped += 1
            logger.debug("Dropping sandwich in block %s: unmatched leg", s.block_number)
            continue
        if len({leg.block_number for leg in legs}) != 1:
            dropped += 1
            continue
        front, victim, back = legs
        if not front.block_index < victim.block_index < back.block_index:
            dropped += 1
            logger.debug("Dropping sandwich in block %s: legs out of order", s.block_number)
            continue
        resolved.append((s, front, victim, back))

    counts = Counter(front.block_number for _, front, _, _ in resolved)
    positions: Dict[int, Tuple[Dict[str, float], Dict[str, Optional[float]]]] = {}
    records = []
    for s, front, victim, back in resolved:
        number = front.block_number
        if number not in positions:
            try:
                positions[number] = (
                    normalize_block_positions(block_txs[number]),
                    mempool_positions(block_txs[number], mempool),
                )
            except DataError as e:
                logger.warning("Sandwich block skipped: %s", e)
                positions[number] = None
        if positions[number] is None:
            dropped += 1
            continue
        block_pos, mem_pos = positions[number]
        records.append(EnrichedSandwich(
            record=s,
            front=front,
            victim=victim,
            back=back,
            block_positions=tuple(block_pos[h] for h in s.hashes),
            mempool_positions=tuple(mem_pos[h] for h in s.hashes),
            block_sandwiches=counts[number],
            mev_payment=payments.get(number, 0.0),
        ))

    if dropped:
        logger.warning("Dropped %d of %d sandwiches while joining", dropped, len(sandwiches))
    return JoinResult(records=records, dropped=dropped, block_counts=dict(sorted(counts.items())))


@dataclass(frozen=True)
class TTestResult:
    mean_a: float
    mean_b: float
    sd_a: float
    sd_b: float
    n_a: int
    n_b: int
    t_stat: float
    p_value: float
    df: float = float("nan")
    alternative: str = "two-sided"

    def as_row(self) -> Dict[str, object]:
        return {
            "mean_a": self.mean_a, "mean_b": self.mean_b, "sd_a": self.sd_a, "sd_b": self.sd_b,
            "n_a": self.n_a, "n_b": self.n_b, "t_stat": self.t_stat, "p_value": self.p_value,
            "df": self.df, "alternative": self.alternative,
        }


def welch_ttest(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> TTestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise UndefinedStatisticError("Welch t-test needs at least two observations per sample")
    sd_a, sd_b = float(a.std(ddof=1)), float(b.std(ddof=1))
    if sd_a == 0 and sd_b == 0:
        if a.mean() != b.mean():
            raise UndefinedStatisticError("Both samples are constant with different means")
        t, p, df = 0.0, 1.0, float(a.size + b.size - 2)
    else:
        res = stats.ttest_ind(a, b, equal_var=False, alternative=alternative)
        t, p = float(res.statistic), float(res.pvalue)
        va, vb = sd_a ** 2 / a.size, sd_b ** 2 / b.size
        df = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return TTestResult(
        mean_a=float(a.mean()), mean_b=float(b.mean()), sd_a=sd_a, sd_b=sd_b,
        n_a=int(a.size), n_b=int(b.size), t_stat=t, p_value=min(max(p, 0.0), 1.0),
        df=float(df), alternative=alternative,
    )


def backrun_gas_test(
    enriched: Sequence[EnrichedSandwich], all_txs: Sequence[TxRecord], alternative: str = "two-sided"
) -> TTestResult:
    """Gas fees (ETH) of back-run legs against every other transaction"""
    back_hashes = {s.back.tx_hash for s in enriched}
    backs = [s.back.gas_fee_eth for s in enriched]
    others = [tx.gas_fee_eth for tx in all_txs if tx.tx_hash not in back_hashes]
    return welch_ttest(backs, others, alternative)


def position_displacement(enriched: Sequence[EnrichedSandwich]) -> pd.DataFrame:
    """Per leg: mean mempool vs mean block position with a paired t-test of the difference"""
    rows = []
    for i, leg in enumerate(LEGS):
        pairs = [
            (s.mempool_positions[i], s.block_positions[i])
            for s in enriched
            if s.mempool_positions[i] is not None
        ]
        mem = np.array([p[0] for p in pairs], dtype=float)
        blk = np.array([p[1] for p in pairs], dtype=float)
        if mem.size < 2:
            logger.warning("Displacement for %s legs needs two mempool-observed legs, got %d", leg, mem.size)
            t, p = float("nan"), float("nan")
        elif np.all(mem == blk):
            t, p = 0.0, 1.0
        else:
            res = stats.ttest_rel(mem, blk)
            t, p = float(res.statistic), float(res.pvalue)
        rows.append({
            "leg": leg,
            "n": int(mem.size),
            "mempool_mean": float(mem.mean()) if mem.size else float("nan"),
            "block_mean": float(blk.mean()) if blk.size else float("nan"),
            "t_stat": t,
            "p_value": p,
        })
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class SandwichCandidate:
    record: SandwichRecord
    confidence: str
    notes: Tuple[str, ...] = ()


def detect_sandwiches_heuristic(
    block: Sequence[TxRecord], registry: Optional[LabelRegistry] = None, window: int = 6
) -> List[SandwichCandidate]:
    """Advisory scan of one block for front/victim/back triples.

    A front sends value to a pool, the back from the same sender to the same pool carries none,
    and a different sender hits that pool in between. Each front takes the nearest free back.
    """
    txs = sorted(block, key=lambda t: t.block_index)
    used_backs = set()
    pairs = []
    for i, front in enumerate(txs):
        if front.to_addr is None or front.value <= 0:
            continue
        for back in txs[i + 1:]:
            if back.block_index - front.block_index > window:
                break
            if (
                back.tx_hash not in used_backs
                and back.from_addr == front.from_addr
                and back.to_addr == front.to_addr
                and back.value == 0
            ):
                used_backs.add(back.tx_hash)
                pairs.append((front, back))
                break

    attack_hashes = {tx.tx_hash for pair in pairs for tx in pair}
    used_victims = set()
    candidates = []
    for front, back in pairs:
        victim = next(
            (
                tx for tx in txs
                if front.block_index < tx.block_index < back.block_index
                and tx.tx_hash not in attack_hashes
                and tx.tx_hash not in used_victims
                and tx.to_addr == front.to_addr
                and tx.from_addr != front.from_addr
                and tx.value > 0
            ),
            None,
        )
        if victim is None:
            continue
        used_victims.add(victim.tx_hash)
        notes = [f"span {back.block_index - front.block_index}"]
        confidence = "medium"
        if registry is not None:
            if registry.has_label(front.to_addr, AddressLabel.DEX):
                confidence = "high"
                notes.append("pool is a labelled DEX")
            else:
                confidence = "low"
                notes.append("pool is not a labelled DEX")
        if back.block_index - front.block_index == 2:
            notes.append("contiguous legs")
        candidates.append(SandwichCandidate(
            record=SandwichRecord(front.block_number, front.tx_hash, victim.tx_hash, back.tx_hash),
            confidence=confidence,
            notes=tuple(notes),
        ))
    return candidates


def _swap_out(reserve_in: float, reserve_out: float, amount_in: float, fee_rate: float) -> float:
    net = amount_in * (1 - fee_rate)
    return reserve_out * net / (reserve_in + net)


@dataclass(frozen=True)
class AmmCounterfactual:
    reserve_in: float
    reserve_out: float
    counterfactual_out: float
    harm: float
    front_price_out: float
    front_price_harm: float


def amm_counterfactual(
    front_in: float, front_out: float, victim_in: float, victim_out: float, fee_rate: float = 0.003,
    rtol: float = 1e-9,
) -> AmmCounterfactual:
    """Infer pre-front pool reserves from two sequential swaps and price the victim without the front.

    The fee stays in the pool, so the input reserve grows by the full amount in. Two
    counterfactuals are reported: the swap at the inferred reserves, and the victim filled at
    the front run's execution price.
    """
    if not 0.0 <= fee_rate <= 0.01:
        raise DomainError(f"fee_rate {fee_rate} is outside [0, 0.01]")
    if min(front_in, front_out, victim_in, victim_out) < 0:
        raise InputError("Swap amounts must be non-negative")
    if victim_in <= 0 or victim_out <= 0:
        raise InputError("Victim swap must have positive amounts")
    if front_in == 0:
        return AmmCounterfactual(float("nan"), float("nan"), victim_out, 0.0, victim_out, 0.0)
    if front_out <= 0:
        raise InferenceError("Front run with input but no output")

    a = front_in * (1 - fee_rate)
    b = victim_in * (1 - fee_rate)

    # with y eliminated through the first swap: out2(x) = out1 * x * b / (a * (x + in1 + b))
    def gap(x: float) -> float:
        return front_out * x * b / (a * (x + front_in + b)) - victim_out

    # gap rises towards out1 * b / a - out2 as the pool gets deep
    if front_out * b / a <= victim_out:
        raise InferenceError("Victim received too much for any constant-product pool behind this front run")
    hi = max(front_in, victim_in, 1.0)
    while gap(hi) <= 0:
        hi *= 2.0
        if hi > 1e300:
            raise InferenceError("No positive reserve bracket found")
    x = optimize.brentq(gap, 0.0, hi, xtol=hi * 1e-16, rtol=max(rtol * 1e-3, 4 * np.finfo(float).eps), maxiter=500)
    y = front_out * (x + a) / a
    if x <= 0 or y <= 0:
        raise InferenceError("Inferred reserves are not positive")

    check_front = _swap_out(x, y, front_in, fee_rate)
    check_victim = _swap_out(x + front_in, y - check_front, victim_in, fee_rate)
    for observed, implied in ((front_out, check_front), (victim_out, check_victim)):
        if abs(implied - observed) > 1e-6 * observed:
            raise InferenceError(f"Inferred reserves reproduce {implied:.6f}, observed {observed:.6f}")

    counterfactual = _swap_out(x, y, victim_in, fee_rate)
    front_price = victim_in * front_out / front_in
    return AmmCounterfactual(
        reserve_in=float(x),
        reserve_out=float(y),
        counterfactual_out=float(counterfactual),
        harm=float(counterfactual - victim_out),
        front_price_out=float(front_price),
        front_price_harm=float(front_price - victim_out),
    )


@dataclass(frozen=True)
class SandwichProfit:
    revenue_eth: float
    costs_usd: float
    net_usd: float


def sandwich_profit(
    front_in: float,
    back_out: float,
    eth_usd: float,
    costs_usd: Optional[float] = None,
    leg_gas_fees_eth: Iterable[float] = (),
) -> SandwichProfit:
    """Revenue is back_out - front_in in ETH; costs default to the legs' gas fees at eth_usd"""
    revenue = back_out - front_in
    if costs_usd is None:
        costs_usd = sum(leg_gas_fees_eth) * eth_usd
    return SandwichProfit(revenue_eth=revenue, costs_usd=costs_usd, net_usd=revenue * eth_usd - costs_usd)


def backrun_fee_total(count: int, mean_fee_eth: float, eth_usd: float) -> float:
    return count * mean_fee_eth * eth_usd


def backrun_payment_share(mean_fee_eth: float, mean_mev_payment_eth: float) -> float:
    """Back-run gas fee as a share of the average builder-to-validator payment"""
    if mean_mev_payment_eth <= 0:
        raise UndefinedRatioError("MEV payment must be positive")
    return mean_fee_eth / mean_mev_payment_eth


def sandwich_reordering_cost(count: int, front_usd: float, back_usd: float) -> float:
    return count * (front_usd + back_usd)


@dataclass(frozen=True)
class FilterResult:
    kept: np.ndarray
    mask: np.ndarray
    retention: float


def filter_high_effects(effects: Sequence[float], threshold: float = 0.5) -> FilterResult:
    values = np.asarray(effects, dtype=float)
    mask = values >= threshold
    retention = float(mask.mean()) if values.size else float("nan")
    return FilterResult(kept=values[mask], mask=mask, retention=retention)


def histogram(values: Sequence[float], bins: int = 20, value_range: Tuple[float, float] = (0.0, 1.0)) -> pd.DataFrame:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=value_range)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


def effect_regression_frame(
    enriched: Sequence[EnrichedSandwich], effects: Mapping[str, float]
) -> pd.DataFrame:
    """One row per front or back leg with a known first-quartile effect"""
    rows = []
    for s in enriched:
        for leg in (s.front, s.back):
            if leg.tx_hash not in effects:
                continue
            rows.append({
                "tx_hash": leg.tx_hash,
                "date": s.day,
                "effect": float(effects[leg.tx_hash]),
                "sandwich_cost_usd": s.record.cost_usd,
                "gas_fee_eth": leg.gas_fee_eth,
                "block_sandwiches": float(s.block_sandwiches),
                "max_priority_fee": leg.max_priority_fee_per_gas,
                "sandwich_profit_usd": s.record.profit_usd,
                "mev_payment_eth": s.mev_payment,
            })
    return pd.DataFrame(rows, columns=["tx_hash", "date", "effect", *EFFECT_REGRESSORS])


@dataclass
class OLSFit:
    names: List[str]
    coefficients: pd.Series
    se: pd.Series
    robust_se: pd.Series
    residuals: np.ndarray
    r_squared: float
    n_obs: int
    conf_low: pd.Series = None
    conf_high: pd.Series = None

    def coef(self, name: str) -> float:
        return float(self.coefficients[name])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "coef": self.coefficients,
            "se": self.se,
            "robust_se": self.robust_se,
            "ci_low": self.conf_low,
            "ci_high": self.conf_high,
        })
        frame.index.name = "variable"
        return frame


def collinear_columns(X: pd.DataFrame) -> List[str]:
    """Columns whose removal leaves the rank unchanged, i.e. members of a linear dependency"""
    full = sm.add_constant(X, has_constant="add")
    rank = np.linalg.matrix_rank(full.to_numpy(dtype=float))
    if rank == full.shape[1]:
        return []
    return [
        name for name in full.columns
        if np.linalg.matrix_rank(full.drop(columns=name).to_numpy(dtype=float)) == rank
    ]


def fit_effect_regression(
    frame: pd.DataFrame, regressors: Sequence[str] = EFFECT_REGRESSORS, response: str = "effect", level: float = 0.95
) -> OLSFit:
    """OLS of the per-leg effect on an intercept and the sandwich regressors, classical and HC1 errors"""
    missing = [c for c in (response, *regressors) if c not in frame.columns]
    if missing:
        raise InputError(f"Regression frame lacks columns: {', '.join(missing)}")
    X = frame[list(regressors)].astype(float)
    y = frame[response].astype(float).to_numpy()
    if len(frame) <= len(regressors) + 1:
        raise InputError(f"{len(frame)} observations cannot identify {len(regressors) + 1} coefficients")
    bad = collinear_columns(X)
    if bad:
        logger.warning("Effect regression is rank deficient: %s", ", ".join(bad))
        raise RankDeficientError(bad)

    result = sm.OLS(y, sm.add_constant(X, has_constant="add")).fit()
    names = list(result.params.index)
    ci = result.conf_int(alpha=1 - level)
    return OLSFit(
        names=names,
        coefficients=result.params,
        se=result.bse,
        robust_se=pd.Series(result.HC1_se, index=names),
        residuals=np.asarray(result.resid, dtype=float),
        r_squared=float(result.rsquared),
        n_obs=int(result.nobs),
        conf_low=ci[0],
        conf_high=ci[1],
    )


def regression_cost_per_effect(fit: OLSFit, delta: float = 0.01, variable: str = "sandwich_cost_usd") -> float:
    """Change in the regressor needed to move the fitted effect by delta"""
    slope = fit.coef(variable)
    if abs(slope) < 1e-12:
        raise UndefinedRatioError(f"{variable} coefficient is too close to zero")
    return delta / slope


def sample_skewness(sample: Sequence[float]) -> float:
    """g1 = m3 / m2^(3/2)"""
    values = np.asarray(sample, dtype=float)
    if values.size < 3:
        raise UndefinedStatisticError(f"Skewness needs at least three values, got {values.size}")
    if np.all(values == values[0]):
        raise UndefinedStatisticError("Skewness of a constant sample is undefined")
    return float(stats.skew(values, bias=True))


def _resampled_skew(values: np.ndarray, idx: np.ndarray) -> float:
    draw = values[idx]
    if np.all(draw == draw[0]):
        return float("nan")
    return float(stats.skew(draw, bias=True))


@dataclass(frozen=True)
class SkewnessCI:
    skewness: float
    lower: float
    upper: float
    level: float
    n: int


def skewness_ci(sample: Sequence[float], level: float = 0.99, resamples: int = 999, seed: int = 0) -> SkewnessCI:
    """Percentile bootstrap interval for g1"""
    values = np.asarray(sample, dtype=float)
    point = sample_skewness(values)
    rng = np.random.default_rng(seed)
    draws = np.array([_resampled_skew(values, rng.integers(0, values.size, values.size)) for _ in range(resamples)])
    alpha = (1 - level) / 2
    lower, upper = np.nanquantile(draws, [alpha, 1 - alpha])
    return SkewnessCI(point, float(lower), float(upper), level, int(values.size))


def skewness_reduction_test(
    raw_effects: Sequence[float], residuals: Sequence[float], resamples: int = 999, seed: int = 0
) -> float:
    """One-sided paired bootstrap p-value for skew(raw) > skew(residuals); ties count half"""
    raw = np.asarray(raw_effects, dtype=float)
    res = np.asarray(residuals, dtype=float)
    if raw.shape != res.shape:
        raise InputError("raw effects and residuals must be paired")
    sample_skewness(raw)
    sample_skewness(res)
    rng = np.random.default_rng(seed)
    deltas = np.empty(resamples)
    for b in range(resamples):
        idx = rng.integers(0, raw.size, raw.size)
        deltas[b] = _resampled_skew(raw, idx) - _resampled_skew(res, idx)
    deltas = deltas[np.isfinite(deltas)]
    if deltas.size == 0:
        raise UndefinedStatisticError("Every bootstrap resample was degenerate")
    return float(np.mean(deltas < 0) + 0.5 * np.mean(deltas == 0))


def sandwich_daily_summary(enriched: Sequence[EnrichedSandwich]) -> pd.DataFrame:
    """Daily attack counts with summed vendor cost and profit"""
    rows = [
        {"date": utc_date(s.front.block_timestamp), "cost_usd": s.record.cost_usd, "profit_usd": s.record.profit_usd}
        for s in enriched
    ]
    if not rows:
        return pd.DataFrame(columns=["date", "attacks", "cost_usd", "profit_usd"])
    frame = pd.DataFrame(rows)
    summary = frame.groupby("date").agg(
        attacks=("cost_usd", "size"), cost_usd=("cost_usd", "sum"), profit_usd=("profit_usd", "sum")
    )
    return summary.reset_index()
