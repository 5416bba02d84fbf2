"""Marginal effects on first-quartile placement and their gas / USD equivalents.

Effects are reported as the change in P(bucket = 1): a positive effect means the characteristic
pulls a transaction to the front of the block, which corresponds to a negative probit coefficient.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from chain_records import PriceTable
from config import CONTINUOUS_REGRESSOR, GWEI_PER_ETH
from errors import InputError, UndefinedRatioError
from position_builder import DesignMatrix, DesignRow
from probit_model import ProbitFit

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-12

Row = Union[DesignRow, Sequence[float], np.ndarray]


def _row_vector(fit: ProbitFit, row: Row) -> np.ndarray:
    if isinstance(row, DesignRow):
        return np.array([row.value(n) for n in fit.names], dtype=float)
    x = np.asarray(row, dtype=float)
    if x.shape != (len(fit.names),):
        raise InputError(f"Row has {x.size} values, fit expects {len(fit.names)}")
    return x


def _fit_columns(fit: ProbitFit, data: DesignMatrix) -> np.ndarray:
    missing = [n for n in fit.names if n not in data.names]
    if missing:
        raise InputError(f"Design lacks fitted regressors: {', '.join(missing)}")
    return data.X[:, [data.names.index(n) for n in fit.names]]


def first_quartile_prob(fit: ProbitFit, row: Row) -> float:
    x = _row_vector(fit, row)
    return float(norm.cdf(fit.cutpoints[0] - x @ fit.beta))


def marginal_effect_continuous(fit: ProbitFit, row: Row, var: str) -> float:
    """dP(q=1)/dx_var = -b_var * phi(k1 - x'b)"""
    x = _row_vector(fit, row)
    return float(-fit.coef(var) * norm.pdf(fit.cutpoints[0] - x @ fit.beta))


def marginal_effect_discrete(fit: ProbitFit, row: Row, var: str) -> float:
    """P(q=1 | var=1) - P(q=1 | var=0), everything else held at the row's values"""
    x = _row_vector(fit, row)
    i = fit.names.index(var)
    on, off = x.copy(), x.copy()
    on[i], off[i] = 1.0, 0.0
    k1 = fit.cutpoints[0]
    return float(norm.cdf(k1 - on @ fit.beta) - norm.cdf(k1 - off @ fit.beta))


def category_marginal_effects(fit: ProbitFit, row: Row, var: str) -> np.ndarray:
    """Derivative of every bucket probability with respect to x_var; the vector sums to zero"""
    x = _row_vector(fit, row)
    edges = np.concatenate(([-np.inf], fit.cutpoints, [np.inf])) - x @ fit.beta
    dens = norm.pdf(edges)
    return -fit.coef(var) * np.diff(dens)


def per_observation_effects(
    fit: ProbitFit, data: DesignMatrix, continuous: Iterable[str] = (CONTINUOUS_REGRESSOR,)
) -> Dict[str, np.ndarray]:
    """Vectorised per-row effects: derivative rule for continuous regressors, 0->1 change for dummies"""
    X = _fit_columns(fit, data)
    index = X @ fit.beta
    k1 = fit.cutpoints[0]
    continuous = set(continuous)
    effects: Dict[str, np.ndarray] = {}
    for i, name in enumerate(fit.names):
        b = fit.beta[i]
        if name in continuous:
            effects[name] = -b * norm.pdf(k1 - index)
        else:
            base = index - b * X[:, i]
            effects[name] = norm.cdf(k1 - base - b) - norm.cdf(k1 - base)
    return effects


def gas_equivalent(fit: ProbitFit, var: str) -> float:
    """|b_var| / |b_max_fee|: gas units buying the same placement shift as the characteristic"""
    b_gas = fit.coef(CONTINUOUS_REGRESSOR)
    if abs(b_gas) < RATIO_FLOOR:
        raise UndefinedRatioError(f"max fee coefficient {b_gas:.3g} is too close to zero")
    return abs(fit.coef(var)) / abs(b_gas)


def usd_cost(gas_units: float, prices: PriceTable, day: date) -> float:
    row = prices.get(day)
    return gas_units * row.avg_gas_price / GWEI_PER_ETH * row.eth_close_usd


@dataclass
class EffectsTable:
    variables: List[str]
    ame: Dict[str, float]
    gas_equivalent: Dict[str, float]
    usd_cost: Dict[str, float]
    per_observation: Dict[str, np.ndarray] = field(default_factory=dict)
    day: Optional[date] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "variable": self.variables,
            "ame_prob": [self.ame[v] for v in self.variables],
            "gas_equiv": [self.gas_equivalent[v] for v in self.variables],
            "usd": [self.usd_cost[v] for v in self.variables],
        })


def average_marginal_effects(
    fit: ProbitFit,
    rows: Union[DesignMatrix, Sequence[DesignRow]],
    prices: Optional[PriceTable] = None,
    day: Optional[date] = None,
    continuous: Iterable[str] = (CONTINUOUS_REGRESSOR,),
) -> EffectsTable:
    data = rows if isinstance(rows, DesignMatrix) else _as_matrix(fit, rows)
    per_obs = per_observation_effects(fit, data, continuous)
    ame = {name: float(np.mean(values)) if values.size else float("nan") for name, values in per_obs.items()}

    gas, usd = {}, {}
    for name in fit.names:
        try:
            gas[name] = gas_equivalent(fit, name)
        except (UndefinedRatioError, ValueError):
            gas[name] = float("nan")
        if prices is not None and day is not None and math.isfinite(gas[name]):
            usd[name] = usd_cost(gas[name], prices, day)
        else:
            usd[name] = float("nan")
    return EffectsTable(list(fit.names), ame, gas, usd, per_obs, day)


def _as_matrix(fit: ProbitFit, rows: Sequence[DesignRow]) -> DesignMatrix:
    X = np.array([[r.value(n) for n in fit.names] for r in rows], dtype=float).reshape(len(rows), len(fit.names))
    y = np.array([r.block_bucket for r in rows], dtype=int)
    return DesignMatrix(names=tuple(fit.names), X=X, y=y, buckets=fit.buckets)


def nearest_rank_quantile(values: Sequence[float], q: float) -> float:
    ordered = np.sort(np.asarray(values, dtype=float))
    if ordered.size == 0:
        return float("nan")
    rank = max(1, math.ceil(q * ordered.size - 1e-12))
    return float(ordered[min(rank, ordered.size) - 1])


def effect_quantiles(per_observation: Mapping[str, np.ndarray], quantiles: Sequence[float]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {f"q{q:g}": [nearest_rank_quantile(v, q) for v in per_observation.values()] for q in quantiles},
        index=list(per_observation),
    )
    frame.index.name = "variable"
    return frame


def quantile_marginal_effects(
    fit: ProbitFit,
    rows: Union[DesignMatrix, Sequence[DesignRow]],
    quantiles: Sequence[float] = (0.1, 0.5, 0.9),
    continuous: Iterable[str] = (CONTINUOUS_REGRESSOR,),
) -> pd.DataFrame:
    data = rows if isinstance(rows, DesignMatrix) else _as_matrix(fit, rows)
    return effect_quantiles(per_observation_effects(fit, data, continuous), quantiles)


def gas_for_probability_gain(table: EffectsTable, gain: float, statistic: str = "median") -> float:
    """Gas needed to lift first-quartile probability by `gain`, at the mean or median max-fee effect"""
    effects = table.per_observation.get(CONTINUOUS_REGRESSOR)
    if effects is None or effects.size == 0:
        raise InputError("Effects table has no per-row max fee effects")
    if statistic == "median":
        unit = float(np.median(effects))
    elif statistic == "mean":
        unit = float(np.mean(effects))
    else:
        raise InputError(f"Unknown statistic {statistic!r}")
    if abs(unit) < RATIO_FLOOR:
        raise UndefinedRatioError("max fee effect is too close to zero")
    return gain / abs(unit)


@dataclass
class InsuranceResult:
    per_tx_gas: np.ndarray
    per_tx_usd: np.ndarray
    aggregate_gas: float
    aggregate_usd: float
    excluded: int = 0
    day: Optional[date] = None

    @property
    def n_insured(self) -> int:
        return int(self.per_tx_gas.size)

    @property
    def mean_gas(self) -> float:
        return float(self.per_tx_gas.mean()) if self.per_tx_gas.size else float("nan")

    @property
    def mean_usd(self) -> float:
        return float(self.per_tx_usd.mean()) if self.per_tx_usd.size else float("nan")


def reordering_insurance(
    fit: ProbitFit,
    rows: Union[DesignMatrix, Sequence[DesignRow]],
    prices: PriceTable,
    day: date,
    target: float = 1.0,
    floor: float = RATIO_FLOOR,
) -> InsuranceResult:
    """Extra gas per transaction to reach `target` first-quartile probability, priced in USD"""
    data = rows if isinstance(rows, DesignMatrix) else _as_matrix(fit, rows)
    X = _fit_columns(fit, data)
    z = fit.cutpoints[0] - X @ fit.beta
    prob = norm.cdf(z)
    me_gas = np.abs(fit.coef(CONTINUOUS_REGRESSOR) * norm.pdf(z))
    shortfall = np.maximum(target - prob, 0.0)

    needed = shortfall > 0
    usable = ~needed | (me_gas >= floor)
    excluded = int(np.count_nonzero(~usable))
    if excluded:
        logger.warning("Insurance for %s: %d rows excluded, max fee effect below %g", day, excluded, floor)

    gas = np.zeros(int(usable.sum()))
    keep_needed = needed[usable]
    gas[keep_needed] = shortfall[usable][keep_needed] / me_gas[usable][keep_needed]
    price = prices.get(day)
    per_usd = gas * price.avg_gas_price / GWEI_PER_ETH * price.eth_close_usd
    total_gas = float(gas.sum())
    return InsuranceResult(
        per_tx_gas=gas,
        per_tx_usd=per_usd,
        aggregate_gas=total_gas,
        aggregate_usd=usd_cost(total_gas, prices, day),
        excluded=excluded,
        day=day,
    )


def insurance_summary(daily: pd.DataFrame, exclude: Iterable[date] = ()) -> Dict[str, float]:
    """Window-level insurance figures over the non-excluded days of a daily series"""
    excluded = {pd.Timestamp(d).date() for d in exclude}
    kept = daily[[pd.Timestamp(d).date() not in excluded for d in daily["date"]]]
    if kept.empty:
        return {"days": 0, "mean_daily_gas": float("nan"), "mean_daily_usd": float("nan"),
                "total_gas": 0.0, "total_usd": 0.0, "mean_tx_gas": float("nan")}
    return {
        "days": int(len(kept)),
        "mean_daily_gas": float(kept["aggregate_gas"].mean()),
        "mean_daily_usd": float(kept["aggregate_usd"].mean()),
        "total_gas": float(kept["aggregate_gas"].sum()),
        "total_usd": float(kept["aggregate_usd"].sum()),
        "mean_tx_gas": float(kept["mean_tx_gas"].mean()),
    }
