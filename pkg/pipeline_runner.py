"""Runs the analysis stages over a window of UTC days and writes the report directory."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from chain_records import TxRecord, group_by_day, validate_dataset
from config import PipelineConfig, SOURCES, config_hash
from data_loader import DataBundle, load_bundle, mempool_join_rate
from errors import ConfigurationError, InputError, StageError
from marginal_effects import (
    average_marginal_effects, gas_for_probability_gain, insurance_summary, per_observation_effects,
    quantile_marginal_effects, reordering_insurance,
)
from market_concentration import (
    builder_shares, concentration_ratio, daily_mev_share, herfindahl_counts, mev_block_share, mev_only_counts,
    mev_only_shares, revenue_summary, shares_frame, validator_revenue,
)
from position_builder import (
    DayData, DesignMatrix, DesignRow, build_design_rows, design_matrix, design_rows_frame, regressor_names,
)
from probit_model import ProbitFit, fit_design
from report_writer import SIGN_NOTE, ReportWriter, day_stamp, fit_report_lines
from sandwich_analyzer import (
    EnrichedSandwich, backrun_fee_total, backrun_gas_test, backrun_payment_share, effect_regression_frame,
    filter_high_effects, fit_effect_regression, histogram, join_sandwiches, position_displacement,
    sandwich_daily_summary, sandwich_reordering_cost, skewness_ci, skewness_reduction_test,
)
from synthetic_generator import day_seed, write_synthetic_bundle

logger = logging.getLogger(__name__)

T = TypeVar("T")

COMMANDS = ("ingest-check", "fit", "effects", "insurance", "sandwich", "concentration", "synth", "report")
ANALYSES = ("ingest-check", "fit", "effects", "insurance", "sandwich", "concentration")
GAINS = (0.01, 0.5)

LEG_FLAGS = ("front_run", "back_run")

STAGE_SOURCES: Dict[str, Tuple[str, ...]] = {
    "fit": ("transactions", "labels"),
    "effects": ("transactions", "labels", "prices"),
    "insurance": ("transactions", "labels", "prices"),
    "sandwich": ("transactions", "blocks", "sandwiches", "prices"),
    "concentration": ("transactions", "blocks", "labels"),
}


@dataclass
class DayFit:
    day: date
    matrix: DesignMatrix
    fit: ProbitFit
    rows: List[DesignRow] = field(default_factory=list)


@dataclass
class ReportBundle:
    out_dir: Path
    config_hash: str
    outputs: Dict[str, int] = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    fits: Dict[date, ProbitFit] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.errors


def _stage_seed(seed: int, day: date) -> int:
    return int(day_seed(seed, day).generate_state(1)[0])


class PipelineRunner:
    """One run over one config; stages share the loaded data and the per-day fits"""

    def __init__(self, config: PipelineConfig, commands: Sequence[str],
                 progress: Optional[Callable[[str], None]] = None):
        unknown = [c for c in commands if c not in COMMANDS]
        if unknown:
            raise ConfigurationError(f"Unknown command(s): {', '.join(unknown)}")
        self.config = config
        self.hash = config_hash(config)
        requested = set(commands) or {"report"}
        if "report" in requested:
            requested |= set(ANALYSES)
        self.commands = [c for c in COMMANDS if c in requested and c != "report"]
        self.progress = progress or (lambda message: None)
        self.writer = ReportWriter(config.output_dir)
        self.errors: List[str] = []
        self.data = DataBundle()
        self.days: Dict[date, List[TxRecord]] = {}
        self._fits: Optional[Dict[date, DayFit]] = None

    # --- plumbing ---

    def _fan_out(self, stage: str, days: Sequence[date], work: Callable[[date], T]) -> Dict[date, T]:
        """Run `work` per day on worker threads; results come back in date order, failures are recorded"""
        with ThreadPoolExecutor(max_workers=self.config.max_workers) as pool:
            futures = {d: pool.submit(work, d) for d in days}
        results: Dict[date, T] = {}
        for d in sorted(futures):
            try:
                results[d] = futures[d].result()
            except Exception as e:
                err = StageError(stage, d.isoformat(), e)
                logger.error("%s", err)
                self.errors.append(str(err))
        return results

    def _record_failure(self, stage: str, e: Exception, outputs: Sequence[str] = ()) -> None:
        err = StageError(stage, None, e)
        logger.error("%s", err)
        self.errors.append(str(err))
        for name in outputs:
            self.writer.mark_incomplete(name, str(e))

    def _required_sources(self) -> List[str]:
        ingest = self.config.ingest
        needed = set()
        for command in self.commands:
            needed.update(STAGE_SOURCES.get(command, ()))
        if "ingest-check" in self.commands:
            needed.update(s for s in SOURCES if ingest.path_for(s) is not None)
        if needed & {"transactions"} and ingest.mempool is not None:
            needed.add("mempool")
        if self.config.extended and set(self.commands) & {"fit", "effects", "insurance", "sandwich"}:
            if ingest.sandwiches is None:
                raise ConfigurationError("Missing input: the extended model needs a 'sandwiches' file")
            needed.add("sandwiches")
        if "sandwich" in self.commands and self.config.extended:
            needed.add("labels")
        return [s for s in SOURCES if s in needed]

    def _synthesize(self) -> None:
        ingest = self.config.ingest
        days = (ingest.end - ingest.start).days + 1 if ingest.start and ingest.end else 1
        synth = self.config.synth
        if ingest.start and ingest.start != synth.start_date:
            synth = synth.model_copy(update={"start_date": ingest.start})
        target = Path(self.config.output_dir) / "synthetic"
        generated = write_synthetic_bundle(synth, target, days=days, seed=self.config.seed,
                                           max_workers=self.config.max_workers)
        self.config = self.config.model_copy(update={
            "ingest": generated.model_copy(update={"exclude": ingest.exclude})
        })
        self.progress(f"synth: wrote {days} day(s) to {target}")

    def _fits_by_day(self) -> Dict[date, DayFit]:
        if self._fits is not None:
            return self._fits
        probit = self.config.probit
        names = regressor_names(probit.buckets, self.config.extended)

        def work(day: date) -> DayFit:
            rows = build_design_rows(
                DayData(day, self.days[day], self.data.mempool),
                self.data.labels,
                self.data.sandwiches,
                extended=self.config.extended,
                buckets=probit.buckets,
            )
            matrix = design_matrix(rows, names)
            return DayFit(day, matrix, fit_design(matrix, probit), rows if self.config.dump_design else [])

        self._fits = self._fan_out("fit", sorted(self.days), work)
        return self._fits

    # --- stages ---

    def ingest_check(self) -> None:
        report = validate_dataset(self.data.transactions, self.data.blocks)
        rows = [{"check": f"{s}_loaded", "value": self._source_count(s)} for s in self.data.loaded]
        rows += [{"check": f"{s}_skipped", "value": n} for s, n in sorted(self.data.skipped.items())]
        rows += [{"check": k, "value": v} for k, v in report.as_rows()]
        if self.data.has("mempool"):
            rows.append({"check": "mempool_join_rate", "value": mempool_join_rate(self.data.transactions, self.data.mempool)})
        rows.append({"check": "days_in_window", "value": len(self.days)})
        self.writer.write_frame("ingest_check.csv", pd.DataFrame(rows, columns=["check", "value"]))
        self.progress(f"ingest-check: {report.clean_transactions} clean transactions, {report.n_violations} problems")

    def _source_count(self, source: str) -> int:
        value = getattr(self.data, source)
        return len(value)

    def fit(self) -> None:
        fits = self._fits_by_day()
        for day, day_fit in fits.items():
            self.writer.write_text(f"fit_{day_stamp(day)}.txt", fit_report_lines(day_fit.fit, day))
            if self.config.dump_design:
                self.writer.write_frame(f"design_{day_stamp(day)}.csv", design_rows_frame(day_fit.rows))
        converged = sum(1 for f in fits.values() if f.fit.converged)
        self.progress(f"fit: {len(fits)} day(s), {converged} converged")

    def effects(self) -> None:
        fits = self._fits_by_day()
        settings = self.config.effects

        def work(day: date):
            f = fits[day]
            table = average_marginal_effects(f.fit, f.matrix, self.data.prices, day, settings.continuous)
            quantiles = quantile_marginal_effects(f.fit, f.matrix, settings.quantiles, settings.continuous)
            gains = []
            for gain in GAINS:
                gains.append({
                    "gain": gain,
                    "mean_gas": gas_for_probability_gain(table, gain, "mean"),
                    "median_gas": gas_for_probability_gain(table, gain, "median"),
                })
            return table, quantiles, gains

        results = self._fan_out("effects", sorted(fits), work)
        daily, quantile_rows, gain_rows = [], [], []
        for day, (table, quantiles, gains) in results.items():
            frame = table.to_frame()
            self.writer.write_frame(f"ame_{day_stamp(day)}.csv", frame, note=SIGN_NOTE)
            converged = fits[day].fit.converged
            daily.append(frame.assign(date=day, anomalous=day in settings.anomalous_days, converged=converged))
            quantile_rows.append(quantiles.reset_index().assign(date=day))
            gain_rows.extend({"date": day, **g} for g in gains)
        if not results:
            return
        ame = pd.concat(daily, ignore_index=True)
        self.writer.write_frame("ame_daily.csv", ame[["date", "variable", "ame_prob", "gas_equiv", "usd", "anomalous", "converged"]],
                                note=SIGN_NOTE)
        q = pd.concat(quantile_rows, ignore_index=True)
        self.writer.write_frame("ame_quantiles_daily.csv", q[["date", *[c for c in q.columns if c != "date"]]], note=SIGN_NOTE)
        self.writer.write_frame("gas_for_gain_daily.csv", pd.DataFrame(gain_rows, columns=["date", "gain", "mean_gas", "median_gas"]))

        # summaries use ordinary days whose fit converged
        usual = ame[~ame["anomalous"] & ame["converged"]]
        summary = usual.groupby("variable", sort=False)[["ame_prob", "gas_equiv", "usd"]].mean().reset_index()
        self.writer.write_frame("ame_summary.csv", summary, note=SIGN_NOTE)
        self.progress(f"effects: {len(results)} day(s)")

    def insurance(self) -> None:
        fits = self._fits_by_day()
        settings = self.config.effects

        def work(day: date):
            f = fits[day]
            return reordering_insurance(f.fit, f.matrix, self.data.prices, day, settings.insurance_target, settings.effect_floor)

        results = self._fan_out("insurance", sorted(fits), work)
        rows = [
            {
                "date": day,
                "n_insured": r.n_insured,
                "excluded": r.excluded,
                "mean_tx_gas": r.mean_gas,
                "aggregate_gas": r.aggregate_gas,
                "aggregate_usd": r.aggregate_usd,
                "anomalous": day in settings.anomalous_days,
            }
            for day, r in results.items()
        ]
        daily = pd.DataFrame(rows, columns=["date", "n_insured", "excluded", "mean_tx_gas", "aggregate_gas", "aggregate_usd", "anomalous"])
        self.writer.write_frame("insurance_daily.csv", daily)
        summary = insurance_summary(daily, settings.anomalous_days)
        self.writer.write_frame("insurance_summary.csv", pd.DataFrame(list(summary.items()), columns=["metric", "value"]))
        self.progress(f"insurance: {len(rows)} day(s), mean daily USD {summary['mean_daily_usd']:.2f}")

    def sandwich(self) -> None:
        settings = self.config.sandwich
        window_txs = [tx for day in sorted(self.days) for tx in self.days[day]]
        joined = join_sandwiches(self.data.sandwiches, window_txs, self.data.blocks, self.data.mempool)
        enriched = joined.records

        tests = []
        try:
            t = backrun_gas_test(enriched, window_txs, settings.ttest_alternative)
            tests.append({"test": "backrun_gas_welch", "group": "back_vs_rest", **t.as_row()})
        except Exception as e:
            self._record_failure("sandwich", e, ["sandwich_tests.csv"])
        for _, row in position_displacement(enriched).iterrows():
            tests.append({
                "test": "displacement_paired", "group": row["leg"], "mean_a": row["mempool_mean"],
                "mean_b": row["block_mean"], "n_a": row["n"], "n_b": row["n"], "t_stat": row["t_stat"],
                "p_value": row["p_value"], "alternative": "two-sided",
            })
        columns = ["test", "group", "mean_a", "mean_b", "sd_a", "sd_b", "n_a", "n_b", "t_stat", "p_value", "df", "alternative"]
        self.writer.write_frame("sandwich_tests.csv", pd.DataFrame(tests, columns=columns))
        self.writer.write_frame("sandwich_daily.csv", sandwich_daily_summary(enriched))
        self._sandwich_summary(enriched, joined.dropped)

        if self.config.extended:
            self._effect_regressions(enriched)
        else:
            logger.info("Effect regression and skewness tests need the extended model; skipped")
        self.progress(f"sandwich: {len(enriched)} joined, {joined.dropped} dropped")

    def _sandwich_summary(self, enriched: Sequence[EnrichedSandwich], dropped: int) -> None:
        rows = [("joined", float(len(enriched))), ("dropped", float(dropped))]
        if enriched:
            mean_back = float(np.mean([s.back.gas_fee_eth for s in enriched]))
            days = sorted({s.day for s in enriched if s.day in self.data.prices})
            if days:
                eth_usd = float(np.mean([self.data.prices.get(d).eth_close_usd for d in days]))
                rows.append(("backrun_fee_total_usd", backrun_fee_total(len(enriched), mean_back, eth_usd)))
                mean_front = float(np.mean([s.front.gas_fee_eth for s in enriched]))
                rows.append(("sandwich_reordering_cost_usd",
                             sandwich_reordering_cost(len(enriched), mean_front * eth_usd, mean_back * eth_usd)))
            rows.append(("mean_backrun_fee_eth", mean_back))
            payments = [s.mev_payment for s in enriched if s.mev_payment > 0]
            if payments:
                rows.append(("backrun_payment_share", backrun_payment_share(mean_back, float(np.mean(payments)))))
        self.writer.write_frame("sandwich_summary.csv", pd.DataFrame(rows, columns=["metric", "value"]))

    def _leg_effects(self, day_fit: DayFit) -> Dict[str, float]:
        """Front legs carry the front-run effect, back legs the back-run effect"""
        names = day_fit.fit.names
        if "front_run" not in names and "back_run" not in names:
            return {}
        effects = per_observation_effects(day_fit.fit, day_fit.matrix, self.config.effects.continuous)
        out = {}
        for leg in LEG_FLAGS:
            if leg not in names:
                continue
            flags = day_fit.matrix.column(leg)
            for i, tx_hash in enumerate(day_fit.matrix.hashes):
                if flags[i] == 1:
                    out[tx_hash] = float(effects[leg][i])
        return out

    def _effect_regressions(self, enriched: Sequence[EnrichedSandwich]) -> None:
        settings = self.config.sandwich
        fits = self._fits_by_day()
        frames: Dict[date, pd.DataFrame] = {}
        retention, hist = [], []
        for day, day_fit in fits.items():
            separated = [leg for leg in LEG_FLAGS if leg in day_fit.fit.separated]
            if separated:
                # effects of a separated flag are pinned at the boundary, not estimated
                e = InputError(f"{day.isoformat()}: {', '.join(separated)} separated in the ordered probit fit")
                self._record_failure("effect regression", e, ["eq4_daily.csv", "skewness_daily.csv", "filter_retention_daily.csv"])
                continue
            frame = effect_regression_frame([s for s in enriched if s.day == day], self._leg_effects(day_fit))
            filtered = filter_high_effects(frame["effect"].to_numpy(), settings.effect_threshold)
            retention.append({"date": day, "n": len(frame), "kept": int(filtered.mask.sum()), "retention": filtered.retention})
            hist.append(histogram(filtered.kept, settings.histogram_bins).assign(date=day))
            frames[day] = frame[filtered.mask]
        self.writer.write_frame("filter_retention_daily.csv", pd.DataFrame(retention, columns=["date", "n", "kept", "retention"]))
        if hist:
            h = pd.concat(hist, ignore_index=True)
            self.writer.write_frame("filtered_effects_hist.csv", h[["date", "bin_left", "bin_right", "count"]])

        if settings.pooled_regression:
            groups = {"pooled": pd.concat(frames.values(), ignore_index=True)} if frames else {}
        else:
            groups = {d.isoformat(): f for d, f in frames.items()}

        coef_rows, skew_rows = [], []
        for label, frame in groups.items():
            try:
                ols = fit_effect_regression(frame)
            except Exception as e:
                self._record_failure(f"effect regression ({label})", e, ["eq4_daily.csv"])
                continue
            table = ols.to_frame().reset_index()
            coef_rows.append(table.assign(date=label, n_obs=ols.n_obs, r_squared=ols.r_squared))

            seed = _stage_seed(self.config.seed, date.fromisoformat(label)) if label != "pooled" else self.config.seed
            raw = frame["effect"].to_numpy()
            try:
                p = skewness_reduction_test(raw, ols.residuals, settings.bootstrap_resamples, seed)
                for series, values in (("raw", raw), ("residual", ols.residuals)):
                    ci = skewness_ci(values, settings.ci_level, settings.bootstrap_resamples, seed)
                    skew_rows.append({"date": label, "series": series, "skewness": ci.skewness,
                                      "lower": ci.lower, "upper": ci.upper, "reduction_p": p})
            except Exception as e:
                self._record_failure(f"skewness ({label})", e, ["skewness_daily.csv"])

        if coef_rows:
            regression = pd.concat(coef_rows, ignore_index=True)
            self.writer.write_frame("eq4_daily.csv", regression[["date", "variable", "coef", "se", "robust_se", "ci_low", "ci_high", "n_obs", "r_squared"]])
        self.writer.write_frame("skewness_daily.csv", pd.DataFrame(
            skew_rows, columns=["date", "series", "skewness", "lower", "upper", "reduction_p"]))

    def concentration(self) -> None:
        ingest = self.config.ingest
        settings = self.config.concentration
        blocks = [b for b in self.data.blocks if ingest.in_window(b.day)]
        labels = self.data.labels

        shares = builder_shares(blocks, labels)
        self.writer.write_frame("shares.csv", shares_frame(shares))
        metrics = [("blocks", float(len(blocks))), ("mev_block_share", mev_block_share(blocks, labels))]
        if shares:
            metrics.append(("hhi_all_blocks", herfindahl_counts(s.block_count for s in shares.values())))
            mev = mev_only_shares(shares)
            if mev:
                metrics.append(("hhi_mev_blocks", herfindahl_counts(mev_only_counts(shares))))
                metrics.append((f"top{settings.top_k}_mev_share", concentration_ratio(mev, settings.top_k)))
        self.writer.write_frame("concentration.csv", pd.DataFrame(metrics, columns=["metric", "value"]))
        self.writer.write_frame("mev_share_daily.csv", daily_mev_share(blocks, labels))

        # revenue covers the whole date range so excluded days are listed as exclusions
        ranged_blocks = [b for b in self.data.blocks if ingest.in_range(b.day)]
        ranged_txs = [tx for tx in self.data.transactions if ingest.in_range(tx.day)]
        exclusions = sorted(set(settings.surge_days) | set(ingest.exclude))
        revenue = validator_revenue(ranged_blocks, ranged_txs, exclusions=exclusions)
        self.writer.write_frame("revenue_daily.csv", revenue.daily)
        summary = [(k, float(v)) for k, v in revenue_summary(revenue).items()]
        summary.append(("excluded_days", float(len(revenue.excluded))))
        summary.extend((f"excluded:{d.isoformat()}", 1.0) for d in revenue.excluded)
        self.writer.write_frame("revenue_summary.csv", pd.DataFrame(summary, columns=["metric", "value"]))
        self.progress(f"concentration: {len(blocks)} blocks, {len(shares)} builders")

    # --- entry ---

    def run(self) -> ReportBundle:
        if "synth" in self.commands:
            self._synthesize()
        sources = self._required_sources()
        if sources:
            self.data = load_bundle(self.config.ingest, sources, self.config.max_workers)
        self.days = {d: txs for d, txs in group_by_day(self.data.transactions).items() if self.config.ingest.in_window(d)}
        for d in self.config.ingest.exclude:
            logger.info("Excluding %s from the analysis window", d)

        stages = {
            "ingest-check": self.ingest_check,
            "fit": self.fit,
            "effects": self.effects,
            "insurance": self.insurance,
            "sandwich": self.sandwich,
            "concentration": self.concentration,
        }
        for command in self.commands:
            if command not in stages:
                continue
            try:
                stages[command]()
            except Exception as e:
                self._record_failure(command, e)

        notes = []
        if self.config.effects.anomalous_days:
            notes.append("anomalous days kept in daily files, left out of summaries: "
                         + ",".join(d.isoformat() for d in self.config.effects.anomalous_days))
        notes.append(f"t-tests: Welch, {self.config.sandwich.ttest_alternative}; "
                     "skewness reduction: paired bootstrap, ties counted half")
        self.writer.write_manifest(self.hash, self.errors, notes)
        fits = {d: f.fit for d, f in (self._fits or {}).items()}
        outputs = {name: entry.rows for name, entry in self.writer.outputs.items()}
        return ReportBundle(self.config.output_dir, self.hash, outputs, list(self.errors), fits)


def run_pipeline(config: PipelineConfig, commands: Sequence[str] = ("report",),
                 progress: Optional[Callable[[str], None]] = None) -> ReportBundle:
    return PipelineRunner(config, commands, progress).run()

