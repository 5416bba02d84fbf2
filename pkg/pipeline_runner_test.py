import json
import tempfile
import unittest
from dataclasses import replace
from datetime import date
from pathlib import Path

import pandas as pd

from app import main
from chain_records_test import OCT_1, address
from config import IngestConfig, PipelineConfig, SynthConfig
from data_loader import TX_COLUMNS
from errors import ConfigurationError
from pipeline_runner import DayFit, PipelineRunner, run_pipeline
from report_writer import SIGN_NOTE, ReportWriter

SYNTH = SynthConfig(seed=21, blocks_per_day=10, txs_per_block_mean=200.0, txs_per_block_min=30, sandwich_rate=1.5)


def synth_config(out_dir, days: int = 2, **overrides) -> PipelineConfig:
    end = date(2024, 10, days)
    return PipelineConfig(
        ingest=IngestConfig(start=date(2024, 10, 1), end=end),
        synth=SYNTH,
        output_dir=Path(out_dir),
        max_workers=2,
        seed=21,
        **overrides,
    )


def read_metrics(path: Path) -> pd.Series:
    return pd.read_csv(path, comment="#").set_index("metric")["value"]


class PipelineTests(unittest.TestCase):
    """End-to-end runs over synthetic and hand-written inputs"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_synthetic_report(self):
        print("\n--- Testing full synthetic report ---")
        bundle = run_pipeline(synth_config(self.out / "report"), ["synth", "report"])
        self.assertEqual(bundle.errors, [])
        self.assertTrue(bundle.complete)
        self.assertEqual(sorted(bundle.fits), [date(2024, 10, 1), date(2024, 10, 2)])
        self.assertTrue(all(fit.converged for fit in bundle.fits.values()))
        for name in ("ingest_check.csv", "fit_20241001.txt", "ame_daily.csv", "insurance_daily.csv",
                     "sandwich_tests.csv", "concentration.csv", "revenue_daily.csv"):
            self.assertIn(name, bundle.outputs)
        manifest = (self.out / "report" / "manifest.txt").read_text(encoding="utf-8")
        self.assertIn("status: complete", manifest)
        self.assertIn(bundle.config_hash, manifest)

        ame = pd.read_csv(self.out / "report" / "ame_daily.csv", comment="#")
        self.assertTrue(ame["converged"].all())
        self.assertTrue({"max_fee_per_gas", "to_mev"} <= set(ame["variable"]))
        checks = pd.read_csv(self.out / "report" / "ingest_check.csv").set_index("check")["value"]
        self.assertEqual(checks["transactions_skipped"], 0)
        print("✅ report written with", len(bundle.outputs), "files")

    def test_runs_are_reproducible(self):
        print("\n--- Testing byte-identical reruns ---")
        first = self.out / "first"
        second = self.out / "second"
        run_pipeline(synth_config(first, days=1, extended=True), ["synth", "report"])
        run_pipeline(synth_config(second, days=1, extended=True), ["synth", "report"])
        names = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
        self.assertGreater(len(names), 20)
        self.assertIn(Path("eq4_daily.csv"), names)
        self.assertIn(Path("skewness_daily.csv"), names)
        for name in names:
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), msg=str(name))
        print("✅", len(names), "files identical")

    def test_extended_model_writes_sandwich_outputs(self):
        bundle = run_pipeline(synth_config(self.out / "ext", days=1, extended=True), ["synth", "fit", "sandwich"])
        self.assertIn("filter_retention_daily.csv", bundle.outputs)
        self.assertIn("skewness_daily.csv", bundle.outputs)
        self.assertIn("eq4_daily.csv", bundle.outputs)
        self.assertNotIn("effect_regression_daily.csv", bundle.outputs)
        fit = bundle.fits[date(2024, 10, 1)]
        self.assertIn("front_run", fit.names)
        self.assertEqual(fit.separated, ())
        self.assertLess(fit.coef("front_run"), 0)
        eq4 = pd.read_csv(self.out / "ext" / "eq4_daily.csv")
        self.assertTrue({"sandwich_cost_usd", "block_sandwiches"} <= set(eq4["variable"]))
        summary = read_metrics(self.out / "ext" / "sandwich_summary.csv")
        self.assertGreater(summary["sandwich_reordering_cost_usd"], summary["backrun_fee_total_usd"])

    def test_manifest_lists_every_figure(self):
        run_pipeline(synth_config(self.out / "figs", days=1, extended=True), ["synth", "report"])
        manifest = (self.out / "figs" / "manifest.txt").read_text(encoding="utf-8")
        plots = [line.split()[0] for line in manifest.split("plots:\n")[1].splitlines() if line.startswith("  fig")]
        self.assertEqual(plots, [f"fig{i:02d}" for i in range(1, 14)])
        self.assertIn("fig11 eq4_daily.csv [written]", manifest)
        self.assertIn("fig12 eq4_daily.csv [written]", manifest)
        self.assertNotIn("not produced", manifest)

    def test_effect_files_carry_sign_note(self):
        run_pipeline(synth_config(self.out / "signs", days=1), ["synth", "fit", "effects"])
        for name in ("ame_20241001.csv", "ame_daily.csv", "ame_quantiles_daily.csv", "ame_summary.csv"):
            first_line = (self.out / "signs" / name).read_text(encoding="utf-8").splitlines()[0]
            self.assertEqual(first_line, f"# {SIGN_NOTE}", msg=name)
        summary = pd.read_csv(self.out / "signs" / "ame_summary.csv", comment="#")
        self.assertEqual(list(summary.columns[:2]), ["variable", "ame_prob"])

    def test_excluded_day_is_listed_in_revenue(self):
        config = synth_config(self.out / "excl", days=2)
        config = config.model_copy(update={"ingest": config.ingest.model_copy(update={"exclude": (date(2024, 10, 2),)})})
        bundle = run_pipeline(config, ["synth", "fit", "concentration"])
        self.assertEqual(sorted(bundle.fits), [date(2024, 10, 1)])
        summary = read_metrics(self.out / "excl" / "revenue_summary.csv")
        self.assertEqual(summary["excluded_days"], 1.0)
        self.assertEqual(summary["excluded:2024-10-02"], 1.0)
        revenue = pd.read_csv(self.out / "excl" / "revenue_daily.csv")
        self.assertEqual(revenue["date"].tolist(), ["2024-10-01"])

    def test_design_dump(self):
        bundle = run_pipeline(synth_config(self.out / "dump", days=1, dump_design=True), ["synth", "fit"])
        design = pd.read_csv(self.out / "dump" / "design_20241001.csv")
        self.assertEqual(len(design), bundle.fits[date(2024, 10, 1)].n_obs)
        self.assertIn("block_bucket", design.columns)

    def test_separated_leg_flag_marks_outputs_incomplete(self):
        config = synth_config(self.out / "sep", days=1, extended=True)
        bundle = run_pipeline(config, ["synth", "fit"])
        day = date(2024, 10, 1)
        runner = PipelineRunner(config.model_copy(update={"output_dir": self.out / "sep2"}), ["sandwich"])
        runner._fits = {day: DayFit(day, None, replace(bundle.fits[day], separated=("front_run",), converged=False))}
        runner._effect_regressions([])
        self.assertEqual(len(runner.errors), 1)
        self.assertIn("front_run", runner.errors[0])
        self.assertFalse(runner.writer.outputs["skewness_daily.csv"].complete)
        self.assertFalse(runner.writer.outputs["filter_retention_daily.csv"].complete)
        self.assertFalse(runner.writer.outputs["eq4_daily.csv"].complete)

    def test_extended_model_needs_sandwiches(self):
        config = PipelineConfig(
            ingest=IngestConfig(transactions=self.out / "t.csv", labels=self.out / "l.json"),
            extended=True,
            output_dir=self.out / "ext",
        )
        with self.assertRaises(ConfigurationError) as ctx:
            run_pipeline(config, ["effects"])
        self.assertIn("sandwiches", str(ctx.exception))

    def test_unknown_command(self):
        with self.assertRaises(ConfigurationError):
            PipelineRunner(PipelineConfig(output_dir=self.out), ["plot"])

    def test_concentration_from_files(self):
        builders = [address(11), address(11), address(12), address(13)]
        blocks = pd.DataFrame({
            "block_number": [1, 2, 3, 4],
            "timestamp": [OCT_1 + 12 * i for i in range(4)],
            "tx_count": [0, 0, 0, 0],
            "builder_addr": builders,
            "base_fee_per_gas_gwei": [15.0] * 4,
            "mev_payment_eth": [0.1, 0.2, 0.0, 0.05],
        })
        blocks.to_csv(self.out / "blocks.csv", index=False)
        (self.out / "transactions.csv").write_text(",".join(TX_COLUMNS) + "\n", encoding="utf-8")
        (self.out / "labels.json").write_text(json.dumps({a: ["MEV_BUILDER"] for a in set(builders)}), encoding="utf-8")
        config = PipelineConfig(
            ingest=IngestConfig(
                transactions=self.out / "transactions.csv",
                blocks=self.out / "blocks.csv",
                labels=self.out / "labels.json",
            ),
            output_dir=self.out / "report",
        )
        bundle = run_pipeline(config, ["concentration"])
        self.assertTrue(bundle.complete)
        metrics = read_metrics(self.out / "report" / "concentration.csv")
        self.assertEqual(metrics["hhi_all_blocks"], 3750.0)
        self.assertEqual(metrics["mev_block_share"], 1.0)
        self.assertEqual(metrics["top3_mev_share"], 1.0)


class ReportWriterTests(unittest.TestCase):

    def test_rewrite_keeps_incomplete_mark(self):
        with tempfile.TemporaryDirectory() as tmp:
            writer = ReportWriter(Path(tmp))
            writer.mark_incomplete("skewness_daily.csv", "2024-10-03: front_run separated")
            writer.write_frame("skewness_daily.csv", pd.DataFrame({"date": ["2024-10-01"], "skewness": [0.4]}))
            entry = writer.outputs["skewness_daily.csv"]
            self.assertFalse(entry.complete)
            self.assertEqual(entry.rows, 1)
            self.assertIn("front_run", entry.note)
            writer.write_manifest("abc")
            manifest = (Path(tmp) / "manifest.txt").read_text(encoding="utf-8")
            self.assertIn("status: incomplete", manifest)
            self.assertIn("skewness_daily.csv  rows=1  INCOMPLETE", manifest)

    def test_note_header_reads_back(self):
        with tempfile.TemporaryDirectory() as tmp:
            writer = ReportWriter(Path(tmp))
            path = writer.write_frame("ame_x.csv", pd.DataFrame({"variable": ["to_dex"], "ame_prob": [-0.1]}), note=SIGN_NOTE)
            self.assertTrue(path.read_text(encoding="utf-8").startswith("# effects are changes"))
            frame = pd.read_csv(path, comment="#")
            self.assertEqual(frame["ame_prob"].tolist(), [-0.1])


class AppTests(unittest.TestCase):

    def test_main_exclude_and_dump_flags(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["synth", "fit", "concentration", "--from", "2024-10-01", "--to", "2024-10-02",
                         "--exclude", "2024-10-02", "--dump-design", "--seed", "3", "--out", tmp])
            self.assertEqual(code, 0)
            self.assertTrue((Path(tmp) / "design_20241001.csv").exists())
            self.assertFalse((Path(tmp) / "fit_20241002.txt").exists())
            self.assertEqual(read_metrics(Path(tmp) / "revenue_summary.csv")["excluded:2024-10-02"], 1.0)

    def test_main_runs_synthetic_fit(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["synth", "fit", "--from", "2024-10-01", "--to", "2024-10-01", "--seed", "3", "--out", tmp])
            self.assertEqual(code, 0)
            self.assertTrue((Path(tmp) / "fit_20241001.txt").exists())

    def test_unknown_command_exits(self):
        with self.assertRaises(SystemExit):
            main(["plot"])

    def test_bad_window(self):
        self.assertEqual(main(["fit", "--from", "2024-10-05", "--to", "2024-10-01"]), 2)


if __name__ == "__main__":
    unittest.main()
