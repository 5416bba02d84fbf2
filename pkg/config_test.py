import json
import tempfile
import unittest
from datetime import date
from pathlib import Path

from config import IngestConfig, PipelineConfig, SynthConfig, config_hash, load_config
from errors import ConfigurationError


class ConfigTests(unittest.TestCase):
    """Run configuration parsing and identity"""

    def test_defaults(self):
        config = load_config(None)
        self.assertEqual(config.probit.buckets, 4)
        self.assertEqual(config.effects.insurance_target, 1.0)
        self.assertEqual(config.sandwich.amm_fee, 0.003)

    def test_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({
                "ingest": {"start": "2024-10-01", "end": "2024-10-31", "exclude": ["2024-10-03"]},
                "effects": {"anomalous_days": ["2024-10-03"]},
                "concentration": {"surge_days": ["2024-08-05", "2025-02-03"]},
            }), encoding="utf-8")
            config = load_config(path)
        self.assertEqual(config.ingest.exclude, (date(2024, 10, 3),))
        self.assertFalse(config.ingest.in_window(date(2024, 10, 3)))
        self.assertTrue(config.ingest.in_window(date(2024, 10, 4)))
        self.assertFalse(config.ingest.in_window(date(2024, 11, 1)))

    def test_range_ignores_exclusions(self):
        ingest = IngestConfig(start=date(2024, 10, 1), end=date(2024, 10, 31), exclude=[date(2024, 10, 3)])
        self.assertTrue(ingest.in_range(date(2024, 10, 3)))
        self.assertFalse(ingest.in_window(date(2024, 10, 3)))
        self.assertFalse(ingest.in_range(date(2024, 9, 30)))
        self.assertTrue(IngestConfig().in_range(date(1999, 1, 1)))

    def test_example_config_matches_default_formats(self):
        config = load_config(Path(__file__).resolve().parent / "config.example.json")
        for source in ("transactions", "blocks", "mempool", "labels", "sandwiches", "prices"):
            path = config.ingest.path_for(source)
            self.assertEqual(path.suffix, "." + config.ingest.format_for(source), msg=source)

    def test_bad_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            broken = Path(tmp) / "broken.json"
            broken.write_text("{", encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                load_config(broken)
            reversed_window = Path(tmp) / "window.json"
            reversed_window.write_text(json.dumps({"ingest": {"start": "2024-10-05", "end": "2024-10-01"}}), encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                load_config(reversed_window)
            with self.assertRaises(ConfigurationError):
                load_config(Path(tmp) / "missing.json")

    def test_missing_paths(self):
        ingest = IngestConfig(blocks=Path("/nonexistent/blocks.csv"))
        with self.assertRaises(ConfigurationError):
            ingest.check_paths(["blocks"])
        with self.assertRaises(ConfigurationError):
            ingest.check_paths(["prices"])

    def test_hash_ignores_output_dir(self):
        a = PipelineConfig(output_dir=Path("a"))
        b = PipelineConfig(output_dir=Path("b"))
        self.assertEqual(config_hash(a), config_hash(b))
        self.assertNotEqual(config_hash(a), config_hash(PipelineConfig(extended=True)))

    def test_synth_validation(self):
        with self.assertRaises(ValueError):
            SynthConfig(cutpoints=(0.5, 0.1, 0.8))
        with self.assertRaises(ValueError):
            SynthConfig(p_to_dex=0.6, p_to_mev=0.6)


if __name__ == "__main__":
    unittest.main()
