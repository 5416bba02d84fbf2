import json
import tempfile
import unittest
from datetime import date
from pathlib import Path

from chain_records import AddressLabel
from config import IngestConfig
from data_loader import (
    TX_COLUMNS, load_blocks, load_bundle, load_labels, load_mempool, load_prices, load_sandwiches,
    load_transactions, mempool_join_rate,
)
from errors import ConfigurationError, MissingPriceError


def tx_hash(i: int) -> str:
    return f"0x{i:064x}"


def address(i: int) -> str:
    return f"0x{i:040x}"


def tx_line(i: int, index: int, gas_used: int = 21000, to_addr: str = None) -> str:
    to_addr = address(500 + i) if to_addr is None else to_addr
    return f"{tx_hash(i)},100,{index},{address(i)},{to_addr},30.0,2.0,17.0,{gas_used},1000,1727740800"


class LoaderTests(unittest.TestCase):
    """Loaders read fixture files written into a temp directory"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        return path

    def tx_file(self, lines) -> Path:
        return self.write("transactions.csv", ",".join(TX_COLUMNS) + "\n" + "\n".join(lines) + "\n")

    def test_transactions_sorted_by_block_index(self):
        path = self.tx_file([tx_line(1, 2), tx_line(2, 0), tx_line(3, 1)])
        result = load_transactions(path)
        self.assertEqual([tx.block_index for tx in result], [0, 1, 2])
        self.assertEqual(result.skipped, 0)
        self.assertEqual(result.rows_read, 3)

    def test_negative_gas_is_skipped(self):
        path = self.tx_file([tx_line(1, 0), tx_line(2, 1, gas_used=-5)])
        result = load_transactions(path)
        self.assertEqual(len(result), 1)
        self.assertEqual(result.skipped, 1)

    def test_contract_creation_has_no_recipient(self):
        path = self.tx_file([tx_line(1, 0, to_addr="")])
        self.assertIsNone(load_transactions(path)[0].to_addr)

    def test_missing_column_is_a_configuration_error(self):
        path = self.write("bad.csv", "tx_hash,block_number\n" + tx_hash(1) + ",1\n")
        with self.assertRaises(ConfigurationError):
            load_transactions(path)

    def test_mempool_keeps_earliest_sighting(self):
        lines = [
            json.dumps({"tx_hash": tx_hash(1), "first_seen_ms": 100, "region": "us-east"}),
            json.dumps({"tx_hash": tx_hash(1), "first_seen_ms": 90, "region": "eu"}),
        ]
        result = load_mempool(self.write("mempool.jsonl", "\n".join(lines) + "\n"))
        self.assertEqual(len(result), 1)
        self.assertEqual(result[0].first_seen, 90)
        self.assertEqual(result[0].region, "eu")
        self.assertEqual(result.rows_read, 2)

    def test_mempool_empty_file(self):
        self.assertEqual(len(load_mempool(self.write("mempool.jsonl", ""))), 0)

    def test_mempool_regions_collapse(self):
        lines = [
            json.dumps({"tx_hash": tx_hash(i), "first_seen_ms": 1000 + 10 * i + r, "region": region})
            for i in range(5) for r, region in enumerate(("us-east", "eu-west", "ap-southeast"))
        ]
        result = load_mempool(self.write("mempool.jsonl", "\n".join(lines) + "\n"))
        self.assertEqual(len(result), 5)
        self.assertEqual(result.merged, 10)

    def test_labels_merge(self):
        path = self.write("labels.json", json.dumps([
            {"address": address(1), "labels": ["DEX"]},
            {"address": address(1).upper().replace("0X", "0x"), "labels": ["CEX"]},
        ]))
        registry = load_labels(path)
        self.assertEqual(len(registry), 1)
        self.assertEqual(registry.lookup(address(1)), frozenset({"DEX", "CEX"}))

    def test_builder_list(self):
        builders = {address(i): ["MEV_BUILDER"] for i in range(10)}
        registry = load_labels(self.write("labels.json", json.dumps(builders)))
        self.assertEqual(len(registry.addresses_with(AddressLabel.MEV_BUILDER)), 10)

    def test_sandwich_with_repeated_leg_is_counted(self):
        header = "block_number,front_hash,victim_hash,back_hash,cost_usd,profit_usd\n"
        rows = (
            f"100,{tx_hash(1)},{tx_hash(2)},{tx_hash(3)},10.5,4.2\n"
            f"100,{tx_hash(4)},{tx_hash(5)},{tx_hash(4)},1.0,1.0\n"
        )
        result = load_sandwiches(self.write("sandwiches.csv", header + rows))
        self.assertEqual(len(result), 1)
        self.assertEqual(result.skipped, 1)
        self.assertAlmostEqual(result[0].cost_usd, 10.5)

    def test_prices_last_row_wins(self):
        text = "date,avg_gas_price_gwei,eth_close_usd\n2024-10-01,20.0,2500\n2024-10-01,22.45,2597.34\n"
        with self.assertLogs("data_loader", level="WARNING"):
            table = load_prices(self.write("prices.csv", text))
        row = table.get(date(2024, 10, 1))
        self.assertEqual((row.avg_gas_price, row.eth_close_usd), (22.45, 2597.34))
        with self.assertRaises(MissingPriceError):
            table.get(date(2024, 10, 2))

    def test_prices_bad_rows_are_skipped(self):
        text = (
            "date,avg_gas_price_gwei,eth_close_usd\n"
            "2024-10-01,20.0,2500\n"
            "not-a-date,21.0,2510\n"
            "2024-10-03,0,2520\n"
        )
        table = load_prices(self.write("prices.csv", text))
        self.assertEqual(table.dates(), [date(2024, 10, 1)])
        self.assertEqual(table.skipped, 2)

    def test_labels_unknown_and_malformed_are_skipped(self):
        path = self.write("labels.json", json.dumps({
            address(1): ["DEX", "ORACLE"],
            address(2): ["ORACLE"],
            "0xnot-an-address": ["CEX"],
        }))
        registry = load_labels(path)
        self.assertEqual(len(registry), 1)
        self.assertEqual(registry.lookup(address(1)), frozenset({"DEX"}))
        self.assertEqual(registry.skipped, 3)

    def test_blocks(self):
        text = (
            "block_number,timestamp,tx_count,builder_addr,base_fee_per_gas_gwei,mev_payment_eth\n"
            f"101,1727740812,2,{address(9)},15.0,0.1\n"
            "100,1727740800,1,,15.0,0\n"
        )
        result = load_blocks(self.write("blocks.csv", text))
        self.assertEqual([b.block_number for b in result], [100, 101])
        self.assertIsNone(result[0].builder_addr)

    def test_bundle_requires_configured_paths(self):
        with self.assertRaises(ConfigurationError):
            load_bundle(IngestConfig(), ["transactions"])

    def test_bundle_and_join_rate(self):
        tx_path = self.tx_file([tx_line(1, 0), tx_line(2, 1)])
        mem_path = self.write("mempool.jsonl", json.dumps({"tx_hash": tx_hash(1), "first_seen_ms": 5, "region": "eu"}) + "\n")
        bundle = load_bundle(IngestConfig(transactions=tx_path, mempool=mem_path), ["transactions", "mempool"], max_workers=2)
        self.assertEqual(len(bundle.transactions), 2)
        self.assertTrue(bundle.has("mempool"))
        self.assertAlmostEqual(mempool_join_rate(bundle.transactions, bundle.mempool), 0.5)

    def test_bundle_counts_skips_for_every_source(self):
        prices = self.write("prices.csv", "date,avg_gas_price_gwei,eth_close_usd\n2024-10-01,20,2500\nbad,1,1\n")
        labels = self.write("labels.json", json.dumps({address(1): ["ORACLE"]}))
        bundle = load_bundle(IngestConfig(prices=prices, labels=labels), ["prices", "labels"])
        self.assertEqual(bundle.skipped, {"prices": 1, "labels": 1})


if __name__ == "__main__":
    unittest.main()
