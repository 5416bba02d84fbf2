import unittest
from datetime import date, datetime, timezone

from chain_records import (
    AddressLabel, BlockMeta, LabelRegistry, PriceRow, PriceTable, SandwichRecord, TxRecord,
    classify_address, gwei_to_eth, group_by_block, group_by_day, normalize_address, validate_dataset,
)
from errors import InputError, MissingPriceError

BEAVERBUILD = "0x95222290DD7278Aa3Ddd389Cc1E1d165CC4BAfe5"
OCT_1 = int(datetime(2024, 10, 1, 12, tzinfo=timezone.utc).timestamp())


def tx_hash(i: int) -> str:
    return f"0x{i:064x}"


def address(i: int) -> str:
    return f"0x{i:040x}"


def make_tx(i: int, block: int = 1, index: int = 0, timestamp: int = OCT_1, **overrides) -> TxRecord:
    fields = dict(
        tx_hash=tx_hash(i),
        block_number=block,
        block_index=index,
        from_addr=address(1000 + i),
        to_addr=address(2000 + i),
        max_fee_per_gas=30.0,
        max_priority_fee_per_gas=2.0,
        effective_gas_price=17.0,
        gas_used=21_000,
        value=1,
        block_timestamp=timestamp,
    )
    fields.update(overrides)
    return TxRecord(**fields)


class AddressTests(unittest.TestCase):
    """Address normalisation and label lookups"""

    def test_builder_address_is_classified(self):
        registry = LabelRegistry({BEAVERBUILD: ["MEV_BUILDER"]})
        self.assertEqual(classify_address(registry, BEAVERBUILD), frozenset({"MEV_BUILDER"}))
        self.assertTrue(registry.has_label(BEAVERBUILD.lower(), AddressLabel.MEV_BUILDER))

    def test_unknown_address_has_no_labels(self):
        registry = LabelRegistry({BEAVERBUILD: ["MEV_BUILDER"]})
        self.assertEqual(classify_address(registry, address(7)), frozenset())

    def test_multiple_labels(self):
        registry = LabelRegistry({address(3): ["DEX", "CEX"]})
        self.assertEqual(classify_address(registry, address(3)), frozenset({"DEX", "CEX"}))

    def test_malformed_address_raises(self):
        with self.assertRaises(InputError):
            classify_address(LabelRegistry(), "0x1234")
        with self.assertRaises(InputError):
            normalize_address("not-an-address")

    def test_empty_address_means_contract_creation(self):
        self.assertIsNone(normalize_address(""))
        self.assertIsNone(normalize_address(None))

    def test_duplicate_keys_merge(self):
        registry = LabelRegistry({BEAVERBUILD: ["MEV_BUILDER"], BEAVERBUILD.lower(): ["DEX"]})
        self.assertEqual(len(registry), 1)
        self.assertEqual(registry.lookup(BEAVERBUILD), frozenset({"MEV_BUILDER", "DEX"}))

    def test_unknown_label_is_rejected(self):
        with self.assertRaises(ValueError):
            LabelRegistry({address(1): ["ORACLE"]})


class RecordTests(unittest.TestCase):

    def test_gas_fee_in_eth(self):
        tx = make_tx(1, gas_used=21_000, effective_gas_price=2.0)
        self.assertAlmostEqual(tx.gas_fee_eth, 4.2e-5, places=15)
        self.assertAlmostEqual(gwei_to_eth(1e9), 1.0)

    def test_fee_violations(self):
        tx = make_tx(1, max_priority_fee_per_gas=40.0)
        self.assertEqual(tx.fee_violations(), ["max_priority_fee_per_gas above max_fee_per_gas"])

    def test_sandwich_legs_must_differ(self):
        with self.assertRaises(InputError):
            SandwichRecord(1, tx_hash(1), tx_hash(2), tx_hash(1))

    def test_block_rejects_negative_payment(self):
        with self.assertRaises(InputError):
            BlockMeta(1, OCT_1, 0, None, 10.0, -1.0)

    def test_price_table_lookup(self):
        table = PriceTable({date(2024, 10, 1): PriceRow(22.45, 2597.34)})
        self.assertEqual(table.get(date(2024, 10, 1)).eth_close_usd, 2597.34)
        with self.assertRaises(MissingPriceError):
            table.get(date(2024, 10, 2))
        with self.assertRaises(KeyError):
            table.get(date(2024, 10, 2))


class ValidationTests(unittest.TestCase):

    def test_empty_dataset(self):
        report = validate_dataset([], [])
        self.assertEqual(report.n_transactions, 0)
        self.assertEqual(report.n_violations, 0)

    def test_duplicate_hash_flagged(self):
        txs = [make_tx(1, index=0), make_tx(1, index=1)]
        report = validate_dataset(txs, [BlockMeta(1, OCT_1, 2, None, 10.0, 0.0)])
        self.assertEqual(report.duplicate_hashes, [tx_hash(1)])
        self.assertEqual(report.gap_blocks, [])

    def test_missing_index_flagged(self):
        txs = [make_tx(1, index=0), make_tx(2, index=1)]
        report = validate_dataset(txs, [BlockMeta(1, OCT_1, 3, None, 10.0, 0.0)])
        self.assertEqual(report.gap_blocks, [1])
        self.assertEqual(report.clean_transactions, 0)

    def test_grouping(self):
        next_day = OCT_1 + 86_400
        txs = [make_tx(3, block=2, index=1, timestamp=next_day), make_tx(1, block=1), make_tx(2, block=2, timestamp=next_day)]
        days = group_by_day(txs)
        self.assertEqual(list(days), [date(2024, 10, 1), date(2024, 10, 2)])
        blocks = group_by_block(days[date(2024, 10, 2)])
        self.assertEqual([tx.block_index for tx in blocks[2]], [0, 1])


if __name__ == "__main__":
    unittest.main()
