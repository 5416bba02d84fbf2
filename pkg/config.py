import hashlib
import json
import logging
import os
from datetime import date
from pathlib import Path
from typing import Dict, Literal, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import ConfigurationError

load_dotenv()  # Load variables from .env

# === Runtime defaults ===
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "reports")
MAX_WORKERS = int(os.getenv("MAX_WORKERS", "4"))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "20241001"))

# === Units ===
GWEI_PER_ETH = 1e9
WEI_PER_GWEI = 1e9
WEI_PER_ETH = 1e18

# === Report formatting ===
FLOAT_FORMAT = "%.10f"  # fixed decimals in every CSV / text report
CSV_SEPARATOR = ","

# === Sources ===
SOURCES = ("transactions", "blocks", "mempool", "labels", "sandwiches", "prices")
SourceFormat = Literal["csv", "jsonl", "json"]
DEFAULT_FORMATS: Dict[str, str] = {
    "transactions": "csv",
    "blocks": "csv",
    "mempool": "jsonl",
    "labels": "json",
    "sandwiches": "csv",
    "prices": "csv",
}

# === Model columns ===
CONTINUOUS_REGRESSOR = "max_fee_per_gas"
LABEL_REGRESSORS = ("to_dex", "to_mev", "from_dex", "from_mev")
SANDWICH_REGRESSORS = ("front_run", "back_run")


def setup_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class IngestConfig(_Frozen):
    """Where each source lives, how it is encoded, and which UTC days to analyse"""

    transactions: Optional[Path] = None
    blocks: Optional[Path] = None
    mempool: Optional[Path] = None
    labels: Optional[Path] = None
    sandwiches: Optional[Path] = None
    prices: Optional[Path] = None
    formats: Dict[str, SourceFormat] = Field(default_factory=lambda: dict(DEFAULT_FORMATS))
    start: Optional[date] = None
    end: Optional[date] = None
    exclude: Tuple[date, ...] = ()

    @field_validator("formats")
    @classmethod
    def _known_sources(cls, value: Dict[str, str]) -> Dict[str, str]:
        unknown = set(value) - set(SOURCES)
        if unknown:
            raise ValueError(f"Unknown sources in formats: {sorted(unknown)}")
        return {**DEFAULT_FORMATS, **value}

    @field_validator("exclude")
    @classmethod
    def _sorted_dates(cls, value: Tuple[date, ...]) -> Tuple[date, ...]:
        return tuple(sorted(set(value)))

    @model_validator(mode="after")
    def _window_order(self) -> "IngestConfig":
        if self.start and self.end and self.start > self.end:
            raise ValueError(f"start {self.start} is after end {self.end}")
        return self

    def path_for(self, source: str) -> Optional[Path]:
        return getattr(self, source)

    def format_for(self, source: str) -> str:
        return self.formats.get(source, DEFAULT_FORMATS[source])

    def check_paths(self, sources: Sequence[str]) -> None:
        """Every requested source must be configured and exist on disk"""
        for source in sources:
            path = self.path_for(source)
            if path is None:
                raise ConfigurationError(f"Missing input: no path configured for '{source}'")
            if not Path(path).exists():
                raise ConfigurationError(f"Missing input: {source} file {path} does not exist")

    def in_range(self, day: date) -> bool:
        """Between start and end, ignoring exclusions"""
        if self.start and day < self.start:
            return False
        return not (self.end and day > self.end)

    def in_window(self, day: date) -> bool:
        return self.in_range(day) and day not in self.exclude


class ProbitSettings(_Frozen):
    buckets: int = Field(default=4, ge=2)  # 4 = quartiles, 10 = decile robustness variant
    tolerance: float = Field(default=1e-8, gt=0)
    max_iterations: int = Field(default=200, ge=1)
    max_halvings: int = Field(default=30, ge=0)
    probability_floor: float = Field(default=1e-300, gt=0)
    drop_constant_columns: bool = True
    max_standard_error: float = Field(default=100.0, gt=0)  # larger SEs flag a coefficient as unidentified


class EffectsSettings(_Frozen):
    continuous: Tuple[str, ...] = (CONTINUOUS_REGRESSOR,)
    quantiles: Tuple[float, ...] = (0.1, 0.5, 0.9)
    insurance_target: float = Field(default=1.0, gt=0, le=1)
    effect_floor: float = Field(default=1e-12, gt=0)
    anomalous_days: Tuple[date, ...] = ()  # estimated and reported, left out of summaries

    @field_validator("quantiles")
    @classmethod
    def _unit_interval(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(q < 0 or q > 1 for q in value):
            raise ValueError("quantiles must lie in [0, 1]")
        return value


class SandwichSettings(_Frozen):
    amm_fee: float = Field(default=0.003, ge=0, le=0.01)
    ttest_alternative: Literal["two-sided", "greater", "less"] = "two-sided"
    bootstrap_resamples: int = Field(default=999, ge=1)
    ci_level: float = Field(default=0.99, gt=0, lt=1)
    effect_threshold: float = 0.5
    pooled_regression: bool = False
    detect_window: int = Field(default=6, ge=2)
    histogram_bins: int = Field(default=20, ge=1)


class ConcentrationSettings(_Frozen):
    surge_days: Tuple[date, ...] = ()
    top_k: int = Field(default=3, ge=1)


class SynthConfig(_Frozen):
    """Synthetic chain generator knobs; defaults mirror the October 2024 magnitudes"""

    seed: int = DEFAULT_SEED
    start_date: date = date(2024, 10, 1)
    blocks_per_day: int = Field(default=50, ge=0)
    txs_per_block_mean: float = Field(default=200.0, ge=0)
    txs_per_block_min: int = Field(default=20, ge=0)
    beta: Dict[str, float] = Field(default_factory=lambda: {
        "max_fee_per_gas": -8.6e-4,
        "to_dex": -0.77,
        "to_mev": -1.7,
        "from_dex": -1.4,
        "from_mev": 1.99,
        "front_run": -0.6,
    })
    cutpoints: Tuple[float, ...] = (-0.6, 0.1, 0.8)
    p_to_dex: float = Field(default=0.25, ge=0, le=1)
    p_from_dex: float = Field(default=0.02, ge=0, le=1)
    p_to_mev: float = Field(default=0.05, ge=0, le=1)
    p_from_mev: float = Field(default=0.03, ge=0, le=1)
    p_contract_creation: float = Field(default=0.01, ge=0, le=1)
    dex_pool_size: int = Field(default=20, ge=1)
    cex_pool_size: int = Field(default=10, ge=0)
    builder_pool_size: int = Field(default=10, ge=1)
    mev_block_share: float = Field(default=0.91, ge=0, le=1)
    sandwich_rate: float = Field(default=1.2, ge=0)
    mempool_coverage: float = Field(default=0.7, ge=0, le=1)
    backrun_fee_multiplier: float = Field(default=10.0, gt=0)
    base_fee_gwei: float = Field(default=15.0, ge=0)
    priority_fee_mean_gwei: float = Field(default=1.5, ge=0)
    max_fee_headroom_gwei: float = Field(default=15.0, ge=0)
    gas_used_mean: float = Field(default=120_000.0, gt=0)
    mev_payment_mean_eth: float = Field(default=0.1554, ge=0)
    avg_gas_price_gwei: float = Field(default=22.45, gt=0)
    eth_close_usd: float = Field(default=2597.34, gt=0)

    @field_validator("cutpoints")
    @classmethod
    def _increasing(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(value) < 1 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("cutpoints must be strictly increasing")
        return value

    @model_validator(mode="after")
    def _label_mass(self) -> "SynthConfig":
        if self.p_to_dex + self.p_to_mev + self.p_contract_creation > 1:
            raise ValueError("to-address probabilities sum above 1")
        if self.p_from_dex + self.p_from_mev > 1:
            raise ValueError("from-address probabilities sum above 1")
        return self


class PipelineConfig(_Frozen):
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    probit: ProbitSettings = Field(default_factory=ProbitSettings)
    effects: EffectsSettings = Field(default_factory=EffectsSettings)
    sandwich: SandwichSettings = Field(default_factory=SandwichSettings)
    concentration: ConcentrationSettings = Field(default_factory=ConcentrationSettings)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    extended: bool = False
    dump_design: bool = False  # per-day design_YYYYMMDD.csv audit files
    output_dir: Path = Path(OUTPUT_DIR)
    max_workers: int = Field(default=MAX_WORKERS, ge=1)
    seed: int = DEFAULT_SEED


def load_config(path: Optional[Path] = None) -> PipelineConfig:
    """Read the JSON run configuration; no path means all defaults"""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    try:
        return PipelineConfig.model_validate(raw)
    except ValueError as e:
        raise ConfigurationError(f"Invalid config {path}: {e}") from e


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the effective config; the output directory is not part of a run's identity"""
    payload = config.model_dump(mode="json", exclude={"output_dir"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
