"""Raw subnet-day data: snapshot files, TAO/USD series and the pool-data API client.

Everything funnels into one normalized row type, :class:`RawSnapshotRow`,
whose CSV layout is fixed by :data:`SNAPSHOT_COLUMNS`.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import httpx
import pandas as pd

log = logging.getLogger(__name__)

RAO_PER_TAO = 1_000_000_000
API_KEY_ENV = "TAOSTATS_API_KEY"
DEFAULT_BASE_URL = "https://api.taostats.io"
DEFAULT_ENDPOINT = "api/dtao/pool/history/v1"
FX_MAX_FILL_DAYS = 3

SNAPSHOT_COLUMNS = (
    "date",
    "netuid",
    "price_tao",
    "mcap_tao",
    "tau_reserve",
    "alpha_reserve",
    "alpha_staked",
    "emission_rao_per_day",
    "startup_mode",
)
_FLOAT_COLUMNS = SNAPSHOT_COLUMNS[2:8]


class SnapshotError(ValueError):
    """Snapshot file does not match the normalized schema."""


class DuplicateKeyError(SnapshotError):
    pass


class FxError(ValueError):
    pass


class FetchError(RuntimeError):
    pass


class RetryableFetchError(FetchError):
    """Network or rate-limit failure that survived every retry."""


class AuthenticationError(FetchError):
    pass


@dataclass(frozen=True)
class RawSnapshotRow:
    date: dt.date
    netuid: int
    price_tao: float
    mcap_tao: float
    tau_reserve: float
    alpha_reserve: float
    alpha_staked: float
    emission_rao_per_day: float
    startup_mode: bool

    @property
    def key(self) -> tuple[dt.date, int]:
        return (self.date, self.netuid)

    @property
    def emission_tao_per_day(self) -> float:
        return self.emission_rao_per_day / RAO_PER_TAO


@dataclass
class ParseReport:
    """Rows seen by a parser, split into accepted and rejected."""

    n_accepted: int = 0
    rejected: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_seen(self) -> int:
        return self.n_accepted + len(self.rejected)


# -- field coercion -------------------------------------------------------

def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("true", "1"):
        return True
    if s in ("false", "0"):
        return False
    raise ValueError(f"expected true|false, got {text!r}")


def _parse_float(text) -> float:
    if text is None:
        return math.nan
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    return math.nan if s == "" else float(s)


def _parse_date(text) -> dt.date:
    if isinstance(text, dt.date):
        return text
    return dt.date.fromisoformat(str(text).strip()[:10])


def row_from_mapping(rec: dict) -> RawSnapshotRow:
    """Build a row from a snapshot-schema mapping, raising ValueError on bad fields."""
    missing = [c for c in SNAPSHOT_COLUMNS if c not in rec]
    if missing:
        raise ValueError(f"missing fields {missing}")
    netuid = int(str(rec["netuid"]).strip())
    if netuid < 0:
        raise ValueError(f"netuid must be >= 0, got {netuid}")
    values = {c: _parse_float(rec[c]) for c in _FLOAT_COLUMNS}
    return RawSnapshotRow(
        date=_parse_date(rec["date"]),
        netuid=netuid,
        startup_mode=_parse_bool(rec["startup_mode"]),
        **values,
    )


def _format_float(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def row_to_record(row: RawSnapshotRow) -> dict:
    d = asdict(row)
    d["date"] = row.date.isoformat()
    for c in _FLOAT_COLUMNS:
        d[c] = _format_float(d[c])
    d["startup_mode"] = "true" if row.startup_mode else "false"
    return d


# -- snapshot files -------------------------------------------------------

def write_snapshot(rows: Iterable[RawSnapshotRow], path, format: str = "csv") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.date, r.netuid))
    if format == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=SNAPSHOT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow(row_to_record(r))
    elif format == "json":
        payload = [row_to_record(r) for r in rows]
        path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown snapshot format {format!r}")
    return path


def load_snapshot(path, format: str | None = None) -> list[RawSnapshotRow]:
    """Read a snapshot file; any schema violation or duplicate key is fatal.

    Value-level problems such as a non-positive price on an active day are
    left for panel construction to quarantine.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != SNAPSHOT_COLUMNS:
                raise SnapshotError(
                    f"{path}:1: header must be {','.join(SNAPSHOT_COLUMNS)}, got {header}"
                )
            records = []
            for lineno, values in enumerate(reader, start=2):
                if not values:
                    continue
                if len(values) != len(SNAPSHOT_COLUMNS):
                    raise SnapshotError(
                        f"{path}: line {lineno}: expected {len(SNAPSHOT_COLUMNS)} fields, got {len(values)}"
                    )
                records.append((lineno, dict(zip(SNAPSHOT_COLUMNS, values))))
    elif format == "json":
        payload = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(payload, list):
            raise SnapshotError(f"{path}: expected a JSON list of records")
        records = list(enumerate(payload, start=1))
    else:
        raise ValueError(f"unknown snapshot format {format!r}")

    rows: list[RawSnapshotRow] = []
    seen: dict[tuple, int] = {}
    for lineno, rec in records:
        try:
            row = row_from_mapping(rec)
        except (ValueError, TypeError) as exc:
            where = f"line {lineno}" if format == "csv" else f"record {lineno}"
            raise SnapshotError(f"{path}: {where}: {exc}") from exc
        if row.key in seen:
            raise DuplicateKeyError(
                f"{path}: duplicate (date, netuid) = ({row.date.isoformat()}, {row.netuid}) "
                f"at {lineno}, first seen at {seen[row.key]}"
            )
        seen[row.key] = lineno
        rows.append(row)
    return rows


# -- TAO/USD series -------------------------------------------------------

def load_fx(path, max_fill_days: int = FX_MAX_FILL_DAYS) -> pd.Series:
    """Load a ``date,tao_usd`` CSV into a daily Series of USD per TAO.

    Calendar gaps of up to ``max_fill_days`` are forward-filled with a
    warning; longer gaps are fatal.
    """
    frame = pd.read_csv(path, dtype={"date": str})
    if list(frame.columns) != ["date", "tao_usd"]:
        raise FxError(f"{path}: header must be date,tao_usd, got {list(frame.columns)}")
    if frame.empty:
        raise FxError(f"{path}: no observations")
    dates = pd.to_datetime(frame["date"], format="ISO8601")
    prices = pd.to_numeric(frame["tao_usd"], errors="coerce")
    bad = ~(prices > 0)
    if bad.any():
        i = int(bad.to_numpy().argmax())
        raise FxError(f"{path}: line {i + 2}: tao_usd must be > 0, got {frame['tao_usd'].iloc[i]!r}")
    if dates.duplicated().any():
        d = dates[dates.duplicated()].iloc[0]
        raise FxError(f"{path}: duplicate date {d.date().isoformat()}")
    series = pd.Series(prices.to_numpy(float), index=pd.DatetimeIndex(dates), name="tao_usd")
    return _fill_fx(series.sort_index(), max_fill_days, source=str(path))


def _fill_fx(series: pd.Series, max_fill_days: int, source: str = "fx") -> pd.Series:
    full = pd.date_range(series.index[0], series.index[-1], freq="D")
    if len(full) == len(series):
        series.index = full
        return series
    gaps = full.difference(series.index)
    # length of each run of missing days
    run = 0
    prev = None
    for d in gaps:
        run = run + 1 if prev is not None and (d - prev).days == 1 else 1
        if run > max_fill_days:
            raise FxError(f"{source}: gap of more than {max_fill_days} days ending after {d.date()}")
        prev = d
    log.warning("%s: forward-filling %d missing FX day(s)", source, len(gaps))
    return series.reindex(full).ffill()


def fx_from_mapping(values: dict) -> pd.Series:
    """FX series from an in-memory ``{date: usd_per_tao}`` mapping (same validation as files)."""
    s = pd.Series(values, dtype=float)
    s.index = pd.DatetimeIndex(pd.to_datetime(list(s.index)))
    if not (s > 0).all():
        raise FxError("tao_usd must be > 0")
    return _fill_fx(s.sort_index().rename("tao_usd"), FX_MAX_FILL_DAYS)


def write_fx(series: pd.Series, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("date,tao_usd\n")
        for d, v in series.items():
            fh.write(f"{pd.Timestamp(d).date().isoformat()},{float(v)!r}\n")
    return path


# -- remote API -----------------------------------------------------------

# Snapshot field -> (API field, scale applied to the API value).
REMOTE_FIELDS: dict[str, tuple[str, float]] = {
    "netuid": ("netuid", 1.0),
    "price_tao": ("price", 1.0),
    "mcap_tao": ("market_cap", 1.0 / RAO_PER_TAO),
    "tau_reserve": ("total_tao", 1.0 / RAO_PER_TAO),
    "alpha_reserve": ("alpha_in_pool", 1.0 / RAO_PER_TAO),
    "alpha_staked": ("alpha_staked", 1.0 / RAO_PER_TAO),
    "emission_rao_per_day": ("emission", 1.0),
    "startup_mode": ("startup_mode", 1.0),
}


def remote_record_to_row(day: dt.date, rec: dict) -> RawSnapshotRow:
    """Normalize one API record. Missing numeric fields are allowed only in startup mode."""
    startup = _parse_bool(rec.get(REMOTE_FIELDS["startup_mode"][0], False))
    out = {"date": day, "startup_mode": startup}
    for name, (api_name, scale) in REMOTE_FIELDS.items():
        if name in ("startup_mode",):
            continue
        raw = rec.get(api_name)
        if name == "netuid":
            if raw is None:
                raise ValueError("record has no netuid")
            out[name] = int(raw)
            continue
        value = _parse_float(raw)
        if math.isnan(value) and not startup and name in ("price_tao", "tau_reserve"):
            raise ValueError(f"netuid {out.get('netuid')}: missing {api_name} outside startup mode")
        out[name] = value * scale
    return row_from_mapping({**out, "date": day})


class TaostatsClient:
    """Paginated, retrying, caching client for the daily pool-history endpoint.

    Each (endpoint, date) request is cached under ``cache_dir`` in a file whose
    name is the SHA-256 of the request parameters; a cache hit never touches
    the network and returns the stored bytes unchanged.
    """

    def __init__(self, api_key: str | None = None, base_url: str = DEFAULT_BASE_URL,
                 endpoint: str = DEFAULT_ENDPOINT, cache_dir=None,
                 transport: httpx.BaseTransport | None = None, max_attempts: int = 5,
                 backoff: float = 1.0, sleep: Callable[[float], None] = time.sleep,
                 page_size: int = 200):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.base_url = base_url.rstrip("/")
        self.endpoint = endpoint.strip("/")
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.page_size = page_size
        self.n_requests = 0
        self.last_report = ParseReport()
        self._transport = transport

    def _http(self) -> httpx.Client:
        if not self.api_key:
            raise AuthenticationError(f"no API key; set {API_KEY_ENV}")
        return httpx.Client(base_url=self.base_url, transport=self._transport,
                            headers={"Authorization": self.api_key}, timeout=30.0)

    def cache_path(self, day: dt.date) -> Path | None:
        if self.cache_dir is None:
            return None
        params = {"endpoint": self.endpoint, "date": day.isoformat(), "frequency": "by_day"}
        digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:24]
        slug = self.endpoint.replace("/", "_")
        return self.cache_dir / slug / f"{day.isoformat()}-{digest}.json"

    def _get(self, client: httpx.Client, params: dict) -> dict:
        delay = self.backoff
        for attempt in range(1, self.max_attempts + 1):
            self.n_requests += 1
            try:
                resp = client.get("/" + self.endpoint, params=params)
            except httpx.TransportError as exc:
                err: Exception = exc
            else:
                if resp.status_code in (401, 403):
                    raise AuthenticationError(f"API rejected credentials (HTTP {resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    err = FetchError(f"HTTP {resp.status_code}")
                else:
                    resp.raise_for_status()
                    return resp.json()
            if attempt == self.max_attempts:
                raise RetryableFetchError(
                    f"{self.endpoint} {params}: giving up after {attempt} attempts: {err}")
            log.info("retrying %s in %.1fs after %s", self.endpoint, delay, err)
            self.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def fetch_day_raw(self, day: dt.date, client: httpx.Client | None = None) -> bytes:
        """All records for one day as canonical JSON bytes (cached)."""
        cached = self.cache_path(day)
        if cached is not None and cached.exists():
            return cached.read_bytes()
        own = client is None
        client = client or self._http()
        try:
            records, page = [], 1
            while True:
                params = {"date": day.isoformat(), "frequency": "by_day",
                          "page": page, "limit": self.page_size}
                body = self._get(client, params)
                records.extend(body.get("data", []))
                nxt = (body.get("pagination") or {}).get("next_page")
                if not nxt:
                    break
                page = int(nxt)
        finally:
            if own:
                client.close()
        blob = json.dumps(records, sort_keys=True, separators=(",", ":")).encode()
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            tmp = cached.with_suffix(".tmp")
            tmp.write_bytes(blob)
            tmp.replace(cached)
        return blob

    def fetch(self, start: dt.date, end: dt.date) -> list[RawSnapshotRow]:
        """Rows for every day in ``[start, end]``; bad records go to ``last_report``."""
        report = ParseReport()
        self.last_report = report
        if end < start:
            return []
        days = [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]
        need_net = any(self.cache_path(d) is None or not self.cache_path(d).exists() for d in days)
        client = self._http() if need_net else None
        rows: list[RawSnapshotRow] = []
        try:
            for d in days:
                for i, rec in enumerate(json.loads(self.fetch_day_raw(d, client))):
                    try:
                        rows.append(remote_record_to_row(d, rec))
                        report.n_accepted += 1
                    except (ValueError, TypeError) as exc:
                        report.rejected.append((f"{d.isoformat()}#{i}", str(exc)))
        finally:
            if client is not None:
                client.close()
        for where, why in report.rejected:
            log.warning("rejected API record %s: %s", where, why)
        return rows


def fetch_remote(start: dt.date, end: dt.date, **client_kwargs) -> list[RawSnapshotRow]:
    return TaostatsClient(**client_kwargs).fetch(start, end)
