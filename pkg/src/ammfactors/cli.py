"""Command-line pipeline: ``ammfactors <command> --out RUN_ROOT [options]``.

Every command writes into ``RUN_ROOT/<command>/`` (CSV tables, a JSON blob
with full-precision values, figure series under ``figures/`` and a
``manifest.json``) and registers itself in ``RUN_ROOT/manifest.json``.
Tables use percent where a daily return is reported; JSON keeps fractions.

Settings can also come from an INI file (``--config``) with a ``[run]``
section whose keys are the long option names (``hac_lags = 5`` etc.);
flags on the command line win. Remote ingestion reads the API key from the
``TAOSTATS_API_KEY`` environment variable.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, plotting
from .characteristics import RISK_CHARACTERISTICS, all_characteristics, characteristic, rolling_risk
from .econometrics import (FM_MIN_OBS, NW_LAGS, InsufficientSampleError, SingularDesignError,
                           ZeroVarianceError,
                           correlation_matrix, fama_macbeth, grs_test, risk_decomposition,
                           spanning_alphas, summary_stats)
from .experiments import (AUM_GRID, EVENT_WINDOWS, HALVING_DATE, PLACEBO_OFFSETS, SPLIT_DATE,
                          capacity_table, daily_capacity, halving_event_study, halving_series,
                          placebo_scan, subsample_split, vol_sorts)
from .factors import (FACTOR_ORDER, LEGS, TERCILE_CONVENTIONS, build_all_factors, factor_frame,
                      tercile_legs, tercile_table)
from .ingest import API_KEY_ENV, DEFAULT_BASE_URL, FetchError, load_fx, load_snapshot, write_fx, write_snapshot
from .panel import build_panel, read_panel, write_panel
from . import synth as synth_mod

log = logging.getLogger("ammfactors")

LOCK_NAME = ".ammfactors.lock"
ROOT_MANIFEST = "manifest.json"
SOURCES = ("ingest", "synth")
ANALYSIS_STAGES = ("factors", "stats", "fm", "grs", "spanning", "subsample", "halving",
                   "placebo", "slippage", "vol-sorts", "risk-decomp")
FM_FACTORS = ("MKT", "SMB", "HML_EMIS", "WML7")
GRS_PORTFOLIOS = ("SMB", "HML_EMIS", "WML7", "WML30")
GRS_FACTORS = ("MKT", "SMB", "WML30")
RISK_FACTORS = ("MKT", "SMB", "HML_EMIS", "WML7", "WML30", "REV")
LEG_LABELS = {
    "SMB": ("Small", "Medium", "Large"),
    "WML7": ("Losers", "Middle", "Winners"),
    "WML30": ("Losers", "Middle", "Winners"),
    "HML_EMIS": ("Low", "Middle", "High"),
}


class CliError(Exception):
    """A failure reported as ``error: ...`` with exit code 1."""


class MissingArtifact(CliError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `ammfactors {command} --out <run root>` first")


class LockedError(CliError):
    pass


@dataclass(frozen=True)
class RunConfig:
    out: Path
    source: str | None = None            # ingest | synth | None (whichever exists)
    start: dt.date | None = None
    end: dt.date | None = None
    denomination: str = "tao"
    hac_lags: int = NW_LAGS
    winsor: float = 1.0
    min_history: int = 7
    tercile_convention: str = "ceil"
    seed: int | None = None
    figures: bool = True

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("figures")
        return _jsonable(d)


# -- helpers --------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (pd.Timestamp, dt.date)):
        return obj.isoformat()[:10]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(_jsonable(obj), sort_keys=True).encode()).hexdigest()


def _pct(frame: pd.DataFrame, cols) -> pd.DataFrame:
    out = frame.copy()
    for c in cols:
        out[c] = out[c] * 100.0
    return out.rename(columns={c: f"{c}_pct" for c in cols})


class Stage:
    """Output directory of one command plus its manifest bookkeeping."""

    def __init__(self, ctx: RunConfig, name: str, options: dict | None = None):
        self.ctx = ctx
        self.name = name
        self.root = Path(ctx.out)
        self.dir = self.root / name
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        self.options = _jsonable(options or {})
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def rel(self, path: Path) -> str:
        path = Path(path)
        try:
            return str(path.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(path)

    def add_input(self, path) -> Path:
        path = Path(path)
        self.inputs[self.rel(path)] = sha256_file(path)
        return path

    def csv(self, name: str, frame, index_label=None) -> Path:
        path = self.dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, float_format="%.10g", lineterminator="\n",
                     date_format="%Y-%m-%d", index_label=index_label)
        self.outputs.append(path)
        return path

    def json(self, name: str, obj) -> Path:
        path = self.dir / name
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.outputs.append(path)
        return path

    def figure(self, name: str, frame: pd.DataFrame, kind: str = "line", **kw) -> None:
        self.csv(f"figures/{name}.csv", frame, index_label=frame.index.name or "index")
        if not self.ctx.figures:
            return
        path = self.dir / "figures" / f"{name}.svg"
        if kind == "line":
            plotting.line_chart(frame, path, **kw)
        elif kind == "bar":
            plotting.bar_chart(frame, path, **kw)
        else:
            plotting.heatmap(frame, path, **kw)
        self.outputs.append(path)

    def finish(self) -> dict:
        config = {"run": self.ctx.as_dict(), "options": self.options}
        manifest = {
            "command": self.name,
            "version": __version__,
            "config": config,
            "config_hash": _hash_obj(config),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {self.rel(p): sha256_file(p) for p in sorted(set(self.outputs))},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
        _update_root_manifest(self.root, self.name, manifest)
        return manifest


def _update_root_manifest(root: Path, name: str, manifest: dict) -> None:
    path = root / ROOT_MANIFEST
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    data["version"] = __version__
    stages = data.setdefault("stages", {})
    stages[name] = {"config_hash": manifest["config_hash"],
                    "manifest": f"{name}/manifest.json",
                    "inputs": manifest["inputs"]}
    data["stages"] = dict(sorted(stages.items()))
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunLock:
    """Exclusive lock file in the run root; a second holder is rejected."""

    def __init__(self, root: Path):
        self.path = Path(root) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = self.path.read_text(encoding="utf-8").strip() or "unknown"
            raise LockedError(f"{self.path.parent} is locked by another run (pid {holder}); "
                              f"delete {self.path} if that run is gone") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# -- loading upstream artifacts -------------------------------------------

def _source_dir(ctx: RunConfig) -> Path:
    root = Path(ctx.out)
    if ctx.source is not None:
        d = root / ctx.source
        if not (d / "snapshot.csv").exists():
            raise MissingArtifact(d / "snapshot.csv", ctx.source)
        return d
    found = [root / s for s in SOURCES if (root / s / "snapshot.csv").exists()]
    if not found:
        raise MissingArtifact(root / "ingest" / "snapshot.csv", "ingest (or `ammfactors synth`)")
    if len(found) > 1:
        raise CliError("both ingest/ and synth/ snapshots exist; choose one with --source")
    return found[0]


def _filter_rows(rows, ctx: RunConfig):
    return [r for r in rows if (ctx.start is None or r.date >= ctx.start)
            and (ctx.end is None or r.date <= ctx.end)]


def _load_panel(ctx: RunConfig, stage: Stage):
    d = Path(ctx.out) / "build-panel"
    if not (d / "r_tao.csv").exists():
        raise MissingArtifact(d / "r_tao.csv", "build-panel")
    for name in ("r_tao.csv", "r_usd.csv", "eligibility.csv"):
        stage.add_input(d / name)
    return read_panel(d)


def _read_dated(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path, index_col=0, parse_dates=[0])
    frame.index = pd.DatetimeIndex(frame.index, name="date")
    return frame


def _load_factors(ctx: RunConfig, stage: Stage) -> pd.DataFrame:
    path = Path(ctx.out) / "factors" / "factors.csv"
    if not path.exists():
        raise MissingArtifact(path, "factors")
    stage.add_input(path)
    return _read_dated(path)


def _load_legs(ctx: RunConfig, stage: Stage) -> pd.DataFrame:
    path = Path(ctx.out) / "factors" / "legs.csv"
    if not path.exists():
        raise MissingArtifact(path, "factors")
    stage.add_input(path)
    return _read_dated(path)


def _require(frame: pd.DataFrame, names, what: str) -> pd.DataFrame:
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise CliError(f"{what}: factors {missing} are not available")
    return frame[list(names)]


def _source_meta(ctx: RunConfig) -> dict:
    try:
        d = _source_dir(ctx)
    except CliError:
        return {}
    meta = d / "config.json"
    return json.loads(meta.read_text(encoding="utf-8")) if meta.exists() else {}


# -- commands -------------------------------------------------------------

def cmd_ingest(ctx: RunConfig, args) -> Stage:
    if bool(args.snapshot) == bool(args.remote):
        raise CliError("ingest needs exactly one data source: --snapshot PATH or --remote")
    stage = Stage(ctx, "ingest", {"snapshot": args.snapshot, "remote": args.remote,
                                  "fx": args.fx, "base_url": args.base_url})
    report = None
    if args.snapshot:
        rows = load_snapshot(stage.add_input(args.snapshot))
    else:
        if ctx.start is None or ctx.end is None:
            raise CliError("--remote needs --start and --end")
        from .ingest import TaostatsClient
        client = TaostatsClient(base_url=args.base_url, cache_dir=args.cache_dir)
        rows = client.fetch(ctx.start, ctx.end)
        report = client.last_report
    rows = _filter_rows(rows, ctx)
    if not rows:
        raise CliError("the data source has no rows in the requested date range")
    stage.outputs.append(write_snapshot(rows, stage.dir / "snapshot.csv"))
    if args.fx:
        fx = load_fx(stage.add_input(args.fx))
        stage.outputs.append(write_fx(fx, stage.dir / "fx.csv"))
    dates = sorted({r.date for r in rows})
    summary = {"n_rows": len(rows), "n_subnets": len({r.netuid for r in rows}),
               "first_date": dates[0], "last_date": dates[-1], "fx": bool(args.fx)}
    if report is not None:
        summary["rejected_records"] = [list(x) for x in report.rejected]
    stage.json("ingest.json", summary)
    return stage


def _synth_config(ctx: RunConfig, args) -> synth_mod.SynthConfig:
    if args.synth_config:
        config = synth_mod.load_config(args.synth_config)
    elif args.preset == "halving":
        config = synth_mod.halving_config()
    else:
        config = synth_mod.SynthConfig()
    if args.noise_std is not None:
        config = dataclasses.replace(config, noise_std=args.noise_std)
    if ctx.seed is not None:
        config = dataclasses.replace(config, seed=ctx.seed)
    return config


def cmd_synth(ctx: RunConfig, args) -> Stage:
    config = _synth_config(ctx, args)
    stage = Stage(ctx, "synth", {"synth_config": args.synth_config, "preset": args.preset,
                                 "noise_std": args.noise_std})
    if args.synth_config:
        stage.add_input(args.synth_config)
    state = synth_mod.simulate(config)
    stage.outputs.append(write_snapshot(synth_mod.to_rows(config, state), stage.dir / "snapshot.csv"))
    stage.outputs.append(write_fx(synth_mod.synthetic_fx(config), stage.dir / "fx.csv"))
    meta = dataclasses.asdict(config)
    if config.halving_day is not None:
        meta["halving_date"] = config.dates[config.halving_day]
    stage.json("config.json", meta)

    _, panel, smb, _ = synth_mod.measured_factors(config, state)
    oracle = pd.Series(synth_mod.predicted_smb(state, config.restake_fraction), index=config.dates)
    measured = smb.returns.dropna()
    result = {"measured_smb": float(measured.mean()) if len(measured) else None,
              "predicted_smb": float(oracle.reindex(measured.index).mean()) if len(measured) else None}
    if len(measured):
        result["relative_gap"] = abs(result["measured_smb"] - result["predicted_smb"]) / abs(result["predicted_smb"])
    stage.json("prop1.json", result)
    series = pd.DataFrame({"measured": smb.returns, "predicted": oracle.reindex(smb.returns.index)})
    series.index.name = "date"
    stage.figure("prop1_smb", series, title="Measured vs predicted daily SMB")
    if config.halving_day is not None:
        ev = synth_mod.halving_experiment(config, ctx.hac_lags)
        stage.json("halving.json", ev.as_dict())
    return stage


def cmd_build_panel(ctx: RunConfig, args) -> Stage:
    src = _source_dir(ctx)
    stage = Stage(ctx, "build-panel", {"source": src.name})
    rows = _filter_rows(load_snapshot(stage.add_input(src / "snapshot.csv")), ctx)
    if not rows:
        raise CliError("the snapshot has no rows in the requested date range")
    fx = load_fx(stage.add_input(src / "fx.csv")) if (src / "fx.csv").exists() else None
    panel = build_panel(rows, fx, bound=ctx.winsor, min_history=ctx.min_history)
    stage.outputs.extend(write_panel(panel, stage.dir))
    counts = pd.DataFrame({"active": panel.active.sum(axis=1),
                           "eligible": panel.eligible_counts()})
    counts.index.name = "date"
    stage.figure("n_subnets", counts, title="Active and eligible subnets", ylabel="count")
    stage.json("panel.json", {
        "n_dates": len(panel.dates), "n_subnets": len(panel.subnets),
        "eligible_subnet_days": int(panel.eligibility.to_numpy().sum()),
        "quarantined": [list(q) for q in panel.quarantined],
        "winsor_bound": ctx.winsor, "min_history": ctx.min_history,
        "usd_returns": panel.fx_return is not None,
    })
    return stage


def _leg_frame(facs) -> tuple[pd.DataFrame, pd.DataFrame]:
    legs, counts = {}, {}
    for name, f in facs.items():
        if f.legs is None:
            continue
        for leg in LEGS:
            legs[f"{name}_{leg}"] = f.legs[leg]
            counts[f"{name}_{leg}"] = f.counts[f"n_{leg}"]
    legs, counts = pd.DataFrame(legs), pd.DataFrame(counts)
    legs.index.name = counts.index.name = "date"
    return legs, counts


def _tercile_rows(f) -> pd.DataFrame:
    table = tercile_table(f)
    labels = LEG_LABELS.get(f.name, LEGS)
    table.index = [f"{lab} ({leg})" for lab, leg in zip(labels, LEGS)] + [f.name]
    table.index.name = "portfolio"
    return _pct(table, ["mean", "ann_return", "ann_std"])


def cmd_factors(ctx: RunConfig, args) -> Stage:
    stage = Stage(ctx, "factors")
    panel = _load_panel(ctx, stage)
    chars = all_characteristics(panel, include_risk=False)
    facs = build_all_factors(panel, chars, ctx.denomination, ctx.tercile_convention)
    frame = factor_frame(facs)
    frame.index.name = "date"
    stage.csv("factors.csv", frame)
    legs, counts = _leg_frame(facs)
    stage.csv("legs.csv", legs)
    stage.csv("leg_counts.csv", counts)
    if panel.fx_return is not None:
        usd = build_all_factors(panel, {}, "usd")["MKT"].returns.rename("MKT_USD")
        stage.csv("market_usd.csv", usd.to_frame(), index_label="date")

    for fname, out in (("SMB", "size_terciles.csv"), ("HML_EMIS", "emission_terciles.csv")):
        stage.csv(out, _tercile_rows(facs[fname]))
    mom = pd.concat({"WML7": _tercile_rows(facs["WML7"]), "WML30": _tercile_rows(facs["WML30"])},
                    names=["panel"])
    stage.csv("momentum_terciles.csv", mom)

    sizes = counts.where(counts > 0)
    stage.json("factors.json", {
        "denomination": ctx.denomination,
        "tercile_convention": ctx.tercile_convention,
        "masked_characteristics": {k: c.n_masked for k, c in chars.items()},
        "n_days": {k: int(frame[k].notna().sum()) for k in frame.columns},
        "avg_tercile_size": float(np.nanmean(sizes.to_numpy())) if sizes.notna().any().any() else None,
        "min_tercile_size": float(np.nanmin(sizes.to_numpy())) if sizes.notna().any().any() else None,
    })

    wealth = plotting.cumulative(frame)
    stage.figure("factor_returns", wealth, title="Cumulative factor returns", logy=True,
                 ylabel="growth of 1")
    for fig, names in (("size_portfolios", ["SMB"]), ("momentum_portfolios", ["WML7", "WML30"]),
                       ("emission_portfolios", ["HML_EMIS"])):
        cols = [f"{n}_{leg}" for n in names for leg in LEGS]
        stage.figure(fig, plotting.cumulative(legs[cols]), logy=True, ylabel="growth of 1",
                     title=f"Cumulative tercile returns: {', '.join(names)}")
    return stage


def _no_eligible(frame: pd.DataFrame) -> bool:
    return frame.empty or not frame.notna().to_numpy().any()


def cmd_stats(ctx: RunConfig, args) -> Stage:
    stage = Stage(ctx, "stats")
    panel = _load_panel(ctx, stage)
    frame = _load_factors(ctx, stage)
    if not panel.eligibility.to_numpy().any() or _no_eligible(frame):
        raise CliError("no eligible observations: the panel has no subnet-day that passes eligibility")
    usd_path = Path(ctx.out) / "factors" / "market_usd.csv"
    if usd_path.exists():
        frame = frame.join(_read_dated(stage.add_input(usd_path)))
    rows, notes = {}, {}
    for name in frame.columns:
        try:
            rows[name] = summary_stats(frame[name], ctx.hac_lags).as_dict()
        except (InsufficientSampleError, ZeroVarianceError) as exc:
            notes[name] = str(exc)
            rows[name] = {"n": int(frame[name].notna().sum())}
    table = pd.DataFrame.from_dict(rows, orient="index")
    table = table.reindex(columns=["mean", "std", "sharpe", "t_ols", "t_nw", "skew", "kurt", "n"])
    table.index.name = "factor"
    stage.csv("summary.csv", _pct(table, ["mean", "std"]))
    main = frame[[c for c in frame.columns if c != "MKT_USD"]]
    corr = correlation_matrix(main)
    corr.index.name = "factor"
    stage.csv("correlations.csv", corr)
    stage.json("stats.json", {"summary": table.to_dict(orient="index"), "unavailable": notes,
                              "hac_lags": ctx.hac_lags, "kurtosis": "raw"})
    stage.figure("correlations", corr, kind="heatmap", title="Factor correlations")
    bars = table.loc[[c for c in main.columns if c in table.index], ["sharpe", "t_nw"]]
    stage.figure("sharpe_tstats", bars, kind="bar", title="Annualized Sharpe and Newey-West t")
    return stage


def cmd_fm(ctx: RunConfig, args) -> Stage:
    min_obs = getattr(args, "min_obs", FM_MIN_OBS)
    stage = Stage(ctx, "fm", {"min_obs": min_obs})
    panel = _load_panel(ctx, stage)
    factors = _require(_load_factors(ctx, stage), FM_FACTORS, "fm")
    res = fama_macbeth(panel.returns(ctx.denomination), factors, min_obs=min_obs,
                       mask=panel.eligibility)
    table = res.table()
    table.index = ["Intercept" if i == "const" else i for i in table.index]
    table.index.name = "variable"
    stage.csv("fama_macbeth.csv", _pct(table, ["premium", "se"]))
    stage.csv("slopes.csv", res.slopes)
    stage.csv("betas.csv", res.betas, index_label="netuid")
    stage.json("fm.json", {"table": table.to_dict(orient="index"), "diagnostics": res.diagnostics})
    return stage


def grs_portfolio_columns(kind: str = "full") -> list[str]:
    """Leg columns used as GRS test assets.

    ``reduced`` drops the top leg of every sort whose long-short spread is
    itself a factor: bottom - top equals that factor, so keeping both legs
    makes the residual covariance singular.
    """
    cols = [f"{n}_{leg}" for n in GRS_PORTFOLIOS for leg in LEGS]
    if kind == "reduced":
        cols = [c for c in cols if c not in {f"{n}_top" for n in GRS_FACTORS}]
    return cols


def cmd_grs(ctx: RunConfig, args) -> Stage:
    kind = getattr(args, "grs_portfolios", None) or "full"
    stage = Stage(ctx, "grs", {"grs_portfolios": kind})
    factors = _require(_load_factors(ctx, stage), GRS_FACTORS, "grs")
    legs = _load_legs(ctx, stage)
    try:
        res = grs_test(_require(legs, grs_portfolio_columns(kind), "grs"), factors)
    except SingularDesignError as exc:
        if kind == "full":
            raise SingularDesignError(
                f"{exc}; the SMB and WML30 tercile legs are exact combinations of the factors "
                "(bottom - top = factor), try --grs-portfolios reduced") from exc
        raise
    alphas = (res.alphas * 100.0).rename("alpha_pct").to_frame()
    alphas.index.name = "portfolio"
    stage.csv("alphas.csv", alphas)
    stage.json("grs.json", {"F": res.F, "p_value": res.pvalue, "T": res.T, "N": res.N, "K": res.K,
                            "mean_abs_alpha": res.mean_abs_alpha,
                            "factors": list(GRS_FACTORS), "alphas": res.alphas.to_dict()})
    return stage


def cmd_spanning(ctx: RunConfig, args) -> Stage:
    hac = bool(getattr(args, "hac", False))
    stage = Stage(ctx, "spanning", {"hac": hac})
    frame = _load_factors(ctx, stage)
    table = spanning_alphas(frame, ctx.hac_lags if hac else None)
    table.index.name = "factor"
    stage.csv("spanning.csv", _pct(table, ["alpha"]))
    stage.json("spanning.json", {"table": table.to_dict(orient="index"),
                                 "t_errors": f"newey-west({ctx.hac_lags})" if hac else "ols"})
    return stage


def _resolve_split(frame: pd.DataFrame, requested) -> pd.Timestamp:
    if requested not in (None, "auto"):
        return pd.Timestamp(requested)
    idx = frame.dropna(how="all").index
    if len(idx) and idx[0] <= SPLIT_DATE < idx[-1]:
        return SPLIT_DATE
    if len(idx) < 2:
        raise CliError("no eligible observations: the factor sample is empty")
    return idx[(len(idx) - 1) // 2]


def cmd_subsample(ctx: RunConfig, args) -> Stage:
    stage = Stage(ctx, "subsample", {"split_date": getattr(args, "split_date", None)})
    frame = _load_factors(ctx, stage)
    split = _resolve_split(frame, getattr(args, "split_date", None))
    table = subsample_split(frame, split)
    table.index.name = "factor"
    stage.csv("subsample.csv", _pct(table, ["full_mean", "first_mean", "second_mean"]))
    stage.json("subsample.json", {"split_date": split, "table": table.to_dict(orient="index")})
    return stage


def _event_date(ctx: RunConfig, requested) -> pd.Timestamp:
    if requested not in (None, "auto"):
        return pd.Timestamp(requested)
    meta = _source_meta(ctx)
    return pd.Timestamp(meta["halving_date"]) if meta.get("halving_date") else HALVING_DATE


def _event_rows(results) -> pd.DataFrame:
    rows = {}
    for r in results:
        rows[r.label] = {"pre_mean": r.pre_mean, "post_mean": r.post_mean, "ratio": r.ratio,
                         "beta": r.beta, "t_nw": r.t_nw, "p_value": r.p_value,
                         "n_pre": r.n_pre, "n_post": r.n_post, "available": r.available}
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "window"
    return _pct(table, ["pre_mean", "post_mean", "beta"])


def cmd_halving(ctx: RunConfig, args) -> Stage:
    windows = tuple(getattr(args, "windows", None) or EVENT_WINDOWS)
    requested = getattr(args, "event_date", None)
    no_mkt = bool(getattr(args, "no_market_control", False))
    stage = Stage(ctx, "halving", {"event_date": requested, "windows": windows,
                                   "market_control": not no_mkt})
    frame = _require(_load_factors(ctx, stage), ("SMB", "MKT"), "halving")
    event = _event_date(ctx, requested)
    results = halving_event_study(frame["SMB"], None if no_mkt else frame["MKT"], event,
                                  windows, ctx.hac_lags)
    stage.csv("halving.csv", _event_rows(results))
    stage.json("halving.json", {"event_date": event, "rows": [r.as_dict() for r in results]})
    series = halving_series(frame["SMB"])
    series.index.name = "date"
    stage.figure("halving", series[["cumulative"]], logy=True, vline=event,
                 title="Cumulative SMB around the emission cut", ylabel="growth of 1")
    stage.figure("halving_rolling", series[["rolling_mean_30"]] * 100.0, vline=event,
                 title="30-day rolling mean SMB", ylabel="%/day")
    return stage


def cmd_placebo(ctx: RunConfig, args) -> Stage:
    offsets = tuple(getattr(args, "offsets", None) or PLACEBO_OFFSETS)
    window = getattr(args, "window", 60)
    requested = getattr(args, "event_date", None)
    stage = Stage(ctx, "placebo", {"event_date": requested, "offsets": offsets, "window": window})
    frame = _require(_load_factors(ctx, stage), ("SMB", "MKT"), "placebo")
    event = _event_date(ctx, requested)
    true, rows = placebo_scan(frame["SMB"], frame["MKT"], event, offsets, window, ctx.hac_lags)
    table = pd.DataFrame([{
        "offset": p.offset, "date": p.result.event_date, "available": p.result.available,
        "beta_pct": p.result.beta * 100.0, "t_nw": p.result.t_nw, "p_value": p.result.p_value,
        "exceeds_true": p.exceeds_true, "significant": p.significant} for p in rows]).set_index("offset")
    stage.csv("placebo.csv", table)
    stage.json("placebo.json", {"event": true.as_dict(),
                                "n_significant": int(table["significant"].sum()),
                                "n_exceeding_true": int(table["exceeds_true"].sum())})
    return stage


def _triple(text: str) -> dict:
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise CliError("expected three comma-separated values: small,medium,large")
    return dict(zip(("small", "medium", "large"), parts))


def cmd_slippage(ctx: RunConfig, args) -> Stage:
    ref = getattr(args, "reference_slippage", None)
    opts = {k: getattr(args, k, None) for k in
            ("reference_slippage", "reference_aum", "gross", "gross_std", "tao_usd", "turnover")}
    stage = Stage(ctx, "slippage", opts)
    turnover = opts["turnover"] if opts["turnover"] is not None else 1.0
    if ref:
        # one-way slippage (percent) observed at a reference AUM, scaled linearly
        if opts["gross"] is None:
            raise CliError("--reference-slippage needs --gross (and optionally --gross-std) in %/day")
        aum = opts["reference_aum"] or 1e6
        unit = {k: v / 100.0 / aum for k, v in _triple(ref).items()}
        gross = opts["gross"] / 100.0
        std = opts["gross_std"] / 100.0 if opts["gross_std"] is not None else None
        report = capacity_table(unit, AUM_GRID, gross, std, turnover)
    else:
        panel = _load_panel(ctx, stage)
        frame = _require(_load_factors(ctx, stage), ("SMB",), "slippage")
        smb = frame["SMB"].dropna()
        if smb.empty:
            raise CliError("no eligible observations: SMB series is empty")
        gross = opts["gross"] / 100.0 if opts["gross"] is not None else float(smb.mean())
        std = opts["gross_std"] / 100.0 if opts["gross_std"] is not None else float(smb.std(ddof=1))
        if opts["tao_usd"] is not None:
            fx = pd.Series(float(opts["tao_usd"]), index=panel.dates)
        else:
            src = _source_dir(ctx)
            if not (src / "fx.csv").exists():
                raise CliError("slippage needs TAO/USD prices: ingest with --fx or pass --tao-usd")
            fx = load_fx(stage.add_input(src / "fx.csv"))
        report = daily_capacity(panel, characteristic("MCAP", panel), characteristic("LIQ", panel),
                                fx, AUM_GRID, gross, std, turnover, ctx.tercile_convention)
    table = report.table.copy()
    table.index = table.index.astype(int)
    out = _pct(table, ["small", "medium", "large", "rt_cost", "net_smb"])
    stage.csv("slippage.csv", out)
    stage.json("slippage.json", {"table": table.to_dict(orient="index"), "gross_smb": report.gross,
                                 "gross_std": report.gross_std, "turnover": report.turnover,
                                 "unit_slippage_per_usd": report.unit_slippage, "notes": report.notes})
    stage.figure("slippage", out[["small_pct", "medium_pct", "large_pct", "rt_cost_pct"]],
                 kind="bar", logy=True, title="One-way slippage and round-trip cost by AUM",
                 ylabel="%")
    return stage


def cmd_vol_sorts(ctx: RunConfig, args) -> Stage:
    stage = Stage(ctx, "vol-sorts")
    panel = _load_panel(ctx, stage)
    mkt = _require(_load_factors(ctx, stage), ("MKT",), "vol-sorts")["MKT"]
    risk = {n: rolling_risk(n, panel, mkt, denomination=ctx.denomination) for n in RISK_CHARACTERISTICS}
    table, hl = vol_sorts(panel, risk, ctx.denomination, ctx.tercile_convention)
    table.index.name = "characteristic"
    stage.csv("vol_sorts.csv", _pct(table, ["low", "mid", "high", "hl"]))
    hl.index.name = "date"
    stage.csv("high_minus_low.csv", hl)
    stage.json("vol_sorts.json", {"table": table.to_dict(orient="index")})
    legs, _ = tercile_legs(risk["VOL30"].values, panel, ctx.denomination, ctx.tercile_convention)
    legs.index.name = "date"
    stage.figure("vol_portfolios", plotting.cumulative(legs), logy=True, ylabel="growth of 1",
                 title="Cumulative returns of volatility terciles")
    return stage


def cmd_risk_decomp(ctx: RunConfig, args) -> Stage:
    stage = Stage(ctx, "risk-decomp")
    frame = _load_factors(ctx, stage)
    if _no_eligible(frame):
        raise CliError("no eligible observations: the factor sample is empty")
    rows, notes = {}, {}
    for name in [c for c in RISK_FACTORS if c in frame.columns]:
        try:
            rows[name] = risk_decomposition(frame[name]).as_dict()
            rows[name]["sharpe"] = summary_stats(frame[name], ctx.hac_lags).sharpe
        except (InsufficientSampleError, ZeroVarianceError) as exc:
            notes[name] = str(exc)
            rows[name] = {}
    table = pd.DataFrame.from_dict(rows, orient="index").reindex(
        index=list(rows), columns=["mean", "std", "down_dev", "up_dev", "down_up_ratio", "sortino", "sharpe",
                 "pct_negative"])
    table.index.name = "factor"
    out = _pct(table, ["mean", "std", "down_dev", "up_dev", "pct_negative"])
    stage.csv("risk_decomposition.csv", out)
    stage.json("risk_decomposition.json", {"table": table.to_dict(orient="index"),
                                           "unavailable": notes})
    stage.figure("risk_decomp_dev", out[["down_dev_pct", "up_dev_pct"]], kind="bar",
                 title="Downside vs upside semi-deviation", ylabel="%/day")
    stage.figure("risk_decomp_ratios", table[["sharpe", "sortino"]], kind="bar",
                 title="Sharpe vs Sortino (annualized)")
    return stage


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "build-panel": cmd_build_panel,
    "factors": cmd_factors,
    "stats": cmd_stats,
    "fm": cmd_fm,
    "grs": cmd_grs,
    "spanning": cmd_spanning,
    "subsample": cmd_subsample,
    "halving": cmd_halving,
    "placebo": cmd_placebo,
    "slippage": cmd_slippage,
    "vol-sorts": cmd_vol_sorts,
    "risk-decomp": cmd_risk_decomp,
}

DATA_ERRORS = (ValueError, KeyError, OSError, FetchError, np.linalg.LinAlgError)
# the data cannot support the statistic (too short, degenerate, collinear)
UNAVAILABLE = (InsufficientSampleError, ZeroVarianceError, SingularDesignError)


def cmd_report(ctx: RunConfig, args) -> int:
    """Run the source stage (if requested) and every downstream stage."""
    if args.snapshot or args.remote:
        if args.synth_config or args.preset:
            raise CliError("report needs exactly one data source")
        cmd_ingest(ctx, args).finish()
        ctx = dataclasses.replace(ctx, source="ingest")
    elif args.synth_config or args.preset:
        cmd_synth(ctx, args).finish()
        ctx = dataclasses.replace(ctx, source="synth")
    _source_dir(ctx)
    status = {}
    for name in ("build-panel",) + ANALYSIS_STAGES:
        try:
            COMMANDS[name](ctx, args).finish()
            status[name] = "ok"
        except UNAVAILABLE as exc:
            # recorded, not fatal: the stage is undefined on this sample
            stage = Stage(ctx, name)
            stage.json("unavailable.json", {"reason": str(exc), "error": type(exc).__name__})
            stage.finish()
            status[name] = f"unavailable: {exc}"
        except (CliError, *DATA_ERRORS) as exc:
            status[name] = f"failed: {exc}"
            print(f"ammfactors report: {name}: error: {exc}", file=sys.stderr)
            if name == "build-panel":
                break
    path = Path(ctx.out) / ROOT_MANIFEST
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    data["report"] = {"run": ctx.as_dict(), "status": status}
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = [k for k, v in status.items() if v.startswith("failed")]
    return 0 if status and not failed else 1


# -- argument parsing -----------------------------------------------------

def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--out", type=Path, help="run root directory (required)")
    g.add_argument("--config", type=Path, help="INI file with a [run] section of option defaults")
    g.add_argument("--source", choices=SOURCES, help="which snapshot to use when both exist")
    g.add_argument("--start", type=_date, help="first date (YYYY-MM-DD)")
    g.add_argument("--end", type=_date, help="last date (YYYY-MM-DD)")
    g.add_argument("--denomination", choices=("tao", "usd"))
    g.add_argument("--hac-lags", type=int, help=f"Newey-West lags (default {NW_LAGS})")
    g.add_argument("--winsor", type=float, help="winsorization bound on daily returns (default 1.0)")
    g.add_argument("--min-history", type=int, help="prior returns needed for eligibility (default 7)")
    g.add_argument("--tercile-convention", choices=TERCILE_CONVENTIONS,
                   help="rank cut points: ceil (default) or floor of N/3 and 2N/3")
    g.add_argument("--seed", type=int, help="random seed passed to the simulator")
    g.add_argument("--no-figures", action="store_true", help="write figure CSVs but skip SVGs")
    g.add_argument("-v", "--verbose", action="store_true")


def _ingest_opts(p) -> None:
    g = p.add_argument_group("ingest")
    g.add_argument("--snapshot", help="snapshot CSV/JSON file")
    g.add_argument("--remote", action="store_true",
                   help=f"fetch from the pool-data API (key in ${API_KEY_ENV})")
    g.add_argument("--fx", help="TAO/USD CSV with columns date,tao_usd")
    g.add_argument("--base-url", default=DEFAULT_BASE_URL)
    g.add_argument("--cache-dir", type=Path, help="on-disk cache for API responses")


def _synth_opts(p) -> None:
    g = p.add_argument_group("synth")
    g.add_argument("--synth-config", help="key = value simulator config (SynthConfig field names)")
    g.add_argument("--preset", choices=("prop1", "halving"),
                   help="built-in configuration when no --synth-config is given")
    g.add_argument("--noise-std", type=float, help="override the simulator's daily noise")


def _analysis_opts(p, only=None) -> None:
    def want(name):
        return only is None or name in only
    if want("fm"):
        p.add_argument("--min-obs", type=int, default=FM_MIN_OBS,
                       help="first-pass minimum observations per subnet")
    if want("grs"):
        p.add_argument("--grs-portfolios", choices=("full", "reduced"), default="full",
                       help="12 tercile legs (full) or drop the legs spanned by factors (reduced)")
    if want("spanning"):
        p.add_argument("--hac", action="store_true", help="Newey-West t for spanning alphas")
    if want("subsample"):
        p.add_argument("--split-date", help="last date of the first half (default: auto)")
    if want("event"):
        p.add_argument("--event-date", help="event date (default: simulator halving or 2025-12-14)")
    if want("halving"):
        p.add_argument("--windows", type=_int_list, help="comma-separated half-widths in days")
        p.add_argument("--no-market-control", action="store_true")
    if want("placebo"):
        p.add_argument("--offsets", type=_int_list, help="comma-separated placebo offsets (days)")
        p.add_argument("--window", type=int, default=60)
    if want("slippage"):
        p.add_argument("--reference-slippage", help="small,medium,large one-way slippage in %% "
                                                    "at --reference-aum (skips the panel)")
        p.add_argument("--reference-aum", type=float, help="AUM in USD for --reference-slippage")
        p.add_argument("--gross", type=float, help="gross SMB in %%/day (default: measured)")
        p.add_argument("--gross-std", type=float, help="SMB daily std in %% (default: measured)")
        p.add_argument("--tao-usd", type=float, help="constant TAO/USD price")
        p.add_argument("--turnover", type=float, help="daily turnover fraction (default 1)")


HELP = {
    "ingest": "load a snapshot file or fetch from the API into ingest/",
    "synth": "simulate a pool network into synth/",
    "build-panel": "returns, winsorization and eligibility",
    "factors": "characteristics, tercile sorts and long-short factors",
    "stats": "factor summary statistics and correlations",
    "fm": "Fama-MacBeth two-pass regressions",
    "grs": "GRS test on 12 tercile portfolios",
    "spanning": "spanning regressions of each factor on the rest",
    "subsample": "split-sample factor means",
    "halving": "event study of SMB around the emission cut",
    "placebo": "event study at false dates",
    "slippage": "slippage, round-trip cost and net SMB by AUM",
    "vol-sorts": "rolling-risk tercile sorts",
    "risk-decomp": "semi-deviations and Sortino ratios",
    "report": "run every stage and write the run manifest",
}
ANALYSIS_ARGS = {"fm": {"fm"}, "grs": {"grs"}, "spanning": {"spanning"}, "subsample": {"subsample"},
                 "halving": {"event", "halving"}, "placebo": {"event", "placebo"},
                 "slippage": {"slippage"}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ammfactors", description=__doc__.split("\n")[0],
        epilog=f"API credentials are read from ${API_KEY_ENV}. Exit codes: 0 ok, 1 error, 2 usage.")
    parser.add_argument("--version", action="version", version=f"ammfactors {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in ("ingest", "synth", "build-panel", *ANALYSIS_STAGES, "report"):
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        _common(p)
        if name in ("ingest", "report"):
            _ingest_opts(p)
        if name in ("synth", "report"):
            _synth_opts(p)
        if name == "report":
            _analysis_opts(p)
        elif name in ANALYSIS_ARGS:
            _analysis_opts(p, ANALYSIS_ARGS[name])
    return parser


_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"out", "figures"}


def _file_defaults(path: Path, parser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        parser.error(f"cannot read config file {path}")
    if not cp.has_section("run"):
        parser.error(f"{path}: expected a [run] section")
    out = {}
    for key, value in cp["run"].items():
        key = key.replace("-", "_")
        if key not in _RUN_KEYS and key != "out":
            parser.error(f"{path}: unknown key {key!r}")
        out[key] = value
    return out


def run_config(args, parser) -> RunConfig:
    file = _file_defaults(args.config, parser) if args.config else {}

    def pick(key, conv=str, default=None):
        val = getattr(args, key, None)
        if val is not None:
            return val
        if key in file:
            try:
                return conv(file[key])
            except ValueError:
                parser.error(f"config key {key}: bad value {file[key]!r}")
        return default

    out = pick("out", Path)
    if out is None:
        parser.error("--out is required (or set out in the config file)")
    ctx = RunConfig(
        out=Path(out), source=pick("source"), start=pick("start", _date), end=pick("end", _date),
        denomination=pick("denomination", default="tao"), hac_lags=pick("hac_lags", int, NW_LAGS),
        winsor=pick("winsor", float, 1.0), min_history=pick("min_history", int, 7),
        tercile_convention=pick("tercile_convention", default="ceil"), seed=pick("seed", int),
        figures=not args.no_figures)
    if ctx.denomination not in ("tao", "usd"):
        parser.error(f"denomination must be tao or usd, got {ctx.denomination!r}")
    if ctx.tercile_convention not in TERCILE_CONVENTIONS:
        parser.error(f"tercile convention must be one of {TERCILE_CONVENTIONS}")
    if ctx.source is not None and ctx.source not in SOURCES:
        parser.error(f"source must be one of {SOURCES}")
    if ctx.start and ctx.end and ctx.start > ctx.end:
        parser.error("--start is after --end")
    if ctx.hac_lags < 0 or ctx.winsor <= 0 or ctx.min_history < 0:
        parser.error("hac lags and min history must be >= 0 and the winsor bound > 0")
    return ctx


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx = run_config(args, parser)
    if args.command == "ingest" and bool(args.snapshot) == bool(args.remote):
        parser.error("ingest needs exactly one of --snapshot or --remote")
    try:
        with RunLock(ctx.out):
            if args.command == "report":
                return cmd_report(ctx, args)
            COMMANDS[args.command](ctx, args).finish()
    except (CliError, *DATA_ERRORS) as exc:
        print(f"ammfactors {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
