"""Regression kernels and test statistics for daily factor series.

Conventions
-----------
* Every multi-series routine first intersects the non-missing dates of its
  inputs.
* OLS p-values use the Student t reference with ``n - k`` degrees of
  freedom; HAC and Fama-MacBeth p-values use the standard normal.
* Newey-West covariances use Bartlett weights ``1 - j/(L+1)`` and no
  small-sample correction, so ``lags=0`` is White's HC0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from .factors import DAYS_PER_YEAR

NW_LAGS = 5
FM_MIN_OBS = 60


class SingularDesignError(np.linalg.LinAlgError):
    pass


class ZeroVarianceError(ValueError):
    pass


class InsufficientSampleError(ValueError):
    pass


def _norm_p(t):
    with np.errstate(invalid="ignore"):
        return 2.0 * stats.norm.sf(np.abs(t))


@dataclass(frozen=True)
class RegressionResult:
    names: list[str]
    params: np.ndarray
    bse: np.ndarray
    resid: np.ndarray
    X: np.ndarray
    y: np.ndarray
    rsquared: float
    index: pd.Index | None = None
    hac_lags: int | None = None
    hac_bse: np.ndarray | None = None

    @property
    def nobs(self) -> int:
        return len(self.y)

    @property
    def df_resid(self) -> int:
        return self.X.shape[0] - self.X.shape[1]

    @property
    def tvalues(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.bse > 0, self.params / self.bse, np.nan)

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return 2.0 * stats.t.sf(np.abs(self.tvalues), self.df_resid)

    @property
    def hac_tvalues(self) -> np.ndarray:
        if self.hac_bse is None:
            raise ValueError("HAC errors not computed; call with_hac()")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.hac_bse > 0, self.params / self.hac_bse, np.nan)

    @property
    def hac_pvalues(self) -> np.ndarray:
        return _norm_p(self.hac_tvalues)

    def with_hac(self, lags: int = NW_LAGS) -> "RegressionResult":
        return replace(self, hac_lags=lags, hac_bse=newey_west_se(self, lags))

    def param(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def summary_frame(self) -> pd.DataFrame:
        out = {"coef": self.params, "se": self.bse, "t": self.tvalues, "p": self.pvalues}
        if self.hac_bse is not None:
            out.update(hac_se=self.hac_bse, hac_t=self.hac_tvalues, hac_p=self.hac_pvalues)
        return pd.DataFrame(out, index=self.names)


def _design(y, X, intercept: bool, names):
    y = pd.Series(y) if not isinstance(y, pd.Series) else y
    if X is None:
        Xf = pd.DataFrame(index=y.index)
    elif isinstance(X, pd.Series):
        Xf = X.to_frame()
    elif isinstance(X, pd.DataFrame):
        Xf = X
    else:
        arr = np.asarray(X, dtype=float)
        arr = arr[:, None] if arr.ndim == 1 else arr
        Xf = pd.DataFrame(arr, index=y.index)
    if names is not None:
        Xf = Xf.set_axis(list(names), axis=1)
    else:
        Xf = Xf.set_axis([str(c) for c in Xf.columns], axis=1)
    if intercept:
        Xf = pd.concat([pd.Series(1.0, index=Xf.index if len(Xf.columns) else y.index,
                                  name="const"), Xf], axis=1)
    data = pd.concat([y.rename("__y__"), Xf], axis=1, join="inner").dropna()
    return data["__y__"].to_numpy(float), data.drop(columns="__y__"), data.index


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    offending, kept = [], []
    for j in range(X.shape[1]):
        cand = kept + [j]
        if np.linalg.matrix_rank(X[:, cand]) < len(cand):
            offending.append(names[j])
        else:
            kept.append(j)
    raise SingularDesignError(f"rank-deficient design; linearly dependent column(s): {offending}")


def ols(y, X=None, intercept: bool = True, names=None, hac_lags: int | None = None) -> RegressionResult:
    """Least-squares fit of ``y`` on ``X`` (plus a constant by default).

    Rows with any missing value are dropped first. Pass ``hac_lags`` to
    attach Newey-West standard errors.
    """
    yv, Xf, index = _design(y, X, intercept, names)
    names = list(Xf.columns)
    Xv = Xf.to_numpy(float)
    n, k = Xv.shape
    if k == 0:
        raise ValueError("empty design")
    if n <= k:
        raise InsufficientSampleError(f"{n} observations for {k} regressors")
    _check_rank(Xv, names)
    params, *_ = np.linalg.lstsq(Xv, yv, rcond=None)
    resid = yv - Xv @ params
    sigma2 = resid @ resid / (n - k)
    xtx_inv = np.linalg.inv(Xv.T @ Xv)
    bse = np.sqrt(np.maximum(np.diag(xtx_inv) * sigma2, 0.0))
    ssr = float(resid @ resid)
    centered = yv - yv.mean() if intercept else yv
    sst = float(centered @ centered)
    r2 = 1.0 - ssr / sst if sst > 0 else (1.0 if ssr == 0 else float("nan"))
    res = RegressionResult(names, params, bse, resid, Xv, yv, r2, index)
    return res.with_hac(hac_lags) if hac_lags is not None else res


def newey_west_cov(X: np.ndarray, resid: np.ndarray, lags: int = NW_LAGS) -> np.ndarray:
    """Bartlett-kernel HAC covariance ``(X'X)^-1 S (X'X)^-1``."""
    n = X.shape[0]
    if lags < 0 or lags != int(lags):
        raise ValueError(f"lags must be a non-negative integer, got {lags}")
    if lags >= n:
        raise ValueError(f"lags ({lags}) must be smaller than the sample size ({n})")
    xe = X * resid[:, None]
    S = xe.T @ xe
    for j in range(1, lags + 1):
        w = 1.0 - j / (lags + 1.0)
        G = xe[j:].T @ xe[:-j]
        S += w * (G + G.T)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


def newey_west_se(result: RegressionResult, lags: int = NW_LAGS) -> np.ndarray:
    cov = newey_west_cov(result.X, result.resid, lags)
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


# -- summary statistics ---------------------------------------------------

@dataclass(frozen=True)
class SummaryStats:
    mean: float
    std: float
    sharpe: float
    t_ols: float
    t_nw: float
    skew: float
    kurt: float
    n: int
    kurtosis_kind: str = "raw"
    nw_lags: int = NW_LAGS

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mean", "std", "sharpe", "t_ols", "t_nw", "skew", "kurt", "n")}


def summary_stats(series, lags: int = NW_LAGS, kurtosis: str = "raw") -> SummaryStats:
    """Daily mean, std, annualized Sharpe, OLS and Newey-West t, skew, kurtosis.

    Skewness and kurtosis are the bias-adjusted sample estimators; ``raw``
    kurtosis is the adjusted excess kurtosis plus 3.
    """
    if kurtosis not in ("raw", "excess"):
        raise ValueError("kurtosis must be 'raw' or 'excess'")
    s = pd.Series(series, dtype=float).dropna()
    n = len(s)
    if n < 2:
        raise InsufficientSampleError(f"need at least 2 observations, got {n}")
    x = s.to_numpy()
    mean = float(x.mean())
    std = float(x.std(ddof=1))
    if not std > 1e-15 * max(1.0, abs(mean)):
        raise ZeroVarianceError("series has zero variance; Sharpe and t are undefined")
    sharpe = mean * DAYS_PER_YEAR / (std * math.sqrt(DAYS_PER_YEAR))
    t_ols = mean / (std / math.sqrt(n))
    t_nw = float(ols(s, None, intercept=True, hac_lags=lags).hac_tvalues[0])
    skew = float(stats.skew(x, bias=False)) if n > 2 else float("nan")
    ex = float(stats.kurtosis(x, fisher=True, bias=False)) if n > 3 else float("nan")
    kurt = ex + 3.0 if kurtosis == "raw" else ex
    return SummaryStats(mean, std, sharpe, t_ols, t_nw, skew, kurt, n, kurtosis, lags)


def summary_table(factors: pd.DataFrame, lags: int = NW_LAGS, kurtosis: str = "raw") -> pd.DataFrame:
    return pd.DataFrame({c: summary_stats(factors[c], lags, kurtosis).as_dict()
                         for c in factors.columns}).T


# -- Fama-MacBeth ---------------------------------------------------------

@dataclass(frozen=True)
class FamaMacBethResult:
    premia: pd.Series
    se: pd.Series
    slopes: pd.DataFrame
    betas: pd.DataFrame
    diagnostics: dict = field(default_factory=dict)

    @property
    def tvalues(self) -> pd.Series:
        return (self.premia / self.se.where(self.se > 0)).rename("t")

    @property
    def pvalues(self) -> pd.Series:
        return pd.Series(_norm_p(self.tvalues.to_numpy()), index=self.premia.index, name="p")

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"premium": self.premia, "se": self.se,
                             "t": self.tvalues, "p": self.pvalues})


def first_pass_betas(returns: pd.DataFrame, factors: pd.DataFrame,
                     min_obs: int = FM_MIN_OBS) -> pd.DataFrame:
    """Full-sample time-series betas per subnet (subnets with < min_obs days dropped)."""
    betas = {}
    for col in returns.columns:
        data = pd.concat([returns[col].rename("__r__"), factors], axis=1, join="inner").dropna()
        if len(data) < max(min_obs, factors.shape[1] + 2):
            continue
        try:
            res = ols(data["__r__"], data[factors.columns], intercept=True)
        except SingularDesignError:
            continue
        betas[col] = res.params[1:]
    return pd.DataFrame(betas, index=list(factors.columns)).T


def fm_second_pass(returns: pd.DataFrame, betas: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Daily cross-sectional OLS of returns on betas; returns (slopes, skipped days)."""
    names = ["const"] + [f"beta_{c}" for c in betas.columns]
    k = len(names)
    B = betas.to_numpy(float)
    R = returns.reindex(columns=betas.index).to_numpy(float)
    slopes, days, skipped = [], [], 0
    for t, day in enumerate(returns.index):
        ok = ~np.isnan(R[t])
        if ok.sum() < k + 1:
            skipped += 1
            continue
        X = np.column_stack([np.ones(ok.sum()), B[ok]])
        if np.linalg.matrix_rank(X) < k:
            skipped += 1
            continue
        coef, *_ = np.linalg.lstsq(X, R[t, ok], rcond=None)
        slopes.append(coef)
        days.append(day)
    return pd.DataFrame(slopes, index=pd.Index(days, name=returns.index.name), columns=names), skipped


def fama_macbeth(returns: pd.DataFrame, factors: pd.DataFrame, min_obs: int = FM_MIN_OBS,
                 mask: pd.DataFrame | None = None) -> FamaMacBethResult:
    """Two-pass Fama-MacBeth with full-sample first-pass betas.

    ``mask`` (e.g. the eligibility matrix) restricts which subnet-days enter
    both passes. Premium standard errors are ``std(slopes) / sqrt(T)``.
    """
    if isinstance(factors, (list, tuple)):
        factors = pd.DataFrame({f.name: f.returns for f in factors})  # FactorSeries list
    if mask is not None:
        returns = returns.where(mask.reindex_like(returns).fillna(False).astype(bool))
    f = factors.dropna()
    _check_rank(np.column_stack([np.ones(len(f)), f.to_numpy(float)]),
                ["const", *map(str, factors.columns)])
    betas = first_pass_betas(returns, factors, min_obs)
    if betas.empty:
        raise InsufficientSampleError(f"no subnet has {min_obs} usable days for first-pass betas")
    slopes, skipped = fm_second_pass(returns, betas)
    if len(slopes) < 2:
        raise InsufficientSampleError("fewer than 2 usable cross-sections")
    premia = slopes.mean()
    se = slopes.std(ddof=1) / math.sqrt(len(slopes))
    R = returns.reindex(index=slopes.index, columns=betas.index)
    diag = {
        "min_obs": min_obs,
        "n_subnets": int(len(betas)),
        "n_cross_sections": int(len(slopes)),
        "n_skipped_days": int(skipped),
        "avg_cross_section": float(R.notna().sum(axis=1).mean()),
    }
    return FamaMacBethResult(premia.rename("premium"), se.rename("se"), slopes, betas, diag)


# -- GRS ------------------------------------------------------------------

@dataclass(frozen=True)
class GRSResult:
    F: float
    pvalue: float
    alphas: pd.Series
    T: int
    N: int
    K: int

    @property
    def mean_abs_alpha(self) -> float:
        return float(self.alphas.abs().mean())


def grs_test(portfolios: pd.DataFrame, factors: pd.DataFrame) -> GRSResult:
    """Gibbons-Ross-Shanken F test that all time-series intercepts are zero.

    Uses maximum-likelihood residual and factor covariances (divisor T), for
    which the statistic is exactly F(N, T-N-K) under i.i.d. normal errors.
    """
    if isinstance(factors, pd.Series):
        factors = factors.to_frame()
    # positional split, so overlapping column names cannot collide
    data = pd.concat([portfolios, factors], axis=1, join="inner", keys=["R", "f"]).dropna()
    R = data["R"].to_numpy(float)
    f = data["f"].to_numpy(float)
    T, N = R.shape
    K = f.shape[1]
    if T <= N + K:
        raise InsufficientSampleError(f"GRS needs T > N + K; have T={T}, N={N}, K={K}")
    X = np.column_stack([np.ones(T), f])
    _check_rank(X, ["const", *map(str, factors.columns)])
    coef, *_ = np.linalg.lstsq(X, R, rcond=None)
    alpha = coef[0]
    E = R - X @ coef
    sigma = E.T @ E / T
    mu = f.mean(axis=0)
    fc = f - mu
    omega = fc.T @ fc / T
    if np.linalg.cond(sigma) > 1e12:
        raise SingularDesignError("residual covariance is singular")
    quad_a = float(alpha @ np.linalg.solve(sigma, alpha))
    quad_f = float(mu @ np.linalg.solve(omega, mu))
    F = (T - N - K) / N * quad_a / (1.0 + quad_f)
    p = float(stats.f.sf(F, N, T - N - K))
    return GRSResult(F, p, pd.Series(alpha, index=portfolios.columns, name="alpha"), T, N, K)


# -- spanning -------------------------------------------------------------

def spanning_alphas(factors: pd.DataFrame, hac_lags: int | None = None) -> pd.DataFrame:
    """Intercept, its t, and R^2 from regressing each factor on all the others.

    t-statistics use OLS errors unless ``hac_lags`` is given.
    """
    data = factors.dropna()
    rows = {}
    for name in data.columns:
        others = [c for c in data.columns if c != name]
        res = ols(data[name], data[others], intercept=True, hac_lags=hac_lags)
        t = res.hac_tvalues[0] if hac_lags is not None else res.tvalues[0]
        rows[name] = {"alpha": float(res.params[0]), "t": float(t),
                      "r2": float(res.rsquared), "n": res.nobs}
    return pd.DataFrame.from_dict(rows, orient="index")


# -- downside risk --------------------------------------------------------

@dataclass(frozen=True)
class RiskDecomposition:
    mean: float
    std: float
    down_dev: float
    up_dev: float
    down_up_ratio: float
    sortino: float
    pct_negative: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def semi_deviations(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return (float(np.sqrt(np.mean(np.minimum(x, 0.0) ** 2))),
            float(np.sqrt(np.mean(np.maximum(x, 0.0) ** 2))))


def risk_decomposition(series) -> RiskDecomposition:
    """Downside/upside semi-deviations and the annualized Sortino ratio."""
    x = pd.Series(series, dtype=float).dropna().to_numpy()
    if len(x) < 2:
        raise InsufficientSampleError("need at least 2 observations")
    down, up = semi_deviations(x)
    if down == 0:
        raise ZeroVarianceError("downside deviation is zero; Sortino is undefined")
    mean = float(x.mean())
    sortino = mean * DAYS_PER_YEAR / (down * math.sqrt(DAYS_PER_YEAR))
    ratio = down / up if up > 0 else float("inf")
    return RiskDecomposition(mean, float(x.std(ddof=1)), down, up, ratio, sortino,
                             float((x < 0).mean()))


def correlation_matrix(factors: pd.DataFrame) -> pd.DataFrame:
    """Pairwise correlations on the common non-missing sample."""
    return factors.dropna().corr()
