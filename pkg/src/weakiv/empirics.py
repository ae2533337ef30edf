"""Per-country consumption-Euler regressions for the EIS.

Two normalizations of the same moment conditions are estimated:

``psi``
    ``dc_{t+1} = mu_c + psi r_{t+1} + u_{t+1}``
``invpsi``
    ``r_{t+1} = mu_r + (1/psi) dc_{t+1} + eta_{t+1}``

Input schemas (CSV, UTF-8, header row):

``yogo``
    ``date, dc, r, z_nominal_rate, z_inflation, z_dc_lag, z_dp`` and an
    optional ``country`` column. Instrument columns are already lagged.
``housing``
    ``year, country, dc, r``. Instruments are a lag of the own return and the
    mean return of the other countries, built here.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import IVDataset
from .covariance import newey_west
from .errors import DimensionError, GapError, ParseError, SchemaError
from .estimators import estimate_liml, two_step_gmm
from .stats import effective_f, j_test, kp_test

SCHEMA_VERSION = 1
YOGO_INSTRUMENTS = ("z_nominal_rate", "z_inflation", "z_dc_lag", "z_dp")
SCHEMAS = {
    "yogo": ("date", "dc", "r") + YOGO_INSTRUMENTS,
    "housing": ("year", "country", "dc", "r"),
}
OPTIONAL = {"yogo": ("country",), "housing": ()}
NORMALIZATIONS = ("psi", "invpsi")
REPORT_COLUMNS = (
    "country",
    "normalization",
    "period",
    "n",
    "f_eff",
    "kappa",
    "beta_2sls",
    "beta_liml",
    "j_stat",
    "kp_stat",
)


@dataclass(frozen=True)
class CountryPanel:
    country: str
    dates: tuple
    dc: np.ndarray
    r: np.ndarray
    instruments: np.ndarray
    instrument_names: tuple = field(default_factory=tuple)

    def __post_init__(self):
        T = len(self.dates)
        inst = np.asarray(self.instruments, dtype=float)
        if inst.ndim != 2:
            raise DimensionError("instruments must be a matrix")
        if not (len(self.dc) == len(self.r) == inst.shape[0] == T):
            raise DimensionError("panel series have different lengths")
        if inst.shape[1] < 2:
            raise DimensionError("need at least two instruments")
        if not all(np.all(np.isfinite(a)) for a in (self.dc, self.r, inst)):
            raise GapError("panel contains missing values")
        object.__setattr__(self, "instruments", inst)

    @property
    def period(self) -> tuple:
        return (self.dates[0], self.dates[-1])

    @property
    def T(self) -> int:
        return len(self.dates)

    def dataset(self, normalization: str) -> IVDataset:
        """IV dataset with an intercept control for the chosen normalization."""
        if normalization == "psi":
            y, x = self.dc, self.r
        elif normalization == "invpsi":
            y, x = self.r, self.dc
        else:
            raise SchemaError(f"unknown normalization {normalization!r}")
        return IVDataset(
            y=y,
            X=x,
            Z=self.instruments,
            X_exog=np.ones((self.T, 1)),
            names={"country": self.country, "z": list(self.instrument_names)},
        )


def _float(text: str) -> float:
    t = text.strip()
    if t == "" or t.upper() in ("NA", "NAN", "."):
        return math.nan
    try:
        return float(t)
    except ValueError as exc:
        raise ParseError(f"not a number: {text!r}") from exc


def _read_rows(path, schema: str):
    if schema not in SCHEMAS:
        raise SchemaError(f"unknown schema {schema!r}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        raise ParseError(f"{path} is empty")
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    reader.fieldnames = header
    missing = [c for c in SCHEMAS[schema] if c not in header]
    if missing:
        raise SchemaError(f"missing columns for schema {schema}: {', '.join(missing)}")
    extra = [c for c in header if c not in SCHEMAS[schema] + OPTIONAL[schema]]
    if extra:
        warnings.warn(f"ignoring unknown columns: {', '.join(extra)}", stacklevel=3)
    rows = list(reader)
    if not rows:
        raise ParseError(f"{path} has no data rows")
    return rows


def _trim(values: np.ndarray) -> slice:
    """Span of rows with complete data; incomplete rows are allowed only at the ends."""
    ok = np.all(np.isfinite(values), axis=1)
    if not ok.any():
        raise GapError("no complete rows")
    idx = np.flatnonzero(ok)
    lo, hi = idx[0], idx[-1] + 1
    if not ok[lo:hi].all():
        raise GapError("interior missing value")
    return slice(lo, hi)


def _group(rows, key):
    groups: dict = {}
    for row in rows:
        groups.setdefault(row.get(key, "").strip() if key else "", []).append(row)
    return groups


def _yogo_panels(rows) -> dict:
    cols = ("dc", "r") + YOGO_INSTRUMENTS
    has_country = "country" in rows[0]
    out = {}
    for country, grp in _group(rows, "country" if has_country else None).items():
        vals = np.array([[_float(r[c]) for c in cols] for r in grp])
        sl = _trim(vals)
        v = vals[sl]
        dates = tuple(r["date"].strip() for r in grp[sl])
        out[country or "ALL"] = CountryPanel(
            country=country or "ALL",
            dates=dates,
            dc=v[:, 0],
            r=v[:, 1],
            instruments=v[:, 2:],
            instrument_names=YOGO_INSTRUMENTS,
        )
    return out


def build_lagged_instruments(series: dict, lags: int) -> tuple[dict, int]:
    """Shift each named series down by ``lags`` rows.

    Returns the lagged columns, each of length ``T - lags`` and aligned with
    rows ``lags..T-1`` of the originals, together with the number of leading
    rows that must be dropped from the outcomes (``lags``).
    """
    if lags < 1:
        raise DimensionError("lags must be at least 1")
    out = {}
    for name, s in series.items():
        s = np.asarray(s, dtype=float)
        if lags >= s.shape[0]:
            raise DimensionError("lags must be shorter than the series")
        out[name] = s[: s.shape[0] - lags]
    return out, lags


def build_loo_mean_instrument(returns_by_country: dict, target: str) -> np.ndarray:
    """Mean of the other countries' series, period by period."""
    if len(returns_by_country) < 2:
        raise DimensionError("need at least two countries")
    if target not in returns_by_country:
        raise DimensionError(f"unknown country {target!r}")
    lengths = {np.asarray(v).shape[0] for v in returns_by_country.values()}
    if len(lengths) != 1:
        raise DimensionError("series are not aligned")
    others = [np.asarray(v, dtype=float) for k, v in returns_by_country.items() if k != target]
    return np.mean(others, axis=0)


def _housing_panels(rows, own_lag: int) -> dict:
    by_country = {}
    for country, grp in _group(rows, "country").items():
        if not country:
            raise SchemaError("housing rows need a country code")
        grp = sorted(grp, key=lambda r: int(_float(r["year"])))
        years = np.array([int(_float(r["year"])) for r in grp])
        if np.any(np.diff(years) != 1):
            raise GapError(f"{country}: years are not consecutive")
        vals = np.array([[_float(r["dc"]), _float(r["r"])] for r in grp])
        sl = _trim(vals)
        by_country[country] = (years[sl], vals[sl])
    if len(by_country) < 2:
        raise DimensionError("housing instruments need at least two countries")
    lo = max(y[0] for y, _ in by_country.values())
    hi = min(y[-1] for y, _ in by_country.values())
    if hi - lo + 1 <= own_lag + 3:
        raise DimensionError("countries share too few years")
    common = {}
    for c, (years, vals) in by_country.items():
        m = (years >= lo) & (years <= hi)
        common[c] = (years[m], vals[m])
    returns = {c: v[:, 1] for c, (_, v) in common.items()}
    out = {}
    for c, (years, vals) in common.items():
        lagged, drop = build_lagged_instruments({"r_lag": vals[:, 1]}, own_lag)
        loo = build_loo_mean_instrument(returns, c)[drop:]
        out[c] = CountryPanel(
            country=c,
            dates=tuple(str(y) for y in years[drop:]),
            dc=vals[drop:, 0],
            r=vals[drop:, 1],
            instruments=np.column_stack([lagged["r_lag"], loo]),
            instrument_names=(f"r_lag{own_lag}", "r_foreign_mean"),
        )
    return out


def load_panels(path, schema: str, instruments: str = "lag1") -> dict:
    """All country panels in a file, keyed by country code.

    ``instruments`` selects the own-return lag for the housing schema
    (``lag1`` or ``lag2``); it is ignored for ``yogo``.
    """
    rows = _read_rows(path, schema)
    if schema == "yogo":
        return _yogo_panels(rows)
    lags = {"lag1": 1, "lag2": 2}.get(instruments)
    if lags is None:
        raise SchemaError(f"unknown instrument set {instruments!r}")
    return _housing_panels(rows, lags)


def load_panel(path, schema: str, country: str | None = None, instruments: str = "lag1") -> CountryPanel:
    panels = load_panels(path, schema, instruments)
    if country is None:
        if len(panels) != 1:
            raise SchemaError("file holds several countries; pass one explicitly")
        return next(iter(panels.values()))
    try:
        return panels[country]
    except KeyError as exc:
        raise SchemaError(f"country {country!r} not in file") from exc


def default_hac_lags(country: str, schema: str) -> int:
    """Six lags for the long US quarterly sample, four otherwise."""
    if schema == "yogo" and country.upper() == "USA":
        return 6
    return 4


@dataclass(frozen=True)
class EISRow:
    country: str
    normalization: str
    period: str
    n: int
    f_eff: float
    kappa: float
    beta_2sls: float
    beta_liml: float
    j_stat: float
    kp_stat: float

    def to_dict(self) -> dict:
        return asdict(self)


def run_eis_row(panel: CountryPanel, normalization: str, hac_lags: int) -> EISRow:
    """Estimates and tests for one country and normalization, all with
    Newey-West(``hac_lags``) meat and a partialled-out intercept."""
    spec = newey_west(hac_lags)
    d = panel.dataset(normalization)
    feff = effective_f(d, spec)
    first, second = two_step_gmm(d, spec)
    liml = estimate_liml(d)
    J = j_test(d, first, second, spec)
    KP = kp_test(d, spec)
    return EISRow(
        country=panel.country,
        normalization=normalization,
        period=f"{panel.period[0]}-{panel.period[1]}",
        n=panel.T,
        f_eff=feff.statistic,
        kappa=feff.critical_value,
        beta_2sls=float(first.beta_hat[0]),
        beta_liml=float(liml.beta_hat[0]),
        j_stat=J.statistic,
        kp_stat=KP.statistic,
    )


def eis_report(panels: dict, normalizations, schema: str, hac_lags: int | None = None) -> list:
    """Rows grouped by normalization, countries in code order."""
    rows = []
    for norm in normalizations:
        for c in sorted(panels):
            L = default_hac_lags(c, schema) if hac_lags is None else hac_lags
            rows.append(run_eis_row(panels[c], norm, L))
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        d = r.to_dict()
        w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(rows) -> str:
    return json.dumps(
        {"schema_version": SCHEMA_VERSION, "rows": [r.to_dict() for r in rows]},
        indent=2,
    )
