"""Monte Carlo harness for the estimators' asymptotic claims.

Four kinds of runs, each producing a report with explicit pass/fail
claims whose thresholds are scenario data, not code constants:

* ``consistency``: the MM slope error shrinks at the root-n rate across
  a ladder of sample sizes, with or without symmetric errors.
* ``expansion``: the centered estimate matches the averaged influence
  function up to a remainder that is small and shrinking, using
  population constants obtained by quadrature.
* ``normality``: the empirical covariance of the root-n-scaled MM block
  matches the integration-oracle covariance, and the efficiency relative
  to least squares at normal errors comes out as tuned.
* ``contamination``: point contamination up to 40 percent with outliers
  of growing magnitude moves the MM slope by a bounded, non-exploding
  amount.

Replications run on independent counter-based substreams, so serial and
parallel execution produce bit-identical reports.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate, optimize

from .estimators import FitConfig, fit
from .exceptions import RobustmmError, ScenarioError
from .inference import InferenceConstants
from .model import Dataset, RegressionModel, exp_model, linear_model, location_model
from .rho import RhoFunction, bisquare

__all__ = [
    "ErrorLaw",
    "make_error_law",
    "SimScenario",
    "SimReport",
    "Claim",
    "load_scenario",
    "run_scenario",
    "run_consistency",
    "run_expansion_check",
    "run_normality",
    "run_contamination",
    "population_centers",
    "population_constants",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# error laws

@dataclass(frozen=True)
class ErrorLaw:
    """Error distribution with everything the harness needs: density and
    distribution function for quadrature, a sampler, and the flags the
    uniqueness theory cares about."""

    name: str
    scale: float = 1.0
    shift: float = 0.0
    eps: float = 0.0
    outlier_scale: float = 10.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("error scale must be positive")
        if self.name == "contaminated-normal" and not 0.0 <= self.eps < 1.0:
            raise ValueError("contamination weight must lie in [0, 1)")

    @property
    def symmetric(self) -> bool:
        return self.name in ("normal", "contaminated-normal", "bimodal-normal")

    @property
    def strongly_unimodal(self) -> bool:
        return self.name != "bimodal-normal"

    @property
    def center(self) -> float:
        return self.shift if self.name == "bimodal-normal" else (
            self.shift if self.name == "shifted-exponential" else 0.0)

    @property
    def support(self) -> tuple:
        if self.name == "shifted-exponential":
            return (self.shift, np.inf)
        return (-np.inf, np.inf)

    def plausible_range(self) -> tuple:
        if self.name == "shifted-exponential":
            return (self.shift - 5.0 * self.scale, self.shift + 25.0 * self.scale)
        width = 12.0 * max(self.scale, self.outlier_scale if
                           self.name == "contaminated-normal" else self.scale)
        if self.name == "bimodal-normal":
            width += 3.0 * abs(self.shift)
        return (-width, width)

    def variance(self) -> float:
        if self.name == "normal":
            return self.scale ** 2
        if self.name == "shifted-exponential":
            return self.scale ** 2
        if self.name == "contaminated-normal":
            return (1 - self.eps) * self.scale ** 2 + self.eps * self.outlier_scale ** 2
        if self.name == "bimodal-normal":
            return self.scale ** 2 + self.shift ** 2
        raise ValueError(self.name)

    def pdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.name == "normal":
            z = u / self.scale
            return np.exp(-0.5 * z * z) / (self.scale * _SQRT_2PI)
        if self.name == "shifted-exponential":
            lam = 1.0 / self.scale
            out = np.where(u >= self.shift, lam * np.exp(-lam * (u - self.shift)), 0.0)
            return out
        if self.name == "contaminated-normal":
            z1 = u / self.scale
            z2 = u / self.outlier_scale
            return ((1 - self.eps) * np.exp(-0.5 * z1 * z1) / (self.scale * _SQRT_2PI)
                    + self.eps * np.exp(-0.5 * z2 * z2) / (self.outlier_scale * _SQRT_2PI))
        if self.name == "bimodal-normal":
            z1 = (u - self.shift) / self.scale
            z2 = (u + self.shift) / self.scale
            return 0.5 * (np.exp(-0.5 * z1 * z1) + np.exp(-0.5 * z2 * z2)) \
                / (self.scale * _SQRT_2PI)
        raise ValueError(self.name)

    def cdf(self, u):
        from scipy import stats
        if self.name == "normal":
            return stats.norm.cdf(u, scale=self.scale)
        if self.name == "shifted-exponential":
            return stats.expon.cdf(u, loc=self.shift, scale=self.scale)
        if self.name == "contaminated-normal":
            return ((1 - self.eps) * stats.norm.cdf(u, scale=self.scale)
                    + self.eps * stats.norm.cdf(u, scale=self.outlier_scale))
        if self.name == "bimodal-normal":
            return 0.5 * (stats.norm.cdf(u, loc=self.shift, scale=self.scale)
                          + stats.norm.cdf(u, loc=-self.shift, scale=self.scale))
        raise ValueError(self.name)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.name == "normal":
            return self.scale * rng.standard_normal(size)
        if self.name == "shifted-exponential":
            return self.shift + rng.exponential(self.scale, size)
        if self.name == "contaminated-normal":
            mask = rng.random(size) < self.eps
            base = rng.standard_normal(size)
            return np.where(mask, self.outlier_scale * base, self.scale * base)
        if self.name == "bimodal-normal":
            signs = np.where(rng.random(size) < 0.5, 1.0, -1.0)
            return signs * self.shift + self.scale * rng.standard_normal(size)
        raise ValueError(self.name)


_LAW_NAMES = ("normal", "shifted-exponential", "contaminated-normal", "bimodal-normal")


def make_error_law(name, scale=1.0, shift=0.0, eps=0.0, outlier_scale=10.0) -> ErrorLaw:
    if name not in _LAW_NAMES:
        raise ScenarioError(f"unknown error law {name!r}; known: {_LAW_NAMES}", key="errors")
    return ErrorLaw(name=name, scale=float(scale), shift=float(shift),
                    eps=float(eps), outlier_scale=float(outlier_scale))


# ---------------------------------------------------------------------------
# population quantities by quadrature

def _expect_window(law: ErrorLaw, fn, lo: float, hi: float) -> float:
    lo = max(lo, law.support[0])
    hi = min(hi, law.support[1])
    if hi <= lo:
        return 0.0
    val, _ = integrate.quad(lambda u: fn(u) * law.pdf(u), lo, hi, limit=200)
    return val


def _expected_rho(law: ErrorLaw, rho: RhoFunction, t: float, s: float) -> float:
    """E rho((u - t)/s): the loss is 1 outside the window [t-ks, t+ks]."""
    k = rho.k
    inside = _expect_window(law, lambda u: rho.rho((u - t) / s), t - k * s, t + k * s)
    lo_mass = law.cdf(t - k * s)
    hi_mass = 1.0 - law.cdf(t + k * s)
    return inside + lo_mass + hi_mass


def _scale_at(law: ErrorLaw, rho0: RhoFunction, delta: float, t: float) -> float:
    """Root s of E rho0((u - t)/s) = delta; the population scale equation
    at the candidate center t."""

    def gap(s):
        return _expected_rho(law, rho0, t, s) - delta

    s0 = max(law.scale, 1e-6)
    lo, hi = s0, s0
    for _ in range(200):
        if gap(lo) >= 0.0:
            break
        lo *= 0.5
    for _ in range(200):
        if gap(hi) <= 0.0:
            break
        hi *= 2.0
    return optimize.brentq(gap, lo, hi, xtol=1e-13, rtol=1e-13)


def _expected_score(law: ErrorLaw, rho: RhoFunction, t: float, s: float) -> float:
    k = rho.k
    return _expect_window(law, lambda u: rho.psi((u - t) / s),
                          t - k * s, t + k * s)


def _center_root(law: ErrorLaw, rho: RhoFunction, s: float, t0: float) -> float:
    """Zero of the expected score in t near t0. The score mean is strictly
    decreasing in t around the minimizer, so this pins the center far more
    precisely than the flat loss minimum itself."""

    def gap(t):
        return _expected_score(law, rho, t, s)

    width = 0.5 * s
    lo, hi = t0 - width, t0 + width
    for _ in range(60):
        if gap(lo) > 0.0:
            break
        lo -= width
    for _ in range(60):
        if gap(hi) < 0.0:
            break
        hi += width
    return float(optimize.brentq(gap, lo, hi, xtol=1e-13, rtol=8.9e-16))


def population_centers(law: ErrorLaw, rho0: RhoFunction, rho1: RhoFunction,
                       delta: float) -> tuple:
    """(sigma0, alpha00, alpha01): the population scale and the centers
    minimizing the expected losses at that scale.

    alpha00 minimizes the population scale itself; sigma0 is the attained
    minimum; alpha01 minimizes the expected fine loss at scale sigma0.
    A bounded scan localizes the coarse center; both centers are then
    polished to root-finder accuracy through their score equations. For
    symmetric laws both centers equal the symmetry center.
    """
    lo, hi = law.plausible_range()
    res0 = optimize.minimize_scalar(lambda t: _scale_at(law, rho0, delta, t),
                                    bounds=(lo, hi), method="bounded",
                                    options={"xatol": 1e-9})
    alpha00 = float(res0.x)
    sigma0 = float(res0.fun)
    # alternate the center's score equation with the scale equation; the
    # coupling is mild so a few sweeps reach quadrature accuracy
    for _ in range(3):
        alpha00 = _center_root(law, rho0, sigma0, alpha00)
        sigma0 = _scale_at(law, rho0, delta, alpha00)
    alpha01 = _center_root(law, rho1, sigma0, alpha00)
    return sigma0, alpha00, alpha01


def population_constants(law: ErrorLaw, rho0: RhoFunction, rho1: RhoFunction,
                         delta: float, b0: np.ndarray, A0: np.ndarray) -> InferenceConstants:
    """Quadrature versions of the plug-in constants, plus the design
    moments supplied by the caller. All centers are in the error-law
    frame; a true intercept on top of the law shifts only the joint
    parameter, never these moments."""
    sigma0, alpha00, alpha01 = population_centers(law, rho0, rho1, delta)

    def mom(rho, alpha, fn):
        k = rho.k
        return _expect_window(law, lambda u: fn((u - alpha) / sigma0),
                              alpha - k * sigma0, alpha + k * sigma0)

    return InferenceConstants(
        a00=mom(rho0, alpha00, rho0.psi_prime),
        a01=mom(rho1, alpha01, rho1.psi_prime),
        e00=mom(rho0, alpha00, lambda t: t * rho0.psi_prime(t)),
        e01=mom(rho1, alpha01, lambda t: t * rho1.psi_prime(t)),
        d0=mom(rho0, alpha00, lambda t: t * rho0.psi(t)),
        b0=b0, A0=A0, sigma0=sigma0,
        alpha00=alpha00, alpha01=alpha01,
        rho0=rho0, rho1=rho1, delta=delta)


def _oracle_mm_variance(law: ErrorLaw, c: InferenceConstants) -> np.ndarray:
    """Symmetric-error covariance of the MM block:
    sigma0^2 E psi1^2 / (E psi1')^2 C0^{-1} with C0 from the design."""
    from .inference import closed_form_c0_inv
    rho1 = c.rho1
    k = rho1.k
    alpha = c.alpha01
    s = c.sigma0
    num = _expect_window(law, lambda u: rho1.psi((u - alpha) / s) ** 2,
                         alpha - k * s, alpha + k * s)
    factor = s * s * num / c.a01 ** 2
    return factor * closed_form_c0_inv(c)


# ---------------------------------------------------------------------------
# scenarios

_KINDS = ("consistency", "expansion", "normality", "contamination")
_MODELS = ("location", "linear", "exp")

_DEFAULT_THRESHOLDS = {
    "consistency": {"ratio_lo": 0.35, "ratio_hi": 0.72, "max_failure_rate": 0.01},
    "expansion": {"remainder_ratio_max": 0.2, "max_failure_rate": 0.01},
    "normality": {"variance_rel_tol": 0.15, "efficiency_target": 0.95,
                  "efficiency_tol": 0.05, "quantile_tol": 0.15,
                  "max_failure_rate": 0.01},
    "contamination": {"se_multiple_max": 100.0, "magnitude_growth_max": 1.1,
                      "max_failure_rate": 0.01},
}


@dataclass(frozen=True)
class SimScenario:
    """Plain-data description of a simulation run; picklable so that
    replications can be shipped to worker processes."""

    kind: str
    model: str = "linear"
    p: int = 1
    beta0: tuple = (1.0,)
    alpha0: float = 0.0
    errors: str = "normal"
    error_scale: float = 1.0
    error_shift: float = 0.0
    error_eps: float = 0.0
    error_outlier_scale: float = 10.0
    sizes: tuple = (100, 400, 1600)
    replications: int = 200
    seed: int = 0
    name: str = ""
    delta: float = 0.5
    k0: float = 1.5476
    k1: float = 4.685
    n_subsamples: int = 30
    refine_steps: int = 2
    n_best: int = 5
    irwls_tol: float = 1e-10
    irwls_max_iter: int = 200
    contamination_fractions: tuple = (0.1, 0.2, 0.3, 0.4)
    outlier_magnitudes: tuple = (1e2, 1e4, 1e6)
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ScenarioError(f"unknown kind {self.kind!r}", key="kind")
        if self.model not in _MODELS:
            raise ScenarioError(f"unknown model {self.model!r}", key="model")
        if self.replications < 1:
            raise ScenarioError("replications must be at least 1", key="replications")
        if not self.sizes or any(n < 5 for n in self.sizes):
            raise ScenarioError("sizes must be at least 5", key="sizes")
        if self.kind == "consistency" and len(self.sizes) >= 2 \
                and any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ScenarioError("sizes must be strictly increasing", key="sizes")
        if self.model == "linear" and len(self.beta0) != self.p:
            raise ScenarioError(f"beta0 must have {self.p} entries", key="beta0")
        if self.model == "exp" and len(self.beta0) != 2:
            raise ScenarioError("the exp model takes 2 coefficients", key="beta0")
        if self.model == "location" and self.beta0:
            raise ScenarioError("location model takes no coefficients", key="beta0")
        if self.kind in ("expansion", "normality") and self.model == "exp":
            raise ScenarioError(f"{self.kind} runs support location and linear "
                                "models only", key="model")
        make_error_law(self.errors)  # validates the name
        if self.kind == "normality" and not self.error_law().symmetric:
            raise ScenarioError("normality runs need a symmetric error law",
                                key="errors")
        merged = dict(_DEFAULT_THRESHOLDS[self.kind])
        for key, val in self.thresholds.items():
            if key not in merged:
                raise ScenarioError(f"unknown threshold {key!r} for kind "
                                    f"{self.kind!r}", key=f"threshold.{key}")
            merged[key] = float(val)
        object.__setattr__(self, "thresholds", merged)

    # --- derived objects ---------------------------------------------------

    def error_law(self) -> ErrorLaw:
        return make_error_law(self.errors, self.error_scale, self.error_shift,
                              self.error_eps, self.error_outlier_scale)

    def build_model(self) -> RegressionModel:
        if self.model == "location":
            return location_model()
        if self.model == "linear":
            return linear_model(self.p)
        return exp_model()

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(delta=self.delta, rho0=bisquare(self.k0),
                         rho1=bisquare(self.k1), n_subsamples=self.n_subsamples,
                         refine_steps=self.refine_steps, n_best=self.n_best,
                         irwls_tol=self.irwls_tol,
                         irwls_max_iter=self.irwls_max_iter, seed=seed)

    @property
    def q(self) -> int:
        return {"location": 0, "linear": self.p, "exp": 2}[self.model]

    def stream(self, index: int) -> np.random.Generator:
        """Independent substream: serial and parallel runs see the same one."""
        return np.random.Generator(np.random.Philox(key=self.seed).jumped(index))

    def fit_seed(self, index: int) -> int:
        return (self.seed * 1_000_003 + index) % (2 ** 63 - 1)

    def design_moments(self) -> tuple:
        """(b0, A0) of the predictor gradient under the harness design
        (standard normal predictors for the linear model)."""
        if self.model == "location":
            return np.zeros(0), np.zeros((0, 0))
        if self.model == "linear":
            return np.zeros(self.p), np.eye(self.p)
        raise ScenarioError("design moments are only defined for location "
                            "and linear models", key="model")

    def to_dict(self) -> dict:
        return {
            "name": self.name, "kind": self.kind, "model": self.model,
            "p": self.p, "beta0": list(self.beta0), "alpha0": self.alpha0,
            "errors": self.errors, "error_scale": self.error_scale,
            "error_shift": self.error_shift, "error_eps": self.error_eps,
            "error_outlier_scale": self.error_outlier_scale,
            "sizes": list(self.sizes), "replications": self.replications,
            "seed": self.seed, "delta": self.delta, "k0": self.k0,
            "k1": self.k1, "n_subsamples": self.n_subsamples,
            "refine_steps": self.refine_steps, "n_best": self.n_best,
            "irwls_tol": self.irwls_tol, "irwls_max_iter": self.irwls_max_iter,
            "contamination_fractions": list(self.contamination_fractions),
            "outlier_magnitudes": list(self.outlier_magnitudes),
            "thresholds": dict(sorted(self.thresholds.items())),
        }


_SCENARIO_KEYS = {
    "name": str, "kind": str, "model": str, "p": int, "alpha0": float,
    "errors": str, "error_scale": float, "error_shift": float,
    "error_eps": float, "error_outlier_scale": float, "replications": int,
    "seed": int, "delta": float, "k0": float, "k1": float,
    "n_subsamples": int, "refine_steps": int, "n_best": int,
    "irwls_tol": float, "irwls_max_iter": int,
}
_LIST_KEYS = {"beta0": float, "sizes": int,
              "contamination_fractions": float, "outlier_magnitudes": float}


def load_scenario(path) -> SimScenario:
    """Parse the flat key = value scenario format.

    Lines are ``key = value``; '#' starts a comment; list values are
    comma separated; threshold overrides use dotted keys such as
    ``threshold.ratio_lo``. Unknown or ill-typed keys are reported with
    their name.
    """
    fields = {}
    thresholds = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'", key=line)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key.startswith("threshold."):
                thresholds[key[len("threshold."):]] = float(value)
            elif key in _LIST_KEYS:
                conv = _LIST_KEYS[key]
                fields[key] = tuple(conv(tok.strip()) for tok in value.split(",")
                                    if tok.strip() != "")
            elif key in _SCENARIO_KEYS:
                fields[key] = _SCENARIO_KEYS[key](value)
            else:
                raise ScenarioError(f"unknown scenario key {key!r}", key=key)
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"line {lineno}: bad value for {key!r}: {exc}",
                                key=key) from exc
    if "kind" not in fields:
        raise ScenarioError("scenario must declare a kind", key="kind")
    if fields.get("model") == "location":
        fields.setdefault("beta0", ())
        fields.setdefault("p", 0)
    return SimScenario(thresholds=thresholds, **fields)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class Claim:
    name: str
    passed: Optional[bool]
    value: object
    threshold: object = None
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "value": self.value,
                "threshold": self.threshold, "detail": self.detail}


@dataclass(frozen=True)
class SimReport:
    kind: str
    scenario: dict
    claims: tuple
    summary: dict
    per_replication: tuple
    failures: int
    total_replications: int
    warnings: tuple = ()

    @property
    def passed(self) -> Optional[bool]:
        votes = [c.passed for c in self.claims]
        if any(v is False for v in votes):
            return False
        if any(v is None for v in votes):
            return None
        return True

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scenario": self.scenario,
            "passed": self.passed,
            "claims": [c.to_dict() for c in self.claims],
            "summary": self.summary,
            "failures": self.failures,
            "total_replications": self.total_replications,
            "warnings": list(self.warnings),
        }

    def csv_rows(self) -> tuple:
        """(header, rows) for the per-replication estimates table."""
        keys = []
        for row in self.per_replication:
            for key in row:
                if key not in keys:
                    keys.append(key)
        rows = [[row.get(k, "") for k in keys] for row in self.per_replication]
        return keys, rows


# ---------------------------------------------------------------------------
# replication engine

def _worker_count() -> int:
    raw = os.environ.get("ROBUSTMM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        value = 1
    if value == 0:
        return os.cpu_count() or 1
    return max(1, value)


def _parallel_map(fn, tasks):
    """Map preserving task order; parallel when ROBUSTMM_THREADS allows.
    Each task is independent and owns its substream, so scheduling cannot
    change any result."""
    workers = _worker_count()
    if workers == 1 or len(tasks) < 4:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (workers * 8))))


def _generate(scenario: SimScenario, n: int, rng: np.random.Generator) -> Dataset:
    law = scenario.error_law()
    if scenario.model == "location":
        X = np.zeros((n, 0))
        g = np.zeros(n)
    elif scenario.model == "linear":
        X = rng.standard_normal((n, scenario.p))
        g = X @ np.asarray(scenario.beta0)
    else:
        X = rng.uniform(0.0, 2.0, size=(n, 1))
        g = scenario.build_model().eval_batch(X, np.asarray(scenario.beta0))
    u = law.sample(rng, n)
    return Dataset(x=X, y=g + scenario.alpha0 + u)


def _fit_task(args):
    """One replication: generate, fit, return the joint estimate plus the
    plain least-squares estimate for efficiency comparisons."""
    scenario, size_idx, rep, n = args
    stream = size_idx * scenario.replications + rep
    rng = scenario.stream(stream)
    d = _generate(scenario, n, rng)
    m = scenario.build_model()
    cfg = scenario.fit_config(scenario.fit_seed(stream))
    try:
        res = fit(d, m, cfg)
    except (RobustmmError, np.linalg.LinAlgError) as exc:
        return {"size_idx": size_idx, "rep": rep, "n": n, "failed": True,
                "error": f"{type(exc).__name__}: {exc}"}
    if scenario.model == "location":
        ls = np.array([d.y.mean()])
    else:
        design = np.column_stack([d.x, np.ones(n)])
        ls, *_ = np.linalg.lstsq(design, d.y, rcond=None)
    return {"size_idx": size_idx, "rep": rep, "n": n, "failed": False,
            "theta": res.theta_vector(), "ls": ls,
            "certified": res.certified, "exact_fit": res.exact_fit}


def _run_grid(scenario: SimScenario, sizes) -> list:
    tasks = [(scenario, si, rep, n)
             for si, n in enumerate(sizes)
             for rep in range(scenario.replications)]
    return _parallel_map(_fit_task, tasks)


def _failure_claims(results, scenario) -> tuple:
    failures = sum(1 for r in results if r["failed"])
    rate = failures / max(1, len(results))
    claim = Claim(name="failure_rate", passed=rate <= scenario.thresholds["max_failure_rate"],
                  value=rate, threshold=scenario.thresholds["max_failure_rate"])
    return failures, claim


def _law_warnings(scenario: SimScenario) -> tuple:
    if not scenario.error_law().strongly_unimodal:
        return ("error law is not strongly unimodal: uniqueness and "
                "Fisher-consistency hypotheses violated",)
    return ()


# ---------------------------------------------------------------------------
# drivers

def run_consistency(scenario: SimScenario) -> SimReport:
    """Median MM slope error across a ladder of sizes; passes when each
    consecutive (quadrupled-n) ratio sits in the configured band."""
    if len(scenario.sizes) < 3:
        raise ScenarioError("consistency runs need at least 3 sizes", key="sizes")
    results = _run_grid(scenario, scenario.sizes)
    failures, fail_claim = _failure_claims(results, scenario)
    q = scenario.q
    q1 = q + 1

    medians = []
    for si, n in enumerate(scenario.sizes):
        errs = []
        for r in results:
            if r["size_idx"] == si and not r["failed"]:
                beta_mm = r["theta"][q1:q1 + q] if q else r["theta"][q1:q1 + 1]
                target = np.asarray(scenario.beta0) if q else np.asarray(
                    [scenario.alpha0])
                errs.append(float(np.linalg.norm(beta_mm - target)))
        medians.append(float(np.median(errs)) if errs else float("nan"))

    lo = scenario.thresholds["ratio_lo"]
    hi = scenario.thresholds["ratio_hi"]
    claims = [fail_claim]
    ratios = []
    for i in range(len(medians) - 1):
        ratio = medians[i + 1] / medians[i]
        ratios.append(ratio)
        claims.append(Claim(
            name=f"median_error_ratio_{scenario.sizes[i]}_to_{scenario.sizes[i + 1]}",
            passed=bool(lo <= ratio <= hi), value=ratio, threshold=[lo, hi]))

    per_rep = tuple(
        {"n": r["n"], "rep": r["rep"], "failed": r["failed"],
         **({f"theta_{j}": float(v) for j, v in enumerate(r["theta"])}
            if not r["failed"] else {})}
        for r in results)
    summary = {"sizes": list(scenario.sizes), "median_slope_error": medians,
               "ratios": ratios}
    return SimReport(kind="consistency", scenario=scenario.to_dict(),
                     claims=tuple(claims), summary=summary,
                     per_replication=per_rep, failures=failures,
                     total_replications=len(results),
                     warnings=_law_warnings(scenario))


def _population_theta(scenario: SimScenario):
    """True joint parameter and its closed-form expected Jacobian, via the
    quadrature oracles. The constants live in the error-law frame; the
    joint parameter adds the scenario's true intercept to both centers."""
    from .inference import closed_form_d0
    law = scenario.error_law()
    b0, A0 = scenario.design_moments()
    cfg = scenario.fit_config(0)
    consts = population_constants(law, cfg.rho0, cfg.rho1, scenario.delta, b0, A0)
    beta0 = np.asarray(scenario.beta0)
    theta0 = np.concatenate([beta0, [consts.alpha00 + scenario.alpha0], beta0,
                             [consts.alpha01 + scenario.alpha0],
                             [consts.sigma0]])
    return consts, theta0, closed_form_d0(consts)


def run_expansion_check(scenario: SimScenario) -> SimReport:
    """Remainder of the influence-function expansion.

    For each replication, compare the root-n-scaled estimation error with
    the root-n-scaled average of the population influence function; the
    leftover must shrink with n and be small relative to the leading term
    at the largest size.
    """
    from .inference import PsiSystem
    consts, theta0, D0 = _population_theta(scenario)
    m = scenario.build_model()
    cfg = scenario.fit_config(0)
    system = PsiSystem(m, cfg.rho0, cfg.rho1, scenario.delta)

    results = _run_grid(scenario, scenario.sizes)
    failures, fail_claim = _failure_claims(results, scenario)

    rem_norms = {si: [] for si in range(len(scenario.sizes))}
    lead_norms = {si: [] for si in range(len(scenario.sizes))}
    per_rep = []
    for r in results:
        row = {"n": r["n"], "rep": r["rep"], "failed": r["failed"]}
        if not r["failed"]:
            n = r["n"]
            stream = r["size_idx"] * scenario.replications + r["rep"]
            d = _generate(scenario, n, scenario.stream(stream))
            Psi = system.psi_matrix(d, theta0)
            infl_mean = -np.linalg.solve(D0, Psi.mean(axis=0))
            lead = math.sqrt(n) * infl_mean
            total = math.sqrt(n) * (r["theta"] - theta0)
            rem = total - lead
            rem_norms[r["size_idx"]].append(float(np.linalg.norm(rem)))
            lead_norms[r["size_idx"]].append(float(np.linalg.norm(total)))
            row["remainder_norm"] = float(np.linalg.norm(rem))
            row["scaled_error_norm"] = float(np.linalg.norm(total))
        per_rep.append(row)

    med_rem = [float(np.median(rem_norms[si])) if rem_norms[si] else float("nan")
               for si in range(len(scenario.sizes))]
    med_tot = [float(np.median(lead_norms[si])) if lead_norms[si] else float("nan")
               for si in range(len(scenario.sizes))]

    claims = [fail_claim]
    insufficient = scenario.replications < 2
    if insufficient:
        claims.append(Claim(name="expansion_remainder", passed=None,
                            value=med_rem, detail="insufficient replications"))
    else:
        decreasing = all(b < a for a, b in zip(med_rem, med_rem[1:]))
        claims.append(Claim(name="remainder_decreasing", passed=bool(decreasing),
                            value=med_rem))
        ratio = med_rem[-1] / med_tot[-1]
        cap = scenario.thresholds["remainder_ratio_max"]
        claims.append(Claim(name="remainder_ratio_at_largest_n",
                            passed=bool(ratio < cap), value=ratio, threshold=cap))

    summary = {"sizes": list(scenario.sizes), "median_remainder": med_rem,
               "median_scaled_error": med_tot,
               "theta0": [float(v) for v in theta0]}
    return SimReport(kind="expansion", scenario=scenario.to_dict(),
                     claims=tuple(claims), summary=summary,
                     per_replication=tuple(per_rep), failures=failures,
                     total_replications=len(results),
                     warnings=_law_warnings(scenario))


def run_normality(scenario: SimScenario) -> SimReport:
    """Empirical covariance of the root-n MM error against the
    integration-oracle covariance, plus the efficiency against least
    squares and a quantile check of coordinate-wise normality."""
    consts, theta0, _ = _population_theta(scenario)
    law = scenario.error_law()
    V_oracle = _oracle_mm_variance(law, consts)
    n = scenario.sizes[0]
    q = scenario.q
    q1 = q + 1
    xi0 = theta0[q1:2 * q1]

    results = _run_grid(scenario, (n,))
    failures, fail_claim = _failure_claims(results, scenario)

    mm = np.array([r["theta"][q1:2 * q1] for r in results if not r["failed"]])
    ls = np.array([r["ls"] for r in results if not r["failed"]])
    scaled = math.sqrt(n) * (mm - xi0)
    emp_cov = scaled.T @ scaled / len(scaled)

    claims = [fail_claim]
    tol = scenario.thresholds["variance_rel_tol"]
    for j in range(q1):
        rel = abs(emp_cov[j, j] - V_oracle[j, j]) / V_oracle[j, j]
        claims.append(Claim(name=f"variance_diag_{j}", passed=bool(rel <= tol),
                            value=rel, threshold=tol))

    # efficiency relative to least squares, slope coordinates at normal errors
    ls_target = np.concatenate([np.asarray(scenario.beta0),
                                [scenario.alpha0]]) if q else np.asarray(
        [scenario.alpha0])
    ls_scaled = math.sqrt(n) * (ls - ls_target)
    eff_cols = range(q) if q else range(1)
    eff = float(np.mean([ls_scaled[:, j].var() / scaled[:, j].var()
                         for j in eff_cols]))
    target = scenario.thresholds["efficiency_target"]
    etol = scenario.thresholds["efficiency_tol"]
    claims.append(Claim(name="ls_efficiency", passed=bool(abs(eff - target) <= etol),
                        value=eff, threshold=[target - etol, target + etol]))

    # quantile comparison of each standardized coordinate
    deciles = np.arange(0.1, 0.91, 0.1)
    from scipy import stats
    z = stats.norm.ppf(deciles)
    qtol = scenario.thresholds["quantile_tol"]
    qstats = []
    for j in range(q1):
        s = scaled[:, j] / math.sqrt(V_oracle[j, j])
        qemp = np.quantile(s, deciles)
        qstats.append(float(np.abs(qemp - z).max()))
    worst = max(qstats)
    claims.append(Claim(name="quantile_normality", passed=bool(worst <= qtol),
                        value=qstats, threshold=qtol))

    per_rep = tuple(
        {"n": r["n"], "rep": r["rep"], "failed": r["failed"],
         **({f"xi_mm_{j}": float(v) for j, v in
             enumerate(r["theta"][q1:2 * q1])} if not r["failed"] else {})}
        for r in results)
    summary = {
        "n": n,
        "empirical_cov": emp_cov.tolist(),
        "oracle_cov": V_oracle.tolist(),
        "efficiency_empirical": eff,
        "quantile_stats": qstats,
        "theta0": [float(v) for v in theta0],
    }
    return SimReport(kind="normality", scenario=scenario.to_dict(),
                     claims=tuple(claims), summary=summary,
                     per_replication=per_rep, failures=failures,
                     total_replications=len(results),
                     warnings=_law_warnings(scenario))


def _contamination_task(args):
    """One replication of the contamination sweep: a clean fit plus a
    refit for every (fraction, magnitude) pair, sharing the clean data."""
    from .inference import asymptotic_cov
    scenario, rep = args
    n = scenario.sizes[0]
    rng = scenario.stream(rep)
    d = _generate(scenario, n, rng)
    m = scenario.build_model()
    cfg = scenario.fit_config(scenario.fit_seed(rep))
    q = scenario.q
    q1 = q + 1
    try:
        clean = fit(d, m, cfg)
        rep_inf = asymptotic_cov(d, m, clean, cfg)
    except (RobustmmError, np.linalg.LinAlgError) as exc:
        return {"rep": rep, "failed": True, "error": f"{type(exc).__name__}: {exc}"}
    slope = slice(0, q) if q else slice(0, 1)
    clean_slope = clean.xi_mm.as_array()[slope]
    se_norm = float(np.linalg.norm(rep_inf.std_errors[slope]))

    contam_order = rng.permutation(n)
    deviations = {}
    for eps in scenario.contamination_fractions:
        n_bad = int(math.ceil(eps * n))
        idx = contam_order[:n_bad]
        for mag in scenario.outlier_magnitudes:
            y_bad = d.y.copy()
            if n_bad:
                y_bad[idx] = mag
            try:
                dirty = fit(Dataset(x=d.x, y=y_bad), m, cfg)
                dev = float(np.linalg.norm(dirty.xi_mm.as_array()[slope]
                                           - clean_slope))
            except (RobustmmError, np.linalg.LinAlgError):
                dev = float("inf")
            deviations[(eps, mag)] = dev
    return {"rep": rep, "failed": False, "se_norm": se_norm,
            "deviations": deviations}


def run_contamination(scenario: SimScenario) -> SimReport:
    """Bounded-deviation sweep over contamination fractions and outlier
    magnitudes, with the no-contamination case refitting identically."""
    delta_cap = 1.0 - scenario.delta
    if any(eps >= delta_cap for eps in scenario.contamination_fractions):
        raise ScenarioError("contamination fractions must stay below 1 - delta",
                            key="contamination_fractions")
    tasks = [(scenario, rep) for rep in range(scenario.replications)]
    results = _parallel_map(_contamination_task, tasks)
    failures, fail_claim = _failure_claims(results, scenario)
    ok = [r for r in results if not r["failed"]]

    claims = [fail_claim]
    per_rep = []
    worst_multiple = 0.0
    growth_worst = 0.0
    if ok:
        mags = sorted(scenario.outlier_magnitudes)
        for r in ok:
            for (eps, mag), dev in r["deviations"].items():
                per_rep.append({"rep": r["rep"], "fraction": eps,
                                "magnitude": mag, "slope_deviation": dev,
                                "clean_se_norm": r["se_norm"]})
            worst_multiple = max(worst_multiple,
                                 max(dev / r["se_norm"]
                                     for dev in r["deviations"].values()))
            if len(mags) >= 2:
                for eps in scenario.contamination_fractions:
                    lo_dev = r["deviations"][(eps, mags[-2])]
                    hi_dev = r["deviations"][(eps, mags[-1])]
                    growth = hi_dev / lo_dev if lo_dev > 1e-12 else 1.0
                    growth_worst = max(growth_worst, growth)

        cap = scenario.thresholds["se_multiple_max"]
        claims.append(Claim(name="max_deviation_vs_clean_se",
                            passed=bool(worst_multiple < cap),
                            value=worst_multiple, threshold=cap))
        gcap = scenario.thresholds["magnitude_growth_max"]
        claims.append(Claim(name="deviation_growth_large_magnitudes",
                            passed=bool(growth_worst <= gcap),
                            value=growth_worst, threshold=gcap,
                            detail=f"magnitudes {mags[-2]:g} to {mags[-1]:g}"))
    summary = {"n": scenario.sizes[0], "worst_se_multiple": worst_multiple,
               "worst_magnitude_growth": growth_worst}
    return SimReport(kind="contamination", scenario=scenario.to_dict(),
                     claims=tuple(claims), summary=summary,
                     per_replication=tuple(per_rep), failures=failures,
                     total_replications=len(results),
                     warnings=_law_warnings(scenario))


_RUNNERS = {
    "consistency": run_consistency,
    "expansion": run_expansion_check,
    "normality": run_normality,
    "contamination": run_contamination,
}


def run_scenario(scenario: SimScenario) -> SimReport:
    return _RUNNERS[scenario.kind](scenario)
