"""Seeded Monte Carlo experiments for the pooled-calibration estimators.

Local and reference biomarker measurements are jointly normal with

    x = a_s + b_s * w + e,   Var(w) = (sigma2_x - sigma2_e) / b_s**2,

so the regression of the reference value on the local value has intercept
a_s and slope b_s by construction, with calibration noise sigma2_e.  The
interaction variant adds a modifier v correlated with x.

Matched sets are formed by one of two selection mechanisms:

``conditional`` (default)
    Two subjects are drawn iid per stratum and the case label is realized
    from the exact one-case-per-set conditional law.  Covariate values keep
    their marginal distribution, which is what makes a calibration line fit
    over the selected cases plus controls unbiased for (a_s, b_s).
``pool``
    A pool of candidates is drawn per stratum, outcomes are Bernoulli from
    the logistic risk model with a random stratum intercept, one case and
    one control are picked uniformly, and the stratum is regenerated when a
    class is missing.

Replicate r of a run seeds its generator from
``numpy.random.SeedSequence(entropy=seed, spawn_key=(r,))`` so any single
replicate can be reproduced in isolation.  Within a replicate every method
sees the identical dataset, making between-method contrasts paired.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._assembly import FlatStudy, build_assembly, flatten_study
from .aggregate import _estimate_from_assembly, _materialize
from .calibration import fit_calibration
from .data import DesignSpec, LabKind, PooledDataset, Stratum, Study, Subject
from .errors import CalipoolError
from .methods import ALL_METHODS, PoolingMethod
from .twostage import _twostage_from_flats

DEFAULT_RR_GRID = (1.25, 1.5, 1.75, 2.0, 2.25, 2.5)
WALD_Z = 1.96


@dataclass(frozen=True)
class ScenarioMain:
    """Four local-lab studies of matched pairs, main-effect risk model.

    Defaults give each study 500 pairs with a 100-control calibration subset,
    study lines a = (-3, 1, -1, 3) and b = (0.5, 0.75, 1.25, 1.5), a standard
    normal reference exposure, and stratum intercepts N(-1, 0.01).
    ``sigma2_e`` controls calibration noise (0.2 leaves the local measurement
    explaining 80% of the reference variance).
    """

    beta_x: float
    n_studies: int = 4
    pairs_per_study: int = 500
    n_cal: int = 100
    a: tuple[float, ...] = (-3.0, 1.0, -1.0, 3.0)
    b: tuple[float, ...] = (0.5, 0.75, 1.25, 1.5)
    mu_x: float = 0.0
    sigma2_x: float = 1.0
    mu_beta0: float = -1.0
    sigma2_beta0: float = 0.01
    sigma2_e: float = 0.22
    calib_error_stratum_corr: float = 0.0
    pool_size_per_stratum: int = 2
    selection: str = "pool"

    def __post_init__(self):
        if len(self.a) != self.n_studies or len(self.b) != self.n_studies:
            raise ValueError("a and b must have one entry per study")
        if not 0.0 <= self.sigma2_e < self.sigma2_x:
            raise ValueError("sigma2_e must lie in [0, sigma2_x)")
        if any(bs == 0 for bs in self.b):
            raise ValueError("calibration slopes must be nonzero")
        if self.n_cal > self.pairs_per_study:
            raise ValueError("n_cal cannot exceed the number of controls")
        if self.pool_size_per_stratum < 2:
            raise ValueError("stratum pools need at least two subjects")
        if self.selection not in ("conditional", "pool"):
            raise ValueError("selection must be 'conditional' or 'pool'")
        if not 0.0 <= self.calib_error_stratum_corr <= 1.0:
            raise ValueError("calib_error_stratum_corr must lie in [0, 1]")

    @property
    def interaction(self) -> bool:
        return False

    def sigma2_ws(self, s: int) -> float:
        return (self.sigma2_x - self.sigma2_e) / self.b[s] ** 2

    def mu_ws(self, s: int) -> float:
        return (self.mu_x - self.a[s]) / self.b[s]

    def truth(self) -> dict[str, float]:
        return {"x": self.beta_x}

    def design(self) -> DesignSpec:
        return DesignSpec(include_interaction=False)


@dataclass(frozen=True)
class ScenarioInteraction(ScenarioMain):
    """Main scenario plus a modifier v with Corr(x, v) = corr_xv."""

    beta_v: float = math.log(1.2)
    beta_xv: float = math.log(1.2)
    mu_v: float = 0.0
    sigma2_v: float = 1.0
    corr_xv: float = 0.2
    sigma2_e: float = 0.17
    calib_error_stratum_corr: float = 0.6

    def __post_init__(self):
        super().__post_init__()
        if not abs(self.corr_xv) < 1:
            raise ValueError("corr_xv must lie in (-1, 1)")
        # rho between w and v implied by the target Corr(x, v)
        if self.corr_xv**2 * self.sigma2_x >= self.sigma2_x - self.sigma2_e:
            raise ValueError(
                "corr_xv is infeasible for this sigma2_e: implied (w, v) "
                "correlation would exceed 1"
            )

    @property
    def interaction(self) -> bool:
        return True

    def rho_wv(self) -> float:
        return self.corr_xv * math.sqrt(self.sigma2_x / (self.sigma2_x - self.sigma2_e))

    def truth(self) -> dict[str, float]:
        return {"x": self.beta_x, "v": self.beta_v, "xv": self.beta_xv}

    def design(self) -> DesignSpec:
        return DesignSpec(include_interaction=True)


@dataclass(frozen=True)
class StudyDraw:
    """Selected case-control pairs for one simulated study (truth retained)."""

    x_case: np.ndarray
    w_case: np.ndarray
    x_ctl: np.ndarray
    w_ctl: np.ndarray
    v_case: np.ndarray | None
    v_ctl: np.ndarray | None


def _pick_one(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    """Uniformly pick one True column per row of a boolean matrix."""
    counts = mask.sum(axis=1)
    k = (rng.random(len(mask)) * counts).astype(np.intp)
    csum = mask.cumsum(axis=1)
    return np.argmax(csum == (k + 1)[:, None], axis=1)


def _draw_study_pool(scenario: ScenarioMain, s: int, n: int,
                     rng: np.random.Generator):
    """n stratum pools of raw (w, x[, v]) draws.

    The calibration error keeps marginal variance sigma2_e; a share
    ``calib_error_stratum_corr`` of that variance comes from a component
    common to the stratum's members (assay batch drift), the rest is
    subject-level.
    """
    pool = scenario.pool_size_per_stratum
    sd_ws = math.sqrt(scenario.sigma2_ws(s))
    sd_e = math.sqrt(scenario.sigma2_e)
    z1 = rng.standard_normal((n, pool))
    w = scenario.mu_ws(s) + sd_ws * z1
    v = None
    if scenario.interaction:
        rho = scenario.rho_wv()
        z2 = rng.standard_normal((n, pool))
        v = scenario.mu_v + math.sqrt(scenario.sigma2_v) * (
            rho * z1 + math.sqrt(1.0 - rho**2) * z2
        )
    corr = scenario.calib_error_stratum_corr
    if corr > 0.0:
        shared = rng.standard_normal((n, 1))
        idio = rng.standard_normal((n, pool))
        e = sd_e * (math.sqrt(corr) * shared + math.sqrt(1.0 - corr) * idio)
    else:
        e = sd_e * rng.standard_normal((n, pool))
    x = scenario.a[s] + scenario.b[s] * w + e
    return w, x, v


def _linear_predictor(scenario: ScenarioMain, x, v, beta0):
    lin = beta0[:, None] + scenario.beta_x * x
    if scenario.interaction:
        lin = lin + scenario.beta_v * v + scenario.beta_xv * x * v
    return lin


def _draw_study_pooled(scenario: ScenarioMain, s: int,
                       rng: np.random.Generator) -> StudyDraw:
    """Bernoulli outcomes over a stratum pool, then uniform case/control picks."""
    n = scenario.pairs_per_study
    sd_b0 = math.sqrt(scenario.sigma2_beta0)
    w, x, v = _draw_study_pool(scenario, s, n, rng)
    beta0 = scenario.mu_beta0 + sd_b0 * rng.standard_normal(n)
    prob = 1.0 / (1.0 + np.exp(-_linear_predictor(scenario, x, v, beta0)))
    y = rng.random(prob.shape) < prob

    # regenerate whole strata until each pool holds a case and a control
    bad = np.nonzero(~(y.any(axis=1) & (~y).any(axis=1)))[0]
    while bad.size:
        wb, xb, vb = _draw_study_pool(scenario, s, len(bad), rng)
        b0b = scenario.mu_beta0 + sd_b0 * rng.standard_normal(len(bad))
        pb = 1.0 / (1.0 + np.exp(-_linear_predictor(scenario, xb, vb, b0b)))
        yb = rng.random(pb.shape) < pb
        w[bad], x[bad], y[bad] = wb, xb, yb
        if v is not None:
            v[bad] = vb
        bad = bad[~(yb.any(axis=1) & (~yb).any(axis=1))]

    rows = np.arange(n)
    case_col = _pick_one(rng, y)
    ctl_col = _pick_one(rng, ~y)
    return StudyDraw(
        x_case=x[rows, case_col],
        w_case=w[rows, case_col],
        x_ctl=x[rows, ctl_col],
        w_ctl=w[rows, ctl_col],
        v_case=v[rows, case_col] if v is not None else None,
        v_ctl=v[rows, ctl_col] if v is not None else None,
    )


def _draw_study_conditional(scenario: ScenarioMain, s: int,
                            rng: np.random.Generator) -> StudyDraw:
    """Matched pairs with the case realized from the one-case conditional law.

    Two subjects are drawn iid per stratum and the case label goes to the
    first with probability expit(lin_1 - lin_2), which is the exact
    distribution of the case given the matched set contains one.  The drawn
    values themselves stay at their marginal distribution, so the stratum
    intercept cancels and never enters.
    """
    import dataclasses as _dc

    n = scenario.pairs_per_study
    pair_scenario = _dc.replace(scenario, pool_size_per_stratum=2)
    w, x, v = _draw_study_pool(pair_scenario, s, n, rng)
    lin = scenario.beta_x * x
    if scenario.interaction:
        lin = lin + scenario.beta_v * v + scenario.beta_xv * x * v
    p_first = 1.0 / (1.0 + np.exp(-(lin[:, 0] - lin[:, 1])))
    case_col = (rng.random(n) >= p_first).astype(np.intp)
    rows = np.arange(n)
    return StudyDraw(
        x_case=x[rows, case_col],
        w_case=w[rows, case_col],
        x_ctl=x[rows, 1 - case_col],
        w_ctl=w[rows, 1 - case_col],
        v_case=v[rows, case_col] if v is not None else None,
        v_ctl=v[rows, 1 - case_col] if v is not None else None,
    )


def _draw_study(scenario: ScenarioMain, s: int, rng: np.random.Generator) -> StudyDraw:
    if scenario.selection == "pool":
        return _draw_study_pooled(scenario, s, rng)
    return _draw_study_conditional(scenario, s, rng)


def _draw_with_subset(scenario: ScenarioMain, s: int, rng: np.random.Generator):
    """One study's selected pairs plus its calibration-subset mask.

    The subset is the first n_cal entries of a full permutation, which is a
    uniform draw without replacement and also makes subsets nested across
    runs that differ only in n_cal (so calibration-size contrasts are
    paired).
    """
    draw = _draw_study(scenario, s, rng)
    n = scenario.pairs_per_study
    in_cal = np.zeros(n, dtype=bool)
    in_cal[rng.permutation(n)[: scenario.n_cal]] = True
    return draw, in_cal


def _build_study(scenario: ScenarioMain, s: int, draw: StudyDraw,
                 in_cal: np.ndarray) -> Study:
    n = scenario.pairs_per_study
    sid = f"study{s + 1}"
    interaction = scenario.interaction
    strata = []
    for j in range(n):
        case = Subject(
            subject_id=f"{sid}-j{j}-case",
            is_case=True,
            local_w=draw.w_case[j],
            effect_modifier=draw.v_case[j] if interaction else None,
        )
        ctl = Subject(
            subject_id=f"{sid}-j{j}-ctl",
            is_case=False,
            local_w=draw.w_ctl[j],
            ref_x=draw.x_ctl[j] if in_cal[j] else None,
            effect_modifier=draw.v_ctl[j] if interaction else None,
            in_calibration_subset=bool(in_cal[j]),
        )
        strata.append(Stratum(f"{sid}-j{j}", (case, ctl)))
    return Study(sid, LabKind.LOCAL, tuple(strata))


def _flat_from_draw(scenario: ScenarioMain, s: int, draw: StudyDraw,
                    in_cal: np.ndarray) -> FlatStudy:
    """FlatStudy equal to ``flatten_study(_build_study(...))``, built directly."""
    n = scenario.pairs_per_study
    m = 2 * n
    nan = float("nan")

    def interleave(case_vals, ctl_vals):
        out = np.empty(m)
        out[0::2] = case_vals
        out[1::2] = ctl_vals
        return out

    w = interleave(draw.w_case, draw.w_ctl)
    x = np.full(m, nan)
    x[1::2] = np.where(in_cal, draw.x_ctl, nan)
    if scenario.interaction:
        v = interleave(draw.v_case, draw.v_ctl)
    else:
        v = np.full(m, nan)
    is_case = np.zeros(m, dtype=bool)
    is_case[0::2] = True
    in_cal_members = np.zeros(m, dtype=bool)
    in_cal_members[1::2] = in_cal
    return FlatStudy(
        study_id=f"study{s + 1}",
        local=True,
        starts=np.arange(0, m + 1, 2, dtype=np.intp),
        case_member=np.arange(0, m, 2, dtype=np.intp),
        is_case=is_case,
        w=w,
        x=x,
        v=v,
        z=np.zeros((m, 0)),
        in_cal=in_cal_members,
        stratum_of=np.repeat(np.arange(n, dtype=np.intp), 2),
    )


def _resolve_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def gen_main(scenario: ScenarioMain, seed) -> PooledDataset:
    """Generate one pooled dataset (reference values hidden outside subsets)."""
    if scenario.interaction:
        raise ValueError("use gen_interaction for interaction scenarios")
    rng = _resolve_rng(seed)
    studies = tuple(
        _build_study(scenario, s, *_draw_with_subset(scenario, s, rng))
        for s in range(scenario.n_studies)
    )
    return PooledDataset(studies=studies, design=scenario.design())


def gen_interaction(scenario: ScenarioInteraction, seed) -> PooledDataset:
    """Interaction-scenario counterpart of :func:`gen_main`."""
    if not scenario.interaction:
        raise ValueError("scenario has no interaction terms")
    rng = _resolve_rng(seed)
    studies = tuple(
        _build_study(scenario, s, *_draw_with_subset(scenario, s, rng))
        for s in range(scenario.n_studies)
    )
    return PooledDataset(studies=studies, design=scenario.design())


def generate(scenario: ScenarioMain, seed) -> PooledDataset:
    return (gen_interaction if scenario.interaction else gen_main)(scenario, seed)


def _generate_flats(scenario: ScenarioMain, seed) -> list[FlatStudy]:
    """Flat-array twin of :func:`generate`: same draws, same RNG stream."""
    rng = _resolve_rng(seed)
    return [
        _flat_from_draw(scenario, s, *_draw_with_subset(scenario, s, rng))
        for s in range(scenario.n_studies)
    ]


@dataclass(frozen=True)
class ReplicateRecord:
    """One method's estimate of one coefficient in one replicate."""

    replicate: int
    method: str
    coef: str
    true_value: float
    estimate: float
    se: float
    model_se: float
    covered: bool


@dataclass(frozen=True)
class OCRow:
    """Operating characteristics of one method for one coefficient."""

    method: str
    coef: str
    true_value: float
    mean_percent_bias: float
    empirical_se: float
    mean_reported_se: float
    mse: float
    coverage_rate: float
    n_replicates: int
    n_failed: int


@dataclass(frozen=True)
class OperatingCharacteristics:
    rows: tuple[OCRow, ...]
    records: tuple[ReplicateRecord, ...]
    n_requested: int

    def row(self, method: PoolingMethod | str, coef: str = "x") -> OCRow:
        name = method.value if isinstance(method, PoolingMethod) else method
        for r in self.rows:
            if r.method == name and r.coef == coef:
                return r
        raise KeyError((name, coef))


def _records_from_estimate(r: int, method: PoolingMethod, names, coef, se,
                           model_se, truth) -> list[ReplicateRecord]:
    out = []
    for i, name in enumerate(names):
        true_value = truth[name]
        half = WALD_Z * se[i]
        out.append(
            ReplicateRecord(
                replicate=r,
                method=method.value,
                coef=name,
                true_value=true_value,
                estimate=float(coef[i]),
                se=float(se[i]),
                model_se=float(model_se[i]),
                covered=bool(abs(coef[i] - true_value) <= half),
            )
        )
    return out


def _one_replicate(scenario: ScenarioMain, methods, seed, r) -> tuple[list, list]:
    """Run every requested method on one generated dataset."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(r,))
    rng = np.random.default_rng(ss)
    design = scenario.design()
    truth = scenario.truth()
    names = design.coefficient_names()
    records: list[ReplicateRecord] = []
    failures: list[tuple[str, str]] = []

    # generated datasets satisfy the invariants by construction, so the
    # validation pass is skipped and the flat-array twin of the generator
    # is used directly
    flats = _generate_flats(scenario, rng)
    fits_all: dict[str, object] | None = None

    def calibration_fits():
        nonlocal fits_all
        if fits_all is None:
            fits_all = {
                flat.study_id: fit_calibration(
                    np.column_stack([flat.w[flat.in_cal], flat.x[flat.in_cal]]),
                    study_id=flat.study_id,
                )
                for flat in flats
                if flat.local
            }
        return fits_all

    for method in methods:
        if not method.is_aggregated:
            continue
        try:
            fits = {} if method is PoolingMethod.NAIVE else calibration_fits()
            exposures = [_materialize(f, fits.get(f.study_id), method) for f in flats]
            assembly = build_assembly(flats, exposures, design)
            est = _estimate_from_assembly(assembly, fits, method, design)
            records.extend(
                _records_from_estimate(
                    r, method, names, est.beta, est.se,
                    np.sqrt(np.diag(est.model_cov)), truth,
                )
            )
        except CalipoolError as err:
            failures.append((method.value, str(err)))

    if PoolingMethod.TWO_STAGE in methods:
        try:
            meta = _twostage_from_flats(flats, calibration_fits(), design)
            records.extend(
                _records_from_estimate(
                    r, PoolingMethod.TWO_STAGE, names, meta.coef, meta.se,
                    meta.se, truth,
                )
            )
        except CalipoolError as err:
            failures.append((PoolingMethod.TWO_STAGE.value, str(err)))

    return records, failures


def _worker(args):
    scenario, methods, seed, r = args
    return _one_replicate(scenario, methods, seed, r)


def run_replicates(
    scenario: ScenarioMain,
    methods: tuple[PoolingMethod, ...] = ALL_METHODS,
    n_replicates: int = 1000,
    seed: int = 0,
    n_jobs: int = 1,
) -> OperatingCharacteristics:
    """Generate ``n_replicates`` datasets and summarize every method on each.

    Failed replicates (non-convergence, separation, degenerate calibration)
    are excluded per method and counted; a warning summarizes them.  Results
    are deterministic in (scenario, methods, n_replicates, seed) regardless
    of ``n_jobs``.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    methods = tuple(methods)
    tasks = [(scenario, methods, seed, r) for r in range(n_replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_worker, tasks, chunksize=16))
    else:
        results = [_worker(t) for t in tasks]

    records: list[ReplicateRecord] = []
    failures: list[tuple[str, str]] = []
    for rec, fail in results:
        records.extend(rec)
        failures.extend(fail)
    if failures:
        warnings.warn(
            f"{len(failures)} method-replicates failed and were excluded "
            f"(first: {failures[0][0]}: {failures[0][1]})",
            stacklevel=2,
        )
    return summarize(records, scenario, methods, n_replicates)


def summarize(
    records: list[ReplicateRecord],
    scenario: ScenarioMain,
    methods: tuple[PoolingMethod, ...],
    n_requested: int,
) -> OperatingCharacteristics:
    """Aggregate per-replicate records into operating characteristics."""
    truth = scenario.truth()
    names = scenario.design().coefficient_names()
    rows = []
    for method in methods:
        for name in names:
            cell = [
                rec for rec in records
                if rec.method == method.value and rec.coef == name
            ]
            n_ok = len(cell)
            if n_ok == 0:
                rows.append(OCRow(method.value, name, truth[name], math.nan,
                                  math.nan, math.nan, math.nan, math.nan, 0,
                                  n_requested))
                continue
            est = np.array([rec.estimate for rec in cell])
            true_value = truth[name]
            if true_value == 0.0:
                pct = math.nan
            else:
                pct = float(np.mean((est - true_value) / true_value) * 100.0)
            rows.append(
                OCRow(
                    method=method.value,
                    coef=name,
                    true_value=true_value,
                    mean_percent_bias=pct,
                    empirical_se=float(np.std(est, ddof=1)) if n_ok > 1 else math.nan,
                    mean_reported_se=float(np.mean([rec.se for rec in cell])),
                    mse=float(np.mean((true_value - est) ** 2)),
                    coverage_rate=float(np.mean([rec.covered for rec in cell])),
                    n_replicates=n_ok,
                    n_failed=n_requested - n_ok,
                )
            )
    return OperatingCharacteristics(rows=tuple(rows), records=tuple(records),
                                    n_requested=n_requested)


@dataclass(frozen=True)
class CalibrationBiasRow:
    """Mean percent bias of one calibration parameter under one fitting pool."""

    rr: float
    fit_pool: str      # "case_control" or "controls_only"
    param: str         # "a" or "b"
    mean_percent_bias: float


@dataclass(frozen=True)
class CalibrationBiasResult:
    a_true: float
    b_true: float
    rows: tuple[CalibrationBiasRow, ...]

    def bias(self, rr: float, fit_pool: str, param: str) -> float:
        for row in self.rows:
            if row.rr == rr and row.fit_pool == fit_pool and row.param == param:
                return row.mean_percent_bias
        raise KeyError((rr, fit_pool, param))


def controls_only_bias_experiment(
    a_s: float = 3.0,
    b_s: float = 0.8,
    rr_grid: tuple[float, ...] = DEFAULT_RR_GRID,
    n_replicates: int = 1000,
    seed: int = 0,
    pairs: int = 500,
    sigma2_e: float = 0.4,
    selection: str = "conditional",
) -> CalibrationBiasResult:
    """Bias of the calibration line fit in the selected sample vs controls only.

    For a single study, each replicate fits the regression of the reference
    value on the local value twice: once over the selected cases and
    controls jointly and once over the selected controls alone.  Selection
    is outcome-dependent, so the controls-only line drifts as the exposure
    effect grows.
    """
    rows = []
    for idx, rr in enumerate(rr_grid):
        scenario = ScenarioMain(
            beta_x=math.log(rr),
            n_studies=1,
            pairs_per_study=pairs,
            n_cal=min(100, pairs),
            a=(a_s,),
            b=(b_s,),
            sigma2_e=sigma2_e,
            selection=selection,
        )
        sums = {("case_control", "a"): 0.0, ("case_control", "b"): 0.0,
                ("controls_only", "a"): 0.0, ("controls_only", "b"): 0.0}
        for r in range(n_replicates):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(idx, r))
            rng = np.random.default_rng(ss)
            draw = _draw_study(scenario, 0, rng)
            w_all = np.concatenate([draw.w_ctl, draw.w_case])
            x_all = np.concatenate([draw.x_ctl, draw.x_case])
            both = fit_calibration(list(zip(w_all, x_all)))
            ctl = fit_calibration(list(zip(draw.w_ctl, draw.x_ctl)))
            sums[("case_control", "a")] += (both.a_hat - a_s) / a_s
            sums[("case_control", "b")] += (both.b_hat - b_s) / b_s
            sums[("controls_only", "a")] += (ctl.a_hat - a_s) / a_s
            sums[("controls_only", "b")] += (ctl.b_hat - b_s) / b_s
        for (pool_kind, param), total in sums.items():
            rows.append(
                CalibrationBiasRow(rr, pool_kind, param,
                                   100.0 * total / n_replicates)
            )
    return CalibrationBiasResult(a_true=a_s, b_true=b_s, rows=tuple(rows))


@dataclass(frozen=True)
class CalibrationSizeRow:
    n_cal: int
    method: str
    mean_percent_bias: float
    empirical_se: float
    coverage_rate: float


@dataclass(frozen=True)
class CalibrationSizeResult:
    rr: float
    rows: tuple[CalibrationSizeRow, ...]

    def bias(self, n_cal: int, method: PoolingMethod | str) -> float:
        name = method.value if isinstance(method, PoolingMethod) else method
        for row in self.rows:
            if row.n_cal == n_cal and row.method == name:
                return row.mean_percent_bias
        raise KeyError((n_cal, name))


def calibration_size_experiment(
    n_cal_grid: tuple[int, ...] = (30, 50, 150),
    rr: float = 1.5,
    n_replicates: int = 1000,
    seed: int = 0,
    methods: tuple[PoolingMethod, ...] = ALL_METHODS,
    base_scenario: ScenarioMain | None = None,
    n_jobs: int = 1,
) -> CalibrationSizeResult:
    """Method comparison as the calibration subset grows, study size fixed."""
    base = base_scenario or ScenarioMain(beta_x=math.log(rr))
    rows = []
    for n_cal in n_cal_grid:
        scenario = dataclasses.replace(base, beta_x=math.log(rr), n_cal=n_cal)
        oc = run_replicates(scenario, methods, n_replicates, seed, n_jobs)
        for method in methods:
            cell = oc.row(method, "x")
            rows.append(
                CalibrationSizeRow(
                    n_cal=n_cal,
                    method=method.value,
                    mean_percent_bias=cell.mean_percent_bias,
                    empirical_se=cell.empirical_se,
                    coverage_rate=cell.coverage_rate,
                )
            )
    return CalibrationSizeResult(rr=rr, rows=tuple(rows))


def sample_study_population(scenario: ScenarioMain, s: int, n: int, seed):
    """Raw (w, x[, v], e) marginal draws for one study, for moment checks."""
    rng = _resolve_rng(seed)
    pool = scenario.pool_size_per_stratum
    n_strata = (n + pool - 1) // pool
    w, x, v = _draw_study_pool(scenario, s, n_strata, rng)
    w, x = w.ravel()[:n], x.ravel()[:n]
    e = x - scenario.a[s] - scenario.b[s] * w
    out = {"w": w, "x": x, "e": e}
    if v is not None:
        out["v"] = v.ravel()[:n]
    return out
