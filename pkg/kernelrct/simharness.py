"""
Simulation experiments: Fisher-vector Hotelling (FvH) against the LMM baseline
over a grid of arm sizes and measurement frequencies, and the cross-validated
pseudo-trial that splits a healthy cohort into folds against a symptomatic arm.
"""

from __future__ import annotations

import dataclasses
import logging

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scipy import linalg

from kernelrct import fisherkernel, gpmodel, lmm, power, twosample, utils
from kernelrct.gpmodel import FitConfig, GpParams, ObservationGrid, Trajectory
from kernelrct.power import PowerCurve
from kernelrct.twosample import Sample

log = logging.getLogger(__name__)

FVH = "FvH"
LMM = "LMM"
METHODS = (FVH, LMM)

DEFAULT_N_VALUES = (20, 40, 80)
DEFAULT_T_VALUES = (25, 75, 150)
DEFAULT_N_SIMS = 1000
DEFAULT_N_EMBED = 100
N_FOLDS = 8
FOLD_SIZE = 11
N_CN = 86
N_MCI = 11
TARGET_POWER = 0.8

RESULTS_HEADER = ("method", "n", "t", "replicate", "p_value")
SUMMARY_HEADER = ("method", "n", "t", "power", "se")

REPLICATE_ERRORS = (gpmodel.CovarianceError, gpmodel.ParameterError, twosample.SampleError,
                    twosample.SingularCovarianceError, lmm.LmmError, linalg.LinAlgError, ArithmeticError)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    theta_control: GpParams
    theta_treated: GpParams
    grid: ObservationGrid
    n_per_arm: int = 40
    alpha: float = 0.05
    n_sims: int = DEFAULT_N_SIMS
    seed: int = 0
    n_embed: int = DEFAULT_N_EMBED
    fit_embedding: bool = True

    def __post_init__(self):
        control = self.theta_control.as_array()
        treated = self.theta_treated.as_array()
        if not np.array_equal(control[1:], treated[1:]):
            raise ValueError("treated and control parameters may differ only in mu")
        if self.n_per_arm < 2 or self.n_sims < 1 or self.n_embed < 2:
            raise ValueError("need n_per_arm >= 2, n_sims >= 1 and n_embed >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")

    @classmethod
    def from_shift(cls, theta_control:GpParams, mu_shift:float, grid:ObservationGrid, **kwargs) -> Scenario:
        return cls(theta_control, theta_control.replace(mu=theta_control.mu + mu_shift), grid, **kwargs)

    @classmethod
    def from_local_alternative(cls, theta_control:GpParams, mu_asymptomatic:float, rho:float,
                               grid:ObservationGrid, **kwargs) -> Scenario:
        """Treated drift moves a fraction (1 - rho) from the control drift towards mu_asymptomatic."""
        return cls.from_shift(theta_control, (1.0 - rho) * (mu_asymptomatic - theta_control.mu), grid, **kwargs)

    @property
    def mu_shift(self) -> float:
        return self.theta_treated.mu - self.theta_control.mu

    def replace(self, **changes) -> Scenario:
        return dataclasses.replace(self, **changes)

    def simulate_arms(self, n_per_arm:int, grid:ObservationGrid, seed) -> Tuple[List[Trajectory], List[Trajectory]]:
        seed_t, seed_c = np.random.SeedSequence(seed).spawn(2) if isinstance(seed, int) else seed.spawn(2)
        treated = gpmodel.simulate(self.theta_treated, grid, n_per_arm, seed_t, prefix="T", cohort="T")
        control = gpmodel.simulate(self.theta_control, grid, n_per_arm, seed_c, prefix="C", cohort="C")
        return treated, control

    def simulate_long(self, n_per_arm:int, grid:ObservationGrid, seed) -> lmm.LongData:
        treated, control = self.simulate_arms(n_per_arm, grid, seed)
        return lmm.LongData.from_trajectories(treated, control, grid.times)


@dataclass(frozen=True)
class CellSummary:
    method: str
    n: int
    t: int
    power: float
    se: float
    n_ok: int
    n_failed: int

    def to_json(self) -> dict:
        return {
            "method": self.method, "n": self.n, "t": self.t, "power": self.power, "se": self.se,
            "lower": max(0.0, self.power - 2 * self.se), "upper": min(1.0, self.power + 2 * self.se),
            "n_ok": self.n_ok, "n_failed": self.n_failed,
        }


@dataclass
class ExperimentTable:
    """p-values per replicate (None for failed replicates) and the power summary per cell."""
    records: List[Tuple[str, int, int, int, Optional[float]]] = field(default_factory=list)
    summary: List[CellSummary] = field(default_factory=list)

    def extend(self, other:ExperimentTable):
        self.records.extend(other.records)
        self.summary.extend(other.summary)

    def results_rows(self) -> List[tuple]:
        return [(m, n, t, r, "" if p is None else repr(p)) for m, n, t, r, p in self.records]

    def summary_rows(self) -> List[tuple]:
        return [(s.method, s.n, s.t, repr(s.power), repr(s.se)) for s in self.summary]

    def p_values(self, method:str, n:int=None, t:int=None) -> List[float]:
        return [p for m, nn, tt, _, p in self.records
                if m == method and (n is None or nn == n) and (t is None or tt == t) and p is not None]

    def cell(self, method:str, n:int, t:int) -> CellSummary:
        return next(s for s in self.summary if (s.method, s.n, s.t) == (method, n, t))

    def to_json(self) -> dict:
        return {"cells": [s.to_json() for s in self.summary]}


def _embedding_for(scenario:Scenario, grid:ObservationGrid, seed) -> Tuple[fisherkernel.FisherEmbedding, List[str]]:
    """Pre-trial phase: an independent asymptomatic cohort drawn from the control parameters."""
    cohort = gpmodel.simulate(scenario.theta_control, grid, scenario.n_embed, seed, prefix="A", cohort="A")
    theta_hat = scenario.theta_control
    if scenario.fit_embedding:
        try:
            theta_hat = gpmodel.fit_mle(cohort, grid, scenario.theta_control, FitConfig(restarts=1)).params
        except gpmodel.NonConvergenceError as exc:
            log.warning("embedding fit failed (%s), using the generating parameters", exc)
    return fisherkernel.build_embedding(theta_hat, grid, cohort), [traj.subject_id for traj in cohort]


def _fvh_p_value(embedding:fisherkernel.FisherEmbedding, treated, control) -> float:
    xt = Sample("T", fisherkernel.fisher_vectors(embedding, treated))
    xc = Sample("C", fisherkernel.fisher_vectors(embedding, control))
    return twosample.hotelling_t2(xt, xc).p_value


def _lmm_p_value(treated, control, grid:ObservationGrid, alpha:float) -> float:
    data = lmm.LongData.from_trajectories(treated, control, grid.times)
    return lmm.lmm_interaction_test(lmm.fit_lmm(data), alpha).p_value


def run_power_experiment(scenario:Scenario, key:Tuple[int, ...]=()) -> ExperimentTable:
    """Simulate n_sims trials of the scenario and test each with FvH and LMM.

    The embedding is fitted on its own simulated cohort, never on trial data.
    Replicate failures are recorded as missing p-values.
    """
    grid = scenario.grid.per_subject()
    embed_seed, trial_seed = utils.child_seeds(scenario.seed, 2, *key)
    embedding, embed_ids = _embedding_for(scenario, grid, embed_seed)
    embed_ids = set(embed_ids)

    def _replicate(seed):
        treated, control = scenario.simulate_arms(scenario.n_per_arm, grid, seed)
        assert not embed_ids & {traj.subject_id for traj in treated + control}, "embedding and trial data overlap"
        out = {}
        for method, func in ((FVH, lambda: _fvh_p_value(embedding, treated, control)),
                             (LMM, lambda: _lmm_p_value(treated, control, grid, scenario.alpha))):
            try:
                out[method] = func()
            except REPLICATE_ERRORS as exc:
                log.warning("%s replicate failed: %s", method, exc)
                out[method] = None
        return out

    results = utils.ordered_map(_replicate, trial_seed.spawn(scenario.n_sims))
    table = ExperimentTable()
    n, t = scenario.n_per_arm, grid.size
    for method in METHODS:
        p_values = []
        for r, out in enumerate(results):
            table.records.append((method, n, t, r, out[method]))
            if out[method] is not None:
                p_values.append(out[method])
        mc = lmm.rejection_rate(p_values, scenario.alpha, scenario.n_sims - len(p_values))
        table.summary.append(CellSummary(method, n, t, mc.power, mc.se, mc.n_ok, mc.n_failed))
        log.info("%s n=%d t=%d: power %.3f +- %.3f (%d failed)", method, n, t, mc.power, mc.se, mc.n_failed)
    return table


def run_power_grid(base:Scenario, n_values:Sequence[int]=DEFAULT_N_VALUES, t_values:Sequence[int]=DEFAULT_T_VALUES,
                   span_weeks:float=gpmodel.DEFAULT_SPAN_WEEKS) -> ExperimentTable:
    """Every (n, t) cell with its own seed stream, derived from the master seed by cell index."""
    table = ExperimentTable()
    for i, n in enumerate(n_values):
        for j, t in enumerate(t_values):
            scenario = base.replace(n_per_arm=int(n), grid=ObservationGrid.evenly_spaced(int(t), span_weeks))
            table.extend(run_power_experiment(scenario, key=(i, j)))
    return table


@dataclass(frozen=True)
class Fold:
    treated: Tuple[str, ...]
    control: Tuple[str, ...]
    held_out: Tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Fold, ...]

    def to_json(self) -> dict:
        return {"folds": [{"treated": list(f.treated), "control": list(f.control), "held_out": list(f.held_out)}
                          for f in self.folds]}


def build_fold_plan(cn_ids:Sequence[str], mci_ids:Sequence[str], seed:int=0, n_folds:int=N_FOLDS,
                    fold_size:int=FOLD_SIZE, expected_cn:Optional[int]=N_CN,
                    expected_mci:Optional[int]=N_MCI) -> FoldPlan:
    """Shuffled CN ids cut into n_folds groups of fold_size; the first few ids fill the last group up again.

    Set expected_cn / expected_mci to None to accept any cohort size.
    """
    cn_ids = list(cn_ids)
    mci_ids = tuple(mci_ids)
    if len(set(cn_ids)) != len(cn_ids) or len(set(mci_ids)) != len(mci_ids):
        raise PlanError("subject ids must be unique")
    if set(cn_ids) & set(mci_ids):
        raise PlanError("CN and MCI ids overlap")
    if expected_cn is not None and len(cn_ids) != expected_cn:
        raise PlanError(f"expected {expected_cn} CN subjects, got {len(cn_ids)}")
    if expected_mci is not None and len(mci_ids) != expected_mci:
        raise PlanError(f"expected {expected_mci} MCI subjects, got {len(mci_ids)}")
    if not mci_ids:
        raise PlanError("no MCI subjects")
    repeats = n_folds * fold_size - len(cn_ids)
    if repeats < 0 or repeats > len(cn_ids) - fold_size:
        raise PlanError(f"{len(cn_ids)} CN subjects do not fill {n_folds} folds of {fold_size}")
    rng = np.random.default_rng(seed)
    order = [cn_ids[i] for i in rng.permutation(len(cn_ids))]
    slots = order + order[:repeats]
    folds = []
    for chunk in utils.chunks(slots, fold_size):
        treated = tuple(chunk)
        held_out = tuple(sid for sid in cn_ids if sid not in set(treated))
        folds.append(Fold(treated, mci_ids, held_out))
    return FoldPlan(tuple(folds))


@dataclass(frozen=True)
class FoldResult:
    index: int
    effect: float
    curve: PowerCurve
    lmm_curve: Optional[PowerCurve]
    n_for_power: Optional[int]
    theta_hat: GpParams

    def to_json(self) -> dict:
        return {"fold": self.index, "effect": self.effect, "n_for_power": self.n_for_power,
                "theta_hat": self.theta_hat.to_dict()}


@dataclass(frozen=True)
class FoldPower:
    folds: Tuple[FoldResult, ...]
    skipped: Tuple[dict, ...]
    average: Optional[PowerCurve]
    lmm_average: Optional[PowerCurve]
    target_power: float = TARGET_POWER

    def to_json(self) -> dict:
        return {
            "target_power": self.target_power,
            "folds": [f.to_json() for f in self.folds],
            "skipped": list(self.skipped),
            "average": self.average.to_json() if self.average else None,
            "average_n_for_power": self.average.n_for_power(self.target_power) if self.average else None,
        }

    def curve_rows(self) -> List[tuple]:
        """fold,method,n_total,n_T,n_C,power; fold 'avg' for the averaged curves."""
        rows = []
        for f in self.folds:
            for method, curve in ((FVH, f.curve), (LMM, f.lmm_curve)):
                if curve is not None:
                    rows.extend((f.index, method, *row) for row in curve.csv_rows())
        for method, curve in ((FVH, self.average), (LMM, self.lmm_average)):
            if curve is not None:
                rows.extend(("avg", method, *row) for row in curve.csv_rows())
        return rows


def _n_for_power(effect:float, alpha:float, target:float) -> Optional[int]:
    if not effect > 0:
        return None
    try:
        n_t, n_c = power.sample_size_for_power(target, fisherkernel.DIM, alpha, effect)
    except power.SampleSizeError:
        return None
    return n_t + n_c


def run_fold_power(plan:FoldPlan, data:Sequence[Trajectory], rho:float=power.DEFAULT_RHO, alpha:float=0.05,
                   n_grid:Sequence[int]=tuple(range(20, 401, 20)), init:Optional[GpParams]=None,
                   fit_config:Optional[FitConfig]=None, target_power:float=TARGET_POWER) -> FoldPower:
    """Per fold: fit on the held-out healthy subjects, embed both arms, power under the local alternative.

    The averaged curve uses the mean of the fold effect sizes.
    """
    by_id: Dict[str, Trajectory] = {traj.subject_id: traj for traj in data}
    length = {traj.values.size for traj in data}
    if len(length) != 1:
        raise ValueError("trajectories must share one grid")
    grid = ObservationGrid(np.arange(1, length.pop() + 1))
    fit_config = fit_config or FitConfig(restarts=1)

    def _fold(item):
        index, fold = item
        missing = [sid for sid in fold.treated + fold.control + fold.held_out if sid not in by_id]
        if missing:
            raise ValueError(f"unknown subject ids: {', '.join(missing[:5])}")
        assert not set(fold.treated) & set(fold.held_out), "fold treated and held-out overlap"
        healthy = [by_id[sid] for sid in fold.held_out]
        treated = [by_id[sid] for sid in fold.treated]
        control = [by_id[sid] for sid in fold.control]
        start = init or gpmodel.initial_guess(healthy, grid)
        theta_hat = gpmodel.fit_mle(healthy, grid, start, fit_config).params
        embedding = fisherkernel.build_embedding(theta_hat, grid, healthy)
        xa = Sample("A", fisherkernel.fisher_vectors(embedding, treated))
        xs = Sample("S", fisherkernel.fisher_vectors(embedding, control))
        alternative = power.local_alternative_from_cohorts(xa, xs, rho)
        effect = power.effect_from_alternative(alternative, xa, xs)
        curve = power.power_curve(n_grid, fisherkernel.DIM, alpha, effect)
        try:
            fit = lmm.fit_lmm(lmm.LongData.from_trajectories(treated, control, grid.times))
            lmm_curve = lmm.lmm_power_curve(fit, len(treated), len(control), rho, alpha, n_grid)
        except REPLICATE_ERRORS as exc:
            log.warning("fold %d: LMM fit failed: %s", index, exc)
            lmm_curve = None
        n_needed = _n_for_power(effect, alpha, target_power)
        log.info("fold %d: effect %.4g, n for power %.2f: %s", index, effect, target_power, n_needed)
        return FoldResult(index, effect, curve, lmm_curve, n_needed, theta_hat)

    def _safe_fold(item):
        try:
            return _fold(item)
        except (gpmodel.NonConvergenceError, power.PowerError, *REPLICATE_ERRORS) as exc:
            log.warning("fold %d skipped: %s", item[0], exc)
            return {"fold": item[0], "error": str(exc)}

    outcomes = utils.ordered_map(_safe_fold, list(enumerate(plan.folds)))
    folds = tuple(o for o in outcomes if isinstance(o, FoldResult))
    skipped = tuple(o for o in outcomes if isinstance(o, dict))
    average = lmm_average = None
    if folds:
        mean_effect = float(np.mean([f.effect for f in folds]))
        average = power.power_curve(n_grid, fisherkernel.DIM, alpha, mean_effect)
        lmm_effects = [f.lmm_curve.design.effect for f in folds if f.lmm_curve is not None]
        if lmm_effects:
            lmm_average = lmm.wald_power_curve(float(np.mean(lmm_effects)), alpha, n_grid)
    return FoldPower(folds, skipped, average, lmm_average, target_power)


# vim: set et sw=4 ts=4:
