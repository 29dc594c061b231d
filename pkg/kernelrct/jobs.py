import logging
import pathlib

from typing import List, Tuple

import numpy as np

from kernelrct import fisherkernel, gpmodel, ingest, lmm, power, simharness, store, twosample
from kernelrct.conf import RunConfig
from kernelrct.fisherkernel import FisherEmbedding
from kernelrct.gpmodel import FitConfig, FitResult, GpParams, ObservationGrid, Trajectory
from kernelrct.twosample import Sample


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCONVERGED = 2

COHORT_CSV = "cohort.csv"
PARAMS_JSON = "params.json"
EMBEDDING_JSON = "embedding.json"
VECTORS_CSV = "fisher_vectors.csv"
VECTORS_HEADER = ("subject_id", "cohort") + tuple(f"psi_{k}" for k in range(1, fisherkernel.DIM + 1))


class JobError(Exception):
    pass


def _require(path, what:str) -> pathlib.Path:
    if not path:
        raise JobError(f"no {what} configured")
    path = pathlib.Path(path)
    if not path.is_file():
        raise JobError(f"{what} not found: {path}")
    return path


def _cohort(config:RunConfig) -> Tuple[List[Trajectory], List[dict]]:
    """Preprocessed trajectories of the historical cohort, from raw or already preprocessed CSV."""
    path = _require(config.cohort, "cohort CSV")
    with open(path) as f:
        header = tuple(h.strip() for h in f.readline().strip().split(","))
    if header == ingest.TRAJECTORY_HEADER:
        return ingest.load_trajectories_csv(path), []
    raws = ingest.load_csv(path)
    return ingest.preprocess_cohort(raws, tuple(config.window_start), config.window_length, config.strict150)


def _grid(trajectories:List[Trajectory]) -> ObservationGrid:
    lengths = {traj.values.size for traj in trajectories}
    if len(lengths) != 1:
        raise JobError(f"trajectories differ in length: {sorted(lengths)}")
    return ObservationGrid.unit(np.arange(1, lengths.pop() + 1))


def _asymptomatic(config:RunConfig, trajectories:List[Trajectory]) -> List[Trajectory]:
    """Subjects of the asymptomatic cohort; unlabelled trajectories count as asymptomatic."""
    out = [traj for traj in trajectories if traj.cohort in (config.asymptomatic, None)]
    if len(out) < 2:
        raise JobError(f"need at least 2 subjects in cohort {config.asymptomatic}, got {len(out)}")
    return out


def _fit(config:RunConfig, data:List[Trajectory], grid:ObservationGrid) -> FitResult:
    fit_config = FitConfig(restarts=config.restarts, max_iter=config.max_iter, seed=config.seed)
    result = gpmodel.fit_mle(data, grid, gpmodel.initial_guess(data, grid), fit_config)
    log.info("Fitted %s on %d subjects: loglik %.6g, converged %s",
             result.params, len(data), result.loglik, result.converged)
    return result


def _params(config:RunConfig, data:List[Trajectory], grid:ObservationGrid) -> GpParams:
    if config.params:
        result, _ = FitResult.from_json(store.read_json(_require(config.params, "params JSON")))
        return result.params
    return _fit(config, data, grid).params


def _embedding(config:RunConfig, trajectories:List[Trajectory]) -> FisherEmbedding:
    if config.embedding:
        return FisherEmbedding.from_json(store.read_json(_require(config.embedding, "embedding JSON")))
    grid = _grid(trajectories)
    healthy = _asymptomatic(config, trajectories)
    return fisherkernel.build_embedding(_params(config, healthy, grid), grid, healthy, eps=config.eps)


def _vector_rows(embedding:FisherEmbedding, trajectories:List[Trajectory]) -> List[tuple]:
    vectors = fisherkernel.fisher_vectors(embedding, trajectories)
    return [(traj.subject_id, traj.cohort or "", *(repr(float(v)) for v in row))
            for traj, row in zip(trajectories, vectors)]


def cmd_synth(config:RunConfig, out:store.ArtifactStore) -> int:
    raws = ingest.synth_cohort(n_cn=config.n_cn, n_mci=config.n_mci, seed=config.seed,
                               n_weeks=config.n_weeks, missing_rate=config.missing_rate,
                               window_start_range=tuple(config.window_start))
    path = out.write_csv(COHORT_CSV, ingest.RAW_HEADER, ingest.raw_rows(raws))
    log.info("Synthetic cohort of %d subjects written to %s", len(raws), path)
    return EXIT_OK


def cmd_fit(config:RunConfig, out:store.ArtifactStore) -> int:
    trajectories, exclusions = _cohort(config)
    grid = _grid(trajectories)
    healthy = _asymptomatic(config, trajectories)
    result = _fit(config, healthy, grid)
    out.write_json(PARAMS_JSON, {**result.to_json(grid), "exclusions": exclusions})
    if not result.converged:
        log.warning("Optimizer stopped before the gradient tolerance was met")
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_embed(config:RunConfig, out:store.ArtifactStore) -> int:
    trajectories, _ = _cohort(config)
    embedding = _embedding(config, trajectories)
    out.write_json(EMBEDDING_JSON, embedding.to_json())
    out.write_csv(VECTORS_CSV, VECTORS_HEADER, _vector_rows(embedding, trajectories))
    return EXIT_OK


def _trial_arms(data:lmm.LongData, grid:ObservationGrid) -> Tuple[List[Trajectory], List[Trajectory]]:
    """Long-format trial rows placed on the embedding grid; weeks off the grid are dropped."""
    times = grid.times
    arms = {1: [], 0: []}
    dropped = 0
    for sid in data.subjects:
        rows = data.subject == sid
        values = np.full(times.size, np.nan)
        idx = np.searchsorted(times, data.week[rows])
        on_grid = (idx < times.size) & (times[np.minimum(idx, times.size - 1)] == data.week[rows])
        dropped += int(np.count_nonzero(~on_grid))
        values[idx[on_grid]] = data.value[rows][on_grid]
        group = int(data.group[rows][0])
        arms[group].append(Trajectory(str(sid), values, cohort="T" if group else "C"))
    if dropped:
        log.warning("%d trial rows fall outside the embedding grid and were dropped", dropped)
    return arms[1], arms[0]


def cmd_test(config:RunConfig, out:store.ArtifactStore) -> int:
    data = lmm.LongData.load_csv(_require(config.trial, "trial CSV"))
    if config.method == "lmm":
        fit = lmm.fit_lmm(data)
        result = lmm.lmm_interaction_test(fit, config.alpha)
        doc = {**result.to_json(), "fit": fit.to_json()}
    else:
        trajectories, _ = _cohort(config) if not config.embedding else ([], [])
        embedding = _embedding(config, trajectories)
        treated, control = _trial_arms(data, embedding.grid)
        xt = Sample("T", fisherkernel.fisher_vectors(embedding, treated))
        xc = Sample("C", fisherkernel.fisher_vectors(embedding, control))
        if config.method == "mmd":
            result = twosample.mmd_permutation_test(xt, xc, config.alpha, config.n_perm, config.seed)
        elif config.method == "kernel-hotelling":
            result = twosample.kernel_hotelling_test(xt, xc, config.gamma, config.alpha, config.n_perm,
                                                     config.seed, config.pooled_weights)
        else:
            result = twosample.hotelling_test(xt, xc, config.alpha)
        doc = result.to_json()
    out.write_json("test.json", doc)
    print(result.verdict())
    return EXIT_OK


def _cohort_samples(config:RunConfig, embedding:FisherEmbedding,
                    trajectories:List[Trajectory]) -> Tuple[Sample, Sample]:
    groups = []
    for label in (config.asymptomatic, config.symptomatic):
        members = ingest.by_cohort(trajectories, label)
        if len(members) < 2:
            raise JobError(f"need at least 2 subjects in cohort {label}, got {len(members)}")
        groups.append(Sample(label, fisherkernel.fisher_vectors(embedding, members)))
    return groups[0], groups[1]


def cmd_power(config:RunConfig, out:store.ArtifactStore) -> int:
    trajectories, _ = _cohort(config)
    embedding = _embedding(config, trajectories)
    xa, xs = _cohort_samples(config, embedding, trajectories)
    alternative = power.local_alternative_from_cohorts(xa, xs, config.rho)
    effect = power.effect_from_alternative(alternative, xa, xs)
    curve = power.power_curve(config.n_grid, fisherkernel.DIM, config.alpha, effect, tuple(config.allocation))
    try:
        n_t, n_c = power.sample_size_for_power(config.target_power, fisherkernel.DIM, config.alpha, effect,
                                               tuple(config.allocation))
        sample_size = {"n_T": n_t, "n_C": n_c, "n_total": n_t + n_c}
    except power.PowerError as exc:
        log.warning("No sample size reaches power %s: %s", config.target_power, exc)
        sample_size = None
    out.write_csv("power.csv", power.CSV_HEADER, curve.csv_rows())
    out.write_json("power.json", {
        **curve.to_json(),
        "alternative": alternative.to_json(),
        "target_power": config.target_power,
        "sample_size": sample_size,
    })
    log.info("Effect size %.4g, n for power %s: %s", effect, config.target_power, sample_size)
    return EXIT_OK


def cmd_simulate(config:RunConfig, out:store.ArtifactStore) -> int:
    control = ingest.DEFAULT_MCI_PARAMS
    if config.params:
        control, _ = FitResult.from_json(store.read_json(_require(config.params, "params JSON")))
        control = control.params
    grid = ObservationGrid.evenly_spaced(config.t_values[0], config.span_weeks)
    common = dict(n_per_arm=config.n_values[0], alpha=config.alpha, n_sims=config.n_sims, seed=config.seed,
                  n_embed=config.n_embed, fit_embedding=config.fit_embedding)
    if config.mu_shift is not None:
        base = simharness.Scenario.from_shift(control, config.mu_shift, grid, **common)
    else:
        base = simharness.Scenario.from_local_alternative(control, ingest.DEFAULT_CN_PARAMS.mu, config.rho,
                                                          grid, **common)
    table = simharness.run_power_grid(base, config.n_values, config.t_values, config.span_weeks)
    out.write_csv("results.csv", simharness.RESULTS_HEADER, table.results_rows())
    out.write_csv("summary.csv", simharness.SUMMARY_HEADER, table.summary_rows())
    out.write_json("simulate.json", {**table.to_json(), "mu_shift": base.mu_shift})
    return EXIT_OK


def cmd_pipeline(config:RunConfig, out:store.ArtifactStore) -> int:
    """synth (without a cohort) -> fit -> embed -> power -> cross-validated fold power"""
    if not config.cohort:
        cmd_synth(config, out)
        config = config.replace(cohort=str(out.path(COHORT_CSV)))
    status = cmd_fit(config, out)
    config = config.replace(params=str(out.path(PARAMS_JSON)))
    cmd_embed(config, out)
    config = config.replace(embedding=str(out.path(EMBEDDING_JSON)))
    cmd_power(config, out)

    trajectories, _ = _cohort(config)
    cn_ids = [traj.subject_id for traj in ingest.by_cohort(trajectories, config.asymptomatic)]
    mci_ids = [traj.subject_id for traj in ingest.by_cohort(trajectories, config.symptomatic)]
    plan = simharness.build_fold_plan(cn_ids, mci_ids, config.seed, config.n_folds, config.fold_size,
                                      expected_cn=None, expected_mci=None)
    folds = simharness.run_fold_power(plan, trajectories, config.rho, config.alpha, config.n_grid,
                                      fit_config=FitConfig(restarts=1, max_iter=config.max_iter, seed=config.seed),
                                      target_power=config.target_power)
    out.write_csv("folds.csv", ("fold", "method") + power.CSV_HEADER, folds.curve_rows())
    out.write_json("folds.json", {**folds.to_json(), "plan": plan.to_json()})
    return status


# vim: set et sw=4 ts=4:
