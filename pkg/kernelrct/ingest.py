"""
Raw weekly series and their preprocessing into baseline-subtracted trajectories.

The anchor is the first present week within the start range; the trajectory
holds the window_length weeks after the anchor, minus the anchor value.
"""

from __future__ import annotations

import csv
import logging
import math
import pathlib

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kernelrct import gpmodel, utils
from kernelrct.gpmodel import GpParams, ObservationGrid, Trajectory

log = logging.getLogger(__name__)

COHORTS = ("CN", "MCI")
RAW_HEADER = ("subject_id", "week", "value", "cohort")
TRAJECTORY_HEADER = ("subject_id", "offset_week", "value")
MAX_RECORDS = 250
WINDOW_START_RANGE = (5, 15)
WINDOW_LENGTH = 150
MIN_OBSERVATIONS = 2

NO_ANCHOR = "no_anchor"
SHORT_WINDOW = "short_window"
TOO_FEW_OBSERVATIONS = "too_few_observations"

SYNTH_MISSING_RATE = 0.05
SYNTH_BASELINE_SD = 1.0
DEFAULT_CN_PARAMS = GpParams(mu=0.0, sigma2=1.0, alpha2=0.5, beta=0.5, rho2=50.0, nu=1.5)
DEFAULT_MCI_PARAMS = GpParams(mu=-0.02, sigma2=1.0, alpha2=0.8, beta=0.5, rho2=50.0, nu=1.5)


class ExclusionError(Exception):
    def __init__(self, subject_id:str, reason:str, detail:str=""):
        super().__init__(f"{subject_id}: excluded ({reason}){': ' + detail if detail else ''}")
        self.subject_id = subject_id
        self.reason = reason


class CsvFormatError(Exception):
    def __init__(self, path:Union[pathlib.Path, str], errors:Sequence[Tuple[int, str]]):
        lines = "\n".join(f"  {path}:{line}: {msg}" for line, msg in errors)
        super().__init__(f"{path}: {len(errors)} malformed row(s)\n{lines}")
        self.path = path
        self.errors = list(errors)


@dataclass(frozen=True, eq=False)
class RawSeries:
    subject_id: str
    weeks: np.ndarray
    values: np.ndarray
    present: np.ndarray
    cohort: str = "CN"

    def __post_init__(self):
        weeks = np.asarray(self.weeks, dtype=int).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        present = np.asarray(self.present, dtype=bool).ravel()
        if not (weeks.size == values.size == present.size):
            raise ValueError(f"{self.subject_id}: weeks, values and present differ in length")
        if weeks.size > MAX_RECORDS:
            raise ValueError(f"{self.subject_id}: {weeks.size} records, at most {MAX_RECORDS} allowed")
        if np.any(weeks < 0) or np.any(np.diff(weeks) <= 0):
            raise ValueError(f"{self.subject_id}: week indices must be >= 0 and strictly increasing")
        if not np.all(np.isfinite(values[present])):
            raise ValueError(f"{self.subject_id}: non-finite value in a present week")
        if self.cohort not in COHORTS:
            raise ValueError(f"{self.subject_id}: cohort must be one of {', '.join(COHORTS)}, got '{self.cohort}'")
        for name, a in (("weeks", weeks), ("values", values), ("present", present)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.weeks.size

    def value_at(self, week:int) -> Optional[float]:
        idx = np.searchsorted(self.weeks, week)
        if idx < self.weeks.size and self.weeks[idx] == week and self.present[idx]:
            return float(self.values[idx])
        return None


def find_anchor(raw:RawSeries, window_start_range:Tuple[int, int]=WINDOW_START_RANGE) -> Optional[int]:
    """First present week within the inclusive start range."""
    lo, hi = window_start_range
    in_range = raw.present & (raw.weeks >= lo) & (raw.weeks <= hi)
    idx = np.flatnonzero(in_range)
    return int(raw.weeks[idx[0]]) if idx.size else None


def preprocess(raw:RawSeries, window_start_range:Tuple[int, int]=WINDOW_START_RANGE,
               window_length:int=WINDOW_LENGTH, strict150:bool=False,
               min_observations:int=MIN_OBSERVATIONS) -> Trajectory:
    """Trajectory at offsets 1..window_length after the anchor; absent weeks are NaN.

    strict150 excludes subjects whose record ends before the window does.
    """
    anchor = find_anchor(raw, window_start_range)
    if anchor is None:
        raise ExclusionError(raw.subject_id, NO_ANCHOR,
                             f"no present week in {window_start_range[0]}..{window_start_range[1]}")
    if strict150 and raw.weeks[-1] < anchor + window_length:
        raise ExclusionError(raw.subject_id, SHORT_WINDOW,
                             f"record ends at week {raw.weeks[-1]}, window needs {anchor + window_length}")
    baseline = raw.value_at(anchor)
    out = np.full(window_length, np.nan)
    offsets = raw.weeks - anchor
    keep = raw.present & (offsets >= 1) & (offsets <= window_length)
    out[offsets[keep] - 1] = raw.values[keep] - baseline
    n_obs = int(np.count_nonzero(~np.isnan(out)))
    if n_obs < min(min_observations, window_length):
        raise ExclusionError(raw.subject_id, TOO_FEW_OBSERVATIONS, f"{n_obs} observed weeks in the window")
    return Trajectory(raw.subject_id, out, cohort=raw.cohort, anchor_week=anchor)


def preprocess_cohort(raws:Sequence[RawSeries], window_start_range:Tuple[int, int]=WINDOW_START_RANGE,
                      window_length:int=WINDOW_LENGTH, strict150:bool=False) -> Tuple[List[Trajectory], List[dict]]:
    """Trajectories of all retained subjects plus the exclusion report."""
    trajectories = []
    exclusions = []
    for raw in raws:
        try:
            trajectories.append(preprocess(raw, window_start_range, window_length, strict150))
        except ExclusionError as exc:
            log.info("%s", exc)
            exclusions.append({"subject_id": exc.subject_id, "reason": exc.reason})
    log.info("Preprocessed %d subjects, %d excluded", len(trajectories), len(exclusions))
    return trajectories, exclusions


def to_raw(trajectory:Trajectory) -> RawSeries:
    """Inverse of preprocess: the anchor becomes week 0 with value 0."""
    values = np.concatenate([[0.0], np.nan_to_num(trajectory.values)])
    present = np.concatenate([[True], trajectory.observed])
    weeks = np.arange(values.size)
    return RawSeries(trajectory.subject_id, weeks, values, present, trajectory.cohort or COHORTS[0])


def by_cohort(items:Sequence, cohort:str) -> list:
    return [item for item in items if item.cohort == cohort]


def _fmt(x:float) -> str:
    return repr(float(x))


def load_csv(path:Union[pathlib.Path, str]) -> List[RawSeries]:
    """Raw cohort CSV (subject_id,week,value,cohort); absent weeks are simply missing rows."""
    errors = []
    records: Dict[str, Dict[int, float]] = {}
    cohorts: Dict[str, str] = {}
    first_line: Dict[Tuple[str, int], int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RAW_HEADER:
            raise CsvFormatError(path, [(1, f"expected header {','.join(RAW_HEADER)}")])
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(RAW_HEADER):
                errors.append((line, f"expected {len(RAW_HEADER)} fields, got {len(row)}"))
                continue
            sid, week, value, cohort = (c.strip() for c in row)
            if not sid:
                errors.append((line, "empty subject_id"))
                continue
            try:
                week = int(week)
            except ValueError:
                errors.append((line, f"week is not an integer: '{week}'"))
                continue
            if week < 0:
                errors.append((line, f"negative week {week}"))
                continue
            try:
                value = float(value)
            except ValueError:
                errors.append((line, f"value is not a number: '{value}'"))
                continue
            if not math.isfinite(value):
                errors.append((line, f"non-finite value '{row[2].strip()}'"))
                continue
            if cohort not in COHORTS:
                errors.append((line, f"cohort must be one of {', '.join(COHORTS)}, got '{cohort}'"))
                continue
            if cohorts.setdefault(sid, cohort) != cohort:
                errors.append((line, f"subject {sid} changes cohort from {cohorts[sid]} to {cohort}"))
                continue
            key = (sid, week)
            if key in first_line:
                errors.append((line, f"duplicate row for subject {sid} week {week} (first on line {first_line[key]})"))
                continue
            first_line[key] = line
            records.setdefault(sid, {})[week] = value
    for sid, weeks in records.items():
        if len(weeks) > MAX_RECORDS:
            errors.append((first_line[(sid, min(weeks))], f"subject {sid} has {len(weeks)} records, at most {MAX_RECORDS} allowed"))
    if errors:
        raise CsvFormatError(path, sorted(errors))
    series = []
    for sid, weeks in records.items():
        order = sorted(weeks)
        series.append(RawSeries(sid, order, [weeks[w] for w in order], [True] * len(order), cohorts[sid]))
    log.debug("%s: %d subjects", path, len(series))
    return series


def raw_rows(raws:Sequence[RawSeries]) -> List[tuple]:
    rows = []
    for raw in raws:
        rows.extend((raw.subject_id, int(w), _fmt(v), raw.cohort)
                    for w, v, p in zip(raw.weeks, raw.values, raw.present) if p)
    return rows


def save_csv(raws:Sequence[RawSeries], path:Union[pathlib.Path, str]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(RAW_HEADER)
        writer.writerows(raw_rows(raws))


def trajectory_rows(trajectories:Sequence[Trajectory]) -> List[tuple]:
    rows = []
    for traj in trajectories:
        rows.extend((traj.subject_id, k, "" if math.isnan(v) else _fmt(v))
                    for k, v in enumerate(traj.values, start=1))
    return rows


def save_trajectories_csv(trajectories:Sequence[Trajectory], path:Union[pathlib.Path, str]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_HEADER)
        writer.writerows(trajectory_rows(trajectories))


def load_trajectories_csv(path:Union[pathlib.Path, str]) -> List[Trajectory]:
    errors = []
    values: Dict[str, Dict[int, float]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_HEADER:
            raise CsvFormatError(path, [(1, f"expected header {','.join(TRAJECTORY_HEADER)}")])
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(TRAJECTORY_HEADER):
                errors.append((line, f"expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}"))
                continue
            sid, offset, value = (c.strip() for c in row)
            try:
                offset = int(offset)
                value = float(value) if value else math.nan
            except ValueError as exc:
                errors.append((line, str(exc)))
                continue
            if offset < 1:
                errors.append((line, f"offset_week must be >= 1, got {offset}"))
                continue
            if offset in values.setdefault(sid, {}):
                errors.append((line, f"duplicate row for subject {sid} offset {offset}"))
                continue
            values[sid][offset] = value
    if errors:
        raise CsvFormatError(path, errors)
    length = max((max(v) for v in values.values()), default=0)
    out = []
    for sid, by_offset in values.items():
        row = np.full(length, np.nan)
        for k, v in by_offset.items():
            row[k - 1] = v
        out.append(Trajectory(sid, row))
    return out


def synth_cohort(params_cn:GpParams=DEFAULT_CN_PARAMS, params_mci:GpParams=DEFAULT_MCI_PARAMS,
                 n_cn:int=86, n_mci:int=11, seed:int=0, n_weeks:int=MAX_RECORDS,
                 missing_rate:float=SYNTH_MISSING_RATE,
                 window_start_range:Tuple[int, int]=WINDOW_START_RANGE) -> List[RawSeries]:
    """Synthetic raw cohort in the weekly format.

    Each subject gets a random anchor in the start range (earlier weeks of the
    range absent), a baseline level, and GP increments after the anchor; weeks
    after the anchor go missing independently with probability missing_rate.
    """
    if n_cn < 0 or n_mci < 0:
        raise ValueError("cohort sizes must be >= 0")
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError(f"missing rate must be in [0, 1), got {missing_rate}")
    lo, hi = window_start_range
    horizon = n_weeks - 1 - hi
    if horizon < 2:
        raise ValueError(f"{n_weeks} weeks leave no room after the start range")
    grid = ObservationGrid(np.arange(1, horizon + 1))
    raws = []
    for cohort, params, n, stream in zip(COHORTS, (params_cn, params_mci), (n_cn, n_mci),
                                         utils.child_seeds(seed, len(COHORTS))):
        if n == 0:
            continue
        sim_seed, rng_seed = stream.spawn(2)
        increments = gpmodel.simulate(params, grid, n, sim_seed, prefix=cohort, cohort=cohort)
        rng = np.random.default_rng(rng_seed)
        for traj in increments:
            anchor = int(rng.integers(lo, hi + 1))
            level = rng.normal(0.0, SYNTH_BASELINE_SD)
            weeks = np.arange(n_weeks)
            values = np.full(n_weeks, level)
            values[:lo] += rng.normal(0.0, math.sqrt(params.sigma2), lo)
            after = np.arange(anchor + 1, min(n_weeks, anchor + 1 + horizon))
            values[after] = level + traj.values[:after.size]
            present = rng.random(n_weeks) >= missing_rate
            present[lo:anchor] = False
            present[anchor] = True
            present[anchor + 1 + horizon:] = False
            raws.append(RawSeries(traj.subject_id, weeks[present], values[present],
                                  np.ones(int(present.sum()), dtype=bool), cohort))
    log.info("Synthesized %d CN and %d MCI subjects", n_cn, n_mci)
    return raws


# vim: set et sw=4 ts=4:
