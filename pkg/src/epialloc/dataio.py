"""Readers and writers for the dataset files.

Schemas
-------
metapopulation CSV   ``name,population,<name_1>,...,<name_N>``; the matrix
                     columns hold the travel rates ``c[n, k]``.
distance CSV         ``name,<name_1>,...,<name_N>`` in km.
case CSV             ``day,population,cumulative_cases``.
baseline CSV         ``population,m,m_tilde``.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrate import CaseSeries
from .model import BedSchedule, Metapopulation

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


def _rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if header is None:
        raise DataError(f"{path}: empty file")
    return [h.strip() for h in header], rows


def _number(path, lineno, field, text, integer=False):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: row {lineno}: {field} {text!r} is not a number") from None
    if not np.isfinite(v):
        raise DataError(f"{path}: row {lineno}: {field} must be finite")
    if integer:
        if v != int(v):
            raise DataError(f"{path}: row {lineno}: {field} {text!r} is not an integer")
        return int(v)
    return v


def load_metapopulation(path, distance_path=None) -> Metapopulation:
    header, rows = _rows(path)
    if header[:2] != ["name", "population"]:
        raise DataError(f"{path}: header must start with name,population")
    names = [r[0].strip() for r in rows]
    if header[2:] != names:
        raise DataError(f"{path}: travel columns must list the populations in row order")
    P = np.array([_number(path, i + 2, "population", r[1]) for i, r in enumerate(rows)])
    c = np.array([[_number(path, i + 2, f"travel[{header[j]}]", r[j])
                   for j in range(2, len(header))] for i, r in enumerate(rows)])
    d = None
    if distance_path is not None:
        d = load_matrix(distance_path, names)
    try:
        return Metapopulation(tuple(names), P, c, d)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_matrix(path, names: Sequence[str]) -> np.ndarray:
    header, rows = _rows(path)
    if header[0] != "name" or header[1:] != list(names) or [r[0] for r in rows] != list(names):
        raise DataError(f"{path}: rows and columns must list the populations in order")
    return np.array([[_number(path, i + 2, header[j], r[j]) for j in range(1, len(header))]
                     for i, r in enumerate(rows)])


def load_case_data(path, names: Sequence[str] | None = None,
                   exclude: Sequence[str] = ()) -> CaseSeries:
    """Read cumulative case counts into a series on a shared, sorted day grid.

    ``names`` (when given) is the set of known populations; a row for any
    other population is an error.  Populations in ``exclude`` are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    header, rows = _rows(path) if path.stat().st_size else (None, [])
    if header is None or not rows:
        raise DataError(f"{path}: no observations")
    if header != ["day", "population", "cumulative_cases"]:
        raise DataError(f"{path}: header must be day,population,cumulative_cases")
    known = None if names is None else set(names)
    exclude = set(exclude)
    if known is not None and not exclude <= known:
        raise DataError(f"{path}: excluded populations not in the metapopulation: "
                        f"{sorted(exclude - known)}")
    series: dict[str, dict[int, tuple[int, int]]] = defaultdict(dict)
    for i, r in enumerate(rows):
        lineno = i + 2
        if len(r) != 3:
            raise DataError(f"{path}: row {lineno}: expected 3 fields")
        day = _number(path, lineno, "day", r[0], integer=True)
        pop = r[1].strip()
        cases = _number(path, lineno, "cumulative_cases", r[2], integer=True)
        if day < 0 or cases < 0:
            raise DataError(f"{path}: row {lineno}: day and cumulative_cases must be >= 0")
        if known is not None and pop not in known:
            raise DataError(f"{path}: row {lineno}: unknown population {pop!r}")
        if day in series[pop]:
            raise DataError(f"{path}: row {lineno}: duplicate day {day} for {pop}")
        series[pop][day] = (cases, lineno)
    order = [n for n in (names if names is not None else sorted(series)) if n not in exclude]
    missing = [n for n in order if n not in series]
    if missing:
        raise DataError(f"{path}: no observations for {missing}")
    days = sorted(series[order[0]])
    for n in order:
        if sorted(series[n]) != days:
            raise DataError(f"{path}: population {n} is not observed on the same days as {order[0]}")
        prev = None
        for day in days:
            cases, lineno = series[n][day]
            if prev is not None and cases < prev:
                raise DataError(f"{path}: row {lineno}: cumulative cases for {n} decrease "
                                f"({prev} -> {cases}) on day {day}")
            prev = cases
    values = np.array([[series[n][day][0] for n in order] for day in days], dtype=float)
    if exclude:
        logger.info("excluded populations %s from the case data", sorted(exclude))
    return CaseSeries(tuple(order), np.array(days), values)


def write_case_data(path, series: CaseSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "population", "cumulative_cases"])
        for k, day in enumerate(series.days):
            for n, name in enumerate(series.names):
                w.writerow([int(day), name, int(round(series.values[k, n]))])


def write_metapopulation(path, meta: Metapopulation, distance_path=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "population", *meta.names])
        for n, name in enumerate(meta.names):
            w.writerow([name, int(meta.P[n]), *(repr(float(v)) for v in meta.c[n])])
    if distance_path is not None and meta.d is not None:
        with open(distance_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", *meta.names])
            for n, name in enumerate(meta.names):
                w.writerow([name, *(repr(float(v)) for v in meta.d[n])])


def load_baseline(path, names: Sequence[str], tau: int) -> BedSchedule:
    header, rows = _rows(path)
    if header != ["population", "m", "m_tilde"]:
        raise DataError(f"{path}: header must be population,m,m_tilde")
    table = {}
    for i, r in enumerate(rows):
        table[r[0].strip()] = (_number(path, i + 2, "m", r[1], integer=True),
                               _number(path, i + 2, "m_tilde", r[2], integer=True))
    missing = [n for n in names if n not in table]
    if missing:
        raise DataError(f"{path}: no baseline beds for {missing}")
    try:
        return BedSchedule([table[n][0] for n in names], [table[n][1] for n in names], tau)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_baseline(path, names: Sequence[str], beds: BedSchedule) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["population", "m", "m_tilde"])
        for n, name in enumerate(names):
            w.writerow([name, int(beds.m[n]), int(beds.m_tilde[n])])


def build_costs(meta: Metapopulation, reference_cost: float, reference_population: float,
                medical_cost: float, fuel_cost: float, depots: Sequence[str]):
    """Opening cost proportional to population; bed cost = medical + fuel to nearest depot."""
    if not depots:
        raise DataError("costs.depots: at least one depot is required")
    if reference_cost <= 0 or reference_population <= 0:
        raise DataError("costs: reference cost and population must be positive")
    if medical_cost < 0 or fuel_cost < 0:
        raise DataError("costs: medical and fuel costs must be nonnegative")
    if meta.d is None:
        raise DataError("costs: the metapopulation has no distance table")
    unknown = [d for d in depots if d not in meta.names]
    if unknown:
        raise DataError(f"costs.depots: unknown populations {unknown}")
    idx = [meta.index(d) for d in depots]
    o = reference_cost * meta.P / reference_population
    h = medical_cost + fuel_cost * meta.d[:, idx].min(axis=1)
    return o, h
