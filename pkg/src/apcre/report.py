"""Cell-mean data and side-by-side fits across random-effect choices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .design import FACTORS, APCGrid, DesignBundle, apc_model, build_grid, parse_factors
from .reml import FittedModel, fit_re_apc

# Model 1..6: random A; random P; random C; random P+C; random A+C; random A+P.
SIX_SPECS: tuple[tuple[str, ...], ...] = (
    ("age",),
    ("period",),
    ("cohort",),
    ("period", "cohort"),
    ("age", "cohort"),
    ("age", "period"),
)


@dataclass
class CellData:
    """One value per Lexis cell, in age-major row order, with optional weights."""

    grid: APCGrid
    y: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.y.shape[0] != self.grid.n:
            raise ValueError(f"expected {self.grid.n} cell values, got {self.y.shape[0]}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).ravel()
            if self.weights.shape != self.y.shape or np.any(self.weights <= 0):
                raise ValueError("weights must be positive, one per cell")

    def whiten(self, bundle: DesignBundle) -> tuple[DesignBundle, np.ndarray]:
        """Scale rows by ``sqrt(weight)`` so the error covariance becomes ``sigma_e^2 I``."""
        if self.weights is None:
            return bundle, self.y
        s = np.sqrt(self.weights)
        scaled = DesignBundle(
            grid=bundle.grid,
            W=bundle.W * s[:, None],
            Z_blocks={k: Z * s[:, None] for k, Z in bundle.Z_blocks.items()},
            labels=bundle.labels,
            parameterization=bundle.parameterization,
            fe_slices=bundle.fe_slices,
            codings=bundle.codings,
        )
        return scaled, self.y * s


def read_cell_csv(path) -> CellData:
    """Read ``age_index,period_index,value[,weight]`` with 1-based indices."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip() for f in (reader.fieldnames or [])]
        if fields[:3] != ["age_index", "period_index", "value"]:
            raise ValueError("header must start with age_index,period_index,value")
        rows = [{k.strip(): v for k, v in r.items()} for r in reader]
    ages = [int(r["age_index"]) for r in rows]
    periods = [int(r["period_index"]) for r in rows]
    grid = build_grid(max(ages), max(periods))
    y = np.full(grid.n, np.nan)
    has_w = "weight" in fields
    w = np.full(grid.n, np.nan) if has_w else None
    for r, i, j in zip(rows, ages, periods):
        if i < 1 or j < 1:
            raise ValueError("indices are 1-based")
        k = (i - 1) * grid.p + (j - 1)
        if not np.isnan(y[k]):
            raise ValueError(f"duplicate cell ({i}, {j})")
        y[k] = float(r["value"])
        if has_w:
            w[k] = float(r["weight"])
    if np.isnan(y).any():
        raise ValueError("every (age, period) cell needs exactly one row")
    return CellData(grid, y, w)


def write_cell_csv(path, data: CellData) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["age_index", "period_index", "value"] + (["weight"] if data.weights is not None else [])
        writer.writerow(header)
        for row, (i, j, _) in enumerate(data.grid.cells):
            vals = [i, j, repr(float(data.y[row]))]
            if data.weights is not None:
                vals.append(repr(float(data.weights[row])))
            writer.writerow(vals)


def spec_label(random: Sequence[str]) -> str:
    return "random_" + "+".join(f[0].upper() for f in random)


def check_spec(random: Sequence[str]) -> tuple[str, ...]:
    random = tuple(parse_factors(list(random)))
    if not 1 <= len(random) <= 2:
        raise ValueError(
            "each specification needs one or two random factors; "
            "none or all three leaves the model unidentified without an explicit constraint"
        )
    return random


@dataclass
class SensitivityReport:
    grid: APCGrid
    specs: list[tuple[str, ...]]
    fits: dict[str, FittedModel] = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return [spec_label(s) for s in self.specs]

    def effect_table(self) -> list[list]:
        """Rows ``(effect, group, value per model...)`` in the layout of a
        groups-by-models table, followed by the decomposition rows."""
        rows = []
        for name in FACTORS:
            for g in range(self.grid.levels(name)):
                rows.append([name, g + 1] + [self.fits[lab].effects.effects[name][g] for lab in self.labels])
        for name in FACTORS:
            for part in ("level", "linear_slope"):
                rows.append([name, part] + [getattr(self.fits[lab].effects.decomposition[name], part) for lab in self.labels])
        return rows

    def as_dict(self) -> dict:
        out = {}
        for lab, fit in zip(self.labels, self.fits.values()):
            out[lab] = {
                "variance": fit.variance.as_dict(),
                "rl": fit.rl,
                "multiple_maxima": fit.multiple_maxima,
                "decomposition": {k: d.as_dict() for k, d in fit.effects.decomposition.items()},
                "effects": {k: v.tolist() for k, v in fit.effects.effects.items()},
            }
        return out


def sensitivity_table(data: CellData, model_specs: Sequence[Sequence[str]] = SIX_SPECS) -> SensitivityReport:
    """Fit the same cell means under each random-effect choice."""
    specs = [check_spec(s) for s in model_specs]
    report = SensitivityReport(data.grid, specs)
    for spec in specs:
        bundle, y = data.whiten(apc_model(data.grid, random=spec))
        report.fits[spec_label(spec)] = fit_re_apc(bundle, y)
    return report
