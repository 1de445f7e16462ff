"""Identifiable APC design: intercept, two slopes and three curvature blocks.

Rows are cells of the age-period grid in row-major order (age outer, period
inner). Curvature blocks are indexed on distinct level values; in spline mode
each block is reparameterised so that its values over the training levels sum
to zero and carry no linear trend, in GMRF mode the same two constraints are
recorded for conditioning at fit time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import linalg

from .dataset import ApcDataset
from .errors import OutOfRange, RankLoss, TooFewLevels, ValidationError
from .gmrf import StructureMatrix, linear_constraints, structure_matrix
from .splines import SplineBasis, make_basis

BLOCKS = ("age", "period", "cohort")
SLOPE_CHOICES = {frozenset(("age", "period")), frozenset(("period", "cohort")), frozenset(("age", "cohort"))}


def cohort_of(a: int, p: int, I: int, R: int) -> int:
    """Cohort index ``R * (I - a) + p`` (all indices 1-based)."""
    if not 1 <= a <= I:
        raise OutOfRange(f"age index {a} outside 1..{I}")
    if p < 1:
        raise OutOfRange(f"period index {p} must be >= 1")
    if R < 1:
        raise OutOfRange(f"ratio {R} must be >= 1")
    return R * (I - a) + p


@dataclass(frozen=True)
class GridIndex:
    a: int
    p: int
    flat: int

    @classmethod
    def from_ap(cls, a: int, p: int, J: int) -> "GridIndex":
        return cls(a, p, (a - 1) * J + (p - 1))

    @classmethod
    def from_flat(cls, flat: int, J: int) -> "GridIndex":
        return cls(flat // J + 1, flat % J + 1, flat)


@dataclass(frozen=True, eq=False)
class CurvatureBlock:
    """One curvature term. ``levels`` are the training level coordinates."""

    name: str
    mode: str
    levels: np.ndarray
    constraint: np.ndarray
    basis: SplineBasis | None = None
    structure: StructureMatrix | None = None
    transform: np.ndarray | None = None
    penalty: np.ndarray | None = None
    penalty_scale: float = 1.0
    constrained: bool = False

    @property
    def m(self) -> int:
        return len(self.levels)

    @property
    def n_coef(self) -> int:
        if self.mode == "gmrf":
            return self.m
        return self.transform.shape[1] if self.constrained else self.basis.n_basis

    def level_matrix(self, values) -> np.ndarray:
        """Constrained basis rows at arbitrary level values (spline mode)."""
        if self.mode != "spline":
            raise ValidationError("level_matrix is only defined for spline blocks")
        G = self.basis.evaluate(values).matrix
        return G @ self.transform if self.constrained else G


def apply_constraints(block: CurvatureBlock) -> CurvatureBlock:
    """Remove the intercept and linear-trend directions from a curvature block.

    Idempotent: a block that is already constrained is returned unchanged.
    """
    if block.constrained:
        return block
    C = block.constraint
    if block.m < 4:
        raise TooFewLevels(f"{block.name} block has {block.m} levels; need at least 4")
    if np.linalg.matrix_rank(C) < 2:
        raise RankLoss(f"{block.name} constraint matrix is not of full row rank")
    if block.mode == "gmrf":
        return replace(block, constrained=True)

    CG = C @ block.basis.X
    if np.linalg.matrix_rank(CG) < 2:
        raise RankLoss(f"{block.name} basis cannot represent the constrained directions")
    Q, _ = linalg.qr(CG.T, mode="full")
    N = Q[:, 2:]
    Sc = N.T @ block.basis.S @ N
    Sc = (Sc + Sc.T) / 2.0
    Z = block.basis.X @ N
    # bring the penalty onto the scale of the basis so log-lambda near 0 is sensible
    scale = np.abs(Z).sum(axis=1).max() ** 2 / np.abs(Sc).sum(axis=1).max()
    return replace(block, transform=N, penalty=Sc * scale, penalty_scale=float(scale), constrained=True)


@dataclass(frozen=True)
class BasisSpec:
    family: str = "tprs"
    knots: tuple = (10, 10, 12)

    def __post_init__(self):
        if len(self.knots) != 3:
            raise ValidationError("knots must give three values (age, period, cohort)")


@dataclass(frozen=True, eq=False)
class ApcDesign:
    """Design for an APC model fitted to ``data`` (the training grid)."""

    data: ApcDataset
    mode: str
    blocks: tuple
    slopes: tuple
    basis_spec: BasisSpec | None
    slope_centers: dict

    # ----- grid geometry -------------------------------------------------
    @property
    def I(self) -> int:
        return self.data.n_ages

    @property
    def J(self) -> int:
        return self.data.n_periods

    @property
    def R(self) -> int:
        return self.data.ratio

    @property
    def K(self) -> int:
        return self.R * (self.I - 1) + self.J

    @property
    def n(self) -> int:
        return self.I * self.J

    @property
    def cohort_index(self) -> np.ndarray:
        a, p = self.cells()
        return (self.R * (self.I - a) + p).reshape(self.I, self.J)

    @property
    def constraints(self) -> dict:
        return {b.name: b.constraint for b in self.blocks}

    def block(self, name: str) -> CurvatureBlock:
        return self.blocks[BLOCKS.index(name)]

    def cells(self, n_periods: int | None = None):
        """1-based ``(a, p)`` index arrays for all cells, row-major."""
        J = self.J if n_periods is None else n_periods
        a, p = np.meshgrid(np.arange(1, self.I + 1), np.arange(1, J + 1), indexing="ij")
        return a.ravel(), p.ravel()

    def period_value(self, p) -> np.ndarray:
        return self.data.periods[0] + self.data.period_step * (np.asarray(p) - 1)

    def age_value(self, a) -> np.ndarray:
        return self.data.midpoints[np.asarray(a) - 1]

    def cohort_value(self, a, p) -> np.ndarray:
        """Central birth year of the cohort, ``period - age midpoint``."""
        return self.period_value(p) - self.age_value(a)

    def level_values(self, name: str, a, p) -> np.ndarray:
        if name == "age":
            return self.age_value(a)
        if name == "period":
            return self.period_value(p).astype(float)
        return self.cohort_value(a, p)

    def level_index(self, name: str, a, p) -> np.ndarray:
        """0-based position of each cell on the block's index scale (GMRF mode)."""
        a, p = np.asarray(a), np.asarray(p)
        if name == "age":
            return a - 1
        if name == "period":
            return p - 1
        return self.R * (self.I - a) + p - 1

    # ----- design matrices ----------------------------------------------
    def fixed_rows(self, a, p) -> np.ndarray:
        a, p = np.asarray(a), np.asarray(p)
        c = self.R * (self.I - a) + p
        raw = {"age": a, "period": p, "cohort": c}
        cols = [np.ones(len(a))]
        cols += [raw[s] - self.slope_centers[s] for s in self.slopes]
        return np.column_stack(cols).astype(float)

    @property
    def fixed(self) -> np.ndarray:
        return self.fixed_rows(*self.cells())

    def column_slices(self) -> dict:
        out, start = {}, 3
        for b in self.blocks:
            out[b.name] = slice(start, start + b.n_coef)
            start += b.n_coef
        return out

    @property
    def n_coef(self) -> int:
        return 3 + sum(b.n_coef for b in self.blocks)

    def model_matrix(self, a=None, p=None) -> np.ndarray:
        """``[fixed | Z_age | Z_period | Z_cohort]`` for the given cells.

        Defaults to the training grid; periods past the training range are
        evaluated by basis extrapolation (spline mode only).
        """
        if self.mode != "spline":
            raise ValidationError("model_matrix needs spline mode; GMRF fields are indexed directly")
        if a is None:
            a, p = self.cells()
        a, p = np.asarray(a), np.asarray(p)
        parts = [self.fixed_rows(a, p)]
        for b in self.blocks:
            parts.append(b.level_matrix(self.level_values(b.name, a, p)))
        return np.hstack(parts)

    @property
    def X(self) -> np.ndarray:
        return self.model_matrix()

    def penalties(self) -> list:
        """``(slice, S)`` pairs for the penalised blocks (spline mode)."""
        sl = self.column_slices()
        return [(sl[b.name], b.penalty) for b in self.blocks]

    def to_frame(self) -> pd.DataFrame:
        a, p = self.cells()
        df = pd.DataFrame({"age_index": a, "period_index": p, "cohort_index": self.cohort_index.ravel()})
        if self.mode == "spline":
            X = self.X
            names = ["intercept"] + [f"slope_{s}" for s in self.slopes]
            for b in self.blocks:
                names += [f"{b.name}_{k + 1}" for k in range(b.n_coef)]
            for j, name in enumerate(names):
                df[name] = X[:, j]
        else:
            F = self.fixed
            df["intercept"] = F[:, 0]
            for j, s in enumerate(self.slopes):
                df[f"slope_{s}"] = F[:, j + 1]
        return df


def build_design(
    data: ApcDataset,
    mode: str = "spline",
    basis_spec: BasisSpec | None = None,
    slopes=("age", "period"),
) -> ApcDesign:
    """Build the APC design on the grid of ``data``.

    ``slopes`` names the two linear trends kept in the fixed block; the third
    is implicitly zero. The default drops the cohort slope.
    """
    if mode not in ("spline", "gmrf"):
        raise ValidationError(f"mode must be 'spline' or 'gmrf', got {mode!r}")
    slopes = tuple(slopes)
    if len(slopes) != 2 or frozenset(slopes) not in SLOPE_CHOICES:
        raise ValidationError(f"slopes must be two distinct of {BLOCKS}")
    if mode == "spline" and basis_spec is None:
        basis_spec = BasisSpec()

    I, J, R = data.n_ages, data.n_periods, data.ratio
    a, p = np.meshgrid(np.arange(1, I + 1), np.arange(1, J + 1), indexing="ij")
    a, p = a.ravel(), p.ravel()
    c = R * (I - a) + p
    centers = {"age": a.mean(), "period": p.mean(), "cohort": c.mean()}
    proto = ApcDesign(data, mode, (), slopes, basis_spec, centers)

    blocks = []
    for k, name in enumerate(BLOCKS):
        if mode == "spline":
            levels = np.unique(proto.level_values(name, a, p))
            if len(levels) < 4:
                raise TooFewLevels(f"{name} has {len(levels)} distinct values; need at least 4")
            n_knots = int(basis_spec.knots[k])
            if n_knots > len(levels):
                raise TooFewLevels(f"{name} has {len(levels)} distinct values but {n_knots} knots were requested")
            t = (levels - levels.mean()) / (levels.std() if len(levels) > 1 else 1.0)
            blk = CurvatureBlock(
                name, mode, levels, linear_constraints(len(levels), t),
                basis=make_basis(basis_spec.family, levels, n_knots),
            )
        else:
            m = {"age": I, "period": J, "cohort": R * (I - 1) + J}[name]
            if m < 4:
                raise TooFewLevels(f"{name} has {m} levels; need at least 4")
            blk = CurvatureBlock(
                name, mode, np.arange(1, m + 1, dtype=float), linear_constraints(m),
                structure=structure_matrix(2, m),
            )
        blocks.append(apply_constraints(blk))
    return replace(proto, blocks=tuple(blocks))
