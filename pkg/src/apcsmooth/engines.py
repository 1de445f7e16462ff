"""Named model configurations shared by the simulation study and the CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import bayes, penalized
from .dataset import ApcDataset
from .errors import ValidationError
from .gmrf import PCPrior
from .results import FitResult
from .splines import FAMILIES as BASES


@dataclass(frozen=True)
class EngineConfig:
    kind: str
    basis: str | None = None
    knots: tuple = (10, 10, 12)
    pc_u: float = 1.0
    pc_alpha: float = 0.01

    def __post_init__(self):
        if self.kind == "spline":
            if self.basis not in BASES:
                raise ValidationError(f"--basis must be one of {BASES}")
            if len(self.knots) != 3:
                raise ValidationError("--knots needs three comma-separated integers")
        elif self.kind == "rw2":
            if self.basis is not None:
                raise ValidationError("--basis cannot be combined with --engine rw2")
            PCPrior(self.pc_u, self.pc_alpha)
        else:
            raise ValidationError(f"--engine must be 'spline' or 'rw2', got {self.kind!r}")
        object.__setattr__(self, "knots", tuple(int(k) for k in self.knots))

    @property
    def name(self) -> str:
        if self.kind == "spline":
            return self.basis.upper()
        return f"RW2-U{self.pc_u:g}"

    def as_dict(self) -> dict:
        d = asdict(self)
        d["knots"] = list(self.knots)
        d["name"] = self.name
        return d

    def fit(self, data: ApcDataset, train_through: int | None = None) -> FitResult:
        if self.kind == "spline":
            result, _, _ = penalized.fit_apc(data, train_through, self.basis, self.knots)
        else:
            result, _, _ = bayes.fit_apc(data, train_through, PCPrior(self.pc_u, self.pc_alpha))
        result.engine = self.name
        return result


def default_engines(knots=(10, 10, 12), pc_alpha: float = 0.01) -> list:
    """The three spline bases and the three PC-prior scales of the study."""
    splines = [EngineConfig("spline", b, tuple(knots)) for b in ("crs", "bs", "tprs")]
    walks = [EngineConfig("rw2", None, tuple(knots), u, pc_alpha) for u in (1.0, 3.0, 6.0)]
    return splines + walks
