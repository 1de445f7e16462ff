"""Identifiable age-period-cohort models smoothed by penalised splines or RW2 fields."""

__version__ = "0.1.0"

from .dataset import ApcDataset, LogRateSurface, aggregate_ages, load_csv, log_rates, write_csv  # noqa: E402
from .design import ApcDesign, BasisSpec, build_design, cohort_of  # noqa: E402
from .engines import EngineConfig, default_engines  # noqa: E402
from .gmrf import PCPrior, structure_matrix  # noqa: E402
from .results import FitResult  # noqa: E402
from .scoring import ScoreReport, coverage_width, interval_score, mae_mse, score_fit  # noqa: E402
from .splines import make_basis  # noqa: E402

__all__ = [
    "ApcDataset", "ApcDesign", "BasisSpec", "EngineConfig", "FitResult", "LogRateSurface", "PCPrior",
    "ScoreReport", "aggregate_ages", "build_design", "cohort_of", "coverage_width", "default_engines",
    "interval_score", "load_csv", "log_rates", "mae_mse", "make_basis", "score_fit", "structure_matrix",
    "write_csv",
]
