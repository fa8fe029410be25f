"""
Package-wide settings: numerical thresholds, config-file loading and logging setup.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import toml
from dotenv import load_dotenv

# Relative singular-value threshold for the graph identification checks
IDENT_RANK_TOL = 1e-8
# Relative pivot threshold of the pivoted QR used to detect collinear columns
DESIGN_RANK_TOL = 1e-10
# Eigenvalue clipping for the Hausman pseudo-inverse
HAUSMAN_EIG_TOL = 1e-10

TAU_MAX = 50.0
TAU_MIN = 1e-4
# Likelihood-ratio level below which sigma_eta2 = 0 is not rejected
SIGMA_ETA_LR_LEVEL = 0.05
QML_GRID_SIZE = 21

LOGIT_GRAD_TOL = 1e-6
LOGIT_MAX_ITER = 2000

SPLINE_DEGREE = 3
SPLINE_INTERIOR_KNOTS = 9

BOOTSTRAP_MIN_REPLICATES = 50
BOOTSTRAP_MIN_SUCCESS = 0.8

OUTPUT_ENV_VAR = "PEERNET_OUT"

logger = logging.getLogger(__name__)


def thresholds() -> Dict[str, float]:
    """Thresholds echoed into run metadata so any table can be re-judged."""
    return {
        "ident_rank_tol": IDENT_RANK_TOL,
        "design_rank_tol": DESIGN_RANK_TOL,
        "hausman_eig_tol": HAUSMAN_EIG_TOL,
        "tau_max": TAU_MAX,
        "tau_min": TAU_MIN,
        "sigma_eta_lr_level": SIGMA_ETA_LR_LEVEL,
        "qml_grid_size": QML_GRID_SIZE,
        "logit_grad_tol": LOGIT_GRAD_TOL,
        "spline_interior_knots": SPLINE_INTERIOR_KNOTS,
    }


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a TOML run configuration.

    Args:
        path: Path to the config file

    Returns:
        Nested dictionary keyed by section name
    """
    from .errors import ConfigurationError

    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}", module="cli")
    try:
        return toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigurationError(f"Invalid config file {path}: {e}", module="cli")


def resolve_output_dir(cli_value: Optional[str] = None) -> Path:
    """Output directory: explicit flag first, then PEERNET_OUT, then ./output."""
    load_dotenv()
    value = cli_value or os.getenv(OUTPUT_ENV_VAR) or "output"
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


class CollectingHandler(logging.Handler):
    """Keeps WARNING and above so they can be written into run metadata."""

    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages: List[str] = []

    def emit(self, record: logging.LogRecord) -> None:
        self.messages.append(f"{record.name}: {record.getMessage()}")


def setup_logging(verbose: bool = False) -> CollectingHandler:
    """Install the rich console handler plus a collecting handler on the package logger."""
    from rich.logging import RichHandler

    root = logging.getLogger("peernet")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.addHandler(RichHandler(rich_tracebacks=False, show_path=False))
    collector = CollectingHandler()
    root.addHandler(collector)
    root.propagate = False
    return collector
