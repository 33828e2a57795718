"""Correlation metrics, logistic alignment and the content-disjoint protocols."""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from .errors import ConfigError, DatasetError, UndefinedCorrelationError
from .pointcloud_io import DatasetManifest

logger = logging.getLogger(__name__)

LOGISTIC_MAX_EVALUATIONS = 500
LOGISTIC_GTOL = 1e-8


def _as_vectors(pred, mos, minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    mos = np.asarray(mos, dtype=np.float64).ravel()
    if pred.shape != mos.shape:
        raise ValueError(f"prediction and mos lengths differ: {pred.size} vs {mos.size}")
    if pred.size < minimum:
        raise UndefinedCorrelationError(f"need at least {minimum} samples, got {pred.size}")
    return pred, mos


def _require_variation(*vectors: np.ndarray) -> None:
    for v in vectors:
        if np.ptp(v) == 0:
            raise UndefinedCorrelationError("correlation is undefined for a constant vector")


def srocc(pred, mos) -> float:
    """Spearman rank correlation; ties take their average rank.

    Raises:
        UndefinedCorrelationError: If fewer than 3 samples or an input is constant
    """
    pred, mos = _as_vectors(pred, mos, 3)
    _require_variation(pred, mos)
    return float(stats.spearmanr(pred, mos).statistic)


def plcc(pred_aligned, mos) -> float:
    """Pearson linear correlation.

    Raises:
        UndefinedCorrelationError: If fewer than 3 samples or an input is constant
    """
    pred_aligned, mos = _as_vectors(pred_aligned, mos, 3)
    _require_variation(pred_aligned, mos)
    return float(stats.pearsonr(pred_aligned, mos).statistic)


def rmse(pred_aligned, mos) -> float:
    pred_aligned, mos = _as_vectors(pred_aligned, mos, 1)
    return float(np.sqrt(np.mean((pred_aligned - mos) ** 2)))


def logistic4(s: np.ndarray, beta: Sequence[float]) -> np.ndarray:
    """β₂ + (β₁ − β₂) / (1 + exp(−(s − β₃) / |β₄|))."""
    b1, b2, b3, b4 = beta
    return b2 + (b1 - b2) / (1.0 + np.exp(-(np.asarray(s) - b3) / abs(b4)))


def _logistic4_jacobian(beta: np.ndarray, s: np.ndarray, _mos: np.ndarray) -> np.ndarray:
    b1, b2, b3, b4 = beta
    scale = abs(b4)
    z = (s - b3) / scale
    sig = 1.0 / (1.0 + np.exp(-z))
    dsig = sig * (1.0 - sig)
    amp = b1 - b2
    return np.stack([
        sig,
        1.0 - sig,
        -amp * dsig / scale,
        -amp * dsig * z / scale * np.sign(b4),
    ], axis=1)


def initial_logistic_params(pred: np.ndarray, mos: np.ndarray) -> np.ndarray:
    std = float(np.std(pred))
    return np.array([np.max(mos), np.min(mos), np.median(pred), std if std > 0 else 1.0])


def logistic4_fit(pred, mos) -> Tuple[np.ndarray, np.ndarray]:
    """Fit the 4-parameter logistic by Levenberg-Marquardt least squares.

    Non-convergence warns and returns the best parameters found.

    Returns:
        Fitted (β₁, β₂, β₃, β₄) and the aligned predictions

    Raises:
        UndefinedCorrelationError: If fewer than 5 samples or the predictions are constant
    """
    pred, mos = _as_vectors(pred, mos, 5)
    _require_variation(pred)
    beta0 = initial_logistic_params(pred, mos)
    with np.errstate(over="ignore"):
        result = optimize.least_squares(
            lambda beta, s, q: logistic4(s, beta) - q,
            beta0,
            jac=_logistic4_jacobian,
            method="lm",
            args=(pred, mos),
            max_nfev=LOGISTIC_MAX_EVALUATIONS,
            gtol=LOGISTIC_GTOL,
        )
        beta = result.x
        if not np.all(np.isfinite(beta)):
            beta = beta0
        if not result.success:
            message = f"logistic fit did not converge ({result.message}); using best parameters found"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning, stacklevel=2)
        return beta, logistic4(pred, beta)


@dataclass
class EvalResult:
    srocc: float
    plcc: float
    rmse: float
    n_samples: int
    logistic_params: List[float] = field(default_factory=list)
    flagged: bool = False
    message: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(self).items()}


def compute_result(pred, mos) -> EvalResult:
    """Align with the logistic and compute all three metrics.

    Degenerate inputs (constant predictions, too few samples) yield a flagged
    result with NaN metrics instead of raising.
    """
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    try:
        rho = srocc(pred, mos)
        beta, aligned = logistic4_fit(pred, mos)
        return EvalResult(
            srocc=rho,
            plcc=plcc(aligned, mos),
            rmse=rmse(aligned, mos),
            n_samples=int(pred.size),
            logistic_params=[float(b) for b in beta],
        )
    except UndefinedCorrelationError as e:
        logger.warning(f"Evaluation of {pred.size} samples is degenerate: {e}")
        return EvalResult(math.nan, math.nan, math.nan, int(pred.size), flagged=True, message=str(e))


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train: Tuple[int, ...]
    test: Tuple[int, ...]
    validation: Tuple[int, ...] = ()


def kfold_split(contents: Sequence[int], k: int, ratio: Tuple[int, int], seed: int) -> List[FoldSplit]:
    """Content-disjoint folds whose test groups partition the shuffled contents.

    The test size is ``round(n · test / (train + test))``; the last fold takes
    whatever remains, so 9 contents at 7:2 give test sizes 2, 2, 2, 2, 1.

    Raises:
        ConfigError: If k < 2 or the folds cannot cover every content exactly once
    """
    contents = sorted(set(contents))
    n = len(contents)
    train_part, test_part = ratio
    if k < 2:
        raise ConfigError("must be >= 2", field="evaluation.folds")
    size = max(1, round(n * test_part / (train_part + test_part)))
    if size * (k - 1) >= n or size * k < n:
        raise ConfigError(
            f"{k} folds of {size} test contents cannot partition {n} contents", field="evaluation.folds"
        )
    order = [contents[i] for i in np.random.default_rng(seed).permutation(n)]
    folds = []
    for fold_id in range(k):
        stop = n if fold_id == k - 1 else (fold_id + 1) * size
        test = tuple(sorted(order[fold_id * size:stop]))
        train = tuple(c for c in contents if c not in test)
        folds.append(FoldSplit(fold_id, train, test))
    return folds


def holdout_split(contents: Sequence[int], ratios: Sequence[int], seed: int) -> FoldSplit:
    """Single content-disjoint train/validation/test split (e.g. 8:1:1).

    Raises:
        ConfigError: If there are too few contents for non-empty parts
    """
    contents = sorted(set(contents))
    n = len(contents)
    total = sum(ratios)
    n_val = max(1, round(n * ratios[1] / total))
    n_test = max(1, round(n * ratios[2] / total))
    if n - n_val - n_test < 1:
        raise ConfigError(f"{n} contents cannot fill a {ratios} split", field="evaluation.holdout_ratios")
    order = [contents[i] for i in np.random.default_rng(seed).permutation(n)]
    return FoldSplit(
        fold_id=0,
        train=tuple(sorted(order[n_val + n_test:])),
        validation=tuple(sorted(order[:n_val])),
        test=tuple(sorted(order[n_val:n_val + n_test])),
    )


class Predictor(Protocol):
    def predict(self, manifest: DatasetManifest) -> np.ndarray:
        ...


class OraclePredictor:
    """Returns the stored MOS; checks the protocol plumbing end to end."""

    def predict(self, manifest: DatasetManifest) -> np.ndarray:
        return np.asarray([e.mos for e in manifest.entries], dtype=np.float64)


def require_labels(manifest: DatasetManifest) -> np.ndarray:
    """MOS vector of a fully labeled manifest.

    Raises:
        DatasetError: If any entry lacks a MOS
    """
    missing = [e.key for e in manifest.entries if e.mos is None]
    if missing:
        raise DatasetError(f"{len(missing)} entries have no mos, e.g. {missing[0]}")
    return np.asarray([e.mos for e in manifest.entries], dtype=np.float64)


def evaluate(predictor: Predictor, manifest: DatasetManifest) -> EvalResult:
    """Predict every entry of a labeled manifest and score the predictions."""
    mos = require_labels(manifest)
    pred = np.asarray(predictor.predict(manifest), dtype=np.float64)
    return compute_result(pred, mos)


def average_results(results: Sequence[EvalResult]) -> EvalResult:
    """Arithmetic mean of the per-fold metrics (flagged folds propagate NaN)."""
    if not results:
        raise ValueError("no results to average")
    return EvalResult(
        srocc=float(np.mean([r.srocc for r in results])),
        plcc=float(np.mean([r.plcc for r in results])),
        rmse=float(np.mean([r.rmse for r in results])),
        n_samples=int(sum(r.n_samples for r in results)),
        flagged=any(r.flagged for r in results),
        message="; ".join(r.message for r in results if r.message),
    )


def write_report(path: Path, report: Dict[str, Any]) -> Path:
    """Write a JSON report; NaN becomes null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(value):
        if isinstance(value, EvalResult):
            return value.to_dict()
        if isinstance(value, float) and not math.isfinite(value):
            return None
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [clean(v) for v in value]
        return value

    with open(path, "w", encoding="utf-8") as f:
        json.dump(clean(report), f, indent=2, sort_keys=True)
    logger.info(f"Wrote report to {path}")
    return path


def scatter_plot(pred, mos, path: Path, beta: Optional[Sequence[float]] = None, title: str = "") -> Path:
    """Save predicted score vs MOS with the fitted logistic curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(pred, mos, s=12, alpha=0.7)
    if beta is not None and len(beta) == 4 and pred.size:
        grid = np.linspace(pred.min(), pred.max(), 200)
        ax.plot(grid, logistic4(grid, beta), color="tab:red", linewidth=1.5)
    ax.set_xlabel("predicted score")
    ax.set_ylabel("MOS")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved scatter plot to {path}")
    return path
