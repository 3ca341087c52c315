"""Ridge-regression calibration of raw CH4 readings against references.

Features are polynomial/interaction terms of the raw reading and the
environmental channels; the closed-form ridge solution keeps the fit
deterministic and auditable.  The held-out report (MAD, R^2) is computed
on a hash-based 20% split, never on training rows.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

FEATURE_NAMES = ("const", "raw", "raw_sq", "temp_delta", "rh_delta",
                 "press_delta", "raw_x_temp", "raw_x_rh")
N_FEATURES = len(FEATURE_NAMES)
MIN_TRAINING_FACTOR = 10
HOLDOUT_MODULUS = 5  # 1-in-5 rows held out (deterministic by hash)


class CalibrationError(ValueError):
    pass


def feature_vector(raw: float, temp_c: float, rh_pct: float, press_hpa: float
                   ) -> np.ndarray:
    return np.array([
        1.0, raw, raw * raw, temp_c - 25.0, rh_pct - 50.0, press_hpa - 1013.0,
        raw * (temp_c - 25.0), raw * (rh_pct - 50.0),
    ])


def _is_holdout(node_id: str, seq) -> bool:
    token = f"{node_id}:{seq}".encode()
    return zlib.crc32(token) % HOLDOUT_MODULUS == 0


@dataclass(frozen=True)
class CalibReport:
    mad_ppm: float
    r_squared: float
    n_train: int
    n_holdout: int


@dataclass
class CalibModel:
    beta: np.ndarray
    ridge_lambda: float
    report: CalibReport

    def apply(self, raw: float, temp_c: float, rh_pct: float,
              press_hpa: float) -> float:
        """Calibrated ppm, clamped at zero."""
        value = float(self.beta @ feature_vector(raw, temp_c, rh_pct, press_hpa))
        return max(value, 0.0)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "ridge_lambda": self.ridge_lambda,
            "report": {
                "mad_ppm": self.report.mad_ppm,
                "r_squared": self.report.r_squared,
                "n_train": self.report.n_train,
                "n_holdout": self.report.n_holdout,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibModel":
        rep = doc.get("report", {})
        return cls(beta=np.asarray(doc["beta"], dtype=float),
                   ridge_lambda=float(doc.get("ridge_lambda", 0.0)),
                   report=CalibReport(
                       mad_ppm=float(rep.get("mad_ppm", float("nan"))),
                       r_squared=float(rep.get("r_squared", float("nan"))),
                       n_train=int(rep.get("n_train", 0)),
                       n_holdout=int(rep.get("n_holdout", 0))))


def identity_model() -> CalibModel:
    beta = np.zeros(N_FEATURES)
    beta[1] = 1.0
    return CalibModel(beta=beta, ridge_lambda=0.0,
                      report=CalibReport(float("nan"), float("nan"), 0, 0))


def fit_calibration(pairs, ridge_lambda: float = 0.0) -> CalibModel:
    """Solve the (optionally ridge-regularized) normal equations.

    ``pairs`` is a sequence of (sample, reference_ppm) where the sample
    carries raw CH4 and the environmental channels.  The constant feature
    is never penalized.  Raises :class:`CalibrationError` for tiny
    training sets and for rank-deficient designs at lambda = 0.
    """
    if ridge_lambda < 0:
        raise CalibrationError("ridge lambda must be >= 0")
    n = len(pairs)
    if n < MIN_TRAINING_FACTOR * N_FEATURES:
        raise CalibrationError(
            f"need at least {MIN_TRAINING_FACTOR * N_FEATURES} pairs, got {n}")
    X = np.empty((n, N_FEATURES))
    y = np.empty(n)
    holdout = np.zeros(n, dtype=bool)
    for k, (sample, ref) in enumerate(pairs):
        X[k] = feature_vector(sample.ch4_ppm_raw, sample.temp_c, sample.rh_pct,
                              sample.press_hpa)
        y[k] = ref
        holdout[k] = _is_holdout(sample.node_id, sample.seq)
    Xt, yt = X[~holdout], y[~holdout]
    Xh, yh = X[holdout], y[holdout]

    gram = Xt.T @ Xt
    if ridge_lambda == 0.0:
        if np.linalg.matrix_rank(gram) < N_FEATURES:
            raise CalibrationError(
                "design matrix is rank-deficient at lambda=0; use lambda > 0")
        beta = np.linalg.solve(gram, Xt.T @ yt)
    else:
        penalty = np.eye(N_FEATURES) * ridge_lambda
        penalty[0, 0] = 0.0  # intercept unpenalized
        beta = np.linalg.solve(gram + penalty, Xt.T @ yt)

    if Xh.shape[0] > 0:
        pred = Xh @ beta
        resid = pred - yh
        mad = float(np.mean(np.abs(resid)))
        ss_res = float(np.sum(resid ** 2))
        ss_tot = float(np.sum((yh - yh.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    else:
        mad, r2 = float("nan"), float("nan")
    return CalibModel(beta=beta, ridge_lambda=ridge_lambda,
                      report=CalibReport(mad, r2, int((~holdout).sum()),
                                         int(holdout.sum())))


def residual_orthogonality(model: CalibModel, pairs) -> float:
    """Max |feature . residual| / scale on the training split (lambda=0 check)."""
    X = np.array([feature_vector(s.ch4_ppm_raw, s.temp_c, s.rh_pct, s.press_hpa)
                  for s, _ in pairs if not _is_holdout(s.node_id, s.seq)])
    y = np.array([ref for s, ref in pairs if not _is_holdout(s.node_id, s.seq)])
    resid = X @ model.beta - y
    dots = np.abs(X.T @ resid)
    scale = np.abs(X.T @ y).max() + 1e-30
    return float(dots.max() / scale)
