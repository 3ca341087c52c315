"""Digital-twin analytics: store, calibration, detection, imputation, metrics."""

from .calibration import (CalibModel, CalibrationError, CalibReport,
                          feature_vector, fit_calibration, identity_model,
                          residual_orthogonality)
from .detect import (DetectorConfig, LeakEvent, anomaly_flags, detect_events,
                     detect_events_all)
from .impute import ImputeConfig, decay_to_ambient, idw_mean, impute_all_gaps, impute_gap
from .metrics import NodeMetrics, compute_metrics
from .store import (CSV_HEADER, GapRecord, Reading, SeriesStore, export_csv,
                    import_csv)

__all__ = [
    "CalibModel", "CalibrationError", "CalibReport", "feature_vector",
    "fit_calibration", "identity_model", "residual_orthogonality",
    "DetectorConfig", "LeakEvent", "anomaly_flags", "detect_events",
    "detect_events_all", "ImputeConfig", "decay_to_ambient", "idw_mean",
    "impute_all_gaps", "impute_gap", "NodeMetrics", "compute_metrics",
    "CSV_HEADER", "GapRecord", "Reading", "SeriesStore", "export_csv",
    "import_csv",
]
