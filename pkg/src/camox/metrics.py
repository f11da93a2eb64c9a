"""Evaluation statistics: MAE, Bland-Altman, threshold classification, ROC, and the report."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, computed_field, field_validator
from scipy.stats import rankdata

from .errors import ConfigError, DataFormatError, SingleClassError
from .models import AblationRow, ArrayModel, Hand, PredictionSet

LOA_Z = 1.96
REPORT_SCHEMA_VERSION = 1
DEFAULT_THRESHOLDS = (95.0, 90.0, 85.0)


def _require_rows(pred_set: PredictionSet) -> None:
    if len(pred_set) == 0:
        raise DataFormatError("prediction set is empty")


def mae(pred_set: PredictionSet) -> float:
    """Mean absolute error over every sample, in SpO2 percent."""
    _require_rows(pred_set)
    return float(np.mean(np.abs(pred_set.prediction - pred_set.ground_truth)))


def subject_mean_mae(pred_set: PredictionSet) -> float:
    """Mean of the per-subject MAEs; the headline aggregate."""
    _require_rows(pred_set)
    return float(np.mean([mae(pred_set.for_subject(s)) for s in pred_set.subject_ids]))


class BlandAltman(ArrayModel):
    """Mean difference and 1.96-sigma limit of agreement (population sigma)."""

    mean_diff: float
    loa_halfwidth: float = Field(ge=0)
    n: int
    means: np.ndarray = Field(default_factory=lambda: np.empty(0), exclude=True)
    diffs: np.ndarray = Field(default_factory=lambda: np.empty(0), exclude=True)

    @property
    def lower(self) -> float:
        return self.mean_diff - self.loa_halfwidth

    @property
    def upper(self) -> float:
        return self.mean_diff + self.loa_halfwidth


def bland_altman(pred_set: PredictionSet) -> BlandAltman:
    _require_rows(pred_set)
    pred, gt = pred_set.prediction, pred_set.ground_truth
    diffs = pred - gt
    return BlandAltman(
        mean_diff=float(diffs.mean()),
        loa_halfwidth=float(LOA_Z * diffs.std()),
        n=diffs.size,
        means=(pred + gt) / 2.0,
        diffs=diffs,
    )


class ConfusionCounts(BaseModel):
    """
    Confusion table of one (classification threshold, decision boundary) pair.

    A sample is positive (hypoxemic) when its ground truth is strictly below the
    classification threshold, and predicted positive when its prediction is strictly
    below the decision boundary.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    classification_threshold: float
    decision_boundary: float

    @computed_field
    @property
    def sensitivity(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @computed_field
    @property
    def specificity(self) -> float | None:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_percent(name: str, value: float) -> None:
    if not 0.0 <= value <= 100.0:
        raise ConfigError(f"{name} must lie in [0, 100], got {value}")


def classify(
    pred_set: PredictionSet, classification_threshold: float, decision_boundary: float
) -> ConfusionCounts:
    _require_rows(pred_set)
    _check_percent("classification threshold", classification_threshold)
    _check_percent("decision boundary", decision_boundary)
    actual = pred_set.ground_truth < classification_threshold
    predicted = pred_set.prediction < decision_boundary
    return ConfusionCounts(
        tp=int(np.sum(actual & predicted)),
        fp=int(np.sum(~actual & predicted)),
        tn=int(np.sum(~actual & ~predicted)),
        fn=int(np.sum(actual & ~predicted)),
        classification_threshold=classification_threshold,
        decision_boundary=decision_boundary,
    )


class RocPoint(BaseModel):
    boundary: float
    fpr: float
    tpr: float


class RocCurve(BaseModel):
    """
    Boundary sweep at one classification threshold.

    auc is the exact rank (Mann-Whitney) statistic over every possible boundary.
    grid_auc is the trapezoid area under the swept points with the (0, 0) and (1, 1)
    endpoints added.
    """

    classification_threshold: float
    points: list[RocPoint]
    auc: float = Field(ge=0, le=1)
    grid_auc: float = Field(ge=0, le=1)
    best_boundary: float


def boundary_grid(lo: float = 70.0, hi: float = 100.0, step: float = 0.5) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return lo + step * np.arange(n + 1)


def empirical_auc(pred_set: PredictionSet, classification_threshold: float) -> float:
    """
    Exact AUC of the prediction-below-boundary classifier over every possible boundary.

    Equals the probability that a random positive sample is predicted lower than a random
    negative one, ties counting half.
    """
    actual = pred_set.ground_truth < classification_threshold
    n_pos, n_neg = int(actual.sum()), int((~actual).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"threshold {classification_threshold:g}: only one class present, AUC undefined"
        )
    ranks = rankdata(pred_set.prediction)
    u_neg = ranks[~actual].sum() - n_neg * (n_neg + 1) / 2.0
    return float(u_neg / (n_pos * n_neg))


def roc_sweep(
    pred_set: PredictionSet,
    classification_threshold: float,
    boundaries: np.ndarray | list[float] | None = None,
) -> RocCurve:
    """
    Sweep the decision boundary and collect (fpr, tpr) per boundary.

    Raises:
        SingleClassError: If the threshold leaves only one class
    """
    _require_rows(pred_set)
    auc = empirical_auc(pred_set, classification_threshold)
    boundaries = np.sort(np.asarray(boundary_grid() if boundaries is None else boundaries, dtype=np.float64))

    points = []
    for boundary in boundaries:
        counts = classify(pred_set, classification_threshold, float(boundary))
        points.append(
            RocPoint(
                boundary=float(boundary),
                fpr=counts.fp / (counts.fp + counts.tn),
                tpr=counts.tp / (counts.tp + counts.fn),
            )
        )

    fpr = np.array([0.0] + [p.fpr for p in points] + [1.0])
    tpr = np.array([0.0] + [p.tpr for p in points] + [1.0])
    order = np.lexsort((tpr, fpr))
    grid_auc = float(np.trapezoid(tpr[order], fpr[order]))

    distances = [np.hypot(p.fpr, 1.0 - p.tpr) for p in points]
    best = points[int(np.argmin(distances))]
    return RocCurve(
        classification_threshold=classification_threshold,
        points=points,
        auc=auc,
        grid_auc=min(max(grid_auc, 0.0), 1.0),
        best_boundary=best.boundary,
    )


# --- report ------------------------------------------------------------------

class ReportConfig(BaseModel):
    """Evaluation settings of the report command."""

    thresholds: list[float] = Field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    decision_boundary: float | None = None
    boundary_min: float = 70.0
    boundary_max: float = 100.0
    boundary_step: float = Field(default=0.5, gt=0)
    clamp: bool = False

    @field_validator("thresholds")
    @classmethod
    def validate_thresholds(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("at least one classification threshold is required")
        if any(not 0.0 <= t <= 100.0 for t in v):
            raise ValueError("thresholds must lie in [0, 100]")
        return v

    def boundary_for(self, threshold: float) -> float:
        return threshold if self.decision_boundary is None else self.decision_boundary

    def grid(self) -> np.ndarray:
        return boundary_grid(self.boundary_min, self.boundary_max, self.boundary_step)


class SubjectMetrics(BaseModel):
    subject_id: str
    hand: Hand | None = None
    n: int
    mae: float
    bland_altman: BlandAltman


class SubjectRoc(BaseModel):
    subject_id: str
    auc: float
    best_boundary: float


class ThresholdReport(BaseModel):
    """Classification results at one classification threshold."""

    threshold: float
    at_boundary: ConfusionCounts
    per_subject: list[ConfusionCounts]
    per_subject_ids: list[str]
    macro_sensitivity: float | None
    macro_specificity: float | None
    roc: RocCurve | None = None
    at_best_boundary: ConfusionCounts | None = None
    subject_roc: list[SubjectRoc] = Field(default_factory=list)


class EvaluationReport(BaseModel):
    """Everything the report command emits as JSON."""

    schema_version: int = REPORT_SCHEMA_VERSION
    n_samples: int
    n_subjects: int
    clamped: bool = False
    mae: float
    pooled_mae: float
    mean_diff: float
    loa: float
    pooled_bland_altman: BlandAltman
    subjects: list[SubjectMetrics]
    hands: list[SubjectMetrics]
    classification: list[ThresholdReport]
    ablation: list[AblationRow] = Field(default_factory=list)

    def threshold(self, value: float) -> ThresholdReport:
        for entry in self.classification:
            if entry.threshold == value:
                return entry
        raise KeyError(value)


def clamp_predictions(pred_set: PredictionSet) -> PredictionSet:
    return PredictionSet(
        rows=[
            r.model_copy(update={"prediction": float(np.clip(r.prediction, 0.0, 100.0))})
            for r in pred_set.rows
        ]
    )


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _threshold_report(pred_set: PredictionSet, threshold: float, config: ReportConfig) -> ThresholdReport:
    boundary = config.boundary_for(threshold)
    subjects = pred_set.subject_ids
    per_subject = [classify(pred_set.for_subject(s), threshold, boundary) for s in subjects]
    entry = ThresholdReport(
        threshold=threshold,
        at_boundary=classify(pred_set, threshold, boundary),
        per_subject=per_subject,
        per_subject_ids=subjects,
        macro_sensitivity=_mean_defined([c.sensitivity for c in per_subject]),
        macro_specificity=_mean_defined([c.specificity for c in per_subject]),
    )

    try:
        entry.roc = roc_sweep(pred_set, threshold, config.grid())
    except SingleClassError as e:
        logger.warning(f"ROC omitted: {e}")
        return entry
    entry.at_best_boundary = classify(pred_set, threshold, entry.roc.best_boundary)

    for subject in subjects:
        try:
            curve = roc_sweep(pred_set.for_subject(subject), threshold, config.grid())
        except SingleClassError:
            logger.debug(f"Subject {subject}: single class at threshold {threshold:g}, no ROC")
            continue
        entry.subject_roc.append(
            SubjectRoc(subject_id=subject, auc=curve.auc, best_boundary=curve.best_boundary)
        )
    return entry


def report(
    pred_set: PredictionSet,
    config: ReportConfig | None = None,
    ablation: list[AblationRow] | None = None,
) -> EvaluationReport:
    """
    Assemble per-subject and aggregate regression metrics plus classification tables.

    The headline MAE, mean difference and LOA are means over subjects; pooled values
    over all samples are reported alongside.
    """
    config = config or ReportConfig()
    _require_rows(pred_set)
    if config.clamp:
        pred_set = clamp_predictions(pred_set)

    subjects = []
    for subject in pred_set.subject_ids:
        part = pred_set.for_subject(subject)
        subjects.append(
            SubjectMetrics(subject_id=subject, n=len(part), mae=mae(part), bland_altman=bland_altman(part))
        )
    hands = []
    for subject, hand in pred_set.hand_subjects():
        part = pred_set.for_subject(subject, hand)
        hands.append(
            SubjectMetrics(
                subject_id=subject, hand=hand, n=len(part), mae=mae(part), bland_altman=bland_altman(part)
            )
        )

    return EvaluationReport(
        n_samples=len(pred_set),
        n_subjects=len(subjects),
        clamped=config.clamp,
        mae=float(np.mean([s.mae for s in subjects])),
        pooled_mae=mae(pred_set),
        mean_diff=float(np.mean([s.bland_altman.mean_diff for s in subjects])),
        loa=float(np.mean([s.bland_altman.loa_halfwidth for s in subjects])),
        pooled_bland_altman=bland_altman(pred_set),
        subjects=subjects,
        hands=hands,
        classification=[_threshold_report(pred_set, t, config) for t in config.thresholds],
        ablation=ablation or [],
    )


def write_ablation(rows: list[AblationRow], path: Path | str) -> None:
    pd.DataFrame([r.model_dump() for r in rows], columns=list(AblationRow.model_fields)).to_csv(
        path, index=False
    )


def read_ablation(path: Path | str) -> list[AblationRow]:
    try:
        df = pd.read_csv(path)
        return [AblationRow.model_validate(row) for row in df.to_dict(orient="records")]
    except (OSError, ValueError, pd.errors.ParserError) as e:
        raise DataFormatError(f"Cannot read ablation table {path}: {e}") from e


def _threshold_tag(threshold: float) -> str:
    return f"{threshold:g}".replace(".", "_")


def write_report(
    result: EvaluationReport,
    pred_set: PredictionSet,
    out_dir: Path | str,
    config: ReportConfig | None = None,
) -> list[Path]:
    """
    Write report.json and the plot-ready CSVs; returns every path written.

    CSVs:
        regression_<subject>.csv: hand, t_sec, ground_truth, prediction
        bland_altman.csv: subject_id, hand, mean, diff
        roc_<threshold>.csv: scope (pooled or subject id), boundary, fpr, tpr
        ablation.csv: floor, mae, pooled_mae, n_samples (only when ablation ran)
    """
    config = config or ReportConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.clamp:
        pred_set = clamp_predictions(pred_set)
    frame = pred_set.to_frame()
    written = []

    path = out_dir / "report.json"
    path.write_text(json.dumps(result.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    written.append(path)

    for subject, part in frame.groupby("subject_id", sort=False):
        path = out_dir / f"regression_{subject}.csv"
        part[["hand", "t_sec", "ground_truth", "prediction"]].to_csv(path, index=False)
        written.append(path)

    path = out_dir / "bland_altman.csv"
    pd.DataFrame(
        {
            "subject_id": frame["subject_id"],
            "hand": frame["hand"],
            "mean": (frame["prediction"] + frame["ground_truth"]) / 2.0,
            "diff": frame["prediction"] - frame["ground_truth"],
        }
    ).to_csv(path, index=False)
    written.append(path)

    for entry in result.classification:
        if entry.roc is None:
            continue
        curves = [("pooled", entry.roc)]
        for subject_roc in entry.subject_roc:
            curves.append(
                (subject_roc.subject_id, roc_sweep(pred_set.for_subject(subject_roc.subject_id), entry.threshold, config.grid()))
            )
        path = out_dir / f"roc_{_threshold_tag(entry.threshold)}.csv"
        pd.DataFrame(
            [
                {"scope": scope, "boundary": p.boundary, "fpr": p.fpr, "tpr": p.tpr}
                for scope, curve in curves
                for p in curve.points
            ],
            columns=["scope", "boundary", "fpr", "tpr"],
        ).to_csv(path, index=False)
        written.append(path)

    if result.ablation:
        path = out_dir / "ablation.csv"
        write_ablation(result.ablation, path)
        written.append(path)

    logger.info(f"Report written to {out_dir} ({len(written)} files)")
    return written


def read_report(path: Path | str) -> EvaluationReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"Cannot read report {path}: {e}") from e
    if data.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise DataFormatError(f"{path}: unsupported report schema {data.get('schema_version')}")
    try:
        return EvaluationReport.model_validate(data)
    except ValidationError as e:
        raise DataFormatError(f"{path}: {e}") from e
