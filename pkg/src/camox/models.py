"""Data models for recordings, samples, splits, predictions and run provenance."""

from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import DataFormatError

FRAME_WIDTH = 176
FRAME_HEIGHT = 144
FPS = 30.0
WINDOW_FRAMES = 90
DEFAULT_GAINS = (1.0, 3.0, 18.0)
STD_FLOOR = 1e-6


class Hand(str, Enum):
    """Which index finger a recording was taken from."""

    LEFT = "left"
    RIGHT = "right"


def subject_sort_key(subject_id: str) -> tuple[int, int | str]:
    """Order numeric ids numerically ("2" before "10"), then everything else lexically."""
    return (0, int(subject_id)) if subject_id.isdigit() else (1, subject_id)


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class FrameSequence(ArrayModel):
    """Raw RGB24 frames, shape (n, height, width, 3), uint8."""

    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT
    fps: float = FPS
    frames: np.ndarray

    @field_validator("frames", mode="before")
    @classmethod
    def validate_frames(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim != 4 or v.shape[-1] != 3:
            raise ValueError(f"frames must have shape (n, height, width, 3), got {v.shape}")
        if v.dtype != np.uint8:
            if v.size and (v.min() < 0 or v.max() > 255):
                raise ValueError("channel values must lie in [0, 255]")
            v = v.astype(np.uint8)
        return v

    @model_validator(mode="after")
    def validate_geometry(self) -> "FrameSequence":
        if self.frames.shape[1:3] != (self.height, self.width):
            raise ValueError(
                f"frame geometry {self.frames.shape[2]}x{self.frames.shape[1]} "
                f"does not match declared {self.width}x{self.height}"
            )
        return self

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @classmethod
    def from_frames(cls, frames: list[np.ndarray], fps: float = FPS) -> "FrameSequence":
        """
        Stack individual (height, width, 3) frames.

        Raises:
            DataFormatError: If the list is empty or frame dimensions differ
        """
        if not frames:
            raise DataFormatError("Frame sequence is empty")
        first = np.asarray(frames[0]).shape
        for i, frame in enumerate(frames):
            shape = np.asarray(frame).shape
            if shape != first:
                raise DataFormatError(f"Frame {i} has shape {shape}, expected {first}")
        if len(first) != 3 or first[2] != 3:
            raise DataFormatError(f"Frames must be (height, width, 3), got {first}")
        stacked = np.stack([np.asarray(f) for f in frames])
        if stacked.min() < 0 or stacked.max() > 255:
            raise DataFormatError("Channel values must lie in [0, 255]")
        return cls(width=first[1], height=first[0], fps=fps, frames=stacked.astype(np.uint8))


class CaptureMeta(BaseModel):
    """Per hand-subject capture metadata, persisted as meta.json."""

    subject_id: str
    hand: Hand
    fps: float = FPS
    gains: tuple[float, float, float] = DEFAULT_GAINS
    tissue_flags: list[str] = Field(default_factory=list)
    skin_tone: str | None = None
    gender: str | None = None
    notes: str = ""
    seed: int | None = None

    @field_validator("subject_id", mode="before")
    @classmethod
    def coerce_subject_id(cls, v: Any) -> str:
        return str(v)


class PpgRecording(ArrayModel):
    """Channel-mean time series of one hand-subject: rows R, G, B; one column per frame."""

    channel_means: np.ndarray
    fps: float = FPS
    gains: tuple[float, float, float] = DEFAULT_GAINS
    hand: Hand
    subject_id: str
    tissue_flags: list[str] = Field(default_factory=list)
    # Time of frame 0, seconds
    t0: float = 0.0

    @field_validator("channel_means", mode="before")
    @classmethod
    def validate_channel_means(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != 3:
            raise ValueError(f"channel_means must be 3 x n, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("channel_means must be finite")
        if v.size and (v.min() < 0.0 or v.max() > 255.0):
            raise ValueError("channel_means must lie in [0, 255]")
        return v

    @field_validator("subject_id", mode="before")
    @classmethod
    def coerce_subject_id(cls, v: Any) -> str:
        return str(v)

    @property
    def n_frames(self) -> int:
        return int(self.channel_means.shape[1])

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    @property
    def key(self) -> tuple[str, Hand]:
        return (self.subject_id, self.hand)

    def frame_times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_frames) / self.fps


class GroundTruthSeries(ArrayModel):
    """Timestamped reference SpO2 readings for one hand-subject."""

    t: np.ndarray
    spo2: np.ndarray

    @field_validator("t", "spo2", mode="before")
    @classmethod
    def validate_vector(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("readings must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValueError("readings must be finite")
        return v

    @model_validator(mode="after")
    def validate_readings(self) -> "GroundTruthSeries":
        if self.t.shape != self.spo2.shape:
            raise ValueError("t and spo2 must have equal length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.spo2.size and (self.spo2.min() < 0.0 or self.spo2.max() > 100.0):
            raise ValueError("spo2 must lie in [0, 100]")
        return self

    @classmethod
    def from_readings(cls, readings: list[tuple[float, float]]) -> "GroundTruthSeries":
        if not readings:
            return cls(t=np.empty(0), spo2=np.empty(0))
        t, spo2 = zip(*readings)
        return cls(t=np.array(t), spo2=np.array(spo2))

    @property
    def readings(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.spo2.tolist()))

    def __len__(self) -> int:
        return int(self.t.size)


class Sample(ArrayModel):
    """One 3 x 90 window paired with the SpO2 reading at its centre."""

    window: np.ndarray
    label: float
    subject_id: str
    hand: Hand
    center_time: float

    @field_validator("subject_id", mode="before")
    @classmethod
    def coerce_subject_id(cls, v: Any) -> str:
        return str(v)

    @field_validator("window", mode="before")
    @classmethod
    def validate_window(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (3, WINDOW_FRAMES):
            raise ValueError(f"window must be 3 x {WINDOW_FRAMES}, got {v.shape}")
        return v


class ChannelStats(BaseModel):
    """Per-channel mean and standard deviation used for standardization."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    @field_validator("std")
    @classmethod
    def validate_std(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(s <= 0 for s in v):
            raise ValueError("std components must be positive")
        return v

    def mean_column(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=np.float64).reshape(3, 1)

    def std_column(self) -> np.ndarray:
        return np.asarray(self.std, dtype=np.float64).reshape(3, 1)


class ChannelProfile(BaseModel):
    """DC (mean) and AC (standard deviation) per channel."""

    dc: tuple[float, float, float]
    ac: tuple[float, float, float]


class Split(BaseModel):
    """One LOOCV split: whole subjects (both hands) per role."""

    split_id: int
    train_subjects: list[str]
    val_subject: str
    test_subject: str

    @model_validator(mode="after")
    def validate_disjoint(self) -> "Split":
        roles = set(self.train_subjects)
        if self.val_subject in roles or self.test_subject in roles:
            raise ValueError("train, validation and test subjects must be disjoint")
        if self.val_subject == self.test_subject:
            raise ValueError("validation and test subject must differ")
        return self


class SplitPlan(BaseModel):
    """All LOOCV splits of one run."""

    splits: list[Split]
    excluded: list[str] = Field(default_factory=list)

    @property
    def subjects(self) -> list[str]:
        return [s.test_subject for s in self.splits]


class HandRecording(BaseModel):
    """Everything recorded for one hand of one subject."""

    recording: PpgRecording
    ground_truth: GroundTruthSeries
    meta: CaptureMeta

    @property
    def subject_id(self) -> str:
        return self.recording.subject_id

    @property
    def hand(self) -> Hand:
        return self.recording.hand


class Dataset(BaseModel):
    """A loaded study: hand recordings ordered by (subject, hand)."""

    root: Path | None = None
    recordings: list[HandRecording]

    @property
    def subject_ids(self) -> list[str]:
        return sorted({r.subject_id for r in self.recordings}, key=subject_sort_key)

    def for_subjects(self, subjects: set[str] | list[str]) -> list[HandRecording]:
        wanted = set(subjects)
        return [r for r in self.recordings if r.subject_id in wanted]


class PredictionRow(BaseModel):
    """One test-sample prediction."""

    split_id: int
    subject_id: str
    hand: Hand
    t_sec: float
    ground_truth: float
    prediction: float


PREDICTION_COLUMNS = ["split_id", "subject_id", "hand", "t_sec", "ground_truth", "prediction"]


class PredictionSet(BaseModel):
    """Concatenated test predictions of a LOOCV run."""

    rows: list[PredictionRow] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ground_truth(self) -> np.ndarray:
        return np.array([r.ground_truth for r in self.rows], dtype=np.float64)

    @property
    def prediction(self) -> np.ndarray:
        return np.array([r.prediction for r in self.rows], dtype=np.float64)

    @property
    def subject_ids(self) -> list[str]:
        return sorted({r.subject_id for r in self.rows}, key=subject_sort_key)

    def for_subject(self, subject_id: str, hand: Hand | None = None) -> "PredictionSet":
        return PredictionSet(
            rows=[
                r for r in self.rows
                if r.subject_id == subject_id and (hand is None or r.hand == hand)
            ]
        )

    def hand_subjects(self) -> list[tuple[str, Hand]]:
        keys = {(r.subject_id, r.hand) for r in self.rows}
        return sorted(keys, key=lambda k: (subject_sort_key(k[0]), k[1].value))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[r.split_id, r.subject_id, r.hand.value, r.t_sec, r.ground_truth, r.prediction]
             for r in self.rows],
            columns=PREDICTION_COLUMNS,
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "PredictionSet":
        missing = set(PREDICTION_COLUMNS) - set(df.columns)
        if missing:
            raise DataFormatError(f"Predictions are missing columns: {sorted(missing)}")
        return cls(
            rows=[
                PredictionRow(
                    split_id=int(row.split_id),
                    subject_id=str(row.subject_id),
                    hand=Hand(row.hand),
                    t_sec=float(row.t_sec),
                    ground_truth=float(row.ground_truth),
                    prediction=float(row.prediction),
                )
                for row in df.itertuples(index=False)
            ]
        )


class TrainConfig(BaseModel):
    """Training and LOOCV configuration."""

    lr: float = Field(default=1e-5, gt=0)
    decay_epoch: int = Field(default=80, ge=0)
    decay_factor: float = Field(default=0.1, gt=0)
    l2: float = Field(default=0.1, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = Field(default=120, ge=0)
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0
    floor_spo2: float = Field(default=70.0, ge=0, le=100)
    subject_exclusions: list[str] = Field(default_factory=list)
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    hidden: int = Field(default=64, ge=1)
    clamp_predictions: bool = False

    @field_validator("subject_exclusions", mode="before")
    @classmethod
    def coerce_exclusions(cls, v: Any) -> list[str]:
        if v is None:
            return []
        return [str(s) for s in v]


class AblationRow(BaseModel):
    """Aggregate result of one ablation floor."""

    floor: float
    mae: float
    pooled_mae: float
    n_samples: int


class Artifact(BaseModel):
    """An output file and its content hash."""

    path: str
    sha256: str


class RunManifest(BaseModel):
    """Provenance record written next to every command's outputs."""

    command: str
    argv: list[str] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)
    dataset_hash: str | None = None
    seed: int | None = None
    artifacts: list[Artifact] = Field(default_factory=list)
    started_at: datetime
    finished_at: datetime | None = None
    version: str = "0.1.0"
