"""Frame/CSV ingestion, PPG extraction, windowing, standardization and LOOCV splits."""

import json
import math
import struct
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ValidationError

from .errors import ConfigError, DataFormatError, NoValidWindowsError
from .models import (
    STD_FLOOR,
    WINDOW_FRAMES,
    CaptureMeta,
    ChannelProfile,
    ChannelStats,
    Dataset,
    FrameSequence,
    GroundTruthSeries,
    Hand,
    HandRecording,
    PpgRecording,
    Sample,
    Split,
    SplitPlan,
    subject_sort_key,
)

FRAME_MAGIC = b"CAMOX1"
FRAME_HEADER = struct.Struct("<6sIIII")
PPG_COLUMNS = ["frame_idx", "t_sec", "r_mean", "g_mean", "b_mean"]
SPO2_COLUMNS = ["t_sec", "spo2"]
HISTOGRAM_BINS = ((65.0, 80.0), (80.0, 90.0), (90.0, 100.0))


# --- raw frames --------------------------------------------------------------

def read_frames(path: Path | str) -> FrameSequence:
    """
    Read a CAMOX1 raw frame file.

    Args:
        path: File with the CAMOX1 header followed by RGB24 row-major frames

    Returns:
        Parsed frame sequence

    Raises:
        DataFormatError: On bad magic or a truncated payload
    """
    raw = Path(path).read_bytes()
    if len(raw) < FRAME_HEADER.size:
        raise DataFormatError(
            f"{path}: header needs {FRAME_HEADER.size} bytes, file has {len(raw)}"
        )
    magic, width, height, fps, count = FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {FRAME_MAGIC!r}")

    expected = count * width * height * 3
    actual = len(raw) - FRAME_HEADER.size
    if actual != expected:
        raise DataFormatError(
            f"{path}: truncated frame payload, expected {expected} bytes, got {actual}"
        )

    frames = np.frombuffer(raw, dtype=np.uint8, offset=FRAME_HEADER.size)
    frames = frames.reshape(count, height, width, 3)
    logger.debug(f"Read {count} frames of {width}x{height} at {fps} fps from {path}")
    return FrameSequence(width=width, height=height, fps=float(fps), frames=frames)


def write_frames(frames: FrameSequence, path: Path | str) -> None:
    """Write a frame sequence in the CAMOX1 format."""
    header = FRAME_HEADER.pack(
        FRAME_MAGIC, frames.width, frames.height, int(round(frames.fps)), frames.n_frames
    )
    Path(path).write_bytes(header + np.ascontiguousarray(frames.frames).tobytes())


def extract_ppg(frames: FrameSequence, meta: CaptureMeta) -> PpgRecording:
    """
    Reduce every frame to its per-channel mean pixel value.

    Args:
        frames: Raw RGB frames
        meta: Capture metadata copied onto the recording

    Returns:
        Recording whose column j is the (R, G, B) mean of frame j

    Raises:
        DataFormatError: If the sequence holds no frames
    """
    if frames.n_frames == 0:
        raise DataFormatError("Cannot extract PPG from an empty frame sequence")

    means = frames.frames.mean(axis=(1, 2), dtype=np.float64).T
    return PpgRecording(
        channel_means=means,
        fps=frames.fps,
        gains=meta.gains,
        hand=meta.hand,
        subject_id=meta.subject_id,
        tissue_flags=list(meta.tissue_flags),
    )


# --- CSV files ---------------------------------------------------------------

def _read_csv(path: Path | str, columns: list[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read {path}: {e}") from e
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataFormatError(f"{path} is missing columns {missing}")
    return df


def read_ppg_csv(path: Path | str, meta: CaptureMeta) -> PpgRecording:
    """Read a PPG CSV (frame_idx, t_sec, r_mean, g_mean, b_mean)."""
    df = _read_csv(path, PPG_COLUMNS).sort_values("frame_idx")
    if df.empty:
        raise DataFormatError(f"{path} holds no frames")
    try:
        return PpgRecording(
            channel_means=df[["r_mean", "g_mean", "b_mean"]].to_numpy(dtype=np.float64).T,
            fps=meta.fps,
            gains=meta.gains,
            hand=meta.hand,
            subject_id=meta.subject_id,
            tissue_flags=list(meta.tissue_flags),
            t0=float(df["t_sec"].iloc[0]),
        )
    except ValidationError as e:
        raise DataFormatError(f"{path}: {e}") from e


def write_ppg_csv(rec: PpgRecording, path: Path | str) -> None:
    df = pd.DataFrame({
        "frame_idx": np.arange(rec.n_frames),
        "t_sec": rec.frame_times(),
        "r_mean": rec.channel_means[0],
        "g_mean": rec.channel_means[1],
        "b_mean": rec.channel_means[2],
    })
    df.to_csv(path, index=False, float_format="%.6f")


def read_ground_truth_csv(path: Path | str) -> GroundTruthSeries:
    """Read a ground-truth CSV (t_sec, spo2)."""
    df = _read_csv(path, SPO2_COLUMNS)
    try:
        return GroundTruthSeries(
            t=df["t_sec"].to_numpy(dtype=np.float64),
            spo2=df["spo2"].to_numpy(dtype=np.float64),
        )
    except ValidationError as e:
        raise DataFormatError(f"{path}: {e}") from e


def write_ground_truth_csv(gt: GroundTruthSeries, path: Path | str) -> None:
    pd.DataFrame({"t_sec": gt.t, "spo2": gt.spo2}).to_csv(
        path, index=False, float_format="%.6f"
    )


def read_meta(path: Path | str) -> CaptureMeta:
    try:
        return CaptureMeta.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise DataFormatError(f"Cannot read capture metadata {path}: {e}") from e


def write_meta(meta: CaptureMeta, path: Path | str) -> None:
    Path(path).write_text(
        json.dumps(meta.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_hand_recording(hand_dir: Path) -> HandRecording:
    """Load ppg.csv, spo2.csv and meta.json of one hand-subject directory."""
    meta = read_meta(hand_dir / "meta.json")
    expected = (hand_dir.parent.name.removeprefix("subject_"), hand_dir.name)
    if (meta.subject_id, meta.hand.value) != expected:
        raise DataFormatError(
            f"{hand_dir}: meta.json names subject {meta.subject_id}/{meta.hand.value}"
        )
    return HandRecording(
        recording=read_ppg_csv(hand_dir / "ppg.csv", meta),
        ground_truth=read_ground_truth_csv(hand_dir / "spo2.csv"),
        meta=meta,
    )


def load_dataset(root: Path | str) -> Dataset:
    """
    Load every `subject_<id>/<left|right>/` directory under root.

    Raises:
        DataFormatError: If the root holds no hand recordings
    """
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"Dataset directory {root} does not exist")

    subject_dirs = sorted(
        (p for p in root.glob("subject_*") if p.is_dir()),
        key=lambda p: subject_sort_key(p.name.removeprefix("subject_")),
    )
    recordings = []
    for subject_dir in subject_dirs:
        for hand in Hand:
            hand_dir = subject_dir / hand.value
            if hand_dir.is_dir():
                recordings.append(load_hand_recording(hand_dir))

    if not recordings:
        raise DataFormatError(f"No hand recordings found under {root}")
    logger.info(
        f"Loaded {len(recordings)} hand recordings "
        f"({len(subject_dirs)} subjects) from {root}"
    )
    return Dataset(root=root, recordings=recordings)


# --- windowing ---------------------------------------------------------------

def nearest_frame(t: float, rec: PpgRecording) -> int:
    """Frame index closest to time t; an exact tie picks the earlier frame."""
    x = (t - rec.t0) * rec.fps
    return int(math.ceil(x - 0.5))


def window_samples(
    rec: PpgRecording,
    gt: GroundTruthSeries,
    floor_spo2: float = 70.0,
    window: int = WINDOW_FRAMES,
) -> list[Sample]:
    """
    Cut one window per ground-truth reading, centred on the reading's nearest frame.

    The window covers frames [c - window//2, c + window - window//2), so a 90-frame
    recording holds exactly one window centred on frame 45. Readings whose window would
    run past either end of the recording are dropped, as are readings below floor_spo2.

    Raises:
        NoValidWindowsError: If the recording is shorter than one window
    """
    if rec.n_frames < window:
        raise NoValidWindowsError(
            f"Recording {rec.subject_id}/{rec.hand.value} has {rec.n_frames} frames, "
            f"shorter than one {window}-frame window"
        )

    half = window // 2
    samples = []
    dropped_edge = dropped_floor = 0
    for t, spo2 in zip(gt.t, gt.spo2):
        center = nearest_frame(float(t), rec)
        start = center - half
        if start < 0 or start + window > rec.n_frames:
            dropped_edge += 1
            continue
        if spo2 < floor_spo2:
            dropped_floor += 1
            continue
        samples.append(
            Sample(
                window=rec.channel_means[:, start:start + window],
                label=float(spo2),
                subject_id=rec.subject_id,
                hand=rec.hand,
                center_time=float(t),
            )
        )

    logger.debug(
        f"{rec.subject_id}/{rec.hand.value}: {len(samples)} samples "
        f"({dropped_edge} past recording edges, {dropped_floor} below {floor_spo2}%)"
    )
    return samples


def build_samples(dataset: Dataset, floor_spo2: float = 70.0) -> list[Sample]:
    """Window every hand recording of a dataset."""
    samples = []
    for hand_rec in dataset.recordings:
        samples.extend(window_samples(hand_rec.recording, hand_rec.ground_truth, floor_spo2))
    return samples


# --- standardization ---------------------------------------------------------

def compute_channel_stats(train_recordings: list[PpgRecording]) -> ChannelStats:
    """
    Length-weighted channel mean and (population) standard deviation.

    Combines per-recording moments with weights proportional to recording length,
    which equals the moments of all training columns concatenated.
    """
    if not train_recordings:
        raise ValueError("compute_channel_stats needs at least one recording")

    lengths = np.array([r.n_frames for r in train_recordings], dtype=np.float64)
    means = np.stack([r.channel_means.mean(axis=1) for r in train_recordings])
    variances = np.stack([r.channel_means.var(axis=1) for r in train_recordings])
    weights = (lengths / lengths.sum())[:, None]

    mean = (weights * means).sum(axis=0)
    var = (weights * (variances + (means - mean) ** 2)).sum(axis=0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return ChannelStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def standardize_windows(windows: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Standardize an array whose second-to-last axis is the channel axis."""
    return (windows - stats.mean_column()) / stats.std_column()


def destandardize(windows: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Affine inverse of standardize_windows."""
    return windows * stats.std_column() + stats.mean_column()


def standardize(samples: list[Sample], stats: ChannelStats) -> list[Sample]:
    """Map each window entry x of channel c to (x - mean_c) / std_c; labels unchanged."""
    return [
        s.model_copy(update={"window": standardize_windows(s.window, stats)})
        for s in samples
    ]


# --- splits ------------------------------------------------------------------

def make_split_plan(
    subject_ids: list[str], exclusions: list[str] | None = None
) -> SplitPlan:
    """
    One split per subject as test; validation is the next subject in the rotation.

    Args:
        subject_ids: Person-level ids (both hands of a subject travel together)
        exclusions: Subjects removed from every role

    Raises:
        ConfigError: If fewer than 3 subjects remain
    """
    excluded = sorted({str(s) for s in (exclusions or [])}, key=subject_sort_key)
    subjects = sorted(
        {str(s) for s in subject_ids} - set(excluded), key=subject_sort_key
    )
    if len(subjects) < 3:
        raise ConfigError(
            f"LOOCV needs at least 3 subjects, got {len(subjects)} "
            f"after excluding {excluded}"
        )

    splits = []
    for k, test in enumerate(subjects):
        val = subjects[(k + 1) % len(subjects)]
        train = [s for s in subjects if s not in (test, val)]
        splits.append(
            Split(split_id=k, train_subjects=train, val_subject=val, test_subject=test)
        )
    return SplitPlan(splits=splits, excluded=excluded)


# --- inspection --------------------------------------------------------------

def channel_profile(channel_means: np.ndarray) -> ChannelProfile:
    """DC (mean) and AC (population std) per channel of a 3 x n matrix."""
    return ChannelProfile(
        dc=tuple(channel_means.mean(axis=1).tolist()),
        ac=tuple(channel_means.std(axis=1).tolist()),
    )


class RecordingSummary(BaseModel):
    """Sample statistics of one hand-subject."""

    subject_id: str
    hand: Hand
    duration_sec: float
    n_readings: int
    n_samples: int
    spo2_min: float | None
    spo2_mean: float | None
    spo2_max: float | None
    profile: ChannelProfile
    tissue_flags: list[str]


class DatasetSummary(BaseModel):
    """Sample statistics of a whole dataset, plus the label histogram."""

    floor_spo2: float
    n_samples: int
    histogram: dict[str, int]
    recordings: list[RecordingSummary]


def dataset_summary(dataset: Dataset, floor_spo2: float = 70.0) -> DatasetSummary:
    """Per hand-subject statistics and the label histogram over the study ranges."""
    rows = []
    histogram: Counter[str] = Counter({f"{lo:g}-{hi:g}": 0 for lo, hi in HISTOGRAM_BINS})
    total = 0
    for hand_rec in dataset.recordings:
        samples = window_samples(hand_rec.recording, hand_rec.ground_truth, floor_spo2)
        labels = np.array([s.label for s in samples])
        total += len(samples)
        for lo, hi in HISTOGRAM_BINS:
            upper = labels <= hi if hi >= 100.0 else labels < hi
            histogram[f"{lo:g}-{hi:g}"] += int(np.count_nonzero((labels >= lo) & upper))
        rows.append(
            RecordingSummary(
                subject_id=hand_rec.subject_id,
                hand=hand_rec.hand,
                duration_sec=hand_rec.recording.duration,
                n_readings=len(hand_rec.ground_truth),
                n_samples=len(samples),
                spo2_min=float(labels.min()) if labels.size else None,
                spo2_mean=float(labels.mean()) if labels.size else None,
                spo2_max=float(labels.max()) if labels.size else None,
                profile=channel_profile(hand_rec.recording.channel_means),
                tissue_flags=hand_rec.meta.tissue_flags,
            )
        )
    return DatasetSummary(
        floor_spo2=floor_spo2, n_samples=total, histogram=dict(histogram), recordings=rows
    )
