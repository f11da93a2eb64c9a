"""Synthetic varied-FiO2 studies rendered through a camera model.

Stair-stepped desaturation trajectories drive a reflectance-PPG signal model whose
red/blue AC/DC ratio follows the empirical ratio-of-ratios curve SpO2 = 110 - 25R.
Generation is deterministic given the study seed: every subject and hand draws from
its own child of one numpy SeedSequence.
"""

import json
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator
from scipy.signal import lfilter

from .errors import ClippingError, ConfigError
from .ingest import (
    extract_ppg,
    write_frames,
    write_ground_truth_csv,
    write_meta,
    write_ppg_csv,
)
from .models import (
    DEFAULT_GAINS,
    FPS,
    FRAME_HEIGHT,
    FRAME_WIDTH,
    WINDOW_FRAMES,
    CaptureMeta,
    FrameSequence,
    GroundTruthSeries,
    Hand,
    PpgRecording,
)

MIN_PLATEAU_SECONDS = 30.0
CLIP_WARN_FRACTION = 0.01


class ProtocolSpec(BaseModel):
    """Stair-stepped desaturation protocol sampled at 1 Hz."""

    duration: float = 960.0
    start_spo2: float = 98.0
    floor_spo2: float = 70.0
    n_plateaus: int = Field(default=6, ge=1)
    plateau_jitter: float = Field(default=1.0, ge=0)
    heart_rate: float = Field(default=75.0, gt=0)
    # First-order lag of the oxygen response between plateaus, seconds
    transition_tau: float = Field(default=20.0, gt=0)
    # Reference oximeters report whole percent; 0 disables rounding
    reading_resolution: float = Field(default=1.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_levels(self) -> "ProtocolSpec":
        if not self.floor_spo2 < self.start_spo2 <= 100.0:
            raise ValueError(
                f"need floor_spo2 < start_spo2 <= 100, got {self.floor_spo2} / {self.start_spo2}"
            )
        if self.duration < WINDOW_FRAMES / FPS:
            raise ValueError(f"duration must cover one {WINDOW_FRAMES}-frame window")
        return self


class CameraModel(BaseModel):
    """Per-channel amplifier gains, sensor noise and 8-bit quantization."""

    gains: tuple[float, float, float] = DEFAULT_GAINS
    bit_depth: int = Field(default=8, ge=1, le=16)
    noise_sigma: float = Field(default=0.5, ge=0)
    drift_amplitude: float = Field(default=2.0, ge=0)
    drift_period: float = Field(default=60.0, gt=0)
    # Light reaching the sensor before gain, per channel
    base_intensity: tuple[float, float, float] = (140.0, 25.0, 3.0)
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT
    allow_saturation: bool = False

    @property
    def max_value(self) -> int:
        return 2 ** self.bit_depth - 1

    @classmethod
    def auto_balance(cls) -> "CameraModel":
        """Auto white-balance exposure: red driven into the top of the range, green near 0."""
        return cls(gains=(4.0, 0.05, 1.0), allow_saturation=True)


class TissueProfile(BaseModel):
    """Finger tissue: damped pulsatile component and raised baseline."""

    name: str = "normal"
    ac_damping: float = Field(default=1.0, gt=0, le=1)
    # Added to every channel after gain, intensity units
    dc_shift: float = 0.0

    @classmethod
    def callus(cls) -> "TissueProfile":
        """Thickened skin: about half the AC amplitude and a 33-unit brighter baseline."""
        return cls(name="callus", ac_damping=0.5, dc_shift=33.0)


class OpticalModel(BaseModel):
    """Reflectance PPG signal shape shared by every subject."""

    # Pulsatile std over baseline of the blue channel; red is R(s) times this
    perfusion_blue: float = Field(default=0.127, gt=0)
    perfusion_green: float = Field(default=0.08, ge=0)
    # Fractional change of red baseline per SpO2 percent around reference_spo2
    red_dc_slope: float = 0.004
    reference_spo2: float = 97.0
    harmonic_ratio: float = Field(default=0.4, ge=0)
    harmonic_phase: float = 0.6
    # Uniform per-hand, per-channel baseline spread (finger coupling)
    hand_dc_jitter: float = Field(default=0.05, ge=0, lt=1)


class StudySpec(BaseModel):
    """Everything needed to regenerate a synthetic study; persisted as study.json."""

    n_subjects: int = Field(default=6, ge=3)
    protocol: ProtocolSpec = Field(default_factory=ProtocolSpec)
    camera: CameraModel = Field(default_factory=CameraModel)
    optics: OpticalModel = Field(default_factory=OpticalModel)
    fps: float = Field(default=FPS, gt=0)
    heart_rate_range: tuple[float, float] = (60.0, 90.0)
    # Per-subject duration varies uniformly by up to this many seconds
    duration_jitter: float = Field(default=60.0, ge=0)
    tissue_profiles: dict[str, TissueProfile] = Field(default_factory=dict)
    seed: int = 0
    write_frames: bool = False
    frames_seconds: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def validate_study(self) -> "StudySpec":
        lo, hi = self.heart_rate_range
        if not 0 < lo <= hi:
            raise ValueError("heart_rate_range must be positive and ordered")
        if self.protocol.duration - self.duration_jitter < WINDOW_FRAMES / self.fps:
            raise ValueError("duration_jitter leaves recordings shorter than one window")
        unknown = [s for s in self.tissue_profiles if not s.isdigit() or not
                   1 <= int(s) <= self.n_subjects]
        if unknown:
            raise ValueError(f"tissue profiles name unknown subjects {unknown}")
        return self


# --- ratio of ratios ---------------------------------------------------------

def ratio_from_spo2(spo2: np.ndarray | float) -> np.ndarray | float:
    return (110.0 - np.asarray(spo2)) / 25.0


def spo2_from_ratio(ratio: np.ndarray | float) -> np.ndarray | float:
    return 110.0 - 25.0 * np.asarray(ratio)


def ratio_of_ratios(window: np.ndarray) -> float:
    """(AC/DC)_red / (AC/DC)_blue of a 3 x n window, AC as std and DC as mean."""
    ac = window.std(axis=1)
    dc = window.mean(axis=1)
    return float((ac[0] / dc[0]) / (ac[2] / dc[2]))


# --- generation --------------------------------------------------------------

def trajectory(spec: ProtocolSpec) -> GroundTruthSeries:
    """
    Descending SpO2 plateaus with lagged transitions, one reading per second.

    Raises:
        ConfigError: If the plateaus are too short for the duration
    """
    if spec.duration / spec.n_plateaus < MIN_PLATEAU_SECONDS:
        raise ConfigError(
            f"{spec.n_plateaus} plateaus do not fit in {spec.duration:g} s "
            f"(each needs {MIN_PLATEAU_SECONDS:g} s)"
        )
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration))
    lower = spec.floor_spo2 - 2.0

    levels = np.linspace(spec.start_spo2, spec.floor_spo2, spec.n_plateaus)
    jitter = rng.uniform(-spec.plateau_jitter, spec.plateau_jitter, size=spec.n_plateaus)
    jitter[0] = 0.0
    levels = np.clip(np.minimum.accumulate(levels + jitter), lower, 100.0)

    t = np.arange(n, dtype=np.float64)
    target = levels[np.minimum(np.arange(n) * spec.n_plateaus // n, spec.n_plateaus - 1)]
    alpha = 1.0 - np.exp(-1.0 / spec.transition_tau)
    smoothed = lfilter([alpha], [1.0, alpha - 1.0], target - target[0]) + target[0]

    if spec.reading_resolution > 0:
        smoothed = np.round(smoothed / spec.reading_resolution) * spec.reading_resolution
    return GroundTruthSeries(t=t, spo2=np.clip(smoothed, lower, 100.0))


def pulse_waveform(t: np.ndarray, heart_rate: float, optics: OpticalModel, phase: float = 0.0) -> np.ndarray:
    """Zero-mean, unit-std two-harmonic pulse with a systolic/diastolic asymmetry."""
    theta = 2.0 * np.pi * heart_rate / 60.0 * t + phase
    a = optics.harmonic_ratio
    wave = np.sin(theta) + a * np.sin(2.0 * theta + optics.harmonic_phase)
    return wave / np.sqrt((1.0 + a * a) / 2.0)


def render_intensity(
    gt: GroundTruthSeries,
    camera: CameraModel,
    tissue: TissueProfile,
    fps: float,
    heart_rate: float,
    seed: int | np.random.SeedSequence,
    optics: OpticalModel | None = None,
    pulse_phase: float = 0.0,
) -> tuple[np.ndarray, float]:
    """
    Pre-quantization sensor signal, 3 x n, before clipping.

    Returns:
        The signal and the time of its first frame
    """
    if len(gt) == 0:
        raise ValueError("ground truth must hold at least one reading")
    optics = optics or OpticalModel()
    rng = np.random.default_rng(seed)

    t0 = float(gt.t[0])
    n = int(round((float(gt.t[-1]) - t0 + 1.0) * fps))
    t = t0 + np.arange(n) / fps
    s = np.interp(t, gt.t, gt.spo2)

    base = np.asarray(camera.base_intensity, dtype=np.float64)
    base = base * (1.0 + rng.uniform(-optics.hand_dc_jitter, optics.hand_dc_jitter, size=3))
    dc = np.empty((3, n))
    dc[0] = base[0] * (1.0 + optics.red_dc_slope * (s - optics.reference_spo2))
    dc[1] = base[1]
    dc[2] = base[2]

    ac = np.empty((3, n))
    ac[2] = optics.perfusion_blue * dc[2]
    ac[1] = optics.perfusion_green * dc[1]
    ac[0] = ratio_from_spo2(s) * optics.perfusion_blue * dc[0]
    ac *= tissue.ac_damping

    gains = np.asarray(camera.gains, dtype=np.float64)[:, None]
    signal = gains * (dc + ac * pulse_waveform(t, heart_rate, optics, pulse_phase))
    signal += tissue.dc_shift

    drift_phase = rng.uniform(0.0, 2.0 * np.pi)
    signal += camera.drift_amplitude * np.sin(2.0 * np.pi * t / camera.drift_period + drift_phase)
    if camera.noise_sigma > 0:
        signal += rng.normal(0.0, camera.noise_sigma, size=signal.shape)
    return signal, t0


def render_ppg(
    gt: GroundTruthSeries,
    camera: CameraModel,
    tissue: TissueProfile,
    fps: float,
    heart_rate: float,
    seed: int | np.random.SeedSequence,
    optics: OpticalModel | None = None,
    subject_id: str = "1",
    hand: Hand = Hand.LEFT,
    pulse_phase: float = 0.0,
) -> PpgRecording:
    """
    Render a ground-truth series as quantized channel means.

    Raises:
        ClippingError: If a channel is saturated on every frame and the camera
            does not allow saturation
    """
    signal, t0 = render_intensity(gt, camera, tissue, fps, heart_rate, seed, optics, pulse_phase)

    clipped = ((signal < 0.0) | (signal > camera.max_value)).mean(axis=1)
    for name, fraction in zip("RGB", clipped):
        if fraction >= 1.0 and not camera.allow_saturation:
            raise ClippingError(
                f"{name} channel of {subject_id}/{hand.value} is clipped on every frame "
                f"(gains {camera.gains})"
            )
        if fraction > CLIP_WARN_FRACTION:
            logger.warning(
                f"{name} channel of {subject_id}/{hand.value} clipped on {fraction:.1%} of frames"
            )

    values = np.round(np.clip(signal, 0.0, camera.max_value))
    return PpgRecording(
        channel_means=values,
        fps=fps,
        gains=camera.gains,
        hand=hand,
        subject_id=subject_id,
        tissue_flags=[] if tissue.name == "normal" else [tissue.name],
        t0=t0,
    )


def render_frames(rec: PpgRecording, camera: CameraModel | None = None) -> FrameSequence:
    """Constant-valued frames whose pixels carry each column of the recording."""
    camera = camera or CameraModel()
    values = np.round(np.clip(rec.channel_means.T, 0, 255)).astype(np.uint8)
    frames = np.broadcast_to(
        values[:, None, None, :], (rec.n_frames, camera.height, camera.width, 3)
    )
    return FrameSequence(width=camera.width, height=camera.height, fps=rec.fps, frames=frames)


def _derived_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def generate_study(spec: StudySpec, out_dir: Path | str) -> Path:
    """
    Write a synthetic study in the ingest layout.

    Each subject gets its own trajectory, heart rate and duration; both hands share
    them and the tissue profile, with independent noise streams.

    Args:
        spec: Study description
        out_dir: Dataset root, created if missing

    Returns:
        The dataset root
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Generating {spec.n_subjects}-subject synthetic study in {out_dir}")

    root_seq = np.random.SeedSequence(spec.seed)
    for index, subject_seq in enumerate(root_seq.spawn(spec.n_subjects)):
        subject_id = str(index + 1)
        traj_seq, hands_seq, subject_rng_seq = subject_seq.spawn(3)
        rng = np.random.default_rng(subject_rng_seq)

        heart_rate = float(rng.uniform(*spec.heart_rate_range))
        duration = spec.protocol.duration + float(
            rng.uniform(-spec.duration_jitter, spec.duration_jitter)
        )
        protocol = spec.protocol.model_copy(
            update={"seed": _derived_seed(traj_seq), "duration": round(duration),
                    "heart_rate": heart_rate}
        )
        gt = trajectory(protocol)
        tissue = spec.tissue_profiles.get(subject_id, TissueProfile())
        pulse_phase = float(rng.uniform(0.0, 2.0 * np.pi))

        for hand, hand_seq in zip(Hand, hands_seq.spawn(len(Hand))):
            rec = render_ppg(
                gt, spec.camera, tissue, spec.fps, heart_rate, hand_seq, spec.optics,
                subject_id=subject_id, hand=hand, pulse_phase=pulse_phase,
            )
            meta = CaptureMeta(
                subject_id=subject_id,
                hand=hand,
                fps=spec.fps,
                gains=spec.camera.gains,
                tissue_flags=rec.tissue_flags,
                notes=f"synthetic; heart rate {heart_rate:.1f} bpm",
                seed=spec.seed,
            )
            hand_dir = out_dir / f"subject_{subject_id}" / hand.value
            hand_dir.mkdir(parents=True, exist_ok=True)
            write_ppg_csv(rec, hand_dir / "ppg.csv")
            write_ground_truth_csv(gt, hand_dir / "spo2.csv")
            write_meta(meta, hand_dir / "meta.json")

            if spec.write_frames:
                n = min(rec.n_frames, int(round(spec.frames_seconds * spec.fps)))
                head = rec.model_copy(update={"channel_means": rec.channel_means[:, :n]})
                write_frames(render_frames(head, spec.camera), hand_dir / "frames.bin")

        logger.debug(
            f"Subject {subject_id}: {len(gt)} readings, {heart_rate:.1f} bpm, "
            f"tissue {tissue.name}"
        )

    (out_dir / "study.json").write_text(
        json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info(f"Synthetic study written to {out_dir}")
    return out_dir


def roundtrip_recording(rec: PpgRecording, camera: CameraModel | None = None) -> PpgRecording:
    """extract_ppg(render_frames(rec)) with the recording's own metadata."""
    meta = CaptureMeta(
        subject_id=rec.subject_id, hand=rec.hand, fps=rec.fps, gains=rec.gains,
        tissue_flags=rec.tissue_flags,
    )
    return extract_ppg(render_frames(rec, camera), meta)
