"""Shared fixtures: a small synthetic study on disk and a fast training configuration."""

import numpy as np
import pytest

from camox.ingest import load_dataset
from camox.models import CaptureMeta, FrameSequence, GroundTruthSeries, Hand, PpgRecording, TrainConfig
from camox.synth import ProtocolSpec, StudySpec, TissueProfile, generate_study


def small_study_spec(seed: int = 7, n_subjects: int = 4) -> StudySpec:
    return StudySpec(
        n_subjects=n_subjects,
        protocol=ProtocolSpec(duration=120.0, n_plateaus=3),
        duration_jitter=10.0,
        tissue_profiles={"2": TissueProfile.callus()},
        seed=seed,
    )


@pytest.fixture(scope="session")
def study_dir(tmp_path_factory):
    """Four subjects, two minutes each; subject 2 has a callus."""
    return generate_study(small_study_spec(), tmp_path_factory.mktemp("study"))


@pytest.fixture(scope="session")
def dataset(study_dir):
    return load_dataset(study_dir)


@pytest.fixture
def fast_config():
    """Tiny network and a high learning rate so LOOCV tests finish in seconds."""
    return TrainConfig(epochs=2, conv_channels=(2, 2, 2), hidden=4, batch_size=64, lr=1e-3, seed=3)


@pytest.fixture
def meta():
    return CaptureMeta(subject_id="1", hand=Hand.LEFT)


def make_recording(n_frames: int, fps: float = 30.0, t0: float = 0.0, seed: int = 0,
                   subject_id: str = "1", hand: Hand = Hand.LEFT) -> PpgRecording:
    rng = np.random.default_rng(seed)
    return PpgRecording(
        channel_means=rng.uniform(20.0, 200.0, size=(3, n_frames)),
        fps=fps,
        hand=hand,
        subject_id=subject_id,
        t0=t0,
    )


def make_frames(n_frames: int, width: int = 8, height: int = 6, seed: int = 0) -> FrameSequence:
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n_frames, height, width, 3), dtype=np.uint8)
    return FrameSequence(width=width, height=height, fps=30.0, frames=frames)


def readings(times, spo2) -> GroundTruthSeries:
    return GroundTruthSeries(t=np.asarray(times, dtype=float), spo2=np.asarray(spo2, dtype=float))
