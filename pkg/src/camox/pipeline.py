"""LOOCV orchestration: per-split standardization, training, model selection, predictions."""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from itertools import repeat
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field
from scipy.stats import spearmanr

from .errors import CamoxError, ConfigError, DataFormatError, LeakageError, SplitError
from .ingest import build_samples, compute_channel_stats, make_split_plan, standardize_windows
from .metrics import mae, subject_mean_mae
from .models import (
    AblationRow,
    ArrayModel,
    ChannelStats,
    Dataset,
    Hand,
    PredictionRow,
    PredictionSet,
    RunManifest,
    Sample,
    Split,
    SplitPlan,
    TrainConfig,
)
from .nn import Network, NetworkShape, adam_step, backward, init_adam, init_network, predict, save_checkpoint

ABLATION_FLOOR_RANGE = (70.0, 100.0)
MANIFEST_NAME = "manifest.json"


class SampleArrays(ArrayModel):
    """Samples stacked column-wise for fast selection."""

    windows: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    hands: np.ndarray
    center_times: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "SampleArrays":
        return cls(
            windows=np.stack([s.window for s in samples]) if samples else np.empty((0, 3, 90)),
            labels=np.array([s.label for s in samples], dtype=np.float64),
            subject_ids=np.array([s.subject_id for s in samples], dtype=object),
            hands=np.array([s.hand.value for s in samples], dtype=object),
            center_times=np.array([s.center_time for s in samples], dtype=np.float64),
        )

    def __len__(self) -> int:
        return int(self.labels.size)

    def select(self, mask: np.ndarray) -> "SampleArrays":
        return SampleArrays(
            windows=self.windows[mask],
            labels=self.labels[mask],
            subject_ids=self.subject_ids[mask],
            hands=self.hands[mask],
            center_times=self.center_times[mask],
        )


class PreparedSplit(ArrayModel):
    """One split's standardized train/validation/test samples."""

    split: Split
    stats: ChannelStats
    train: SampleArrays
    val: SampleArrays
    test: SampleArrays


class EpochRecord(BaseModel):
    epoch: int
    train_mse: float
    val_mae: float


class TrainedSplit(ArrayModel):
    """Selected network of one split and its training history."""

    split: Split
    network: Network
    history: list[EpochRecord] = Field(default_factory=list)
    best_epoch: int | None = None
    val_baseline_mae: float

    @property
    def trained(self) -> bool:
        return bool(self.history)


class SplitSummary(BaseModel):
    split_id: int
    test_subject: str
    val_subject: str
    train_subjects: list[str]
    n_train: int
    n_val: int
    n_test: int
    best_epoch: int | None
    val_mae: float | None
    val_baseline_mae: float
    test_mae: float
    # Constant predictor at the training-label mean
    test_baseline_mae: float
    checkpoint: str | None = None


class LoocvResult(ArrayModel):
    """Predictions of every split plus per-split summaries and networks."""

    plan: SplitPlan
    predictions: PredictionSet
    splits: list[SplitSummary]
    networks: list[Network] = Field(default_factory=list, exclude=True)

    @property
    def pooled_mae(self) -> float:
        return mae(self.predictions)

    @property
    def subject_mean_mae(self) -> float:
        return subject_mean_mae(self.predictions)

    @property
    def pooled_baseline_mae(self) -> float:
        """Pooled test MAE of the per-split training-mean predictors."""
        n = sum(s.n_test for s in self.splits)
        return sum(s.test_baseline_mae * s.n_test for s in self.splits) / n

    @property
    def trained(self) -> bool:
        return all(s.best_epoch is not None for s in self.splits)


# --- splits ------------------------------------------------------------------

def assert_no_leakage(split: Split, train: SampleArrays, val: SampleArrays, test: SampleArrays) -> None:
    """
    Raise if the test subject's data appears in training or validation samples.

    Raises:
        LeakageError: On any overlap
    """
    held_out = {split.test_subject}
    seen = set(train.subject_ids.tolist()) | set(val.subject_ids.tolist())
    if held_out & seen:
        raise LeakageError(f"split {split.split_id}: test subject {split.test_subject} in training data")
    if split.val_subject in set(train.subject_ids.tolist()):
        raise LeakageError(f"split {split.split_id}: validation subject {split.val_subject} in training data")
    if set(test.subject_ids.tolist()) - held_out:
        raise LeakageError(f"split {split.split_id}: test set holds other subjects")


def prepare_split(
    samples: SampleArrays, dataset: Dataset, split: Split, config: TrainConfig
) -> PreparedSplit:
    """
    Partition samples by role, drop labels under the floor, standardize with train-only stats.

    Raises:
        SplitError: If any partition is empty
        LeakageError: If a test sample reaches training or validation
    """
    kept = samples.select(samples.labels >= config.floor_spo2)
    train = kept.select(np.isin(kept.subject_ids, split.train_subjects))
    val = kept.select(kept.subject_ids == split.val_subject)
    test = kept.select(kept.subject_ids == split.test_subject)
    assert_no_leakage(split, train, val, test)
    for role, part in (("train", train), ("validation", val), ("test", test)):
        if len(part) == 0:
            raise SplitError(split.split_id, f"empty {role} set at floor {config.floor_spo2:g}%")

    stats = compute_channel_stats(
        [r.recording for r in dataset.for_subjects(split.train_subjects)]
    )
    for part in (train, val, test):
        part.windows = standardize_windows(part.windows, stats)
    return PreparedSplit(split=split, stats=stats, train=train, val=val, test=test)


# --- training ----------------------------------------------------------------

def network_shape(config: TrainConfig) -> NetworkShape:
    return NetworkShape(conv_channels=config.conv_channels, hidden=config.hidden)


def train_split(prepared: PreparedSplit, config: TrainConfig) -> TrainedSplit:
    """
    Train one split and keep the parameters with the lowest validation MAE.

    Initialization and shuffling draw from streams derived from (seed, split id), so
    a split trains identically whether run alone, sequentially or in a worker.
    """
    split = prepared.split
    x, y = prepared.train.windows, prepared.train.labels
    xv, yv = prepared.val.windows, prepared.val.labels
    if y.size == 0 or yv.size == 0:
        raise SplitError(split.split_id, "empty train or validation set")

    init_seq, shuffle_seq = np.random.SeedSequence([config.seed, split.split_id]).spawn(2)
    label_mean = float(y.mean())
    net = init_network(
        network_shape(config), init_seq, output_bias=label_mean, zero_head=True,
        channel_stats=prepared.stats,
    )
    baseline = float(np.mean(np.abs(yv - label_mean)))

    if config.epochs == 0:
        logger.warning(f"Split {split.split_id}: epochs=0, returning the initialized network")
        return TrainedSplit(split=split, network=net, val_baseline_mae=baseline)

    adam = init_adam(
        net.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
        l2=config.l2, decay_epoch=config.decay_epoch, decay_factor=config.decay_factor,
    )
    rng = np.random.default_rng(shuffle_seq)
    history = []
    best_params = net.copy_params()
    best_epoch, best_mae = 0, np.inf

    logger.info(
        f"Split {split.split_id}: test={split.test_subject} val={split.val_subject} "
        f"train={split.train_subjects} ({y.size} train / {yv.size} val samples)"
    )
    for epoch in range(config.epochs):
        order = rng.permutation(y.size)
        sse = 0.0
        for start in range(0, y.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = backward(net, x[idx], y[idx], config.l2)
            adam_step(adam, net.params, grads, epoch)
            sse += value.mse * idx.size

        val_mae = float(np.mean(np.abs(predict(net, xv) - yv)))
        history.append(EpochRecord(epoch=epoch, train_mse=sse / y.size, val_mae=val_mae))
        if val_mae < best_mae:
            best_mae, best_epoch = val_mae, epoch
            best_params = net.copy_params()
        logger.debug(
            f"Split {split.split_id} epoch {epoch}: train MSE {sse / y.size:.3f}, "
            f"val MAE {val_mae:.3f}"
        )

    logger.info(
        f"Split {split.split_id}: best epoch {best_epoch} with val MAE {best_mae:.3f} "
        f"(train-mean baseline {baseline:.3f})"
    )
    return TrainedSplit(
        split=split,
        network=net.model_copy(update={"params": best_params}),
        history=history,
        best_epoch=best_epoch,
        val_baseline_mae=baseline,
    )


def _train_split_guarded(prepared: PreparedSplit, config: TrainConfig) -> TrainedSplit:
    try:
        return train_split(prepared, config)
    except CamoxError:
        raise
    except Exception as e:
        raise SplitError(prepared.split.split_id, f"training failed: {e}") from e


def run_loocv(
    dataset: Dataset,
    config: TrainConfig,
    jobs: int = 1,
    checkpoint_dir: Path | None = None,
) -> LoocvResult:
    """
    Train and test every split; each subject is predicted by a model that never saw it.

    Args:
        dataset: Loaded study
        config: Training configuration (floor and exclusions included)
        jobs: Worker processes for split-level parallelism
        checkpoint_dir: Where to write one checkpoint per split, if given

    Returns:
        Predictions of all splits ordered by split id, with per-split summaries
    """
    plan = make_split_plan(dataset.subject_ids, config.subject_exclusions)
    samples = SampleArrays.from_samples(build_samples(dataset, config.floor_spo2))
    prepared = [prepare_split(samples, dataset, split, config) for split in plan.splits]

    if jobs > 1:
        logger.info(f"Training {len(prepared)} splits on {jobs} workers")
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trained = list(pool.map(_train_split_guarded, prepared, repeat(config)))
    else:
        trained = [_train_split_guarded(p, config) for p in prepared]

    rows, summaries = [], []
    config_echo = config.model_dump(mode="json")
    for prep, result in zip(prepared, trained):
        split = prep.split
        preds = predict(result.network, prep.test.windows, clamp=config.clamp_predictions)
        split_rows = [
            PredictionRow(
                split_id=split.split_id,
                subject_id=str(subject),
                hand=Hand(hand),
                t_sec=float(t),
                ground_truth=float(label),
                prediction=float(pred),
            )
            for subject, hand, t, label, pred in zip(
                prep.test.subject_ids, prep.test.hands, prep.test.center_times,
                prep.test.labels, preds,
            )
        ]
        rows.extend(split_rows)

        checkpoint = None
        if checkpoint_dir is not None:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            path = checkpoint_dir / f"split_{split.split_id}.camoxnn"
            save_checkpoint(result.network, path, {"train": config_echo, "split": split.model_dump()})
            checkpoint = str(path)

        summaries.append(
            SplitSummary(
                split_id=split.split_id,
                test_subject=split.test_subject,
                val_subject=split.val_subject,
                train_subjects=split.train_subjects,
                n_train=len(prep.train),
                n_val=len(prep.val),
                n_test=len(prep.test),
                best_epoch=result.best_epoch,
                val_mae=result.history[result.best_epoch].val_mae if result.trained else None,
                val_baseline_mae=result.val_baseline_mae,
                test_mae=mae(PredictionSet(rows=split_rows)),
                test_baseline_mae=float(np.mean(np.abs(prep.test.labels - prep.train.labels.mean()))),
                checkpoint=checkpoint,
            )
        )

    result = LoocvResult(
        plan=plan,
        predictions=PredictionSet(rows=rows),
        splits=summaries,
        networks=[t.network for t in trained],
    )
    logger.info(
        f"LOOCV over {len(plan.splits)} subjects: per-subject MAE {result.subject_mean_mae:.3f}, "
        f"pooled MAE {result.pooled_mae:.3f}"
    )
    return result


# --- ablation ----------------------------------------------------------------

def ablation_run(
    dataset: Dataset,
    config: TrainConfig,
    floors: list[float],
    jobs: int = 1,
    reuse: LoocvResult | None = None,
) -> list[AblationRow]:
    """
    Rerun the full LOOCV with samples below each floor removed from every partition.

    Args:
        dataset: Loaded study
        config: Training configuration; floors below config.floor_spo2 are raised to it
        floors: Lower SpO2 floors to evaluate
        jobs: Worker processes for split-level parallelism
        reuse: A finished LOOCV run with this config, used for floors equal to its floor

    Raises:
        ConfigError: If a floor lies outside [70, 100)
        SplitError: If a floor leaves any split empty
    """
    lo, hi = ABLATION_FLOOR_RANGE
    bad = [f for f in floors if not lo <= f < hi]
    if bad:
        raise ConfigError(f"ablation floors must lie in [{lo:g}, {hi:g}), got {bad}")

    rows = []
    for floor in floors:
        effective = max(floor, config.floor_spo2)
        if reuse is not None and effective == config.floor_spo2:
            logger.info(f"Ablation floor {floor:g}%: reusing the main LOOCV run")
            result = reuse
        else:
            logger.info(f"Ablation floor {floor:g}%")
            result = run_loocv(dataset, config.model_copy(update={"floor_spo2": effective}), jobs=jobs)
        rows.append(
            AblationRow(
                floor=floor,
                mae=result.subject_mean_mae,
                pooled_mae=result.pooled_mae,
                n_samples=len(result.predictions),
            )
        )
    return rows


def ablation_trend(rows: list[AblationRow]) -> float:
    """Spearman rank correlation between floor and MAE."""
    if len(rows) < 2:
        raise ValueError("ablation trend needs at least two floors")
    rho = spearmanr([r.floor for r in rows], [r.mae for r in rows]).statistic
    return float(rho)


# --- persistence -------------------------------------------------------------

def write_predictions(pred_set: PredictionSet, path: Path | str) -> None:
    """CSV `split_id,subject_id,hand,t_sec,ground_truth,prediction`, shortest round-trip floats."""
    pred_set.to_frame().to_csv(path, index=False)


def read_predictions(path: Path | str) -> PredictionSet:
    try:
        df = pd.read_csv(path, dtype={"subject_id": str, "hand": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"Cannot read predictions {path}: {e}") from e
    try:
        return PredictionSet.from_frame(df)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from e


def file_sha256(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dataset_hash(root: Path | str) -> str:
    """Content hash over every file of a dataset directory except run manifests, in sorted path order."""
    root = Path(root)
    digest = hashlib.sha256()
    files = (p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    for path in sorted(files):
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(bytes.fromhex(file_sha256(path)))
    return digest.hexdigest()


def write_manifest(manifest: RunManifest, path: Path | str) -> None:
    Path(path).write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
