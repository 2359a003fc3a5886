"""Non-i.i.d. silo construction and raw-format loaders."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import gzip
import logging
import struct
import time

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.optimize import brentq
from scipy.special import expit

from nn_engine import Batch

# Get logger for this module
logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
ROTATED_SIDE = 16


class DataFormatError(ValueError):
    """Raised when a raw file does not follow its binary format"""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SchemaError(ValueError):
    """Raised when a tabular file does not follow the expected columns/values"""
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples with labels; inputs are n x d (or an n x h x w x c image stack for generator bases)"""
    inputs: np.ndarray
    labels: np.ndarray
    meta: str = ""
    attributes: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] < 1:
            raise ValueError(f"dataset '{self.meta}' is empty")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(f"dataset '{self.meta}': {self.labels.shape[0]} labels for {self.inputs.shape[0]} inputs")
        for name, values in self.attributes.items():
            if values.shape[0] != self.inputs.shape[0]:
                raise ValueError(f"dataset '{self.meta}': attribute '{name}' has wrong length")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return int(np.prod(self.inputs.shape[1:]))

    def subset(self, index: np.ndarray, meta: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            inputs=self.inputs[index],
            labels=self.labels[index],
            meta=self.meta if meta is None else meta,
            attributes={name: values[index] for name, values in self.attributes.items()},
        )

    def as_batch(self) -> Batch:
        return Batch(self.inputs.reshape(self.size, -1), self.labels)


@dataclass(frozen=True, eq=False)
class SiloSpec:
    """One client's private data"""
    train: LabeledDataset
    val: LabeledDataset


@dataclass(frozen=True, eq=False)
class FederationDataset:
    """All training silos plus the shared OOD test set"""
    silos: List[SiloSpec]
    ood_test: LabeledDataset

    def __post_init__(self):
        if not self.silos:
            raise ValueError("federation needs at least one silo")
        dims = {self.ood_test.n_features}
        for silo in self.silos:
            dims.update({silo.train.n_features, silo.val.n_features})
        if len(dims) != 1:
            raise ValueError(f"silos and OOD set disagree on feature dimension: {sorted(dims)}")

    @property
    def n_features(self) -> int:
        return self.ood_test.n_features


def concat_datasets(parts: Sequence[LabeledDataset], meta: str) -> LabeledDataset:
    shared = set.intersection(*(set(part.attributes) for part in parts))
    return LabeledDataset(
        inputs=np.concatenate([part.inputs for part in parts]),
        labels=np.concatenate([part.labels for part in parts]),
        meta=meta,
        attributes={name: np.concatenate([part.attributes[name] for part in parts]) for name in sorted(shared)},
    )


def split_train_val(data: LabeledDataset, val_fraction: float, rng: np.random.Generator) -> SiloSpec:
    """Shuffle, then keep round((1 - val_fraction) * n) samples for training"""
    if data.size < 2:
        raise ValueError(f"silo '{data.meta}' needs at least 2 samples for a train/val split")
    order = rng.permutation(data.size)
    n_train = int(round((1.0 - val_fraction) * data.size))
    n_train = min(max(n_train, 1), data.size - 1)
    return SiloSpec(
        train=data.subset(order[:n_train], meta=f"{data.meta}/train"),
        val=data.subset(order[n_train:], meta=f"{data.meta}/val"),
    )


def _check_probability(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")


# Raw loaders

def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def load_idx(path: Union[str, Path], flatten: bool = True) -> np.ndarray:
    """Parse a big-endian IDX file: images scaled to [0, 1], labels as int64"""
    data = _read_bytes(path)
    if len(data) < 8:
        raise DataFormatError(f"IDX file {path} too short for a header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])

    if magic == IDX_LABELS_MAGIC:
        (count,) = struct.unpack(">I", data[4:8])
        if len(data) < 8 + count:
            raise DataFormatError(f"IDX labels truncated: expected {count} labels", offset=len(data))
        return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)

    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise DataFormatError("IDX image header truncated", offset=len(data))
        count, rows, cols = struct.unpack(">III", data[4:16])
        expected = count * rows * cols
        if len(data) < 16 + expected:
            raise DataFormatError(f"IDX images truncated: expected {expected} pixel bytes", offset=len(data))
        pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=16).astype(np.float64) / 255.0
        return pixels.reshape(count, rows * cols) if flatten else pixels.reshape(count, rows, cols)

    raise DataFormatError(f"unknown IDX magic 0x{magic:08x} in {path}", offset=0)


def load_mnist(images_path: Union[str, Path], labels_path: Union[str, Path]) -> LabeledDataset:
    """Pair an IDX image file and label file into an n x 28 x 28 x 1 image set"""
    images = load_idx(images_path, flatten=False)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=0)
    logger.info(f"Loaded {images.shape[0]} MNIST digits from {images_path}")
    return LabeledDataset(images[..., None], labels, meta=f"mnist:{Path(images_path).name}")


def load_cifar_binary(paths: Union[str, Path, Sequence[Union[str, Path]]]) -> LabeledDataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel bytes per record)"""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if not data or len(data) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"CIFAR file {path} is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                offset=len(data) - len(data) % CIFAR_RECORD_BYTES,
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        if records[:, 0].max() > 9:
            bad = int(np.argmax(records[:, 0] > 9))
            raise DataFormatError(f"CIFAR label out of range in {path}", offset=bad * CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        pixels = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
        images.append(pixels.astype(np.float64) / 255.0)
    logger.info(f"Loaded {sum(len(l) for l in labels)} CIFAR-10 images from {len(paths)} file(s)")
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), meta="cifar10")


# Color digits

def _partition(n: int, parts: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Disjoint shuffled index blocks"""
    return np.array_split(rng.permutation(n), parts)


def _colorize(images: np.ndarray, digits: np.ndarray, color_flip: float, label_flip: float,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = (digits >= 5).astype(np.int64)
    labels ^= (rng.random(labels.shape[0]) < label_flip).astype(np.int64)
    color = labels ^ (rng.random(labels.shape[0]) < color_flip).astype(np.int64)

    gray = images[:, ::2, ::2, 0]
    encoded = np.zeros(gray.shape + (2,))
    red = color == 1
    encoded[red, :, :, 0] = gray[red]
    encoded[~red, :, :, 1] = gray[~red]
    return encoded.reshape(encoded.shape[0], -1), labels, color


def make_color_digits(base: LabeledDataset, flip_probs: Sequence[float], ood_color_flip: float,
                      ood_label_flip: float, seed: int, val_fraction: float = 0.3) -> FederationDataset:
    """Split digits into color-biased silos plus a color-reversed, label-noised OOD set"""
    for p in list(flip_probs) + [ood_color_flip, ood_label_flip]:
        _check_probability("flip probability", p)
    if base.inputs.ndim != 4:
        raise ValueError(f"color digits need an n x h x w x c image stack, got {base.inputs.shape}")

    rng = np.random.default_rng(seed)
    blocks = _partition(base.size, len(flip_probs) + 1, rng)
    silos = []
    for silo_index, (block, flip) in enumerate(zip(blocks, flip_probs)):
        inputs, labels, color = _colorize(base.inputs[block], base.labels[block], flip, 0.0, rng)
        data = LabeledDataset(inputs, labels, meta=f"color_digits/silo{silo_index}",
                              attributes={"color": color, "source_index": block})
        silos.append(split_train_val(data, val_fraction, rng))

    ood_block = blocks[-1]
    inputs, labels, color = _colorize(base.inputs[ood_block], base.labels[ood_block],
                                      ood_color_flip, ood_label_flip, rng)
    ood = LabeledDataset(inputs, labels, meta="color_digits/ood",
                         attributes={"color": color, "source_index": ood_block})
    logger.info(f"Built {len(silos)} color-digit silos with flips {list(flip_probs)}, OOD {ood.size} samples")
    return FederationDataset(silos, ood)


# Rotated images

def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center with bilinear interpolation; outside pixels become 0"""
    if not -180.0 <= degrees <= 180.0:
        raise ValueError(f"rotation must lie in [-180, 180] degrees, got {degrees}")
    if degrees == 0:
        return img.copy()
    return ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def to_model_input(img: np.ndarray, side: int = ROTATED_SIDE) -> np.ndarray:
    """Grayscale (channel mean), downscale to side x side, flatten"""
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    if h % side == 0 and w % side == 0:
        small = gray.reshape(side, h // side, side, w // side).mean(axis=(1, 3))
    else:
        small = ndimage.zoom(gray, (side / h, side / w), order=1)
    return small.ravel()


def _rotated_inputs(images: np.ndarray, angles: np.ndarray) -> np.ndarray:
    return np.stack([to_model_input(rotate_image(image, float(angle))) for image, angle in zip(images, angles)])


def make_rotated_silos(base: LabeledDataset, silo_degrees: Sequence[Sequence[float]], ood_range: Tuple[float, float],
                       seed: int, val_fraction: float = 0.3) -> FederationDataset:
    """One silo per angle list, each angle a tagged sub-environment; OOD angles drawn per image"""
    if not silo_degrees or any(len(angles) == 0 for angles in silo_degrees):
        raise ValueError("every silo needs at least one rotation angle")
    lo, hi = ood_range
    start_time = time.time()
    rng = np.random.default_rng(seed)
    blocks = _partition(base.size, len(silo_degrees) + 1, rng)

    silos = []
    for silo_index, (block, angles) in enumerate(zip(blocks, silo_degrees)):
        groups = np.array_split(block, len(angles))
        sub_env = np.concatenate([np.full(len(group), env) for env, group in enumerate(groups)]).astype(np.int64)
        sample_angles = np.concatenate([np.full(len(group), angle, dtype=np.float64)
                                        for group, angle in zip(groups, angles)])
        ordered = np.concatenate(groups)
        data = LabeledDataset(
            _rotated_inputs(base.inputs[ordered], sample_angles),
            base.labels[ordered],
            meta=f"rotated/silo{silo_index}",
            attributes={"sub_env": sub_env, "angle": sample_angles, "source_index": ordered},
        )
        silos.append(split_train_val(data, val_fraction, rng))

    ood_block = blocks[-1]
    ood_angles = rng.uniform(lo, hi, size=len(ood_block))
    ood = LabeledDataset(_rotated_inputs(base.inputs[ood_block], ood_angles), base.labels[ood_block],
                         meta="rotated/ood", attributes={"angle": ood_angles, "source_index": ood_block})
    logger.info(f"Built {len(silos)} rotated silos in {time.time() - start_time:.2f}s")
    return FederationDataset(silos, ood)


# Synthetic spurious-feature benchmark

def _spurious_block(n: int, d_inv: int, flip: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, 2, size=n)
    invariant = rng.normal(loc=(2.0 * labels - 1.0)[:, None], scale=1.0, size=(n, d_inv))
    spurious = labels ^ (rng.random(n) < flip).astype(labels.dtype)
    return np.concatenate([invariant, spurious[:, None].astype(np.float64)], axis=1), labels.astype(np.int64)


def make_synth_spurious(n_per_silo: int, d_inv: int, flip_probs: Sequence[float], ood_flip: float, seed: int,
                        n_ood: Optional[int] = None, val_fraction: float = 0.3) -> FederationDataset:
    """Gaussian class-conditional features plus one label copy flipped at a silo-specific rate"""
    if d_inv < 1:
        raise ValueError(f"d_inv must be >= 1, got {d_inv}")
    for p in list(flip_probs) + [ood_flip]:
        _check_probability("flip probability", p)
    rng = np.random.default_rng(seed)
    silos = []
    next_id = 0
    for silo_index, flip in enumerate(flip_probs):
        inputs, labels = _spurious_block(n_per_silo, d_inv, flip, rng)
        ids = np.arange(next_id, next_id + n_per_silo)
        next_id += n_per_silo
        data = LabeledDataset(inputs, labels, meta=f"synth_spurious/silo{silo_index}",
                              attributes={"source_index": ids})
        silos.append(split_train_val(data, val_fraction, rng))

    n_ood = n_ood or n_per_silo
    inputs, labels = _spurious_block(n_ood, d_inv, ood_flip, rng)
    ood = LabeledDataset(inputs, labels, meta="synth_spurious/ood",
                         attributes={"source_index": np.arange(next_id, next_id + n_ood)})
    return FederationDataset(silos, ood)


# Clinical surrogate

def federate_hospitals(hospitals: Dict[str, LabeledDataset], n_train_silos: int = 20, val_fraction: float = 0.3,
                       seed: int = 0) -> FederationDataset:
    """Largest hospitals become training silos (70/30 by default); the rest pool into the OOD set"""
    if len(hospitals) <= n_train_silos:
        raise ValueError(f"need more than {n_train_silos} hospitals, got {len(hospitals)}")
    names = list(hospitals)
    ranked = sorted(range(len(names)), key=lambda i: (-hospitals[names[i]].size, i))
    rng = np.random.default_rng(seed)
    silos = [split_train_val(hospitals[names[i]], val_fraction, rng) for i in ranked[:n_train_silos]]
    ood = concat_datasets([hospitals[names[i]] for i in sorted(ranked[n_train_silos:])], meta="clinical/ood")
    return FederationDataset(silos, ood)


def _hospital_sizes(n_hospitals: int, n_patients: int, rng: np.random.Generator) -> np.ndarray:
    weights = rng.lognormal(mean=0.0, sigma=1.0, size=n_hospitals)
    return rng.multinomial(n_patients - 2 * n_hospitals, weights / weights.sum()) + 2


def make_synth_clinical(n_hospitals: int, n_features: int, positive_rate: float, seed: int,
                        n_patients: int = 30760, n_train_silos: int = 20, mean_active: float = 20.0,
                        val_fraction: float = 0.3) -> Tuple[FederationDataset, List[int]]:
    """Sparse binary medication features, hospital-shifted logistic mortality labels"""
    if n_hospitals < n_train_silos + 1:
        raise ValueError(f"need at least {n_train_silos + 1} hospitals, got {n_hospitals}")
    if n_patients < 2 * n_hospitals:
        raise ValueError(f"{n_patients} patients cannot fill {n_hospitals} hospitals")
    _check_probability("positive_rate", positive_rate)
    start_time = time.time()
    rng = np.random.default_rng(seed)

    sizes = _hospital_sizes(n_hospitals, n_patients, rng)
    popularity = rng.lognormal(mean=0.0, sigma=1.0, size=n_features)
    coef = rng.normal(0.0, 0.5, size=n_features)
    hospital_shift = rng.normal(0.0, 0.5, size=n_hospitals)

    features, scores = [], []
    for h, size in enumerate(sizes):
        local = popularity * np.exp(rng.normal(0.0, 0.5, size=n_features))
        prob = np.clip(local * (mean_active / local.sum()), 0.0, 0.95)
        x = (rng.random((size, n_features)) < prob).astype(np.uint8)
        features.append(x)
        scores.append(x @ coef + hospital_shift[h])

    pooled = np.concatenate(scores)
    intercept = brentq(lambda c: expit(pooled + c).mean() - positive_rate, -60.0, 60.0, xtol=1e-12)
    hospitals = {}
    for h, (x, score) in enumerate(zip(features, scores)):
        labels = (rng.random(score.shape[0]) < expit(score + intercept)).astype(np.int64)
        hospitals[f"h{h:03d}"] = LabeledDataset(x, labels, meta=f"clinical/h{h:03d}")

    fed = federate_hospitals(hospitals, n_train_silos=n_train_silos, val_fraction=val_fraction, seed=seed)
    logger.info(f"Built clinical surrogate: {n_patients} patients, {n_hospitals} hospitals "
                f"in {time.time() - start_time:.2f}s")
    return fed, [int(s) for s in sizes]


def load_clinical_csv(path: Union[str, Path], schema: Optional[Sequence[str]] = None) -> Dict[str, LabeledDataset]:
    """Read hospital_id,label,<binary features...> rows and group them per hospital"""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"clinical CSV {path} is empty") from e

    missing = [column for column in ("hospital_id", "label") if column not in frame.columns]
    feature_columns = list(schema) if schema is not None else [
        column for column in frame.columns if column not in ("hospital_id", "label")
    ]
    missing += [column for column in feature_columns if column not in frame.columns]
    if missing:
        raise SchemaError(f"clinical CSV {path} is missing columns {missing}")
    if frame.empty:
        raise SchemaError(f"clinical CSV {path} has a header but no rows")
    if not feature_columns:
        raise SchemaError(f"clinical CSV {path} has no feature columns")

    values = frame[feature_columns]
    if values.isna().any().any() or not values.isin([0, 1]).all().all():
        raise SchemaError(f"clinical CSV {path} has non-binary feature values")
    if not frame["label"].isin([0, 1]).all():
        raise SchemaError(f"clinical CSV {path} has non-binary labels")

    hospitals = {}
    for hospital_id, group in frame.groupby("hospital_id", sort=False):
        hospitals[str(hospital_id)] = LabeledDataset(
            group[feature_columns].to_numpy(dtype=np.uint8),
            group["label"].to_numpy(dtype=np.int64),
            meta=f"clinical/{hospital_id}",
        )
    logger.info(f"Loaded {len(frame)} patients from {len(hospitals)} hospitals in {path}")
    return hospitals


def load_clinical_federation(path: Union[str, Path], schema: Optional[Sequence[str]] = None,
                             n_train_silos: int = 20, val_fraction: float = 0.3, seed: int = 0) -> FederationDataset:
    """Clinical CSV grouped with the largest-hospitals rule: top silos train, the rest pool into OOD"""
    hospitals = load_clinical_csv(path, schema)
    if len(hospitals) <= n_train_silos:
        raise SchemaError(f"clinical CSV {path} has {len(hospitals)} hospitals, need more than {n_train_silos}")
    return federate_hospitals(hospitals, n_train_silos=n_train_silos, val_fraction=val_fraction, seed=seed)


# Silo files for process-separated clients

def save_silo(path: Union[str, Path], silo_index: int, data: LabeledDataset) -> None:
    np.savez(path, silo_index=np.int64(silo_index), inputs=data.inputs, labels=data.labels)


def load_silo(path: Union[str, Path]) -> Tuple[int, LabeledDataset]:
    with np.load(path) as archive:
        silo_index = int(archive["silo_index"])
        data = LabeledDataset(archive["inputs"], archive["labels"], meta=f"silo{silo_index}")
    return silo_index, data
