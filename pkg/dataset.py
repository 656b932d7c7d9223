"""
Data model for OCT B-scan collections.

This module provides:
- GradeLabel / Domain enumerations and the immutable BScan record
- Dataset, an ordered collection of (BScan, optional grade) samples with
  patient grouping and guarded access to evaluation-only target labels
- Manifest ingestion/export (CSV + 8-bit PNG) and pixel normalization
- A deterministic synthetic B-scan generator with an injectable domain shift
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import BaseModel, Field, ValidationError, field_validator

from config import settings
from constants import (
    BSCAN_SHAPE,
    CLASS_NAMES,
    MANIFEST_FILENAME,
    MANIFEST_HEADER,
    N_CLASSES,
    PIXEL_SCALE,
    SUPPORTED_BIT_DEPTH,
    SYNTH_BACKGROUND,
    SYNTH_BAND_INTENSITY,
    SYNTH_BAND_THICKNESS,
    SYNTH_BAND_THRESHOLD,
    SYNTH_BASE_NOISE_STD,
    SYNTH_LOWER_LAYERS,
    SYNTH_META_FILENAME,
    SYNTH_SURFACE_ROW,
)
from error_responses import (
    DomainMismatchError,
    DuplicateImageIdError,
    EmptyDatasetError,
    InvalidConfigError,
    InvalidGradeError,
    IoFailureError,
    ManifestFormatError,
    MissingImageError,
    NotGrayscaleError,
    ShapeMismatchError,
    UnlabeledSampleError,
)
from label_guard import evaluation_scope, record_read
from structured_logger import audit_logger, get_logger

logger = get_logger(__name__)


class GradeLabel(IntEnum):
    """Glaucoma grade, ordered by severity."""
    HEALTHY = 0
    EARLY = 1
    ADVANCED = 2

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.value]

    @classmethod
    def parse(cls, value: Any) -> "GradeLabel":
        """
        Parse a grade from its index or name.

        Accepts 0/1/2 (as int or string) and healthy/early/advanced in any case.

        Raises:
            InvalidGradeError: If the value is not one of the three grades
        """
        if isinstance(value, GradeLabel):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            if 0 <= int(value) < N_CLASSES:
                return cls(int(value))
            raise InvalidGradeError(f"Grade {value!r} is outside 0..{N_CLASSES - 1}", details={"grade": int(value)})

        text = str(value).strip().lower()
        if text in CLASS_NAMES:
            return cls(CLASS_NAMES.index(text))
        if text in {str(index) for index in range(N_CLASSES)}:
            return cls(int(text))
        raise InvalidGradeError(f"Grade {value!r} is not one of {CLASS_NAMES}", details={"grade": str(value)})


class Domain(str, Enum):
    """Acquisition domain of a scan."""
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True, eq=False)
class BScan:
    """A single grayscale OCT B-scan normalized to [0, 1]."""
    image_id: str
    patient_id: str
    pixels: np.ndarray
    domain: Domain

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float32)
        if pixels.shape != BSCAN_SHAPE:
            raise ShapeMismatchError(
                f"B-scan {self.image_id!r} has shape {pixels.shape}, expected {BSCAN_SHAPE}",
                details={"image_id": self.image_id, "shape": list(pixels.shape)},
            )
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ShapeMismatchError(
                f"B-scan {self.image_id!r} has values outside [0, 1]",
                details={"image_id": self.image_id},
            )
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "domain", Domain(self.domain))


class Sample:
    """A B-scan with an optional grade; target grades are evaluation-only."""

    __slots__ = ("scan", "_grade", "eval_only")

    def __init__(self, scan: BScan, grade: Optional[GradeLabel] = None, eval_only: bool = False):
        self.scan = scan
        self._grade = None if grade is None else GradeLabel.parse(grade)
        self.eval_only = eval_only

    @property
    def image_id(self) -> str:
        return self.scan.image_id

    @property
    def patient_id(self) -> str:
        return self.scan.patient_id

    @property
    def has_label(self) -> bool:
        return self._grade is not None

    @property
    def label(self) -> Optional[GradeLabel]:
        """The grade; reading an evaluation-only grade requires an evaluation scope."""
        if self._grade is not None and self.eval_only:
            record_read(self.scan.image_id)
        return self._grade

    def revealed(self) -> "Sample":
        """Copy whose grade is no longer evaluation-only (counts as a read)."""
        return Sample(self.scan, self.label, eval_only=False)

    def __repr__(self) -> str:
        return f"Sample(image_id={self.image_id!r}, patient_id={self.patient_id!r}, eval_only={self.eval_only})"


class Dataset:
    """
    Ordered, immutable collection of samples from one domain.

    Invariants: image ids are unique; every sample of a source dataset is
    labeled; every scan belongs to the dataset's domain.
    """

    def __init__(self, samples: Iterable[Sample], domain: Union[Domain, str]):
        self.domain = Domain(domain)
        self._samples: Tuple[Sample, ...] = tuple(samples)

        seen = set()
        for sample in self._samples:
            if sample.image_id in seen:
                raise DuplicateImageIdError(
                    f"Duplicate image id {sample.image_id!r}",
                    details={"image_id": sample.image_id},
                )
            seen.add(sample.image_id)
            if sample.scan.domain != self.domain:
                raise DomainMismatchError(
                    f"Scan {sample.image_id!r} is {sample.scan.domain.value}, dataset is {self.domain.value}",
                    details={"image_id": sample.image_id},
                )
            if self.domain == Domain.SOURCE and not sample.has_label:
                raise UnlabeledSampleError(
                    f"Source sample {sample.image_id!r} has no grade",
                    details={"image_id": sample.image_id},
                )

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def __getitem__(self, index: int) -> Sample:
        return self._samples[index]

    def __repr__(self) -> str:
        return f"Dataset(domain={self.domain.value}, n_samples={self.n_samples}, n_patients={self.n_patients})"

    @property
    def samples(self) -> Tuple[Sample, ...]:
        return self._samples

    @property
    def n_samples(self) -> int:
        return len(self._samples)

    @property
    def patient_ids(self) -> List[str]:
        """Patient ids in order of first appearance."""
        return list(dict.fromkeys(sample.patient_id for sample in self._samples))

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def image_ids(self) -> List[str]:
        return [sample.image_id for sample in self._samples]

    @property
    def is_fully_labeled(self) -> bool:
        return all(sample.has_label for sample in self._samples)

    def scans(self) -> List[BScan]:
        return [sample.scan for sample in self._samples]

    def pixel_array(self) -> np.ndarray:
        """Stacked pixels, shape (n, 248, 384), float32."""
        if not self._samples:
            return np.zeros((0, *BSCAN_SHAPE), dtype=np.float32)
        return np.stack([sample.scan.pixels for sample in self._samples])

    def labels(self) -> List[Optional[GradeLabel]]:
        """All grades in order; evaluation-only grades need an evaluation scope."""
        grades = [sample.label for sample in self._samples]
        eval_only = sum(1 for sample in self._samples if sample.eval_only and sample.has_label)
        if eval_only:
            audit_logger.log_label_access("dataset_labels", eval_only, domain=self.domain.value)
        return grades

    def training_labels(self) -> List[GradeLabel]:
        """
        Grades usable as supervision.

        Raises:
            UnlabeledSampleError: If any sample has no grade
        """
        missing = [sample.image_id for sample in self._samples if not sample.has_label]
        if missing:
            raise UnlabeledSampleError(
                f"{len(missing)} samples carry no grade",
                details={"image_ids": missing[:10]},
            )
        return [grade for grade in self.labels() if grade is not None]

    def subset_by_patients(self, patients: Iterable[str]) -> "Dataset":
        """Samples of the given patients, in original order."""
        wanted = set(patients)
        return Dataset([sample for sample in self._samples if sample.patient_id in wanted], self.domain)

    def with_revealed_labels(self) -> "Dataset":
        """Copy whose target grades are usable for training (counts as reads)."""
        return Dataset([sample.revealed() for sample in self._samples], self.domain)

    def describe(self) -> Dict[str, Dict[str, int]]:
        """Patients and samples per grade plus totals (target grades need a scope)."""
        table: Dict[str, Dict[str, int]] = {}
        grades = self.labels()
        for name_index, name in enumerate(CLASS_NAMES):
            members = [s for s, g in zip(self._samples, grades) if g is not None and int(g) == name_index]
            table[name] = {
                "patients": len({s.patient_id for s in members}),
                "samples": len(members),
            }
        table["total"] = {"patients": self.n_patients, "samples": self.n_samples}
        return table


# ============================================================================
# PIXEL NORMALIZATION
# ============================================================================

def resample_bilinear(image: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinearly resample a 2-D array to ``shape`` (half-pixel centers)."""
    if tuple(image.shape) == tuple(shape):
        return np.array(image, copy=True)
    tensor = torch.as_tensor(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    resized = F.interpolate(tensor, size=tuple(shape), mode="bilinear", align_corners=False)
    return resized[0, 0].numpy()


def normalize_bscan(raw: np.ndarray, bit_depth: int = SUPPORTED_BIT_DEPTH) -> np.ndarray:
    """
    Map a raw 8-bit single-channel image to canonical B-scan pixels.

    Values are divided by 255 (no per-image min-max) and off-size images are
    bilinearly resampled to 248x384.

    Raises:
        NotGrayscaleError: If the input has more than one channel
        InvalidConfigError: If bit_depth is not 8
    """
    if bit_depth != SUPPORTED_BIT_DEPTH:
        raise InvalidConfigError(f"Only {SUPPORTED_BIT_DEPTH}-bit images are supported", details={"bit_depth": bit_depth})

    array = np.asarray(raw)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[..., 0]
    if array.ndim != 2:
        raise NotGrayscaleError(
            f"Expected a 2-D single-channel image, got shape {array.shape}",
            details={"shape": list(array.shape)},
        )

    pixels = array.astype(np.float64) / PIXEL_SCALE
    if pixels.shape != BSCAN_SHAPE:
        pixels = resample_bilinear(pixels, BSCAN_SHAPE)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Pixels in [0, 1] to 8-bit integers."""
    return np.round(np.clip(pixels, 0.0, 1.0) * PIXEL_SCALE).astype(np.uint8)


def read_png(path: Path) -> np.ndarray:
    """Decode an 8-bit grayscale PNG into a uint8 array."""
    with Image.open(path) as image:
        if len(image.getbands()) > 1:
            raise NotGrayscaleError(
                f"Image {path} has {len(image.getbands())} channels",
                details={"path": str(path), "mode": image.mode},
            )
        if image.mode == "1":
            image = image.convert("L")
        if image.mode != "L":
            raise ManifestFormatError(
                f"Image {path} is not 8-bit (mode {image.mode})",
                details={"path": str(path), "mode": image.mode},
            )
        return np.array(image, dtype=np.uint8)


def write_png(pixels: np.ndarray, path: Path) -> None:
    """Encode canonical pixels as an 8-bit grayscale PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(quantize(pixels)).save(path, format="PNG")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc


# ============================================================================
# MANIFEST INGESTION
# ============================================================================

def _load_pixels(path: Path) -> np.ndarray:
    return normalize_bscan(read_png(path))


def load_manifest(path: Union[str, Path], workers: Optional[int] = None) -> Dataset:
    """
    Load a dataset from a manifest CSV.

    The manifest header is ``image_path,patient_id,grade,domain``; image paths
    are relative to the manifest directory and the image id is the relative
    path without its suffix. All rows must share one domain; an empty grade is
    accepted only for target rows. Target grades are stored evaluation-only.

    Raises:
        ManifestFormatError: Missing file, wrong header or mixed domains
        EmptyDatasetError: No data rows
        InvalidGradeError: Grade outside {0, 1, 2, healthy, early, advanced}
        MissingImageError: Referenced image file absent
        DuplicateImageIdError: Two rows resolve to the same image id
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestFormatError(f"Manifest not found: {path}", details={"path": str(path)})

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise EmptyDatasetError(f"Manifest {path} is empty", details={"path": str(path)}) from exc

    if tuple(column.strip() for column in frame.columns) != MANIFEST_HEADER:
        raise ManifestFormatError(
            f"Manifest header must be {','.join(MANIFEST_HEADER)}",
            details={"header": list(frame.columns)},
        )
    if frame.empty:
        raise EmptyDatasetError(f"Manifest {path} has no data rows", details={"path": str(path)})

    domains = {value.strip().lower() for value in frame["domain"]}
    if len(domains) != 1 or not domains <= {d.value for d in Domain}:
        raise ManifestFormatError(
            f"Manifest must hold exactly one domain out of source/target, got {sorted(domains)}",
            details={"domains": sorted(domains)},
        )
    domain = Domain(domains.pop())

    root = path.parent
    rows: List[Tuple[str, str, Optional[GradeLabel], Path]] = []
    seen = set()
    for line, record in enumerate(frame.itertuples(index=False), start=2):
        image_path = record.image_path.strip()
        grade_text = record.grade.strip()
        if grade_text == "":
            if domain == Domain.SOURCE:
                raise InvalidGradeError(f"Row {line}: source rows need a grade", details={"row": line})
            grade = None
        else:
            grade = GradeLabel.parse(grade_text)

        image_id = Path(image_path).with_suffix("").as_posix()
        if image_id in seen:
            raise DuplicateImageIdError(f"Row {line}: duplicate image id {image_id!r}", details={"row": line})
        seen.add(image_id)

        file_path = root / image_path
        if not file_path.is_file():
            raise MissingImageError(f"Row {line}: image not found: {file_path}", details={"row": line, "path": str(file_path)})
        rows.append((image_id, record.patient_id.strip(), grade, file_path))

    # map() keeps manifest order regardless of completion order
    with ThreadPoolExecutor(max_workers=workers or settings.data_workers) as pool:
        pixels = list(pool.map(_load_pixels, [row[3] for row in rows]))

    samples = [
        Sample(
            BScan(image_id=image_id, patient_id=patient_id, pixels=image, domain=domain),
            grade,
            eval_only=domain == Domain.TARGET,
        )
        for (image_id, patient_id, grade, _), image in zip(rows, pixels)
    ]
    dataset = Dataset(samples, domain)
    logger.info(
        "Manifest loaded",
        manifest=str(path),
        domain=domain.value,
        n_samples=dataset.n_samples,
        n_patients=dataset.n_patients,
    )
    return dataset


def write_manifest(dataset: Dataset, out_dir: Union[str, Path], filename: str = MANIFEST_FILENAME) -> Path:
    """
    Write a dataset as PNG files plus a manifest under ``out_dir``.

    Each image is stored at ``<image_id>.png`` so reloading reproduces the ids.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with evaluation_scope("export"):
        grades = dataset.labels()

    records = []
    for sample, grade in zip(dataset, grades):
        relative = f"{sample.image_id}.png"
        write_png(sample.scan.pixels, out_dir / relative)
        records.append({
            "image_path": relative,
            "patient_id": sample.patient_id,
            "grade": "" if grade is None else str(int(grade)),
            "domain": dataset.domain.value,
        })

    manifest_path = out_dir / filename
    try:
        pd.DataFrame(records, columns=list(MANIFEST_HEADER)).to_csv(manifest_path, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {manifest_path}: {exc}", details={"path": str(manifest_path)}) from exc
    return manifest_path


# ============================================================================
# SYNTHETIC GENERATOR
# ============================================================================

class DomainShift(BaseModel):
    """Acquisition shift applied to target images."""
    contrast_factor: float = Field(default=0.7, gt=0.0)
    noise_std: float = Field(default=0.06, ge=0.0)
    brightness_offset: float = 0.05


class SynthConfig(BaseModel):
    """Synthetic source/target generator settings."""
    n_patients_source: int = Field(default=85, gt=0)
    n_patients_target: int = Field(default=71, gt=0)
    samples_per_patient: Tuple[int, int] = (1, 2)
    shift: DomainShift = Field(default_factory=DomainShift)
    base_noise_std: float = Field(default=SYNTH_BASE_NOISE_STD, ge=0.0)
    seed: int = 0

    @field_validator('samples_per_patient')
    @classmethod
    def validate_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        low, high = v
        if low < 1 or high < low:
            raise ValueError("samples_per_patient must satisfy 1 <= low <= high")
        return v

    @classmethod
    def parse(cls, data: Any) -> "SynthConfig":
        """Validate raw data, reporting failures as InvalidConfigError."""
        try:
            if isinstance(data, cls):
                return cls.model_validate(data.model_dump())
            return cls.model_validate(data)
        except ValidationError as exc:
            raise InvalidConfigError(
                "Invalid synthetic configuration",
                details={"errors": json.loads(exc.json(include_url=False))},
            ) from exc


@dataclass(frozen=True)
class SynthParams:
    """Generation parameters of one synthetic scan."""
    image_id: str
    grade: GradeLabel
    band_thickness: float
    surface_row: float
    phase: float


@dataclass(frozen=True)
class SyntheticBundle:
    source: Dataset
    target: Dataset
    params: Dict[str, SynthParams]


def render_bscan(grade: GradeLabel, rng: np.random.Generator, noise_std: float) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """
    Render a layered-band scan whose bright top band encodes the grade.

    The bright band follows a double-hump thickness profile across columns
    whose mean equals the sampled band thickness.
    """
    height, width = BSCAN_SHAPE
    low, high = SYNTH_BAND_THICKNESS[int(grade)]
    thickness = float(rng.uniform(low, high))
    surface = float(rng.uniform(*SYNTH_SURFACE_ROW))
    phase = float(rng.uniform(0.0, 2.0 * math.pi))

    cols = np.arange(width)
    rows = np.arange(height)[:, None]
    top = surface + 6.0 * np.sin(2.0 * math.pi * cols / width + phase)
    band = thickness * (1.0 + 0.35 * np.cos(4.0 * math.pi * cols / width))

    image = np.full(BSCAN_SHAPE, SYNTH_BACKGROUND, dtype=np.float64)
    cursor = top + band
    image[(rows >= top) & (rows < cursor)] = SYNTH_BAND_INTENSITY
    for layer_height, intensity in SYNTH_LOWER_LAYERS:
        image[(rows >= cursor) & (rows < cursor + layer_height)] = intensity
        cursor = cursor + layer_height

    if noise_std > 0:
        image = image + rng.normal(0.0, noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0), (thickness, surface, phase)


def apply_domain_shift(pixels: np.ndarray, shift: DomainShift, rng: np.random.Generator) -> np.ndarray:
    """Contrast around mid-gray, brightness offset and additive Gaussian noise."""
    shifted = (pixels - 0.5) * shift.contrast_factor + 0.5 + shift.brightness_offset
    if shift.noise_std > 0:
        shifted = shifted + rng.normal(0.0, shift.noise_std, size=pixels.shape)
    return np.clip(shifted, 0.0, 1.0)


def measure_band_thickness(pixels: np.ndarray, threshold: float = SYNTH_BAND_THRESHOLD) -> float:
    """Mean per-column count of pixels brighter than ``threshold``."""
    return float((np.asarray(pixels) > threshold).sum(axis=0).mean())


def _generate_domain(config: SynthConfig, domain: Domain, rng: np.random.Generator) -> Tuple[Dataset, Dict[str, SynthParams]]:
    n_patients = config.n_patients_source if domain == Domain.SOURCE else config.n_patients_target
    prefix = "S" if domain == Domain.SOURCE else "T"
    grades = rng.permutation(np.arange(n_patients) % 3)
    low, high = config.samples_per_patient

    samples: List[Sample] = []
    params: Dict[str, SynthParams] = {}
    for index, grade_value in enumerate(grades):
        grade = GradeLabel(int(grade_value))
        patient_id = f"{prefix}-P{index + 1:04d}"
        for scan_index in range(int(rng.integers(low, high + 1))):
            image_id = f"{patient_id}-{scan_index:02d}"
            pixels, (thickness, surface, phase) = render_bscan(grade, rng, config.base_noise_std)
            if domain == Domain.TARGET:
                pixels = apply_domain_shift(pixels, config.shift, rng)
            scan = BScan(image_id=image_id, patient_id=patient_id, pixels=normalize_bscan(quantize(pixels)), domain=domain)
            samples.append(Sample(scan, grade, eval_only=domain == Domain.TARGET))
            params[image_id] = SynthParams(image_id, grade, thickness, surface, phase)
    return Dataset(samples, domain), params


def generate_synthetic_with_params(config: SynthConfig) -> SyntheticBundle:
    """Generate source and target datasets and keep per-scan generation parameters."""
    config = SynthConfig.parse(config)
    source_seq, target_seq = np.random.SeedSequence(config.seed).spawn(2)
    source, source_params = _generate_domain(config, Domain.SOURCE, np.random.default_rng(source_seq))
    target, target_params = _generate_domain(config, Domain.TARGET, np.random.default_rng(target_seq))
    logger.info(
        "Synthetic datasets generated",
        seed=config.seed,
        source_samples=source.n_samples,
        target_samples=target.n_samples,
    )
    return SyntheticBundle(source, target, {**source_params, **target_params})


def generate_synthetic(config: SynthConfig) -> Tuple[Dataset, Dataset]:
    """
    Deterministically generate a (source, target) dataset pair.

    Target images additionally receive the configured domain shift. Both
    domains carry ground truth; target grades are evaluation-only.

    Raises:
        InvalidConfigError: Non-positive counts or an invalid sample range
    """
    bundle = generate_synthetic_with_params(config)
    return bundle.source, bundle.target


def write_synthetic(config: SynthConfig, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Generate and write ``source/`` and ``target/`` manifests plus synth_meta.json."""
    config = SynthConfig.parse(config)
    out_dir = Path(out_dir)
    source, target = generate_synthetic(config)

    paths = {
        "source_manifest": write_manifest(source, out_dir / Domain.SOURCE.value),
        "target_manifest": write_manifest(target, out_dir / Domain.TARGET.value),
    }
    meta_path = out_dir / SYNTH_META_FILENAME
    meta = {"config": config.model_dump(mode="json"), "seed": config.seed}
    try:
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {meta_path}: {exc}", details={"path": str(meta_path)}) from exc
    paths["synth_meta"] = meta_path
    return paths
