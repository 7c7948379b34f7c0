"""Spectral dataset container and its CSV format.

One row per spectrum::

    class,domain,w500,w507.9365079365079,...,w1000
    2,sim,0.41,0.39,...

An empty ``class`` field marks an unlabeled row. Values are written with 17
significant digits, so a save/load round trip is lossless. Free-form
metadata (seed, distortion id, filter threshold, ...) lives in a JSON
sidecar next to the CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Final

import numpy as np
import numpy.typing as npt

DOMAIN_TAGS: Final[tuple[str, ...]] = ("sim", "pseudo-real", "transferred")
FIXED_COLUMNS: Final[tuple[str, ...]] = ("class", "domain")


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the line and column."""


@dataclass
class SpectralDataset:
    spectra: npt.NDArray[np.float64]
    wavelengths: npt.NDArray[np.float64]
    domain: str
    labels: npt.NDArray[np.int64] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.spectra = np.asarray(self.spectra, dtype=np.float64)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.domain not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain tag {self.domain!r}; expected one of {DOMAIN_TAGS}")
        if self.spectra.ndim != 2 or self.spectra.shape[1] != self.wavelengths.size:
            raise ValueError(f"spectra {self.spectra.shape} do not match {self.wavelengths.size} wavelengths")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.spectra.shape[0],):
                raise ValueError(f"{self.spectra.shape[0]} spectra but labels of shape {self.labels.shape}")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("class ids must be non-negative")

    def __len__(self) -> int:
        return int(self.spectra.shape[0])

    @property
    def n_wavelengths(self) -> int:
        return int(self.wavelengths.size)

    @property
    def n_classes(self) -> int:
        if "n_classes" in self.metadata:
            return int(self.metadata["n_classes"])
        return 0 if self.labels is None or not self.labels.size else int(self.labels.max()) + 1

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def require_labels(self) -> npt.NDArray[np.int64]:
        if self.labels is None:
            raise ValueError(f"{self.domain} dataset has no class labels")
        return self.labels

    def subset(self, rows: npt.NDArray[np.int64] | npt.NDArray[np.bool_]) -> SpectralDataset:
        labels = None if self.labels is None else self.labels[rows]
        return replace(self, spectra=self.spectra[rows], labels=labels, metadata=dict(self.metadata))

    def without_labels(self) -> SpectralDataset:
        return replace(self, labels=None, metadata=dict(self.metadata))

    def model_input(self) -> npt.NDArray[np.float64]:
        """Spectra shaped (N, 1, L) for the flow model."""
        return self.spectra[:, None, :]

    def same_grid(self, other: SpectralDataset) -> bool:
        return self.wavelengths.shape == other.wavelengths.shape and bool(
            np.array_equal(self.wavelengths, other.wavelengths)
        )


def metadata_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _wavelength_column(wavelength: float) -> str:
    return f"w{wavelength:.17g}"


def save_dataset(dataset: SpectralDataset, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join([*FIXED_COLUMNS, *(_wavelength_column(w) for w in dataset.wavelengths)])
    lines = [header]
    labels = dataset.labels
    for index, row in enumerate(dataset.spectra):
        label = "" if labels is None else str(int(labels[index]))
        lines.append(",".join([label, dataset.domain, *(f"{v:.17g}" for v in row)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    metadata_path(path).write_text(json.dumps(dataset.metadata, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _parse_header(header: str, path: Path) -> npt.NDArray[np.float64]:
    columns = header.split(",")
    for position, name in enumerate(FIXED_COLUMNS):
        if position >= len(columns) or columns[position] != name:
            raise DatasetFormatError(f"{path}:1: missing column {name!r}")
    wavelengths = []
    for name in columns[len(FIXED_COLUMNS):]:
        try:
            if not name.startswith("w"):
                raise ValueError(name)
            wavelengths.append(float(name[1:]))
        except ValueError:
            raise DatasetFormatError(f"{path}:1: bad wavelength column {name!r}") from None
    if not wavelengths:
        raise DatasetFormatError(f"{path}:1: no wavelength columns")
    return np.array(wavelengths)


def load_dataset(path: Path) -> SpectralDataset:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file")
    wavelengths = _parse_header(lines[0], path)
    width = len(FIXED_COLUMNS) + wavelengths.size

    label_fields: list[str] = []
    domains: set[str] = set()
    values: list[list[str]] = []
    line_numbers: list[int] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(f"{path}:{line_no}: expected {width} columns, got {len(parts)}")
        line_numbers.append(line_no)
        label_fields.append(parts[0])
        domains.add(parts[1])
        values.append(parts[len(FIXED_COLUMNS):])

    try:
        spectra = np.array(values, dtype=np.float64).reshape(len(values), wavelengths.size)
    except ValueError:
        for line_no, parts in zip(line_numbers, values):
            for column, raw in enumerate(parts):
                try:
                    float(raw)
                except ValueError:
                    name = _wavelength_column(wavelengths[column])
                    raise DatasetFormatError(f"{path}:{line_no}: column {name}: bad value {raw!r}") from None
        raise

    if len(domains) > 1:
        raise DatasetFormatError(f"{path}: mixed domain tags {sorted(domains)}")
    domain = domains.pop() if domains else "sim"
    labels: npt.NDArray[np.int64] | None
    if all(field_ == "" for field_ in label_fields):
        labels = None
    else:
        try:
            labels = np.array([int(field_) for field_ in label_fields], dtype=np.int64)
        except ValueError:
            bad = next(i for i, f in enumerate(label_fields) if not f.lstrip("-").isdigit())
            raise DatasetFormatError(f"{path}:{line_numbers[bad]}: column class: bad value {label_fields[bad]!r}") from None

    meta_file = metadata_path(path)
    metadata = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    try:
        return SpectralDataset(spectra=spectra, wavelengths=wavelengths, domain=domain, labels=labels, metadata=metadata)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def save_labels(labels: npt.NDArray[np.int64], path: Path) -> Path:
    """Single ``class`` column; holds the hidden labels of an unlabeled split."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("class\n" + "".join(f"{int(v)}\n" for v in labels), encoding="utf-8")
    return path


def load_labels(path: Path) -> npt.NDArray[np.int64]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read labels {path}: {exc}") from exc
    if not lines or lines[0] != "class":
        raise DatasetFormatError(f"{path}:1: missing column 'class'")
    values = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            values.append(int(line))
        except ValueError:
            raise DatasetFormatError(f"{path}:{line_no}: column class: bad value {line!r}") from None
    return np.array(values, dtype=np.int64)
