"""Analytic layered-tissue reflectance model.

Stands in for Monte Carlo photon transport: each layer attenuates light by
its diffusion-theory effective attenuation, and a scattering-only baseline
sets the overall level. Reflectance never increases with blood volume.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Final

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]

EXTINCTION_PATH: Final[Path] = Path(__file__).parent / "data" / "hemoglobin_extinction.csv"
# ln(10) * 150 g/L hemoglobin in whole blood / 64500 g/mol, turning molar
# extinction (cm^-1 / M) into absorption of pure blood (cm^-1).
EXTINCTION_TO_MUA: Final[float] = 2.303 * 150.0 / 64500.0
REFLECTANCE_FLOOR: Final[float] = 1e-6
DEFAULT_WAVELENGTHS: Final[int] = 64
MAX_LAYERS: Final[int] = 3

# Sampling ranges of one tissue layer. g and n are validated but the
# analytic kernel does not use them.
PARAM_RANGES: Final[dict[str, tuple[float, float]]] = {
    "v_hb": (0.0, 0.30),
    "so2": (0.0, 1.0),
    "a_mie": (5.0, 50.0),
    "b_mie": (0.3, 3.0),
    "d": (0.002, 0.2),
    "g": (0.80, 0.95),
    "n": (1.33, 1.54),
}


def wavelength_grid(n: int = DEFAULT_WAVELENGTHS, start: float = 500.0, stop: float = 1000.0) -> Array:
    if n < 2 or not stop > start:
        raise ValueError(f"grid needs n >= 2 and stop > start, got n={n} [{start}, {stop}]")
    return np.linspace(start, stop, n)


@lru_cache(maxsize=1)
def _extinction_table() -> tuple[Array, Array, Array]:
    lines = [
        line.strip()
        for line in EXTINCTION_PATH.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if lines[0] != "wavelength_nm,hbo2,hb":
        raise ValueError(f"{EXTINCTION_PATH}: unexpected header {lines[0]!r}")
    table = np.loadtxt(lines[1:], delimiter=",")
    return table[:, 0], table[:, 1], table[:, 2]


def extinction(wavelengths: Array) -> tuple[Array, Array]:
    """Molar extinction (HbO2, Hb) linearly interpolated onto ``wavelengths``."""
    grid, hbo2, hb = _extinction_table()
    if wavelengths.min() < grid[0] or wavelengths.max() > grid[-1]:
        raise ValueError(f"wavelengths must lie in [{grid[0]}, {grid[-1]}] nm")
    return np.interp(wavelengths, grid, hbo2), np.interp(wavelengths, grid, hb)


@dataclass(frozen=True)
class LayerParams:
    v_hb: float
    so2: float
    a_mie: float
    b_mie: float
    d: float
    g: float = 0.9
    n: float = 1.38

    def __post_init__(self) -> None:
        for item in fields(self):
            low, high = PARAM_RANGES[item.name]
            value = getattr(self, item.name)
            if not low <= value <= high:
                raise ValueError(f"{item.name}={value} outside [{low}, {high}]")


@dataclass(frozen=True)
class TissueParams:
    layers: tuple[LayerParams, ...]
    class_id: int = 0

    def __post_init__(self) -> None:
        if not 1 <= len(self.layers) <= MAX_LAYERS:
            raise ValueError(f"tissue needs 1..{MAX_LAYERS} layers, got {len(self.layers)}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class Spectrum:
    values: Array
    wavelengths: Array

    def __post_init__(self) -> None:
        if self.values.shape != self.wavelengths.shape or self.values.ndim != 1:
            raise ValueError(f"values {self.values.shape} and grid {self.wavelengths.shape} must match")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise ValueError("wavelength grid must be strictly increasing")


def absorption(layer: LayerParams, eps_hbo2: Array, eps_hb: Array) -> Array:
    return layer.v_hb * (layer.so2 * eps_hbo2 + (1.0 - layer.so2) * eps_hb) * EXTINCTION_TO_MUA


def reduced_scattering(layer: LayerParams, wavelengths: Array) -> Array:
    return layer.a_mie * (wavelengths / 500.0) ** (-layer.b_mie)


def simulate_spectrum(params: TissueParams, wavelengths: Array) -> Spectrum:
    eps_hbo2, eps_hb = extinction(wavelengths)
    thickness = np.array([layer.d for layer in params.layers])
    mus_layers = np.stack([reduced_scattering(layer, wavelengths) for layer in params.layers])
    mus_mean = (thickness[:, None] * mus_layers).sum(axis=0) / thickness.sum()
    # scattering-only baseline in (0, 0.9)
    reflectance = 0.9 * mus_mean / (mus_mean + 10.0)
    for layer, mus in zip(params.layers, mus_layers):
        mua = absorption(layer, eps_hbo2, eps_hb)
        mu_eff = np.sqrt(3.0 * mua * (mua + mus))
        reflectance = reflectance * np.exp(-layer.d * mu_eff)
    return Spectrum(values=np.clip(reflectance, REFLECTANCE_FLOOR, 1.0), wavelengths=wavelengths)
