from __future__ import annotations

from dataclasses import dataclass
from typing import Final

import numpy as np
from scipy.ndimage import gaussian_filter1d

from autodiff.rng import RngStream
from spectra.simulator import REFLECTANCE_FLOOR, Spectrum


@dataclass(frozen=True)
class DistortionConfig:
    """Device-style distortion: polynomial gain, blur, noise and offset, applied in that order.

    ``gain`` holds polynomial coefficients in the wavelength position
    t = (lambda - lambda_min) / (lambda_max - lambda_min), lowest order first.
    ``smoothing_sigma`` is measured in grid bins.
    """

    gain: tuple[float, ...] = (1.0,)
    smoothing_sigma: float = 0.0
    noise_std: float = 0.0
    offset: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "gain", tuple(float(c) for c in self.gain))
        if not self.gain:
            raise ValueError("gain needs at least one coefficient")
        if self.smoothing_sigma < 0 or self.noise_std < 0:
            raise ValueError("smoothing_sigma and noise_std must be non-negative")

    def gain_curve(self, wavelengths: np.ndarray) -> np.ndarray:
        span = wavelengths[-1] - wavelengths[0]
        t = (wavelengths - wavelengths[0]) / span
        return np.polynomial.polynomial.polyval(t, np.array(self.gain))


DISTORTIONS: Final[dict[str, DistortionConfig]] = {
    "none": DistortionConfig(),
    "default": DistortionConfig(gain=(0.8, 0.4, -0.1), smoothing_sigma=1.5, noise_std=0.01, offset=0.02),
    "mild": DistortionConfig(gain=(0.95, 0.1), smoothing_sigma=1.0, noise_std=0.005, offset=0.005),
}


def get_distortion(distortion_id: str) -> DistortionConfig:
    try:
        return DISTORTIONS[distortion_id]
    except KeyError:
        raise ValueError(f"unknown distortion {distortion_id!r}; known: {sorted(DISTORTIONS)}") from None


def make_pseudo_real(spectrum: Spectrum, cfg: DistortionConfig, rng: RngStream) -> Spectrum:
    values = spectrum.values * cfg.gain_curve(spectrum.wavelengths)
    if cfg.smoothing_sigma > 0:
        values = gaussian_filter1d(values, cfg.smoothing_sigma, mode="nearest")
    if cfg.noise_std > 0:
        values = values + cfg.noise_std * rng.normal(values.shape)
    values = np.clip(values + cfg.offset, REFLECTANCE_FLOOR, 1.0)
    return Spectrum(values=values, wavelengths=spectrum.wavelengths)
