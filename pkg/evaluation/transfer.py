from __future__ import annotations

import numpy as np
import numpy.typing as npt

from autodiff.tensor import ShapeError, Tensor
from flows.conditions import DOMAIN_REAL, DOMAIN_SIM
from flows.model import FlowModel
from spectra.dataset import SpectralDataset

Array = npt.NDArray[np.float64]


def transfer_between(
    model: FlowModel,
    x: Array,
    tissue: npt.NDArray[np.int64],
    source: int,
    target: int,
    *,
    batch_size: int = 2048,
) -> Array:
    """decode(encode(x, source, tissue), target, tissue), in batches, outside any graph."""
    if x.shape[1:] != model.spec.input_shape:
        raise ShapeError(f"model expects samples of shape {model.spec.input_shape}, got {x.shape[1:]}")
    if len(tissue) != len(x):
        raise ShapeError(f"{len(x)} samples but {len(tissue)} tissue labels")
    out = np.empty_like(x, dtype=np.float64)
    for start in range(0, len(x), batch_size):
        rows = slice(start, start + batch_size)
        out[rows] = model.transfer(Tensor(x[rows]), tissue[rows], source, target).numpy()
    return out


def transfer_sim_to_real(model: FlowModel, x_sim: Array, y_sim: npt.NDArray[np.int64], **kwargs: int) -> Array:
    return transfer_between(model, x_sim, y_sim, DOMAIN_SIM, DOMAIN_REAL, **kwargs)


def transfer_real_to_sim(model: FlowModel, x_real: Array, y: npt.NDArray[np.int64], **kwargs: int) -> Array:
    return transfer_between(model, x_real, y, DOMAIN_REAL, DOMAIN_SIM, **kwargs)


def transfer_dataset(model: FlowModel, sim: SpectralDataset) -> SpectralDataset:
    """Sim-to-real transfer of a labeled spectral dataset; labels are kept, the domain becomes "transferred"."""
    if model.spec.input_shape != (1, sim.n_wavelengths):
        raise ShapeError(
            f"model input {model.spec.input_shape} does not fit spectra with {sim.n_wavelengths} wavelengths"
        )
    labels = sim.require_labels()
    transferred = transfer_sim_to_real(model, sim.model_input(), labels)
    metadata = dict(sim.metadata)
    metadata["source_domain"] = sim.domain
    return SpectralDataset(
        spectra=transferred[:, 0, :],
        wavelengths=sim.wavelengths,
        domain="transferred",
        labels=labels.copy(),
        metadata=metadata,
    )
