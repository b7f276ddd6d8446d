"""Regression dataset and input-scaling containers.

These are shared between the GP layer (which consumes them) and the
feature pipeline (which produces them), so they live in a module of
their own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSamplesError


@dataclass(frozen=True)
class Dataset:
    """Paired regression inputs and outputs.

    inputs: (N, d) float array, one row per sample.
    outputs: (N,) float array of scalar targets.
    """

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        if inputs.shape[0] != outputs.shape[0]:
            raise ValueError(
                f"inputs have {inputs.shape[0]} rows but outputs have "
                f"{outputs.shape[0]} entries"
            )
        if inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(inputs)) or not np.all(np.isfinite(outputs)):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.outputs[idx])


@dataclass(frozen=True)
class Scaling:
    """Per-dimension affine map between raw and normalized inputs.

    normalized = (raw - offset) / scale, so scale is the half-range and
    offset the mid-range of the raw data.  Dimensions that were constant
    in the data carry scale 0 and are listed in degenerate.
    """

    scale: np.ndarray
    offset: np.ndarray
    degenerate: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float).ravel()
        offset = np.asarray(self.offset, dtype=float).ravel()
        if scale.shape != offset.shape:
            raise ValueError("scale and offset must have identical shape")
        if not np.all(np.isfinite(scale)) or not np.all(np.isfinite(offset)):
            raise ValueError("scaling contains non-finite values")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "degenerate", tuple(int(i) for i in self.degenerate))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        out = np.zeros_like(raw)
        for j in range(raw.shape[1]):
            if j in self.degenerate:
                out[:, j] = 0.0
            else:
                out[:, j] = (raw[:, j] - self.offset[j]) / self.scale[j]
        return out

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        normalized = np.atleast_2d(np.asarray(normalized, dtype=float))
        out = np.array(normalized, dtype=float)
        for j in range(normalized.shape[1]):
            if j in self.degenerate:
                out[:, j] = self.offset[j]
            else:
                out[:, j] = normalized[:, j] * self.scale[j] + self.offset[j]
        return out


def normalize_inputs(dataset: Dataset) -> tuple[Dataset, Scaling]:
    """Map each input dimension affinely onto [-1, 1].

    Constant dimensions cannot be scaled; they map to 0 and are flagged
    degenerate in the returned Scaling.
    """
    x = dataset.inputs
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    scale = (hi - lo) / 2.0
    offset = (hi + lo) / 2.0
    degenerate = tuple(int(j) for j in np.nonzero(scale == 0.0)[0])
    scaling = Scaling(scale=scale, offset=offset, degenerate=degenerate)
    return Dataset(scaling.apply(x), dataset.outputs), scaling


def train_valid_split(dataset: Dataset, seed: int, train_fraction: float = 0.8):
    """Seeded shuffle then split; the train side gets ceil(f * N) samples."""
    if dataset.n < 5:
        raise TooFewSamplesError(
            f"need at least 5 samples to split, got {dataset.n}"
        )
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n)
    n_train = int(np.ceil(train_fraction * dataset.n))
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])
