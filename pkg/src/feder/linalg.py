"""Dense 2-D / 4-D weight containers, their singular spectra, and unfolding.

Convolution kernels live in :class:`Tensor4` with index order
(k1, k2, n3, n4): kernel rows, kernel columns, input channels, output
channels, stored k1-major. Spectral metrics operate on the 2-D
:class:`Matrix` obtained by unfolding along one of the four modes.
"""
from __future__ import annotations

import numpy as np

# Desk-scale guard: spectra are only needed for small weight matrices.
SVD_MAX_MIN_DIM = 512
# Singular values below this fraction of sigma_max are finite-precision
# noise and snap to exact zero so entropy never measures rounding dust.
SPECTRUM_CLAMP_REL = 1e-12


class MatrixTooLargeError(ValueError):
    """min(rows, cols) exceeds the supported SVD size."""


def _finite_array(values, ndim: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} entries must be finite")
    arr.flags.writeable = False
    return arr


class Matrix:
    """Real matrix with finite entries, row-major storage."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _finite_array(data, 2, "matrix")

    @classmethod
    def from_flat(cls, rows: int, cols: int, values) -> "Matrix":
        return cls(np.reshape(np.asarray(values, dtype=np.float64), (rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Entries flattened row-major."""
        return self.data.reshape(-1)

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


class Tensor4:
    """4-D convolution weight, index order (k1, k2, n3, n4), k1-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _finite_array(data, 4, "tensor")

    @classmethod
    def from_flat(cls, k1: int, k2: int, n3: int, n4: int, values) -> "Tensor4":
        return cls(np.reshape(np.asarray(values, dtype=np.float64), (k1, k2, n3, n4)))

    @property
    def k1(self) -> int:
        return self.data.shape[0]

    @property
    def k2(self) -> int:
        return self.data.shape[1]

    @property
    def n3(self) -> int:
        return self.data.shape[2]

    @property
    def n4(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self):
        return f"Tensor4{self.dims}"


class SingularSpectrum:
    """Singular values sorted descending, all non-negative and finite."""

    __slots__ = ("sigma",)

    def __init__(self, sigma):
        arr = np.array(sigma, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("spectrum must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise ValueError("singular values must be finite")
        if np.any(arr < 0):
            raise ValueError("singular values must be non-negative")
        if np.any(np.diff(arr) > 0):
            raise ValueError("singular values must be sorted descending")
        arr.flags.writeable = False
        self.sigma = arr

    def __len__(self):
        return self.sigma.size

    def __repr__(self):
        return f"SingularSpectrum({np.array2string(self.sigma, precision=4)})"


def unfold(t: Tensor4, mode: int) -> Matrix:
    """Mode-``mode`` unfolding of a 4-D tensor.

    Rows follow the selected dimension; columns sweep the remaining three
    dimensions in ascending dimension order, first dimension slowest. Every
    tensor element appears exactly once and :func:`refold` is the exact
    inverse.
    """
    if mode not in (1, 2, 3, 4):
        raise ValueError(f"mode must be one of 1..4, got {mode}")
    moved = np.moveaxis(t.data, mode - 1, 0)
    return Matrix(moved.reshape(moved.shape[0], -1))


def refold(m: Matrix, dims: tuple[int, int, int, int], mode: int) -> Tensor4:
    """Inverse of :func:`unfold`; bit-exact."""
    if mode not in (1, 2, 3, 4):
        raise ValueError(f"mode must be one of 1..4, got {mode}")
    rest = [d for i, d in enumerate(dims) if i != mode - 1]
    stacked = m.data.reshape(dims[mode - 1], *rest)
    return Tensor4(np.moveaxis(stacked, 0, mode - 1))


def svd_values(m: Matrix) -> SingularSpectrum:
    """All min(rows, cols) singular values of ``m``, descending.

    Energy identity: sum(sigma_i^2) equals the squared Frobenius norm to
    high relative accuracy. Values below ``SPECTRUM_CLAMP_REL`` times the
    largest are clamped to exact zero.
    """
    small = min(m.rows, m.cols)
    if small > SVD_MAX_MIN_DIM:
        raise MatrixTooLargeError(
            f"min(rows, cols) = {small} exceeds the supported bound {SVD_MAX_MIN_DIM}")
    s = np.linalg.svd(m.data, compute_uv=False)
    if s[0] > 0:
        s[s < s[0] * SPECTRUM_CLAMP_REL] = 0.0
    return SingularSpectrum(s)


def frobenius_norm(m: Matrix) -> float:
    """sqrt of the sum of squared entries."""
    return float(np.linalg.norm(m.data))
