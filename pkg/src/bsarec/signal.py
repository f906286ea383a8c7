"""Spectral decompositions, the frequency rescaler, padding and the scaled-DC metric.

Every function here is pure and works on one real channel (1-D array). The
model applies the same low-pass operator to all hidden channels at once via
:func:`low_pass_operator`, which materialises the linear map ``x -> LFC_c(x)``
as a ``d x d`` matrix.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Hashable, Sequence

import numpy as np

PAD_ID = 0
MAX_DEFAULT_WAVELET_LEVELS = 3


class SignalError(ValueError):
    """Invalid input or parameter for a signal operation."""


class _ParsableEnum(enum.Enum):
    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if member.value == key:
                return member
        choices = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown {cls.__name__} {value!r}; expected one of {choices}")

    def __str__(self) -> str:
        return self.value


class PaddingMode(_ParsableEnum):
    ZERO = "zero"
    CYCLIC = "cyclic"
    REFLECT = "reflect"
    SYMMETRIC = "symmetric"


class SpectralBackend(_ParsableEnum):
    FOURIER = "fourier"
    WAVELET = "wavelet"
    RESIDUAL = "residual"


def _as_real_sequence(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise SignalError(f"expected a non-empty 1-D sequence, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SignalError("sequence contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Fourier


@dataclass(frozen=True)
class HalfSpectrum:
    """Bins ``0..d//2`` of the unitary DFT of a real sequence of length ``d``."""

    bins: np.ndarray
    original_length: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        expected = self.original_length // 2 + 1
        if self.original_length < 1 or bins.shape != (expected,):
            raise SignalError(
                f"half spectrum of a length-{self.original_length} signal needs "
                f"{expected} bins, got shape {bins.shape}"
            )
        object.__setattr__(self, "bins", bins)

    def full(self) -> np.ndarray:
        """The full Hermitian spectrum of length ``d``."""
        d = self.original_length
        mirrored = np.conj(self.bins[1 : d - d // 2][::-1])
        return np.concatenate([self.bins, mirrored])


@lru_cache(maxsize=64)
def _dft_matrix(d: int) -> np.ndarray:
    n = np.arange(d)
    # exact integer phase reduction keeps the angles small for large d
    phase = (np.outer(n, n) % d) / d
    return np.exp(-2j * np.pi * phase) / math.sqrt(d)


def forward_dft(x) -> HalfSpectrum:
    """Unitary DFT restricted to the Hermitian half (direct O(d^2) evaluation)."""
    arr = _as_real_sequence(x)
    d = arr.size
    bins = _dft_matrix(d)[: d // 2 + 1] @ arr
    bins[0] = bins[0].real
    if d % 2 == 0:
        bins[-1] = bins[-1].real
    return HalfSpectrum(bins, d)


def inverse_dft(spectrum: HalfSpectrum, atol: float = 1e-12) -> np.ndarray:
    bins = spectrum.bins
    d = spectrum.original_length
    if abs(bins[0].imag) > atol:
        raise SignalError("DC bin must be real")
    if d % 2 == 0 and abs(bins[-1].imag) > atol:
        raise SignalError("Nyquist bin must be real for even lengths")
    full = spectrum.full()
    return (np.conj(_dft_matrix(d)) @ full).real


# ---------------------------------------------------------------------------
# Haar wavelet


@dataclass(frozen=True)
class WaveletDecomposition:
    """Multi-level Haar coefficients.

    ``details`` is ordered coarse to fine. ``lengths[k]`` is the (unextended)
    input length at analysis level ``k`` counted from the finest, so
    ``lengths[0] == original_length``.
    """

    approximation: np.ndarray
    details: tuple
    lengths: tuple

    @property
    def levels(self) -> int:
        return len(self.details)

    @property
    def original_length(self) -> int:
        return self.lengths[0]

    def coefficients(self) -> np.ndarray:
        """Flat coefficient vector ordered approximation, then details coarse to fine."""
        return np.concatenate([self.approximation, *self.details])

    def with_coefficients(self, flat) -> "WaveletDecomposition":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.coefficients().size:
            raise SignalError("coefficient count does not match decomposition")
        out = []
        start = 0
        for part in (self.approximation, *self.details):
            out.append(flat[start : start + part.size].copy())
            start += part.size
        return WaveletDecomposition(out[0], tuple(out[1:]), self.lengths)


def max_haar_levels(d: int) -> int:
    """Deepest analysis where every level still sees at least two samples."""
    levels = 0
    while d >= 2:
        d = (d + 1) // 2
        levels += 1
    return levels


def default_wavelet_levels(max_len: int) -> int:
    return max(1, min(int(math.log2(max_len)), MAX_DEFAULT_WAVELET_LEVELS, max_haar_levels(max_len)))


def haar_analysis(x, levels: int) -> WaveletDecomposition:
    arr = _as_real_sequence(x)
    if levels < 1 or levels > max_haar_levels(arr.size):
        raise SignalError(
            f"{levels} Haar levels invalid for length {arr.size} "
            f"(allowed 1..{max_haar_levels(arr.size)})"
        )
    s = 1.0 / math.sqrt(2.0)
    approx = arr
    details = []
    lengths = []
    for _ in range(levels):
        lengths.append(approx.size)
        if approx.size % 2:
            approx = np.append(approx, approx[-1])
        even, odd = approx[0::2], approx[1::2]
        details.append((even - odd) * s)
        approx = (even + odd) * s
    return WaveletDecomposition(approx, tuple(reversed(details)), tuple(lengths))


def haar_synthesis(w: WaveletDecomposition) -> np.ndarray:
    s = 1.0 / math.sqrt(2.0)
    approx = np.asarray(w.approximation, dtype=np.float64)
    if len(w.lengths) != w.levels:
        raise SignalError("lengths and details disagree on the number of levels")
    for detail, length in zip(w.details, reversed(w.lengths)):
        detail = np.asarray(detail, dtype=np.float64)
        if detail.size != approx.size or detail.size != (length + 1) // 2:
            raise SignalError(
                f"inconsistent coefficient lengths: approx {approx.size}, "
                f"detail {detail.size}, level input {length}"
            )
        out = np.empty(2 * approx.size)
        out[0::2] = (approx + detail) * s
        out[1::2] = (approx - detail) * s
        approx = out[:length]
    return approx


# ---------------------------------------------------------------------------
# Band split and rescaling


def cutoff_range(d: int, backend, levels: int | None = None) -> tuple[int, int | None]:
    """Inclusive valid cutoff range; ``None`` upper bound means unbounded."""
    backend = SpectralBackend.parse(backend)
    if backend is SpectralBackend.FOURIER:
        return 1, d // 2 + 1
    if backend is SpectralBackend.WAVELET:
        levels = default_wavelet_levels(d) if levels is None else levels
        zeros = haar_analysis(np.zeros(d), levels)
        return 1, zeros.coefficients().size
    return 1, None


def _check_cutoff(d: int, c: int, backend, levels) -> None:
    low, high = cutoff_range(d, backend, levels)
    if c < low or (high is not None and c > high):
        raise SignalError(f"cutoff {c} outside [{low}, {high}] for {backend} at length {d}")


def low_freq_component(x, c: int, backend=SpectralBackend.FOURIER, levels: int | None = None) -> np.ndarray:
    arr = _as_real_sequence(x)
    backend = SpectralBackend.parse(backend)
    _check_cutoff(arr.size, c, backend, levels)
    if backend is SpectralBackend.RESIDUAL:
        return arr.copy()
    if backend is SpectralBackend.FOURIER:
        spec = forward_dft(arr)
        bins = spec.bins.copy()
        bins[c:] = 0
        return inverse_dft(HalfSpectrum(bins, arr.size))
    levels = default_wavelet_levels(arr.size) if levels is None else levels
    w = haar_analysis(arr, levels)
    flat = w.coefficients()
    flat[c:] = 0.0
    return haar_synthesis(w.with_coefficients(flat))


def high_freq_component(x, c: int, backend=SpectralBackend.FOURIER, levels: int | None = None) -> np.ndarray:
    arr = _as_real_sequence(x)
    return arr - low_freq_component(arr, c, backend, levels)


def rescale(x, c: int, beta: float, backend=SpectralBackend.FOURIER, levels: int | None = None) -> np.ndarray:
    """Low band plus ``beta`` times the high band."""
    if beta < 0:
        raise SignalError(f"beta must be nonnegative, got {beta}")
    arr = _as_real_sequence(x)
    low = low_freq_component(arr, c, backend, levels)
    return low + beta * (arr - low)


@lru_cache(maxsize=128)
def _low_pass_operator(d: int, c: int, backend: SpectralBackend, levels: int | None) -> np.ndarray:
    eye = np.eye(d)
    cols = [low_freq_component(eye[j], c, backend, levels) for j in range(d)]
    op = np.stack(cols, axis=1)
    op.setflags(write=False)
    return op


def low_pass_operator(d: int, c: int, backend=SpectralBackend.FOURIER, levels: int | None = None) -> np.ndarray:
    """Matrix ``P`` with ``P @ x == low_freq_component(x, c, backend)`` (read-only)."""
    backend = SpectralBackend.parse(backend)
    _check_cutoff(d, c, backend, levels)
    return _low_pass_operator(d, c, backend, levels)


# ---------------------------------------------------------------------------
# Padding


def pad_history(seq: Sequence[int], target_len: int, mode=PaddingMode.ZERO, pad_id: int = PAD_ID) -> list[int]:
    """Left-pad ``seq`` to ``target_len``.

    Mirror and wrap modes index real items; only ``ZERO`` emits ``pad_id``.
    The caller is responsible for truncating histories longer than
    ``target_len``.
    """
    mode = PaddingMode.parse(mode)
    seq = list(seq)
    if len(seq) > target_len:
        raise SignalError(f"history of length {len(seq)} exceeds window {target_len}; truncate first")
    n_pad = target_len - len(seq)
    if n_pad == 0:
        return seq
    if not seq and mode is not PaddingMode.ZERO:
        warnings.warn(f"{mode} padding of an empty history falls back to zero padding", stacklevel=2)
        mode = PaddingMode.ZERO
    if mode is PaddingMode.ZERO:
        return [pad_id] * n_pad + seq
    np_mode = {PaddingMode.CYCLIC: "wrap", PaddingMode.REFLECT: "reflect", PaddingMode.SYMMETRIC: "symmetric"}[mode]
    return np.pad(np.asarray(seq), (n_pad, 0), mode=np_mode).tolist()


# ---------------------------------------------------------------------------
# User-history frequency


@dataclass(frozen=True)
class DenseCategoryVector:
    values: tuple
    unique_count: int


def dense_category_encoding(categories: Sequence[Hashable]) -> DenseCategoryVector:
    """Number categories 1..m by order of first appearance."""
    if len(categories) == 0:
        raise SignalError("category sequence is empty")
    codes: dict = {}
    values = tuple(codes.setdefault(cat, len(codes) + 1) for cat in categories)
    return DenseCategoryVector(values, len(codes))


def scaled_dc_component(d_u) -> float:
    """One minus the cosine similarity between ``d_u`` and the all-ones vector."""
    if isinstance(d_u, DenseCategoryVector):
        d_u = d_u.values
    arr = _as_real_sequence(d_u)
    if np.any(arr <= 0):
        raise SignalError("dense category values must be positive")
    dc = arr.sum() / math.sqrt(arr.size)
    value = 1.0 - dc / float(np.linalg.norm(arr))
    # cosine of a constant vector can land a few ulps above 1
    return max(value, 0.0)
