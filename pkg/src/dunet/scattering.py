"""2-D Morlet scattering transform (orders 0-2) computed with FFTs.

Filters are built in the spatial domain on a periodized grid and stored as
their (real) Fourier transforms at full input resolution. All convolutions
are circular. Coefficients are low-passed by a Gaussian at scale ``2**J`` and
subsampled by ``2**J`` in each direction; the subsampling is done in the
Fourier domain by folding the spectrum.

Channel layout of the output: for input channel ``c`` and path ``p`` the
coefficient map lives at channel ``c * P + p``. Paths are ordered as
order 0, then order 1 by ``(j1, l1)``, then order 2 by ``(j1, l1, j2, l2)``
with ``j1 < j2`` only.
"""
from __future__ import annotations

import functools
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LP_TOLERANCE = 0.2
SCT_MAGIC = b"SCT1"


class ScatteringError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ScatteringConfig:
    """Scales ``J``, orientations ``L`` and maximal order of the transform.

    The Morlet shape parameters default to the usual ScatNet choices:
    envelope width ``sigma0 * 2**j``, centre frequency ``xi0 * 2**-j`` and
    ellipticity ``4 / L``.
    """

    J: int = 3
    L: int = 8
    order: int = 2
    input_size: tuple[int, int] = (256, 256)
    sigma0: float = 0.8
    xi0: float = 3 * math.pi / 4
    slant: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))

    @property
    def slant_value(self) -> float:
        return 4.0 / self.L if self.slant is None else self.slant

    @property
    def output_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h >> self.J, w >> self.J

    def validate(self) -> None:
        h, w = self.input_size
        if self.J < 1 or self.L < 1:
            raise ScatteringError(f"J and L must be >= 1, got J={self.J} L={self.L}")
        if self.order not in (0, 1, 2):
            raise ScatteringError(f"order must be 0, 1 or 2, got {self.order}")
        if not (_is_pow2(h) and _is_pow2(w)):
            raise ScatteringError(f"input size {self.input_size} must be powers of two")
        if 2 ** self.J > min(h, w):
            raise ScatteringError(f"2**J = {2 ** self.J} exceeds min input size {min(h, w)}")


def count_paths(cfg: ScatteringConfig) -> int:
    J, L = cfg.J, cfg.L
    n = 1
    if cfg.order >= 1:
        n += J * L
    if cfg.order >= 2:
        n += L * L * J * (J - 1) // 2
    return n


def path_descriptors(cfg: ScatteringConfig) -> list[tuple[int, int, int, int, int]]:
    """(order, j1, l1, j2, l2) per path, ``-1`` marking absent entries."""
    paths = [(0, -1, -1, -1, -1)]
    if cfg.order >= 1:
        paths += [(1, j, l, -1, -1) for j in range(cfg.J) for l in range(cfg.L)]
    if cfg.order >= 2:
        paths += [(2, j1, l1, j2, l2)
                  for j1 in range(cfg.J) for l1 in range(cfg.L)
                  for j2 in range(j1 + 1, cfg.J) for l2 in range(cfg.L)]
    return paths


# ---------------------------------------------------------------------------
# filters

def gabor_2d(M: int, N: int, sigma: float, theta: float, xi: float, slant: float = 1.0,
             periods: int | None = None) -> np.ndarray:
    """Spatial Gabor filter periodized onto an M x N grid (complex).

    By default enough periods are summed that the envelope has decayed
    below ~1e-10 at the edge of the summed window.
    """
    if periods is None:
        reach = 7.0 * sigma / min(slant, 1.0)
        periods = max(1, math.ceil(reach / min(M, N)))
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    D = np.diag([1.0, slant * slant])
    curv = R @ D @ R.T / (2 * sigma * sigma)
    out = np.zeros((M, N), dtype=np.complex128)
    for ex in range(-periods, periods + 1):
        for ey in range(-periods, periods + 1):
            xx, yy = np.mgrid[ex * M:(ex + 1) * M, ey * N:(ey + 1) * N].astype(np.float64)
            arg = (-(curv[0, 0] * xx * xx + (curv[0, 1] + curv[1, 0]) * xx * yy
                     + curv[1, 1] * yy * yy)
                   + 1j * (xx * xi * c + yy * xi * s))
            out += np.exp(arg)
    return out / (2 * math.pi * sigma * sigma / slant)


def morlet_2d(M: int, N: int, sigma: float, theta: float, xi: float, slant: float) -> np.ndarray:
    """Gabor minus a scaled Gaussian so the filter has zero mean."""
    wave = gabor_2d(M, N, sigma, theta, xi, slant)
    envelope = gabor_2d(M, N, sigma, theta, 0.0, slant)
    beta = wave.sum() / envelope.sum()
    return wave - beta * envelope


@dataclass
class FilterBank:
    """Fourier-domain filters at full input resolution.

    ``psi[j][l]`` are real arrays (the Morlet is Hermitian-symmetric in space,
    so its transform is real); ``phi`` is the Gaussian low-pass with
    ``phi[0, 0] == 1``.
    """

    psi: list[list[np.ndarray]]
    phi: np.ndarray
    littlewood_paley_bound: float
    config: ScatteringConfig = field(repr=False)

    def psi_stack(self, j: int) -> np.ndarray:
        return np.stack(self.psi[j])

    def littlewood_paley(self) -> np.ndarray:
        """|phi(w)|^2 + 1/2 sum_{j,l} (|psi(w)|^2 + |psi(-w)|^2) over the frequency grid."""
        total = np.abs(self.phi) ** 2
        for row in self.psi:
            for p in row:
                sq = np.abs(p) ** 2
                flipped = np.roll(sq[::-1, ::-1], 1, axis=(0, 1))  # value at -w
                total = total + 0.5 * (sq + flipped)
        return total


@functools.lru_cache(maxsize=8)
def build_filter_bank(cfg: ScatteringConfig) -> FilterBank:
    """Morlet band-pass filters for every (scale, orientation) plus the low-pass.

    Band-pass filters are rescaled by a single common factor so that their
    Littlewood-Paley sum peaks at 1; the residual excess over 1 once the
    low-pass is added is reported as ``littlewood_paley_bound``.
    """
    cfg.validate()
    M, N = cfg.input_size
    slant = cfg.slant_value
    psi = []
    for j in range(cfg.J):
        row = []
        for l in range(cfg.L):
            theta = math.pi * l / cfg.L
            spatial = morlet_2d(M, N, cfg.sigma0 * 2 ** j, theta, cfg.xi0 / 2 ** j, slant)
            hat = np.real(np.fft.fft2(spatial))
            hat[0, 0] = 0.0
            row.append(hat)
        psi.append(row)
    phi = np.real(np.fft.fft2(gabor_2d(M, N, cfg.sigma0 * 2 ** cfg.J, 0.0, 0.0, 1.0)))
    phi /= phi[0, 0]

    band = FilterBank(psi, np.zeros_like(phi), 0.0, cfg).littlewood_paley()
    scale = 1.0 / math.sqrt(band.max())
    psi = [[p * scale for p in row] for row in psi]
    fb = FilterBank(psi, phi, 0.0, cfg)
    fb.littlewood_paley_bound = max(0.0, float(fb.littlewood_paley().max()) - 1.0)
    if fb.littlewood_paley_bound > LP_TOLERANCE:
        raise ScatteringError(
            f"filter bank violates Littlewood-Paley: excess {fb.littlewood_paley_bound:.3f}")
    return fb


# ---------------------------------------------------------------------------
# transform

@dataclass
class ScatteringOutput:
    coeffs: np.ndarray  # (1, P * C, H / 2**J, W / 2**J), float32
    paths: list[tuple[int, int, int, int, int]]


def _lowpass_sub(hat: np.ndarray, phi: np.ndarray, k: int) -> np.ndarray:
    """(x * phi) subsampled by k, from the spectrum of x; returns real maps."""
    M, N = phi.shape
    y = hat * phi
    y = y.reshape(*y.shape[:-2], k, M // k, k, N // k).mean(axis=(-4, -2))
    return np.fft.ifft2(y).real


def _scatter_channel(x: np.ndarray, fb: FilterBank, cfg: ScatteringConfig) -> np.ndarray:
    k = 2 ** cfg.J
    X = np.fft.fft2(x)
    out = [_lowpass_sub(X, fb.phi, k)[None]]
    if cfg.order >= 1:
        u1_hat = []
        for j1 in range(cfg.J):
            u1 = np.abs(np.fft.ifft2(X[None] * fb.psi_stack(j1)))
            u1_hat.append(np.fft.fft2(u1))
        out += [_lowpass_sub(uh, fb.phi, k) for uh in u1_hat]
    if cfg.order >= 2:
        for j1 in range(cfg.J):
            if j1 + 1 >= cfg.J:
                continue
            later = np.concatenate([fb.psi_stack(j2) for j2 in range(j1 + 1, cfg.J)])
            for l1 in range(cfg.L):
                u2 = np.abs(np.fft.ifft2(u1_hat[j1][l1][None] * later))
                out.append(_lowpass_sub(np.fft.fft2(u2), fb.phi, k))
    return np.concatenate(out, axis=0)


def _as_chw(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return arr
    if arr.ndim == 4 and arr.shape[0] == 1:
        return arr[0]
    raise ScatteringError(f"expected a single image (H,W), (C,H,W) or (1,C,H,W), got {arr.shape}")


def scattering_transform(x, fb: FilterBank, cfg: ScatteringConfig | None = None) -> ScatteringOutput:
    """Scattering coefficients of one image, each input channel independently."""
    cfg = cfg or fb.config
    img = _as_chw(x)
    if img.shape[1:] != tuple(cfg.input_size):
        raise ScatteringError(f"image size {img.shape[1:]} != configured {cfg.input_size}")
    if fb.phi.shape != tuple(cfg.input_size):
        raise ScatteringError(f"filter bank built for {fb.phi.shape}, config says {cfg.input_size}")
    maps = [_scatter_channel(img[c], fb, cfg) for c in range(img.shape[0])]
    coeffs = np.concatenate(maps, axis=0)[None].astype(np.float32)
    return ScatteringOutput(coeffs, path_descriptors(cfg))


def scatter_batch(images, fb: FilterBank, cfg: ScatteringConfig | None = None) -> np.ndarray:
    """(N, C, H, W) -> (N, P*C, H/2**J, W/2**J)."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ScatteringError(f"scatter_batch expects (N,C,H,W), got {images.shape}")
    return np.concatenate([scattering_transform(im, fb, cfg).coeffs for im in images], axis=0)


# ---------------------------------------------------------------------------
# SCT1 coefficient dumps
#
# b"SCT1" | u32 rank | rank x u32 extent | extent[1] x 5 x i32 path descriptor
# (one row per channel) | f32 LE payload, row-major.

def dumps_sct(coeffs: np.ndarray, paths: list[tuple[int, ...]]) -> bytes:
    coeffs = np.asarray(coeffs, dtype="<f4")
    if coeffs.ndim != 4:
        raise ScatteringError(f"coefficients must be 4-D, got {coeffs.shape}")
    channels = coeffs.shape[1]
    if channels % len(paths):
        raise ScatteringError(f"{channels} channels is not a multiple of {len(paths)} paths")
    table = np.asarray(paths * (channels // len(paths)), dtype="<i4")
    buf = io.BytesIO()
    buf.write(SCT_MAGIC)
    buf.write(struct.pack("<I", coeffs.ndim))
    buf.write(struct.pack(f"<{coeffs.ndim}I", *coeffs.shape))
    buf.write(table.tobytes())
    buf.write(np.ascontiguousarray(coeffs).tobytes())
    return buf.getvalue()


def loads_sct(data: bytes) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    if data[:4] != SCT_MAGIC:
        raise ScatteringError("bad magic: not an SCT1 file")
    (rank,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    pos = 8 + 4 * rank
    channels = shape[1] if rank > 1 else 1
    table = np.frombuffer(data, dtype="<i4", count=5 * channels, offset=pos).reshape(channels, 5)
    pos += table.nbytes
    count = int(np.prod(shape))
    if len(data) - pos != 4 * count:
        raise ScatteringError(f"payload has {len(data) - pos} bytes, expected {4 * count}")
    coeffs = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
    return coeffs.astype(np.float32), [tuple(int(v) for v in row) for row in table]


def save_sct(path: str | os.PathLike, out: ScatteringOutput) -> Path:
    path = Path(path)
    path.write_bytes(dumps_sct(out.coeffs, out.paths))
    return path


def load_sct(path: str | os.PathLike) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    return loads_sct(Path(path).read_bytes())
