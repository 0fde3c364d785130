"""Seeded fractal height profiles for the planar world."""

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


TABLE_SIZE = 256


@dataclass(frozen=True)
class TerrainParams:
    octaves: int = 2
    lacunarity: float = 2.0
    gain: float = 0.25
    z_scale: float = 0.27
    wavelength: float = 4.0   # metres per lattice cell of the base octave

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")


@dataclass(frozen=True)
class TerrainProfile:
    seed: int
    params: TerrainParams
    resolution: float
    origin: float
    heights: np.ndarray
    scale: float
    tables: tuple = field(repr=False, compare=False)

    @property
    def xs(self):
        return self.origin + self.resolution * np.arange(len(self.heights))

    @property
    def end(self):
        return self.origin + self.resolution * (len(self.heights) - 1)

    @property
    def flat(self):
        return self.scale == 0.0

    def height_at(self, x):
        """Terrain height at a single x; beyond the sampled span the noise is evaluated directly."""
        if self.scale == 0.0:
            return 0.0
        if self.origin <= x <= self.end:
            return float(np.interp(x, self.xs, self.heights))
        raw = _fractal(np.array([x]), self.params, self.tables)[0] * self.scale
        z = self.params.z_scale
        return min(max(raw, -z), z)

    def heights_at(self, xs):
        return np.array([self.height_at(float(x)) for x in np.atleast_1d(xs)])

    def to_frame(self):
        return pd.DataFrame({"x": self.xs, "height": self.heights})

    def export_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.9g")
        return path


def _lattice_tables(seed, octaves):
    tables = []
    for octave in range(octaves):
        rng = np.random.default_rng([seed, octave])
        permutation = rng.permutation(TABLE_SIZE)
        values = rng.uniform(-1.0, 1.0, TABLE_SIZE)
        tables.append((np.concatenate([permutation, permutation]), values))
    return tuple(tables)


def _value_noise(u, table):
    permutation, values = table
    cell = np.floor(u)
    t = u - cell
    i = cell.astype(np.int64)
    p = [values[permutation[(i + k) & (TABLE_SIZE - 1)]] for k in (-1, 0, 1, 2)]
    # Catmull-Rom through the four surrounding lattice values
    return 0.5 * (2.0 * p[1]
                  + (p[2] - p[0]) * t
                  + (2.0 * p[0] - 5.0 * p[1] + 4.0 * p[2] - p[3]) * t * t
                  + (3.0 * p[1] - p[0] - 3.0 * p[2] + p[3]) * t * t * t)


def _fractal(xs, params, tables):
    total = np.zeros_like(xs, dtype=np.float64)
    for octave, table in enumerate(tables):
        frequency = params.lacunarity ** octave / params.wavelength
        total += params.gain ** octave * _value_noise(xs * frequency, table)
    return total


def generate(seed, params=None, length_m=20.0, resolution=0.05, origin=-2.0):
    """Sample `length_m` metres of fractal terrain starting at `origin`, peak |height| == z_scale."""
    params = params or TerrainParams()
    if resolution <= 0:
        raise ValueError("resolution must be positive")

    tables = _lattice_tables(seed, params.octaves)
    count = int(math.floor(length_m / resolution)) + 1
    xs = origin + resolution * np.arange(count)
    raw = _fractal(xs, params, tables)
    peak = float(np.max(np.abs(raw)))

    if params.z_scale == 0.0 or peak == 0.0:
        scale = 0.0
    else:
        scale = params.z_scale / peak
    heights = raw * scale
    heights.setflags(write=False)
    return TerrainProfile(seed=seed, params=params, resolution=resolution, origin=origin,
                          heights=heights, scale=scale, tables=tables)


def flat(length_m=20.0, resolution=0.05, origin=-2.0):
    return generate(0, TerrainParams(z_scale=0.0), length_m, resolution, origin)


def quantize_height(heights):
    """Round to 0.1 m, halves upwards (0.25 -> 0.3, -0.25 -> -0.2)."""
    return np.floor(np.asarray(heights, dtype=np.float64) * 10.0 + 0.5) / 10.0


def local_height(profile, x_positions):
    """Max over foot positions of the terrain height quantized to 0.1 m."""
    heights = profile.heights_at(x_positions)
    return float(np.max(quantize_height(heights))) + 0.0
