"""Multilevel hash-grid encoding with an analytic backward pass.

Each level l scales the normalized input by r_l = r_base * b**l, looks up the
2**d lattice corners of the enclosing cell through a spatial hash, and
interpolates their feature rows (trilinear for d=3).  Levels are concatenated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ugsplat.errors import InputError

log = logging.getLogger(__name__)

# the 4th prime only serves the quaternion grid
HASH_PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint64)


def hash_index(lattice_coord, table_size: int, level: int = 0) -> np.ndarray:
    """Spatial hash ``(x*p1 ^ y*p2 ^ z*p3) mod table_size`` of integer lattice coordinates.

    ``table_size`` must be a power of two, so the modulo is a bit mask and the
    result is identical under 32- or 64-bit wraparound.  ``level`` does not enter
    the hash; each level owns a separate table.
    """
    if table_size <= 0 or table_size & (table_size - 1):
        raise ValueError(f"table_size must be a power of two, got {table_size}")
    c = np.asarray(lattice_coord)
    d = c.shape[-1]
    cu = c.astype(np.int64).astype(np.uint64)
    h = cu[..., 0] * HASH_PRIMES[0]
    for k in range(1, d):
        h = h ^ (cu[..., k] * HASH_PRIMES[k])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _corner_offsets(d: int) -> np.ndarray:
    # (2**d, d) with bit k of the corner id giving the offset along axis k
    ids = np.arange(2 ** d)
    return ((ids[:, None] >> np.arange(d)[None, :]) & 1).astype(np.int64)


@dataclass
class HashGridCache:
    indices: np.ndarray      # (L, N, C) table rows
    weights: np.ndarray      # (L, N, C) interpolation weights
    frac: np.ndarray         # (L, N, d) position inside the cell
    inside: np.ndarray       # (N, d) False where the input was clamped


@dataclass
class HashGridEncoder:
    """L-level hash grid over an axis-aligned box in ``dim`` dimensions."""

    levels: int = 6
    features_per_level: int = 4
    base_resolution: float = 16.0
    growth: float = 2.0
    table_size: int = 2 ** 14
    domain_lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    domain_hi: np.ndarray = field(default_factory=lambda: np.ones(3))
    tables: np.ndarray | None = None
    init_range: float = 1e-4
    seed: int = 0
    clamp_count: int = 0

    def __post_init__(self):
        if self.levels <= 0 or self.features_per_level <= 0:
            raise ValueError("levels and features_per_level must be positive")
        if not self.growth > 1:
            raise ValueError("growth must exceed 1")
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        self.domain_lo = np.asarray(self.domain_lo, dtype=np.float64)
        self.domain_hi = np.asarray(self.domain_hi, dtype=np.float64)
        if self.domain_lo.shape != self.domain_hi.shape or np.any(self.domain_hi <= self.domain_lo):
            raise ValueError("domain box must have hi > lo in every dimension")
        if self.tables is None:
            rng = np.random.default_rng(self.seed)
            self.tables = rng.uniform(-self.init_range, self.init_range,
                                      (self.levels, self.table_size, self.features_per_level))
        self.tables = np.asarray(self.tables, dtype=np.float64)
        expect = (self.levels, self.table_size, self.features_per_level)
        if self.tables.shape != expect:
            raise ValueError(f"tables must have shape {expect}, got {self.tables.shape}")
        self._offsets = _corner_offsets(self.dim)

    @classmethod
    def spanning(cls, lo, hi, levels: int = 6, features_per_level: int = 4,
                 base_resolution: float = 16.0, finest_resolution: float = 512.0,
                 **kw) -> HashGridEncoder:
        """Encoder whose growth factor takes ``base_resolution`` to ``finest_resolution``."""
        growth = ((finest_resolution / base_resolution) ** (1.0 / (levels - 1))
                  if levels > 1 else 2.0)
        return cls(levels, features_per_level, base_resolution, growth,
                   domain_lo=lo, domain_hi=hi, **kw)

    @property
    def dim(self) -> int:
        return len(self.domain_lo)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def resolutions(self) -> np.ndarray:
        return self.base_resolution * self.growth ** np.arange(self.levels)

    def normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x01 = (x - self.domain_lo) / (self.domain_hi - self.domain_lo)
        inside = (x01 >= 0.0) & (x01 <= 1.0)
        return np.clip(x01, 0.0, 1.0), inside

    def forward(self, x) -> tuple[np.ndarray, HashGridCache]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[-1] != self.dim:
            raise InputError(f"expected {self.dim}-d inputs, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("non-finite input to hash-grid encoder")
        x01, inside = self.normalize(x)
        n_clamped = int(np.sum(~np.all(inside, axis=1)))
        if n_clamped:
            self.clamp_count += n_clamped
            log.debug("clamped %d inputs into the encoder domain", n_clamped)

        res = self.resolutions
        scaled = x01[None, :, :] * res[:, None, None]          # (L, N, d)
        base = np.floor(scaled)
        frac = scaled - base
        corners = base.astype(np.int64)[:, :, None, :] + self._offsets[None, None]  # (L,N,C,d)
        idx = hash_index(corners, self.table_size)                                    # (L,N,C)
        # per-axis factor: frac where the corner bit is set, else 1 - frac
        fac = np.where(self._offsets[None, None] == 1, frac[:, :, None, :],
                       1.0 - frac[:, :, None, :])
        w = np.prod(fac, axis=-1)                                                      # (L,N,C)
        lvl = np.arange(self.levels)[:, None, None]
        feats = np.einsum("lnc,lncf->nlf", w, self.tables[lvl, idx])
        out = feats.reshape(len(x), self.output_dim)
        cache = HashGridCache(idx, w, frac, inside)
        return (out[0] if single else out), cache

    def encode(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: HashGridCache, upstream) -> tuple[np.ndarray, np.ndarray]:
        """Gradients ``(d_tables, d_inputs)`` for an upstream gradient on the output.

        Table gradients are accumulated with ``bincount`` so repeated hits on one
        row (hash collisions, shared corners) sum without loss.
        """
        up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        n = up.shape[0]
        L, F, d = self.levels, self.features_per_level, self.dim
        up = up.reshape(n, L, F).transpose(1, 0, 2)                      # (L, N, F)

        flat = (cache.indices + (np.arange(L) * self.table_size)[:, None, None])
        contrib = cache.weights[..., None] * up[:, :, None, :]           # (L,N,C,F)
        slots = (flat[..., None] * F + np.arange(F)).ravel()
        d_tables = np.bincount(slots, weights=contrib.ravel(),
                               minlength=L * self.table_size * F)
        d_tables = d_tables.reshape(L, self.table_size, F)

        # d(weight)/d(frac_k) = prod_{j != k} fac_j * (+1 if bit_k else -1)
        lvl = np.arange(L)[:, None, None]
        rows = self.tables[lvl, cache.indices]                          # (L,N,C,F)
        g_corner = np.einsum("lncf,lnf->lnc", rows, up)                  # (L,N,C)
        frac = cache.frac[:, :, None, :]
        bits = self._offsets[None, None]
        fac = np.where(bits == 1, frac, 1.0 - frac)                      # (L,N,C,d)
        sign = np.where(bits == 1, 1.0, -1.0)
        d_frac = np.empty(frac.shape[:2] + (d,))
        for k in range(d):
            others = np.prod(np.delete(fac, k, axis=-1), axis=-1)        # (L,N,C)
            d_frac[:, :, k] = np.sum(g_corner * others * sign[..., k], axis=-1)
        # frac = x01 * r - floor(.): d frac / d x = r / extent
        res = self.resolutions[:, None, None]
        d_x01 = np.sum(d_frac * res, axis=0)                             # (N, d)
        d_x = d_x01 / (self.domain_hi - self.domain_lo) * cache.inside
        return d_tables, d_x


@dataclass
class EncodingConfig:
    """Level counts allocated to (position, scale, rotation, view direction).

    A zero entry passes that input through raw.
    """

    position: int = 6
    scale: int = 0
    rotation: int = 0
    view: int = 0

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError("encoding level counts must be non-negative")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.position, self.scale, self.rotation, self.view)

    @classmethod
    def from_tuple(cls, dims) -> EncodingConfig:
        p, s, r, v = (int(x) for x in dims)
        return cls(p, s, r, v)


RAW_DIMS = {"position": 3, "view": 3, "rotation": 4, "scale": 3}
# the network input is laid out as [position, view, rotation, scale]
INPUT_ORDER = ("position", "view", "rotation", "scale")
LOG_SCALE_RANGE = (-8.0, 2.0)


@dataclass
class InputEncoderCache:
    slices: dict[str, slice]
    grid_caches: dict[str, HashGridCache]
    log_scales: np.ndarray | None


class InputEncoder:
    """Assembles per-Gaussian network inputs ``[H(P), V, R, S]``.

    Inputs with a nonzero level count go through their own hash grid: position
    over the scene box, view direction and quaternion components mapped from
    [-1, 1], scale in log space over ``LOG_SCALE_RANGE``.
    """

    def __init__(self, config: EncodingConfig, position_box, features_per_level: int = 4,
                 table_size: int = 2 ** 14, base_resolution: float = 16.0,
                 finest_resolution: float = 512.0, seed: int = 0, grids=None):
        self.config = config
        self.features_per_level = features_per_level
        self.position_box = np.asarray(position_box, dtype=np.float64).reshape(2, -1)
        boxes = {
            "position": (self.position_box[0], self.position_box[1]),
            "view": (-np.ones(3), np.ones(3)),
            "rotation": (-np.ones(4), np.ones(4)),
            "scale": (np.full(3, LOG_SCALE_RANGE[0]), np.full(3, LOG_SCALE_RANGE[1])),
        }
        levels = dict(zip(("position", "scale", "rotation", "view"), config.as_tuple()))
        self.grids: dict[str, HashGridEncoder] = {}
        for k, name in enumerate(INPUT_ORDER):
            if levels[name] == 0:
                continue
            if grids is not None and name in grids:
                self.grids[name] = grids[name]
                continue
            lo, hi = boxes[name]
            self.grids[name] = HashGridEncoder.spanning(
                lo, hi, levels=levels[name], features_per_level=features_per_level,
                base_resolution=base_resolution, finest_resolution=finest_resolution,
                table_size=table_size, seed=seed + 7919 * (k + 1))

    @property
    def output_dim(self) -> int:
        return sum(self.grids[n].output_dim if n in self.grids else RAW_DIMS[n]
                   for n in INPUT_ORDER)

    def forward(self, positions, view_dirs, rotations, scales):
        """``rotations`` are unit quaternions, ``scales`` are exp(log_scale)."""
        raw = {"position": positions, "view": view_dirs, "rotation": rotations, "scale": scales}
        parts, slices, caches = [], {}, {}
        start = 0
        log_scales = None
        for name in INPUT_ORDER:
            if name in self.grids:
                x = raw[name]
                if name == "scale":
                    log_scales = np.log(x)
                    x = log_scales
                feat, caches[name] = self.grids[name].forward(x)
            else:
                feat = np.asarray(raw[name], dtype=np.float64)
            parts.append(feat)
            slices[name] = slice(start, start + feat.shape[1])
            start += feat.shape[1]
        return np.concatenate(parts, axis=1), InputEncoderCache(slices, caches, log_scales)

    def backward(self, cache: InputEncoderCache, upstream, scales=None):
        """Returns ``(raw_input_grads, table_grads)`` keyed by input name."""
        upstream = np.asarray(upstream, dtype=np.float64)
        grads, table_grads = {}, {}
        for name in INPUT_ORDER:
            g = upstream[:, cache.slices[name]]
            if name in self.grids:
                table_grads[name], g = self.grids[name].backward(cache.grid_caches[name], g)
                if name == "scale":
                    # input was log(scale)
                    g = g / scales
            grads[name] = g
        return grads, table_grads

    @property
    def clamp_count(self) -> int:
        return sum(g.clamp_count for g in self.grids.values())
