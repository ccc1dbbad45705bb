"""Position-based fluids ground-truth generator.

Each frame runs ``substeps`` sub-steps of: gravity, a few Jacobi iterations of
the (unilateral) density constraint with solid boundary particles weighted by
their local volume, velocity from the position change, and XSPH smoothing.
Positions are clamped to the box shrunk by one particle radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .core import FrameSequence, ParticleSet, SimConfig
from .neighbors import build_neighbors
from .sph import _dw_dr, _w, cubic_spline


@dataclass(frozen=True)
class PBFConfig:
    iterations: int = 4
    relaxation: float = 100.0  # constraint-force mixing epsilon (1/m^2)
    xsph: float = 0.01
    substeps: int = 2

    def to_dict(self):
        return dict(iterations=self.iterations, relaxation=self.relaxation, xsph=self.xsph, substeps=self.substeps)


@dataclass(frozen=True)
class ScenePreset:
    box_lo: tuple = (0.0, 0.0, 0.0)
    box_hi: tuple = (1.0, 1.0, 0.5)
    block_size: tuple = (10, 12, 8)  # particles per axis at spacing 2h
    block_origin: tuple | None = None  # None: random placement from ``seed``
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    frame_count: int = 200
    jitter: float = 0.002
    gravity: tuple | None = None  # None: SimConfig gravity
    name: str = "custom"

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**kw)


def preset(name: str, seed: int = 0, **kw) -> ScenePreset:
    """Named scenes: ``dambreak-small`` (960 particles, 200 frames), ``drop-tiny`` (64 particles, 40 frames),
    ``rest-zero-g`` (settled block, no gravity)."""
    table = {
        "dambreak-small": dict(block_size=(10, 12, 8), frame_count=200),
        "drop-tiny": dict(box_hi=(0.4, 0.4, 0.4), block_size=(4, 4, 4), frame_count=40),
        "rest-zero-g": dict(box_hi=(0.4, 0.4, 0.4), block_size=(4, 4, 4), frame_count=20, gravity=(0.0, 0.0, 0.0),
                            jitter=0.0, block_origin=(0.1, 0.1, 0.1)),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
    args = dict(table[name], name=name, seed=seed)
    args.update(kw)
    return ScenePreset(**args)


PRESETS = ("dambreak-small", "drop-tiny", "rest-zero-g")


# --------------------------------------------------------------------------- geometry


def box_boundary(lo, hi, spacing):
    """Particles on the six faces of a box with unit inward normals; shared edge and corner
    points appear once with the normalised sum of their face normals."""
    lo = np.asarray(lo, np.float64)
    hi = np.asarray(hi, np.float64)
    n = np.maximum(np.ceil((hi - lo) / spacing - 1e-9).astype(int), 1)
    axes = [np.linspace(lo[a], hi[a], n[a] + 1) for a in range(3)]
    pts, nrm = [], []
    for a in range(3):
        b, c = [k for k in range(3) if k != a]
        gb, gc = np.meshgrid(axes[b], axes[c], indexing="ij")
        for side, val in ((1.0, lo[a]), (-1.0, hi[a])):
            p = np.zeros((gb.size, 3))
            p[:, a] = val
            p[:, b] = gb.ravel()
            p[:, c] = gc.ravel()
            nn = np.zeros_like(p)
            nn[:, a] = side
            pts.append(p)
            nrm.append(nn)
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    key = np.round((pts - lo) / spacing * 2).astype(np.int64)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    upos = np.zeros((len(uniq), 3))
    unrm = np.zeros((len(uniq), 3))
    np.add.at(unrm, inv, nrm)
    upos[inv] = pts
    unrm /= np.linalg.norm(unrm, axis=1, keepdims=True)
    return upos, unrm


def fluid_block(p: ScenePreset, cfg: SimConfig):
    spacing = 2.0 * cfg.h
    lo = np.asarray(p.box_lo, np.float64)
    hi = np.asarray(p.box_hi, np.float64)
    size = (np.asarray(p.block_size) - 1) * spacing
    margin = 2.0 * cfg.h
    free = hi - lo - 2 * margin - size
    if (free < 0).any() or min(p.block_size) < 1:
        raise ValueError(f"fluid block {p.block_size} does not fit strictly inside the box")
    rng = np.random.default_rng(p.seed)
    if p.block_origin is None:
        origin = lo + margin + rng.uniform(0.0, 1.0, 3) * free
    else:
        origin = np.asarray(p.block_origin, np.float64)
        if (origin < lo + margin - 1e-12).any() or (origin + size > hi - margin + 1e-12).any():
            raise ValueError("fluid block origin places particles outside the box")
    grid = np.stack(np.meshgrid(*[np.arange(k) for k in p.block_size], indexing="ij"), -1).reshape(-1, 3)
    x = origin + grid * spacing
    if p.jitter > 0:
        x = x + rng.uniform(-p.jitter, p.jitter, x.shape)
    v = np.tile(np.asarray(p.initial_velocity, np.float64), (len(x), 1))
    return x, v


def initial_state(p: ScenePreset, cfg: SimConfig | None = None) -> ParticleSet:
    """Frame 0 of a preset: the fluid block plus the box boundary particles."""
    cfg = cfg or SimConfig()
    sp, sn = box_boundary(p.box_lo, p.box_hi, 2.0 * cfg.h)
    x, v = fluid_block(p, cfg)
    return ParticleSet(x, v, sp, sn)


def scene_config(p: ScenePreset, cfg: SimConfig | None = None) -> SimConfig:
    """``cfg`` with the preset's gravity override applied."""
    cfg = cfg or SimConfig()
    return cfg if p.gravity is None else replace(cfg, gravity=tuple(p.gravity))


# --------------------------------------------------------------------------- solver kernels


@nb.njit(cache=True, nogil=True)
def _boundary_volume(offsets, idx, dist, hs, rho0, psi):
    for b in range(offsets.shape[0] - 1):
        s = 0.0
        for p in range(offsets[b], offsets[b + 1]):
            s += _w(dist[p], hs)
        psi[b] = rho0 / s


@nb.njit(cache=True, nogil=True)
def _lambdas(x, foff, fidx, boff, bidx, xb, psi, m, hs, rho0, eps, rho, lam):
    for i in range(x.shape[0]):
        dens = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        sq = 0.0
        for p in range(foff[i], foff[i + 1]):
            j = fidx[p]
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            dens += m * _w(r, hs)
            if r > 0.0:
                c = m * _dw_dr(r, hs) / (r * rho0)
                gx += c * dx
                gy += c * dy
                gz += c * dz
                sq += c * c * r * r
        for p in range(boff[i], boff[i + 1]):
            b = bidx[p]
            dx = x[i, 0] - xb[b, 0]
            dy = x[i, 1] - xb[b, 1]
            dz = x[i, 2] - xb[b, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            dens += psi[b] * _w(r, hs)
            if r > 0.0:
                c = psi[b] * _dw_dr(r, hs) / (r * rho0)
                gx += c * dx
                gy += c * dy
                gz += c * dz
        rho[i] = dens
        C = dens / rho0 - 1.0
        if C < 0.0:
            C = 0.0
        lam[i] = -C / (gx * gx + gy * gy + gz * gz + sq + eps)


@nb.njit(cache=True, nogil=True)
def _corrections(x, foff, fidx, boff, bidx, xb, psi, m, hs, rho0, lam, dp):
    for i in range(x.shape[0]):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for p in range(foff[i], foff[i + 1]):
            j = fidx[p]
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            if r > 0.0:
                c = (lam[i] + lam[j]) * m * _dw_dr(r, hs) / (r * rho0)
                ax += c * dx
                ay += c * dy
                az += c * dz
        for p in range(boff[i], boff[i + 1]):
            b = bidx[p]
            dx = x[i, 0] - xb[b, 0]
            dy = x[i, 1] - xb[b, 1]
            dz = x[i, 2] - xb[b, 2]
            r = np.sqrt(dx * dx + dy * dy + dz * dz)
            if r > 0.0:
                c = lam[i] * psi[b] * _dw_dr(r, hs) / (r * rho0)
                ax += c * dx
                ay += c * dy
                az += c * dz
        dp[i, 0] = ax
        dp[i, 1] = ay
        dp[i, 2] = az


@nb.njit(cache=True, nogil=True)
def _xsph(x, v, foff, fidx, m, hs, rho, coef, out):
    for i in range(x.shape[0]):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for p in range(foff[i], foff[i + 1]):
            j = fidx[p]
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            w = m / rho[j] * _w(np.sqrt(dx * dx + dy * dy + dz * dz), hs)
            ax += w * (v[j, 0] - v[i, 0])
            ay += w * (v[j, 1] - v[i, 1])
            az += w * (v[j, 2] - v[i, 2])
        out[i, 0] = v[i, 0] + coef * ax
        out[i, 1] = v[i, 1] + coef * ay
        out[i, 2] = v[i, 2] + coef * az


# --------------------------------------------------------------------------- solver


@dataclass
class PBFSolver:
    """Holds the static boundary and its volume weights; ``step`` advances one sub-step."""

    cfg: SimConfig
    solid_pos: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    pbf: PBFConfig = field(default_factory=PBFConfig)
    gravity: np.ndarray | None = None

    def __post_init__(self):
        self.hs = 2.0 * self.cfg.h
        self.support = 2.0 * self.hs
        self.m = float(self.cfg.particle_mass)
        self.rho0 = float(self.cfg.rest_density)
        self.solid_pos = np.ascontiguousarray(self.solid_pos, np.float64).reshape(-1, 3)
        self.gravity = np.asarray(self.cfg.gravity if self.gravity is None else self.gravity, np.float64)
        self.psi = np.zeros(len(self.solid_pos))
        if len(self.solid_pos):
            nl = build_neighbors(self.solid_pos, self.solid_pos, self.support)
            _boundary_volume(nl.offsets, nl.indices, nl.distances.astype(np.float64), self.hs, self.rho0, self.psi)
        self.lo = np.asarray(self.box_lo, np.float64) + self.cfg.h
        self.hi = np.asarray(self.box_hi, np.float64) - self.cfg.h

    def _neighbors(self, x):
        ff = build_neighbors(x, x, self.support)
        if len(self.solid_pos):
            fs = build_neighbors(x, self.solid_pos, self.support)
            return ff.offsets, ff.indices, fs.offsets, fs.indices
        return ff.offsets, ff.indices, np.zeros(len(x) + 1, np.int64), np.zeros(0, np.int64)

    def constraint_pass(self, x, nbrs):
        """One Jacobi iteration; returns (position correction, density before it)."""
        foff, fidx, boff, bidx = nbrs
        rho = np.empty(len(x))
        lam = np.empty(len(x))
        dp = np.empty_like(x)
        sp = self.solid_pos if len(self.solid_pos) else np.zeros((1, 3))
        _lambdas(x, foff, fidx, boff, bidx, sp, self.psi, self.m, self.hs, self.rho0, self.pbf.relaxation, rho, lam)
        _corrections(x, foff, fidx, boff, bidx, sp, self.psi, self.m, self.hs, self.rho0, lam, dp)
        return dp, rho

    def step(self, x, v, dt):
        x = np.asarray(x, np.float64)
        v = np.asarray(v, np.float64) + dt * self.gravity
        xs = np.clip(x + dt * v, self.lo, self.hi)
        if len(x) == 0:
            return xs, v
        nbrs = self._neighbors(xs)
        for _ in range(self.pbf.iterations):
            dp, _ = self.constraint_pass(xs, nbrs)
            xs = np.clip(xs + dp, self.lo, self.hi)
        v = (xs - x) / dt
        if self.pbf.xsph > 0:
            nbrs = self._neighbors(xs)
            rho = density_from(xs, nbrs[0], nbrs[1], self.m, self.hs)
            out = np.empty_like(v)
            _xsph(xs, v, nbrs[0], nbrs[1], self.m, self.hs, rho, self.pbf.xsph, out)
            v = out
        return xs, v


def density_from(x, foff, fidx, m, hs):
    q = np.repeat(np.arange(len(x)), np.diff(foff))
    r = np.linalg.norm(x[fidx] - x[q], axis=1)
    return np.bincount(q, weights=m * cubic_spline(r, hs), minlength=len(x))


def pbf_step(state: ParticleSet, cfg: SimConfig, pbf: PBFConfig | None = None, box=None, dt=None):
    """One sub-step on a :class:`ParticleSet` (convenience wrapper; ``box`` defaults to a
    very large domain so no clamping happens)."""
    pbf = pbf or PBFConfig()
    lo, hi = box if box is not None else ((-1e6,) * 3, (1e6,) * 3)
    solver = PBFSolver(cfg, state.solid_pos, np.asarray(lo), np.asarray(hi), pbf)
    x, v = solver.step(state.fluid_pos, state.fluid_vel, cfg.dt if dt is None else dt)
    return state.with_fluid(x, v)


def generate(p: ScenePreset, cfg: SimConfig | None = None, pbf: PBFConfig | None = None, scene_id=None,
             progress=None) -> FrameSequence:
    """Simulate a preset; frame 0 is the initial block. Recorded velocities are the
    frame-to-frame displacement divided by the frame time step."""
    cfg = cfg or SimConfig()
    pbf = pbf or PBFConfig()
    lo = np.asarray(p.box_lo, np.float64)
    hi = np.asarray(p.box_hi, np.float64)
    if not (hi - lo > 4 * cfg.h).all():
        raise ValueError(f"box {p.box_lo}..{p.box_hi} is too small")
    if p.frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    sp, sn = box_boundary(lo, hi, 2.0 * cfg.h)
    x, v = fluid_block(p, cfg)
    solver = PBFSolver(cfg, sp, lo, hi, pbf, None if p.gravity is None else np.asarray(p.gravity, np.float64))
    sub = cfg.dt / pbf.substeps
    xs_out = [x.astype(np.float32)]
    vs_out = [v.astype(np.float32)]
    prev = xs_out[0]
    for f in range(1, p.frame_count):
        for _ in range(pbf.substeps):
            x, v = solver.step(x, v, sub)
        cur = x.astype(np.float32)
        xs_out.append(cur)
        vs_out.append((cur - prev) / np.float32(cfg.dt))
        prev = cur
        if progress is not None:
            progress(f)
    sid = scene_id if scene_id is not None else f"{p.name}-{p.seed}"
    return FrameSequence(np.stack(xs_out), np.stack(vs_out), sp, sn, cfg.dt, sid)
