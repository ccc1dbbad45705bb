"""Domain types shared by every module: particle sets, frame sequences, configs."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

FLOAT = np.float32


def _frozen(a, dtype=FLOAT, shape=None):
    a = np.ascontiguousarray(a, dtype=dtype)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Fluid particles (position, velocity) plus static solid particles with normals.

    Arrays are stored read-only as float32 with shape (N, 3) / (M, 3).
    """

    fluid_pos: np.ndarray
    fluid_vel: np.ndarray
    solid_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), FLOAT))
    solid_normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), FLOAT))

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name), shape=(-1, 3)))
        if self.fluid_pos.shape != self.fluid_vel.shape:
            raise ValueError(f"fluid_pos {self.fluid_pos.shape} vs fluid_vel {self.fluid_vel.shape}")
        if self.solid_pos.shape != self.solid_normal.shape:
            raise ValueError(f"solid_pos {self.solid_pos.shape} vs solid_normal {self.solid_normal.shape}")

    @property
    def n_fluid(self) -> int:
        return self.fluid_pos.shape[0]

    @property
    def n_solid(self) -> int:
        return self.solid_pos.shape[0]

    def with_fluid(self, pos, vel) -> "ParticleSet":
        return replace(self, fluid_pos=pos, fluid_vel=vel)

    def permuted(self, perm) -> "ParticleSet":
        return self.with_fluid(self.fluid_pos[perm], self.fluid_vel[perm])

    def __eq__(self, other):
        if not isinstance(other, ParticleSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass(frozen=True)
class SimConfig:
    """Physical and discretisation constants.

    ``support_radius`` defaults to 4.5 particle radii and ``particle_mass`` to
    ``rest_density * (2h)**3`` when left as ``None``.
    """

    dt: float = 0.02
    gravity: tuple = (0.0, -9.81, 0.0)
    particle_radius: float = 0.025
    support_radius: float | None = None
    kernel_resolution: tuple = (4, 4, 4)
    rest_density: float = 1000.0
    particle_mass: float | None = None

    def __post_init__(self):
        if self.support_radius is None:
            object.__setattr__(self, "support_radius", 4.5 * self.particle_radius)
        if self.particle_mass is None:
            object.__setattr__(self, "particle_mass", self.rest_density * (2 * self.particle_radius) ** 3)
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        object.__setattr__(self, "kernel_resolution", tuple(int(k) for k in self.kernel_resolution))

    @property
    def h(self) -> float:
        return self.particle_radius

    @property
    def R(self) -> float:
        return self.support_radius

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Time-ordered fluid states over a shared static solid boundary.

    ``fluid_pos`` and ``fluid_vel`` have shape (T, N, 3). Indexing returns a
    :class:`ParticleSet` for one frame.
    """

    fluid_pos: np.ndarray
    fluid_vel: np.ndarray
    solid_pos: np.ndarray
    solid_normal: np.ndarray
    dt: float
    scene_id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.fluid_pos, FLOAT)
        if pos.ndim != 3 or pos.shape[-1] != 3:
            raise ValueError(f"fluid_pos must have shape (T, N, 3), got {pos.shape}")
        object.__setattr__(self, "fluid_pos", _frozen(pos))
        object.__setattr__(self, "fluid_vel", _frozen(self.fluid_vel, shape=pos.shape))
        object.__setattr__(self, "solid_pos", _frozen(self.solid_pos, shape=(-1, 3)))
        object.__setattr__(self, "solid_normal", _frozen(self.solid_normal, shape=(-1, 3)))
        object.__setattr__(self, "dt", float(self.dt))
        if self.solid_pos.shape != self.solid_normal.shape:
            raise ValueError("solid_pos and solid_normal differ in shape")

    @classmethod
    def from_frames(cls, frames, dt, scene_id="") -> "FrameSequence":
        frames = list(frames)
        if not frames:
            raise ValueError("cannot build a FrameSequence from zero frames")
        first = frames[0]
        for k, f in enumerate(frames):
            if f.n_fluid != first.n_fluid or f.n_solid != first.n_solid:
                raise ValueError(f"frame {k}: particle counts differ from frame 0")
        return cls(
            np.stack([f.fluid_pos for f in frames]),
            np.stack([f.fluid_vel for f in frames]),
            first.solid_pos,
            first.solid_normal,
            dt,
            scene_id,
        )

    def __len__(self):
        return self.fluid_pos.shape[0]

    def __getitem__(self, t) -> ParticleSet:
        return ParticleSet(self.fluid_pos[t], self.fluid_vel[t], self.solid_pos, self.solid_normal)

    def __iter__(self):
        return (self[t] for t in range(len(self)))

    @property
    def n_fluid(self) -> int:
        return self.fluid_pos.shape[1]

    @property
    def n_solid(self) -> int:
        return self.solid_pos.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.fluid_pos, other.fluid_pos)
            and np.array_equal(self.fluid_vel, other.fluid_vel)
            and np.array_equal(self.solid_pos, other.solid_pos)
            and np.array_equal(self.solid_normal, other.solid_normal)
        )


def _nonfinite_rows(name, a):
    bad = np.flatnonzero(~np.isfinite(a).all(axis=1))
    return [f"{name}[{i}]: non-finite component" for i in bad]


def validate(scene: ParticleSet, cfg: SimConfig | None = None) -> list[str]:
    """Return a list of invariant violations; empty means the scene is well formed."""
    out = []
    out += _nonfinite_rows("fluid_pos", scene.fluid_pos)
    out += _nonfinite_rows("fluid_vel", scene.fluid_vel)
    out += _nonfinite_rows("solid_pos", scene.solid_pos)
    out += _nonfinite_rows("solid_normal", scene.solid_normal)

    norms = np.linalg.norm(scene.solid_normal.astype(np.float64), axis=1)
    for i in np.flatnonzero(np.isfinite(norms) & (np.abs(norms - 1.0) > 1e-6)):
        out.append(f"solid_normal[{i}]: norm {norms[i]:.6g} is not 1 +- 1e-6")

    pos = scene.fluid_pos
    if len(pos) > 1 and np.isfinite(pos).all():
        # exact duplicates only; lexsort keeps this O(N log N)
        order = np.lexsort(pos.T[::-1])
        s = pos[order]
        dup = np.flatnonzero((s[1:] == s[:-1]).all(axis=1))
        for k in dup:
            i, j = sorted((int(order[k]), int(order[k + 1])))
            out.append(f"fluid_pos[{i}], fluid_pos[{j}]: coincident particles")

    if cfg is not None:
        if not cfg.dt > 0:
            out.append(f"cfg.dt: {cfg.dt} is not positive")
        if not cfg.support_radius > 0:
            out.append(f"cfg.support_radius: {cfg.support_radius} is not positive")
        kr = cfg.kernel_resolution
        if len(kr) != 3 or any(k < 2 or k % 2 for k in kr):
            out.append(f"cfg.kernel_resolution: {kr} must be three even values >= 2")
    return out
