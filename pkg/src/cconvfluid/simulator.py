"""Learned position-correction loop: ballistic integration, network correction,
velocity recomputed from the position change."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FrameSequence, ParticleSet, SimConfig
from .network import Model


@dataclass(frozen=True)
class SimState:
    particles: ParticleSet
    frame: int = 0


class SimulationError(ValueError):
    """Raised when the model produces non-finite output; carries the offending state."""

    def __init__(self, msg, frame=None, state=None):
        super().__init__(msg)
        self.frame = frame
        self.state = state


def ballistic(x, v, dt, gravity):
    """``v* = v + dt g``, ``x* = x + dt v*`` on raw arrays (dtype preserved)."""
    dt = x.dtype.type(dt)
    vs = v + dt * np.asarray(gravity, x.dtype)
    return x + dt * vs, vs


def apply_external(state, cfg: SimConfig) -> ParticleSet:
    """Post-external-force state; solids are passed through untouched."""
    ps = state.particles if isinstance(state, SimState) else state
    xs, vs = ballistic(ps.fluid_pos, ps.fluid_vel, cfg.dt, cfg.gravity)
    return ps.with_fluid(xs, vs)


def step(state, model: Model, cfg: SimConfig) -> SimState:
    """One frame: ``x1 = x* + dx``, ``v1 = (x1 - x0) / dt``; the network sees ``x*`` in float32."""
    if not isinstance(state, SimState):
        state = SimState(state)
    ps = state.particles
    # integrate in float64 from the stored float32 state so only storage rounding accumulates
    x0 = ps.fluid_pos.astype(np.float64)
    xs, vs = ballistic(x0, ps.fluid_vel.astype(np.float64), cfg.dt, cfg.gravity)
    dx = np.asarray(model.predict(ps.with_fluid(xs, vs)), np.float32)
    if not np.isfinite(dx).all():
        bad = np.flatnonzero(~np.isfinite(dx).all(axis=1))
        raise SimulationError(
            f"frame {state.frame}: non-finite network output at {len(bad)} particles (first {bad[0]})",
            state.frame,
            ps,
        )
    x1 = xs + dx
    v1 = (x1 - x0) / cfg.dt
    return SimState(ps.with_fluid(x1, v1), state.frame + 1)


def rollout(initial, model: Model, cfg: SimConfig, n_frames: int, scene_id="") -> FrameSequence:
    """``n_frames`` successive steps; the returned sequence holds the emitted frames only."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    state = initial if isinstance(initial, SimState) else SimState(initial)
    frames = []
    for _ in range(n_frames):
        state = step(state, model, cfg)
        frames.append(state.particles)
    return FrameSequence.from_frames(frames, cfg.dt, scene_id)


def escaped(positions, lo, hi, margin=0.0):
    """Boolean mask of particles outside the box ``[lo - margin, hi + margin]``."""
    p = np.asarray(positions)
    lo = np.asarray(lo) - margin
    hi = np.asarray(hi) + margin
    return ((p < lo) | (p > hi)).any(axis=-1)


def escape_count(seq: FrameSequence, lo, hi, margin=0.0):
    """Per-frame number of fluid particles outside the box (diagnostic only)."""
    return np.array([int(escaped(f, lo, hi, margin).sum()) for f in seq.fluid_pos])
