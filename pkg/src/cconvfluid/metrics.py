"""Evaluation metrics: index-matched position error, nearest-neighbour sequence
distance, Wasserstein-1 distance and maximum-density error."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import FrameSequence, SimConfig
from .sph import density as _density

MM = 1000.0


def _sq(d):
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _mean(values):
    # exactly rounded sum, so the result does not depend on summation order
    return math.fsum(values) / len(values)


def _cloud(a, name):
    a = np.asarray(a, np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {a.shape}")
    return a


def avg_pos_error(pred, gt) -> float:
    """Mean of ``|pred_i - gt_i|`` over particles, in millimetres."""
    p = _cloud(pred, "pred")
    g = _cloud(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"particle counts differ: {len(p)} vs {len(g)}")
    if len(p) == 0:
        return 0.0
    return _mean(np.sqrt(_sq(p - g)).tolist()) * MM


def nearest_distance(gt, pred, chunk=1024):
    """For every ground-truth point, distance to the closest predicted point (metres)."""
    g = _cloud(gt, "gt")
    p = _cloud(pred, "pred")
    if len(p) == 0:
        raise ValueError("empty prediction")
    out = np.empty(len(g))
    for s in range(0, len(g), chunk):
        d = g[s:s + chunk, None, :] - p[None, :, :]
        out[s:s + chunk] = np.sqrt(np.min(_sq(d), axis=1))
    return out


def frame_distance(pred, gt) -> float:
    """Mean over ground-truth particles of the distance to the nearest prediction, in millimetres."""
    g = _cloud(gt, "gt")
    if len(g) == 0:
        return 0.0
    return _mean(nearest_distance(g, pred).tolist()) * MM


def seq_distance(pred_frames, gt_frames):
    """Per-frame nearest-neighbour distance (mm) and its mean over frames."""
    pf = [np.asarray(f) for f in pred_frames]
    gf = [np.asarray(f) for f in gt_frames]
    if len(pf) != len(gf):
        raise ValueError(f"frame counts differ: {len(pf)} vs {len(gf)}")
    per = np.array([frame_distance(p, g) for p, g in zip(pf, gf)])
    return per, _mean(per.tolist()) if len(per) else 0.0


def subsample(points, n, rng):
    p = np.asarray(points)
    if len(p) <= n:
        return p
    return p[np.sort(rng.choice(len(p), n, replace=False))]


def wasserstein(pred, gt, max_points=256, seed=0) -> float:
    """Exact W1 (Euclidean cost, uniform weights) in millimetres via optimal assignment.

    Clouds larger than ``max_points`` are first reduced to a seeded random subset.
    """
    p = _cloud(pred, "pred")
    g = _cloud(gt, "gt")
    rng = np.random.default_rng(seed)
    p = subsample(p, max_points, rng)
    g = subsample(g, max_points, rng)
    if len(p) != len(g):
        raise ValueError(f"point counts differ after subsampling: {len(p)} vs {len(g)}")
    if len(p) == 0:
        return 0.0
    cost = np.sqrt(_sq(p[:, None, :] - g[None, :, :]))
    r, c = linear_sum_assignment(cost)
    return _mean(cost[r, c].tolist()) * MM


def density(positions, cfg: SimConfig | None = None, mass=None):
    """SPH density (kg/m^3) of the fluid particles with the cubic spline at ``hs = 2h``."""
    cfg = cfg or SimConfig()
    return _density(positions, cfg.particle_mass if mass is None else mass, 2.0 * cfg.h)


def max_density_error(pred, gt, cfg: SimConfig | None = None) -> float:
    """``|1 - max rho(pred) / max rho(gt)|``."""
    rp = density(_cloud(pred, "pred"), cfg)
    rg = density(_cloud(gt, "gt"), cfg)
    if len(rp) == 0 or len(rg) == 0:
        raise ValueError("both clouds must be non-empty")
    mg = rg.max()
    if not mg > 0:
        raise ValueError("ground-truth maximum density is zero")
    return float(abs(1.0 - rp.max() / mg))


# --------------------------------------------------------------------------- report


@dataclass
class EvalReport:
    avg_pos_error_t1: float = 0.0
    avg_pos_error_t2: float = 0.0
    seq_distance_dn: float = 0.0
    wasserstein: float = 0.0
    max_density_error: float = 0.0
    seed: int = 0
    rows: list = field(default_factory=list)  # (metric, frame, value)

    def summary(self):
        d = asdict(self)
        d.pop("rows")
        return d

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "frame", "value"])
        for m, f, v in self.rows:
            w.writerow([m, f, repr(float(v))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def check(self):
        for k, v in self.summary().items():
            if k != "seed" and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} = {v} is not a finite non-negative value")


def compare_sequences(pred: FrameSequence, gt: FrameSequence, cfg: SimConfig | None = None, seed=0) -> EvalReport:
    """Frame-by-frame comparison of two aligned sequences (sequence distance, W1, density error)."""
    n = min(len(pred), len(gt))
    if n == 0:
        raise ValueError("no frames to compare")
    rep = EvalReport(seed=seed)
    d, w, e = [], [], []
    for f in range(n):
        d.append(frame_distance(pred.fluid_pos[f], gt.fluid_pos[f]))
        w.append(wasserstein(pred.fluid_pos[f], gt.fluid_pos[f], seed=seed + f))
        e.append(max_density_error(pred.fluid_pos[f], gt.fluid_pos[f], cfg))
        rep.rows += [("seq_distance", f, d[-1]), ("wasserstein", f, w[-1]), ("max_density_error", f, e[-1])]
    rep.seq_distance_dn = float(np.mean(d))
    rep.wasserstein = float(np.mean(w))
    rep.max_density_error = float(np.mean(e))
    return rep


def evaluate(model, gt: FrameSequence, cfg: SimConfig | None = None, every=5, rollout_frames=None, seed=0):
    """Short-horizon errors from every ``every``-th ground-truth frame, plus a
    free rollout from frame 0 compared with the ground truth."""
    from .simulator import SimState, rollout, step

    cfg = cfg or SimConfig(dt=gt.dt)
    rows = []
    e1, e2 = [], []
    for t in range(0, len(gt) - 2, every):
        s1 = step(SimState(gt[t], t), model, cfg)
        s2 = step(s1, model, cfg)
        e1.append(avg_pos_error(s1.particles.fluid_pos, gt.fluid_pos[t + 1]))
        e2.append(avg_pos_error(s2.particles.fluid_pos, gt.fluid_pos[t + 2]))
        rows += [("avg_pos_error_t1", t, e1[-1]), ("avg_pos_error_t2", t, e2[-1])]
    n = len(gt) - 1 if rollout_frames is None else min(rollout_frames, len(gt) - 1)
    pred = rollout(gt[0], model, cfg, n)
    truth = FrameSequence(gt.fluid_pos[1:n + 1], gt.fluid_vel[1:n + 1], gt.solid_pos, gt.solid_normal, gt.dt)
    rep = compare_sequences(pred, truth, cfg, seed)
    rep.avg_pos_error_t1 = float(np.mean(e1)) if e1 else 0.0
    rep.avg_pos_error_t2 = float(np.mean(e2)) if e2 else 0.0
    rep.rows = rows + [(m, f + 1, v) for m, f, v in rep.rows]
    return rep, pred
