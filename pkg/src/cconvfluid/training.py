"""Two-step rollout loss, Adam, the training loop and a finite-difference gradient check."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import FrameSequence, SimConfig
from .network import ModelConfig, check_params, forward_arrays, forward_backward, init_params, tape_signature
from .simulator import ballistic


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.002
    batch_size: int = 16
    halving_steps: tuple = (10000, 20000, 30000, 40000, 50000)
    total_iters: int = 50000
    gamma: float = 0.5
    c: float = 40.0
    loss_epsilon: float = 1e-9
    seed: int = 0
    log_every: int = 10
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "halving_steps", tuple(int(s) for s in self.halving_steps))
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not self.loss_epsilon > 0:
            raise ValueError(f"loss_epsilon must be positive, got {self.loss_epsilon}")
        if self.batch_size < 1 or self.total_iters < 0:
            raise ValueError("batch_size must be >= 1 and total_iters >= 0")

    @classmethod
    def long(cls, **kw):
        """The full 50000-iteration schedule (the field defaults)."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        """2000 iterations at batch 4, halvings at the same fractions as the long schedule."""
        base = dict(batch_size=4, total_iters=2000, halving_steps=(400, 800, 1200, 1600, 2000))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["halving_steps"] = list(self.halving_steps)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """``lr0`` halved once for every schedule step already reached."""
    return cfg.lr0 * 0.5 ** sum(step >= s for s in cfg.halving_steps)


# --------------------------------------------------------------------------- loss


def neighbor_weight(counts, c=40.0):
    """``exp(-count / c)``; counts include the particle itself."""
    return np.exp(-np.asarray(counts, np.float64) / c)


def neighbor_weight_state(state_star, R, c=40.0):
    from .neighbors import build_neighbors

    x = state_star.fluid_pos
    return neighbor_weight(build_neighbors(x, x, R).counts, c)


def loss_step(pred, gt, phi, gamma=0.5, eps=1e-9):
    """``sum_i phi_i (|pred_i - gt_i|^2 + eps)^(gamma/2)`` and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    e = pred.astype(np.float64) - gt.astype(np.float64)
    r2 = np.sum(e * e, axis=-1) + eps
    phi = np.asarray(phi, np.float64)
    loss = float(np.sum(phi * r2 ** (0.5 * gamma)))
    grad = (phi * gamma * r2 ** (0.5 * gamma - 1.0))[:, None] * e
    return loss, grad.astype(pred.dtype)


@dataclass
class SampleResult:
    loss: float
    loss1: float
    loss2: float
    grads: dict | None = None
    pred1: np.ndarray | None = None
    pred2: np.ndarray | None = None
    signature: tuple = ()


def two_step_loss(params, frames, solid_pos, solid_normal, sim: SimConfig, mcfg: ModelConfig,
                  tcfg: TrainConfig, need_grad=True, signature=False) -> SampleResult:
    """Loss over two chained steps from ground-truth frame t, with the gradient of both terms.

    ``frames`` is ((x0, v0), x1, x2). The second step starts from the predicted
    state ``(x1p, (x1p - x0) / dt)`` and gradients flow through it.
    """
    dtype = params["head.weight"].dtype
    (x0, v0), x1, x2 = frames
    x0 = np.asarray(x0, dtype)
    v0 = np.asarray(v0, dtype)
    dt = dtype.type(sim.dt)

    x0s, v0s = ballistic(x0, v0, sim.dt, sim.gravity)
    dx1, tape1 = forward_arrays(x0s, v0s, solid_pos, solid_normal, params, mcfg)
    phi1 = neighbor_weight(tape1.geom_ff.nl.counts, tcfg.c)
    x1p = x0s + dx1
    l1, g_x1p = loss_step(x1p, x1, phi1, tcfg.gamma, tcfg.loss_epsilon)

    v1p = (x1p - x0) / dt
    x1s, v1s = ballistic(x1p, v1p, sim.dt, sim.gravity)
    dx2, tape2 = forward_arrays(x1s, v1s, solid_pos, solid_normal, params, mcfg)
    phi2 = neighbor_weight(tape2.geom_ff.nl.counts, tcfg.c)
    x2p = x1s + dx2
    l2, g_x2p = loss_step(x2p, x2, phi2, tcfg.gamma, tcfg.loss_epsilon)
    out = SampleResult(l1 + l2, l1, l2, pred1=x1p, pred2=x2p)
    if signature:
        out.signature = (tape_signature(tape1), tape_signature(tape2))
    if not need_grad:
        return out

    # second step: x2p = x1s + net(x1s, v1s)
    grads2, g_x1s, g_v1s = forward_backward(tape2, g_x2p, positions=True)
    g_x1s = g_x1s + g_x2p
    # x1s = x1p + dt v1s, v1s = v1p + dt g, v1p = (x1p - x0) / dt
    g_v1s = g_v1s + dt * g_x1s
    g_x1p = g_x1p + g_x1s + g_v1s / dt
    # first step: x1p = x0s + net(x0s, v0s) with ground-truth inputs
    grads1, _, _ = forward_backward(tape1, g_x1p)
    out.grads = {k: grads1[k] + grads2[k] for k in params}
    return out


# --------------------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam; returns new parameter and state objects."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - upd).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------- training loop


def triples(dataset):
    """All (sequence index, t) with frames t, t+1 and t+2 available."""
    return [(s, t) for s, seq in enumerate(dataset) for t in range(len(seq) - 2)]


def sample_frames(seq: FrameSequence, t):
    return (seq.fluid_pos[t], seq.fluid_vel[t]), seq.fluid_pos[t + 1], seq.fluid_pos[t + 2]


def batch_loss(params, dataset, picks, sim, mcfg, tcfg, need_grad=True, pool=None):
    """Mean loss (and mean gradient) over the sampled triples, reduced in pick order."""
    def one(pick):
        s, t = pick
        seq = dataset[s]
        return two_step_loss(params, sample_frames(seq, t), seq.solid_pos, seq.solid_normal, sim, mcfg, tcfg,
                             need_grad)

    results = list(pool.map(one, picks)) if pool is not None else [one(p) for p in picks]
    loss = float(np.mean([r.loss for r in results]))
    if not need_grad:
        return loss, None
    grads = {}
    for k in params:
        acc = results[0].grads[k].astype(np.float64)
        for r in results[1:]:
            acc = acc + r.grads[k]
        grads[k] = (acc / len(results)).astype(params[k].dtype)
    return loss, grads


@dataclass
class TrainResult:
    params: dict
    adam: AdamState
    rows: list = field(default_factory=list)  # (iter, loss, lr)


def train(dataset, sim: SimConfig, mcfg: ModelConfig, tcfg: TrainConfig, params=None, adam=None,
          start_iter=0, progress=None) -> TrainResult:
    """Adam on uniformly sampled triples; logs ``(iter, loss, lr)`` every ``log_every`` iterations."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    for k, seq in enumerate(dataset):
        if len(seq) < 3:
            raise ValueError(f"sequence {k} has {len(seq)} frames, need at least 3")
    if abs(dataset[0].dt - sim.dt) > 1e-9 * sim.dt:
        raise ValueError(f"data dt {dataset[0].dt} differs from config dt {sim.dt}")
    params = init_params(mcfg, tcfg.seed) if params is None else dict(params)
    check_params(params, mcfg)
    adam = AdamState.zeros_like(params) if adam is None else adam
    pool_idx = triples(dataset)
    rng = np.random.default_rng(tcfg.seed)
    rows = []
    pool = ThreadPoolExecutor(tcfg.threads) if tcfg.threads > 1 else None
    try:
        for it in range(start_iter, tcfg.total_iters):
            picks = [pool_idx[j] for j in rng.integers(len(pool_idx), size=tcfg.batch_size)]
            lr = learning_rate(it, tcfg)
            loss, grads = batch_loss(params, dataset, picks, sim, mcfg, tcfg, pool=pool)
            if not np.isfinite(loss):
                raise ValueError(f"iteration {it}: non-finite loss")
            params, adam = adam_step(params, grads, adam, lr)
            if it % tcfg.log_every == 0:
                rows.append((it, loss, lr))
                if progress is not None:
                    progress(it, loss, lr)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, adam, rows)


def smoothed(values, window=10):
    """Trailing moving average."""
    v = np.asarray(values, np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    n = np.minimum(np.arange(1, len(v) + 1), window)
    return (c[1:] - c[np.arange(1, len(v) + 1) - n]) / n


# --------------------------------------------------------------------------- gradient check


def param_group(name):
    return name.split(".")[0]


def random_instance(rng, n_fluid=8, n_solid=6, dtype=np.float64, sim: SimConfig | None = None):
    """A small clustered scene with three ground-truth frames."""
    sim = sim or SimConfig()
    R = sim.R
    x0 = rng.uniform(0.0, 1.2 * R, (n_fluid, 3))
    v0 = rng.normal(0.0, 0.3, (n_fluid, 3))
    sp = np.c_[rng.uniform(0, 1.2 * R, n_solid), np.full(n_solid, -0.3 * R), rng.uniform(0, 1.2 * R, n_solid)]
    sn = np.tile([0.0, 1.0, 0.0], (n_solid, 1))
    x1 = x0 + sim.dt * v0 + rng.normal(0, 0.005, x0.shape)
    x2 = x1 + sim.dt * v0 + rng.normal(0, 0.005, x0.shape)
    frames = ((x0.astype(dtype), v0.astype(dtype)), x1.astype(dtype), x2.astype(dtype))
    return frames, sp.astype(dtype), sn.astype(dtype)


def randomize_params(params, rng, scale=0.3):
    """Jitter every tensor so that zero-initialised heads and selectors carry gradient."""
    return {k: p + scale * rng.uniform(-1, 1, p.shape).astype(p.dtype) for k, p in params.items()}


def gradient_check(seed=0, n_instances=20, mcfg: ModelConfig | None = None, sim: SimConfig | None = None,
                   tcfg: TrainConfig | None = None, h=1e-3, min_h=1e-8, log=None):
    """Max relative error per parameter group between analytic and finite-difference
    directional derivatives of the two-step loss, in float64.

    Each group is probed along ``normalize(grad_hat + r)`` with a random unit ``r``,
    so the check sees both the gradient direction and a generic one. The
    five-point stencil is shrunk until every stencil point has the same tape
    signature as the centre, i.e. no ReLU, neighbour or voxel boundary lies
    inside the probed segment.
    """
    mcfg = mcfg or ModelConfig(width=4, selector_width=2)
    sim = sim or SimConfig()
    tcfg = tcfg or TrainConfig()
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n_instances):
        n = int(rng.integers(3, 11))  # at most 10 particles in total
        frames, sp, sn = random_instance(rng, n, int(rng.integers(0, 11 - n)), sim=sim)
        params = randomize_params(init_params(mcfg, int(rng.integers(1 << 31)), np.float64), rng)
        res = two_step_loss(params, frames, sp, sn, sim, mcfg, tcfg, signature=True)
        groups = {}
        for k in params:
            groups.setdefault(param_group(k), []).append(k)
        for grp, names in groups.items():
            gnorm = np.sqrt(sum(np.sum(res.grads[k] ** 2) for k in names))
            d = {k: rng.normal(size=params[k].shape) for k in names}
            rnorm = np.sqrt(sum(np.sum(d[k] ** 2) for k in names))
            for k in names:
                d[k] = d[k] / rnorm + (res.grads[k] / gnorm if gnorm > 0 else 0.0)
            dnorm = np.sqrt(sum(np.sum(d[k] ** 2) for k in names))
            an = sum(float(np.sum(res.grads[k] * d[k])) for k in names) / dnorm

            def at(step):
                p = dict(params)
                for k in names:
                    p[k] = params[k] + step * d[k] / dnorm
                r = two_step_loss(p, frames, sp, sn, sim, mcfg, tcfg, need_grad=False, signature=True)
                return r.loss, r.signature

            step = h
            while True:
                evals = [at(m * step) for m in (-2, -1, 1, 2)]
                if all(sig == res.signature for _, sig in evals) or step <= min_h:
                    break
                step /= 10
            f = [v for v, _ in evals]
            fd = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * step)
            # the stencil's rounding noise is ~eps * |L| / step; derivatives within 1e6 of it
            # cannot be resolved to 1e-5 relative and are compared on that absolute scale
            floor = 1e6 * np.finfo(np.float64).eps * (1.0 + abs(res.loss)) / step
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            worst[grp] = max(worst.get(grp, 0.0), err)
            if log is not None:
                log.append((grp, step, fd, an, err))
    return worst
