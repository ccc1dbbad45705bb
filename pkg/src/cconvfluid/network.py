"""Dual-pathway particle network: a CConv main path and an antisymmetric
constraint path, each with a type-aware input stage, blended after every
convolution layer by a learned per-particle selector.

Parameters live in a flat ``dict[str, ndarray]``. ``forward`` returns the
displacement together with a tape; ``forward_backward`` walks that tape in
reverse with hand-written derivatives.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .contconv import ConvGeometry, conv_backward, conv_forward, fold_antisymmetric, materialize_antisymmetric
from .core import ParticleSet

PATHS = ("main", "cons")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    selector_width: int = 8
    radius: float = 0.1125
    depth: int = 5
    residual_layers: tuple = (1, 3)
    in_fluid: int = 4
    in_solid: int = 4

    def __post_init__(self):
        object.__setattr__(self, "residual_layers", tuple(int(k) for k in self.residual_layers))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["residual_layers"] = list(self.residual_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _kernel(cin, cout, half=False):
    return ((2 if half else 4), 4, 4, cin, cout)


def _selector_shapes(prefix, cin, cs):
    return {
        f"{prefix}.conv0": ("kernel", _kernel(cin, cs)),
        f"{prefix}.conv1": ("kernel", _kernel(cs, cs)),
        f"{prefix}.dense.weight": ("zero", (cs, 1)),
        f"{prefix}.dense.bias": ("zero", (1,)),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> (init kind, shape) for every tensor of the model."""
    C, Cs = cfg.width, cfg.selector_width
    out = {}
    for p in PATHS:
        half = p == "cons"
        out[f"taim_{p}.lift_fluid.kernel"] = ("kernel", _kernel(cfg.in_fluid, C, half))
        out[f"taim_{p}.lift_fluid.bias"] = ("zero", (C,))
        out[f"taim_{p}.lift_solid.kernel"] = ("kernel", _kernel(cfg.in_solid, C, half))
        out[f"taim_{p}.lift_solid.bias"] = ("zero", (C,))
        out.update(_selector_shapes(f"taim_{p}.sel1", 2 * C, Cs))
        out.update(_selector_shapes(f"taim_{p}.sel2", C, Cs))
        out[f"fc_in_{p}.weight"] = ("dense", (cfg.in_fluid, C))
        out[f"fc_in_{p}.bias"] = ("zero", (C,))
    for L in range(cfg.depth):
        out[f"main.conv{L}.kernel"] = ("kernel", _kernel(C, C))
        out[f"main.conv{L}.bias"] = ("zero", (C,))
        out[f"cons.conv{L}.kernel"] = ("kernel", _kernel(C, C, half=True))
        out[f"cons.conv{L}.bias"] = ("zero", (C,))
    for k in range(cfg.depth):
        out[f"fusion{k}.phi_main"] = ("kernel", _kernel(C, Cs))
        out[f"fusion{k}.phi_cons"] = ("kernel", _kernel(C, Cs))
        out.update(_selector_shapes(f"fusion{k}.selector", 2 * Cs, Cs))
    out["head.weight"] = ("zero", (C, 3))
    out["head.bias"] = ("zero", (3,))
    return out


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> dict:
    """Glorot-uniform filters and input dense layers; zero biases, selector heads and output head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (kind, shape) in param_shapes(cfg).items():
        if kind == "zero":
            params[name] = np.zeros(shape, dtype)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return params


def check_params(params: dict, cfg: ModelConfig):
    shapes = param_shapes(cfg)
    missing = sorted(set(shapes) - set(params))
    extra = sorted(set(params) - set(shapes))
    if missing:
        raise ValueError(f"missing tensor {missing[0]}")
    if extra:
        raise ValueError(f"unexpected tensor {extra[0]}")
    for name, (_, shape) in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"tensor {name} has shape {tuple(params[name].shape)}, expected {shape}")


def _relu(x):
    return np.maximum(x, 0)


def _sigmoid(z):
    """Logistic function kept strictly inside (0, 1) at the working precision."""
    e = np.exp(-np.abs(z))
    w = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    fi = np.finfo(w.dtype)
    return np.clip(w, fi.tiny, 1.0 - fi.epsneg)


def _blend(a, b, w):
    """``a + w (b - a)`` clamped to the operands' per-channel range (guards against rounding)."""
    return np.clip(a + w * (b - a), np.minimum(a, b), np.maximum(a, b))


def input_features(state: ParticleSet, dtype=np.float32):
    """Fluid rows ``[1, vx, vy, vz]`` and solid rows ``[1, nx, ny, nz]``."""
    f = np.concatenate([np.ones((state.n_fluid, 1), dtype), state.fluid_vel.astype(dtype)], axis=1)
    s = np.concatenate([np.ones((state.n_solid, 1), dtype), state.solid_normal.astype(dtype)], axis=1)
    return f, s


class _PairAcc:
    """One pair-weight gradient buffer per geometry, or nothing when positions are not needed."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.bufs = {}

    def __call__(self, geom):
        if not self.enabled:
            return None
        if id(geom) not in self.bufs:
            self.bufs[id(geom)] = (geom, geom.pair_grads())
        return self.bufs[id(geom)][1]


class _Grads(dict):
    def add(self, name, g):
        if name in self:
            self[name] = self[name] + g
        else:
            self[name] = g


# --------------------------------------------------------------------------- selector


def selector_forward(params, prefix, geom, x):
    """Particle weight in (0, 1): sigmoid(dense(relu(conv(relu(conv(x))))))."""
    (h1,), t1 = conv_forward(geom, x, [params[f"{prefix}.conv0"]])
    a1 = _relu(h1)
    (h2,), t2 = conv_forward(geom, a1, [params[f"{prefix}.conv1"]])
    a2 = _relu(h2)
    z = a2 @ params[f"{prefix}.dense.weight"] + params[f"{prefix}.dense.bias"]
    w = _sigmoid(z[:, 0])
    return w, (prefix, t1, h1, t2, h2, a2, w)


def selector_backward(params, cache, gw, grads, acc):
    prefix, t1, h1, t2, h2, a2, w = cache
    gz = (gw * w * (1.0 - w))[:, None]
    grads.add(f"{prefix}.dense.weight", a2.T @ gz)
    grads.add(f"{prefix}.dense.bias", gz.sum(0))
    gh2 = (gz @ params[f"{prefix}.dense.weight"].T) * (h2 > 0)
    ga1, (gk1,), _, _ = conv_backward(t2, [gh2], gs=acc(t2.geom))
    grads.add(f"{prefix}.conv1", gk1)
    gx, (gk0,), _, _ = conv_backward(t1, [ga1 * (h1 > 0)], gs=acc(t1.geom))
    grads.add(f"{prefix}.conv0", gk0)
    return gx


def particle_selector(params, prefix, f_cat, positions, R):
    """Selector weights for features ``f_cat`` living on ``positions``."""
    geom = ConvGeometry(np.asarray(positions), None, R, dtype=np.asarray(f_cat).dtype)
    return selector_forward(params, prefix, geom, np.asarray(f_cat))[0]


# --------------------------------------------------------------------------- fusion


def fusion_forward(params, k, geom, f_main, f_cons):
    """``w * f_cons + (1 - w) * f_main`` with ``w`` from the selector on transformed features."""
    if f_main.shape != f_cons.shape:
        raise ValueError(f"fusion operands differ in shape: {f_main.shape} vs {f_cons.shape}")
    (pm,), tm = conv_forward(geom, f_main, [params[f"fusion{k}.phi_main"]])
    (pc,), tc = conv_forward(geom, f_cons, [params[f"fusion{k}.phi_cons"]])
    cat = np.concatenate([_relu(pm), _relu(pc)], axis=1)
    w, sc = selector_forward(params, f"fusion{k}.selector", geom, cat)
    out = _blend(f_main, f_cons, w[:, None])
    return out, (k, f_main, f_cons, tm, pm, tc, pc, w, sc)


def fusion_backward(params, cache, gout, grads, acc):
    k, f_main, f_cons, tm, pm, tc, pc, w, sc = cache
    gw = np.sum(gout * (f_cons - f_main), axis=1)
    g_cons = w[:, None] * gout
    g_main = gout - g_cons
    gcat = selector_backward(params, sc, gw, grads, acc)
    cs = pm.shape[1]
    gm, (gkm,), _, _ = conv_backward(tm, [gcat[:, :cs] * (pm > 0)], gs=acc(tm.geom))
    gc, (gkc,), _, _ = conv_backward(tc, [gcat[:, cs:] * (pc > 0)], gs=acc(tc.geom))
    grads.add(f"fusion{k}.phi_main", gkm)
    grads.add(f"fusion{k}.phi_cons", gkc)
    return g_main + gm, g_cons + gc


def fuse_features(f_main, f_cons, positions, params, k=0, R=0.1125):
    geom = ConvGeometry(np.asarray(positions), None, R, dtype=np.asarray(f_main).dtype)
    return fusion_forward(params, k, geom, np.asarray(f_main), np.asarray(f_cons))[0]


# --------------------------------------------------------------------------- type-aware input


def _path_kernel(params, name, path):
    K = params[name]
    return materialize_antisymmetric(K) if path == "cons" else K


def taim_forward_cached(params, path, geom_ff, geom_sf, ffeat, sfeat):
    pre = f"taim_{path}"
    (lf,), t_lf = conv_forward(geom_ff, ffeat, [_path_kernel(params, f"{pre}.lift_fluid.kernel", path)],
                               [path == "cons"])
    lf = lf + params[f"{pre}.lift_fluid.bias"]
    (ls,), t_ls = conv_forward(geom_sf, sfeat, [_path_kernel(params, f"{pre}.lift_solid.kernel", path)])
    ls = ls + params[f"{pre}.lift_solid.bias"]
    ff, fs = _relu(lf), _relu(ls)
    w1, c_s1 = selector_forward(params, f"{pre}.sel1", geom_ff, np.concatenate([ff, fs], axis=1))
    c1 = _blend(fs, ff, w1[:, None])
    w2, c_s2 = selector_forward(params, f"{pre}.sel2", geom_ff, c1)
    c2 = _blend(fs, ff, w2[:, None])
    return c2, (path, t_lf, lf, t_ls, ls, ff, fs, w1, c_s1, w2, c_s2)


def taim_backward(params, cache, gc2, grads, acc):
    path, t_lf, lf, t_ls, ls, ff, fs, w1, c_s1, w2, c_s2 = cache
    pre = f"taim_{path}"
    diff = ff - fs
    gff = w2[:, None] * gc2
    gfs = gc2 - gff
    gc1 = selector_backward(params, c_s2, np.sum(gc2 * diff, axis=1), grads, acc)
    gff += w1[:, None] * gc1
    gfs += gc1 - w1[:, None] * gc1
    gcat = selector_backward(params, c_s1, np.sum(gc1 * diff, axis=1), grads, acc)
    C = ff.shape[1]
    gff += gcat[:, :C]
    gfs += gcat[:, C:]
    glf = gff * (lf > 0)
    gls = gfs * (ls > 0)
    grads.add(f"{pre}.lift_fluid.bias", glf.sum(0))
    grads.add(f"{pre}.lift_solid.bias", gls.sum(0))
    g_ffeat, (gk_f,), _, _ = conv_backward(t_lf, [glf], gs=acc(t_lf.geom))
    _, (gk_s,), _, _ = conv_backward(t_ls, [gls], gs=acc(t_ls.geom))
    if path == "cons":
        gk_f, gk_s = fold_antisymmetric(gk_f), fold_antisymmetric(gk_s)
    grads.add(f"{pre}.lift_fluid.kernel", gk_f)
    grads.add(f"{pre}.lift_solid.kernel", gk_s)
    return g_ffeat


def taim_forward(fluid_feats, solid_feats, fluid_pos, solid_pos, params, variant="cconv", R=0.1125):
    """Coupled fluid/solid input features on the fluid particles (width C)."""
    path = {"cconv": "main", "ascc": "cons"}[variant.lower()]
    dtype = np.asarray(fluid_feats).dtype
    geom_ff = ConvGeometry(np.asarray(fluid_pos), None, R, dtype=dtype)
    geom_sf = ConvGeometry(np.asarray(solid_pos).reshape(-1, 3), np.asarray(fluid_pos), R, dtype=dtype)
    return taim_forward_cached(params, path, geom_ff, geom_sf, np.asarray(fluid_feats, dtype),
                               np.asarray(solid_feats, dtype).reshape(-1, fluid_feats.shape[1]))[0]


# --------------------------------------------------------------------------- full model


@dataclass
class NetTape:
    cfg: ModelConfig
    params: dict
    geom_ff: ConvGeometry
    geom_sf: ConvGeometry
    ffeat: np.ndarray
    taim: dict
    fc_in: dict
    layers: list = field(default_factory=list)
    fusions: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    cons_raw: list = field(default_factory=list)


def _selector_switches(cache):
    return [cache[2] > 0, cache[4] > 0]


def tape_signature(tape: NetTape) -> str:
    """Digest of every discrete decision taken by a forward pass (ReLU masks and pair-map branches).

    Two evaluations with equal signatures lie on the same smooth piece of the network.
    """
    parts = tape.geom_ff.branches() + tape.geom_sf.branches()
    for p in PATHS:
        _, _, lf, _, ls, _, _, _, c_s1, _, c_s2 = tape.taim[p]
        parts += [lf > 0, ls > 0, tape.fc_in[p] > 0] + _selector_switches(c_s1) + _selector_switches(c_s2)
    for um, uc in tape.hidden[:-1]:
        parts += [um > 0, uc > 0]
    for fc in tape.fusions:
        parts += [fc[4] > 0, fc[6] > 0] + _selector_switches(fc[8])
    h = hashlib.sha1()
    for a in parts:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def forward(state_star: ParticleSet, params: dict, cfg: ModelConfig | None = None):
    """Predicted position correction ``dx`` (N, 3) for a post-external-force state."""
    return forward_arrays(state_star.fluid_pos, state_star.fluid_vel, state_star.solid_pos,
                          state_star.solid_normal, params, cfg)


def forward_arrays(fluid_pos, fluid_vel, solid_pos, solid_normal, params, cfg: ModelConfig | None = None):
    """``forward`` on raw arrays, computed in the dtype of ``params``."""
    cfg = cfg or ModelConfig()
    dtype = params["head.weight"].dtype
    x = np.asarray(fluid_pos, dtype).reshape(-1, 3)
    v = np.asarray(fluid_vel, dtype).reshape(-1, 3)
    sp = np.asarray(solid_pos, dtype).reshape(-1, 3)
    sn = np.asarray(solid_normal, dtype).reshape(-1, 3)
    if v.shape != x.shape:
        raise ValueError(f"fluid_vel {v.shape} does not match fluid_pos {x.shape}")
    ffeat = np.concatenate([np.ones((len(x), 1), dtype), v], axis=1)
    sfeat = np.concatenate([np.ones((len(sp), 1), dtype), sn], axis=1)
    geom_ff = ConvGeometry(x, None, cfg.radius, dtype=dtype)
    geom_sf = ConvGeometry(sp, x, cfg.radius, dtype=dtype)
    tape = NetTape(cfg, params, geom_ff, geom_sf, ffeat, {}, {})

    h0 = {}
    for p in PATHS:
        c2, tape.taim[p] = taim_forward_cached(params, p, geom_ff, geom_sf, ffeat, sfeat)
        d = ffeat @ params[f"fc_in_{p}.weight"] + params[f"fc_in_{p}.bias"]
        tape.fc_in[p] = d
        h0[p] = c2 + _relu(d)

    h = None
    for L in range(cfg.depth):
        Km = params[f"main.conv{L}.kernel"]
        Kc = materialize_antisymmetric(params[f"cons.conv{L}.kernel"])
        if L == 0:
            (rm,), tm = conv_forward(geom_ff, h0["main"], [Km])
            (rc,), tc = conv_forward(geom_ff, h0["cons"], [Kc], [True])
            tape.layers.append((tm, tc))
        else:
            (rm, rc), t = conv_forward(geom_ff, h, [Km, Kc], [False, True])
            tape.layers.append((t,))
        tape.cons_raw.append(rc)
        um = rm + params[f"main.conv{L}.bias"]
        uc = rc + params[f"cons.conv{L}.bias"]
        tape.hidden.append((um, uc))
        hn, fc = fusion_forward(params, L, geom_ff, _relu(um), _relu(uc))
        tape.fusions.append(fc)
        if L in cfg.residual_layers:
            hn = hn + h
        h = hn
    tape.hidden.append(h)
    dx = h @ params["head.weight"] + params["head.bias"]
    return dx, tape


def forward_backward(tape: NetTape, grad_dx, positions=False, frozen=()):
    """Gradients of ``sum(grad_dx * dx)``.

    Returns (param grads, grad w.r.t. fluid positions or None, grad w.r.t. fluid velocities).
    Tensors named in ``frozen`` get exactly zero gradient.
    """
    cfg, params = tape.cfg, tape.params
    dtype = params["head.weight"].dtype
    gdx = np.asarray(grad_dx, dtype)
    N = tape.geom_ff.n_queries
    if gdx.shape != (N, 3):
        raise ValueError(f"grad_dx must have shape ({N}, 3), got {gdx.shape}")
    grads = _Grads()
    acc = _PairAcc(positions)

    h = tape.hidden[-1]
    grads.add("head.weight", h.T @ gdx)
    grads.add("head.bias", gdx.sum(0))
    gh = gdx @ params["head.weight"].T

    gh0 = {}
    for L in reversed(range(cfg.depth)):
        um, uc = tape.hidden[L]
        g_in_res = gh if L in cfg.residual_layers else None
        gum, guc = fusion_backward(params, tape.fusions[L], gh, grads, acc)
        gum = gum * (um > 0)
        guc = guc * (uc > 0)
        grads.add(f"main.conv{L}.bias", gum.sum(0))
        grads.add(f"cons.conv{L}.bias", guc.sum(0))
        if L == 0:
            tm, tc = tape.layers[0]
            gm, (gkm,), _, _ = conv_backward(tm, [gum], gs=acc(tm.geom))
            gc, (gkc,), _, _ = conv_backward(tc, [guc], gs=acc(tc.geom))
            gh0 = {"main": gm, "cons": gc}
        else:
            (t,) = tape.layers[L]
            gh, (gkm, gkc), _, _ = conv_backward(t, [gum, guc], gs=acc(t.geom))
            if g_in_res is not None:
                gh = gh + g_in_res
        grads.add(f"main.conv{L}.kernel", gkm)
        grads.add(f"cons.conv{L}.kernel", fold_antisymmetric(gkc))

    gfeat = np.zeros_like(tape.ffeat)
    for p in PATHS:
        g = gh0[p]
        gd = g * (tape.fc_in[p] > 0)
        grads.add(f"fc_in_{p}.weight", tape.ffeat.T @ gd)
        grads.add(f"fc_in_{p}.bias", gd.sum(0))
        gfeat += gd @ params[f"fc_in_{p}.weight"].T
        gfeat += taim_backward(params, tape.taim[p], g, grads, acc)

    gpos = None
    if positions:
        gp, gq = tape.geom_ff.position_grads(acc(tape.geom_ff))
        _, gs = tape.geom_sf.position_grads(acc(tape.geom_sf))
        gpos = gp + gq + gs

    out = {name: np.asarray(grads.get(name, np.zeros_like(v)), dtype).reshape(v.shape) for name, v in params.items()}
    for name in frozen:
        out[name] = np.zeros_like(params[name])
    return out, gpos, gfeat[:, 1:4]


@dataclass
class Model:
    """Configuration plus parameter tensors."""

    config: ModelConfig
    params: dict

    def __post_init__(self):
        check_params(self.params, self.config)

    @classmethod
    def init(cls, cfg: ModelConfig | None = None, seed=0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        return cls(cfg, init_params(cfg, seed, dtype))

    def predict(self, state_star: ParticleSet):
        return forward(state_star, self.params, self.config)[0]
