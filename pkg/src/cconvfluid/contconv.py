"""Continuous convolutions on point clouds.

A filter is a 4x4x4 grid of (Cin, Cout) matrices sampled over the cube
[-1, 1]^3 at voxel centres {-0.75, -0.25, 0.25, 0.75}. Neighbour offsets are
scaled by 1/R, mapped from the unit ball to the cube and looked up with
clamped trilinear interpolation; every pair is weighted by ``window``.

Two evaluation orders are used, picked by channel count:

* gather first: ``A[q, v] = sum s * f_i`` then ``A @ G`` (cheap when Cin is small)
* transform first: ``P_i = f_i @ G`` then ``out[q] = sum s * P_i[v]``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .neighbors import NeighborList, build_neighbors

RES = 4
VOXELS = RES**3
_CORNERS = np.array([(cx, cy, cz) for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)], dtype=np.int64)
_FOUR_OVER_PI = 4.0 / np.pi


# --------------------------------------------------------------------------- maps


def _sphere_to_cylinder(r):
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    q2 = x * x + y * y
    n = np.sqrt(q2 + z * z)
    cap = 1.25 * z * z > q2
    with np.errstate(divide="ignore", invalid="ignore"):
        s_cap = np.sqrt(3.0 * n / (n + np.abs(z)))
        s_side = n / np.sqrt(q2)
    s = np.where(cap, s_cap, s_side)
    out = np.stack([x * s, y * s, np.where(cap, np.copysign(n, z), 1.5 * z)], axis=-1)
    return np.where((n > 0)[..., None], out, 0.0).astype(r.dtype, copy=False)


def _cylinder_to_cube(c):
    X, Y, Z = c[..., 0], c[..., 1], c[..., 2]
    r2 = np.sqrt(X * X + Y * Y)
    xdom = np.abs(Y) <= np.abs(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.where(xdom, np.copysign(r2, X), np.copysign(r2, Y))
        small = big * _FOUR_OVER_PI * np.arctan(np.where(xdom, Y / X, X / Y))
    nz = r2 > 0
    Xo = np.where(nz, np.where(xdom, big, small), 0.0)
    Yo = np.where(nz, np.where(xdom, small, big), 0.0)
    return np.stack([Xo, Yo, Z], axis=-1).astype(c.dtype, copy=False)


def ball_to_cube(r):
    """Volume-preserving odd bijection from the unit ball onto the cube [-1, 1]^3.

    Points outside the ball are first pulled back onto the unit sphere.
    """
    r = np.asarray(r)
    if not np.issubdtype(r.dtype, np.floating):
        r = r.astype(np.float64)
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    r = np.where(n > 1.0, r / np.maximum(n, 1.0), r)
    return _cylinder_to_cube(_sphere_to_cylinder(r))


def ball_to_cube_jacobian(r):
    """``ball_to_cube(r)`` and its Jacobian ``d out_j / d r_k`` with shape (..., 3, 3).

    Inputs are assumed to lie inside the unit ball. The map is homogeneous of
    degree one, so it has no derivative at the origin; zero is returned there.
    """
    r = np.asarray(r)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    q2 = x * x + y * y
    n = np.sqrt(q2 + z * z)
    qn = np.sqrt(q2)
    cap = 1.25 * z * z > q2
    live = n > 0
    one = np.ones_like(n)
    ns = np.where(live, n, one)
    qs = np.where(qn > 0, qn, one)
    a = np.abs(z)
    sg = np.copysign(one, z)
    dn = r / ns[..., None]

    s_cap = np.sqrt(3.0 * n / (ns + a))
    s_cap_safe = np.where(live, s_cap, one)
    da = np.zeros_like(r)
    da[..., 2] = sg
    ds_cap = (1.5 / s_cap_safe / (ns + a) ** 2)[..., None] * (a[..., None] * dn - n[..., None] * da)

    s_side = n / qs
    dq = np.stack([x / qs, y / qs, np.zeros_like(x)], axis=-1)
    ds_side = dn / qs[..., None] - (n / (qs * qs))[..., None] * dq

    s = np.where(cap, s_cap, s_side)
    ds = np.where(cap[..., None], ds_cap, ds_side)
    Jc = np.zeros(r.shape + (3,), r.dtype)
    Jc[..., 0, :] = x[..., None] * ds
    Jc[..., 0, 0] += s
    Jc[..., 1, :] = y[..., None] * ds
    Jc[..., 1, 1] += s
    Jc[..., 2, :] = np.where(cap[..., None], sg[..., None] * dn, 0.0)
    Jc[..., 2, 2] += np.where(cap, 0.0, 1.5)
    cyl = np.stack([x * s, y * s, np.where(cap, sg * n, 1.5 * z)], axis=-1)

    X, Y = cyl[..., 0], cyl[..., 1]
    r2 = np.sqrt(X * X + Y * Y)
    r2s = np.where(r2 > 0, r2, one)
    xdom = np.abs(Y) <= np.abs(X)
    Xs = np.where(X != 0, X, one)
    Ys = np.where(Y != 0, Y, one)
    th = np.arctan(np.where(xdom, Y / Xs, X / Ys))
    sig = np.where(xdom, np.copysign(one, X), np.copysign(one, Y))
    big = sig * r2
    small = big * _FOUR_OVER_PI * th
    # derivatives of (big, small) w.r.t. (dominant, other) cylinder coordinate
    D, O = np.where(xdom, X, Y), np.where(xdom, Y, X)
    dbig_dD, dbig_dO = sig * D / r2s, sig * O / r2s
    dsm_dD = sig * _FOUR_OVER_PI * (D * th - O) / r2s
    dsm_dO = sig * _FOUR_OVER_PI * (O * th + D) / r2s
    Jq = np.zeros(r.shape + (3,), r.dtype)
    Jq[..., 0, 0] = np.where(xdom, dbig_dD, dsm_dO)
    Jq[..., 0, 1] = np.where(xdom, dbig_dO, dsm_dD)
    Jq[..., 1, 0] = np.where(xdom, dsm_dD, dbig_dO)
    Jq[..., 1, 1] = np.where(xdom, dsm_dO, dbig_dD)
    Jq[..., 2, 2] = 1.0
    nzq = r2 > 0
    u = np.stack([np.where(nzq, np.where(xdom, big, small), 0.0), np.where(nzq, np.where(xdom, small, big), 0.0),
                  cyl[..., 2]], axis=-1)
    J = Jq @ Jc
    J = np.where(live[..., None, None], J, 0.0)
    u = np.where(live[..., None], u, 0.0)
    return u.astype(r.dtype, copy=False), J.astype(r.dtype, copy=False)


def window(d, R):
    """Density-normalisation weight ``(1 - d^2/R^2)^3`` inside the support, 0 outside."""
    d = np.asarray(d)
    t = 1.0 - (d * d) / (R * R)
    return np.where(d < R, t * t * t, 0.0 * t)


# --------------------------------------------------------------------------- kernels


def materialize_antisymmetric(half):
    """Full (4,4,4,Cin,Cout) filter from the first two slabs along x.

    Voxel (i, j, k) for i >= 2 is the negated value at (3-i, 3-j, 3-k).
    """
    half = np.asarray(half)
    if half.shape[:3] != (RES // 2, RES, RES):
        raise ValueError(f"half kernel must have leading shape (2, 4, 4), got {half.shape}")
    return np.concatenate([half, -half[::-1, ::-1, ::-1]], axis=0)


def fold_antisymmetric(grad_full):
    """Gradient w.r.t. the half parameters given the gradient of the full filter."""
    return grad_full[: RES // 2] - grad_full[RES // 2:][::-1, ::-1, ::-1]


@dataclass(frozen=True)
class KernelTensor:
    weights: np.ndarray

    @property
    def dims(self):
        return self.weights.shape

    def full(self):
        return self.weights


@dataclass(frozen=True)
class AsccHalfKernel:
    half_weights: np.ndarray
    mirror_axis: int = 0

    def __post_init__(self):
        if self.mirror_axis != 0:
            raise ValueError("only mirror_axis=0 is supported")

    def full(self):
        return materialize_antisymmetric(self.half_weights)


def _as_full(kernel):
    return kernel.full() if hasattr(kernel, "full") else np.asarray(kernel)


def _interp(u):
    """Flat corner voxel ids, trilinear weights and per-axis data for cube points ``u``."""
    t = 2.0 * u + 1.5
    tc = np.clip(t, 0.0, RES - 1.0)
    base = np.minimum(np.floor(tc), RES - 2).astype(np.int64)
    fr = tc - base
    w = np.stack([1.0 - fr, fr], axis=-1)  # (..., 3, 2)
    idx = base[..., None, :] + _CORNERS  # (..., 8, 3)
    corner = (idx[..., 0] * RES + idx[..., 1]) * RES + idx[..., 2]
    cw = w[..., 0, _CORNERS[:, 0]] * w[..., 1, _CORNERS[:, 1]] * w[..., 2, _CORNERS[:, 2]]
    return corner, cw.astype(u.dtype, copy=False), t, w


def interpolate_kernel(kernel, u):
    """Evaluate the continuous filter at cube points ``u`` (..., 3) -> (..., Cin, Cout)."""
    G = _as_full(kernel)
    u = np.asarray(u, G.dtype)
    corner, cw, _, _ = _interp(u)
    lead = u.shape[:-1]
    # the 8 corners of a cell are distinct voxels, so each point is one sparse row of weights
    W = np.zeros((int(np.prod(lead)), VOXELS), G.dtype)
    np.put_along_axis(W, corner.reshape(-1, 8), cw.reshape(-1, 8), axis=1)
    return (W @ G.reshape(VOXELS, -1)).reshape(*lead, *G.shape[3:])


# --------------------------------------------------------------------------- geometry


class ConvGeometry:
    """Per-pair interpolation data for one (points, queries, R) configuration.

    Shared by every convolution evaluated on the same positions.
    """

    def __init__(self, points, queries=None, R=1.0, nl: NeighborList | None = None, dtype=None):
        self.same = queries is None
        points = np.asarray(points)
        queries = points if queries is None else np.asarray(queries)
        self.dtype = np.dtype(dtype or np.result_type(points.dtype, queries.dtype, np.float32))
        self.R = float(R)
        self.n_points = len(points)
        self.n_queries = len(queries)
        if nl is None:
            nl = build_neighbors(queries, points, R)
        self.nl = nl
        self.offsets = nl.offsets
        self.pidx = nl.indices
        self.qidx = nl.query_index
        self.delta = nl.rel_offsets.astype(self.dtype)
        self.dist = np.sqrt(np.sum(self.delta * self.delta, axis=1))
        self.win = window(self.dist, R).astype(self.dtype)
        self.u = ball_to_cube(self.delta / self.dtype.type(R)).astype(self.dtype)
        self.corner, self.cw, self._t, self._w = _interp(self.u)
        self.s = np.ascontiguousarray(self.win[:, None] * self.cw)

    @property
    def n_pairs(self):
        return len(self.pidx)

    @cached_property
    def T(self):
        """Sum of pair weights per (query, voxel): shape (Q, 64)."""
        flat = np.bincount((self.qidx[:, None] * VOXELS + self.corner).ravel(), weights=self.s.ravel(),
                           minlength=self.n_queries * VOXELS)
        return flat.reshape(self.n_queries, VOXELS).astype(self.dtype)

    @cached_property
    def _slopes(self):
        """Window gradient (P, 3), trilinear weight slopes in cube space (P, 8, 3) and
        the scaled ball-to-cube Jacobian (P, 3, 3)."""
        R = self.R
        base = 1.0 - (self.dist * self.dist) / (R * R)
        dwin = (-6.0 / (R * R)) * (base * base)[:, None] * self.delta
        _, J = ball_to_cube_jacobian(self.delta / self.dtype.type(R))
        J = J * self.dtype.type(2.0 / R)
        inside = (self._t > 0) & (self._t < RES - 1)  # clamped axes carry no slope
        w = self._w
        sign = np.where(_CORNERS == 1, 1.0, -1.0)  # (8, 3)
        wsel = [w[:, ax, _CORNERS[:, ax]] for ax in range(3)]  # each (P, 8)
        dcw = np.stack(
            [sign[:, 0] * wsel[1] * wsel[2], sign[:, 1] * wsel[0] * wsel[2], sign[:, 2] * wsel[0] * wsel[1]], axis=-1
        ) * inside[:, None, :]
        return dwin.astype(self.dtype), dcw.astype(self.dtype), J.astype(self.dtype)

    @property
    def ds_ddelta(self):
        """d s[p, c] / d delta[p] with shape (pairs, 8, 3); zero for coincident pairs."""
        dwin, dcw, J = self._slopes
        return self.cw[:, :, None] * dwin[:, None, :] + self.win[:, None, None] * np.einsum("pck,pkj->pcj", dcw, J)

    def branches(self):
        """Discrete choices of the pair map (neighbour set, voxel cell, clamps, map branch, signs).

        Within one setting of these the pair weights are smooth in the positions.
        """
        r = self.delta / self.dtype.type(self.R)
        cyl = _sphere_to_cylinder(r)
        cap = 1.25 * r[:, 2] ** 2 > r[:, 0] ** 2 + r[:, 1] ** 2
        xdom = np.abs(cyl[:, 1]) <= np.abs(cyl[:, 0])
        clamp = (self._t <= 0) | (self._t >= RES - 1)
        return [self.offsets, self.pidx, self.corner, clamp, cap, xdom, np.signbit(self.delta)]

    def pair_grads(self):
        """Zeroed accumulator for per-(pair, corner) weight gradients."""
        return np.zeros((self.n_pairs, 8), self.dtype)

    def position_grads(self, gs):
        """Scatter per-(pair, corner) weight gradients onto point and query positions."""
        dwin, dcw, J = self._slopes
        a = np.einsum("pc,pck->pk", gs, dcw)
        gd = np.sum(gs * self.cw, axis=1)[:, None] * dwin + self.win[:, None] * np.einsum("pk,pkj->pj", a, J)
        gp = np.stack([np.bincount(self.pidx, weights=gd[:, k], minlength=self.n_points) for k in range(3)], axis=1)
        gq = -np.stack([np.bincount(self.qidx, weights=gd[:, k], minlength=self.n_queries) for k in range(3)], axis=1)
        return gp.astype(self.dtype), gq.astype(self.dtype)


# --------------------------------------------------------------------------- convolution


@dataclass
class ConvTape:
    """State kept by ``conv_forward`` for the reverse pass."""

    geom: ConvGeometry
    feats: np.ndarray
    kernels: list
    self_terms: list
    form: str
    buf: np.ndarray  # gathered A (Q, 64, Cin) or transformed P (N, 64, sum Cout)
    splits: list = field(default_factory=list)


def _check_kernel(G, cin):
    if G.ndim != 5 or G.shape[:3] != (RES, RES, RES):
        raise ValueError(f"kernel must have shape (4, 4, 4, Cin, Cout), got {G.shape}")
    if G.shape[3] != cin:
        raise ValueError(f"kernel expects {G.shape[3]} input channels, features have {cin}")


def conv_forward(geom: ConvGeometry, feats, kernels, self_terms=None, form=None):
    """Evaluate several filters on the same input features.

    ``self_terms[k]`` adds the query's own feature to every neighbour term,
    ``sum a (f_q + f_i) G``, which requires queries == points.
    Returns (list of outputs, tape).
    """
    F = np.ascontiguousarray(feats, dtype=geom.dtype)
    if F.ndim != 2 or F.shape[0] != geom.n_points:
        raise ValueError(f"features must have shape ({geom.n_points}, Cin), got {F.shape}")
    kernels = [np.asarray(_as_full(G), geom.dtype) for G in kernels]
    self_terms = list(self_terms or [False] * len(kernels))
    cin = F.shape[1]
    for G in kernels:
        _check_kernel(G, cin)
    if any(self_terms) and not geom.same:
        raise ValueError("the (f_q + f_i) term needs queries identical to points")
    couts = [G.shape[4] for G in kernels]
    if form is None:
        form = "gather" if cin <= sum(couts) else "spread"
    Q = geom.n_queries
    outs = []
    if form == "gather":
        A = np.zeros((Q, VOXELS, cin), geom.dtype)
        _kernels.gather(geom.offsets, geom.pidx, geom.corner, geom.s, F, A)
        for G, st in zip(kernels, self_terms):
            Ak = A + geom.T[:, :, None] * F[:, None, :] if st else A
            outs.append(Ak.reshape(Q, -1) @ G.reshape(VOXELS * cin, -1))
        return outs, ConvTape(geom, F, kernels, self_terms, form, A)

    W = np.concatenate([G.reshape(VOXELS, cin, -1).transpose(1, 0, 2) for G in kernels], axis=2)
    P = (F @ W.reshape(cin, -1)).reshape(geom.n_points, VOXELS, -1)
    out = np.zeros((Q, P.shape[2]), geom.dtype)
    _kernels.spread(geom.offsets, geom.pidx, geom.corner, geom.s, P, out)
    splits = np.cumsum([0] + couts)
    for k, st in enumerate(self_terms):
        o = out[:, splits[k]:splits[k + 1]]
        if st:
            o = o + np.einsum("qv,qvc->qc", geom.T, P[:, :, splits[k]:splits[k + 1]])
        outs.append(o)
    return outs, ConvTape(geom, F, kernels, self_terms, form, P, list(splits))


def conv_backward(tape: ConvTape, grad_outs, positions=False, gs=None):
    """Reverse pass of ``conv_forward``.

    Returns (grad_feats, [grad_kernel...], grad_points, grad_queries); the
    position gradients are None unless ``positions`` is set. Passing a
    ``geom.pair_grads()`` buffer as ``gs`` accumulates the pair-weight
    gradients there instead, so several convolutions on one geometry share a
    single ``geom.position_grads`` call; positions are then returned as None.
    """
    geom, F = tape.geom, tape.feats
    Q, cin = geom.n_queries, F.shape[1]
    if len(grad_outs) != len(tape.kernels):
        raise ValueError("one output gradient per kernel expected")
    gouts = []
    for G, g in zip(tape.kernels, grad_outs):
        g = np.ascontiguousarray(g, dtype=geom.dtype)
        if g.shape != (Q, G.shape[4]):
            raise ValueError(f"output gradient shape {g.shape} does not match tape ({Q}, {G.shape[4]})")
        gouts.append(g)
    scatter = positions and gs is None
    if scatter:
        gs = geom.pair_grads()
    track = gs is not None
    gkernels = []

    if tape.form == "gather":
        A = tape.buf
        gA = np.zeros((Q, VOXELS, cin), geom.dtype)
        gF = np.zeros_like(F)
        for G, st, g in zip(tape.kernels, tape.self_terms, gouts):
            Gf = G.reshape(VOXELS * cin, -1)
            Ak = A + geom.T[:, :, None] * F[:, None, :] if st else A
            gkernels.append((Ak.reshape(Q, -1).T @ g).reshape(G.shape))
            gAk = (g @ Gf.T).reshape(Q, VOXELS, cin)
            gA += gAk
            if st:
                gF += np.einsum("qv,qvc->qc", geom.T, gAk)
                if track:
                    U = np.einsum("qvc,qc->qv", gAk, F)
                    gs += U[geom.qidx[:, None], geom.corner]
        if track:
            _kernels.gather_t_dots(geom.offsets, geom.pidx, geom.corner, geom.s, gA, F, gF, gs)
        else:
            _kernels.gather_t(geom.offsets, geom.pidx, geom.corner, geom.s, gA, gF)
    else:
        P, splits = tape.buf, tape.splits
        gout = np.concatenate(gouts, axis=1)
        gP = np.zeros_like(P)
        if track:
            _kernels.spread_t_dots(geom.offsets, geom.pidx, geom.corner, geom.s, gout, P, gP, gs)
        else:
            _kernels.spread_t(geom.offsets, geom.pidx, geom.corner, geom.s, gout, gP)
        for k, st in enumerate(tape.self_terms):
            if not st:
                continue
            sl = slice(splits[k], splits[k + 1])
            gP[:, :, sl] += geom.T[:, :, None] * gouts[k][:, None, :]
            if track:
                U = np.einsum("qc,qvc->qv", gouts[k], P[:, :, sl])
                gs += U[geom.qidx[:, None], geom.corner]
        W = np.concatenate([G.reshape(VOXELS, cin, -1).transpose(1, 0, 2) for G in tape.kernels], axis=2)
        gPf = gP.reshape(geom.n_points, -1)
        gF = gPf @ W.reshape(cin, -1).T
        gW = (F.T @ gPf).reshape(cin, VOXELS, -1)
        for k, G in enumerate(tape.kernels):
            gkernels.append(gW[:, :, splits[k]:splits[k + 1]].transpose(1, 0, 2).reshape(G.shape))

    if scatter:
        gp, gq = geom.position_grads(gs)
        if geom.same:
            gp, gq = gp + gq, None
        return gF, gkernels, gp, gq
    return gF, gkernels, None, None


# --------------------------------------------------------------------------- public single-filter API


def cconv_forward(feats, points, queries, kernel, R, geom: ConvGeometry | None = None):
    """``out[q] = sum_{i in N(q, R)} a(x_i, x_q) f_i G(ball_to_cube((x_i - x_q) / R))``."""
    if geom is None:
        geom = ConvGeometry(points, queries, R, dtype=np.result_type(np.asarray(feats).dtype, np.float32))
    (out,), tape = conv_forward(geom, feats, [kernel])
    return out, tape


def cconv_backward(tape: ConvTape, grad_out):
    gF, (gK,), _, _ = conv_backward(tape, [grad_out])
    return gF, gK


def ascc_forward(feats, points, half_kernel, R, queries=None, geom: ConvGeometry | None = None):
    """Antisymmetric convolution ``out[q] = sum a (f_q + f_i) G_s(...)``.

    With ``queries`` given (a different point set) there is no query feature and
    the sum reduces to ``sum a f_i G_s(...)`` with the antisymmetric filter.
    """
    half = half_kernel.half_weights if isinstance(half_kernel, AsccHalfKernel) else np.asarray(half_kernel)
    if geom is None:
        geom = ConvGeometry(points, queries, R, dtype=np.result_type(np.asarray(feats).dtype, np.float32))
    (out,), tape = conv_forward(geom, feats, [materialize_antisymmetric(half)], [geom.same])
    return out, tape


def ascc_backward(tape: ConvTape, grad_out):
    gF, (gK,), _, _ = conv_backward(tape, [grad_out])
    return gF, fold_antisymmetric(gK)
