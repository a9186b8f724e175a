"""Planar/radial normalizing flows with hand-written reverse-mode gradients.

Everything here works on batches: points are ``(n, d)`` arrays.  A forward
pass returns the transformed points, the per-sample log |det J| and a cache
that :meth:`FlowStack.pullback` consumes to produce parameter gradients.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

EPS_INV = 1e-7
LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(ValueError):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_batch(z, dim):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != dim:
        raise FlowError(f"dimension mismatch: expected {dim}, got shape {z.shape}")
    return z, single


def _row_weights(cot, n):
    cot = np.asarray(cot, dtype=float)
    if cot.ndim == 0:
        return np.full(n, float(cot))
    return cot.reshape(n)


# ---------------------------------------------------------------------------
# invertibility reparameterization


def planar_constrain(u, w):
    """Return u_hat with w.u_hat >= -1 + EPS_INV.

    u_hat = u + (m(w.u) - w.u) w / |w|^2 with m(x) = -1 + softplus(x).
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    ww = float(w @ w)
    if ww == 0.0:
        raise FlowError("degenerate projection vector")
    x = float(w @ u)
    m = -1.0 + max(float(_softplus(x)), EPS_INV)
    return u + (m - x) * w / ww


def _planar_constrain_vjp(u, w, g_uhat):
    """Pull a cotangent on u_hat back to (u, w)."""
    ww = float(w @ w)
    x = float(w @ u)
    sp = float(_softplus(x))
    if sp > EPS_INV:
        m, dm = -1.0 + sp, float(_sigmoid(x))
    else:
        m, dm = -1.0 + EPS_INV, 0.0
    q = w / ww
    gq = float(g_uhat @ q)
    g_u = g_uhat + gq * (dm - 1.0) * w
    g_w = gq * (dm - 1.0) * u + (m - x) * (g_uhat / ww - 2.0 * w * float(w @ g_uhat) / ww**2)
    return g_u, g_w


# ---------------------------------------------------------------------------
# layers


@dataclass
class PlanarLayer:
    """z -> z + u_hat * tanh(w.z + b); ``u`` is stored raw, projected on use."""

    u: np.ndarray
    w: np.ndarray
    b: float = 0.0

    kind = "planar"
    param_names = ("u", "w", "b")

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        self.b = float(self.b)
        if self.u.shape != self.w.shape or self.u.size < 1:
            raise FlowError("planar layer needs u and w of equal dimension >= 1")

    @property
    def dim(self):
        return self.u.size

    @classmethod
    def init(cls, dim, rng, scale=0.01):
        return cls(rng.normal(0.0, scale, dim), rng.normal(0.0, scale, dim), 0.0)

    def u_hat(self):
        return planar_constrain(self.u, self.w)

    def forward(self, z):
        uh = self.u_hat()
        a = z @ self.w + self.b
        h = np.tanh(a)
        dh = 1.0 - h * h
        s = float(self.w @ uh)
        det = 1.0 + dh * s
        out = z + h[:, None] * uh
        return out, np.log(np.abs(det)), (z, uh, h, dh, s, det)

    def backward(self, cache, g_out, g_ld):
        z, uh, h, dh, s, det = cache
        w = self.w
        gu_dot = g_out @ uh
        ddh = -2.0 * h * dh
        ga = gu_dot * dh + g_ld * ddh * s / det
        g_z = g_out + ga[:, None] * w
        g_s = float(np.sum(g_ld * dh / det))
        g_uhat = h @ g_out + g_s * w
        g_w = ga @ z + g_s * uh
        g_b = float(np.sum(ga))
        g_u, g_w_extra = _planar_constrain_vjp(self.u, w, g_uhat)
        return g_z, {"u": g_u, "w": g_w + g_w_extra, "b": g_b}


@dataclass
class RadialLayer:
    """z -> z + beta * (z - z0) / (alpha + |z - z0|).

    alpha and beta are clamped on use: alpha >= EPS_INV, beta >= -alpha + EPS_INV.
    """

    z0: np.ndarray
    alpha: float = 1.0
    beta: float = 0.0

    kind = "radial"
    param_names = ("z0", "alpha", "beta")

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float).reshape(-1)
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        if self.z0.size < 1:
            raise FlowError("radial layer needs dimension >= 1")
        if self.alpha <= 0:
            raise FlowError("radial alpha must be positive")

    @property
    def dim(self):
        return self.z0.size

    @classmethod
    def init(cls, dim, rng, scale=0.01):
        return cls(rng.normal(0.0, scale, dim), 1.0, 0.0)

    def _effective(self):
        a = max(self.alpha, EPS_INV)
        b = max(self.beta, -a + EPS_INV)
        return a, b

    def forward(self, z):
        d = self.dim
        alpha, beta = self._effective()
        delta = z - self.z0
        r = np.sqrt(np.sum(delta * delta, axis=1))
        h = 1.0 / (alpha + r)
        A = 1.0 + beta * h
        B = 1.0 + beta * alpha * h * h
        out = z + (beta * h)[:, None] * delta
        ld = (d - 1) * np.log(A) + np.log(B)
        return out, ld, (delta, r, h, A, B, alpha, beta)

    def backward(self, cache, g_out, g_ld):
        delta, r, h, A, B, alpha, beta = cache
        d = self.dim
        gd = np.sum(g_out * delta, axis=1)
        g_h = beta * gd + g_ld * ((d - 1) * beta / A + 2.0 * beta * alpha * h / B)
        g_r = -h * h * g_h
        g_alpha = float(np.sum(g_r) + np.sum(g_ld * beta * h * h / B))
        g_beta = float(np.sum(h * gd) + np.sum(g_ld * ((d - 1) * h / A + alpha * h * h / B)))
        safe_r = np.where(r > 0, r, 1.0)
        radial = np.where(r > 0, g_r / safe_r, 0.0)
        g_delta = (beta * h)[:, None] * g_out + radial[:, None] * delta
        g_z = g_out + g_delta
        g_z0 = -np.sum(g_delta, axis=0)
        # chain through the clamps
        if self.beta >= -alpha + EPS_INV:
            g_beta_raw, g_alpha_hat = g_beta, g_alpha
        else:
            g_beta_raw, g_alpha_hat = 0.0, g_alpha - g_beta
        g_alpha_raw = g_alpha_hat if self.alpha >= EPS_INV else 0.0
        return g_z, {"z0": g_z0, "alpha": g_alpha_raw, "beta": g_beta_raw}


def layer_forward(layer, z):
    zb, single = _as_batch(z, layer.dim)
    out = layer.forward(zb)[0]
    return out[0] if single else out


def layer_log_det(layer, z):
    zb, single = _as_batch(z, layer.dim)
    ld = layer.forward(zb)[1]
    return float(ld[0]) if single else ld


# ---------------------------------------------------------------------------
# output maps


@dataclass
class IdentityMap:
    kind = "identity"
    param_names = ()

    def out_dim(self, dim):
        return dim

    def forward(self, y):
        return y, np.zeros(y.shape[0]), None

    def backward(self, cache, g_out, g_ld):
        return g_out, {}


@dataclass
class SimplexMap:
    """R^k -> {s > 0, sum(s) < 1}: s_i = exp(y_i) / (sum_j exp(y_j) + 1).

    The Jacobian is diag(s) - s s^T, so log|det| = sum(log s_i) + log(1 - sum s).
    """

    kind = "simplex"
    param_names = ()

    def out_dim(self, dim):
        return dim

    def forward(self, y):
        k = y.shape[1]
        top = np.maximum(np.max(y, axis=1), 0.0)
        e = np.exp(y - top[:, None])
        e_last = np.exp(-top)
        lse = top + np.log(np.sum(e, axis=1) + e_last)
        s = np.exp(y - lse[:, None])
        ld = np.sum(y, axis=1) - (k + 1) * lse
        return s, ld, s

    def backward(self, s, g_out, g_ld):
        k = s.shape[1]
        g_y = s * (g_out - np.sum(s * g_out, axis=1)[:, None])
        g_y += g_ld[:, None] * (1.0 - (k + 1) * s)
        return g_y, {}


@dataclass
class PositiveAffineMap:
    """Elementwise y -> exp(a*y + b)."""

    a: float = 1.0
    b: float = 0.0

    kind = "positive_affine"
    param_names = ("a", "b")

    def __post_init__(self):
        self.a = float(self.a)
        self.b = float(self.b)

    def out_dim(self, dim):
        return dim

    def forward(self, y):
        if self.a == 0.0:
            raise FlowError("non-invertible output map")
        t = self.a * y + self.b
        s = np.exp(t)
        k = y.shape[1]
        ld = k * np.log(abs(self.a)) + np.sum(t, axis=1)
        return s, ld, (y, s)

    def backward(self, cache, g_out, g_ld):
        y, s = cache
        k = y.shape[1]
        gs = g_out * s
        g_y = self.a * gs + self.a * g_ld[:, None]
        g_a = float(np.sum(gs * y) + np.sum(g_ld) * k / self.a + np.sum(g_ld * np.sum(y, axis=1)))
        g_b = float(np.sum(gs) + k * np.sum(g_ld))
        return g_y, {"a": g_a, "b": g_b}


def output_map_apply(omap, z):
    zb, single = _as_batch(z, np.asarray(z).shape[-1])
    s, ld, _ = omap.forward(zb)
    if single:
        return s[0], float(ld[0])
    return s, ld


# ---------------------------------------------------------------------------
# stack


class ParamGradient:
    """Gradient slots mirroring a FlowStack: one dict per layer plus the map."""

    def __init__(self, layers, output_map):
        self.layers = layers
        self.output_map = output_map

    @classmethod
    def zeros_like(cls, stack):
        return cls.from_flat(stack, np.zeros(stack.n_params))

    @classmethod
    def from_flat(cls, stack, flat):
        layers = [{} for _ in stack.layers]
        omap = {}
        i = 0
        for idx, name, _ in stack.named_params():
            owner = stack.output_map if idx == "out" else stack.layers[idx]
            slot = omap if idx == "out" else layers[idx]
            cur = getattr(owner, name)
            if np.ndim(cur):
                slot[name] = np.array(flat[i:i + cur.size], dtype=float)
                i += cur.size
            else:
                slot[name] = float(flat[i])
                i += 1
        return cls(layers, omap)

    def flat(self):
        parts = [np.atleast_1d(np.asarray(v, dtype=float)) for d in self.layers for v in d.values()]
        parts += [np.atleast_1d(float(v)) for v in self.output_map.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def _like(self, flat):
        out = ParamGradient([dict(d) for d in self.layers], dict(self.output_map))
        i = 0
        for d in out.layers:
            for k, v in d.items():
                size = np.size(v)
                d[k] = flat[i:i + size].copy() if np.ndim(v) else float(flat[i])
                i += size
        for k in out.output_map:
            out.output_map[k] = float(flat[i])
            i += 1
        return out

    def __add__(self, other):
        return self._like(self.flat() + other.flat())

    def __mul__(self, scale):
        return self._like(self.flat() * float(scale))

    __rmul__ = __mul__

    def __repr__(self):
        return f"ParamGradient({self.flat()!r})"


@dataclass
class FlowStack:
    dim: int
    layers: list = field(default_factory=list)
    output_map: object = field(default_factory=IdentityMap)

    def __post_init__(self):
        for layer in self.layers:
            if layer.dim != self.dim:
                raise FlowError(f"layer dimension {layer.dim} != stack dimension {self.dim}")

    @classmethod
    def planar(cls, dim, n_layers, rng, output_map=None, scale=0.01):
        layers = [PlanarLayer.init(dim, rng, scale) for _ in range(n_layers)]
        return cls(dim, layers, output_map if output_map is not None else IdentityMap())

    @property
    def out_dim(self):
        return self.output_map.out_dim(self.dim)

    # -- forward / backward -------------------------------------------------

    def forward(self, z0):
        """Batched forward pass: returns (z_out, total_log_det, cache)."""
        z = np.asarray(z0, dtype=float)
        caches = []
        total = np.zeros(z.shape[0])
        for layer in self.layers:
            z, ld, c = layer.forward(z)
            total = total + ld
            caches.append(c)
        out, ld, c_map = self.output_map.forward(z)
        return out, total + ld, (caches, c_map)

    def pullback(self, cache, cot_out, cot_logdet):
        caches, c_map = cache
        n = np.shape(cot_out)[0]
        g_ld = _row_weights(cot_logdet, n)
        g, g_map = self.output_map.backward(c_map, np.asarray(cot_out, dtype=float), g_ld)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(caches[i], g, g_ld)
        return ParamGradient(grads, g_map)

    # -- flat parameter access (optimizer and serialization) ----------------

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                out.append((i, name, np.atleast_1d(np.asarray(getattr(layer, name), dtype=float))))
        for name in self.output_map.param_names:
            out.append(("out", name, np.atleast_1d(float(getattr(self.output_map, name)))))
        return out

    @property
    def n_params(self):
        return int(sum(v.size for _, _, v in self.named_params()))

    def get_flat(self):
        params = self.named_params()
        return np.concatenate([v for _, _, v in params]) if params else np.zeros(0)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        i = 0
        for layer in self.layers:
            for name in layer.param_names:
                cur = getattr(layer, name)
                if np.ndim(cur):
                    setattr(layer, name, flat[i:i + cur.size].copy())
                    i += cur.size
                else:
                    setattr(layer, name, float(flat[i]))
                    i += 1
        for name in self.output_map.param_names:
            setattr(self.output_map, name, float(flat[i]))
            i += 1

    def copy(self):
        import copy

        return copy.deepcopy(self)


def stack_forward(stack, z0):
    zb, single = _as_batch(z0, stack.dim)
    out, ld, _ = stack.forward(zb)
    if single:
        return out[0], float(ld[0])
    return out, ld


def base_log_density(z0):
    z0 = np.asarray(z0, dtype=float)
    d = z0.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * np.sum(z0 * z0, axis=-1)


def log_density(stack, z0):
    """log p_phi(f_phi(z0)) = log p0(z0) - log|det J(z0)|."""
    zb, single = _as_batch(z0, stack.dim)
    _, ld, _ = stack.forward(zb)
    res = base_log_density(zb) - ld
    return float(res[0]) if single else res


def stack_pullback(stack, z0, cotangent_out, cotangent_logdet):
    """Gradient of sum_i [cot_out_i . f(z0_i) + cot_ld_i * logdet(z0_i)] w.r.t. parameters."""
    zb, single = _as_batch(z0, stack.dim)
    cot = np.asarray(cotangent_out, dtype=float)
    if single:
        cot = cot[None, :]
    _, _, cache = stack.forward(zb)
    return stack.pullback(cache, cot, cotangent_logdet)


def invert_scalar(stack, x, lo=-40.0, hi=40.0, tol=1e-13):
    """Invert a monotone d=1 stack at output x by bisection."""
    if stack.dim != 1:
        raise FlowError("bisection inversion only supports d=1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ends = stack.forward(np.array([[lo], [hi]]))[0][:, 0]
    sign = 1.0 if ends[1] >= ends[0] else -1.0
    a = np.full(x.shape, lo)
    b = np.full(x.shape, hi)
    for _ in range(200):
        mid = 0.5 * (a + b)
        val = stack.forward(mid[:, None])[0][:, 0]
        below = sign * (val - x) < 0
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
        if np.max(b - a) < tol:
            break
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# serialization: one line per named array, "layer<TAB>kind<TAB>name<TAB>hex floats"

_MAPS = {"identity": IdentityMap, "simplex": SimplexMap, "positive_affine": PositiveAffineMap}
_LAYERS = {"planar": PlanarLayer, "radial": RadialLayer}


def dump_params(stack):
    lines = [f"# flowstack dim={stack.dim} layers={len(stack.layers)} output={stack.output_map.kind}"]
    for i, layer in enumerate(stack.layers):
        for name in layer.param_names:
            vals = np.atleast_1d(np.asarray(getattr(layer, name), dtype=float))
            lines.append(f"{i}\t{layer.kind}\t{name}\t" + " ".join(float(v).hex() for v in vals))
    for name in stack.output_map.param_names:
        lines.append(f"out\t{stack.output_map.kind}\t{name}\t{float(getattr(stack.output_map, name)).hex()}")
    return "\n".join(lines) + "\n"


def load_params(text):
    lines = text.strip().splitlines()
    m = re.match(r"# flowstack dim=(\d+) layers=(\d+) output=(\w+)", lines[0])
    if not m:
        raise FlowError("not a flowstack parameter file")
    dim, n_layers, out_kind = int(m.group(1)), int(m.group(2)), m.group(3)
    fields = [{} for _ in range(n_layers)]
    kinds = [None] * n_layers
    map_fields = {}
    for line in lines[1:]:
        idx, kind, name, values = line.split("\t")
        vals = np.array([float.fromhex(v) for v in values.split()])
        if idx == "out":
            map_fields[name] = float(vals[0])
        else:
            i = int(idx)
            kinds[i] = kind
            fields[i][name] = vals
    layers = []
    for kind, f in zip(kinds, fields):
        cls = _LAYERS[kind]
        args = {k: (v if k in ("u", "w", "z0") else float(v[0])) for k, v in f.items()}
        layers.append(cls(**args))
    return FlowStack(dim, layers, _MAPS[out_kind](**map_fields))
