"""Polynomial right-hand sides: the pi-net V1 network, its exact monomial
expansion, a direct monomial-coefficient model, and the hybrid
``f_known + network`` field.

All evaluation methods accept a single state ``(d,)`` or a batch ``(N, d)``
and return results with the matching leading shape.
"""
import csv
import functools
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import DimensionMismatch, InvalidConfig

DEDUP_TOL = 1e-300
ARCHITECTURES = ("pinet_v1", "direct")


# ---------------------------------------------------------------------------
# monomial basis


def graded_exponents(dim, degree):
    """All exponent tuples of total degree <= ``degree`` in graded order.

    Within one degree the order is reverse-lexicographic on the tuple, so
    ``y1`` comes before ``y2`` and ``y1**2`` before ``y1*y2``.
    """
    out = []
    for deg in range(degree + 1):
        level = []

        def rec(prefix, left, slots):
            if slots == 1:
                level.append(tuple(prefix + [left]))
                return
            for e in range(left, -1, -1):
                rec(prefix + [e], left - e, slots - 1)

        rec([], deg, dim)
        out.extend(level)
    return out


def graded_key(exponents):
    return (sum(exponents), tuple(-e for e in exponents))


class MonomialBasis:
    """Monomials of total degree <= ``degree`` in ``dim`` variables."""

    def __init__(self, dim, degree, include_constant=True):
        if dim < 1 or degree < 0:
            raise InvalidConfig(f"bad basis dim={dim} degree={degree}")
        self.dim = dim
        self.degree = degree
        self.include_constant = include_constant
        exps = graded_exponents(dim, degree)
        if not include_constant:
            exps = exps[1:]
        self.exponents = np.array(exps, dtype=np.int64).reshape(len(exps), dim)
        self.keys = [tuple(int(v) for v in e) for e in self.exponents]
        self.index = {k: i for i, k in enumerate(self.keys)}
        m = len(self.keys)
        # d(phi_m)/dx_l = e_ml * phi[down[m, l]]
        self._down = np.zeros((m, dim), dtype=np.int64)
        self._dcoef = np.zeros((m, dim))
        # x_l * phi_m = phi[up[m, l]], -1 when the degree would exceed the cap
        self._up = np.full((m, dim), -1, dtype=np.int64)
        for i, key in enumerate(self.keys):
            for l in range(dim):
                if key[l] > 0:
                    lower = list(key)
                    lower[l] -= 1
                    j = self.index.get(tuple(lower))
                    if j is not None:
                        self._down[i, l] = j
                        self._dcoef[i, l] = key[l]
                raised = list(key)
                raised[l] += 1
                j = self.index.get(tuple(raised))
                if j is not None:
                    self._up[i, l] = j
        self._pow = self.exponents.max(initial=0)

    def __len__(self):
        return len(self.keys)

    def features(self, x):
        """Monomial values, shape ``(N, M)`` for ``x`` of shape ``(N, d)``."""
        x = np.asarray(x, dtype=np.float64)
        return monomial_features(x, self.exponents)

    def feature_jacobian(self, x, phi=None):
        """d(phi)/dx, shape ``(N, M, d)``. Needs the constant-including basis."""
        if phi is None:
            phi = self.features(x)
        if not self.include_constant:
            full = basis(self.dim, self.degree, True)
            phi_full = full.features(x)
            return full.feature_jacobian(x, phi_full)[:, 1:, :]
        return self._dcoef[None] * phi[:, self._down]

    def shift(self, coeffs, var):
        """Multiply polynomials (rows of ``coeffs`` over this basis) by ``x_var``."""
        up = self._up[:, var]
        keep = up >= 0
        overflow = coeffs[..., ~keep]
        if np.any(overflow != 0.0):
            raise InvalidConfig("product exceeds basis degree")
        out = np.zeros_like(coeffs)
        out[..., up[keep]] = coeffs[..., keep]
        return out


@functools.lru_cache(maxsize=64)
def basis(dim, degree, include_constant=True):
    return MonomialBasis(dim, degree, include_constant)


def monomial_features(x, exponents):
    # repeated multiplication keeps integer powers exact for small exponents
    n = x.shape[0]
    m, d = exponents.shape
    out = np.ones((n, m))
    for l in range(d):
        e = exponents[:, l]
        emax = int(e.max(initial=0))
        if emax == 0:
            continue
        powers = np.ones((n, emax + 1))
        for p in range(1, emax + 1):
            powers[:, p] = powers[:, p - 1] * x[:, l]
        out *= powers[:, e]
    return out


# ---------------------------------------------------------------------------
# symbolic polynomials


@dataclass
class MonomialPolynomial:
    """Sparse polynomial: exponent tuple -> coefficient."""

    state_dim: int
    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for key, c in self.terms.items():
            key = tuple(int(e) for e in key)
            if len(key) != self.state_dim or min(key, default=0) < 0:
                raise DimensionMismatch(f"exponent {key} does not fit dimension {self.state_dim}")
            c = float(c)
            if abs(c) > DEDUP_TOL:
                clean[key] = clean.get(key, 0.0) + c
        self.terms = {k: v for k, v in clean.items() if abs(v) > DEDUP_TOL}

    @property
    def degree(self):
        return max((sum(k) for k in self.terms), default=0)

    def sorted_terms(self):
        return sorted(self.terms.items(), key=lambda kv: graded_key(kv[0]))

    def __call__(self, x):
        return eval_monomial(self, x)

    def render(self, digits=12, names=None):
        """Human-readable form, e.g. ``-10000 y1 + 2.2e-11``."""
        if names is None:
            names = [f"y{i + 1}" for i in range(self.state_dim)]
        if not self.terms:
            return "0"
        parts = []
        for key, c in sorted(self.terms.items(), key=lambda kv: (-sum(kv[0]), tuple(-e for e in kv[0]))):
            factors = []
            for name, e in zip(names, key):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            mag = f"{abs(c):.{digits}g}"
            body = mag if not factors else (" ".join(factors) if mag == "1" else mag + " " + " ".join(factors))
            sign = "-" if c < 0 else "+"
            parts.append((sign, body))
        first_sign, first = parts[0]
        text = ("-" if first_sign == "-" else "") + first
        for sign, body in parts[1:]:
            text += f" {sign} {body}"
        return text


def eval_monomial(poly, x):
    """Evaluate ``poly`` at a state (scalar result) or batch of states."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != poly.state_dim:
        raise DimensionMismatch(f"state has {xb.shape[1]} components, polynomial expects {poly.state_dim}")
    if not poly.terms:
        vals = np.zeros(xb.shape[0])
    else:
        keys = np.array(list(poly.terms.keys()), dtype=np.int64)
        coeffs = np.array(list(poly.terms.values()))
        vals = monomial_features(xb, keys) @ coeffs
    return float(vals[0]) if single else vals


def polynomials_to_matrix(polys, dim, degree):
    """Dense ``(len(polys), M)`` coefficient matrix over the graded basis."""
    b = basis(dim, degree)
    out = np.zeros((len(polys), len(b)))
    for i, p in enumerate(polys):
        for key, c in p.terms.items():
            j = b.index.get(key)
            if j is None:
                raise DimensionMismatch(f"term {key} exceeds degree {degree}")
            out[i, j] = c
    return out


def matrix_to_polynomials(coeffs, b):
    return [MonomialPolynomial(b.dim, dict(zip(b.keys, row))) for row in np.asarray(coeffs)]


def write_expansion_csv(path, polys):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["exponent_tuple", "output_index", "coefficient"])
        for i, p in enumerate(polys):
            for key, c in p.sorted_terms():
                w.writerow([" ".join(str(e) for e in key), i, repr(float(c))])


def read_expansion_csv(path, state_dim):
    terms = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = tuple(int(e) for e in row["exponent_tuple"].split())
            terms.setdefault(int(row["output_index"]), {})[key] = float(row["coefficient"])
    n_out = max(terms, default=-1) + 1
    return [MonomialPolynomial(state_dim, terms.get(i, {})) for i in range(n_out)]


# ---------------------------------------------------------------------------
# trainable models


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise DimensionMismatch(f"state shape {x.shape} does not match dimension {dim}")
    return xb, single


class DirectModel:
    """Polynomial field whose parameters are the monomial coefficients.

    ``coeffs`` has shape ``(d, M)``; the flattened parameter vector is its
    row-major ravel, i.e. output-major.
    """

    architecture = "direct"

    def __init__(self, state_dim, degree, coeffs=None, include_bias=True):
        self.state_dim = int(state_dim)
        self.degree = int(degree)
        self.include_bias = bool(include_bias)
        self.basis = basis(self.state_dim, self.degree, self.include_bias)
        shape = (self.state_dim, len(self.basis))
        if coeffs is None:
            coeffs = np.zeros(shape)
        coeffs = np.array(coeffs, dtype=np.float64).reshape(shape)
        coeffs.setflags(write=False)
        self.coeffs = coeffs

    @classmethod
    def from_polynomials(cls, polys, degree=None, include_bias=True):
        dim = polys[0].state_dim
        if degree is None:
            degree = max(p.degree for p in polys)
        b = basis(dim, degree, include_bias)
        coeffs = np.zeros((dim, len(b)))
        for i, p in enumerate(polys):
            for key, c in p.terms.items():
                if key not in b.index:
                    raise DimensionMismatch(f"term {key} not representable")
                coeffs[i, b.index[key]] = c
        return cls(dim, degree, coeffs, include_bias)

    @property
    def n_params(self):
        return self.coeffs.size

    @property
    def params(self):
        return self.coeffs.ravel()

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        return DirectModel(self.state_dim, self.degree, theta, self.include_bias)

    def forward(self, x):
        xb, single = _as_batch(x, self.state_dim)
        out = self.basis.features(xb) @ self.coeffs.T
        return out[0] if single else out

    def jac_state(self, x):
        xb, single = _as_batch(x, self.state_dim)
        dphi = self.basis.feature_jacobian(xb)
        out = np.einsum("im,nml->nil", self.coeffs, dphi)
        return out[0] if single else out

    def jac_params(self, x):
        xb, single = _as_batch(x, self.state_dim)
        phi = self.basis.features(xb)
        n, m = phi.shape
        d = self.state_dim
        out = np.zeros((n, d, d, m))
        for i in range(d):
            out[:, i, i, :] = phi
        out = out.reshape(n, d, d * m)
        return out[0] if single else out

    def expand(self):
        return [MonomialPolynomial(self.state_dim, dict(zip(self.basis.keys, row))) for row in self.coeffs]

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "state_dim": self.state_dim,
            "degree": self.degree,
            "include_bias": self.include_bias,
            "layer_shapes": [list(self.coeffs.shape)],
            "params": [float(v) for v in self.params],
        }


class PiNetModel:
    """pi-net V1 polynomial network (no activations).

    Wiring, with ``a_k = W_k x + b_k`` (hidden width ``m``)::

        z_1 = a_1
        z_k = a_k * z_{k-1} + z_{k-1}      k = 2..D   (Hadamard product)
        out = W_out z_D + b_out

    Each hidden unit is a product of D affine forms, so with enough width
    the output spans every polynomial of degree <= D. The default width is
    the number of such monomials.
    """

    architecture = "pinet_v1"

    def __init__(self, state_dim, degree, width=None, params=None, include_bias=True):
        if degree < 1:
            raise InvalidConfig("pi-net degree must be >= 1")
        self.state_dim = int(state_dim)
        self.degree = int(degree)
        self.width = int(width) if width is not None else comb(self.state_dim + self.degree, self.degree)
        self.include_bias = bool(include_bias)
        self.layer_shapes = self._shapes()
        n = sum(int(np.prod(s)) for s in self.layer_shapes)
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=np.float64)
        if params.shape != (n,):
            raise DimensionMismatch(f"expected {n} parameters, got {params.shape}")
        params.setflags(write=False)
        self._params = params
        self._unpack()

    def _shapes(self):
        d, m = self.state_dim, self.width
        shapes = []
        for _ in range(self.degree):
            shapes.append((m, d))
            if self.include_bias:
                shapes.append((m,))
        shapes.append((d, m))
        if self.include_bias:
            shapes.append((d,))
        return shapes

    def _unpack(self):
        arrays = []
        pos = 0
        for s in self.layer_shapes:
            size = int(np.prod(s))
            arrays.append(self._params[pos:pos + size].reshape(s))
            pos += size
        it = iter(arrays)
        self.weights, self.biases = [], []
        m, d = self.width, self.state_dim
        for _ in range(self.degree):
            self.weights.append(next(it))
            self.biases.append(next(it) if self.include_bias else np.zeros(m))
        self.w_out = next(it)
        self.b_out = next(it) if self.include_bias else np.zeros(d)

    @classmethod
    def initialized(cls, state_dim, degree, seed=0, width=None, include_bias=True, scale=0.1):
        probe = cls(state_dim, degree, width=width, include_bias=include_bias)
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-scale, scale, size=probe.n_params)
        return probe.with_params(theta)

    @property
    def n_params(self):
        return self._params.size

    @property
    def params(self):
        return self._params

    def with_params(self, theta):
        return PiNetModel(self.state_dim, self.degree, self.width, theta, self.include_bias)

    def _hidden(self, xb):
        acts = [xb @ w.T + b for w, b in zip(self.weights, self.biases)]
        zs = [acts[0]]
        for a in acts[1:]:
            zs.append((a + 1.0) * zs[-1])
        return acts, zs

    def forward(self, x):
        xb, single = _as_batch(x, self.state_dim)
        _, zs = self._hidden(xb)
        out = zs[-1] @ self.w_out.T + self.b_out
        return out[0] if single else out

    def jac_state(self, x):
        xb, single = _as_batch(x, self.state_dim)
        acts, zs = self._hidden(xb)
        dz = np.broadcast_to(self.weights[0], (xb.shape[0],) + self.weights[0].shape)
        for k in range(1, self.degree):
            dz = (acts[k] + 1.0)[:, :, None] * dz + zs[k - 1][:, :, None] * self.weights[k][None]
        out = np.einsum("im,nml->nil", self.w_out, dz)
        return out[0] if single else out

    def jac_params(self, x):
        xb, single = _as_batch(x, self.state_dim)
        n, d, m = xb.shape[0], self.state_dim, self.width
        acts, zs = self._hidden(xb)
        # g[n, i, j] = d out_i / d z_k[j], walked backwards through the products
        g = np.broadcast_to(self.w_out, (n, d, m))
        grad_act = [None] * self.degree
        for k in range(self.degree - 1, 0, -1):
            grad_act[k] = g * zs[k - 1][:, None, :]
            g = g * (acts[k] + 1.0)[:, None, :]
        grad_act[0] = g
        blocks = []
        for k in range(self.degree):
            blocks.append((grad_act[k][:, :, :, None] * xb[:, None, None, :]).reshape(n, d, m * d))
            if self.include_bias:
                blocks.append(grad_act[k])
        w_out_grad = np.zeros((n, d, d, m))
        for i in range(d):
            w_out_grad[:, i, i, :] = zs[-1]
        blocks.append(w_out_grad.reshape(n, d, d * m))
        if self.include_bias:
            blocks.append(np.broadcast_to(np.eye(d), (n, d, d)))
        out = np.concatenate(blocks, axis=2)
        return out[0] if single else out

    def expand(self):
        """Exact monomial expansion, one polynomial per output."""
        return expand_to_monomials(self)

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "state_dim": self.state_dim,
            "degree": self.degree,
            "width": self.width,
            "include_bias": self.include_bias,
            "layer_shapes": [list(s) for s in self.layer_shapes],
            "params": [float(v) for v in self._params],
        }


def pinet_forward(model, x):
    return model.forward(x)


def expand_to_monomials(model):
    """Propagate polynomial coefficients through the network's layer graph."""
    if isinstance(model, DirectModel):
        return model.expand()
    if isinstance(model, RhsModel):
        if model.net is None:
            return [MonomialPolynomial(model.state_dim) for _ in range(model.state_dim)]
        return expand_to_monomials(model.net)
    b = basis(model.state_dim, model.degree)
    const = b.index[(0,) * model.state_dim]
    unit = [b.index[tuple(int(i == l) for i in range(model.state_dim))] for l in range(model.state_dim)]

    def affine(w, bias):
        poly = np.zeros((model.width, len(b)))
        poly[:, const] = bias
        poly[:, unit] = w
        return poly

    z = affine(model.weights[0], model.biases[0])
    for w, bias in zip(model.weights[1:], model.biases[1:]):
        nxt = (bias + 1.0)[:, None] * z
        for l in range(model.state_dim):
            nxt += w[:, l, None] * b.shift(z, l)
        z = nxt
    out = model.w_out @ z
    out[:, const] += model.b_out
    return matrix_to_polynomials(out, b)


# ---------------------------------------------------------------------------
# fixed vector fields and the hybrid model


class PolynomialField:
    """Fixed polynomial vector field (no trainable parameters)."""

    def __init__(self, polys):
        self.state_dim = polys[0].state_dim
        self.polys = list(polys)
        self._model = DirectModel.from_polynomials(self.polys)

    def __call__(self, t, x):
        return self._model.forward(x)

    def jacobian(self, t, x):
        return self._model.jac_state(x)


class AnalyticField:
    """Vector field from handwritten callables ``f(t, X)`` and ``jac(t, X)``
    operating on batches ``(N, d)``."""

    def __init__(self, state_dim, f, jac):
        self.state_dim = state_dim
        self._f = f
        self._jac = jac

    def __call__(self, t, x):
        xb, single = _as_batch(x, self.state_dim)
        out = self._f(t, xb)
        return out[0] if single else out

    def jacobian(self, t, x):
        xb, single = _as_batch(x, self.state_dim)
        out = self._jac(t, xb)
        return out[0] if single else out


class RhsModel:
    """``f(t, y) = f_known(t, y) + net(y)``; either part may be absent."""

    def __init__(self, net=None, known=None, autonomous=True):
        if net is None and known is None:
            raise InvalidConfig("RhsModel needs a network, a known field, or both")
        if known is not None and not hasattr(known, "jacobian"):
            raise InvalidConfig("known field must provide jacobian(t, x)")
        dims = {m.state_dim for m in (net, known) if m is not None}
        if len(dims) != 1:
            raise DimensionMismatch(f"known field and network disagree on dimension: {dims}")
        self.net = net
        self.known = known
        self.autonomous = autonomous
        self.state_dim = dims.pop()

    @property
    def n_params(self):
        return 0 if self.net is None else self.net.n_params

    @property
    def params(self):
        return np.zeros(0) if self.net is None else self.net.params

    def with_params(self, theta):
        if self.net is None:
            if np.size(theta):
                raise DimensionMismatch("model has no parameters")
            return self
        return RhsModel(self.net.with_params(theta), self.known, self.autonomous)

    def rhs(self, t, x):
        xb, single = _as_batch(x, self.state_dim)
        out = np.zeros(xb.shape)
        if self.known is not None:
            out = out + self.known(t, xb)
        if self.net is not None:
            out = out + self.net.forward(xb)
        return out[0] if single else out

    __call__ = rhs

    def jac_state(self, t, x):
        xb, single = _as_batch(x, self.state_dim)
        out = np.zeros((xb.shape[0], self.state_dim, self.state_dim))
        if self.known is not None:
            out = out + self.known.jacobian(t, xb)
        if self.net is not None:
            out = out + self.net.jac_state(xb)
        return out[0] if single else out

    def jac_params(self, t, x):
        xb, single = _as_batch(x, self.state_dim)
        if self.net is None:
            out = np.zeros((xb.shape[0], self.state_dim, 0))
        else:
            out = self.net.jac_params(xb)
        return out[0] if single else out


def hybrid_rhs(model, t, x):
    return model.rhs(t, x)


# ---------------------------------------------------------------------------
# serialization


def model_to_json(net, path=None):
    text = json.dumps(net.to_dict(), indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def model_from_dict(doc):
    try:
        arch = doc["architecture"]
        dim = int(doc["state_dim"])
        degree = int(doc["degree"])
        include_bias = bool(doc.get("include_bias", True))
        params = np.array(doc["params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed model document: {exc}") from exc
    if arch == "direct":
        model = DirectModel(dim, degree, include_bias=include_bias)
        return model.with_params(params)
    if arch == "pinet_v1":
        return PiNetModel(dim, degree, doc.get("width"), params, include_bias)
    raise InvalidConfig(f"unknown architecture {arch!r}")


def model_from_json(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"model file is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidConfig("model document must be a JSON object")
    return model_from_dict(doc)
