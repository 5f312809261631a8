"""Periodic cell grid, xi-quadrature lattice, shifts, and nonlocal operators.

The cell grid has n^3 nodes at z = i/n.  The xi-lattice consists of the grid
offsets xi_q = j/n with 0 < |j|/n <= R and midpoint weight n^-3 per node, so
every shift z -> z + xi_q is an exact cyclic permutation of the grid: no
interpolation anywhere.  The excluded xi = 0 cell's volume is reported, not
silently dropped.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels, parallel
from .errors import ConfigError, InputError

MAGIC = b"NLHF"
FORMAT_VERSION = 1


def flat_index(i1, i2, i3, n):
    return i1 + n * (i2 + n * i3)


def grid_coordinates(n):
    """(n^3, 3) array of cell nodes z = i/n in the flat layout order."""
    idx = np.arange(n)
    i3, i2, i1 = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([i1.ravel(), i2.ravel(), i3.ravel()], axis=-1)
    return coords / float(n)


def grid_indices(n):
    """(n^3, 3) integer indices (i1, i2, i3) in the flat layout order."""
    idx = np.arange(n)
    i3, i2, i1 = np.meshgrid(idx, idx, idx, indexing="ij")
    return np.stack([i1.ravel(), i2.ravel(), i3.ravel()], axis=-1)


def shift_permutation(n, j):
    """perm with (shift f)(i) = f[(i + j) mod n]; composes as index addition."""
    ind = grid_indices(n)
    j = np.asarray(j, dtype=int)
    return (
        np.mod(ind[:, 0] + j[0], n)
        + n * (np.mod(ind[:, 1] + j[1], n) + n * np.mod(ind[:, 2] + j[2], n))
    ).astype(np.int64)


@dataclass
class PeriodicField:
    """Component-valued function on the n^3 periodic grid.

    data has shape (n^3, c); the flat row index is i1 + n (i2 + n i3), so
    data.ravel() matches the declared dump layout comp + c (i1 + n (i2 + n i3)).
    """

    n: int
    c: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=float)
        if self.data.shape != (self.n**3, self.c):
            raise InputError(
                f"field data must have shape ({self.n**3}, {self.c}), got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InputError("field contains non-finite entries")

    @classmethod
    def zeros(cls, n, c):
        return cls(n, c, np.zeros((n**3, c)))

    @classmethod
    def from_function(cls, n, c, fn):
        """Sample fn(z) with z of shape (n^3, 3) returning (n^3, c)."""
        vals = np.asarray(fn(grid_coordinates(n)), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls(n, c, vals)

    def copy(self):
        return PeriodicField(self.n, self.c, self.data.copy())

    def mean(self):
        return self.data.mean(axis=0)

    def l2(self):
        """Grid-weighted L2 norm, (n^-3 sum |w|^2)^(1/2)."""
        return float(np.sqrt(np.sum(self.data**2) / self.n**3))


def shift(f, j):
    """Cyclic shift: (shift f)(i) = f((i + j) mod n), exact permutation."""
    perm = shift_permutation(f.n, j)
    return PeriodicField(f.n, f.c, f.data[perm])


def project_mean_zero(f):
    """Subtract the per-component grid mean; idempotent."""
    return PeriodicField(f.n, f.c, f.data - f.data.mean(axis=0, keepdims=True))


@dataclass
class XiLattice:
    """Grid-commensurate quadrature nodes for integrals over xi."""

    n: int
    radius: float
    offsets: np.ndarray          # (Nq, 3) integer j with 0 < |j|/n <= R
    rho_spec: kernels.KernelSpec
    nu_spec: kernels.VectorKernelSpec
    rho: np.ndarray = field(default=None)   # cached rho(xi_q)
    nu: np.ndarray = field(default=None)    # cached nu(xi_q)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=int)
        self.xi = self.offsets / float(self.n)
        self.xi_norm = np.linalg.norm(self.xi, axis=-1)
        if self.rho is None:
            self.rho = kernels.eval_rho(self.rho_spec, self.xi)
        if self.nu is None:
            self.nu = kernels.eval_nu(self.nu_spec, self.xi)

    @property
    def node_count(self):
        return len(self.offsets)

    @property
    def weight(self):
        """Midpoint volume weight per node, h^3 = n^-3."""
        return float(self.n) ** -3

    @property
    def omitted_cell_volume(self):
        """Volume of the excluded xi = 0 cell (quadrature diagnostic)."""
        return float(self.n) ** -3

    def cell_coordinates(self):
        return grid_coordinates(self.n)

    def permutation(self, q):
        return shift_permutation(self.n, self.offsets[q])

    def inverse_permutation(self, q):
        return shift_permutation(self.n, -self.offsets[q])


def default_truncation_radius(rho_spec, nu_spec=None, tail_tol=1e-8):
    """Kernel support radius when compact, else the 1 - tail_tol mass radius."""
    radius = rho_spec.support_radius
    if rho_spec.family == "truncated_gaussian":
        # compact by construction, but honour the declared R
        radius = rho_spec.support_radius
    if nu_spec is not None:
        radius = max(radius, nu_spec.support_radius)
    del tail_tol  # all built-in families are compactly supported
    return radius


def build_lattice(rho_spec, nu_spec, n, radius=None, tail_tol=1e-8):
    """Enumerate the lattice nodes and cache kernel values.

    Kernels declared with quadrature normalization are renormalized here so
    that their lattice L1 sums are exactly one.
    """
    if n < 2:
        raise ConfigError(f"cell grid needs n >= 2, got {n}")
    if radius is None:
        radius = default_truncation_radius(rho_spec, nu_spec, tail_tol)
    if radius <= 0:
        raise ConfigError(f"truncation radius must be positive, got {radius}")
    jmax = int(np.floor(radius * n * (1.0 + 1e-12) + 1e-9))
    rng = np.arange(-jmax, jmax + 1)
    j3, j2, j1 = np.meshgrid(rng, rng, rng, indexing="ij")
    offs = np.stack([j1.ravel(), j2.ravel(), j3.ravel()], axis=-1)
    norm2 = np.sum(offs.astype(float) ** 2, axis=-1)
    keep = (norm2 > 0) & (norm2 <= (radius * n) ** 2 * (1.0 + 1e-12) + 1e-9)
    offs = offs[keep]

    lattice = XiLattice(n=n, radius=float(radius), offsets=offs,
                        rho_spec=rho_spec, nu_spec=nu_spec)

    if rho_spec.normalization_mode == "quadrature":
        total = lattice.weight * float(np.sum(lattice.rho))
        if total <= 0:
            raise ConfigError("rho vanishes on the whole lattice; cannot renormalize")
        scale = 1.0 / total
        rho_spec = kernels_replace_norm(rho_spec, scale)
        lattice.rho_spec = rho_spec
        lattice.rho = lattice.rho * scale
    if nu_spec.normalization_mode == "quadrature":
        total = lattice.weight * float(np.sum(np.linalg.norm(lattice.nu, axis=-1)))
        if total <= 0:
            raise ConfigError("nu vanishes on the whole lattice; cannot renormalize")
        scale = 1.0 / total
        nu_spec = kernels_replace_norm(nu_spec, scale)
        lattice.nu_spec = nu_spec
        lattice.nu = lattice.nu * scale
    return lattice


def kernels_replace_norm(spec, scale):
    from dataclasses import replace

    return replace(spec, norm_scale=spec.norm_scale * scale)


def s_rho_apply(w, lattice):
    """S_rho(w): per-node family u(xi_q, z) = sqrt(rho_q) (w(z+xi_q) - w(z)) / |xi_q|.

    Returns an array of shape (Nq, n^3, c).
    """
    if w.n != lattice.n:
        raise InputError("field grid does not match the lattice")
    scale = np.sqrt(lattice.rho) / lattice.xi_norm
    out = np.empty((lattice.node_count, w.n**3, w.c))
    for q in range(lattice.node_count):
        perm = lattice.permutation(q)
        out[q] = scale[q] * (w.data[perm] - w.data)
    return out


def s_rho_adjoint_apply(u, lattice):
    """S*_rho(u)(z) = sum_q h^3 sqrt(rho_q) (u(xi_q, z - xi_q) - u(xi_q, z)) / |xi_q|."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != lattice.node_count:
        raise InputError("node family does not match the lattice")
    n3 = u.shape[1]
    c = u.shape[2]
    n = lattice.n
    if n3 != n**3:
        raise InputError("node family grid does not match the lattice")
    scale = lattice.weight * np.sqrt(lattice.rho) / lattice.xi_norm

    def partial(sl):
        acc = np.zeros((n3, c))
        for q in range(sl.start, sl.stop):
            inv = lattice.inverse_permutation(q)
            acc += scale[q] * (u[q][inv] - u[q])
        return acc

    total = parallel.chunked_sum(partial, lattice.node_count)
    return PeriodicField(n, c, total)


def norm_rho_squared(w, lattice):
    """Squared discrete ||.||_rho: sum_q h^3 rho_q n^-3 sum_z |D_q w|^2 / |xi_q|^2."""
    if w.n != lattice.n:
        raise InputError("field grid does not match the lattice")
    wgt = lattice.weight * lattice.rho / lattice.xi_norm**2 / w.n**3

    def partial(sl):
        acc = 0.0
        for q in range(sl.start, sl.stop):
            perm = lattice.permutation(q)
            diff = w.data[perm] - w.data
            acc += wgt[q] * float(np.sum(diff * diff))
        return acc

    return float(parallel.chunked_sum(partial, lattice.node_count))


def norm_rho(w, lattice):
    return float(np.sqrt(norm_rho_squared(w, lattice)))


@dataclass(frozen=True)
class TangentFrame:
    """Right-handed orthonormal frame (t1, t2, s) spanning T_s S^2 + normal."""

    s: np.ndarray
    t1: np.ndarray
    t2: np.ndarray


def tangent_frame(s):
    """Deterministic frame: pick the axis least aligned with s (ties by index),
    t1 = normalize(e_k - (s.e_k) s), t2 = s x t1."""
    s = np.asarray(s, dtype=float)
    norm = np.linalg.norm(s)
    if norm < 1e-8:
        raise InputError("cannot build a tangent frame for a near-zero vector")
    if abs(norm - 1.0) > 1e-8:
        raise InputError(f"s must be a unit vector within 1e-8, got |s| = {norm}")
    s = s / norm
    alignment = np.abs(s)
    k = int(np.argmin(alignment))  # argmin takes the smallest index on ties
    e = np.zeros(3)
    e[k] = 1.0
    t1 = e - s[k] * s
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(s, t1)
    return TangentFrame(s=s, t1=t1, t2=t2)


def write_field(f, target):
    """Binary dump: magic, version u32, n u32, c u32, little-endian f64 payload."""
    payload = f.data.astype("<f8").tobytes()
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, f.n, f.c)
    if isinstance(target, (str, bytes)):
        with open(target, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    else:
        target.write(header)
        target.write(payload)


def read_field(source):
    if isinstance(source, (str, bytes)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    if raw[:4] != MAGIC:
        raise ConfigError("not a field dump: bad magic")
    version, n, c = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported field dump version {version}")
    data = np.frombuffer(raw[16:], dtype="<f8").astype(float)
    if data.size != n**3 * c:
        raise ConfigError("field dump payload size mismatch")
    return PeriodicField(n, c, data.reshape(n**3, c))


def field_to_csv(f, target):
    """CSV export with header i1,i2,i3,comp,value (17 significant digits)."""
    buf = target if hasattr(target, "write") else io.StringIO()
    buf.write("i1,i2,i3,comp,value\n")
    ind = grid_indices(f.n)
    for row in range(f.n**3):
        i1, i2, i3 = ind[row]
        for comp in range(f.c):
            buf.write(f"{i1},{i2},{i3},{comp},{f.data[row, comp]:.17g}\n")
    if not hasattr(target, "write"):
        with open(target, "w") as fh:
            fh.write(buf.getvalue())
