"""Linear/non-linear wave system, radiative boundaries and norms.

First order in time formulation of the classical wave equation with an
optional non-linear source:

    d(chi)/dt = phi
    d(phi)/dt = Laplacian(chi) - c_nl * sin(2 chi) / r^2

Fourth-order centered second differences in the interior; at physical
boundary faces the time derivative is replaced by the outgoing radiative
condition  df/dt = (x . grad f)/r - k (f - f0)  with one-sided fourth-order
first derivatives, and the row of interior points adjacent to a face uses a
shifted (biased) second-difference stencil.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def fornberg_weights(m: int, offsets) -> np.ndarray:
    """Finite-difference weights for the m-th derivative at 0 on the given
    integer offsets (Fornberg's recursion)."""
    x = np.asarray(offsets, dtype=float)
    n = len(x)
    c = np.zeros((n, m + 1))
    c[0, 0] = 1.0
    c1, c4 = 1.0, x[0]
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i]
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


# interior: centered 5-point; near a physical face: 6-point biased stencils,
# all fourth-order accurate
_D2_CENTER = fornberg_weights(2, range(-2, 3))
_D2_EDGE0 = fornberg_weights(2, range(0, 6))
_D2_EDGE1 = fornberg_weights(2, range(-1, 5))
_D1_CENTER = fornberg_weights(1, range(-2, 3))
_D1_EDGE0 = fornberg_weights(1, range(0, 5))
_D1_EDGE1 = fornberg_weights(1, range(-1, 4))


def _apply_stencil_1d(arr, axis, start, stop, offsets, weights, h_power, h, pad):
    out = None
    for off, w in zip(offsets, weights):
        sl = [slice(pad, s - pad) for s in arr.shape]
        sl[axis] = slice(start + off, stop + off)
        term = w * arr[tuple(sl)]
        out = term if out is None else out + term
    return out / h**h_power


def derivative_axis(
    arr: np.ndarray,
    axis: int,
    h: float,
    pad: int,
    order: int,
    lo_boundary: bool,
    hi_boundary: bool,
) -> np.ndarray:
    """Derivative of the padded array over its interior region along one axis.

    ``lo_boundary``/``hi_boundary`` flag physical domain faces on that axis,
    where shifted stencils replace the centered one.
    """
    g = pad
    n = arr.shape[axis] - 2 * g
    center = _D2_CENTER if order == 2 else _D1_CENTER
    interior = _apply_stencil_1d(arr, axis, g, g + n, range(-2, 3), center, order, h, g)
    if not (lo_boundary or hi_boundary):
        return interior
    out = interior

    def overwrite(pos_in_interior, offsets, weights):
        nonlocal out
        a = g + pos_in_interior
        val = _apply_stencil_1d(arr, axis, a, a + 1, offsets, weights, order, h, g)
        sl_dst = [slice(None)] * arr.ndim
        sl_dst[axis] = slice(pos_in_interior, pos_in_interior + 1)
        out[tuple(sl_dst)] = val

    if order == 2:
        e0, e1 = _D2_EDGE0, _D2_EDGE1
        r0, r1 = range(0, 6), range(-1, 5)
    else:
        e0, e1 = _D1_EDGE0, _D1_EDGE1
        r0, r1 = range(0, 5), range(-1, 4)
    if lo_boundary:
        overwrite(0, r0, e0)
        overwrite(1, r1, e1)
    if hi_boundary:
        overwrite(n - 1, [-o for o in r0], [w * (-1) ** order for w in e0])
        overwrite(n - 2, [-o for o in r1], [w * (-1) ** order for w in e1])
    return out


@dataclass
class BlockGeometry:
    """Per-block precomputed data for the wave operator."""

    h: float
    axes_interior: list[np.ndarray]  # physical coords, interior only, broadcastable
    r2_reg: np.ndarray  # regularized r^2 over the interior
    r: np.ndarray
    faces: list[tuple[int, int]]  # (axis, side) on the physical boundary
    pad: int


def block_geometry(mesh, block, r_eps: float) -> BlockGeometry:
    axes = mesh.block_axes(block)
    g = block.pad
    n = block.interior_n
    dim = mesh.dim
    inner = []
    for d in range(dim):
        shape = [1] * dim
        shape[d] = n
        inner.append(axes[d][g : g + n].reshape(shape))
    r2 = sum(a**2 for a in inner)
    r = np.sqrt(r2)
    r2_reg = np.maximum(r2, r_eps**2)
    return BlockGeometry(
        h=mesh.block_spacing(block),
        axes_interior=inner,
        r2_reg=r2_reg,
        r=np.maximum(r, r_eps),
        faces=mesh.block_domain_faces(block),
        pad=g,
    )


def wave_rhs(y: np.ndarray, geom: BlockGeometry, nonlinear: bool, k_chi: float, k_phi: float,
             f0_chi: float = 0.0, f0_phi: float = 0.0) -> np.ndarray:
    """Time derivative of (chi, phi) on the block interior from padded data."""
    chi, phi = y[0], y[1]
    dim = chi.ndim
    g = geom.pad
    lo = {d: (d, 0) in geom.faces for d in range(dim)}
    hi = {d: (d, 1) in geom.faces for d in range(dim)}
    lap = None
    for d in range(dim):
        term = derivative_axis(chi, d, geom.h, g, 2, lo[d], hi[d])
        lap = term if lap is None else lap + term
    interior = (slice(g, -g),) * dim
    dchi = phi[interior].copy()
    dphi = lap
    if nonlinear:
        dphi = dphi - np.sin(2.0 * chi[interior]) / geom.r2_reg
    if geom.faces:
        dchi_b, dphi_b = _radiative_faces(y, geom, k_chi, k_phi, f0_chi, f0_phi, lo, hi)
        for face_sel, vals in dchi_b:
            dchi[face_sel] = vals
        for face_sel, vals in dphi_b:
            dphi[face_sel] = vals
    return np.stack([dchi, dphi])


def _radiative_faces(y, geom, k_chi, k_phi, f0_chi, f0_phi, lo, hi):
    """Outgoing radiative rows for every physical face of the block:
    df/dt = (sum_d x_d df/dx_d)/r - k (f - f0)."""
    dim = y[0].ndim
    g = geom.pad
    grads = []
    for v in range(2):
        grads.append(
            [derivative_axis(y[v], d, geom.h, g, 1, lo[d], hi[d]) for d in range(dim)]
        )
    radial = []
    for v in range(2):
        acc = None
        for d in range(dim):
            term = geom.axes_interior[d] * grads[v][d]
            acc = term if acc is None else acc + term
        radial.append(acc / geom.r)
    interior = (slice(g, -g),) * dim
    out_chi, out_phi = [], []
    n = y[0].shape[0] - 2 * g
    for axis, side in geom.faces:
        sel = [slice(None)] * dim
        sel[axis] = 0 if side == 0 else n - 1
        sel = tuple(sel)
        chi_face = y[0][interior][sel]
        phi_face = y[1][interior][sel]
        out_chi.append((sel, radial[0][sel] - k_chi * (chi_face - f0_chi)))
        out_phi.append((sel, radial[1][sel] - k_phi * (phi_face - f0_phi)))
    return out_chi, out_phi


# ---------------------------------------------------------------------------
# initial data and reference solutions
# ---------------------------------------------------------------------------


def gaussian_pulse(center, width, amplitude):
    """Radially symmetric pulse chi0; phi0 = 0."""

    def chi0(*xs):
        r2 = sum((x - c) ** 2 for x, c in zip(xs, center))
        return amplitude * np.exp(-r2 / width**2)

    return chi0


def plane_pulse(center_x, width, amplitude):
    """Pulse varying along x only (1d propagation test data); phi0 = 0."""

    def chi0(*xs):
        return amplitude * np.exp(-((xs[0] - center_x) ** 2) / width**2)

    return chi0


def analytic_linear(profile, t: float, x):
    """d'Alembert solution of the source-free 1d wave operator for initial
    data chi = profile(x), phi = 0."""
    return 0.5 * (profile(x - t) + profile(x + t))


def norms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Discrete (l2, linf) of a - b over shared nodes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mesh mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    l2 = float(np.sqrt(np.mean(diff**2)))
    linf = float(np.max(np.abs(diff))) if diff.size else 0.0
    return l2, linf
