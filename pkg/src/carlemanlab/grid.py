"""Box geometry, staggered (Yee) placement and discrete calculus.

Placement convention per axis: ``"c"`` means samples at cell centres
(``n`` points, offset ``h/2``), ``"n"`` means samples at nodes (``n + 1``
points, offset ``0``).  The eight staggers are

=========  ===============
cell       (c, c, c)
node       (n, n, n)
edge_x     (c, n, n)
edge_y     (n, c, n)
edge_z     (n, n, c)
face_x     (n, c, c)
face_y     (c, n, c)
face_z     (c, c, n)
=========  ===============

D-type fields live on edges and B-type fields on faces, so that tangential
edge and normal face degrees of freedom sit exactly on the boundary.  The
primal complex (node -> edge -> face -> cell) uses forward differences and
needs no boundary closure.  The dual operators (face -> edge curl,
edge -> node divergence) are evaluated on interior degrees of freedom; the
boundary degrees of freedom they would need ghosts for are returned as zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGGERS = {
    "cell": ("c", "c", "c"),
    "node": ("n", "n", "n"),
    "edge_x": ("c", "n", "n"),
    "edge_y": ("n", "c", "n"),
    "edge_z": ("n", "n", "c"),
    "face_x": ("n", "c", "c"),
    "face_y": ("c", "n", "c"),
    "face_z": ("c", "c", "n"),
}

LAYOUTS = {
    "D": ("edge_x", "edge_y", "edge_z"),
    "B": ("face_x", "face_y", "face_z"),
    "cell": ("cell", "cell", "cell"),
    "node": ("node", "node", "node"),
}

# Boundary faces of the box: (axis, side) with side 0 = low, 1 = high.
FACES = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]


class StaggerError(ValueError):
    """Field placement does not match what an operator expects."""


@dataclass(frozen=True)
class Grid:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    n: tuple[int, int, int]
    collar_width: float

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        n = tuple(int(v) for v in self.n)
        if len(lo) != 3 or len(hi) != 3 or len(n) != 3:
            raise ValueError("grid needs three bounds and three cell counts")
        if any(m <= 0 for m in n):
            raise ValueError(f"cell counts must be positive, got {n}")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("upper bounds must exceed lower bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "collar_width", float(self.collar_width))
        if self.collar_width < 2 * max(self.h):
            raise ValueError(
                f"collar_width={self.collar_width} must be at least two cell "
                f"layers (2*max(h) = {2 * max(self.h)})"
            )

    @classmethod
    def unit(cls, n: int, collar_width: float | None = None) -> "Grid":
        if collar_width is None:
            collar_width = max(0.2, 4.0 / n)
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (n, n, n), collar_width)

    @property
    def h(self) -> tuple[float, float, float]:
        return tuple((b - a) / m for a, b, m in zip(self.lo, self.hi, self.n))

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in zip(self.lo, self.hi)]))

    @property
    def surface_area(self) -> float:
        L = [b - a for a, b in zip(self.lo, self.hi)]
        return 2.0 * (L[0] * L[1] + L[1] * L[2] + L[0] * L[2])

    def axis_coords(self, axis: int, kind: str) -> np.ndarray:
        h = self.h[axis]
        if kind == "c":
            return self.lo[axis] + h * (np.arange(self.n[axis]) + 0.5)
        return self.lo[axis] + h * np.arange(self.n[axis] + 1)

    def shape(self, stagger: str) -> tuple[int, int, int]:
        kinds = STAGGERS[stagger]
        return tuple(m if k == "c" else m + 1 for m, k in zip(self.n, kinds))

    def coords(self, stagger: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable coordinate arrays for a stagger."""
        kinds = STAGGERS[stagger]
        x, y, z = (self.axis_coords(a, k) for a, k in enumerate(kinds))
        return x[:, None, None], y[None, :, None], z[None, None, :]

    def mesh(self, stagger: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x, y, z = self.coords(stagger)
        shp = self.shape(stagger)
        return (np.broadcast_to(x, shp), np.broadcast_to(y, shp),
                np.broadcast_to(z, shp))

    def quad_weights(self, stagger: str) -> np.ndarray:
        """Dual-cell volumes; plain midpoint ``h^3`` for cell samples."""
        w = []
        for axis, kind in enumerate(STAGGERS[stagger]):
            h = self.h[axis]
            if kind == "c":
                w.append(np.full(self.n[axis], h))
            else:
                v = np.full(self.n[axis] + 1, h)
                v[0] = v[-1] = 0.5 * h
                w.append(v)
        return w[0][:, None, None] * w[1][None, :, None] * w[2][None, None, :]

    def boundary_distance(self, stagger: str = "cell") -> np.ndarray:
        x, y, z = self.mesh(stagger)
        d = np.minimum(x - self.lo[0], self.hi[0] - x)
        d = np.minimum(d, np.minimum(y - self.lo[1], self.hi[1] - y))
        return np.minimum(d, np.minimum(z - self.lo[2], self.hi[2] - z))

    def collar_mask(self, stagger: str = "cell") -> np.ndarray:
        """Samples inside the boundary collar omega."""
        return self.boundary_distance(stagger) < self.collar_width

    def contains_closed(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= np.array(self.lo)) and np.all(p <= np.array(self.hi)))

    def corners(self) -> np.ndarray:
        return np.array([[a, b, c] for a in (self.lo[0], self.hi[0])
                         for b in (self.lo[1], self.hi[1])
                         for c in (self.lo[2], self.hi[2])])

    def face_centers(self, face: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coordinates (x, y, z) of boundary-face centres on one box side.

        Arrays are 2-D, indexed by the two tangential axes in increasing
        order.
        """
        axis, side = face
        ta, tb = [a for a in range(3) if a != axis]
        u = self.axis_coords(ta, "c")[:, None]
        v = self.axis_coords(tb, "c")[None, :]
        shp = (self.n[ta], self.n[tb])
        out = [None, None, None]
        out[axis] = np.full(shp, self.hi[axis] if side else self.lo[axis])
        out[ta] = np.broadcast_to(u, shp)
        out[tb] = np.broadcast_to(v, shp)
        return tuple(out)

    def face_area_weight(self, face: tuple[int, int]) -> float:
        axis = face[0]
        ta, tb = [a for a in range(3) if a != axis]
        return self.h[ta] * self.h[tb]

    def describe(self) -> str:
        return (f"lo={','.join(repr(v) for v in self.lo)} "
                f"hi={','.join(repr(v) for v in self.hi)} "
                f"n={','.join(str(v) for v in self.n)} "
                f"collar_width={self.collar_width!r}")


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    stagger: str
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.stagger not in STAGGERS:
            raise StaggerError(f"unknown stagger {self.stagger!r}")
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.grid.shape(self.stagger):
            raise StaggerError(
                f"{self.stagger} field on n={self.grid.n} needs shape "
                f"{self.grid.shape(self.stagger)}, got {data.shape}"
            )
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_function(cls, grid: Grid, stagger: str, fn) -> "ScalarField":
        x, y, z = grid.mesh(stagger)
        return cls(grid, stagger, np.broadcast_to(fn(x, y, z), x.shape))

    @classmethod
    def constant(cls, grid: Grid, stagger: str, value: float) -> "ScalarField":
        return cls(grid, stagger, np.full(grid.shape(stagger), float(value)))


@dataclass(frozen=True)
class VectorField:
    x: ScalarField
    y: ScalarField
    z: ScalarField
    layout: str

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise StaggerError(f"unknown layout {self.layout!r}")
        comps = (self.x, self.y, self.z)
        if any(c.grid != self.x.grid for c in comps):
            raise StaggerError("vector components live on different grids")
        want = LAYOUTS[self.layout]
        got = tuple(c.stagger for c in comps)
        if got != want:
            raise StaggerError(f"layout {self.layout} needs staggers {want}, got {got}")

    @property
    def grid(self) -> Grid:
        return self.x.grid

    @property
    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.x.data, self.y.data, self.z.data

    @classmethod
    def from_arrays(cls, grid: Grid, layout: str, arrays) -> "VectorField":
        st = LAYOUTS[layout]
        return cls(*(ScalarField(grid, s, a) for s, a in zip(st, arrays)), layout=layout)

    @classmethod
    def from_function(cls, grid: Grid, layout: str, fn) -> "VectorField":
        """``fn(x, y, z)`` returns three components; each is sampled at its own stagger."""
        arrays = []
        for comp, st in enumerate(LAYOUTS[layout]):
            x, y, z = grid.mesh(st)
            arrays.append(np.broadcast_to(fn(x, y, z)[comp], x.shape))
        return cls.from_arrays(grid, layout, arrays)

    @classmethod
    def zeros(cls, grid: Grid, layout: str) -> "VectorField":
        return cls.from_arrays(grid, layout, [np.zeros(grid.shape(s)) for s in LAYOUTS[layout]])


# ---------------------------------------------------------------------------
# raw-array kernels (used by the time stepper; no validation)

def curl_edge_to_face(ex, ey, ez, h):
    hx, hy, hz = h
    cx = np.diff(ez, axis=1) / hy - np.diff(ey, axis=2) / hz
    cy = np.diff(ex, axis=2) / hz - np.diff(ez, axis=0) / hx
    cz = np.diff(ey, axis=0) / hx - np.diff(ex, axis=1) / hy
    return cx, cy, cz


def curl_face_to_edge(bx, by, bz, h, out=None):
    """Dual curl on interior edges; tangential boundary edges are zero."""
    hx, hy, hz = h
    nx, ny, nz = bx.shape[0] - 1, by.shape[1] - 1, bz.shape[2] - 1
    if out is None:
        out = (np.zeros((nx, ny + 1, nz + 1)), np.zeros((nx + 1, ny, nz + 1)),
               np.zeros((nx + 1, ny + 1, nz)))
    cx, cy, cz = out
    cx[:, 1:-1, 1:-1] = (np.diff(bz[:, :, 1:-1], axis=1) / hy
                         - np.diff(by[:, 1:-1, :], axis=2) / hz)
    cy[1:-1, :, 1:-1] = (np.diff(bx[1:-1, :, :], axis=2) / hz
                         - np.diff(bz[:, :, 1:-1], axis=0) / hx)
    cz[1:-1, 1:-1, :] = (np.diff(by[:, 1:-1, :], axis=0) / hx
                         - np.diff(bx[1:-1, :, :], axis=1) / hy)
    return cx, cy, cz


def div_face_to_cell(bx, by, bz, h):
    hx, hy, hz = h
    return np.diff(bx, axis=0) / hx + np.diff(by, axis=1) / hy + np.diff(bz, axis=2) / hz


def div_edge_to_node(ex, ey, ez, h):
    """Dual divergence on interior nodes; boundary nodes are zero."""
    hx, hy, hz = h
    nx, ny, nz = ex.shape[0], ey.shape[1], ez.shape[2]
    out = np.zeros((nx + 1, ny + 1, nz + 1))
    out[1:-1, 1:-1, 1:-1] = (np.diff(ex[:, 1:-1, 1:-1], axis=0) / hx
                             + np.diff(ey[1:-1, :, 1:-1], axis=1) / hy
                             + np.diff(ez[1:-1, 1:-1, :], axis=2) / hz)
    return out


def cell_to_stagger(a: np.ndarray, stagger: str) -> np.ndarray:
    """Arithmetic average of cell-centred samples onto another stagger.

    Node-type axes average the two adjacent cells; on the boundary the single
    adjacent cell is used.
    """
    out = a
    for axis, kind in enumerate(STAGGERS[stagger]):
        if kind == "n":
            pad = [(0, 0)] * 3
            pad[axis] = (1, 1)
            p = np.pad(out, pad, mode="edge")
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[axis] = slice(0, -1)
            sl1[axis] = slice(1, None)
            out = 0.5 * (p[tuple(sl0)] + p[tuple(sl1)])
    return out


def stagger_to_cell(a: np.ndarray, stagger: str) -> np.ndarray:
    """Average node-type axes down to cell centres."""
    out = a
    for axis, kind in enumerate(STAGGERS[stagger]):
        if kind == "n":
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[axis] = slice(0, -1)
            sl1[axis] = slice(1, None)
            out = 0.5 * (out[tuple(sl0)] + out[tuple(sl1)])
    return out


# ---------------------------------------------------------------------------
# validated operators on fields

def discrete_curl(v: VectorField) -> VectorField:
    """Staggered curl: D-layout (edges) maps to B-layout (faces) and back."""
    g = v.grid
    if v.layout == "D":
        return VectorField.from_arrays(g, "B", curl_edge_to_face(*v.arrays, g.h))
    if v.layout == "B":
        return VectorField.from_arrays(g, "D", curl_face_to_edge(*v.arrays, g.h))
    raise StaggerError(f"discrete_curl needs D or B layout, got {v.layout}")


def discrete_div(v: VectorField) -> ScalarField:
    """Flux divergence: faces -> cells (B layout), edges -> interior nodes (D layout)."""
    g = v.grid
    if v.layout == "B":
        return ScalarField(g, "cell", div_face_to_cell(*v.arrays, g.h))
    if v.layout == "D":
        return ScalarField(g, "node", div_edge_to_node(*v.arrays, g.h))
    raise StaggerError(f"discrete_div needs D or B layout, got {v.layout}")


def _check_collocated(s: ScalarField):
    if s.stagger not in ("cell", "node"):
        raise StaggerError(f"needs a cell-centred or nodal scalar, got {s.stagger}")
    if min(s.grid.n) < 4:
        raise ValueError(f"stencils need at least 4 cells per axis, got n={s.grid.n}")


def second_derivative(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Three-point centred second difference, four-point one-sided at the ends."""
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / h**2
    out[0] = (2.0 * a[0] - 5.0 * a[1] + 4.0 * a[2] - a[3]) / h**2
    out[-1] = (2.0 * a[-1] - 5.0 * a[-2] + 4.0 * a[-3] - a[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def first_derivative(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    return np.gradient(a, h, axis=axis, edge_order=2)


def discrete_grad(s: ScalarField) -> VectorField:
    _check_collocated(s)
    g = s.grid
    comps = [first_derivative(s.data, g.h[a], a) for a in range(3)]
    return VectorField.from_arrays(g, s.stagger, comps)


def discrete_laplacian(s: ScalarField) -> ScalarField:
    _check_collocated(s)
    g = s.grid
    lap = sum(second_derivative(s.data, g.h[a], a) for a in range(3))
    return ScalarField(g, s.stagger, lap)


def integrate_volume(s: ScalarField) -> float:
    """Midpoint / dual-cell quadrature over the box."""
    return float(np.sum(s.data * s.grid.quad_weights(s.stagger)))


def integrate_surface(grid: Grid, samples) -> float:
    """Midpoint rule over the six box faces.

    ``samples`` maps each face ``(axis, side)`` to an array of values at the
    face centres (see :meth:`Grid.face_centers`), optionally with extra
    leading axes which are summed as well.
    """
    total = 0.0
    for face in FACES:
        total += float(np.sum(samples[face])) * grid.face_area_weight(face)
    return total


def derivative_table(a: np.ndarray, h) -> dict:
    """All partial derivatives of order <= 2 of a collocated sample array.

    Keys are multi-indices ``(a1, a2, a3)``; mixed derivatives are listed
    once each.
    """
    table = {(0, 0, 0): a}
    first = {}
    for ax in range(3):
        idx = [0, 0, 0]
        idx[ax] = 1
        first[ax] = first_derivative(a, h[ax], ax)
        table[tuple(idx)] = first[ax]
    for ax in range(3):
        idx = [0, 0, 0]
        idx[ax] = 2
        table[tuple(idx)] = second_derivative(a, h[ax], ax)
    for ax in range(3):
        for bx in range(ax + 1, 3):
            idx = [0, 0, 0]
            idx[ax] = idx[bx] = 1
            table[tuple(idx)] = first_derivative(first[ax], h[bx], bx)
    return table


def sobolev_norm_h2(s: ScalarField) -> tuple[float, dict]:
    """H^2 norm of a cell-centred field with per-order squared contributions.

    Returns ``(norm, {0: ..., 1: ..., 2: ...})``.
    """
    if s.stagger != "cell":
        raise StaggerError("sobolev_norm_h2 expects a cell-centred field")
    _check_collocated(s)
    g = s.grid
    w = g.quad_weights("cell")
    parts = {0: 0.0, 1: 0.0, 2: 0.0}
    for alpha, d in derivative_table(s.data, g.h).items():
        parts[sum(alpha)] += float(np.sum(w * d**2))
    return float(np.sqrt(sum(parts.values()))), parts


# ---------------------------------------------------------------------------
# field snapshot files
#
# Text table.  Line 1:
#   # carlemanlab-field v1 stagger=<stagger> lo=a,b,c hi=a,b,c n=i,j,k collar_width=w
# then one row per sample "i j k value" in C order, value printed with repr().

SNAPSHOT_MAGIC = "# carlemanlab-field v1"


def write_snapshot(path, s: ScalarField) -> None:
    path = Path(path)
    idx = np.indices(s.data.shape).reshape(3, -1).T
    vals = s.data.ravel()
    with path.open("w") as fh:
        fh.write(f"{SNAPSHOT_MAGIC} stagger={s.stagger} {s.grid.describe()}\n")
        for (i, j, k), v in zip(idx, vals):
            fh.write(f"{i} {j} {k} {float(v)!r}\n")


def read_snapshot(path) -> ScalarField:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header.startswith(SNAPSHOT_MAGIC):
            raise ValueError(f"{path}: not a field snapshot (bad header)")
        meta = dict(tok.split("=", 1) for tok in header[len(SNAPSHOT_MAGIC):].split())
        body = np.loadtxt(fh, ndmin=2)
    grid = Grid(tuple(float(v) for v in meta["lo"].split(",")),
                tuple(float(v) for v in meta["hi"].split(",")),
                tuple(int(v) for v in meta["n"].split(",")),
                float(meta["collar_width"]))
    shape = grid.shape(meta["stagger"])
    data = np.full(shape, np.nan)
    ijk = body[:, :3].astype(int)
    data[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = body[:, 3]
    if np.isnan(data).any():
        raise ValueError(f"{path}: snapshot is missing samples")
    return ScalarField(grid, meta["stagger"], data)
