"""Torus geometry, oriented edges, and discrete calculus.

Vertices of the d-dimensional torus of side 2L+1 are indexed in row-major
order over coordinates c in {0,..,2L}^d.  The canonical representative of a
coordinate is ((c + L) mod (2L+1)) - L, which lies in {-L,..,L}, so vertex 0
sits at the coordinate origin.  A positively oriented edge points in the
+axis direction; the edge with tail vertex v along axis i carries the index
i * vertex_count + v, so edge fields reshape to (d,) + grid shape and all
bulk operations reduce to axis rolls.
"""

from dataclasses import dataclass

import numpy as np

_INDEX_MAX = np.iinfo(np.int64).max


class Torus:
    """Periodic cubic lattice of side 2L+1 in dimension d.

    Geometry tables are built once and frozen; instances are safe to share
    across workers.  Heavy per-edge tables (neighbor closures, box masks)
    are built lazily and cached.
    """

    def __init__(self, d, L):
        if d < 1:
            raise ValueError(f"dimension must be >= 1, got {d}")
        if L < 1:
            raise ValueError(f"half-side must be >= 1, got {L}")
        n = 2 * L + 1
        if d * n**d > _INDEX_MAX:
            raise ValueError(f"edge count d*(2L+1)^d overflows int64 for d={d}, L={L}")
        self.d = int(d)
        self.L = int(L)
        self.n_side = n
        self.shape = (n,) * d
        self.vertex_count = n**d
        self.edge_count = d * self.vertex_count

        N = self.vertex_count
        strides = np.array([n ** (d - 1 - j) for j in range(d)], dtype=np.int64)
        self._strides = strides
        idx = np.arange(N, dtype=np.int64)
        digits = (idx[:, None] // strides[None, :]) % n  # coordinates in {0..2L}
        self._digits = digits
        self.canonical = ((digits + L) % n) - L
        self.dist = np.sqrt((self.canonical.astype(float) ** 2).sum(axis=1))
        self.dist_star = self.dist + 1.0

        # neighbor[i, v] = vertex reached from v in the +i direction
        self.neighbor = np.empty((d, N), dtype=np.int64)
        self.neighbor_back = np.empty((d, N), dtype=np.int64)
        for i in range(d):
            shifted = digits.copy()
            shifted[:, i] = (digits[:, i] + 1) % n
            self.neighbor[i] = shifted @ strides
            shifted[:, i] = (digits[:, i] - 1) % n
            self.neighbor_back[i] = shifted @ strides

        self.edge_tail = np.tile(idx, d)
        self.edge_axis = np.repeat(np.arange(d, dtype=np.int64), N)
        self.edge_head = self.neighbor.reshape(-1)

        # incident_edges[v] lists the 2d edges touching v: d outgoing, d incoming
        out_edges = np.arange(d, dtype=np.int64)[:, None] * N + idx[None, :]
        in_edges = np.arange(d, dtype=np.int64)[:, None] * N + self.neighbor_back
        self.incident_edges = np.concatenate([out_edges, in_edges], axis=0).T.copy()

        for arr in (self.canonical, self.dist, self.dist_star, self.neighbor,
                    self.neighbor_back, self.edge_tail, self.edge_axis,
                    self.edge_head, self.incident_edges):
            arr.setflags(write=False)

        self._edge_closure = None
        self._box_masks = {}
        self._box_edge_masks = {}

    def vertex_of_coords(self, coords):
        """Flat index of a vertex given canonical (or any integer) coordinates."""
        c = np.asarray(coords, dtype=np.int64) % self.n_side
        return int(c @ self._strides)

    def coords_of_vertex(self, v):
        """Canonical coordinates in {-L,..,L}^d of a vertex index."""
        return self.canonical[v].copy()

    def edge_index(self, tail, axis):
        return axis * self.vertex_count + tail

    def edge_of(self, e):
        """(tail vertex, axis) of an edge index."""
        return int(e % self.vertex_count), int(e // self.vertex_count)

    @property
    def edge_closure(self):
        """edge_closure[e] = the 4d-1 edges sharing at least one endpoint with e."""
        if self._edge_closure is None:
            tails = self.edge_tail
            heads = self.edge_head
            raw = np.concatenate(
                [self.incident_edges[tails], self.incident_edges[heads]], axis=1
            )
            raw = np.sort(raw, axis=1)
            # e itself is incident to both endpoints; drop the single duplicate
            keep = np.ones_like(raw, dtype=bool)
            keep[:, 1:] = raw[:, 1:] != raw[:, :-1]
            counts = keep.sum(axis=1)
            if not np.all(counts == 4 * self.d - 1):
                raise RuntimeError("neighbor-closure construction is inconsistent")
            closure = raw[keep].reshape(self.edge_count, 4 * self.d - 1)
            closure.setflags(write=False)
            self._edge_closure = closure
        return self._edge_closure

    def box_mask(self, r):
        """Vertex mask of the box Lambda_r = {|x_j| <= r for all j} on the torus."""
        if r < 0:
            raise ValueError("box radius must be >= 0")
        r = min(int(r), self.L)
        if r not in self._box_masks:
            mask = np.all(np.abs(self.canonical) <= r, axis=1)
            mask.setflags(write=False)
            self._box_masks[r] = mask
        return self._box_masks[r]

    def box_edge_mask(self, r):
        """Edge mask of E(Lambda_r): edges with both endpoints in the box."""
        r = min(int(r), self.L)
        if r not in self._box_edge_masks:
            vm = self.box_mask(r)
            em = vm[self.edge_tail] & vm[self.edge_head]
            em.setflags(write=False)
            self._box_edge_masks[r] = em
        return self._box_edge_masks[r]

    def grid(self, values):
        """View of a vertex array as the d-dimensional grid."""
        return values.reshape(self.shape)

    def edge_grid(self, values):
        """View of an edge array as (d,) + grid shape."""
        return values.reshape((self.d,) + self.shape)

    def __repr__(self):
        return f"Torus(d={self.d}, L={self.L})"


def build_torus(d, L):
    """Build the torus with all index maps and neighbor tables precomputed."""
    return Torus(d, L)


@dataclass
class LatticeField:
    """Real height function on torus vertices."""

    torus: Torus
    values: np.ndarray
    mean_zero: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.torus.vertex_count,):
            raise ValueError("field length does not match torus vertex count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")
        if self.mean_zero:
            tol = 1e-10 * self.torus.vertex_count
            if abs(self.values.sum()) > tol:
                raise ValueError("field flagged mean-zero but spatial sum exceeds tolerance")

    def mean(self):
        return float(self.values.mean())

    def projected(self):
        """Copy with the spatial mean removed."""
        return LatticeField(self.torus, self.values - self.values.mean(), mean_zero=True)


@dataclass
class EdgeField:
    """Real function on positively oriented edges."""

    torus: Torus
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.torus.edge_count,):
            raise ValueError("edge field length does not match torus edge count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("edge field contains non-finite values")


def _values(f):
    return f.values if hasattr(f, "values") else np.asarray(f, dtype=float)


def gradient_field(torus, f):
    """All edge gradients f(head) - f(tail), as a flat edge array."""
    g = torus.grid(_values(f))
    out = np.empty((torus.d,) + torus.shape)
    for i in range(torus.d):
        out[i] = np.roll(g, -1, axis=i) - g
    return out.reshape(-1)

def gradient(f, e):
    """Discrete gradient of f over the positively oriented edge e."""
    torus = f.torus
    v = _values(f)
    tail, axis = torus.edge_of(e)
    return float(v[torus.neighbor[axis, tail]] - v[tail])


def _flux_divergence(torus, flux):
    """Vertex divergence of a per-edge flux: outgoing minus incoming."""
    fg = flux.reshape((torus.d,) + torus.shape)
    out = np.zeros(torus.shape)
    for i in range(torus.d):
        out += fg[i] - np.roll(fg[i], 1, axis=i)
    return out.reshape(-1)


def nonlinear_divergence_field(torus, f, V):
    """The nonlinear elliptic operator div V'(grad f) at every vertex."""
    return _flux_divergence(torus, V.dv(gradient_field(torus, f)))


def nonlinear_divergence(f, V, x):
    """div V'(grad f) at vertex x, respecting edge orientation."""
    torus = f.torus
    v = _values(f)
    out = 0.0
    for i in range(torus.d):
        out += V.dv(v[torus.neighbor[i, x]] - v[x])
        out -= V.dv(v[x] - v[torus.neighbor_back[i, x]])
    return float(out)


def dynamic_divergence_field(torus, u, a):
    """The dynamic elliptic operator div(a grad u) at every vertex."""
    return _flux_divergence(torus, _values(a) * gradient_field(torus, u))


def dynamic_divergence(u, a, x):
    """div(a grad u) at vertex x for edge conductances a >= 0."""
    torus = u.torus
    uv = _values(u)
    av = _values(a)
    N = torus.vertex_count
    out = 0.0
    for i in range(torus.d):
        out += av[i * N + x] * (uv[torus.neighbor[i, x]] - uv[x])
        back = torus.neighbor_back[i, x]
        out -= av[i * N + back] * (uv[x] - uv[back])
    return float(out)


def lp_norm(f, p, region=None, normalized=False):
    """L^p norm (plain or region-normalized) of a vertex or edge field.

    `region` is a vertex mask or index array; edge fields are restricted to
    E(region), the edges with both endpoints in the region.  Normalization
    divides by the vertex count of the region in both cases.
    """
    if p != np.inf and p < 1:
        raise ValueError("p must be >= 1 or inf")
    torus = f.torus
    on_edges = isinstance(f, EdgeField)
    v = f.values
    if region is None:
        vals = v
        size = torus.vertex_count
    else:
        region = np.asarray(region)
        if region.dtype == bool:
            mask = region
        else:
            mask = np.zeros(torus.vertex_count, dtype=bool)
            mask[region] = True
        size = int(mask.sum())
        if size == 0:
            raise ValueError("empty region")
        if on_edges:
            vals = v[mask[torus.edge_tail] & mask[torus.edge_head]]
        else:
            vals = v[mask]
    if p == np.inf:
        return float(np.max(np.abs(vals))) if len(vals) else 0.0
    s = float(np.sum(np.abs(vals) ** p))
    if normalized:
        s /= size
    return s ** (1.0 / p)
