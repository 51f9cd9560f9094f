"""
Triangular meshes of the tank: generation, validation and the MESH v1 text format
"""
import math
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay

from errors import ConfigurationError, ValidationError, ParseError

logger = logging.getLogger(__name__)

# Triangles with |area| below this fraction of h^2 are treated as degenerate
AREA_EPS = 1e-12


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode arcs on the boundary circle, angles in radians"""
    count: int
    arc_half_angle: float
    centers: Tuple[float, ...]

    @classmethod
    def equispaced(cls, count: int, arc_angle_deg: float, offset: float = 0.0) -> 'ElectrodeLayout':
        """`count` arcs of width `arc_angle_deg`, first one centred at `offset`."""
        half = math.radians(arc_angle_deg) / 2
        centers = tuple(offset + 2 * math.pi * k / count for k in range(count))
        return cls(count=count, arc_half_angle=half, centers=centers)

    def arcs(self) -> List[Tuple[float, float]]:
        """(start, end) angle of every electrode, start normalised to [0, 2pi)."""
        out = []
        for c in self.centers:
            start = (c - self.arc_half_angle) % (2 * math.pi)
            out.append((start, start + 2 * self.arc_half_angle))
        return out

    def validate(self):
        if self.count != len(self.centers):
            raise ConfigurationError(
                f"electrode layout declares {self.count} electrodes but has {len(self.centers)} centers")
        if self.count == 0:
            return
        if not self.arc_half_angle > 0:
            raise ConfigurationError("electrode arc width must be positive")
        arcs = sorted(self.arcs())
        for k, (start, end) in enumerate(arcs):
            next_start = arcs[(k + 1) % len(arcs)][0]
            if k == len(arcs) - 1:
                next_start += 2 * math.pi
            if next_start - end <= 0:
                raise ConfigurationError(
                    f"electrode arcs overlap: arc starting at {start:.6f} rad ends at {end:.6f} rad, "
                    f"next arc starts at {next_start:.6f} rad")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with boundary flags and electrode node sequences.

    `electrode_nodes[l]` lists the boundary nodes of electrode l in order
    along its arc; consecutive entries are boundary edges.
    """
    points: np.ndarray
    is_boundary: np.ndarray
    triangles: np.ndarray
    electrode_nodes: Tuple[np.ndarray, ...] = ()

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_nodes)

    @cached_property
    def n_interior(self) -> int:
        return int(np.count_nonzero(~self.is_boundary))

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        """Node indices of interior nodes; position k is the k-th unknown of xi."""
        return np.flatnonzero(~self.is_boundary)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (min, max), sorted lexicographically."""
        tri = self.triangles
        pairs = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def electrode_arcs(self) -> Tuple[np.ndarray, ...]:
        """Per electrode, its boundary edge segments as (s, 2) node pairs."""
        return tuple(np.column_stack([seq[:-1], seq[1:]]) for seq in self.electrode_nodes)

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        p = self.points[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1])

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions, shape (t, 3, 2)."""
        p = self.points[self.triangles]
        x, y = p[..., 0], p[..., 1]
        two_area = 2 * self.triangle_areas
        grads = np.empty((len(self.triangles), 3, 2))
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            grads[:, k, 0] = (y[:, i] - y[:, j]) / two_area
            grads[:, k, 1] = (x[:, j] - x[:, i]) / two_area
        return grads

    def summary(self) -> dict:
        return {
            'nodes': self.n_nodes,
            'interior_nodes': self.n_interior,
            'triangles': len(self.triangles),
            'edges': len(self.edges),
            'electrodes': self.n_electrodes,
        }


def build_mesh(points, is_boundary, triangles, electrode_nodes: Sequence = (),
               source: Optional[str] = None) -> Mesh:
    """Validate raw arrays and return an immutable Mesh.

    Clockwise triangles are reoriented; everything else that violates an
    invariant raises ValidationError.
    """
    points = np.array(points, dtype=float)
    is_boundary = np.array(is_boundary, dtype=bool)
    triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    electrode_nodes = tuple(np.array(seq, dtype=np.int64) for seq in electrode_nodes)
    where = f" in {source}" if source else ''

    if points.ndim != 2 or points.shape[1] != 2 or len(points) == 0:
        raise ValidationError(f"node coordinates must have shape (k, 2){where}")
    if not np.all(np.isfinite(points)):
        raise ValidationError(f"non-finite node coordinates{where}")
    if is_boundary.shape != (len(points),):
        raise ValidationError(f"boundary flags do not match node count{where}")
    if len(triangles) == 0:
        raise ValidationError(f"mesh has no triangles{where}")
    bad = np.flatnonzero((triangles < 0).any(axis=1) | (triangles >= len(points)).any(axis=1))
    if len(bad):
        raise ValidationError(f"triangle {bad[0]} references a node index out of range{where}")
    repeated = (triangles[:, 0] == triangles[:, 1]) | (triangles[:, 1] == triangles[:, 2]) \
        | (triangles[:, 0] == triangles[:, 2])
    if repeated.any():
        raise ValidationError(f"triangle {np.flatnonzero(repeated)[0]} repeats a node{where}")

    p = points[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    signed = 0.5 * (d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1])
    scale = np.ptp(points, axis=0).max() ** 2
    flat = np.abs(signed) <= AREA_EPS * scale
    if flat.any():
        raise ValidationError(f"triangle {np.flatnonzero(flat)[0]} has zero area{where}")
    clockwise = signed < 0
    if clockwise.any():
        logger.debug(f"[Mesh] Reorienting {int(clockwise.sum())} clockwise triangles")
        triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]

    unused = np.setdiff1d(np.arange(len(points)), np.unique(triangles))
    if len(unused):
        raise ValidationError(f"node {unused[0]} belongs to no triangle{where}")

    pairs = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs.sort(axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    if (counts > 2).any():
        a, b = uniq[counts > 2][0]
        raise ValidationError(f"non-conforming triangulation: edge ({a}, {b}) shared by more than two triangles{where}")
    on_hull = np.zeros(len(points), dtype=bool)
    on_hull[uniq[counts == 1].ravel()] = True
    if not np.array_equal(on_hull, is_boundary):
        k = np.flatnonzero(on_hull != is_boundary)[0]
        raise ValidationError(f"boundary flag of node {k} disagrees with the triangulation{where}")

    boundary_edge_set = {tuple(e) for e in uniq[counts == 1]}
    owner = {}
    for l, seq in enumerate(electrode_nodes):
        if len(seq) < 2:
            raise ValidationError(f"electrode {l} needs at least two boundary nodes{where}")
        if (seq < 0).any() or (seq >= len(points)).any():
            raise ValidationError(f"electrode {l} references a node index out of range{where}")
        if not is_boundary[seq].all():
            raise ValidationError(f"electrode {l} contains an interior node{where}")
        for a, b in zip(seq[:-1], seq[1:]):
            if (min(a, b), max(a, b)) not in boundary_edge_set:
                raise ValidationError(f"electrode {l}: nodes {a} and {b} do not form a boundary edge{where}")
        for k in seq:
            if int(k) in owner and owner[int(k)] != l:
                raise ValidationError(
                    f"electrode arcs {owner[int(k)]} and {l} overlap at node {k}{where}")
            owner[int(k)] = l

    for arr in (points, is_boundary, triangles, *electrode_nodes):
        arr.setflags(write=False)
    return Mesh(points=points, is_boundary=is_boundary, triangles=triangles,
                electrode_nodes=electrode_nodes)


def _boundary_angles(layout: ElectrodeLayout, radius: float, target_h: float):
    """Boundary node angles in ascending order plus per-electrode index lists."""
    step = target_h / radius
    if layout.count == 0:
        n = max(8, math.ceil(2 * math.pi / step))
        return np.arange(n) * 2 * math.pi / n, []

    arcs = layout.arcs()
    order = sorted(range(layout.count), key=lambda l: arcs[l][0])
    angles: List[float] = []
    electrode_idx: List[List[int]] = [[] for _ in range(layout.count)]
    for pos, l in enumerate(order):
        start, end = arcs[l]
        n_arc = max(1, math.ceil((end - start) / step))
        for j in range(n_arc + 1):
            electrode_idx[l].append(len(angles))
            angles.append(start + j * (end - start) / n_arc)
        gap_end = arcs[order[(pos + 1) % len(order)]][0]
        if pos == len(order) - 1:
            gap_end += 2 * math.pi
        n_gap = max(1, math.ceil((gap_end - end) / step))
        for j in range(1, n_gap):
            angles.append(end + j * (gap_end - end) / n_gap)
    return np.asarray(angles), electrode_idx


def generate_disk_mesh(radius: float, target_h: float, layout: ElectrodeLayout) -> Mesh:
    """Triangulate the disk of `radius` with electrode arc endpoints as nodes.

    Interior nodes sit on concentric rings spaced `target_h` apart (alternate
    rings rotated half a step); the point set is Delaunay-triangulated.
    """
    if not target_h > 0:
        raise ConfigurationError("target_h must be positive")
    if not radius > 0:
        raise ConfigurationError("radius must be positive")
    layout.validate()

    angles, electrode_idx = _boundary_angles(layout, radius, target_h)
    boundary_pts = radius * np.column_stack([np.cos(angles), np.sin(angles)])

    n_rings = max(2, round(radius / target_h))
    interior = [np.zeros((1, 2))]
    for k in range(1, n_rings):
        rho = radius * k / n_rings
        m = max(6, round(2 * math.pi * rho / target_h))
        phi = (np.arange(m) + 0.5 * (k % 2)) * 2 * math.pi / m
        interior.append(rho * np.column_stack([np.cos(phi), np.sin(phi)]))
    points = np.vstack([boundary_pts] + interior)
    n_boundary = len(boundary_pts)

    tri = Delaunay(points)
    if len(tri.coplanar):
        raise ConfigurationError(f"Delaunay dropped {len(tri.coplanar)} nodes; target_h too coarse")
    hull_nodes = np.unique(tri.convex_hull)
    if not np.array_equal(hull_nodes, np.arange(n_boundary)):
        raise ConfigurationError(
            f"target_h={target_h} too coarse for the electrode layout: interior nodes reach the hull")

    simplices = tri.simplices.copy()
    p = points[simplices]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    signed = 0.5 * (d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1])
    keep = np.abs(signed) > AREA_EPS * target_h ** 2
    simplices = simplices[keep]

    is_boundary = np.zeros(len(points), dtype=bool)
    is_boundary[:n_boundary] = True
    mesh = build_mesh(points, is_boundary, simplices, electrode_idx)
    logger.debug(f"[Mesh] Generated disk mesh: {mesh.summary()}")
    return mesh


def interior_edges(mesh: Mesh) -> np.ndarray:
    """Edges with at least one interior endpoint, sorted by (min, max)."""
    e = mesh.edges
    keep = ~mesh.is_boundary[e[:, 0]] | ~mesh.is_boundary[e[:, 1]]
    return e[keep]


# ─── MESH v1 text format ──────────────────────────────────────────────────────

def save_mesh(mesh: Mesh, path: str):
    """Write `mesh` in MESH v1 format; coordinates round-trip exactly."""
    lines = ['MESH v1', f'NODES {mesh.n_nodes}']
    for (x, y), b in zip(mesh.points, mesh.is_boundary):
        lines.append(f"{float(x)!r} {float(y)!r} {int(b)}")
    lines.append(f'TRIANGLES {len(mesh.triangles)}')
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c}")
    lines.append(f'ELECTRODES {mesh.n_electrodes}')
    for seq in mesh.electrode_nodes:
        lines.append(' '.join(str(int(k)) for k in seq))
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def _content_lines(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        for number, raw in enumerate(f, start=1):
            text = raw.split('#', 1)[0].strip()
            if text:
                yield number, text


def _section(lines, name: str, path: str) -> int:
    try:
        number, text = next(lines)
    except StopIteration:
        raise ParseError(f"missing {name} section", path)
    parts = text.split()
    if len(parts) != 2 or parts[0] != name:
        raise ParseError(f"expected '{name} <count>', got {text!r}", path, number)
    try:
        count = int(parts[1])
    except ValueError:
        raise ParseError(f"invalid {name} count {parts[1]!r}", path, number)
    if count < 0:
        raise ParseError(f"negative {name} count", path, number)
    return count


def _record(lines, what: str, path: str):
    try:
        return next(lines)
    except StopIteration:
        raise ParseError(f"unexpected end of file while reading {what}", path)


def load_mesh(path: str) -> Mesh:
    """Parse a MESH v1 file and validate every mesh invariant."""
    lines = _content_lines(path)
    try:
        number, header = next(lines)
    except StopIteration:
        raise ParseError("empty mesh file", path)
    if header.split() != ['MESH', 'v1']:
        raise ParseError(f"expected header 'MESH v1', got {header!r}", path, number)

    n_nodes = _section(lines, 'NODES', path)
    points = np.empty((n_nodes, 2))
    flags = np.empty(n_nodes, dtype=bool)
    for k in range(n_nodes):
        number, text = _record(lines, 'nodes', path)
        parts = text.split()
        if len(parts) != 3 or parts[2] not in ('0', '1'):
            raise ParseError(f"node line must be 'x y boundary_flag', got {text!r}", path, number)
        try:
            points[k] = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"invalid node coordinates {text!r}", path, number)
        flags[k] = parts[2] == '1'

    n_tri = _section(lines, 'TRIANGLES', path)
    triangles = np.empty((n_tri, 3), dtype=np.int64)
    for k in range(n_tri):
        number, text = _record(lines, 'triangles', path)
        parts = text.split()
        try:
            values = [int(v) for v in parts]
        except ValueError:
            raise ParseError(f"invalid triangle indices {text!r}", path, number)
        if len(values) != 3:
            raise ParseError("triangle line must hold three node indices", path, number)
        if min(values) < 0 or max(values) >= n_nodes:
            raise ParseError(f"triangle references node index out of range 0..{n_nodes - 1}", path, number)
        triangles[k] = values

    n_el = _section(lines, 'ELECTRODES', path)
    electrodes = []
    for _ in range(n_el):
        number, text = _record(lines, 'electrodes', path)
        try:
            electrodes.append([int(v) for v in text.split()])
        except ValueError:
            raise ParseError(f"invalid electrode node list {text!r}", path, number)

    extra = next(lines, None)
    if extra is not None:
        raise ParseError(f"unexpected trailing content {extra[1]!r}", path, extra[0])

    try:
        return build_mesh(points, flags, triangles, electrodes)
    except ParseError:
        raise
    except ValidationError as e:
        raise ParseError(e.message, path)
