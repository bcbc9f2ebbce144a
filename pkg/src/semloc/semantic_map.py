"""Landmark map: semantic descriptors, class priors, visibility queries.

A map stores, per landmark, its ENU position, a visibility wedge and one
descriptor. Semantic maps keep a compact top-3 class PMF per point; dense
maps keep a 128-byte appearance vector (the SIFT-style reference).
Landmark arrays are held column-wise for vectorised filtering; use
:meth:`SemanticMap.point` or :attr:`SemanticMap.points` for per-point views.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Pose, VisibilityWedge, in_wedge_arrays, wrap_angle, TWO_PI

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
DYNAMIC_CLASSES = ("car", "person", "rider", "truck", "bus")
DEFAULT_BOOST = 4.0
TOP_K = 3
DENSE_DIM = 128
MAX_CLASSES = 32  # class ids are packed into 5 bits


@dataclass(frozen=True, eq=False)
class SemanticDescriptor:
    """Visible-class PMF of a map point, kept as at most ``TOP_K`` entries."""

    classes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.classes, dtype=np.int64).ravel()
        p = np.asarray(self.probs, dtype=float).ravel()
        if c.shape != p.shape or c.size == 0:
            raise ValueError("classes and probs must be non-empty and equally long")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("descriptor probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "classes", c)
        object.__setattr__(self, "probs", p)

    def dense(self, n_classes: int) -> np.ndarray:
        out = np.zeros(n_classes)
        np.add.at(out, self.classes, self.probs)
        return out

    def as_dict(self, class_table=None) -> dict:
        names = class_table if class_table is not None else range(10**6)
        return {names[int(c)]: float(p) for c, p in zip(self.classes, self.probs)}


def top_k_pmf(hist, k=TOP_K):
    """Keep the ``k`` largest bins of a histogram and renormalize.

    Ties are broken towards the lower class id. Returns (classes, probs)
    sorted by decreasing probability with zero-mass bins dropped.
    """
    hist = np.asarray(hist, dtype=float)
    order = np.lexsort((np.arange(hist.size), -hist))[:k]
    order = order[hist[order] > 0]
    p = hist[order]
    return order, p / p.sum()


def build_descriptor(patches: Sequence[np.ndarray], n_classes: int, k: int = TOP_K) -> SemanticDescriptor:
    """Class histogram over all pixels of the observed 7x7 label patches.

    The normalized histogram is compacted to its ``k`` largest classes.
    """
    if len(patches) == 0:
        raise ValueError("at least one observation patch is required")
    labels = np.concatenate([np.asarray(p).ravel() for p in patches]).astype(np.int64)
    if labels.size == 0:
        raise ValueError("observation patches are empty")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("patch contains labels outside the class table")
    hist = np.bincount(labels, minlength=n_classes)
    classes, probs = top_k_pmf(hist / hist.sum(), k)
    return SemanticDescriptor(classes, probs)


def class_prior_from_images(images, n_classes: int) -> np.ndarray:
    """Relative class frequency over every pixel of every image."""
    images = list(images)
    if not images:
        raise ValueError("at least one image is required")
    counts = np.zeros(n_classes, dtype=np.int64)
    for img in images:
        labels = np.asarray(getattr(img, "labels", img)).ravel().astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError("image contains labels outside the class table")
        counts += np.bincount(labels, minlength=n_classes)
    return counts / counts.sum()


def occluded_pmf(prior, boost_classes=(), boost_factor: float = DEFAULT_BOOST) -> np.ndarray:
    """Class PMF for an occluded map point.

    Mass of the dynamic classes in ``boost_classes`` is multiplied by
    ``boost_factor`` and the vector renormalized.
    """
    prior = np.asarray(prior, dtype=float)
    if not boost_factor > 0:
        raise ValueError("boost_factor must be positive")
    idx = np.asarray(sorted(set(int(c) for c in boost_classes)), dtype=np.int64)
    if idx.size == 0:
        return prior.copy()
    out = prior.copy()
    out[idx] *= boost_factor
    return out / out.sum()


@dataclass(frozen=True, eq=False)
class MapPoint:
    position: np.ndarray
    descriptor: object  # SemanticDescriptor or uint8 vector
    wedge: VisibilityWedge


@dataclass(eq=False)
class SemanticMap:
    """Landmark map ``{(U_i, D_i, V_i)}`` plus class models and the road.

    ``road`` holds the mapping vehicle's route as rows of
    ``[e, n, u, yaw, pitch, roll]``. Exactly one of ``sem_classes``/
    ``sem_probs`` (semantic) or ``dense`` (appearance vectors) is used.
    """

    class_table: tuple
    positions: np.ndarray
    rho: np.ndarray
    gamma_a: np.ndarray
    span: np.ndarray
    wedge_range: np.ndarray
    class_prior: np.ndarray
    occluded: np.ndarray
    road: np.ndarray
    sem_classes: np.ndarray | None = None
    sem_probs: np.ndarray | None = None
    dense: np.ndarray | None = None
    _grid: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.class_table = tuple(self.class_table)
        n = len(self.class_table)
        if n == 0 or n > MAX_CLASSES:
            raise ValueError(f"class table must have 1..{MAX_CLASSES} entries")
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        m = len(self.positions)
        for name in ("rho", "gamma_a", "span", "wedge_range"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (m,):
                raise ValueError(f"{name} must have one entry per point")
            setattr(self, name, arr)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("map point positions must be finite")
        if m and (np.any(self.wedge_range <= 0) or np.any((self.rho < 0) | (self.rho > 1))):
            raise ValueError("invalid visibility wedge parameters")
        self.class_prior = np.asarray(self.class_prior, dtype=float)
        self.occluded = np.asarray(self.occluded, dtype=float)
        for name in ("class_prior", "occluded"):
            v = getattr(self, name)
            if v.shape != (n,) or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
                raise ValueError(f"{name} must be a PMF over the class table")
        self.road = np.asarray(self.road, dtype=float).reshape(-1, 6)
        if len(self.road) == 0:
            raise ValueError("road trajectory must be non-empty")
        if (self.dense is None) == (self.sem_classes is None):
            raise ValueError("map needs exactly one descriptor kind")
        if self.dense is not None:
            self.dense = np.asarray(self.dense, dtype=np.uint8).reshape(m, DENSE_DIM)
        else:
            self.sem_classes = np.asarray(self.sem_classes, dtype=np.int64).reshape(m, TOP_K)
            self.sem_probs = np.asarray(self.sem_probs, dtype=float).reshape(m, TOP_K)
            if m and (self.sem_classes.min() < 0 or self.sem_classes.max() >= n):
                raise ValueError("descriptor class index outside the class table")
            if m and np.any(np.abs(self.sem_probs.sum(axis=1) - 1.0) > 1e-6):
                raise ValueError("semantic descriptors must sum to 1")

    # construction helpers -------------------------------------------------

    @classmethod
    def from_points(cls, points: Sequence[MapPoint], class_table, class_prior, occluded, road) -> "SemanticMap":
        points = list(points)
        m = len(points)
        dense_kind = m > 0 and not isinstance(points[0].descriptor, SemanticDescriptor)
        kw = {}
        if dense_kind:
            kw["dense"] = np.array([np.asarray(p.descriptor, dtype=np.uint8) for p in points]).reshape(m, DENSE_DIM)
        else:
            sc = np.zeros((m, TOP_K), dtype=np.int64)
            sp = np.zeros((m, TOP_K))
            for i, p in enumerate(points):
                d = p.descriptor
                if not isinstance(d, SemanticDescriptor):
                    raise ValueError("a map holds exactly one descriptor kind")
                k = min(TOP_K, d.classes.size)
                order = np.argsort(-d.probs, kind="stable")[:k]
                sc[i, :k] = d.classes[order]
                sp[i, :k] = d.probs[order] / d.probs[order].sum()
            kw["sem_classes"], kw["sem_probs"] = sc, sp
        return cls(
            class_table=class_table,
            positions=np.array([p.position for p in points], dtype=float).reshape(m, 3),
            rho=[p.wedge.rho for p in points],
            gamma_a=[p.wedge.gamma_a for p in points],
            span=[p.wedge.span for p in points],
            wedge_range=[p.wedge.r for p in points],
            class_prior=class_prior, occluded=occluded, road=road, **kw,
        )

    # accessors ---------------------------------------------------------------

    def __len__(self):
        return len(self.positions)

    @property
    def n_classes(self) -> int:
        return len(self.class_table)

    @property
    def is_dense(self) -> bool:
        return self.dense is not None

    def wedge(self, i: int) -> VisibilityWedge:
        return VisibilityWedge.from_span(self.gamma_a[i], self.span[i], self.wedge_range[i], self.rho[i])

    def descriptor(self, i: int):
        if self.is_dense:
            return self.dense[i]
        keep = self.sem_probs[i] > 0
        return SemanticDescriptor(self.sem_classes[i][keep], self.sem_probs[i][keep])

    def point(self, i: int) -> MapPoint:
        return MapPoint(self.positions[i].copy(), self.descriptor(i), self.wedge(i))

    @property
    def points(self) -> list:
        return [self.point(i) for i in range(len(self))]

    def road_poses(self) -> list:
        return [Pose.from_state(*row) for row in self.road]

    def visible_pmfs(self, floor: float = 1e-3, indices=None) -> np.ndarray:
        """Dense ``(M, C)`` visible-class PMFs, floored and renormalized."""
        if self.is_dense:
            raise ValueError("dense-descriptor maps carry no class PMFs")
        idx = np.arange(len(self)) if indices is None else np.asarray(indices)
        out = np.zeros((idx.size, self.n_classes))
        rows = np.repeat(np.arange(idx.size), TOP_K)
        np.add.at(out, (rows, self.sem_classes[idx].ravel()), self.sem_probs[idx].ravel())
        out = np.maximum(out, floor)
        return out / out.sum(axis=1, keepdims=True)

    # visibility queries --------------------------------------------------------

    def _cell_size(self) -> float:
        return float(max(self.wedge_range.max(initial=0.0), 1.0))

    def _index(self) -> dict:
        if self._grid is None:
            size = self._cell_size()
            keys = np.floor(self.positions[:, :2] / size).astype(np.int64)
            grid = {}
            order = np.lexsort((keys[:, 1], keys[:, 0]))
            if order.size:
                k = keys[order]
                breaks = np.flatnonzero(np.any(np.diff(k, axis=0) != 0, axis=1)) + 1
                for chunk in np.split(order, breaks):
                    grid[(int(keys[chunk[0], 0]), int(keys[chunk[0], 1]))] = np.sort(chunk)
            self._grid = grid
        return self._grid

    def candidates(self, position) -> np.ndarray:
        """Indices of points in grid cells that could see ``position``."""
        grid = self._index()
        if not grid:
            return np.zeros(0, dtype=np.int64)
        size = self._cell_size()
        cx, cy = (int(np.floor(c / size)) for c in np.asarray(position, dtype=float)[:2])
        found = [grid[(cx + dx, cy + dy)] for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                 if (cx + dx, cy + dy) in grid]
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(found))

    def wedge_mask(self, observers, indices) -> np.ndarray:
        """``(N, len(indices))`` visibility of the given points from observers."""
        idx = np.asarray(indices, dtype=np.int64)
        return in_wedge_arrays(np.atleast_2d(observers), self.positions[idx],
                               self.gamma_a[idx], self.span[idx], self.wedge_range[idx])


def potentially_visible_set(smap: SemanticMap, query_pose) -> np.ndarray:
    """Indices of the map points whose wedge contains the query position.

    ``query_pose`` may be a :class:`Pose` or a position vector.
    """
    pos = query_pose.translation if isinstance(query_pose, Pose) else np.asarray(query_pose, dtype=float)
    cand = smap.candidates(pos)
    if cand.size == 0:
        return cand
    return cand[smap.wedge_mask(pos[None, :], cand)[0]]


def brute_force_visible_set(smap: SemanticMap, position) -> np.ndarray:
    """Linear scan over every point; reference for the grid index."""
    pos = np.asarray(position, dtype=float)
    out = []
    for i in range(len(smap)):
        w = smap.wedge(i)
        if in_wedge_arrays(pos[None], smap.positions[i][None], [w.gamma_a], [w.span], [w.r])[0, 0]:
            out.append(i)
    return np.asarray(out, dtype=np.int64)


def map_from_arrays(class_table, positions, wedges, class_prior, occluded, road,
                    sem_pmfs=None, dense=None) -> SemanticMap:
    """Convenience constructor from ``(M, 4)`` wedge rows ``[rho, gamma_a, gamma_b, r]``.

    ``sem_pmfs`` may be a dense ``(M, C)`` PMF matrix; it is compacted to
    top-3 entries.
    """
    wedges = np.asarray(wedges, dtype=float).reshape(-1, 4)
    raw = wedges[:, 2] - wedges[:, 1]
    span = np.where(raw >= TWO_PI - 1e-12, TWO_PI, np.mod(raw, TWO_PI))
    kw = {}
    if dense is not None:
        kw["dense"] = dense
    else:
        sem_pmfs = np.asarray(sem_pmfs, dtype=float)
        sem_pmfs = sem_pmfs.reshape(len(wedges), sem_pmfs.shape[-1] if sem_pmfs.ndim == 2 else -1)
        sc = np.zeros((len(wedges), TOP_K), dtype=np.int64)
        sp = np.zeros((len(wedges), TOP_K))
        for i, row in enumerate(sem_pmfs):
            c, p = top_k_pmf(row)
            sc[i, :c.size], sp[i, :c.size] = c, p
        kw["sem_classes"], kw["sem_probs"] = sc, sp
    return SemanticMap(class_table, positions, wedges[:, 0], wrap_angle(wedges[:, 1]), span, wedges[:, 3],
                       class_prior, occluded, road, **kw)
