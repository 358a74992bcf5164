"""Point clouds, analytic star-shaped object families, signed distances.

Objects are star-shaped about the origin: a base primitive (sphere, box,
capsule, cylinder, superquadric) optionally deformed by an anisotropic
scale and smooth radial bumps.  The deformed surface is parameterized by a
radial extent function R(u) over unit directions u, which gives exact
surface sampling, exact inside/outside tests, and a numerically corrected
signed distance for deformed shapes (analytic for clean primitives).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import ContractViolation, DegenerateInput

FAMILIES = ("sphere", "box", "capsule", "cylinder", "superquadric")


@dataclass
class PointCloud:
    """N x 3 surface sample, optionally with outward unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ContractViolation(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ContractViolation("normals shape must match points")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ContractViolation("normals must be unit length within 1e-6")

    def __len__(self):
        return len(self.points)


@dataclass
class ShapeSpec:
    """Analytic star-shaped object: primitive family + smooth deformation.

    params per family:
      sphere:       radius
      box:          hx, hy, hz (half extents)
      capsule:      radius, half_length (axis z)
      cylinder:     radius, half_length (axis z)
      superquadric: a1, a2, a3, e1, e2
    bumps: list of (center unit 3-vector, amplitude, angular width in rad);
    the radial extent is multiplied by 1 + sum(a * exp(-ang^2 / (2 w^2))).
    """

    family: str
    params: dict
    scale: tuple = (1.0, 1.0, 1.0)
    bumps: list = field(default_factory=list)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown family '{self.family}'")
        for v in self.params.values():
            if not v > 0:
                raise ContractViolation("all size parameters must be positive")
        if not all(s > 0 for s in self.scale):
            raise ContractViolation("scale entries must be positive")
        for center, amp, width in self.bumps:
            if width <= 0:
                raise ContractViolation("bump width must be positive")
            if abs(amp) >= 0.5:
                raise ContractViolation("bump amplitude must stay below 0.5 of the base radius")

    @property
    def is_clean_primitive(self):
        return not self.bumps and tuple(self.scale) == (1.0, 1.0, 1.0)

    def key(self):
        return (
            self.family,
            tuple(sorted(self.params.items())),
            tuple(self.scale),
            tuple((tuple(c), a, w) for c, a, w in self.bumps),
        )


# -- radial extent -----------------------------------------------------------


def _base_radius(family, params, u):
    """Distance from origin to the base-primitive surface along unit dirs u."""
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    if family == "sphere":
        return np.full(len(u), params["radius"])
    if family == "box":
        h = np.array([params["hx"], params["hy"], params["hz"]])
        with np.errstate(divide="ignore"):
            t = h[None, :] / np.maximum(np.abs(u), 1e-300)
        return t.min(axis=1)
    if family == "capsule":
        r, h = params["radius"], params["half_length"]
        rho = np.sqrt(ux * ux + uy * uy)
        # cylinder part: t * rho = r while |t uz| <= h
        with np.errstate(divide="ignore"):
            t_cyl = r / np.maximum(rho, 1e-300)
        # cap part: ||t u - (0,0,sign h)|| = r
        az = np.abs(uz)
        disc = r * r - (1.0 - az * az) * h * h
        t_cap = h * az + np.sqrt(np.maximum(disc, 0.0))
        use_cyl = (t_cyl * az <= h) & (rho > 1e-12)
        return np.where(use_cyl, t_cyl, t_cap)
    if family == "cylinder":
        r, h = params["radius"], params["half_length"]
        rho = np.sqrt(ux * ux + uy * uy)
        with np.errstate(divide="ignore"):
            t1 = r / np.maximum(rho, 1e-300)
            t2 = h / np.maximum(np.abs(uz), 1e-300)
        return np.minimum(t1, t2)
    if family == "superquadric":
        a1, a2, a3 = params["a1"], params["a2"], params["a3"]
        e1, e2 = params["e1"], params["e2"]
        fxy = (np.abs(ux / a1) ** (2.0 / e2) + np.abs(uy / a2) ** (2.0 / e2)) ** (e2 / e1)
        f = fxy + np.abs(uz / a3) ** (2.0 / e1)
        return np.maximum(f, 1e-300) ** (-e1 / 2.0)
    raise ContractViolation(f"unknown family '{family}'")


def radial_extent(spec: ShapeSpec, dirs):
    """R(u): distance from origin to the deformed surface along unit dirs."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    s = np.asarray(spec.scale)
    v = dirs / s[None, :]
    vn = np.linalg.norm(v, axis=1)
    r = _base_radius(spec.family, spec.params, v / vn[:, None]) / vn
    if spec.bumps:
        factor = np.ones(len(dirs))
        for center, amp, width in spec.bumps:
            c = np.asarray(center, dtype=np.float64)
            c = c / np.linalg.norm(c)
            ang = np.arccos(np.clip(dirs @ c, -1.0, 1.0))
            factor += amp * np.exp(-(ang * ang) / (2.0 * width * width))
        r = r * factor
    return r


def _surface_point(spec, dirs):
    dirs = np.atleast_2d(dirs)
    return radial_extent(spec, dirs)[:, None] * dirs


# -- sampling ----------------------------------------------------------------


def _fibonacci_sphere(n):
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1
    )


def _surface_normals(spec, dirs, eps=1e-6):
    """Outward normals of the star surface via central differences of
    G(p) = ||p|| - R(p/||p||) evaluated at the surface points."""
    p = _surface_point(spec, dirs)
    grad = np.zeros_like(p)
    for k in range(3):
        dp = np.zeros(3)
        dp[k] = eps
        for sign, off in ((1.0, dp), (-1.0, -dp)):
            q = p + off
            qn = np.linalg.norm(q, axis=1)
            g = qn - radial_extent(spec, q / qn[:, None])
            grad[:, k] += sign * g
    grad /= 2.0 * eps
    n = np.linalg.norm(grad, axis=1, keepdims=True)
    return grad / np.maximum(n, 1e-300)


def sample_surface(spec: ShapeSpec, n: int, seed: int) -> PointCloud:
    """Sample n points on the deformed surface with outward normals."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points = _surface_point(spec, dirs)
    normals = _surface_normals(spec, dirs)
    return PointCloud(points, normals)


# -- signed distance ---------------------------------------------------------


def _sdf_clean(family, params, q):
    """Exact SDFs for undeformed primitives (superquadric falls through)."""
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    if family == "sphere":
        return np.linalg.norm(q, axis=1) - params["radius"]
    if family == "box":
        h = np.array([params["hx"], params["hy"], params["hz"]])
        d = np.abs(q) - h[None, :]
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    if family == "capsule":
        r, h = params["radius"], params["half_length"]
        zc = np.clip(z, -h, h)
        return np.sqrt(x * x + y * y + (z - zc) ** 2) - r
    if family == "cylinder":
        r, h = params["radius"], params["half_length"]
        dr = np.sqrt(x * x + y * y) - r
        dz = np.abs(z) - h
        d = np.stack([dr, dz], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    return None


_PROJ_DIRS = _fibonacci_sphere(2048)
_proj_cache = {}


def _projection_seeds(spec):
    key = spec.key()
    if key not in _proj_cache:
        _proj_cache[key] = _surface_point(spec, _PROJ_DIRS)
        if len(_proj_cache) > 64:
            _proj_cache.pop(next(iter(_proj_cache)))
    return _proj_cache[key]


def project_to_surface(spec: ShapeSpec, query, iters=25):
    """Nearest surface point per query via local minimization over the
    direction sphere, seeded from a dense cached surface sample."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    seeds = _projection_seeds(spec)
    tree = cKDTree(seeds)
    _, idx = tree.query(query)
    u = _PROJ_DIRS[idx].copy()

    def objective(uu):
        p = _surface_point(spec, uu)
        d = query - p
        return (d * d).sum(axis=1), p

    f, p = objective(u)
    step = np.full(len(query), 0.05)
    h = 1e-5
    for _ in range(iters):
        # tangent-plane finite-difference gradient on the sphere
        t1 = np.cross(u, np.where(np.abs(u[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]]))
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(u, t1)
        grad = np.zeros((len(query), 2))
        for j, tvec in enumerate((t1, t2)):
            for sgn in (1.0, -1.0):
                up = u + sgn * h * tvec
                up /= np.linalg.norm(up, axis=1, keepdims=True)
                fv, _ = objective(up)
                grad[:, j] += sgn * fv
        grad /= 2.0 * h
        direction = -(grad[:, 0:1] * t1 + grad[:, 1:2] * t2)
        dn = np.linalg.norm(direction, axis=1, keepdims=True)
        moved = dn[:, 0] > 1e-14
        if not moved.any():
            break
        direction = direction / np.maximum(dn, 1e-300)
        # backtracking line search, per query
        accepted = np.zeros(len(query), dtype=bool)
        for _ in range(20):
            trial = u + step[:, None] * direction
            trial /= np.linalg.norm(trial, axis=1, keepdims=True)
            ft, pt = objective(trial)
            better = (ft < f) & moved & ~accepted
            u[better] = trial[better]
            f[better] = ft[better]
            p[better] = pt[better]
            accepted |= better
            shrink = moved & ~accepted
            if not shrink.any():
                break
            step[shrink] *= 0.5
        step[accepted] *= 1.5
        step = np.clip(step, 1e-12, 0.5)
    return p


def signed_distance(spec: ShapeSpec, query) -> np.ndarray:
    """Signed distance: negative inside, positive outside, zero on surface."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if spec.is_clean_primitive:
        d = _sdf_clean(spec.family, spec.params, query)
        if d is not None:
            return d
    p = project_to_surface(spec, query)
    dist = np.linalg.norm(query - p, axis=1)
    qn = np.linalg.norm(query, axis=1)
    inside = np.zeros(len(query), dtype=bool)
    nz = qn > 1e-12
    inside[nz] = qn[nz] < radial_extent(spec, query[nz] / qn[nz, None])
    inside[~nz] = True
    return np.where(inside, -dist, dist)


def signed_distance_diff(spec: ShapeSpec, query: ad.Tensor) -> ad.Tensor:
    """Differentiable signed distance to hand points (Tensor N x 3).

    Clean sphere/box/capsule/cylinder use analytic compositions; other
    shapes use a detached nearest-point projection, whose gradient
    (unit vector toward/away from the nearest surface point) is the true
    SDF gradient wherever the SDF is differentiable.
    """
    if spec.is_clean_primitive:
        x = ad.take(query, (slice(None), slice(0, 1)))
        y = ad.take(query, (slice(None), slice(1, 2)))
        z = ad.take(query, (slice(None), slice(2, 3)))
        fam, p = spec.family, spec.params
        if fam == "sphere":
            return ad.norm_rows(query, eps=1e-300) - p["radius"]
        if fam == "capsule":
            r, h = p["radius"], p["half_length"]
            zc = ad.minimum_c(ad.maximum_c(z, -h), h)
            dz = z - zc
            return ad.sqrt(x * x + y * y + dz * dz + 1e-300) - r
        if fam == "box":
            half = np.array([p["hx"], p["hy"], p["hz"]])
            d = ad.abs_(query) - ad.tensor(half[None, :])
            outside = ad.sqrt(ad.sum_(ad.maximum_c(d, 0.0) ** 2, axis=-1, keepdims=True) + 1e-300)
            inside = ad.minimum_c(ad.max_(d, axis=-1, keepdims=True), 0.0)
            return outside + inside
        if fam == "cylinder":
            r, h = p["radius"], p["half_length"]
            dr = ad.sqrt(x * x + y * y + 1e-300) - r
            dz = ad.abs_(z) - h
            d = ad.concat([dr, dz], axis=1)
            outside = ad.sqrt(ad.sum_(ad.maximum_c(d, 0.0) ** 2, axis=-1, keepdims=True) + 1e-300)
            inside = ad.minimum_c(ad.max_(d, axis=-1, keepdims=True), 0.0)
            return outside + inside
    # generic path: detached projection, differentiable distance
    proj = project_to_surface(spec, query.data, iters=12)
    sign = np.sign(signed_distance(spec, query.data))
    sign[sign == 0.0] = 1.0
    diff = query - ad.tensor(proj)
    dist = ad.norm_rows(diff, eps=1e-300)
    return dist * ad.tensor(sign[:, None])


@dataclass
class NormalizedShape:
    """A ShapeSpec viewed through an object NormalizationTransform.

    Signed distances in the normalized frame are the raw distances divided
    by the (uniform) scale, which keeps them exact.
    """

    spec: "ShapeSpec"
    transform: "NormalizationTransform"


def shape_signed_distance(shape, query):
    """signed_distance for either a ShapeSpec or a NormalizedShape."""
    if isinstance(shape, NormalizedShape):
        raw = shape.transform.invert(np.atleast_2d(query))
        return signed_distance(shape.spec, raw) / shape.transform.scale
    return signed_distance(shape, query)


def shape_signed_distance_diff(shape, query):
    """Differentiable counterpart of shape_signed_distance (Tensor query)."""
    if isinstance(shape, NormalizedShape):
        tr = shape.transform
        raw = query * tr.scale + ad.tensor(np.asarray(tr.centroid)[None, :])
        return signed_distance_diff(shape.spec, raw) * (1.0 / tr.scale)
    return signed_distance_diff(shape, query)


# -- nearest neighbors / chamfer --------------------------------------------


def nearest_distances(queries, targets):
    """Per-query exact distance to the closest target point, plus its index."""
    q = queries.points if isinstance(queries, PointCloud) else np.atleast_2d(queries)
    t = targets.points if isinstance(targets, PointCloud) else np.atleast_2d(targets)
    if len(q) == 0 or len(t) == 0:
        raise ContractViolation("nearest_distances needs non-empty clouds")
    if len(q) * len(t) <= 4_000_000:
        d2 = ((q[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
        idx = d2.argmin(axis=1)
        return np.sqrt(d2[np.arange(len(q)), idx]), idx
    dist, idx = cKDTree(t).query(q)
    return dist, idx


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest distances in both directions."""
    dab, _ = nearest_distances(a, b)
    dba, _ = nearest_distances(b, a)
    return 0.5 * (float((dab**2).mean()) + float((dba**2).mean()))


# -- normalization -----------------------------------------------------------


@dataclass
class NormalizationTransform:
    centroid: np.ndarray
    scale: float

    def apply(self, points):
        return (np.asarray(points) - self.centroid) / self.scale

    def invert(self, points):
        return np.asarray(points) * self.scale + self.centroid


def normalize_object(cloud: PointCloud):
    """Center at the centroid and scale to unit max radius."""
    if len(cloud) < 2:
        raise ContractViolation("normalize_object needs N >= 2")
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale < 1e-12:
        raise DegenerateInput("all points coincident; cannot normalize")
    out = PointCloud(centered / scale, cloud.normals)
    return out, NormalizationTransform(centroid, scale)


# -- file format -------------------------------------------------------------


def save_point_cloud(path, cloud: PointCloud):
    with open(path, "w") as fh:
        has_n = 1 if cloud.normals is not None else 0
        fh.write(f"#pts {len(cloud)} normals={has_n}\n")
        for i in range(len(cloud)):
            row = " ".join(f"{v:.17g}" for v in cloud.points[i])
            if has_n:
                row += " " + " ".join(f"{v:.17g}" for v in cloud.normals[i])
            fh.write(row + "\n")


def load_point_cloud(path) -> PointCloud:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "#pts":
            raise ContractViolation(f"bad point-cloud header in {path}")
        n = int(header[1])
        has_n = header[2] == "normals=1"
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (n, 6 if has_n else 3):
        raise ContractViolation(f"point-cloud body shape {data.shape} does not match header")
    return PointCloud(data[:, :3], data[:, 3:6] if has_n else None)
