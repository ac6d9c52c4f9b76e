"""Two-cylinder vessel model, its misfit, and differential-evolution fitting.

A vessel hypothesis is a pair of coaxial cylinders: an inner one of radius
``r_in`` (the lumen) and an outer one of radius ``sqrt(2) * r_in`` so that the
lumen and the surrounding shell have equal volume. Both are ``2 * r_in`` tall.
Intensities inside each region are summarised by a Gaussian; the misfit is
the mean cross-likelihood of each region's samples under the *other*
region's Gaussian. Separated intensity populations give a misfit near 0,
indistinguishable ones give a misfit near ``exp(-1/2) ~ 0.6`` or more.

The Gaussians are peak-normalised (``exp(-z**2 / 2)``, not the density) so
the misfit is dimensionless and does not change when intensities are scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from ._geometry import perpendicular_frame, unit
from .volume import Volume, sample_many

__all__ = [
    "CylinderModel",
    "DEParams",
    "Detection",
    "FitResult",
    "MAX_MISFIT",
    "P_DET_EPS",
    "probe_lattice",
    "cylinder_misfit",
    "region_stats",
    "fit_cylinder",
    "fit_cylinders",
    "fit_multistart",
    "select_candidates",
    "fitness_from_misfit",
]

MAX_MISFIT = math.inf
P_DET_EPS = 1e-3
SIGMA_FLOOR_FRACTION = 1e-3
PREFILTER_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class CylinderModel:
    center: np.ndarray
    direction: np.ndarray
    r_in: float

    def __post_init__(self):
        if not self.r_in > 0:
            raise ValueError(f"r_in must be positive, got {self.r_in}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "direction", unit(self.direction))

    @property
    def r_out(self) -> float:
        return math.sqrt(2.0) * self.r_in

    @property
    def height(self) -> float:
        return 2.0 * self.r_in


@dataclass(frozen=True)
class DEParams:
    """Differential evolution (rand/1/bin) settings.

    ``search_radius`` defaults to the cone sampling distance when ``None``.
    The radius is searched in ``[r_floor_factor * r_min, r_max_factor * r_init]``
    where ``r_min`` is the rule-2c minimum radius (largest voxel spacing).
    ``tol`` stops a run early once the population's misfit spread is at or
    below it; 0 disables early stopping.
    """

    population: int = 30
    generations: int = 60
    F: float = 0.7
    CR: float = 0.9
    rng_seed: int = 0
    search_radius: float | None = None
    r_max_factor: float = 4.0
    r_floor_factor: float = 0.5
    max_probes: int = 2000
    tol: float = 0.0

    def __post_init__(self):
        if self.population < 8:
            raise ValueError("population must be at least 8")
        if self.generations < 1:
            raise ValueError("generations must be at least 1")
        if not 0 < self.F <= 2:
            raise ValueError("F must lie in (0, 2]")
        if not 0 <= self.CR <= 1:
            raise ValueError("CR must lie in [0, 1]")
        if self.max_probes < 16:
            raise ValueError("max_probes must be at least 16")


@dataclass(frozen=True, eq=False)
class Detection:
    model: CylinderModel
    w: float
    layer: int = 0
    origin_index: tuple = (0, 0, 0)
    mean_in: float = float("nan")
    mean_out: float = float("nan")
    std_in: float = float("nan")
    std_out: float = float("nan")

    @property
    def fitness(self) -> float:
        return fitness_from_misfit(self.w)

    @property
    def p_det(self) -> float:
        return min(max(self.fitness, P_DET_EPS), 1.0 - P_DET_EPS)

    @property
    def center(self) -> np.ndarray:
        return self.model.center

    @property
    def radius(self) -> float:
        return self.model.r_in

    @property
    def direction(self) -> np.ndarray:
        return self.model.direction

    @property
    def contrast(self) -> float:
        """Lumen-minus-shell mean in units of the larger region std."""
        spread = max(self.std_in, self.std_out)
        if not spread > 0:
            return math.nan
        return (self.mean_in - self.mean_out) / spread


def fitness_from_misfit(w: float) -> float:
    return 1.0 / (1.0 + w)


# -- misfit -------------------------------------------------------------------


def probe_lattice(r_max: float, spacing: Sequence[float], max_probes: int = 2000):
    """Deterministic cylindrical probe lattice in units of ``r_in``.

    Rings are equal-area, so every probe stands for the same volume and the
    inner region and the shell receive the same number of probes, at most
    ``max_probes`` each (but never fewer than 18).

    Returns
    -------
    coords : (P, 3) array
        ``(x, y, h)`` with ``x, y`` radial in the unit-radius frame (shell
        reaches ``sqrt(2)``) and ``h`` in ``(-1, 1)`` along the axis.
    inner : (P,) bool array
    """
    step = 0.5 * min(spacing)
    rings = max(2, math.ceil(r_max / step))
    angles = max(6, math.ceil(2 * math.pi * math.sqrt(2) * r_max / step))
    levels = max(3, math.ceil(2 * r_max / step))
    total = rings * angles * levels
    if total > max_probes:
        shrink = (max_probes / total) ** (1.0 / 3.0)
        rings = max(2, int(rings * shrink))
        angles = max(6, int(angles * shrink))
        levels = max(3, int(levels * shrink))
        while rings * angles * levels > max_probes:
            if angles > 6:
                angles -= 1
            elif levels > 3:
                levels -= 1
            elif rings > 1:
                rings -= 1
            else:
                break
    coords = []
    inner = []
    for region, base in ((True, 0.0), (False, 1.0)):
        for k in range(rings):
            rho = math.sqrt(base + (k + 0.5) / rings)
            stagger = 0.5 * (k % 2)
            for j in range(angles):
                psi = 2 * math.pi * (j + stagger) / angles
                for i in range(levels):
                    h = -1.0 + (2 * i + 1) / levels
                    coords.append((rho * math.cos(psi), rho * math.sin(psi), h))
                    inner.append(region)
    return np.array(coords), np.array(inner, dtype=np.bool_)


@njit(cache=True, nogil=True)
def _misfit_kernel(data, origin, spacing, lattice, inner, centers, dirs, radii,
                   sigma_min, out_w, out_stats):
    nx, ny, nz = data.shape
    n_probe = lattice.shape[0]
    vals = np.empty(n_probe)
    ok = np.zeros(n_probe, dtype=np.bool_)
    for k in range(centers.shape[0]):
        d0 = dirs[k, 0]
        d1 = dirs[k, 1]
        d2 = dirs[k, 2]
        dn = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        d0 /= dn
        d1 /= dn
        d2 /= dn
        if abs(d0) < 0.9:
            h0, h1, h2 = 1.0, 0.0, 0.0
        else:
            h0, h1, h2 = 0.0, 1.0, 0.0
        u0 = d1 * h2 - d2 * h1
        u1 = d2 * h0 - d0 * h2
        u2 = d0 * h1 - d1 * h0
        un = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        u0 /= un
        u1 /= un
        u2 /= un
        v0 = d1 * u2 - d2 * u1
        v1 = d2 * u0 - d0 * u2
        v2 = d0 * u1 - d1 * u0
        r = radii[k]
        c0 = centers[k, 0]
        c1 = centers[k, 1]
        c2 = centers[k, 2]

        n_in = 0
        n_sh = 0
        sum_in = 0.0
        sum_sh = 0.0
        for j in range(n_probe):
            a = lattice[j, 0] * r
            b = lattice[j, 1] * r
            h = lattice[j, 2] * r
            gx = (c0 + a * u0 + b * v0 + h * d0 - origin[0]) / spacing[0]
            gy = (c1 + a * u1 + b * v1 + h * d1 - origin[1]) / spacing[1]
            gz = (c2 + a * u2 + b * v2 + h * d2 - origin[2]) / spacing[2]
            if gx < 0.0 or gy < 0.0 or gz < 0.0 or gx > nx - 1 or gy > ny - 1 or gz > nz - 1:
                ok[j] = False
                continue
            ix = min(int(gx), max(nx - 2, 0))
            iy = min(int(gy), max(ny - 2, 0))
            iz = min(int(gz), max(nz - 2, 0))
            fx = gx - ix
            fy = gy - iy
            fz = gz - iz
            jx = min(ix + 1, nx - 1)
            jy = min(iy + 1, ny - 1)
            jz = min(iz + 1, nz - 1)
            c00 = data[ix, iy, iz] * (1 - fx) + data[jx, iy, iz] * fx
            c10 = data[ix, jy, iz] * (1 - fx) + data[jx, jy, iz] * fx
            c01 = data[ix, iy, jz] * (1 - fx) + data[jx, iy, jz] * fx
            c11 = data[ix, jy, jz] * (1 - fx) + data[jx, jy, jz] * fx
            val = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz
            vals[j] = val
            ok[j] = True
            if inner[j]:
                n_in += 1
                sum_in += val
            else:
                n_sh += 1
                sum_sh += val

        n_tot = n_in + n_sh
        if 2 * n_tot < n_probe or n_in < 2 or n_sh < 2:
            out_w[k] = math.inf
            out_stats[k, 0] = math.nan
            out_stats[k, 1] = math.nan
            out_stats[k, 2] = math.nan
            out_stats[k, 3] = math.nan
            continue
        mean_in = sum_in / n_in
        mean_sh = sum_sh / n_sh
        var_in = 0.0
        var_sh = 0.0
        for j in range(n_probe):
            if ok[j]:
                if inner[j]:
                    var_in += (vals[j] - mean_in) ** 2
                else:
                    var_sh += (vals[j] - mean_sh) ** 2
        sd_in = max(math.sqrt(var_in / n_in), sigma_min)
        sd_sh = max(math.sqrt(var_sh / n_sh), sigma_min)
        out_stats[k, 0] = mean_in
        out_stats[k, 1] = sd_in
        out_stats[k, 2] = mean_sh
        out_stats[k, 3] = sd_sh
        if mean_in <= mean_sh:
            out_w[k] = math.inf
            continue
        acc = 0.0
        k_in = 0.5 / (sd_in * sd_in)
        k_sh = 0.5 / (sd_sh * sd_sh)
        for j in range(n_probe):
            if ok[j]:
                if inner[j]:
                    acc += math.exp(-k_sh * (vals[j] - mean_sh) ** 2)
                else:
                    acc += math.exp(-k_in * (vals[j] - mean_in) ** 2)
        out_w[k] = acc / n_tot


class _Evaluator:
    """Batched misfit evaluation on one volume with one probe lattice."""

    def __init__(self, v: Volume, r_max: float, max_probes: int):
        self.data = v.data
        self.origin = np.asarray(v.origin)
        self.spacing = np.asarray(v.spacing)
        self.lattice, self.inner = probe_lattice(r_max, v.spacing, max_probes)
        self.sigma_min = max(SIGMA_FLOOR_FRACTION * v.intensity_range(), 1e-12)

    def __call__(self, centers, dirs, radii):
        centers = np.ascontiguousarray(centers, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        radii = np.ascontiguousarray(radii, dtype=np.float64)
        w = np.empty(len(radii))
        stats = np.empty((len(radii), 4))
        _misfit_kernel(self.data, self.origin, self.spacing, self.lattice, self.inner,
                       centers, dirs, radii, self.sigma_min, w, stats)
        return w, stats


def cylinder_misfit(v: Volume, model: CylinderModel, max_probes: int = 2000) -> float:
    """Misfit ``W`` of ``model`` on ``v`` (lower is more vessel-like).

    Returns ``MAX_MISFIT`` when fewer than half the probes fall inside the
    volume or when the lumen is not brighter than the shell.
    """
    ev = _Evaluator(v, model.r_in, max_probes)
    w, _ = ev(model.center[None], model.direction[None], np.array([model.r_in]))
    return float(w[0])


def region_stats(v: Volume, model: CylinderModel, max_probes: int = 2000) -> dict:
    """Probe means/stds of lumen and shell, computed with plain numpy."""
    lattice, inner = probe_lattice(model.r_in, v.spacing, max_probes)
    u, w = perpendicular_frame(model.direction)
    local = lattice * model.r_in
    pts = model.center + local[:, :1] * u + local[:, 1:2] * w + local[:, 2:3] * model.direction
    vals = sample_many(v, pts)
    ok = ~np.isnan(vals)
    vin = vals[ok & inner]
    vout = vals[ok & ~inner]
    return {
        "mean_in": float(vin.mean()) if vin.size else math.nan,
        "std_in": float(vin.std()) if vin.size else math.nan,
        "mean_out": float(vout.mean()) if vout.size else math.nan,
        "std_out": float(vout.std()) if vout.size else math.nan,
        "inside_fraction": float(ok.mean()),
    }


# -- differential evolution ------------------------------------------------------


@dataclass
class FitResult:
    """Outcome of one DE run. ``history`` holds the best misfit after each generation."""

    detection: Detection | None
    best_w: float
    history: list = field(default_factory=list)
    generations_run: int = 0


def _directions(theta, phi, base, u, w):
    st = np.sin(theta)[..., None]
    return (np.cos(theta)[..., None] * base
            + st * (np.cos(phi)[..., None] * u + np.sin(phi)[..., None] * w))


def fit_cylinders(v: Volume, inits, init_dirs, init_r: float, de: DEParams,
                  r_min: float | None = None, keys=None, search_radius: float | None = None,
                  layers=None, origin_indices=None) -> list[FitResult]:
    """Fit one cylinder per initial position, all DE populations evaluated together.

    Every start has its own random stream derived from ``(de.rng_seed, key)``,
    so a start's result does not depend on which other starts share the batch.

    Parameters
    ----------
    inits : (n, 3) array
        Starting centers in mm.
    init_dirs : (n, 3) or (3,) array
        Axis around which the direction is searched (polar angle up to 90 deg).
    init_r : float
        Starting radius; also sets the radius upper bound.
    r_min : float, optional
        Minimum plausible radius (rule 2c). Defaults to the largest spacing.
    keys : sequence of int tuples, optional
        Per-start stream keys; defaults to the start's position in ``inits``.
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=np.float64))
    n = len(inits)
    if n == 0:
        return []
    init_dirs = np.asarray(init_dirs, dtype=np.float64)
    if init_dirs.ndim == 1:
        init_dirs = np.tile(init_dirs, (n, 1))
    if r_min is None:
        r_min = max(v.spacing)
    if search_radius is None:
        search_radius = de.search_radius if de.search_radius is not None else max(v.spacing)
    if keys is None:
        keys = [(i,) for i in range(n)]
    if layers is None:
        layers = [0] * n
    if origin_indices is None:
        origin_indices = [(0, 0, 0)] * n

    r_lo = de.r_floor_factor * r_min
    r_hi = max(de.r_max_factor * init_r, r_lo * 1.5)
    ev = _Evaluator(v, r_hi, de.max_probes)

    P = de.population
    D = 6
    lo = np.empty((n, D))
    hi = np.empty((n, D))
    lo[:, :3] = inits - search_radius
    hi[:, :3] = inits + search_radius
    lo[:, 3], hi[:, 3] = 0.0, math.pi / 2
    lo[:, 4], hi[:, 4] = 0.0, 2 * math.pi
    lo[:, 5], hi[:, 5] = r_lo, r_hi

    bases = np.array([unit(d) for d in init_dirs])
    frames = [perpendicular_frame(d) for d in bases]
    us = np.array([f[0] for f in frames])
    ws = np.array([f[1] for f in frames])
    rngs = [np.random.default_rng([int(de.rng_seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in key]])
            for key in keys]

    def evaluate(idx, pop):
        # pop: (len(idx), P, D)
        m = len(idx)
        dirs = _directions(pop[..., 3], pop[..., 4], bases[idx][:, None, :],
                           us[idx][:, None, :], ws[idx][:, None, :])
        w, stats = ev(pop[..., :3].reshape(-1, 3), dirs.reshape(-1, 3), pop[..., 5].reshape(-1))
        return w.reshape(m, P), stats.reshape(m, P, 4)

    pop = np.empty((n, P, D))
    for i, rng in enumerate(rngs):
        pop[i] = lo[i] + rng.random((P, D)) * (hi[i] - lo[i])
        pop[i, 0, :3] = inits[i]
        pop[i, 0, 3:5] = 0.0
        pop[i, 0, 5] = min(max(init_r, r_lo), r_hi)
    all_idx = np.arange(n)
    fit, stats = evaluate(all_idx, pop)
    history = [[float(np.min(fit[i]))] for i in range(n)]
    active = np.ones(n, dtype=bool)
    gens_run = np.zeros(n, dtype=int)
    others = np.array([[j for j in range(P) if j != i] for i in range(P)])
    rows = np.arange(P)

    for _ in range(de.generations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        trials = np.empty((idx.size, P, D))
        for t, i in enumerate(idx):
            rng = rngs[i]
            pick = np.argsort(rng.random((P, P - 1)), axis=1)[:, :3]
            r123 = others[rows[:, None], pick]
            x = pop[i]
            mutant = x[r123[:, 0]] + de.F * (x[r123[:, 1]] - x[r123[:, 2]])
            cross = rng.random((P, D)) < de.CR
            cross[rows, rng.integers(0, D, size=P)] = True
            trial = np.where(cross, mutant, x)
            trial[:, 4] = np.mod(trial[:, 4], 2 * math.pi)
            low = trial < lo[i]
            high = trial > hi[i]
            trial = np.where(low, 0.5 * (x + lo[i]), trial)
            trial = np.where(high, 0.5 * (x + hi[i]), trial)
            trials[t] = trial
        tfit, tstats = evaluate(idx, trials)
        for t, i in enumerate(idx):
            better = tfit[t] <= fit[i]
            pop[i][better] = trials[t][better]
            fit[i][better] = tfit[t][better]
            stats[i][better] = tstats[t][better]
            history[i].append(float(np.min(fit[i])))
            gens_run[i] += 1
            if de.tol > 0:
                finite = fit[i][np.isfinite(fit[i])]
                if finite.size == P and finite.max() - finite.min() <= de.tol:
                    active[i] = False

    results = []
    for i in range(n):
        # lowest misfit; ties resolved by population slot for determinism
        b = int(np.argmin(fit[i]))
        best = float(fit[i][b])
        if not math.isfinite(best):
            results.append(FitResult(None, best, history[i], int(gens_run[i])))
            continue
        x = pop[i][b]
        direction = _directions(np.array(x[3]), np.array(x[4]), bases[i], us[i], ws[i])
        model = CylinderModel(x[:3].copy(), direction, float(x[5]))
        det = Detection(model, best, int(layers[i]), tuple(int(k) for k in origin_indices[i]),
                        *(float(s) for s in (stats[i][b][0], stats[i][b][2],
                                             stats[i][b][1], stats[i][b][3])))
        results.append(FitResult(det, best, history[i], int(gens_run[i])))
    return results


def fit_cylinder(v: Volume, init, init_dir, init_r: float, de: DEParams,
                 r_min: float | None = None, key=(0,), search_radius: float | None = None,
                 layer: int = 0, origin_index=(0, 0, 0)) -> Detection | None:
    """Best two-cylinder fit near ``init``; ``None`` when no candidate was feasible."""
    res = fit_cylinders(v, np.asarray(init)[None], np.asarray(init_dir), init_r, de,
                        r_min=r_min, keys=[key], search_radius=search_radius,
                        layers=[layer], origin_indices=[origin_index])
    return res[0].detection


def hemisphere_directions(count: int = 8) -> np.ndarray:
    """Roughly even axis directions on the upper hemisphere (Fibonacci spiral)."""
    k = np.arange(count) + 0.5
    z = 1.0 - k / count
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def fit_multistart(v: Volume, init, init_r: float, de: DEParams, starts: int = 8,
                   r_min: float | None = None, search_radius: float | None = None) -> Detection | None:
    """Fit with several initial axes and keep the lowest misfit (used when no direction is known)."""
    dirs = hemisphere_directions(starts)
    inits = np.tile(np.asarray(init, dtype=np.float64), (starts, 1))
    res = fit_cylinders(v, inits, dirs, init_r, de, r_min=r_min,
                        keys=[(0, 1, i) for i in range(starts)], search_radius=search_radius)
    dets = [r.detection for r in res if r.detection is not None]
    if not dets:
        return None
    return min(dets, key=lambda d: d.w)


# -- candidate selection -------------------------------------------------------------


def select_candidates(v: Volume, cloud, seed_det: Detection, sens: float, de: DEParams,
                      r_min: float | None = None, key_prefix=(1,)) -> list[Detection]:
    """Vessel-point candidates of a sampling cloud.

    1. Points whose interpolated intensity is more than ``3 * std_in`` away
       from the apex lumen mean are dropped without fitting.
    2. Survivors are fitted; a fit is kept when its lumen is brighter than
       its shell (enforced inside the fit), its fitness is at least
       ``sens * seed_det.fitness`` and its radius is at least ``r_min``.

    The result is sorted by ``(layer, origin_index)``. ``key_prefix`` keeps
    the random streams of different cones apart.
    """
    if not 0 < sens <= 1:
        raise ValueError("sens must lie in (0, 1]")
    if r_min is None:
        r_min = max(v.spacing)
    sigma_min = max(SIGMA_FLOOR_FRACTION * v.intensity_range(), 1e-12)
    spread = PREFILTER_SIGMAS * max(seed_det.std_in, sigma_min)
    values = sample_many(v, cloud.points)
    keep = np.abs(values - seed_det.mean_in) <= spread  # nan compares False
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return []
    search = de.search_radius if de.search_radius is not None else cloud.params.s
    index = [tuple(int(k) for k in cloud.index[i]) for i in idx]
    results = fit_cylinders(
        v, cloud.points[idx], cloud.axis, seed_det.radius, de, r_min=r_min,
        keys=[(*key_prefix, *k) for k in index], search_radius=search,
        layers=[k[0] for k in index], origin_indices=index,
    )
    threshold = sens * seed_det.fitness
    out = []
    for res in results:
        det = res.detection
        if det is None:
            continue
        if det.fitness >= threshold and det.radius >= r_min:
            out.append(det)
    out.sort(key=lambda d: (d.layer, d.origin_index))
    return out


def with_layer(det: Detection, layer: int) -> Detection:
    return replace(det, layer=layer)
