"""Everything after training: latent sampling, generation, composition,
fitting to unseen scans, and object removal.

Latent codes are modeled with diagonal Gaussians fitted per code set (and
per object category, enabled by the one-hot prefix). Generation extracts the
composed canonical surface and reposes its vertices through the learned
skinning. Fitting runs eight independently-initialized candidates and keeps
the one with the smallest bidirectional Chamfer distance to the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, gradients
from .articulation import (
    NetDeformer,
    SolverConfig,
    attach_roots,
    find_correspondences,
    forward_lbs_value,
    lbs_spatial_jacobian,
    transforms_graph,
)
from .fields import decoder_input, decoder_input_value, pe_op
from .meshing import Mesh, extract_mesh, sample_mesh_surface
from .metrics import chamfer_distance
from .model import CATEGORY_BITS, CompositionModel, LATENT_DIM
from .nn import positional_encoding
from .optim import Adam
from .parallel import parallel_map
from .synthbody import CATEGORIES, ScanRecord, make_body
from .training import TRAIN_SOLVER

VARIANCE_FLOOR = 1e-8


@dataclass
class LatentGaussian:
    mean: np.ndarray
    variance: np.ndarray  # diagonal

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.normal(size=self.mean.shape) * np.sqrt(self.variance)


def fit_gaussian(codes) -> LatentGaussian:
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or len(codes) < 2:
        raise ValueError(f"need at least 2 codes to fit a Gaussian, got shape {codes.shape}")
    mean = codes.mean(axis=0)
    var = codes.var(axis=0, ddof=1)
    return LatentGaussian(mean, np.maximum(var, VARIANCE_FLOOR))


class LatentLibrary:
    """Gaussians over the trained code sets, plus per-category object draws."""

    def __init__(self, model: CompositionModel):
        self.model = model
        self.human = fit_gaussian(model.z_th.data)
        z_o_full = np.concatenate([model.z_o_prefix.data, model.z_o_free.data], axis=1)
        self.object_pooled = fit_gaussian(z_o_full)
        self.object_by_category = {}
        cats = np.argmax(model.z_o_prefix.data, axis=1)
        for c, name in enumerate(CATEGORIES):
            rows = model.z_o_free.data[cats == c]
            if len(rows) >= 2:
                self.object_by_category[name] = fit_gaussian(rows)

    def sample_human(self, rng) -> np.ndarray:
        return self.human.sample(rng)

    def sample_object(self, rng, category: str | None = None) -> np.ndarray:
        if category is None:
            return self.object_pooled.sample(rng)
        if category not in self.object_by_category:
            raise KeyError(
                f"unknown or untrained category {category!r}; valid: {sorted(self.object_by_category)}"
            )
        free = self.object_by_category[category].sample(rng)
        prefix = np.zeros(CATEGORY_BITS)
        prefix[CATEGORIES.index(category)] = 1.0
        return np.concatenate([prefix, free])


class ComposedField:
    """Value-path evaluator of the composed occupancy for fixed codes."""

    def __init__(self, model: CompositionModel, z_h: np.ndarray, z_objects: list | None,
                 human: str = "target"):
        self.model = model
        self.human_module = model.target if human == "target" else model.source
        self.z_h = np.asarray(z_h, dtype=np.float64)
        self.planes_h = self.human_module.gen(Tensor(self.z_h)).data()
        if not z_objects:
            z_objects = [model.z_emp.data.copy()]
        self.z_objects = [np.asarray(z, dtype=np.float64) for z in z_objects]
        self.planes_o = [model.object.gen(Tensor(z)).data() for z in self.z_objects]

    def human_field(self, x: np.ndarray):
        feats = decoder_input_value(self.planes_h, x, self.model.config.bbox)
        return self.human_module.occ.value(feats)

    def object_fields(self, x: np.ndarray):
        outs = []
        for planes in self.planes_o:
            feats = decoder_input_value(planes, x, self.model.config.bbox)
            outs.append(self.model.object.occ.value(feats))
        return outs

    def object_feature_blend(self, x: np.ndarray):
        """Occupancy-weighted feature average across objects (one object is
        passed through untouched, an exact identity)."""
        outs = self.object_fields(x)
        if len(outs) == 1:
            return outs[0].feature
        occ = np.stack([o.occupancy for o in outs], axis=0)  # [K,N]
        feats = np.stack([o.feature for o in outs], axis=0)  # [K,N,229]
        total = occ.sum(axis=0)
        weights = np.where(total[None] > VARIANCE_FLOOR, occ / np.maximum(total[None], VARIANCE_FLOOR),
                           1.0 / len(outs))
        return np.einsum("kn,knf->nf", weights, feats)

    def occupancy(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        human = self.human_field(x)
        f_o = self.object_feature_blend(x)
        comp_in = np.concatenate([positional_encoding(x), human.feature, f_o], axis=-1)
        return self.model.composer.value(comp_in)

    def human_occupancy(self, x: np.ndarray) -> np.ndarray:
        return self.human_field(np.asarray(x, dtype=np.float64)).occupancy


def compose_multi(model: CompositionModel, x: np.ndarray, f_h: np.ndarray,
                  objects: list) -> np.ndarray:
    """Composition occupancy from explicit per-object (occupancy, feature)."""
    if not objects:
        raise ValueError("compose_multi needs at least one object; use the empty code instead")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(objects) == 1:
        blend = objects[0][1]
    else:
        occ = np.stack([o for o, _ in objects], axis=0)
        feats = np.stack([f for _, f in objects], axis=0)
        total = occ.sum(axis=0)
        weights = np.where(total[None] > VARIANCE_FLOOR,
                           occ / np.maximum(total[None], VARIANCE_FLOOR), 1.0 / len(objects))
        blend = np.einsum("kn,knf->nf", weights, feats)
    comp_in = np.concatenate([positional_encoding(x), f_h, blend], axis=-1)
    return model.composer.value(comp_in)


def generate_sample(model: CompositionModel, z_h: np.ndarray, z_o: np.ndarray | None,
                    beta, theta, resolution: int = 128, human: str = "target",
                    solver: SolverConfig = TRAIN_SOLVER) -> Mesh:
    """Extract the composed canonical mesh, then repose vertices by LBS."""
    beta = np.zeros(10) if beta is None else np.asarray(beta, dtype=np.float64)
    field = ComposedField(model, z_h, [z_o] if z_o is not None else None, human=human)
    mesh = extract_mesh(field.occupancy, model.config.bbox, resolution, iso=0.5,
                        orientation="occupancy")
    if mesh.empty:
        return mesh
    theta_arr = None if theta is None else np.asarray(theta, dtype=np.float64)
    if theta_arr is None or not np.any(theta_arr):
        return mesh
    body = make_body(0)
    tf = body.transforms(beta, theta_arr)
    module = model.target if human == "target" else model.source
    deformer = NetDeformer(module.skin, module.warp, field.z_h, beta)
    weights = deformer.weights_value(mesh.vertices)
    posed = forward_lbs_value(mesh.vertices, weights, tf)
    nrm_tip = forward_lbs_value(mesh.vertices + 1e-4 * mesh.normals, weights, tf)
    normals = nrm_tip - posed
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    return Mesh(posed, mesh.triangles, normals)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitCandidate:
    z_h: np.ndarray
    z_o: np.ndarray
    beta: np.ndarray
    chamfer: float
    mesh: Mesh


@dataclass
class FitResult:
    candidates: list
    best_index: int

    @property
    def best(self) -> FitCandidate:
        return self.candidates[self.best_index]


@dataclass(frozen=True)
class FitConfig:
    n_candidates: int = 8
    iterations: int = 500
    lr: float = 0.01
    points_per_iter: int = 256
    lambda_reg: float = 50.0
    resolution: int = 96
    seed: int = 0
    optimize_beta: bool = True
    chamfer_samples: int = 2000


class FittingDiverged(RuntimeError):
    pass


def _fit_one_candidate(model: CompositionModel, scan: ScanRecord, z_h0, z_o0, cfg: FitConfig,
                       cand_seed: int, solver: SolverConfig) -> FitCandidate:
    body = make_body(0)
    z_h = Tensor(np.asarray(z_h0, dtype=np.float64).copy(), requires_grad=True, name="fit/z_h")
    z_o = Tensor(np.asarray(z_o0, dtype=np.float64).copy(), requires_grad=True, name="fit/z_o")
    beta = Tensor(scan.beta.copy(), requires_grad=cfg.optimize_beta, name="fit/beta")
    params = {"fit/z_h": z_h, "fit/z_o": z_o}
    if cfg.optimize_beta:
        params["fit/beta"] = beta
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, cand_seed, 11])
    deform_params = [z_h, beta] if cfg.optimize_beta else [z_h]

    for it in range(cfg.iterations):
        pick = rng.choice(len(scan.volume_points), cfg.points_per_iter, replace=False)
        pts = scan.volume_points[pick]
        labels = scan.volume_occ[pick]
        tf = body.transforms(beta.data, scan.theta)
        deformer = NetDeformer(model.target.skin, model.target.warp, z_h.data, beta.data)
        batch = find_correspondences(pts, deformer, tf, solver)
        if batch.count() == 0:
            continue
        j_x = lbs_spatial_jacobian(batch.roots, deformer, tf)

        def lbs_builder(roots_):
            tmat = transforms_graph(beta, body.skeleton, scan.theta)
            warped = model.target.warp.graph(Tensor(roots_), beta)
            w = model.target.skin.graph(warped, z_h)
            rot = tmat[:, :, :3]
            trans = tmat[:, :, 3]
            bx = ad.add(ad.einsum("bij,nj->nbi", rot, Tensor(roots_)),
                        ad.reshape(trans, (1, -1, 3)))
            return ad.einsum("nb,nbi->ni", w, bx)

        roots_t = attach_roots(batch.roots, j_x, lbs_builder, deform_params)
        planes_h = model.target.gen(z_h)
        occ_h, feat_h = model.target.occ(decoder_input(planes_h, roots_t, model.config.bbox))
        sel_values = occ_h.data
        from .training import _select_max

        sel, covered = _select_max(sel_values, batch.point_ids, batch.n_points)
        rows = sel[covered]
        planes_o = model.object.gen(z_o)
        roots_sel = ad.gather_rows(roots_t, rows)
        occ_o, feat_o = model.object.occ(decoder_input(planes_o, roots_sel, model.config.bbox))
        comp_in = ad.concat([pe_op(roots_sel), ad.gather_rows(feat_h, rows), feat_o], axis=-1)
        o_comp = model.composer(comp_in)
        loss = ad.div(L.bce_sum(o_comp, labels[covered]), Tensor(float(len(pick))))
        loss = ad.add(loss, Tensor(L.bce_constant(0.0, labels[~covered]) / len(pick)))
        loss = ad.add(loss, ad.mul(Tensor(cfg.lambda_reg), ad.safe_l2norm(z_h)))
        loss = ad.add(loss, ad.mul(Tensor(cfg.lambda_reg), ad.safe_l2norm(z_o)))
        if not np.isfinite(loss.data):
            raise FittingDiverged(f"candidate seed {cand_seed}: non-finite loss at iteration {it}")
        names = list(params.keys())
        grads = gradients(loss, [params[n] for n in names])
        opt.step({n: g for n, g in zip(names, grads) if g is not None})

    mesh = generate_sample(model, z_h.data, z_o.data, beta.data, scan.theta,
                           resolution=cfg.resolution, solver=solver)
    if mesh.empty:
        cham = float("inf")
    else:
        pts, _ = sample_mesh_surface(mesh, cfg.chamfer_samples, seed=cfg.seed + cand_seed)
        cham = chamfer_distance(pts, scan.surface_points)
    return FitCandidate(z_h.data.copy(), z_o.data.copy(), beta.data.copy(), cham, mesh)


def fit_to_scan(model: CompositionModel, scan: ScanRecord, library: LatentLibrary,
                cfg: FitConfig = FitConfig(), solver: SolverConfig = TRAIN_SOLVER) -> FitResult:
    """Optimize (z_h, z_o, beta) from 8 Gaussian draws; keep the Chamfer-best."""
    draws = []
    for k in range(cfg.n_candidates):
        rng = np.random.default_rng([cfg.seed, 97, k])
        draws.append((library.sample_human(rng), library.sample_object(rng), k))

    def run(args):
        z_h0, z_o0, k = args
        return _fit_one_candidate(model, scan, z_h0, z_o0, cfg, k, solver)

    candidates = parallel_map(run, draws)
    chams = [c.chamfer for c in candidates]
    if not np.any(np.isfinite(chams)):
        raise FittingDiverged(
            f"all {cfg.n_candidates} candidates diverged (seeds 0..{cfg.n_candidates - 1})"
        )
    best = int(np.argmin(chams))
    return FitResult(candidates, best)


def remove_object(model: CompositionModel, fit: FitCandidate, theta=None,
                  resolution: int = 96, mode: str = "empty-code",
                  solver: SolverConfig = TRAIN_SOLVER) -> Mesh:
    """Re-extract the fitted subject with the object swapped out.

    "empty-code" routes the shared empty-object code through the composition
    decoder (the training-time object-free path); "human-only" extracts the
    bare human module occupancy instead.
    """
    if mode == "empty-code":
        return generate_sample(model, fit.z_h, None, fit.beta, theta, resolution, solver=solver)
    field = ComposedField(model, fit.z_h, None)
    mesh = extract_mesh(field.human_occupancy, model.config.bbox, resolution, iso=0.5,
                        orientation="occupancy")
    return mesh
