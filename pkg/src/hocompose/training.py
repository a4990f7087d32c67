"""Three-stage training schedule.

Stage 1 fits the target human module (hybrid occupancy + SDF) with its
deformer on the varied-identity scans. Stage 2 fits the source human module
(occupancy only), its skinning net warm-started from stage 1 and the warp net
shared frozen. Stage 3 freezes both human modules and their codes, restarts
the source codes from their mean, and fits the object and composition modules
on every scan; object-free scans route the shared empty-object code.

Determinism: every random draw comes from a generator seeded by
(seed, stage, epoch, step, slot); gradient reduction is ordered by batch slot,
so results are bit-identical for any worker count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor, gradients
from .articulation import (
    NetDeformer,
    SolverConfig,
    attach_roots,
    find_correspondences,
    forward_lbs_graph,
    lbs_spatial_jacobian,
)
from .fields import decoder_input, decoder_input_value, decoder_input_with_jac, pe_op, query_triplane_value
from .losses import LossWeights
from .model import CompositionModel
from .nn import positional_encoding
from .optim import Adam
from .parallel import parallel_map
from .synthbody import ScanRecord, corresponding_vertices, make_body

# Training queries include uniform empty-space samples for which the
# all-bones fallback multiplies solver cost without changing labels; the
# nearest-bone fallback keeps those cheap while near-surface points still get
# the full radius rule. The library-wide solver default stays at "all".
TRAIN_SOLVER = SolverConfig(fallback="nearest", fallback_count=6)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int = 60
    lr: float = 0.001
    points_per_scan: int = 384
    surface_per_scan: int = 192
    igr_per_scan: int = 96
    bbox_per_scan: int = 96
    bone_points: int = 64
    warp_pairs: int = 128
    scans_per_batch: int = 4
    seed: int = 0
    solver: SolverConfig = TRAIN_SOLVER
    sth_fraction_stage3: float = 0.25

    def scaled(self, **kw) -> "StageConfig":
        return replace(self, **kw)


STAGE_LOSS_COLUMNS = {
    1: ["occ", "bone", "joint", "warp", "reg", "sdf", "nml", "igr", "bbox"],
    2: ["occ", "reg"],
    3: ["comp", "obj", "fit", "reg_sh", "reg_o"],
}


def _scan_rng(seed: int, stage: int, epoch: int, step: int, slot: int):
    return np.random.default_rng([seed, stage, epoch, step, slot])


def _select_max(values: np.ndarray, point_ids: np.ndarray, n_points: int):
    """Per-point argmax over flat root rows -> (selected flat idx, covered mask).

    Ties resolve to the lowest flat row (stable sort), keeping runs bit-identical.
    """
    best = np.full(n_points, -1, dtype=np.int64)
    if len(point_ids):
        order = np.lexsort((-values, point_ids))
        pid_sorted = point_ids[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pid_sorted[1:] != pid_sorted[:-1]
        best[pid_sorted[first]] = order[first]
    covered = best >= 0
    return best, covered


def _bce_with_empties(pred_sel: Tensor, labels_cov: np.ndarray, labels_empty: np.ndarray,
                      empty_prob: float = 0.0):
    n = len(labels_cov) + len(labels_empty)
    total = ad.div(L.bce_sum(pred_sel, labels_cov), Tensor(float(n)))
    const = L.bce_constant(empty_prob, labels_empty) / n if len(labels_empty) else 0.0
    return ad.add(total, Tensor(const))


@dataclass
class ScanTask:
    kind: str          # "s_th" | "s_sh" | "s_sh_plus_o"
    table_idx: int     # row in the kind's latent table
    record: ScanRecord


class Trainer:
    def __init__(self, model: CompositionModel, datasets: dict, cfg: StageConfig,
                 weights: LossWeights | None = None):
        self.model = model
        self.datasets = datasets
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.bodies = {}
        self.sth_cache: dict[int, dict] = {}
        self.loss_rows: list[dict] = []
        model.set_stage_trainable(cfg.stage)
        self.trainable = {k: t for k, t in model.bag.items() if t.requires_grad}
        self.optimizer = Adam(self.trainable, lr=cfg.lr)
        self.deformer_params_stage1 = [
            t for k, t in model.bag.items()
            if k.startswith(("target/skin/", "target/warp/")) or k == "codes/z_th"
        ]

    # ------------------------------------------------------------------

    def body_for(self, rec: ScanRecord):
        if rec.identity_seed not in self.bodies:
            self.bodies[rec.identity_seed] = make_body(rec.identity_seed)
        return self.bodies[rec.identity_seed]

    def tasks(self) -> list:
        s = self.cfg.stage
        if s == 1:
            return [ScanTask("s_th", i, r) for i, r in enumerate(self.datasets["s_th"])]
        if s == 2:
            return [ScanTask("s_sh", i, r) for i, r in enumerate(self.datasets["s_sh"])]
        out = [ScanTask("s_th", i, r) for i, r in enumerate(self.datasets["s_th"])]
        out += [ScanTask("s_sh", i, r) for i, r in enumerate(self.datasets["s_sh"])]
        out += [ScanTask("s_sh_plus_o", i, r) for i, r in enumerate(self.datasets["s_sh_plus_o"])]
        return out

    # ------------------------------------------------------------------
    # stage 1

    def _stage1_scan(self, task: ScanTask, epoch: int, rng) -> tuple[dict, dict]:
        model, cfg, w = self.model, self.cfg, self.weights
        rec = task.record
        body = self.body_for(rec)
        idx = task.table_idx

        vol_idx = rng.choice(len(rec.volume_points), cfg.points_per_scan, replace=False)
        surf_idx = rng.choice(len(rec.surface_points), cfg.surface_per_scan, replace=False)
        canon_idx = rng.choice(len(rec.canon_points), cfg.igr_per_scan, replace=False)
        bbox_pool = np.nonzero(np.abs(rec.canon_sdf) > L.BBOX_CUTOFF)[0]
        bbox_idx = rng.choice(bbox_pool, min(cfg.bbox_per_scan, len(bbox_pool)), replace=False)

        vol_pts = rec.volume_points[vol_idx]
        vol_lab = rec.volume_occ[vol_idx]
        surf_pts = rec.surface_points[surf_idx]
        surf_nrm = rec.surface_normals[surf_idx]

        tf = body.transforms(rec.beta, rec.theta)
        z_val = model.z_th.data[idx]
        deformer = NetDeformer(model.target.skin, model.target.warp, z_val, rec.beta)
        queries = np.concatenate([vol_pts, surf_pts])
        batch = find_correspondences(queries, deformer, tf, cfg.solver)
        j_x = lbs_spatial_jacobian(batch.roots, deformer, tf)

        z_row = model.z_row(model.z_th, idx)
        beta_t = Tensor(rec.beta)
        tmat = Tensor(np.concatenate([tf.rotations, tf.translations[:, :, None]], axis=2))

        def lbs_builder(roots):
            zr = model.z_row(model.z_th, idx)
            return forward_lbs_graph(Tensor(roots), model.target.skin, model.target.warp,
                                     zr, beta_t, tmat)

        roots_t = attach_roots(batch.roots, j_x, lbs_builder, self.deformer_params_stage1)
        planes = model.target.gen(z_row)
        occ_all, _ = model.target.occ(decoder_input(planes, roots_t, model.config.bbox))

        n_vol = len(vol_pts)
        sel, covered = _select_max(occ_all.data, batch.point_ids, batch.n_points)
        vol_cov = covered[:n_vol]
        occ_sel = ad.gather_rows(occ_all, sel[:n_vol][vol_cov])
        l_occ = _bce_with_empties(occ_sel, vol_lab[vol_cov], vol_lab[~vol_cov])

        terms = {"occ": l_occ}

        # hybrid SDF head: roots are constants on this path (gradient blocking)
        near_sel = np.abs(rec.volume_sdf[vol_idx]) <= 0.1
        near_mask = near_sel & vol_cov
        surf_cov = covered[n_vol:]
        n_surf_used = int(surf_cov.sum())
        sdf_root_rows = np.concatenate([sel[:n_vol][near_mask], sel[n_vol:][surf_cov]])
        sdf_targets = np.concatenate([rec.volume_sdf[vol_idx][near_mask], np.zeros(n_surf_used)])
        n_sdf_planned = int(near_sel.sum()) + len(surf_pts)
        if len(sdf_root_rows):
            f_all = model.target.sdf(
                decoder_input(planes, batch.roots[sdf_root_rows], model.config.bbox))
            # rootless posed samples score the far-field fallback value
            far = model.config.bbox.diagonal
            miss_d = np.concatenate([rec.volume_sdf[vol_idx][near_sel & ~vol_cov],
                                     np.zeros(int((~surf_cov).sum()))])
            const = float(np.abs(far - miss_d).sum()) / n_sdf_planned
            l1 = ad.div(ad.tsum(ad.absolute(ad.sub(f_all, Tensor(sdf_targets)))),
                        Tensor(float(n_sdf_planned)))
            terms["sdf"] = ad.add(l1, Tensor(const))
            if n_surf_used:
                # spatial-gradient carry only where normals are supervised
                surf_rows = sel[n_vol:][surf_cov]
                feats_s, jac_s = decoder_input_with_jac(planes, batch.roots[surf_rows],
                                                        model.config.bbox)
                _, g_canon = model.target.sdf.with_spatial_grad(feats_s, jac_s)
                jinv = np.linalg.inv(j_x[surf_rows])
                g_posed = ad.einsum("nji,nj->ni", Tensor(jinv), g_canon)
                terms["nml"] = L.loss_normal(g_posed, surf_nrm[surf_cov])
            else:
                terms["nml"] = Tensor(0.0)
        else:
            terms["sdf"] = Tensor(0.0)
            terms["nml"] = Tensor(0.0)

        feats_c, jac_c = decoder_input_with_jac(planes, rec.canon_points[canon_idx], model.config.bbox)
        _, g_igr = model.target.sdf.with_spatial_grad(feats_c, jac_c)
        terms["igr"] = L.loss_eikonal(g_igr)
        f_bbox = model.target.sdf(decoder_input(planes, rec.canon_points[bbox_idx], model.config.bbox))
        terms["bbox"] = L.loss_offsurface(f_bbox, w.alpha_bbox)

        if w.bone_joint_active(epoch):
            joints_b = body.skeleton.rest_joints(rec.beta)
            segs_b = body.skeleton.rest_segments(rec.beta)
            bones = rng.integers(0, body.skeleton.bone_count, size=cfg.bone_points)
            u = rng.uniform(0.05, 0.95, size=cfg.bone_points)
            bone_pts = joints_b[bones] + u[:, None] * segs_b[bones]
            occ_bone, _ = model.target.occ(decoder_input(planes, bone_pts, model.config.bbox))
            terms["bone"] = L.loss_bone(occ_bone)
            joints0 = body.skeleton.rest_joints(None)[1:]
            _, targets = L.joint_weight_targets(body.skeleton.parents, body.skeleton.bone_count)
            wj = model.target.skin.graph(Tensor(joints0), z_row)
            terms["joint"] = L.loss_joint(wj, targets)
        else:
            terms["bone"] = Tensor(0.0)
            terms["joint"] = Tensor(0.0)

        v_beta, v_zero = corresponding_vertices(body, rec.beta, cfg.warp_pairs,
                                                seed=int(rng.integers(2**31 - 1)))
        warped = model.target.warp.graph(Tensor(v_beta), beta_t)
        terms["warp"] = L.loss_warp(warped, v_zero)
        terms["reg"] = L.loss_latent_reg(z_row)

        total = terms["occ"]
        for name, lam in (
            ("bone", w.lambda_bone), ("joint", w.lambda_joint), ("warp", w.lambda_warp),
            ("reg", w.lambda_reg_th), ("sdf", 1.0), ("nml", 1.0), ("igr", 1.0), ("bbox", 1.0),
        ):
            if name in ("bone", "joint") and not w.bone_joint_active(epoch):
                continue
            total = ad.add(total, ad.mul(Tensor(lam), terms[name]))
        return self._finish(total, terms)

    # ------------------------------------------------------------------
    # stage 2

    def _stage2_scan(self, task: ScanTask, epoch: int, rng) -> tuple[dict, dict]:
        model, cfg, w = self.model, self.cfg, self.weights
        rec = task.record
        body = self.body_for(rec)
        idx = task.table_idx

        vol_idx = rng.choice(len(rec.volume_points), cfg.points_per_scan, replace=False)
        vol_pts = rec.volume_points[vol_idx]
        vol_lab = rec.volume_occ[vol_idx]

        tf = body.transforms(rec.beta, rec.theta)
        z_val = model.z_sh.data[idx]
        deformer = NetDeformer(model.source.skin, model.source.warp, z_val, rec.beta)
        batch = find_correspondences(vol_pts, deformer, tf, cfg.solver)
        j_x = lbs_spatial_jacobian(batch.roots, deformer, tf)

        beta_t = Tensor(rec.beta)
        tmat = Tensor(np.concatenate([tf.rotations, tf.translations[:, :, None]], axis=2))
        params = [t for k, t in model.bag.items() if k.startswith("source/skin/")] + [model.z_sh]

        def lbs_builder(roots):
            zr = model.z_row(model.z_sh, idx)
            return forward_lbs_graph(Tensor(roots), model.source.skin, model.source.warp,
                                     zr, beta_t, tmat)

        roots_t = attach_roots(batch.roots, j_x, lbs_builder, params)
        z_row = model.z_row(model.z_sh, idx)
        planes = model.source.gen(z_row)
        occ_all, _ = model.source.occ(decoder_input(planes, roots_t, model.config.bbox))
        sel, covered = _select_max(occ_all.data, batch.point_ids, batch.n_points)
        occ_sel = ad.gather_rows(occ_all, sel[covered])
        terms = {
            "occ": _bce_with_empties(occ_sel, vol_lab[covered], vol_lab[~covered]),
            "reg": L.loss_latent_reg(z_row),
        }
        total = ad.add(terms["occ"], ad.mul(Tensor(w.lambda_reg_sh_stage2), terms["reg"]))
        return self._finish(total, terms)

    # ------------------------------------------------------------------
    # stage 3

    def _build_sth_cache(self):
        """Frozen-module scans: roots, tri-plane features, and occupancy are
        constant through stage 3, so compute them once per scan."""
        model, cfg = self.model, self.cfg

        def build(args):
            i, rec = args
            body = self.body_for(rec)
            tf = body.transforms(rec.beta, rec.theta)
            z_val = model.z_th.data[i]
            deformer = NetDeformer(model.target.skin, model.target.warp, z_val, rec.beta)
            batch = find_correspondences(rec.volume_points, deformer, tf, cfg.solver)
            planes = model.target.gen(Tensor(z_val))
            feats = decoder_input_value(planes.data(), batch.roots, model.config.bbox)
            out = model.target.occ.value(feats)
            sel, covered = _select_max(out.occupancy, batch.point_ids, batch.n_points)
            roots = np.zeros((batch.n_points, 3))
            tri = np.zeros((batch.n_points, feats.shape[1] - 27))
            occ = np.zeros(batch.n_points)
            roots[covered] = batch.roots[sel[covered]]
            tri[covered] = feats[sel[covered], 27:]
            occ[covered] = out.occupancy[sel[covered]]
            return {"roots": roots, "tri": tri, "occ": occ, "covered": covered}

        items = list(enumerate(self.datasets["s_th"]))
        results = parallel_map(build, items)
        self.sth_cache = {i: res for (i, _), res in zip(items, results)}

    def _build_source_cache(self):
        """Stage-3 canonicalization of source scans, conditioned on the code
        anchor: the heavy latent regularizer keeps stage-3 source codes near
        their mean, so roots are computed once per scan against the anchor and
        reused; code gradients then flow through the generator and decoders.
        """
        model, cfg = self.model, self.cfg
        anchor = model.z_sh_anchor.data

        def build(args):
            key, rec = args
            body = self.body_for(rec)
            tf = body.transforms(rec.beta, rec.theta)
            deformer = NetDeformer(model.source.skin, model.source.warp, anchor, rec.beta)
            batch = find_correspondences(rec.volume_points, deformer, tf, cfg.solver)
            # CSR layout over stored points (point_ids ascend by construction)
            offsets = np.searchsorted(batch.point_ids, np.arange(batch.n_points + 1))
            return {"roots": batch.roots, "point_ids": batch.point_ids, "offsets": offsets}

        items = []
        for i, rec in enumerate(self.datasets["s_sh"]):
            items.append((("s_sh", i), rec))
        for i, rec in enumerate(self.datasets["s_sh_plus_o"]):
            items.append((("s_sh_plus_o", i), rec))
        results = parallel_map(build, items)
        self.source_cache = {key: res for (key, _), res in zip(items, results)}

    @staticmethod
    def _gather_cached(cache: dict, stored_idx: np.ndarray):
        """Roots of a subset of stored points, re-id'd to subset order."""
        offs = cache["offsets"]
        spans = [(offs[i], offs[i + 1]) for i in stored_idx]
        counts = np.array([b - a for a, b in spans], dtype=np.int64)
        rows = np.concatenate([np.arange(a, b) for a, b in spans]) if len(spans) else np.zeros(0, np.int64)
        point_ids = np.repeat(np.arange(len(stored_idx)), counts)
        return cache["roots"][rows], point_ids

    def _stage3_scan(self, task: ScanTask, epoch: int, rng) -> tuple[dict, dict]:
        model, cfg, w = self.model, self.cfg, self.weights
        rec = task.record
        idx = task.table_idx
        vol_idx = rng.choice(len(rec.volume_points), cfg.points_per_scan, replace=False)
        vol_lab = rec.volume_occ[vol_idx]
        terms: dict = {}

        if task.kind == "s_th":
            cache = self.sth_cache[idx]
            covered = cache["covered"][vol_idx]
            roots = cache["roots"][vol_idx][covered]
            o_h = cache["occ"][vol_idx][covered]
            enc = positional_encoding(roots)
            f_h = Tensor(model.target.occ.value(np.concatenate([enc, cache["tri"][vol_idx][covered]], axis=1)).feature)
            pe_t = Tensor(enc)
            o_h_t = None
            z_obj = ad.reshape(model.z_emp, (model.z_emp.data.shape[0],))
            reg_o = L.loss_latent_reg(model.z_emp)
            reg_sh = None
        else:
            sh_row = idx if task.kind == "s_sh" else model.config.n_sh + idx
            cand_roots, cand_pids = self._gather_cached(self.source_cache[(task.kind, idx)], vol_idx)
            z_row = model.z_row(model.z_sh3, sh_row)
            planes_h = model.source.gen(z_row)
            occ_h_all, feat_h_all = model.source.occ(
                decoder_input(planes_h, cand_roots, model.config.bbox))
            sel, covered = _select_max(occ_h_all.data, cand_pids, len(vol_idx))
            rows = sel[covered]
            roots = cand_roots[rows]
            o_h = occ_h_all.data[rows]
            o_h_t = ad.gather_rows(occ_h_all, rows)
            f_h = ad.gather_rows(feat_h_all, rows)
            pe_t = Tensor(positional_encoding(roots))
            reg_sh = L.loss_latent_reg(z_row, model.z_sh_anchor.data)
            if task.kind == "s_sh_plus_o":
                z_obj = model.z_o_row(idx)
                reg_o = L.loss_latent_reg(
                    ad.reshape(ad.gather_rows(model.z_o_free, np.array([idx])), (-1,)))
            else:
                z_obj = ad.reshape(model.z_emp, (model.z_emp.data.shape[0],))
                reg_o = L.loss_latent_reg(model.z_emp)

        planes_o = model.object.gen(z_obj)
        occ_o, feat_o = model.object.occ(decoder_input(planes_o, roots, model.config.bbox))
        o_comp = model.composer(ad.concat([pe_t, f_h, feat_o], axis=-1))

        lab_cov = vol_lab[covered]
        lab_emp = vol_lab[~covered]
        terms["comp"] = _bce_with_empties(o_comp, lab_cov, lab_emp)
        target = L.object_residual_target(o_h, o_comp.data)
        terms["obj"] = L.loss_occupancy_bce(occ_o, target)
        if o_h_t is not None:
            terms["fit"] = _bce_with_empties(o_h_t, lab_cov, lab_emp)
            terms["reg_sh"] = reg_sh
        else:
            terms["fit"] = Tensor(0.0)
            terms["reg_sh"] = Tensor(0.0)
        terms["reg_o"] = reg_o

        total = ad.add(terms["comp"], terms["obj"])
        if o_h_t is not None:
            total = ad.add(total, ad.mul(Tensor(w.lambda_fit), terms["fit"]))
            total = ad.add(total, ad.mul(Tensor(w.lambda_reg_sh_stage3), terms["reg_sh"]))
        total = ad.add(total, ad.mul(Tensor(w.lambda_reg_o), terms["reg_o"]))
        return self._finish(total, terms)

    # ------------------------------------------------------------------

    def _finish(self, total: Tensor, terms: dict) -> tuple[dict, dict]:
        names = list(self.trainable.keys())
        grads = gradients(total, [self.trainable[n] for n in names])
        gmap = {n: g for n, g in zip(names, grads) if g is not None}
        values = {k: float(v.data) for k, v in terms.items()}
        values["total"] = float(total.data)
        return values, gmap

    def _scan_loss(self, task: ScanTask, epoch: int, rng) -> tuple[dict, dict]:
        if self.cfg.stage == 1:
            return self._stage1_scan(task, epoch, rng)
        if self.cfg.stage == 2:
            return self._stage2_scan(task, epoch, rng)
        return self._stage3_scan(task, epoch, rng)

    def run(self, log=None) -> list:
        cfg = self.cfg
        if cfg.stage == 2:
            self.model.init_stage2_from_stage1()
        if cfg.stage == 3:
            self.model.init_stage3_codes()
            self._build_sth_cache()
            self._build_source_cache()
        tasks = self.tasks()
        for t in tasks:
            self.body_for(t.record)  # workers fork after this; they only read
        from .parallel import get_workers
        from .procpool import StepExecutor

        def runner(payload, epoch, step):
            task_idx, slot = payload
            rng = _scan_rng(cfg.seed, cfg.stage, epoch, step, slot)
            return self._scan_loss(tasks[task_idx], epoch, rng)

        executor = StepExecutor(runner, self.trainable, cfg.scans_per_batch, get_workers())
        order_rng = np.random.default_rng([cfg.seed, cfg.stage, 777])
        t0 = time.time()
        try:
            for epoch in range(cfg.epochs):
                order = order_rng.permutation(len(tasks))
                if cfg.stage == 3 and cfg.sth_fraction_stage3 < 1.0:
                    keep = []
                    n_th = len(self.datasets["s_th"])
                    quota = int(np.ceil(n_th * cfg.sth_fraction_stage3))
                    used = 0
                    for t in order:
                        if tasks[t].kind == "s_th":
                            if used >= quota:
                                continue
                            used += 1
                        keep.append(t)
                    order = np.asarray(keep)
                for step, start in enumerate(range(0, len(order), cfg.scans_per_batch)):
                    slots = order[start : start + cfg.scans_per_batch]
                    payloads = [(int(s), int(s)) for s in slots]
                    values, flat = executor.run_step(epoch, step, payloads)
                    n = float(len(payloads))
                    agg = executor.grad_map(flat / n)
                    mean_terms: dict = {}
                    for v in values:
                        for k, val in v.items():
                            mean_terms[k] = mean_terms.get(k, 0.0) + val / n
                    if not np.isfinite(mean_terms["total"]):
                        raise TrainingError(
                            f"non-finite loss at stage {cfg.stage} epoch {epoch} step {step}"
                        )
                    self.optimizer.step(agg)
                    row = {"epoch": epoch, "step": step}
                    row.update(mean_terms)
                    self.loss_rows.append(row)
                if log:
                    last = self.loss_rows[-1]
                    msg = " ".join(
                        f"{k}={v:.4f}" for k, v in last.items() if k not in ("epoch", "step")
                    )
                    log(f"stage {cfg.stage} epoch {epoch + 1}/{cfg.epochs} "
                        f"({time.time() - t0:.0f}s) {msg}")
        finally:
            executor.close()
        return self.loss_rows

    def write_loss_csv(self, path):
        cols = ["epoch", "step"] + STAGE_LOSS_COLUMNS[self.cfg.stage] + ["total"]
        lines = [",".join(cols)]
        for row in self.loss_rows:
            lines.append(",".join(_fmt(row.get(c, 0.0)) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def train_stage(model: CompositionModel, datasets: dict, cfg: StageConfig,
                weights: LossWeights | None = None, log=None) -> Trainer:
    trainer = Trainer(model, datasets, cfg, weights)
    trainer.run(log=log)
    return trainer
