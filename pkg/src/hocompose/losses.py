"""Loss terms for all three training stages.

Cross-entropy losses clamp probabilities to [1e-7, 1-1e-7]. Latent
regularizers are plain (unsquared) L2 norms. The signed-distance group
follows the usual surface-supervision recipe: L1 to ground-truth distance,
squared error between the field gradient and surface normals, the eikonal
unit-gradient penalty, and an off-surface exp(-alpha|F|) barrier.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_CLAMP = 1e-7
BBOX_ALPHA = 100.0
BBOX_CUTOFF = 0.1  # off-surface barrier applies where |d_gt| exceeds this


def bce_sum(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Summed binary cross entropy (caller normalizes by its batch size)."""
    labels = np.asarray(labels, dtype=np.float64)
    p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = ad.mul(Tensor(labels), ad.log(p))
    neg = ad.mul(Tensor(1.0 - labels), ad.log(ad.sub(Tensor(1.0), p)))
    return ad.neg(ad.tsum(ad.add(pos, neg)))


def bce_constant(p_const: float, labels: np.ndarray) -> float:
    """Summed BCE of a constant prediction (empty-correspondence points)."""
    labels = np.asarray(labels, dtype=np.float64)
    p = min(max(p_const, BCE_CLAMP), 1.0 - BCE_CLAMP)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).sum())


def loss_occupancy_bce(pred: Tensor, labels: np.ndarray) -> Tensor:
    return ad.div(bce_sum(pred, labels), Tensor(float(len(labels))))


def loss_bone(occ_at_bone_points: Tensor) -> Tensor:
    """Interior prior: occupancy along the skeleton pushed toward one."""
    n = occ_at_bone_points.data.shape[0]
    return ad.div(bce_sum(occ_at_bone_points, np.ones(n)), Tensor(float(n)))


def joint_weight_targets(parents: np.ndarray, n_bones: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows: non-root joints; target weights 0.5/0.5 on the connected bones."""
    joints = np.arange(1, n_bones)
    targets = np.zeros((len(joints), n_bones))
    for row, j in enumerate(joints):
        targets[row, parents[j]] = 0.5
        targets[row, j] = 0.5
    return joints, targets


def loss_joint(weights_at_joints: Tensor, targets: np.ndarray) -> Tensor:
    diff = ad.sub(weights_at_joints, Tensor(targets))
    return ad.tmean(ad.safe_l2norm(diff, axis=-1))


def loss_warp(warped: Tensor, target_vertices: np.ndarray) -> Tensor:
    diff = ad.sub(warped, Tensor(np.asarray(target_vertices, dtype=np.float64)))
    return ad.tmean(ad.safe_l2norm(diff, axis=-1))


def loss_latent_reg(z: Tensor, anchor: np.ndarray | None = None) -> Tensor:
    if anchor is not None:
        z = ad.sub(z, Tensor(np.asarray(anchor, dtype=np.float64)))
    return ad.safe_l2norm(ad.reshape(z, (-1,)), axis=-1)


def object_residual_target(o_h: np.ndarray, o_comp: np.ndarray) -> np.ndarray:
    """(1 - o_h) * o_comp on plain values: the label path carries no gradient."""
    return (1.0 - np.asarray(o_h)) * np.asarray(o_comp)


def loss_sdf_l1(pred: Tensor, d_gt: np.ndarray) -> Tensor:
    return ad.tmean(ad.absolute(ad.sub(pred, Tensor(np.asarray(d_gt, dtype=np.float64)))))


def loss_normal(grad_pred: Tensor, normals: np.ndarray) -> Tensor:
    diff = ad.sub(grad_pred, Tensor(np.asarray(normals, dtype=np.float64)))
    return ad.tmean(ad.tsum(ad.square(diff), axis=-1))


def loss_eikonal(grad_pred: Tensor) -> Tensor:
    norms = ad.safe_l2norm(grad_pred, axis=-1)
    return ad.tmean(ad.square(ad.sub(norms, Tensor(1.0))))


def loss_offsurface(pred: Tensor, alpha: float = BBOX_ALPHA) -> Tensor:
    return ad.tmean(ad.exp(ad.mul(Tensor(-alpha), ad.absolute(pred))))


class LossWeights:
    """Stage loss weights; the two guidance terms apply in epoch one only."""

    def __init__(self):
        self.lambda_warp = 10.0
        self.lambda_reg_th = 1e-3
        self.lambda_bone = 1.0
        self.lambda_joint = 10.0
        self.lambda_reg_sh_stage2 = 1e-3
        self.lambda_fit = 0.2
        self.lambda_reg_sh_stage3 = 50.0
        self.lambda_reg_o = 1e-3
        self.alpha_bbox = BBOX_ALPHA

    def bone_joint_active(self, epoch: int) -> bool:
        return epoch == 0
