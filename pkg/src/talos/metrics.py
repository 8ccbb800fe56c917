"""Completion IoU and semantic mIoU accumulated over a sequence."""
from __future__ import annotations

import numpy as np

from .voxel_core import IGNORE, LabelGrid, check_same_spec


class MetricAccumulator:
    """Confusion counts over voxels whose ground truth is not 255.

    Class IoU uses classes ``1..num_classes``; completion IoU treats every
    non-zero label as occupied. Classes with an empty union are left out of
    the mIoU mean.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        k = num_classes + 1
        self.intersection = np.zeros(k, dtype=np.int64)
        self.union = np.zeros(k, dtype=np.int64)
        self.occ_intersection = 0
        self.occ_union = 0
        self.num_voxels = 0
        self.num_frames = 0

    def accumulate(self, pred: LabelGrid, gt: LabelGrid) -> "MetricAccumulator":
        check_same_spec(pred, gt)
        valid = gt.values != IGNORE
        p = pred.values[valid].astype(np.int64)
        g = gt.values[valid].astype(np.int64)
        k = self.num_classes + 1
        # predictions of 255 count as wrong for every class
        p = np.where(p == IGNORE, k, p)
        conf = np.bincount(g * (k + 1) + p, minlength=k * (k + 1)).reshape(k, k + 1)
        tp = np.diag(conf[:, :k])
        gt_count = conf.sum(axis=1)
        pred_count = conf[:, :k].sum(axis=0)
        self.intersection += tp
        self.union += gt_count + pred_count - tp
        po, go = p != 0, g != 0
        self.occ_intersection += int(np.count_nonzero(po & go))
        self.occ_union += int(np.count_nonzero(po | go))
        self.num_voxels += int(valid.sum())
        self.num_frames += 1
        return self

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = MetricAccumulator(self.num_classes)
        out.intersection = self.intersection + other.intersection
        out.union = self.union + other.union
        out.occ_intersection = self.occ_intersection + other.occ_intersection
        out.occ_union = self.occ_union + other.occ_union
        out.num_voxels = self.num_voxels + other.num_voxels
        out.num_frames = self.num_frames + other.num_frames
        return out

    def class_iou(self) -> np.ndarray:
        """IoU per class 1..C; NaN where the union is empty."""
        inter = self.intersection[1:].astype(np.float64)
        union = self.union[1:].astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union > 0, inter / union, np.nan)

    def miou(self) -> float:
        iou = self.class_iou()
        if np.all(np.isnan(iou)):
            return float("nan")
        return float(np.nanmean(iou))

    def ciou(self) -> float:
        if self.occ_union == 0:
            return float("nan")
        return self.occ_intersection / self.occ_union
