//! Voxel IoU metrics, group aggregates, RayIoU and camera visibility.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geom::raycast::{first_hit, traverse};
use crate::geom::{CameraModel, SemanticLabelGrid, FREE};
use crate::rendering::NEAR_PLANE;
use crate::taxonomy::ClassTaxonomy;
use crate::{Error, Result};

pub const DEFAULT_RAY_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];
/// Tolerance on `|dir| - 1` accepted by [`ray_iou`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Voxels occupied in both grids.
    pub geo_intersection: u64,
    /// Voxels occupied in either grid.
    pub geo_union: u64,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            intersection: vec![0; classes],
            union: vec![0; classes],
            geo_intersection: 0,
            geo_union: 0,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..self.intersection.len() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.geo_intersection += other.geo_intersection;
        self.geo_union += other.geo_union;
    }
}

pub fn confusion(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid, taxonomy: &ClassTaxonomy) -> Result<ConfusionCounts> {
    confusion_masked(pred, gt, taxonomy, None)
}

/// As [`confusion`], restricted to voxels where `mask` is true.
pub fn confusion_masked(
    pred: &SemanticLabelGrid,
    gt: &SemanticLabelGrid,
    taxonomy: &ClassTaxonomy,
    mask: Option<&[bool]>,
) -> Result<ConfusionCounts> {
    pred.spec.ensure_same(&gt.spec)?;
    let n = taxonomy.num_classes();
    let mut counts = ConfusionCounts::new(n);
    for (v, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.is_some_and(|m| !m[v]) {
            continue;
        }
        let (po, go) = (p != FREE, g != FREE);
        if po && go {
            counts.geo_intersection += 1;
        }
        if po || go {
            counts.geo_union += 1;
        }
        if p == g && po {
            if (p as usize) < n {
                counts.intersection[p as usize] += 1;
                counts.union[p as usize] += 1;
            }
            continue;
        }
        for l in [p, g] {
            if l != FREE && (l as usize) < n {
                counts.union[l as usize] += 1;
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `None` for classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub insm: Option<f64>,
    pub scnm: Option<f64>,
    pub hcm: Option<f64>,
    pub iou: Option<f64>,
}

fn group_mean(values: &[Option<f64>], members: &[usize]) -> Option<f64> {
    let present: Vec<f64> = members.iter().filter_map(|&c| values.get(c).copied().flatten()).collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Group means of already computed per-class IoUs.
pub fn aggregate_ious(per_class: &[Option<f64>], taxonomy: &ClassTaxonomy, iou: Option<f64>) -> MetricSummary {
    let all: Vec<usize> = (0..taxonomy.num_classes()).collect();
    MetricSummary {
        per_class: per_class.to_vec(),
        miou: group_mean(per_class, &all),
        insm: group_mean(per_class, &taxonomy.instance),
        scnm: group_mean(per_class, &taxonomy.scene),
        hcm: group_mean(per_class, &taxonomy.human),
        iou,
    }
}

pub fn aggregate(counts: &ConfusionCounts, taxonomy: &ClassTaxonomy) -> MetricSummary {
    let per_class: Vec<Option<f64>> = counts
        .intersection
        .iter()
        .zip(&counts.union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let iou = (counts.geo_union > 0).then(|| counts.geo_intersection as f64 / counts.geo_union as f64);
    aggregate_ious(&per_class, taxonomy, iou)
}

/// A ray with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

/// One ray per pixel center of every camera, row-major per camera.
pub fn camera_rays(cameras: &[CameraModel]) -> Vec<Ray> {
    let mut rays = Vec::new();
    for cam in cameras {
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (origin, dir) = cam.pixel_ray(col, row);
                rays.push(Ray { origin, dir });
            }
        }
    }
    rays
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayIouReport {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

fn ray_hit(grid: &SemanticLabelGrid, ray: &Ray) -> Option<(u8, f64)> {
    first_hit(&grid.spec, &ray.origin, &ray.dir, |v| grid.is_occupied(v)).map(|h| (grid.get(h.voxel), h.t))
}

/// RayIoU per threshold: each ray is compared at the first occupied voxel of
/// each grid. A matching class within the depth threshold is a true positive
/// for that class; otherwise the predicted hit counts as a false positive and
/// the ground-truth hit as a false negative.
pub fn ray_iou(
    pred: &SemanticLabelGrid,
    gt: &SemanticLabelGrid,
    rays: &[Ray],
    thresholds: &[f64],
    taxonomy: &ClassTaxonomy,
) -> Result<RayIouReport> {
    pred.spec.ensure_same(&gt.spec)?;
    for r in rays {
        let n = r.dir.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NonUnitDirection(n));
        }
    }
    let classes = taxonomy.num_classes();
    let hits: Vec<(Option<(u8, f64)>, Option<(u8, f64)>)> =
        rays.iter().map(|r| (ray_hit(pred, r), ray_hit(gt, r))).collect();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut tp = vec![0u64; classes];
        let mut fp = vec![0u64; classes];
        let mut fn_ = vec![0u64; classes];
        for &(p, g) in &hits {
            match (p, g) {
                (Some((pc, pd)), Some((gc, gd))) if pc == gc && (pd - gd).abs() <= tau => {
                    tp[pc as usize] += 1;
                }
                _ => {
                    if let Some((pc, _)) = p {
                        fp[pc as usize] += 1;
                    }
                    if let Some((gc, _)) = g {
                        fn_[gc as usize] += 1;
                    }
                }
            }
        }
        let ious: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let d = tp[c] + fp[c] + fn_[c];
                (d > 0).then(|| tp[c] as f64 / d as f64)
            })
            .collect();
        per_threshold.push(if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        });
    }
    let mean = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    Ok(RayIouReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        mean,
    })
}

/// Voxels reached by some camera ray at or before the first occupied voxel.
/// Each voxel inside a camera's image is tested with the ray from that camera
/// through its center.
pub fn visible_mask(gt: &SemanticLabelGrid, cameras: &[CameraModel]) -> Vec<bool> {
    let spec = &gt.spec;
    let mut visible = vec![false; spec.num_voxels()];
    for cam in cameras {
        let center = cam.center();
        for (v, vis) in visible.iter_mut().enumerate() {
            if *vis {
                continue;
            }
            let target = spec.unravel(v);
            let p = Vector3::from(spec.voxel_center(target));
            let pc = cam.world_to_camera(&p);
            if pc.z <= NEAR_PLANE {
                continue;
            }
            let [u, w] = cam.project_camera_point(&pc);
            if u < 0.0 || w < 0.0 || u >= cam.width as f64 || w >= cam.height as f64 {
                continue;
            }
            let dir = (p - center).normalize();
            let mut reached = false;
            traverse(spec, &center, &dir, f64::INFINITY, |voxel, t| {
                if voxel == target {
                    reached = true;
                    return false;
                }
                !(t > 0.0 && gt.is_occupied(voxel))
            });
            *vis = reached;
        }
    }
    visible
}

/// The JSON report written by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, Option<f64>>,
    pub miou: Option<f64>,
    pub insm: Option<f64>,
    pub scnm: Option<f64>,
    pub hcm: Option<f64>,
    pub iou: Option<f64>,
    /// Keys `"1"`, `"2"`, `"4"` (one per threshold) and `"mean"`.
    pub rayiou: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn new(summary: &MetricSummary, taxonomy: &ClassTaxonomy, rayiou: Option<&RayIouReport>) -> Self {
        let per_class = taxonomy
            .names
            .iter()
            .zip(&summary.per_class)
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        let rayiou = rayiou.map(|r| {
            let mut m: BTreeMap<String, f64> = r
                .thresholds
                .iter()
                .zip(&r.per_threshold)
                .map(|(t, v)| (format!("{t}"), *v))
                .collect();
            m.insert("mean".into(), r.mean);
            m
        });
        EvalReport {
            per_class,
            miou: summary.miou,
            insm: summary.insm,
            scnm: summary.scnm,
            hcm: summary.hcm,
            iou: summary.iou,
            rayiou,
        }
    }
}

/// mIoU of `pred` against `gt` (0 when no class is present in either).
pub fn miou(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid, taxonomy: &ClassTaxonomy) -> Result<f64> {
    Ok(aggregate(&confusion(pred, gt, taxonomy)?, taxonomy).miou.unwrap_or(0.0))
}
