//! Root-aligned pose error metrics. Poses are `[N, J, 3]` tensors in mm.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::numerics::Tensor;
use crate::skeleton::GroupAssignment;

pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// AUC thresholds: 5, 10, ..., 150 mm.
pub fn auc_thresholds() -> impl Iterator<Item = f64> {
    (1..=30).map(|k| 5.0 * k as f64)
}

/// Euclidean error of each `(sample, joint)` after subtracting each pose's
/// root joint, laid out `[N, J]`.
pub fn joint_errors(pred: &Tensor, gt: &Tensor, root: usize) -> Result<Tensor> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.shape()[2] != 3 || root >= pred.shape()[1] {
        return Err(shape_mismatch("joint_errors", pred.shape(), gt.shape()));
    }
    let (n, j) = (pred.shape()[0], pred.shape()[1]);
    let (p, g) = (pred.data(), gt.data());
    let mut out = Vec::with_capacity(n * j);
    for s in 0..n {
        let base = s * j * 3;
        let r = base + root * 3;
        for k in 0..j {
            let o = base + k * 3;
            let sq: f64 = (0..3)
                .map(|c| {
                    let d = (p[o + c] - p[r + c]) - (g[o + c] - g[r + c]);
                    d * d
                })
                .sum();
            out.push(sq.sqrt());
        }
    }
    Tensor::new(&[n, j], out)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    Ok(mean(joint_errors(pred, gt, root)?.data()))
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 100.0;
    }
    100.0 * errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// Percentage of joints with error below `threshold` mm.
pub fn pck(pred: &Tensor, gt: &Tensor, root: usize, threshold: f64) -> Result<f64> {
    Ok(pck_of(joint_errors(pred, gt, root)?.data(), threshold))
}

fn auc_of(errors: &[f64]) -> f64 {
    let thresholds: Vec<f64> = auc_thresholds().collect();
    thresholds.iter().map(|&t| pck_of(errors, t)).sum::<f64>() / thresholds.len() as f64 / 100.0
}

/// Mean PCK over [`auc_thresholds`], scaled to `[0, 1]`.
pub fn auc(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    Ok(auc_of(joint_errors(pred, gt, root)?.data()))
}

fn per_joint_of(errors: &Tensor) -> Vec<f64> {
    let (n, j) = (errors.shape()[0], errors.shape()[1]);
    (0..j)
        .map(|k| {
            if n == 0 {
                0.0
            } else {
                (0..n).map(|s| errors.data()[s * j + k]).sum::<f64>() / n as f64
            }
        })
        .collect()
}

fn per_group_of(errors: &Tensor, groups: &GroupAssignment) -> Vec<f64> {
    let per_joint = per_joint_of(errors);
    (0..groups.num_groups)
        .map(|g| {
            let members: Vec<f64> = groups.members(g).map(|k| per_joint[k]).collect();
            mean(&members)
        })
        .collect()
}

/// MPJPE restricted to the joints of each group. Empty groups report 0.
pub fn per_group_error(pred: &Tensor, gt: &Tensor, root: usize, groups: &GroupAssignment) -> Result<Vec<f64>> {
    let errors = joint_errors(pred, gt, root)?;
    if groups.group.len() != errors.shape()[1] {
        return Err(shape_mismatch("per_group_error", pred.shape(), &[groups.group.len()]));
    }
    Ok(per_group_of(&errors, groups))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pck: f64,
    pub auc: f64,
    pub per_joint_mm: Vec<f64>,
    pub per_group_mm: Vec<f64>,
}

impl EvalReport {
    pub fn compute(pred: &Tensor, gt: &Tensor, root: usize, groups: &GroupAssignment) -> Result<Self> {
        let errors = joint_errors(pred, gt, root)?;
        if groups.group.len() != errors.shape()[1] {
            return Err(shape_mismatch("eval_report", pred.shape(), &[groups.group.len()]));
        }
        Ok(Self {
            mpjpe_mm: mean(errors.data()),
            pck: pck_of(errors.data(), PCK_THRESHOLD_MM),
            auc: auc_of(errors.data()),
            per_joint_mm: per_joint_of(&errors),
            per_group_mm: per_group_of(&errors, groups),
        })
    }

    /// `group,mpjpe_mm` rows.
    pub fn write_group_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "mpjpe_mm"])?;
        for (g, e) in self.per_group_mm.iter().enumerate() {
            w.write_record([g.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{assign_groups, Skeleton};

    #[test]
    fn hand_cases() {
        let gt = Tensor::zeros(&[1, 2, 3]);
        let pred = Tensor::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, 3.0, 4.0, 0.0]).unwrap();
        assert_eq!(mpjpe(&pred, &gt, 0).unwrap(), 2.5);
        assert_eq!(mpjpe(&gt, &gt, 0).unwrap(), 0.0);
        assert_eq!(pck(&gt, &gt, 0, 150.0).unwrap(), 100.0);
        assert_eq!(auc(&gt, &gt, 0).unwrap(), 1.0);

        let far = Tensor::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, 200.0, 0.0, 0.0]).unwrap();
        let root_far = Tensor::new(&[1, 2, 3], vec![0.0; 6]).unwrap();
        // Only the non-root joint is off, so half the joints are within any threshold.
        assert_eq!(pck(&far, &root_far, 0, 150.0).unwrap(), 50.0);
        assert_eq!(auc(&far, &root_far, 0).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Tensor::zeros(&[2, 3, 3]);
        let b = Tensor::zeros(&[2, 4, 3]);
        assert!(mpjpe(&a, &b, 0).is_err());
        assert!(pck(&a, &b, 0, 150.0).is_err());
        assert!(auc(&a, &b, 0).is_err());
    }

    #[test]
    fn group_errors_isolate_groups() {
        let sk = Skeleton::h36m();
        let groups = assign_groups(&sk.distance_matrix(), 0, 5);
        let gt = Tensor::zeros(&[2, 17, 3]);
        let mut pred = Tensor::zeros(&[2, 17, 3]);
        for s in 0..2 {
            for j in groups.members(4) {
                pred.set(&[s, j, 1], 10.0);
            }
        }
        let e = per_group_error(&pred, &gt, 0, &groups).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 10.0]);
    }
}
