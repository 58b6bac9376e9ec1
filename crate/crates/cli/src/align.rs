//! Input alignment: centering plus either a supplied rotation or a PCA
//! substitute for the learned orientation regressor.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use dfr_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    None,
    RotationFile,
    Pca,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AlignMode::None),
            "rotation_file" | "rotation-file" => Ok(AlignMode::RotationFile),
            "pca" => Ok(AlignMode::Pca),
            _ => Err(Error::Argument(format!(
                "unknown align mode '{s}' (expected none, rotation_file, or pca)"
            ))),
        }
    }
}

/// Checks orthogonality and positive determinant to 1e-6.
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > 1e-6 {
        return Err(Error::Argument(format!(
            "rotation is not orthogonal (max deviation {dev:.3e})"
        )));
    }
    if (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::Argument(format!(
            "rotation determinant is {:.6}, expected +1",
            r.determinant()
        )));
    }
    Ok(())
}

/// Reads a row-major 3x3 matrix of whitespace-separated numbers.
pub fn read_rotation(path: &Path) -> Result<Matrix3<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::parse(path, 1, format!("invalid number '{t}'")))
        })
        .collect::<Result<_>>()?;
    if nums.len() != 9 {
        return Err(Error::parse(
            path,
            1,
            format!("expected 9 numbers for a 3x3 rotation, found {}", nums.len()),
        ));
    }
    Ok(Matrix3::from_row_slice(&nums))
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn pca_rotation(centered: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = centered.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in centered {
        cov += p * p.transpose() / n;
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rot = Matrix3::zeros();
    for (row, &src) in order.iter().enumerate() {
        let mut axis = eig.eigenvectors.column(src).clone_owned();
        // fix the sign so the third central moment of this coordinate is
        // nonnegative; an exact zero keeps the axis as computed
        let moment: f64 = centered.iter().map(|p| axis.dot(p).powi(3)).sum();
        if moment < 0.0 {
            axis = -axis;
        }
        rot.set_row(row, &axis.transpose());
    }
    rot
}

/// Centers the cloud and applies the requested orientation fix. Returns
/// the aligned points and the rotation that was applied (identity for
/// mode `none`): `p' = R (p - centroid)`.
pub fn align_input(
    points: &[Vector3<f64>],
    mode: AlignMode,
    rotation: Option<&Matrix3<f64>>,
) -> Result<(Vec<Vector3<f64>>, Matrix3<f64>)> {
    if points.is_empty() {
        return Err(Error::Argument("cannot align an empty point set".into()));
    }
    let c = centroid(points);
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - c).collect();
    let applied = match mode {
        AlignMode::None => Matrix3::identity(),
        AlignMode::RotationFile => {
            let r = rotation
                .ok_or_else(|| Error::Argument("rotation_file mode needs a rotation".into()))?;
            check_rotation(r)?;
            r.transpose()
        }
        AlignMode::Pca => pca_rotation(&centered),
    };
    let aligned = centered.iter().map(|p| applied * p).collect();
    Ok((aligned, applied))
}
