//! Colored point cloud data model: normalization, splitting, sampling,
//! file I/O, image ingestion, and the synthetic dataset generator.

mod image;
mod ply;
mod synthetic;

pub use image::{image_to_pixel_set, PixelSet};
pub use ply::{load_ply, save_ply};
pub use synthetic::{
    generate_synthetic_dataset, shape_surface_points, ColorPattern, ShapeKind, SyntheticConfig,
    SURFACE_NOISE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Value range colors were in before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorRange {
    /// Colors in [0, 1].
    Unit,
    /// Colors in [0, 255].
    EightBit,
}

impl ColorRange {
    fn max_value(&self) -> f64 {
        match self {
            ColorRange::Unit => 1.0,
            ColorRange::EightBit => 255.0,
        }
    }
}

/// Inverse transform recorded by [`ColoredPointCloud::normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeState {
    pub centroid: [f64; 3],
    pub scale: f64,
    pub color_range: ColorRange,
}

/// N points of XYZ position plus RGB color. Row order is meaningful:
/// content losses compare clouds row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredPointCloud {
    positions: Matrix,
    colors: Matrix,
    normalization: Option<NormalizeState>,
    label: Option<usize>,
}

impl ColoredPointCloud {
    /// Builds an un-normalized cloud; positions and colors must both be
    /// N x 3 with the same N >= 1.
    pub fn new(positions: Matrix, colors: Matrix) -> Result<Self> {
        if positions.rows() == 0 {
            return Err(Error::Empty {
                context: "point cloud",
            });
        }
        if positions.cols() != 3 || colors.cols() != 3 || positions.rows() != colors.rows() {
            return Err(Error::ShapeMismatch {
                context: "point cloud positions/colors",
                left: positions.shape(),
                right: colors.shape(),
            });
        }
        Ok(ColoredPointCloud {
            positions,
            colors,
            normalization: None,
            label: None,
        })
    }

    /// Reassembles a cloud from split parts, preserving row order.
    /// The parts are assumed to be in the normalized domain when both lie
    /// in [-1, 1]; callers needing normalization state should normalize.
    pub fn from_split(
        positions: Matrix,
        colors: Matrix,
        normalization: Option<NormalizeState>,
    ) -> Result<Self> {
        let mut cloud = ColoredPointCloud::new(positions, colors)?;
        cloud.normalization = normalization;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn colors(&self) -> &Matrix {
        &self.colors
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn normalization(&self) -> Option<&NormalizeState> {
        self.normalization.as_ref()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Splits into position and color matrices sharing the cloud's row order.
    pub fn split(&self) -> (Matrix, Matrix) {
        (self.positions.clone(), self.colors.clone())
    }

    /// Replaces the position/color matrices, keeping metadata. Shapes must
    /// match the existing cloud.
    pub fn with_parts(&self, positions: Matrix, colors: Matrix) -> Result<Self> {
        if positions.shape() != self.positions.shape() || colors.shape() != self.colors.shape() {
            return Err(Error::ShapeMismatch {
                context: "with_parts",
                left: positions.shape(),
                right: colors.shape(),
            });
        }
        Ok(ColoredPointCloud {
            positions,
            colors,
            normalization: self.normalization.clone(),
            label: self.label,
        })
    }

    /// Centers positions on the centroid and scales isotropically so every
    /// coordinate lies in [-1, 1]; maps colors affinely from their source
    /// range to [-1, 1]. Records the inverse transform.
    pub fn normalize(self) -> Result<Self> {
        let range = self.detect_color_range();
        self.normalize_with(range)
    }

    /// Like [`normalize`](Self::normalize) with an explicit color range,
    /// for callers that know the provenance of their colors (PLY colors
    /// are always 8-bit, for example).
    pub fn normalize_with(mut self, color_range: ColorRange) -> Result<Self> {
        if self.normalization.is_some() {
            return Err(Error::InvalidArgument(
                "cloud is already normalized".into(),
            ));
        }
        let n = self.len() as f64;
        let mut centroid = [0.0f64; 3];
        for i in 0..self.len() {
            let row = self.positions.row(i);
            for (c, &v) in centroid.iter_mut().zip(row) {
                *c += v;
            }
        }
        for c in &mut centroid {
            *c /= n;
        }
        let mut scale = 0.0f64;
        for i in 0..self.len() {
            let row = self.positions.row(i);
            for a in 0..3 {
                scale = scale.max((row[a] - centroid[a]).abs());
            }
        }
        if scale == 0.0 {
            return Err(Error::DegenerateCloud);
        }
        for i in 0..self.len() {
            let row = self.positions.row_mut(i);
            for a in 0..3 {
                row[a] = (row[a] - centroid[a]) / scale;
            }
        }
        let cmax = color_range.max_value();
        for v in self.colors.data_mut() {
            *v = 2.0 * *v / cmax - 1.0;
        }
        self.normalization = Some(NormalizeState {
            centroid,
            scale,
            color_range,
        });
        Ok(self)
    }

    /// Undoes [`normalize`](Self::normalize) using the recorded transform.
    pub fn denormalize(mut self) -> Result<Self> {
        let state = self.normalization.take().ok_or_else(|| {
            Error::InvalidArgument("cloud is not normalized; nothing to denormalize".into())
        })?;
        for i in 0..self.positions.rows() {
            let row = self.positions.row_mut(i);
            for a in 0..3 {
                row[a] = row[a] * state.scale + state.centroid[a];
            }
        }
        let cmax = state.color_range.max_value();
        for v in self.colors.data_mut() {
            *v = (*v + 1.0) / 2.0 * cmax;
        }
        Ok(self)
    }

    fn detect_color_range(&self) -> ColorRange {
        let above_unit = self.colors.data().iter().any(|&v| v > 1.0);
        if above_unit {
            ColorRange::EightBit
        } else {
            ColorRange::Unit
        }
    }

    /// Applies the same row permutation to positions and colors.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        Ok(ColoredPointCloud {
            positions: self.positions.permute_rows(perm)?,
            colors: self.colors.permute_rows(perm)?,
            normalization: self.normalization.clone(),
            label: self.label,
        })
    }

    /// Uniform random subsample of n points without replacement. Selected
    /// rows keep their original relative order, so position-color pairing
    /// and determinism under a fixed seed are preserved.
    pub fn downsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "downsample size {n} out of range 1..={}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        picked.sort_unstable();
        Ok(ColoredPointCloud {
            positions: self.positions.select_rows(&picked),
            colors: self.colors.select_rows(&picked),
            normalization: self.normalization.clone(),
            label: self.label,
        })
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

/// Labeled, normalized clouds for classifier training.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub clouds: Vec<ColoredPointCloud>,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub split: SplitTag,
}

impl LabeledDataset {
    /// Validates the dataset invariants: every cloud labeled within range
    /// and normalized.
    pub fn new(
        clouds: Vec<ColoredPointCloud>,
        class_count: usize,
        class_names: Vec<String>,
        split: SplitTag,
    ) -> Result<Self> {
        if class_names.len() != class_count {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                class_names.len(),
                class_count
            )));
        }
        for (i, cloud) in clouds.iter().enumerate() {
            match cloud.label() {
                Some(l) if l < class_count => {}
                Some(l) => {
                    return Err(Error::InvalidArgument(format!(
                        "cloud {i} has label {l} outside 0..{class_count}"
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!("cloud {i} is unlabeled")));
                }
            }
            if !cloud.is_normalized() {
                return Err(Error::InvalidArgument(format!(
                    "cloud {i} is not normalized"
                )));
            }
        }
        Ok(LabeledDataset {
            clouds,
            class_count,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for cloud in &self.clouds {
            hist[cloud.label().expect("labeled by construction")] += 1;
        }
        hist
    }

    /// Seeded stratified split into (rest, held-out) with `held_fraction`
    /// of each class moved to the held-out part (at least one instance per
    /// class when the class is non-empty).
    pub fn stratified_split(
        &self,
        held_fraction: f64,
        seed: u64,
        held_tag: SplitTag,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&held_fraction) || held_fraction <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "held fraction must lie in (0, 1), got {held_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, cloud) in self.clouds.iter().enumerate() {
            by_class[cloud.label().unwrap()].push(i);
        }
        let mut held = Vec::new();
        let mut rest = Vec::new();
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let k = ((members.len() as f64 * held_fraction).round() as usize)
                .clamp(1, members.len().saturating_sub(1).max(1));
            let mut chosen = rand::seq::index::sample(&mut rng, members.len(), k).into_vec();
            chosen.sort_unstable();
            let chosen_set: std::collections::HashSet<usize> = chosen.iter().copied().collect();
            for (pos, &idx) in members.iter().enumerate() {
                if chosen_set.contains(&pos) {
                    held.push(self.clouds[idx].clone());
                } else {
                    rest.push(self.clouds[idx].clone());
                }
            }
        }
        let rest_ds = LabeledDataset::new(
            rest,
            self.class_count,
            self.class_names.clone(),
            self.split,
        )?;
        let held_ds =
            LabeledDataset::new(held, self.class_count, self.class_names.clone(), held_tag)?;
        Ok((rest_ds, held_ds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 6]]) -> ColoredPointCloud {
        let positions =
            Matrix::from_rows(&points.iter().map(|p| p[..3].to_vec()).collect::<Vec<_>>()).unwrap();
        let colors =
            Matrix::from_rows(&points.iter().map(|p| p[3..].to_vec()).collect::<Vec<_>>()).unwrap();
        ColoredPointCloud::new(positions, colors).unwrap()
    }

    #[test]
    fn split_single_point() {
        let c = cloud(&[[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]]);
        let (geo, col) = c.split();
        assert_eq!(geo.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(col.data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn split_recombine_round_trip() {
        let c = cloud(&[
            [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            [6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
            [1.5, 2.5, 3.5, 4.5, 5.5, 6.5],
        ]);
        let (geo, col) = c.split();
        let back = ColoredPointCloud::from_split(geo, col, None).unwrap();
        assert_eq!(back.positions(), c.positions());
        assert_eq!(back.colors(), c.colors());
    }

    #[test]
    fn split_preserves_row_order() {
        let c = cloud(&[
            [1.0, 0.0, 0.0, 255.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 255.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 255.0],
        ]);
        let (geo, col) = c.split();
        for i in 0..3 {
            assert_eq!(geo.row(i), c.positions().row(i));
            assert_eq!(col.row(i), c.colors().row(i));
        }
    }

    #[test]
    fn normalize_definition() {
        // Positions span [0, 10] on each axis: centered they span [-5, 5],
        // so the max |coordinate| must be exactly 1 afterwards.
        let c = cloud(&[
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [10.0, 10.0, 10.0, 255.0, 255.0, 255.0],
        ]);
        let n = c.normalize().unwrap();
        let max_abs = n
            .positions()
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((max_abs - 1.0).abs() < 1e-12);
        // Color endpoints map to the interval ends.
        assert_eq!(n.colors().row(0), &[-1.0, -1.0, -1.0]);
        assert_eq!(n.colors().row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let c = cloud(&[
            [1.0, -4.0, 2.5, 12.0, 200.0, 31.0],
            [3.0, 9.0, -7.5, 255.0, 0.0, 101.0],
            [-2.0, 1.0, 0.5, 17.0, 99.0, 3.0],
        ]);
        let original = c.clone();
        let back = c.normalize().unwrap().denormalize().unwrap();
        assert!(back.positions().max_abs_diff(original.positions()) < 1e-9);
        assert!(back.colors().max_abs_diff(original.colors()) < 1e-9);
    }

    #[test]
    fn normalize_degenerate_cloud_errors() {
        let c = cloud(&[
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0, 10.0, 10.0, 10.0],
        ]);
        assert!(matches!(c.normalize(), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn normalize_twice_errors() {
        let c = cloud(&[[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]]);
        let n = c.normalize().unwrap();
        assert!(n.normalize().is_err());
    }

    #[test]
    fn unit_range_auto_detected() {
        let c = cloud(&[
            [0.0, 0.0, 0.0, 0.0, 0.5, 1.0],
            [1.0, 1.0, 1.0, 1.0, 0.5, 0.0],
        ]);
        let n = c.normalize().unwrap();
        assert_eq!(n.normalization().unwrap().color_range, ColorRange::Unit);
        assert_eq!(n.colors().row(0), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn downsample_contracts() {
        let c = cloud(&[
            [0.0, 0.0, 0.0, 1.0, 2.0, 3.0],
            [1.0, 0.0, 0.0, 4.0, 5.0, 6.0],
            [2.0, 0.0, 0.0, 7.0, 8.0, 9.0],
        ]);
        // n = N keeps the same rows.
        let all = c.downsample(3, 7).unwrap();
        assert_eq!(all.positions(), c.positions());
        // n = 1 returns one valid point of c with pairing intact.
        let one = c.downsample(1, 7).unwrap();
        let pos = one.positions().row(0);
        let idx = (0..3).find(|&i| c.positions().row(i) == pos).unwrap();
        assert_eq!(one.colors().row(0), c.colors().row(idx));
        // Fixed seed gives identical output.
        let a = c.downsample(2, 42).unwrap();
        let b = c.downsample(2, 42).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert_eq!(a.colors(), b.colors());
        // Out of range errors.
        assert!(c.downsample(4, 0).is_err());
        assert!(c.downsample(0, 0).is_err());
    }
}
