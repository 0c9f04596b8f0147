use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discretisation density and padding of the encoder grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretisation {
    pub points_per_unit: f64,
    pub margin: f64,
}

impl Default for Discretisation {
    fn default() -> Self {
        Self {
            points_per_unit: 20.0,
            margin: 0.1,
        }
    }
}

impl Discretisation {
    pub fn validate(&self) -> Result<()> {
        if !(self.points_per_unit > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid discretisation {self:?}")));
        }
        Ok(())
    }
}

/// Uniform grid `z_k = lower + k·spacing`, `k = 0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D {
    pub lower: f64,
    pub upper: f64,
    pub nodes: Vec<f64>,
}

impl Grid1D {
    /// Smallest uniform grid over `[min − margin, max + margin]` with at
    /// least `points_per_unit` nodes per unit (and at least two nodes).
    pub fn covering(points: &[f64], disc: &Discretisation) -> Result<Self> {
        disc.validate()?;
        if points.is_empty() {
            return Err(Error::InvalidParameter("grid needs at least one input".into()));
        }
        let min = points.iter().copied().fold(f64::INFINITY, f64::min);
        let max = points.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lower, upper) = (min - disc.margin, max + disc.margin);
        let span = upper - lower;
        let intervals = ((span * disc.points_per_unit - 1e-9).ceil() as usize).max(1);
        let spacing = span / intervals as f64;
        let nodes = if span > 0.0 {
            (0..=intervals).map(|k| lower + k as f64 * spacing).collect()
        } else {
            let h = 1.0 / disc.points_per_unit;
            vec![lower - 0.5 * h, lower + 0.5 * h]
        };
        Ok(Self {
            lower,
            upper,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.nodes[1] - self.nodes[0]
    }
}

/// Product grid `Z_ij = (z_i, z_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub axis: Grid1D,
}

impl Grid2D {
    pub fn side(&self) -> usize {
        self.axis.len()
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (self.axis.nodes[i], self.axis.nodes[j])
    }
}

pub fn build_grids(context_x: &[f64], targets: &[f64], disc: &Discretisation) -> Result<(Grid1D, Grid2D)> {
    let all: Vec<f64> = context_x.iter().chain(targets).copied().collect();
    let g = Grid1D::covering(&all, disc)?;
    Ok((g.clone(), Grid2D { axis: g }))
}

/// `D[a][k] = (x_a − z_k)²`.
pub fn sqdist(x: &[f64], z: &[f64]) -> Tensor {
    let data = x
        .iter()
        .flat_map(|&a| z.iter().map(move |&b| (a - b) * (a - b)))
        .collect();
    Tensor::new(vec![x.len(), z.len()], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_inputs() {
        let (g, g2) = build_grids(&[0.0], &[1.0], &Discretisation::default()).unwrap();
        assert!((g.lower + 0.1).abs() < 1e-15 && (g.upper - 1.1).abs() < 1e-15);
        assert_eq!(g.len(), 25);
        assert!((g.spacing() - 0.05).abs() < 1e-12);
        assert_eq!(g2.node(3, 7), (g.nodes[3], g.nodes[7]));
    }

    #[test]
    fn single_input() {
        let (g, _) = build_grids(&[], &[0.0], &Discretisation::default()).unwrap();
        assert!(g.len() >= 2);
        assert!((g.nodes[0] + 0.1).abs() < 1e-12 && (g.nodes[g.len() - 1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_margin_single_point_still_two_nodes() {
        let disc = Discretisation {
            points_per_unit: 20.0,
            margin: 0.0,
        };
        assert_eq!(Grid1D::covering(&[1.0], &disc).unwrap().len(), 2);
    }

    #[test]
    fn shift_moves_grid_rigidly() {
        let disc = Discretisation::default();
        let a = Grid1D::covering(&[-0.3, 1.7, 0.2], &disc).unwrap();
        let b = Grid1D::covering(&[-0.3 + 0.75, 1.7 + 0.75, 0.2 + 0.75], &disc).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert!((y - x - 0.75).abs() < 1e-12);
        }
    }
}
