//! Set encoders. Context pairs are put in a canonical order before any sum
//! so encodings are bitwise invariant to the order the context arrives in.

use crate::error::Result;
use crate::gp::Dataset;
use crate::tensor::{NodeId, Tape, Tensor};

use super::grid::{sqdist, Grid1D, Grid2D};

/// Context pairs sorted by `(x, y)`.
pub fn canonical(context: &Dataset) -> Dataset {
    let mut idx: Vec<usize> = (0..context.len()).collect();
    idx.sort_by(|&a, &b| {
        context.x[a]
            .total_cmp(&context.x[b])
            .then(context.y[a].total_cmp(&context.y[b]))
    });
    context.permuted(&idx)
}

/// EQ bump weights `ψ(x_i − z_k)` as an `N×M` node.
pub(crate) fn bumps(tape: &mut Tape, x: &[f64], z: &[f64], lengthscale: NodeId) -> Result<NodeId> {
    tape.eq_weights(sqdist(x, z), lengthscale)
}

/// 1D ConvDeepSet encoding, `M×2` with channels `[data, density]`.
pub(crate) fn encode_mean_on(
    tape: &mut Tape,
    context: &Dataset,
    grid: &Grid1D,
    lengthscale: NodeId,
) -> Result<NodeId> {
    let ctx = canonical(context);
    let w = bumps(tape, &ctx.x, &grid.nodes, lengthscale)?;
    let n = ctx.len();
    let mut phi = ctx.y.clone();
    phi.extend(std::iter::repeat(1.0).take(n));
    let phi = tape.constant(Tensor::matrix(2, n, phi)?);
    let h = tape.matmul(phi, w)?;
    tape.transpose(h)
}

/// 2D encoding, `M×M×3` with channels `[data, density, source]`.
pub(crate) fn encode_kernel_on(
    tape: &mut Tape,
    context: &Dataset,
    grid: &Grid2D,
    lengthscale: NodeId,
    source: bool,
) -> Result<NodeId> {
    let ctx = canonical(context);
    let m = grid.side();
    let w = bumps(tape, &ctx.x, &grid.axis.nodes, lengthscale)?;
    let wt = tape.transpose(w)?;
    let wy = tape.scale_rows(w, ctx.y.clone())?;
    let data = tape.matmul(wt, wy)?;
    let density = tape.matmul(wt, w)?;
    let src = tape.constant(if source {
        Tensor::identity(m)
    } else {
        Tensor::zeros(&[m, m])
    });
    tape.stack(&[data, density, src])
}

/// `M×2` mean-path encoding for a fixed lengthscale.
pub fn encode_mean(context: &Dataset, grid: &Grid1D, lengthscale: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::scalar(lengthscale));
    let h = encode_mean_on(&mut tape, context, grid, l)?;
    Ok(tape.value(h).clone())
}

/// Three-channel kernel-path encoding on a product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding2D {
    pub grid: Grid2D,
    /// `M×M×3`: data, density, source.
    pub h: Tensor,
}

impl Encoding2D {
    pub const DATA: usize = 0;
    pub const DENSITY: usize = 1;
    pub const SOURCE: usize = 2;

    pub fn side(&self) -> usize {
        self.grid.side()
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        let m = self.side();
        self.h.data()[(i * m + j) * 3 + c]
    }

    /// Copy with the source channel zeroed.
    pub fn without_source(&self) -> Self {
        let mut out = self.clone();
        for v in out.h.data_mut().iter_mut().skip(Self::SOURCE).step_by(3) {
            *v = 0.0;
        }
        out
    }
}

pub fn encode_kernel(context: &Dataset, grid: &Grid2D, lengthscale: f64) -> Result<Encoding2D> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::scalar(lengthscale));
    let h = encode_kernel_on(&mut tape, context, grid, l, true)?;
    Ok(Encoding2D {
        grid: grid.clone(),
        h: tape.value(h).clone(),
    })
}
