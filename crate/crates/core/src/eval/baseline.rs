//! Prior-free reference reconstructions.

use crate::ops::{ForwardOperator, OperatorSpec};
use crate::tensor::Tensor;

/// Fills every unobserved cell with the value of its nearest observed cell
/// (squared Euclidean distance, ties to the lowest row-major index).
///
/// Brute force on purpose: it is the reference the sampler is scored against,
/// so it stays as simple as possible. With nothing observed the output is zero.
pub fn nearest_fill(y: &Tensor<f32>, observed: &[bool]) -> Tensor<f32> {
    let shape = y.shape();
    let (h, w) = (shape.height, shape.width);
    let known: Vec<usize> = (0..h * w).filter(|&k| observed[k]).collect();
    let mut out = Tensor::zeros(shape);
    if known.is_empty() {
        return out;
    }
    for k in 0..h * w {
        let src = if observed[k] {
            k
        } else {
            let (r, c) = ((k / w) as i64, (k % w) as i64);
            *known
                .iter()
                .min_by_key(|&&j| {
                    let (dr, dc) = ((j / w) as i64 - r, (j % w) as i64 - c);
                    dr * dr + dc * dc
                })
                .expect("non-empty")
        };
        for ch in 0..shape.channels {
            out.data_mut()[ch * h * w + k] = y.data()[ch * h * w + src];
        }
    }
    out
}

/// Replicates each low-resolution pixel over its `factor×factor` block.
pub fn nearest_upsample(y: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let s = y.shape();
    let shape = crate::tensor::Shape::new(s.channels, s.height * factor, s.width * factor);
    Tensor::from_fn(shape, |c, r, col| y.get(c, r / factor, col / factor))
}

/// The observation turned back into a full-size map without any prior:
/// nearest fill for masks, block replication for downsampling and the raw
/// measurement for pointwise operators.
pub fn naive_estimate(y: &Tensor<f32>, op: &ForwardOperator) -> Tensor<f32> {
    match (op.spec(), op.observed_mask()) {
        (OperatorSpec::Downsample { factor }, _) => nearest_upsample(y, *factor),
        (_, Some(mask)) => nearest_fill(y, mask),
        _ => y.clone(),
    }
}
