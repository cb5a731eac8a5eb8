use super::tensor::{numel, Tensor};
use crate::scalar::Scalar;

/// How contributions landing in the same cell are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Input order within each cell.
    #[default]
    InputOrder,
    /// Per cell and channel, contributions are sorted by value before summing,
    /// so the result does not depend on input order at all.
    Sorted,
}

/// Precomputed voxel assignment for [`Tape::scatter_add`](super::Tape::scatter_add).
///
/// The output has shape `[B, C, spatial..]`; a voxel index addresses
/// `b * cells + cell` where `cells` is the product of the spatial dims.
/// Points are visited by ascending voxel index, then input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPlan {
    out_shape: Vec<usize>,
    voxel: Vec<Option<u32>>,
    order: Vec<u32>,
    cells: usize,
    pub accumulation: Accumulation,
}

impl ScatterPlan {
    /// Entries that are `None` or outside `[0, B * cells)` are dropped.
    pub fn new(voxel: &[Option<usize>], out_shape: &[usize]) -> Self {
        assert!(out_shape.len() >= 2, "contract violation: scatter grid shape {out_shape:?} needs [B, C, ..]");
        let cells = numel(&out_shape[2..]);
        let total = out_shape[0] * cells;
        let voxel: Vec<Option<u32>> =
            voxel.iter().map(|v| v.filter(|&i| i < total).map(|i| i as u32)).collect();
        // stable counting sort by voxel
        let mut counts = vec![0u32; total + 1];
        for v in voxel.iter().flatten() {
            counts[*v as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let kept = counts[total] as usize;
        let mut order = vec![0u32; kept];
        for (p, v) in voxel.iter().enumerate() {
            if let Some(v) = v {
                let slot = &mut counts[*v as usize];
                order[*slot as usize] = p as u32;
                *slot += 1;
            }
        }
        Self { out_shape: out_shape.to_vec(), voxel, order, cells, accumulation: Accumulation::InputOrder }
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn point_count(&self) -> usize {
        self.voxel.len()
    }

    pub fn kept_count(&self) -> usize {
        self.order.len()
    }

    pub fn voxel_of(&self, point: usize) -> Option<usize> {
        self.voxel[point].map(|v| v as usize)
    }

    fn out_index(&self, voxel: usize, c: usize, channels: usize) -> usize {
        let (b, cell) = (voxel / self.cells, voxel % self.cells);
        (b * channels + c) * self.cells + cell
    }

    fn check(&self, shape: &[usize]) -> usize {
        assert!(
            shape.len() == 2 && shape[0] == self.voxel.len() && shape[1] == self.out_shape[1],
            "contract violation: scatter_add values {shape:?} for {} points into grid {:?}",
            self.voxel.len(),
            self.out_shape
        );
        shape[1]
    }

    pub fn forward<T: Scalar>(&self, values: &Tensor<T>) -> Tensor<T> {
        let channels = self.check(&values.shape);
        let mut out = vec![T::zero(); numel(&self.out_shape)];
        match self.accumulation {
            Accumulation::InputOrder => {
                for &p in &self.order {
                    let p = p as usize;
                    let v = self.voxel[p].expect("ordered points are kept") as usize;
                    let src = &values.data[p * channels..(p + 1) * channels];
                    for (c, &x) in src.iter().enumerate() {
                        out[self.out_index(v, c, channels)] += x;
                    }
                }
            }
            Accumulation::Sorted => {
                let mut run_start = 0;
                let mut scratch = Vec::new();
                while run_start < self.order.len() {
                    let v = self.voxel[self.order[run_start] as usize].expect("kept");
                    let mut run_end = run_start;
                    while run_end < self.order.len() && self.voxel[self.order[run_end] as usize] == Some(v) {
                        run_end += 1;
                    }
                    for c in 0..channels {
                        scratch.clear();
                        scratch.extend(self.order[run_start..run_end].iter().map(|&p| values.data[p as usize * channels + c]));
                        scratch.sort_by(|a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                        let mut acc = T::zero();
                        for &x in &scratch {
                            acc += x;
                        }
                        out[self.out_index(v as usize, c, channels)] = acc;
                    }
                    run_start = run_end;
                }
            }
        }
        Tensor::new(&self.out_shape, out)
    }

    /// Gathers the upstream gradient at each kept point's voxel.
    pub fn backward<T: Scalar>(&self, grad_out: &[T], channels: usize) -> Vec<T> {
        let mut grad = vec![T::zero(); self.voxel.len() * channels];
        for (p, v) in self.voxel.iter().enumerate() {
            if let Some(v) = v {
                for c in 0..channels {
                    grad[p * channels + c] = grad_out[self.out_index(*v as usize, c, channels)];
                }
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_and_drops() {
        let plan = ScatterPlan::new(&[Some(0), Some(0), Some(1), None, Some(7)], &[1, 1, 2]);
        let values = Tensor::<f64>::new(&[5, 1], vec![1.0, 2.0, 3.0, 10.0, 20.0]);
        assert_eq!(plan.forward(&values).data, vec![3.0, 3.0]);
        assert_eq!(plan.kept_count(), 3);
    }

    #[test]
    fn channel_major_output() {
        let plan = ScatterPlan::new(&[Some(1), Some(2)], &[2, 2, 2]);
        let values = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        // point 0 -> batch 0 cell 1; point 1 -> batch 1 cell 0
        assert_eq!(plan.forward(&values).data, vec![0.0, 1.0, 0.0, 2.0, 3.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn sorted_mode_is_order_free() {
        let vals = [0.1, 1e16, -1e16, 0.3];
        let plan = ScatterPlan::new(&[Some(0); 4], &[1, 1, 1]).with_accumulation(Accumulation::Sorted);
        let a = plan.forward(&Tensor::<f64>::new(&[4, 1], vals.to_vec())).data[0];
        let b = plan.forward(&Tensor::<f64>::new(&[4, 1], vec![vals[3], vals[1], vals[0], vals[2]])).data[0];
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
