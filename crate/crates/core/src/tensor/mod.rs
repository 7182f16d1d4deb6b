//! Dense `f64` kernels: matrices, row softmax, layer norm, multi-head
//! attention, and their reverse passes for finite-difference verification.

mod attention;
mod grad;
mod matrix;
mod norm;

pub use attention::{
    attention, attention_backward, attention_forward, AttentionCache, AttentionGrads,
    AttentionParams,
};
pub(crate) use attention::f32_round;
pub use grad::grad_check;
pub use matrix::{dot, Matrix};
pub use norm::{
    layer_norm, layer_norm_backward, layer_norm_forward, softmax_rows, softmax_rows_backward,
    LayerNormCache, LAYER_NORM_EPS,
};

/// A fixed, ordered set of parameter tensors.
///
/// The slice order defines both the flat parameter vector used by gradient
/// checks and the on-disk checkpoint layout.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.slices() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Overwrites every parameter from `flat`; panics if the length differs.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}
