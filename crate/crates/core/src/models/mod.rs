//! The two networks: a miniature ViT-based generative autoencoder (the
//! teacher, trained on unlabeled images by masked reconstruction) and a small
//! convolutional classifier (the student and federated model) with a linear
//! feature head for distillation.

mod checkpoint;
mod classifier;
mod gae;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use classifier::{ClassifierConfig, ClassifierForward, ClassifierModel};
pub use gae::{
    attention_head, mask_plan, multi_head, patchify, reconstruction_loss, transformer_block,
    unpatchify, GaeConfig, GaeForward, GaeModel, LayerNodes,
};

use crate::numkit::Tensor;

/// Models expose their parameters as named tensors in a fixed order; the order
/// defines the flattened parameter layout used for aggregation and the
/// checkpoint file contents.
pub trait NamedTensors {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn load_flat(&mut self, values: &[f64]) -> crate::numkit::Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(crate::numkit::TensorError::InvalidParameter {
                name: "values",
                reason: format!("expected {total} parameters, got {}", values.len()),
            });
        }
        let mut cursor = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[cursor..cursor + n]);
            cursor += n;
        }
        Ok(())
    }
}
