//! The local federated model: two conv+pool blocks with ReLU, a fully
//! connected class head, and a linear feature-projection head that maps the
//! penultimate activation to the teacher's feature dimension for distillation.

use super::NamedTensors;
use crate::numkit::{GradTape, NodeId, Result, Rng, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Class count M.
    pub classes: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    /// Output width of the feature head; matched to the teacher's embed dim.
    pub feature_dim: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            height: 16,
            width: 16,
            channels: 1,
            classes: 4,
            conv1_channels: 4,
            conv2_channels: 8,
            kernel: 3,
            feature_dim: 32,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| TensorError::InvalidParameter { name: "classifier config", reason };
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(bad(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.classes < 2 {
            return Err(bad(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.height / 4 == 0 || self.width / 4 == 0 {
            return Err(bad(format!(
                "image {}x{} too small for two pooling stages",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Length of the flattened activation entering the heads.
    pub fn flat_dim(&self) -> usize {
        let h = self.height / 2 / 2;
        let w = self.width / 2 / 2;
        h * w * self.conv2_channels
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub feat_w: Tensor,
    pub feat_b: Tensor,
}

/// Recorded parameter nodes for one forward pass.
pub struct ClassifierNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
    pub feat_w: NodeId,
    pub feat_b: NodeId,
    flat: Vec<NodeId>,
}

/// Per-image forward outputs (node ids on the producing tape).
pub struct ClassifierForward {
    /// Class logits `[1, M]`.
    pub logits: NodeId,
    /// Student feature `[1, feature_dim]` for distillation.
    pub feature: NodeId,
    /// Flattened penultimate activation `[1, flat_dim]`.
    pub penultimate: NodeId,
}

impl ClassifierModel {
    pub fn init(cfg: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let (c_in, c1, c2) = (cfg.channels, cfg.conv1_channels, cfg.conv2_channels);
        let flat = cfg.flat_dim();
        let conv_fan = |cin: usize, cout: usize| (k * k * cin, k * k * cout);
        let mut conv = |cin: usize, cout: usize, rng: &mut Rng| {
            let (fi, fo) = conv_fan(cin, cout);
            Tensor::new(
                vec![k, k, cin, cout],
                (0..k * k * cin * cout).map(|_| rng.xavier(fi, fo)).collect(),
            )
        };
        let conv1_w = conv(c_in, c1, rng)?;
        let conv2_w = conv(c1, c2, rng)?;
        let fc_w = Tensor::new(
            vec![flat, cfg.classes],
            (0..flat * cfg.classes).map(|_| rng.xavier(flat, cfg.classes)).collect(),
        )?;
        let feat_w = Tensor::new(
            vec![flat, cfg.feature_dim],
            (0..flat * cfg.feature_dim).map(|_| rng.xavier(flat, cfg.feature_dim)).collect(),
        )?;
        Ok(ClassifierModel {
            conv1_b: Tensor::zeros(&[c1]),
            conv2_b: Tensor::zeros(&[c2]),
            fc_b: Tensor::zeros(&[1, cfg.classes]),
            feat_b: Tensor::zeros(&[1, cfg.feature_dim]),
            conv1_w,
            conv2_w,
            fc_w,
            feat_w,
            cfg,
        })
    }

    /// Record every parameter on the tape in [`NamedTensors::tensors`] order.
    pub fn record(&self, tape: &mut GradTape) -> ClassifierNodes {
        let mut flat = Vec::with_capacity(8);
        let mut leaf = |tape: &mut GradTape, flat: &mut Vec<NodeId>, t: &Tensor| {
            let id = tape.leaf(t.clone());
            flat.push(id);
            id
        };
        let conv1_w = leaf(tape, &mut flat, &self.conv1_w);
        let conv1_b = leaf(tape, &mut flat, &self.conv1_b);
        let conv2_w = leaf(tape, &mut flat, &self.conv2_w);
        let conv2_b = leaf(tape, &mut flat, &self.conv2_b);
        let fc_w = leaf(tape, &mut flat, &self.fc_w);
        let fc_b = leaf(tape, &mut flat, &self.fc_b);
        let feat_w = leaf(tape, &mut flat, &self.feat_w);
        let feat_b = leaf(tape, &mut flat, &self.feat_b);
        ClassifierNodes {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc_w,
            fc_b,
            feat_w,
            feat_b,
            flat,
        }
    }

    pub fn sgd_step(&mut self, tape: &GradTape, nodes: &ClassifierNodes, lr: f64) {
        for ((_, tensor), &id) in self.tensors_mut().into_iter().zip(&nodes.flat) {
            if let Some(grad) = tape.grad(id) {
                for (w, &g) in tensor.data_mut().iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
        }
    }

    pub fn forward(&self, tape: &mut GradTape, nodes: &ClassifierNodes, image: NodeId) -> Result<ClassifierForward> {
        let pad = self.cfg.pad();
        let x = tape.conv2d(image, nodes.conv1_w, nodes.conv1_b, pad)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2(x)?;
        let x = tape.conv2d(x, nodes.conv2_w, nodes.conv2_b, pad)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2(x)?;
        let penultimate = tape.reshape(x, &[1, self.cfg.flat_dim()])?;
        let fc = tape.matmul(penultimate, nodes.fc_w)?;
        let logits = tape.add(fc, nodes.fc_b)?;
        let proj = tape.matmul(penultimate, nodes.feat_w)?;
        let feature = tape.add(proj, nodes.feat_b)?;
        Ok(ClassifierForward { logits, feature, penultimate })
    }

    /// Logits for one image on a throwaway tape.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let nodes = self.record(&mut tape);
        let img = tape.leaf(image.clone());
        let out = self.forward(&mut tape, &nodes, img)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        Ok(argmax(logits.data()))
    }

    /// Flattened penultimate activation, the feature source for embeddings.
    pub fn penultimate(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = GradTape::new();
        let nodes = self.record(&mut tape);
        let img = tape.leaf(image.clone());
        let out = self.forward(&mut tape, &nodes, img)?;
        Ok(tape.value(out.penultimate).data().to_vec())
    }

    /// Accuracy over a labeled sample set.
    pub fn accuracy(&self, samples: &[(Tensor, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (image, label) in samples {
            if self.predict(image)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }

    pub fn layout_tag(&self) -> String {
        format!(
            "clf-v1/{}x{}x{}/m{}/c{}-{}/k{}/f{}",
            self.cfg.height,
            self.cfg.width,
            self.cfg.channels,
            self.cfg.classes,
            self.cfg.conv1_channels,
            self.cfg.conv2_channels,
            self.cfg.kernel,
            self.cfg.feature_dim
        )
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl NamedTensors for ClassifierModel {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("conv1.weight".into(), &self.conv1_w),
            ("conv1.bias".into(), &self.conv1_b),
            ("conv2.weight".into(), &self.conv2_w),
            ("conv2.bias".into(), &self.conv2_b),
            ("fc.weight".into(), &self.fc_w),
            ("fc.bias".into(), &self.fc_b),
            ("feature.weight".into(), &self.feat_w),
            ("feature.bias".into(), &self.feat_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("conv1.weight".into(), &mut self.conv1_w),
            ("conv1.bias".into(), &mut self.conv1_b),
            ("conv2.weight".into(), &mut self.conv2_w),
            ("conv2.bias".into(), &mut self.conv2_b),
            ("fc.weight".into(), &mut self.fc_w),
            ("fc.bias".into(), &mut self.fc_b),
            ("feature.weight".into(), &mut self.feat_w),
            ("feature.bias".into(), &mut self.feat_b),
        ]
    }
}
