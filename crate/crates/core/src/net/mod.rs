//! The dual-head segmentation network.
//!
//! A sparse encoder-decoder produces per-voxel features. A pointwise 3D head
//! turns them into class logits, and during training the same features are
//! projected to the BEV plane, pooled, and decoded by a small 2D head.

mod checkpoint;
mod model;
pub mod sparse;
pub mod tape;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::PoolSpec;
use crate::error::{Error, Result};
use crate::seed;
use crate::voxel::INPUT_CHANNELS;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use model::{argmax_rows, forward, predict, softmax_rows, ForwardOptions, ForwardOutput, HeadGrads};
pub use tape::{BnMode, Tape};

/// How decoder features are merged with the encoder features of the same level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipStyle {
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Point count at which the occupancy input feature saturates.
    pub count_cap: usize,
    /// Channel width of each encoder level; level 0 runs at voxel resolution.
    pub encoder_widths: Vec<usize>,
    /// Edge length of sparse kernels. Only 3 is supported.
    pub kernel_extent: usize,
    /// Hidden widths of the BEV head; the head has `len + 1` convolutions.
    pub bev_hidden: Vec<usize>,
    pub num_classes: usize,
    /// Attach a second pointwise 3D head whose softmax is averaged with the first.
    pub double_head: bool,
    /// Build the auxiliary BEV branch.
    pub bev_head: bool,
    pub skip: SkipStyle,
    pub pool: PoolSpec,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: INPUT_CHANNELS,
            count_cap: 16,
            encoder_widths: vec![8, 16],
            kernel_extent: 3,
            bev_hidden: vec![16, 8],
            num_classes: 7,
            double_head: false,
            bev_head: true,
            skip: SkipStyle::Concat,
            pool: PoolSpec::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// A named tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(v);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::validation("encoder needs at least one level of nonzero width"));
        }
        if self.kernel_extent != 3 {
            return Err(Error::validation("only 3×3×3 sparse kernels are supported"));
        }
        if self.num_classes < 1 || self.input_channels < 1 || self.bev_hidden.contains(&0) {
            return Err(Error::validation("class and channel counts must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::validation("bad batch-norm constants"));
        }
        if self.double_head && self.bev_head {
            return Err(Error::validation(
                "double_head replaces the BEV branch; enable at most one",
            ));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Width of the decoder output that feeds both heads.
    pub fn feature_channels(&self) -> usize {
        self.encoder_widths[0]
    }

    /// Channel sequence of the BEV head, input to logits.
    pub fn bev_channels(&self) -> Vec<usize> {
        let mut c = vec![self.feature_channels()];
        c.extend(&self.bev_hidden);
        c.push(self.num_classes);
        c
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let bn = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, c: usize| {
            push(format!("{prefix}.gamma"), vec![c], Init::Ones);
            push(format!("{prefix}.beta"), vec![c], Init::Zeros);
        };
        let w = &self.encoder_widths;
        let conv = |cin: usize, cout: usize| (vec![27, cin, cout], Init::HeUniform { fan_in: 27 * cin });

        let (s, i) = conv(self.input_channels, w[0]);
        push("enc0.conv.weight".into(), s, i);
        bn(&mut push, "enc0.bn", w[0]);
        for l in 1..w.len() {
            let (s, i) = conv(w[l - 1], w[l]);
            push(format!("enc{l}.conv.weight"), s, i);
            bn(&mut push, &format!("enc{l}.bn"), w[l]);
        }
        for l in (1..w.len()).rev() {
            let (s, i) = conv(w[l], w[l - 1]);
            push(format!("dec{l}.up.weight"), s, i);
            bn(&mut push, &format!("dec{l}.up_bn"), w[l - 1]);
            let (s, i) = conv(2 * w[l - 1], w[l - 1]);
            push(format!("dec{l}.fuse.weight"), s, i);
            bn(&mut push, &format!("dec{l}.fuse_bn"), w[l - 1]);
        }
        let k = self.num_classes;
        let heads: &[&str] = if self.double_head { &["head3d", "head3d_aux"] } else { &["head3d"] };
        for h in heads {
            push(format!("{h}.weight"), vec![1, w[0], k], Init::HeUniform { fan_in: w[0] });
            push(format!("{h}.bias"), vec![k], Init::Zeros);
        }
        if self.bev_head {
            let ch = self.bev_channels();
            let last = ch.len() - 2;
            for (j, pair) in ch.windows(2).enumerate() {
                let (cin, cout) = (pair[0], pair[1]);
                push(
                    format!("bev.conv{j}.weight"),
                    vec![cout, cin, 3, 3],
                    Init::HeUniform { fan_in: 9 * cin },
                );
                if j == last {
                    push(format!("bev.conv{j}.bias"), vec![cout], Init::Zeros);
                } else {
                    bn(&mut push, &format!("bev.bn{j}"), cout);
                }
            }
        }
        specs
    }

    fn bn_layers(&self) -> Vec<(String, usize)> {
        self.param_specs()
            .into_iter()
            .filter_map(|s| s.name.strip_suffix(".gamma").map(|p| (p.to_string(), s.shape[0])))
            .collect()
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    /// `<bn>.running_mean` / `<bn>.running_var`; not trained by gradient.
    pub buffers: BTreeMap<String, Tensor>,
}

/// Gradient store keyed like [`ModelParams::params`].
pub type Gradients = BTreeMap<String, Vec<f64>>;

impl ModelParams {
    /// He-uniform weights, zero biases, unit BN scale. Each tensor draws from its
    /// own stream derived from `(seed, name)`, so adding or removing a branch
    /// leaves the others' initial values unchanged.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for spec in config.param_specs() {
            let mut t = Tensor::zeros(spec.shape);
            match spec.init {
                Init::Zeros => {}
                Init::Ones => t.data.fill(1.0),
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = seed::rng(seed, &format!("init/{}", spec.name));
                    for v in &mut t.data {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
            params.insert(spec.name, t);
        }
        let mut buffers = BTreeMap::new();
        for (bn, c) in config.bn_layers() {
            buffers.insert(format!("{bn}.running_mean"), Tensor::zeros(vec![c]));
            buffers.insert(format!("{bn}.running_var"), Tensor::filled(vec![c], 1.0));
        }
        Ok(ModelParams {
            config: config.clone(),
            params,
            buffers,
        })
    }

    /// Every tensor zero, including BN scales.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = ModelParams::init(config, 0)?;
        for t in p.params.values_mut() {
            t.data.fill(0.0);
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing parameter `{name}`")))
    }

    pub(crate) fn running(&self, bn: &str) -> Result<(&[f64], &[f64])> {
        let get = |s: &str| {
            self.buffers
                .get(&format!("{bn}.{s}"))
                .map(|t| t.data.as_slice())
                .ok_or_else(|| Error::validation(format!("missing buffer `{bn}.{s}`")))
        };
        Ok((get("running_mean")?, get("running_var")?))
    }

    /// Checks every tensor against the shapes `config` prescribes.
    pub fn check_shapes(&self) -> Result<()> {
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::validation("parameter set does not match the model config"));
        }
        for s in specs {
            let t = self.get(&s.name)?;
            if t.shape != s.shape || t.data.len() != s.shape.iter().product::<usize>() {
                return Err(Error::validation(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name, t.shape, s.shape
                )));
            }
        }
        Ok(())
    }

    /// Exponential moving update of BN running statistics.
    pub fn update_running_stats(&mut self, stats: &[(String, tape::BnBatchStats)]) {
        let m = self.config.bn_momentum;
        for (bn, s) in stats {
            if let Some(rm) = self.buffers.get_mut(&format!("{bn}.running_mean")) {
                for (r, v) in rm.data.iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{bn}.running_var")) {
                for (r, v) in rv.data.iter_mut().zip(&s.var) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_per_tensor() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 1).unwrap();
        let b = ModelParams::init(&cfg, 1).unwrap();
        assert_eq!(a, b);
        let no_bev = ModelConfig {
            bev_head: false,
            ..cfg.clone()
        };
        let c = ModelParams::init(&no_bev, 1).unwrap();
        for (name, t) in &c.params {
            assert_eq!(&a.params[name], t, "{name}");
        }
        assert!(a.params.keys().any(|k| k.starts_with("bev.")));
        assert!(!c.params.keys().any(|k| k.starts_with("bev.")));
        assert_ne!(ModelParams::init(&cfg, 2).unwrap(), a);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 0).unwrap();
        p.check_shapes().unwrap();
        assert_eq!(p.params["enc0.conv.weight"].shape, vec![27, 5, 8]);
        assert_eq!(p.params["dec1.fuse.weight"].shape, vec![27, 16, 8]);
        assert_eq!(p.params["bev.conv0.weight"].shape, vec![16, 8, 3, 3]);
        assert_eq!(p.params["bev.conv2.weight"].shape, vec![7, 8, 3, 3]);
        assert!(p.params.contains_key("bev.conv2.bias"));
        assert!(p.buffers.contains_key("bev.bn1.running_var"));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            encoder_widths: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let both = ModelConfig {
            double_head: true,
            ..Default::default()
        };
        assert!(both.validate().is_err());
    }
}
