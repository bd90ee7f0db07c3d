use std::sync::Arc;

use crate::bev::{assign, BevAssignment, BevProjectionConfig};
use crate::cloud::ClassId;
use crate::error::{Error, Result};
use crate::net::sparse::{Hierarchy, Rulebook};
use crate::net::tape::{BnBatchStats, BnMode, Layout, Tape, ValueId};
use crate::net::{Gradients, ModelParams};
use crate::voxel::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: BnMode,
    /// Evaluate the BEV branch (ignored when the model has none).
    pub bev: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: BnMode::Train,
            bev: true,
        }
    }

    pub fn inference() -> Self {
        ForwardOptions {
            mode: BnMode::Eval,
            bev: false,
        }
    }
}

pub struct ForwardOutput {
    /// `cells × K`, canonical cell order.
    pub logits3d: Vec<f64>,
    /// Second 3D head of the double-head variant.
    pub logits3d_aux: Option<Vec<f64>>,
    /// `K × height × width` at pooled resolution.
    pub logits_bev: Option<Vec<f64>>,
    /// Pooled `(width, height)` of `logits_bev`.
    pub bev_dims: (usize, usize),
    /// Which voxel filled each full-resolution BEV pixel.
    pub assignment: Option<BevAssignment>,
    /// Training-mode statistics per BN layer, in evaluation order.
    pub bn_stats: Vec<(String, BnBatchStats)>,
    pub num_classes: usize,
    pub tape: Tape,
    ids: OutputIds,
}

#[derive(Clone, Copy, Debug)]
struct OutputIds {
    features: ValueId,
    logits3d: ValueId,
    logits3d_aux: Option<ValueId>,
    logits_bev: Option<ValueId>,
}

/// Upstream gradients for each head output. Missing entries count as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadGrads {
    pub logits3d: Option<Vec<f64>>,
    pub logits3d_aux: Option<Vec<f64>>,
    pub logits_bev: Option<Vec<f64>>,
}

impl ForwardOutput {
    /// Decoder output (`cells × C`) that feeds the heads. Empty after backward.
    pub fn features(&self) -> &[f64] {
        self.tape.value(self.ids.features)
    }

    /// Reverse pass. A second call fails with a usage error.
    pub fn backward(&mut self, grads: HeadGrads) -> Result<Gradients> {
        let mut seeds = Vec::new();
        let mut seed = |id: Option<ValueId>, g: Option<Vec<f64>>, what: &str| -> Result<()> {
            match (id, g) {
                (Some(id), Some(g)) => {
                    seeds.push((id, g));
                    Ok(())
                }
                (None, Some(_)) => Err(Error::Usage(format!("no {what} output to differentiate"))),
                _ => Ok(()),
            }
        };
        seed(Some(self.ids.logits3d), grads.logits3d, "3D")?;
        seed(self.ids.logits3d_aux, grads.logits3d_aux, "auxiliary 3D")?;
        seed(self.ids.logits_bev, grads.logits_bev, "BEV")?;
        self.tape.backward(seeds)
    }
}

struct Builder<'a> {
    tape: Tape,
    params: &'a ModelParams,
    mode: BnMode,
    stats: Vec<(String, BnBatchStats)>,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> Result<ValueId> {
        let t = self.params.get(name)?;
        Ok(self.tape.param(name, t.data.clone()))
    }

    fn bn_relu(&mut self, bn: &str, x: ValueId, channels: usize, layout: Layout) -> Result<ValueId> {
        let gamma = self.param(&format!("{bn}.gamma"))?;
        let beta = self.param(&format!("{bn}.beta"))?;
        let running = match self.mode {
            BnMode::Eval => Some(self.params.running(bn)?),
            BnMode::Train => None,
        };
        let eps = self.params.config.bn_eps;
        let (y, stats) = self
            .tape
            .batch_norm(bn, x, gamma, beta, layout, channels, self.mode, running, eps)?;
        if let Some(s) = stats {
            self.stats.push((bn.to_string(), s));
        }
        Ok(self.tape.relu(y))
    }

    fn sparse_block(
        &mut self,
        conv: &str,
        bn: &str,
        x: ValueId,
        rules: &Arc<Rulebook>,
        cin: usize,
        cout: usize,
    ) -> Result<ValueId> {
        let w = self.param(&format!("{conv}.weight"))?;
        let y = self.tape.conv(conv, x, w, None, rules.clone(), cin, cout)?;
        self.bn_relu(bn, y, cout, Layout::Rows)
    }

    fn head(&mut self, name: &str, x: ValueId, rules: &Arc<Rulebook>, cin: usize, k: usize) -> Result<ValueId> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.conv(name, x, w, Some(b), rules.clone(), cin, k)
    }
}

/// Runs the network on one voxelized scan.
pub fn forward(
    params: &ModelParams,
    grid: &VoxelGrid,
    bev_cfg: &BevProjectionConfig,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    params.check_shapes()?;
    let cfg = &params.config;
    let w = &cfg.encoder_widths;
    let levels = cfg.levels();
    let k = cfg.num_classes;

    let hier = Hierarchy::build(grid.keys().collect(), levels);
    let sub: Vec<Arc<Rulebook>> = hier.submanifold.into_iter().map(Arc::new).collect();
    let down: Vec<Arc<Rulebook>> = hier.down.into_iter().map(Arc::new).collect();

    let mut b = Builder {
        tape: Tape::new(),
        params,
        mode: opts.mode,
        stats: Vec::new(),
    };
    let input = b.tape.input(grid.input_features(cfg.count_cap));

    let mut skips = Vec::with_capacity(levels);
    let mut x = b.sparse_block("enc0.conv", "enc0.bn", input, &sub[0], cfg.input_channels, w[0])?;
    skips.push(x);
    for l in 1..levels {
        x = b.sparse_block(
            &format!("enc{l}.conv"),
            &format!("enc{l}.bn"),
            x,
            &down[l - 1],
            w[l - 1],
            w[l],
        )?;
        skips.push(x);
    }
    for l in (1..levels).rev() {
        let up_rules = Arc::new(down[l - 1].transposed());
        let up = b.sparse_block(
            &format!("dec{l}.up"),
            &format!("dec{l}.up_bn"),
            x,
            &up_rules,
            w[l],
            w[l - 1],
        )?;
        let cat = b.tape.concat(up, skips[l - 1], w[l - 1], w[l - 1])?;
        x = b.sparse_block(
            &format!("dec{l}.fuse"),
            &format!("dec{l}.fuse_bn"),
            cat,
            &sub[l - 1],
            2 * w[l - 1],
            w[l - 1],
        )?;
    }
    let features = x;

    let pointwise = Arc::new(Rulebook::identity(grid.len()));
    let logits3d = b.head("head3d", features, &pointwise, w[0], k)?;
    let logits3d_aux = if cfg.double_head {
        Some(b.head("head3d_aux", features, &pointwise, w[0], k)?)
    } else {
        None
    };

    let mut logits_bev = None;
    let mut assignment = None;
    let mut bev_dims = (0, 0);
    if cfg.bev_head && opts.bev {
        bev_cfg.validate()?;
        let a = assign(grid, bev_cfg);
        let c = cfg.feature_channels();
        let dense = b.tape.scatter(features, &a, c);
        let (mut y, h, wd) = b.tape.max_pool(dense, c, bev_cfg.height, bev_cfg.width, cfg.pool)?;
        let ch = cfg.bev_channels();
        let last = ch.len() - 2;
        for (j, pair) in ch.windows(2).enumerate() {
            let name = format!("bev.conv{j}");
            let wt = b.param(&format!("{name}.weight"))?;
            if j == last {
                let bias = b.param(&format!("{name}.bias"))?;
                y = b.tape.conv2d(&name, y, wt, Some(bias), pair[0], pair[1], h, wd)?;
            } else {
                y = b.tape.conv2d(&name, y, wt, None, pair[0], pair[1], h, wd)?;
                y = b.bn_relu(&format!("bev.bn{j}"), y, pair[1], Layout::Planes)?;
            }
        }
        logits_bev = Some(y);
        assignment = Some(a);
        bev_dims = (wd, h);
    }

    let tape = b.tape;
    Ok(ForwardOutput {
        logits3d: tape.value(logits3d).to_vec(),
        logits3d_aux: logits3d_aux.map(|id| tape.value(id).to_vec()),
        logits_bev: logits_bev.map(|id| tape.value(id).to_vec()),
        bev_dims,
        assignment,
        bn_stats: b.stats,
        num_classes: k,
        ids: OutputIds {
            features,
            logits3d,
            logits3d_aux,
            logits_bev,
        },
        tape,
    })
}

/// Row-wise softmax of a `rows × k` buffer.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= z;
        }
    }
    out
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<ClassId> {
    scores
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            ClassId(best as u16)
        })
        .collect()
}

/// Per-voxel classes from the 3D head(s), using running BN statistics.
/// With two heads their softmax outputs are averaged first.
pub fn predict(params: &ModelParams, grid: &VoxelGrid, bev_cfg: &BevProjectionConfig) -> Result<Vec<ClassId>> {
    let out = forward(params, grid, bev_cfg, ForwardOptions::inference())?;
    Ok(classes_from_output(&out))
}

pub(crate) fn classes_from_output(out: &ForwardOutput) -> Vec<ClassId> {
    let k = out.num_classes;
    match &out.logits3d_aux {
        None => argmax_rows(&out.logits3d, k),
        Some(aux) => {
            let a = softmax_rows(&out.logits3d, k);
            let b = softmax_rows(aux, k);
            let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            argmax_rows(&avg, k)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Point, PointCloud};
    use crate::net::ModelConfig;
    use crate::voxel::voxelize;

    fn small_grid() -> VoxelGrid {
        let pts: Vec<Point> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point::new(t.sin() * 2.0, (t * 0.5).cos(), t.cos() * 2.0).with_intensity(0.5)
            })
            .collect();
        voxelize(&PointCloud::new(pts), 0.25).unwrap()
    }

    fn bev() -> BevProjectionConfig {
        BevProjectionConfig::new(4.0, 4.0, 12, 12).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        let out = forward(&p, &small_grid(), &bev(), ForwardOptions::train()).unwrap();
        assert!(out.logits3d.iter().all(|&v| v == 0.0));
        assert!(out.logits_bev.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_shape() {
        let g = voxelize(&PointCloud::new(vec![Point::new(0.1, 0.1, 0.1)]), 0.25).unwrap();
        let p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let out = forward(&p, &g, &bev(), ForwardOptions::train()).unwrap();
        assert_eq!(out.logits3d.len(), 7);
        assert_eq!(out.bev_dims, (4, 4));
        assert_eq!(out.logits_bev.as_ref().unwrap().len(), 7 * 16);
    }

    #[test]
    fn empty_grid_runs() {
        let g = voxelize(&PointCloud::default(), 0.25).unwrap();
        let p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let out = forward(&p, &g, &bev(), ForwardOptions::train()).unwrap();
        assert!(out.logits3d.is_empty());
    }

    #[test]
    fn argmax_ties_and_order() {
        assert_eq!(argmax_rows(&[0.1, 2.0, 0.3], 3), vec![ClassId(1)]);
        assert_eq!(argmax_rows(&[1.0, 1.0, 0.0], 3), vec![ClassId(0)]);
    }

    #[test]
    fn double_head_with_identical_heads_matches_single() {
        let single_cfg = ModelConfig {
            bev_head: false,
            ..Default::default()
        };
        let double_cfg = ModelConfig {
            double_head: true,
            ..single_cfg.clone()
        };
        let single = ModelParams::init(&single_cfg, 5).unwrap();
        let mut double = ModelParams::init(&double_cfg, 5).unwrap();
        for s in ["weight", "bias"] {
            let t = double.params[&format!("head3d.{s}")].clone();
            double.params.insert(format!("head3d_aux.{s}"), t);
        }
        let g = small_grid();
        assert_eq!(
            predict(&single, &g, &bev()).unwrap(),
            predict(&double, &g, &bev()).unwrap()
        );
    }

    #[test]
    fn inference_ignores_bev_branch() {
        let p = ModelParams::init(&ModelConfig::default(), 9).unwrap();
        let g = small_grid();
        let with = forward(
            &p,
            &g,
            &bev(),
            ForwardOptions {
                mode: BnMode::Eval,
                bev: true,
            },
        )
        .unwrap();
        let without = forward(&p, &g, &bev(), ForwardOptions::inference()).unwrap();
        assert!(with.logits_bev.is_some());
        assert_eq!(with.logits3d, without.logits3d);
        assert_eq!(classes_from_output(&with), predict(&p, &g, &bev()).unwrap());
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        let mut out = forward(&p, &small_grid(), &bev(), ForwardOptions::train()).unwrap();
        let zero = HeadGrads {
            logits3d: Some(vec![0.0; out.logits3d.len()]),
            ..Default::default()
        };
        let g = out.backward(zero.clone()).unwrap();
        assert!(g.values().flatten().all(|&v| v == 0.0));
        assert_eq!(g.len(), p.params.len());
        assert!(matches!(out.backward(zero), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        p.params.get_mut("enc0.conv.weight").unwrap().shape = vec![27, 4, 8];
        assert!(forward(&p, &small_grid(), &bev(), ForwardOptions::train()).is_err());
    }

    #[test]
    fn non_finite_input_names_layer() {
        let mut p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
        p.params.get_mut("enc0.conv.weight").unwrap().data[13 * 5 * 8] = f64::INFINITY;
        match forward(&p, &small_grid(), &bev(), ForwardOptions::train()) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "enc0.conv"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected a numeric error"),
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let grid = small_grid();
        let params = ModelParams::init(&ModelConfig::default(), 5).unwrap();
        let probe = |p: &ModelParams| {
            let out = forward(p, &grid, &bev(), ForwardOptions::train()).unwrap();
            let r3: f64 = out.logits3d.iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0)).sum();
            let rb: f64 = out.logits_bev.as_ref().unwrap().iter().enumerate().map(|(i, v)| v * ((i % 3) as f64 - 1.0)).sum();
            (r3 + rb, out.tape.branch_signature())
        };
        let mut out = forward(&params, &grid, &bev(), ForwardOptions::train()).unwrap();
        let sig = out.tape.branch_signature();
        let g3 = (0..out.logits3d.len()).map(|i| (i % 5) as f64 - 2.0).collect();
        let gb = (0..out.logits_bev.as_ref().unwrap().len()).map(|i| (i % 3) as f64 - 1.0).collect();
        let grads = out
            .backward(HeadGrads {
                logits3d: Some(g3),
                logits_bev: Some(gb),
                ..HeadGrads::default()
            })
            .unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (name, t) in &params.params {
            for j in [0, t.len() / 2, t.len() - 1] {
                let shifted = |d: f64| {
                    let mut p = params.clone();
                    p.params.get_mut(name).unwrap().data[j] += d;
                    probe(&p)
                };
                let ((fp, sp), (fm, sm)) = (shifted(h), shifted(-h));
                if sp != sig || sm != sig {
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let got = grads[name][j];
                assert!(
                    (numeric - got).abs() <= 1e-5 * (1.0 + numeric.abs()),
                    "{name}[{j}]: numeric {numeric} vs analytic {got}"
                );
                checked += 1;
            }
        }
        assert!(checked > params.params.len(), "too few coordinates checked: {checked}");
    }

    #[test]
    fn point_order_does_not_change_predictions() {
        let pts: Vec<Point> = (0..60)
            .map(|i| {
                let t = i as f64 * 0.53;
                Point::new(t.sin() * 3.0, (t * 0.7).cos(), t.cos() * 3.0).with_intensity(0.25)
            })
            .collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let params = ModelParams::init(&ModelConfig::default(), 8).unwrap();
        let run = |pts: Vec<Point>| {
            let g = voxelize(&PointCloud::new(pts), 0.25).unwrap();
            forward(&params, &g, &bev(), ForwardOptions::train()).unwrap().logits3d
        };
        let (a, b) = (run(pts), run(shuffled));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
