//! Soft DICE losses, the joint 3D + BEV objective, and the training loop.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mix3d, point_cut_mix, random_transform, AugmentConfig};
use crate::bev::{labels_from_assignment, resample_labels, BevLabelMap, BevProjectionConfig};
use crate::cloud::{ClassId, PointCloud};
use crate::error::{Error, Result};
use crate::net::{forward, ForwardOptions, ForwardOutput, Gradients, HeadGrads, ModelConfig, ModelParams};
use crate::seed;
use crate::voxel::voxelize;

/// Smoothing term in the DICE denominator.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct DiceOutput {
    pub loss: f64,
    /// No element carried a valid target; `loss` is 0 and `grad` is zero.
    pub skipped: bool,
    /// Derivative of `loss` with respect to each probability.
    pub grad: Vec<f64>,
}

/// Soft DICE over `rows × k` probabilities.
///
/// Per class `c`, `D_c = 2 Σ p·y / (Σ p + Σ y + ε)` with sums over rows whose
/// target is not `IGNORE`; the loss is `1 − mean D_c` over the classes present
/// in the targets.
pub fn dice_loss(probs: &[f64], targets: &[ClassId], k: usize) -> Result<DiceOutput> {
    if k == 0 || probs.len() != targets.len() * k {
        return Err(Error::validation(format!(
            "{} probabilities for {} targets × {k} classes",
            probs.len(),
            targets.len()
        )));
    }
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut ysum = vec![0.0; k];
    for (row, &t) in probs.chunks_exact(k).zip(targets) {
        if t.is_ignore() {
            continue;
        }
        if t.index() >= k {
            return Err(Error::validation(format!("target class {t} outside 0..{k}")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("probability row sums to {total}")));
        }
        for (c, &p) in row.iter().enumerate() {
            psum[c] += p;
        }
        inter[t.index()] += row[t.index()];
        ysum[t.index()] += 1.0;
    }
    let present: Vec<usize> = (0..k).filter(|&c| ysum[c] > 0.0).collect();
    let mut grad = vec![0.0; probs.len()];
    if present.is_empty() {
        return Ok(DiceOutput {
            loss: 0.0,
            skipped: true,
            grad,
        });
    }
    let m = present.len() as f64;
    let mut mean_dice = 0.0;
    // ∂loss/∂p_ic = −(1/m) · (2 y_ic · den − 2 I_c) / den²
    let mut coef_hit = vec![0.0; k];
    let mut coef_all = vec![0.0; k];
    for &c in &present {
        let den = psum[c] + ysum[c] + DICE_EPS;
        mean_dice += 2.0 * inter[c] / den / m;
        coef_hit[c] = -2.0 / den / m;
        coef_all[c] = 2.0 * inter[c] / (den * den) / m;
    }
    for ((g, row_t), _) in grad.chunks_exact_mut(k).zip(targets).zip(probs.chunks_exact(k)) {
        if row_t.is_ignore() {
            continue;
        }
        for c in &present {
            g[*c] = coef_all[*c];
        }
        g[row_t.index()] += coef_hit[row_t.index()];
    }
    Ok(DiceOutput {
        loss: 1.0 - mean_dice,
        skipped: false,
        grad,
    })
}

/// DICE on row-wise softmax of `logits`; the gradient is with respect to the logits.
pub fn dice_from_logits(logits: &[f64], targets: &[ClassId], k: usize) -> Result<DiceOutput> {
    let probs = crate::net::softmax_rows(logits, k);
    let mut out = dice_loss(&probs, targets, k)?;
    for (g, p) in out.grad.chunks_exact_mut(k).zip(probs.chunks_exact(k)) {
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        for (gv, &pv) in g.iter_mut().zip(p) {
            *gv = pv * (*gv - dot);
        }
    }
    Ok(out)
}

fn planes_to_rows(planes: &[f64], k: usize) -> Vec<f64> {
    let n = planes.len() / k;
    let mut rows = vec![0.0; planes.len()];
    for c in 0..k {
        for p in 0..n {
            rows[p * k + c] = planes[c * n + p];
        }
    }
    rows
}

fn rows_to_planes(rows: &[f64], k: usize) -> Vec<f64> {
    let n = rows.len() / k;
    let mut planes = vec![0.0; rows.len()];
    for p in 0..n {
        for c in 0..k {
            planes[c * n + p] = rows[p * k + c];
        }
    }
    planes
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l3d: f64,
    pub lbev: f64,
    pub ltot: f64,
    pub bev_skipped: bool,
    pub grads: HeadGrads,
}

/// Joint objective `w₃ᴅ · L³ᴰ + wᴮᴱⱽ · Lᴮᴱⱽ` (weights default to ½ each).
///
/// A present BEV branch whose targets are all `IGNORE` contributes 0 while
/// the 3D term keeps its weight. Models without any second branch train on
/// `L³ᴰ` alone. For the double-head variant the auxiliary 3D head takes the
/// place of the BEV branch and `L³ᴰ` is the first head's loss.
pub fn total_loss(
    out: &ForwardOutput,
    labels3d: &[ClassId],
    labels_bev: Option<&BevLabelMap>,
    weights: [f64; 2],
) -> Result<LossBreakdown> {
    let k = out.num_classes;
    let d3 = dice_from_logits(&out.logits3d, labels3d, k)?;
    let [w3, wb] = weights;
    let mut grads = HeadGrads::default();

    if let Some(aux) = &out.logits3d_aux {
        let da = dice_from_logits(aux, labels3d, k)?;
        grads.logits3d = Some(d3.grad.iter().map(|g| w3 * g).collect());
        grads.logits3d_aux = Some(da.grad.iter().map(|g| wb * g).collect());
        return Ok(LossBreakdown {
            l3d: d3.loss,
            lbev: da.loss,
            ltot: w3 * d3.loss + wb * da.loss,
            bev_skipped: false,
            grads,
        });
    }

    match (&out.logits_bev, labels_bev) {
        (Some(bev), Some(labels)) => {
            let (w, h) = out.bev_dims;
            if labels.width != w || labels.height != h {
                return Err(Error::validation(format!(
                    "BEV labels {}×{} do not match logits {w}×{h}",
                    labels.width, labels.height
                )));
            }
            let db = dice_from_logits(&planes_to_rows(bev, k), &labels.labels, k)?;
            grads.logits3d = Some(d3.grad.iter().map(|g| w3 * g).collect());
            grads.logits_bev = Some(rows_to_planes(&db.grad, k).iter().map(|g| wb * g).collect());
            Ok(LossBreakdown {
                l3d: d3.loss,
                lbev: db.loss,
                ltot: w3 * d3.loss + wb * db.loss,
                bev_skipped: db.skipped,
                grads,
            })
        }
        (Some(_), None) => Err(Error::validation("BEV logits given without BEV labels")),
        (None, _) => {
            grads.logits3d = Some(d3.grad);
            Ok(LossBreakdown {
                l3d: d3.loss,
                lbev: 0.0,
                ltot: d3.loss,
                bev_skipped: true,
                grads,
            })
        }
    }
}

/// BEV targets matching the pooled logits of `out`: labels of the winning
/// voxels at full raster resolution, resampled to the pooled size.
pub fn bev_targets(grid: &crate::voxel::VoxelGrid, out: &ForwardOutput) -> Result<Option<BevLabelMap>> {
    let Some(a) = &out.assignment else { return Ok(None) };
    let full = labels_from_assignment(grid, a);
    let (w, h) = out.bev_dims;
    Ok(Some(resample_labels(&full, w, h)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    None,
    Mix3d,
    PointCutMix,
}

/// Training hyper-parameters. DICE is evaluated per scan and the resulting
/// losses and gradients are averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weights of the 3D and BEV (or auxiliary 3D) losses.
    pub loss_weights: [f64; 2],
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub voxel_size: f64,
    /// Random rotation, scaling and downsampling before every step.
    pub transform: bool,
    pub mixing: Mixing,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            loss_weights: [0.5, 0.5],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            voxel_size: crate::voxel::DEFAULT_VOXEL_SIZE,
            transform: true,
            mixing: Mixing::None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::validation("voxel_size must be positive"));
        }
        self.augment.validate()
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Gradients::new(),
            v: Gradients::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l3d: f64,
    pub lbev: f64,
    pub ltot: f64,
}

pub fn write_log_csv(rows: &[LogRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,step,l3d,lbev,ltot")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.step, r.l3d, r.lbev, r.ltot)?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<LogRow>,
}

impl TrainOutput {
    /// Mean `L_tot` per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.log.iter().filter(|r| r.epoch == e).collect();
                rows.iter().map(|r| r.ltot).sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    }
}

/// Batches of `(dataset, scan)` for one epoch: each source is shuffled and
/// chunked on its own, then batches are interleaved round-robin.
fn epoch_batches(sizes: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut per_source: Vec<std::vec::IntoIter<Vec<(usize, usize)>>> = sizes
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = seed::rng(seed, &format!("shuffle/{epoch}/{d}"));
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            order
                .chunks(batch)
                .map(|c| c.iter().map(|&i| (d, i)).collect())
                .collect::<Vec<_>>()
                .into_iter()
        })
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for it in &mut per_source {
            if let Some(b) = it.next() {
                out.push(b);
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

fn prepare_sample(
    sources: &[Vec<PointCloud>],
    d: usize,
    i: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> PointCloud {
    let mut rng = seed::rng(cfg.seed, &format!("augment/{epoch}/{d}/{i}"));
    let mut cloud = sources[d][i].clone();
    if cfg.mixing != Mixing::None {
        // partner from another source when there is one, else from the same
        let pd = if sources.len() > 1 {
            (d + 1 + rng.random_range(0..sources.len() - 1)) % sources.len()
        } else {
            d
        };
        let partner = &sources[pd][rng.random_range(0..sources[pd].len())];
        cloud = match cfg.mixing {
            Mixing::Mix3d => mix3d(&cloud, partner),
            Mixing::PointCutMix => point_cut_mix(&cloud, partner, cfg.augment.patch_extent, &mut rng),
            Mixing::None => unreachable!(),
        };
    }
    if cfg.transform {
        cloud = random_transform(&cloud, &cfg.augment, &mut rng);
    }
    cloud
}

/// Loss and summed-into-`acc` gradients for one prepared scan.
pub fn sample_step(
    params: &ModelParams,
    cloud: &PointCloud,
    voxel_size: f64,
    bev_cfg: &BevProjectionConfig,
    weights: [f64; 2],
    acc: &mut Gradients,
) -> Result<(LossBreakdown, Vec<(String, crate::net::tape::BnBatchStats)>)> {
    let grid = voxelize(cloud, voxel_size)?;
    let labels = grid.labels();
    let mut out = forward(params, &grid, bev_cfg, ForwardOptions::train())?;
    let bev_labels = bev_targets(&grid, &out)?;
    let loss = total_loss(&out, &labels, bev_labels.as_ref(), weights)?;
    let grads = out.backward(loss.grads.clone())?;
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok((loss, std::mem::take(&mut out.bn_stats)))
}

/// Trains a freshly initialised model (seeded by `cfg.seed`).
pub fn train(
    model_cfg: &ModelConfig,
    sources: &[Vec<PointCloud>],
    cfg: &TrainConfig,
    bev_cfg: &BevProjectionConfig,
) -> Result<TrainOutput> {
    let params = ModelParams::init(model_cfg, seed::derive(cfg.seed, "init"))?;
    train_from(params, sources, cfg, bev_cfg)
}

/// Trains starting from `params`. Unlabeled scans are skipped.
pub fn train_from(
    mut params: ModelParams,
    sources: &[Vec<PointCloud>],
    cfg: &TrainConfig,
    bev_cfg: &BevProjectionConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    bev_cfg.validate()?;
    let sources: Vec<Vec<PointCloud>> = sources
        .iter()
        .map(|s| s.iter().filter(|c| c.labels.is_some()).cloned().collect::<Vec<_>>())
        .filter(|s: &Vec<PointCloud>| !s.is_empty())
        .collect();
    if sources.is_empty() {
        return Err(Error::validation("no labeled scans to train on"));
    }
    let k = params.config.num_classes;
    for (i, c) in sources.iter().flatten().enumerate() {
        c.validate(k).map_err(|e| Error::validation(format!("training scan {i}: {e}")))?;
    }

    let sizes: Vec<usize> = sources.iter().map(Vec::len).collect();
    let mut adam = Adam::new(cfg);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&sizes, cfg.batch_size, cfg.seed, epoch) {
            let mut acc = Gradients::new();
            let mut stats = Vec::new();
            let (mut l3d, mut lbev, mut ltot) = (0.0, 0.0, 0.0);
            for &(d, i) in &batch {
                let cloud = prepare_sample(&sources, d, i, cfg, epoch);
                let sample_bev = bev_cfg.with_seed(seed::derive(cfg.seed, &format!("collision/{epoch}/{d}/{i}")));
                let (loss, s) = sample_step(&params, &cloud, cfg.voxel_size, &sample_bev, cfg.loss_weights, &mut acc)?;
                l3d += loss.l3d;
                lbev += loss.lbev;
                ltot += loss.ltot;
                stats.extend(s);
            }
            let n = batch.len() as f64;
            for g in acc.values_mut() {
                g.iter_mut().for_each(|v| *v /= n);
            }
            adam.step(&mut params, &acc);
            params.update_running_stats(&stats);
            log.push(LogRow {
                epoch,
                step,
                l3d: l3d / n,
                lbev: lbev / n,
                ltot: ltot / n,
            });
            step += 1;
        }
    }
    Ok(TrainOutput { params, log })
}
