use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ArBins;
use crate::geometry::{delta_decode, delta_encode, rotated_iou, wrap_angle, RotatedBox};
use crate::head::{smooth_l1, smooth_l1_grad, SMOOTH_L1_BETA};
use crate::nn::Module;
use crate::strip::module::ModuleDesign;
use crate::synth::scene::{generate_scene, SceneConfig};
use crate::synth::toy::{loss_and_grads, update_norms, Sgd, ToyConfig, ToyNet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Strip,
    SquareMatched,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Strip => "strip",
            Arm::SquareMatched => "square-matched",
        }
    }
}

/// Smallest odd side whose square kernel has at least the weights of a 5×5 conv plus two strips of length `k`.
pub fn matched_square_side(k: usize) -> usize {
    let target = 2 * k + 25;
    let mut s = 1;
    while s * s < target {
        s += 2;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Arms compared as `(a, b)`; the report deltas are `a - b`.
    pub arms: (Arm, Arm),
    /// Build the strip arm as the square arm (A/A control).
    pub control: bool,
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Aspect-ratio bin edges, last one may be `inf`.
    #[serde(with = "edges")]
    pub bins: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Momentum of the running normalization statistics.
    pub norm_momentum: f64,
    pub scene: SceneConfig,
    pub toy: ToyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arms: (Arm::Strip, Arm::SquareMatched),
            control: false,
            steps: 3000,
            lr: 0.01,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            batch_size: 16,
            train_size: 4096,
            test_size: 1000,
            bins: vec![1.0, 2.0, 5.0, f64::INFINITY],
            seeds: vec![0, 1, 2],
            norm_momentum: 0.1,
            scene: SceneConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The A/A variant of this configuration.
    pub fn control(&self) -> Self {
        Self {
            control: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        ArBins::new(self.bins.clone())?;
        if self.batch_size < 2 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("batch size must be at least 2 and data sets non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be finite and momentum in [0, 1)".into()));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::Config("norm momentum must be in (0, 1]".into()));
        }
        if self.toy.strip_len % 2 == 0 {
            return Err(Error::Config("strip length must be odd".into()));
        }
        let s = self.scene.image_size;
        if s % self.toy.stem_stride != 0 || s / self.toy.stem_stride < 2 {
            return Err(Error::Config(format!(
                "image size {s} must be a multiple of the stem stride {} with at least 2 cells",
                self.toy.stem_stride
            )));
        }
        Ok(())
    }

    pub fn design(&self, arm: Arm) -> ModuleDesign {
        match (arm, self.control) {
            (Arm::Strip, false) => ModuleDesign::Sequential,
            _ => ModuleDesign::SingleSquare {
                side: matched_square_side(self.toy.strip_len),
            },
        }
    }

    /// Canonical anchor the network regresses against.
    pub fn anchor(&self) -> RotatedBox {
        let s = self.scene.image_size as f64;
        RotatedBox {
            cx: s / 2.0,
            cy: s / 2.0,
            w: 0.375 * s,
            h: 0.375 * s,
            theta: 0.0,
        }
    }
}

/// Bin edges in JSON, with `"inf"` standing in for infinity.
mod edges {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Edge {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| if x.is_finite() { Edge::Num(x) } else { Edge::Text("inf".into()) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Edge>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                Edge::Num(x) => Ok(x),
                Edge::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Edge::Text(t) => Err(serde::de::Error::custom(format!("bad bin edge {t:?}"))),
            })
            .collect()
    }
}

/// One labelled scene with its regression target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub gt: RotatedBox,
    pub target: [f64; 5],
}

pub fn generate_samples(cfg: &ExperimentConfig, seed: u64, start: usize, count: usize) -> Result<Vec<Sample>> {
    let scene = SceneConfig {
        seed,
        ..cfg.scene.clone()
    };
    let anchor = cfg.anchor();
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let (image, gt) = generate_scene(&scene, i as u64)?;
            let target = delta_encode(&anchor, &gt)?;
            Ok(Sample { image, gt, target })
        })
        .collect()
}

/// Mean smooth-L1 over the five deltas, angle residual wrapped to `[-π/2, π/2)`.
pub fn regression_loss(pred: &Tensor, targets: &[[f64; 5]]) -> Result<(f64, Tensor)> {
    let n = targets.len();
    if pred.len() != n * 5 {
        return Err(Error::Shape(format!("{} predictions for {n} targets", pred.len())));
    }
    let mut grad = Tensor::zeros(pred.dims());
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for (i, t) in targets.iter().enumerate() {
        for j in 0..5 {
            let p = pred.data()[i * 5 + j];
            let r = if j == 4 { wrap_angle(p - t[j], -FRAC_PI_2, PI) } else { p - t[j] };
            total += smooth_l1(r, SMOOTH_L1_BETA);
            grad.data_mut()[i * 5 + j] = smooth_l1_grad(r, SMOOTH_L1_BETA) * scale;
        }
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss over each pass through the training set.
    pub epoch_losses: Vec<f64>,
}

/// Trains `net` in place on `data`; batches are drawn without replacement per epoch from `seed`.
pub fn train_toy_regressor(
    cfg: &ExperimentConfig,
    net: &mut ToyNet,
    data: &[Sample],
    seed: u64,
) -> Result<TrainOutcome> {
    let bs = cfg.batch_size.min(data.len());
    if bs < 2 {
        return Err(Error::Config("training needs at least two samples per batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut epoch_losses = Vec::new();
    let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
    let initial_loss = batch_loss(net, data, &order[..bs])?;
    let mut last = initial_loss;
    for step in 0..cfg.steps {
        if cursor + bs > data.len() {
            if epoch_n > 0 {
                epoch_losses.push(epoch_sum / epoch_n as f64);
                (epoch_sum, epoch_n) = (0.0, 0);
            }
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let images: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
        let targets: Vec<[f64; 5]> = idx.iter().map(|&i| data[i].target).collect();
        let batch = net.prepare(&images)?;
        let r = loss_and_grads(net, &batch, &targets, regression_loss)?;
        if !r.loss.is_finite() || r.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step, loss: r.loss });
        }
        opt.lr = cfg.lr_schedule.rate(cfg.lr, step, cfg.steps);
        opt.step(net, &r.grads)?;
        update_norms(net, &r.stats, cfg.norm_momentum);
        epoch_sum += r.loss;
        epoch_n += 1;
        last = r.loss;
    }
    if epoch_n > 0 {
        epoch_losses.push(epoch_sum / epoch_n as f64);
    }
    Ok(TrainOutcome {
        initial_loss,
        final_loss: last,
        epoch_losses,
    })
}

fn batch_loss(net: &ToyNet, data: &[Sample], idx: &[usize]) -> Result<f64> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
    let targets: Vec<[f64; 5]> = idx.iter().map(|&i| data[i].target).collect();
    let r = loss_and_grads(net, &net.prepare(&images)?, &targets, regression_loss)?;
    Ok(r.loss)
}

/// Rotated IoU and absolute angle error (degrees, modulo 180) of every test sample.
pub fn evaluate_toy(cfg: &ExperimentConfig, net: &ToyNet, test: &[Sample]) -> Result<Vec<(f64, f64)>> {
    let anchor = cfg.anchor();
    let chunks: Vec<Vec<(f64, f64)>> = test
        .par_chunks(64)
        .map(|chunk| {
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let pred = net.predict(&net.prepare(&images)?)?;
            chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let d: [f64; 5] = std::array::from_fn(|j| pred.data()[i * 5 + j].clamp(-10.0, 10.0));
                    let b = delta_decode(&anchor, &d)?;
                    let err = wrap_angle(b.theta - s.gt.theta, -FRAC_PI_2, PI).abs().to_degrees();
                    Ok((rotated_iou(&b, &s.gt), err))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub label: String,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_iou: Option<f64>,
    pub mean_angle_err_deg: Option<f64>,
}

fn bin_stats(bins: &ArBins, test: &[Sample], scores: &[(f64, f64)]) -> Vec<BinStat> {
    let mut acc = vec![(0usize, 0.0, 0.0); bins.len()];
    for (s, (iou, err)) in test.iter().zip(scores) {
        if let Some(b) = bins.bin_of(s.gt.aspect_ratio()) {
            acc[b].0 += 1;
            acc[b].1 += iou;
            acc[b].2 += err;
        }
    }
    acc.iter()
        .enumerate()
        .map(|(b, &(n, iou, err))| BinStat {
            label: bins.label(b),
            count: n,
            mean_iou: (n > 0).then(|| iou / n as f64),
            mean_angle_err_deg: (n > 0).then(|| err / n as f64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train: TrainOutcome,
    pub bins: Vec<BinStat>,
    pub overall_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub design: ModuleDesign,
    pub params: usize,
    pub wall_clock_s: f64,
    pub runs: Vec<SeedRun>,
    /// Per-bin means over seeds.
    pub bins: Vec<BinStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDelta {
    pub label: String,
    /// `a - b` mean IoU for each seed; `None` where a bin is empty.
    pub per_seed: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    /// Relative parameter difference `|pa - pb| / max(pa, pb)`.
    pub param_gap: f64,
    pub iou_deltas: Vec<BinDelta>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn compare_square_vs_strip(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let bins = ArBins::new(cfg.bins.clone())?;
    let arms = [cfg.arms.0, cfg.arms.1];
    let params: Vec<usize> = arms
        .iter()
        .map(|&a| ToyNet::new(&cfg.toy, cfg.design(a), 0).map(|n| n.param_count()))
        .collect::<Result<_>>()?;
    let param_gap = params[0].abs_diff(params[1]) as f64 / params[0].max(params[1]) as f64;
    if param_gap > 0.05 {
        return Err(Error::Config(format!(
            "arms differ by {:.1}% in parameter count ({} vs {})",
            param_gap * 100.0,
            params[0],
            params[1]
        )));
    }
    let mut reports: Vec<ArmReport> = arms
        .iter()
        .zip(&params)
        .map(|(&arm, &p)| ArmReport {
            arm,
            design: cfg.design(arm),
            params: p,
            wall_clock_s: 0.0,
            runs: Vec::new(),
            bins: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let train = generate_samples(cfg, seed, 0, cfg.train_size)?;
        let test = generate_samples(cfg, seed, cfg.train_size, cfg.test_size)?;
        for r in reports.iter_mut() {
            let start = Instant::now();
            let mut net = ToyNet::new(&cfg.toy, r.design, seed)?;
            let outcome = train_toy_regressor(cfg, &mut net, &train, seed)?;
            let scores = evaluate_toy(cfg, &net, &test)?;
            r.wall_clock_s += start.elapsed().as_secs_f64();
            r.runs.push(SeedRun {
                seed,
                train: outcome,
                bins: bin_stats(&bins, &test, &scores),
                overall_iou: scores.iter().map(|s| s.0).sum::<f64>() / scores.len() as f64,
            });
        }
    }
    for r in reports.iter_mut() {
        r.bins = (0..bins.len())
            .map(|b| BinStat {
                label: bins.label(b),
                count: r.runs.iter().map(|s| s.bins[b].count).sum(),
                mean_iou: mean_opt(r.runs.iter().map(|s| s.bins[b].mean_iou)),
                mean_angle_err_deg: mean_opt(r.runs.iter().map(|s| s.bins[b].mean_angle_err_deg)),
            })
            .collect();
    }
    let iou_deltas = (0..bins.len())
        .map(|b| {
            let per_seed: Vec<Option<f64>> = reports[0]
                .runs
                .iter()
                .zip(&reports[1].runs)
                .map(|(x, y)| Some(x.bins[b].mean_iou? - y.bins[b].mean_iou?))
                .collect();
            BinDelta {
                label: bins.label(b),
                mean: mean_opt(per_seed.iter().copied()),
                per_seed,
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        arms: reports,
        param_gap,
        iou_deltas,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl ExperimentReport {
    pub fn delta_for(&self, label: &str) -> Option<&BinDelta> {
        self.iou_deltas.iter().find(|d| d.label == label)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let (a, b) = (&self.arms[0], &self.arms[1]);
        let _ = writeln!(
            s,
            "arms: {} ({} params, {:.1}s) vs {} ({} params, {:.1}s); seeds {:?}{}",
            a.arm.name(),
            a.params,
            a.wall_clock_s,
            b.arm.name(),
            b.params,
            b.wall_clock_s,
            self.seeds,
            if self.config.control { "; A/A control" } else { "" }
        );
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "AR bin", "n", "iou_a", "iou_b", "delta", "ang_a", "ang_b"
        );
        for ((x, y), d) in a.bins.iter().zip(&b.bins).zip(&self.iou_deltas) {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
                x.label,
                x.count,
                fmt_opt(x.mean_iou, 4),
                fmt_opt(y.mean_iou, 4),
                fmt_opt(d.mean, 4),
                fmt_opt(x.mean_angle_err_deg, 2),
                fmt_opt(y.mean_angle_err_deg, 2)
            );
        }
        s
    }

    /// One row per arm, seed and bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,design_params,seed,bin,count,mean_iou,mean_angle_err_deg\n");
        for a in &self.arms {
            for r in &a.runs {
                for b in &r.bins {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{}",
                        a.arm.name(),
                        a.params,
                        r.seed,
                        b.label,
                        b.count,
                        b.mean_iou.map_or(String::new(), |v| v.to_string()),
                        b.mean_angle_err_deg.map_or(String::new(), |v| v.to_string())
                    );
                }
            }
        }
        s
    }
}
