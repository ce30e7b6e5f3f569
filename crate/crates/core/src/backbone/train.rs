use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{network_input, BackboneBundle, ChannelNorm};
use crate::dataset::{BatchIter, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const STD_FLOOR: f32 = 1e-6;
/// The learning rate is multiplied by `LR_DECAY_FACTOR` for the final
/// `1 − LR_DECAY_AT` fraction of a run's steps.
const LR_DECAY_AT: f64 = 0.95;
const LR_DECAY_FACTOR: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherMode {
    /// Fixed random patch network.
    FrozenRandom,
    /// Teacher distilled from a pretrained feature extractor. Not available
    /// without external weights.
    Distilled,
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherMode::FrozenRandom => "frozen_random",
            TeacherMode::Distilled => "distilled",
        })
    }
}

impl FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen_random" => Ok(TeacherMode::FrozenRandom),
            "distilled" => Ok(TeacherMode::Distilled),
            other => Err(Error::Config(format!("unknown teacher mode '{other}'"))),
        }
    }
}

/// Update rule for student and autoencoder parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum.
    Sgd { momentum: f32 },
    Adam {
        beta1: f32,
        beta2: f32,
        epsilon: f32,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Optimizer {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}: momentum and betas must lie in [0, 1), epsilon must be positive"
            )))
        }
    }
}

/// Per-parameter optimizer state for one network.
struct OptState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    t: i32,
}

impl OptState {
    fn new(shapes: &[Vec<f32>]) -> Self {
        Self {
            first: shapes.iter().map(|g| vec![0.0; g.len()]).collect(),
            second: shapes.iter().map(|g| vec![0.0; g.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, opt: Optimizer, lr: f32, params: Vec<&mut Vec<f32>>, grads: &[Vec<f32>]) {
        self.t += 1;
        match opt {
            Optimizer::Sgd { momentum } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *pi -= lr * *vi;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pi, &gi), mi), vi) in
                        p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHParams {
    pub steps: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
    pub teacher_mode: TeacherMode,
}

impl Default for TrainHParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 3e-3,
            optimizer: Optimizer::default(),
            batch_size: 8,
            seed: 0,
            teacher_mode: TeacherMode::FrozenRandom,
        }
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    /// Student former half vs teacher.
    pub student_teacher: f64,
    /// Autoencoder vs teacher.
    pub autoencoder: f64,
    /// Student latter half vs autoencoder.
    pub student_autoencoder: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.student_teacher + self.autoencoder + self.student_autoencoder
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,student_teacher,autoencoder,student_autoencoder\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                r.total(),
                r.student_teacher,
                r.autoencoder,
                r.student_autoencoder
            ));
        }
        s
    }

    /// Means of consecutive non-overlapping windows of total loss.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.records
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(LossRecord::total).sum::<f64>() / window as f64)
            .collect()
    }
}

fn mse_and_grad(pred: &FeatureMap, target: &FeatureMap, scale: f32) -> (f64, FeatureMap) {
    let n = pred.as_slice().len() as f32;
    let mut grad = FeatureMap::zeros(pred.channels(), pred.height(), pred.width());
    let mut loss = 0.0f64;
    for ((g, &p), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let d = p - t;
        loss += f64::from(d) * f64::from(d);
        *g = 2.0 * d / n * scale;
    }
    (loss / f64::from(n), grad)
}

impl BackboneBundle {
    /// Fits the per-channel standardization of the teacher output on
    /// `samples`, replacing any existing one. [`train`] does this on its
    /// first run.
    pub fn fit_teacher_norm(&mut self, samples: &[ImageSample]) {
        self.teacher_norm = Some(teacher_norm_for(self, samples));
    }
}

fn teacher_norm_for(bundle: &BackboneBundle, samples: &[ImageSample]) -> ChannelNorm {
    let c = bundle.arch.out_channels;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0.0f64;
    for s in samples {
        let t = bundle.teacher.forward(&network_input(&s.pixels));
        for ch in 0..c {
            for &v in t.channel(ch) {
                sum[ch] += f64::from(v);
                sq[ch] += f64::from(v) * f64::from(v);
            }
        }
        count += t.plane_len() as f64;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / count) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / count;
            ((q / count - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR)
        })
        .collect();
    ChannelNorm { mean, std }
}

/// Trains student and autoencoder on normal images; the teacher is fixed.
///
/// A bundle that was trained before resumes: its teacher normalization is
/// reused and the batch stream continues where it stopped. Optimizer state restarts
/// from zero.
pub fn train(
    mut bundle: BackboneBundle,
    trainset: &[ImageSample],
    hparams: &TrainHParams,
) -> Result<(BackboneBundle, LossTrace)> {
    if hparams.steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    if !(hparams.learning_rate > 0.0) || !hparams.learning_rate.is_finite() {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    hparams.optimizer.validate()?;
    if hparams.teacher_mode == TeacherMode::Distilled {
        return Err(Error::Config(
            "teacher_mode=distilled needs pretrained extractor weights, which this build cannot load; use frozen_random"
                .into(),
        ));
    }
    if let Some(bad) = trainset.iter().find(|s| s.is_anomalous()) {
        return Err(Error::Contract(format!(
            "training set must contain only normal images, {} is {}",
            bad.id, bad.label
        )));
    }
    if let Some(bad) = trainset
        .iter()
        .find(|s| s.pixels.shape() != bundle.arch.input_shape())
    {
        return Err(Error::Input(format!(
            "training image {} has shape {:?}, networks expect {:?}",
            bad.id,
            bad.pixels.shape(),
            bundle.arch.input_shape()
        )));
    }
    let mut batches = BatchIter::from_samples(trainset, hparams.batch_size, hparams.seed)?;

    if bundle.teacher_norm.is_none() {
        bundle.fit_teacher_norm(trainset);
    }
    let targets: HashMap<&str, FeatureMap> = trainset
        .iter()
        .map(|s| {
            (
                s.id.as_str(),
                bundle.teacher_output(&network_input(&s.pixels)),
            )
        })
        .collect();

    for _ in 0..bundle.steps_completed {
        batches.next();
    }

    let c = bundle.arch.out_channels;
    let mut opt_student = OptState::new(&bundle.student.zero_grads());
    let mut opt_ae = OptState::new(&bundle.autoencoder.zero_grads());
    let mut trace = LossTrace::default();

    for local_step in 0..hparams.steps {
        let step = bundle.steps_completed;
        let batch = batches.next().expect("batch stream is infinite");
        let scale = 1.0 / batch.len() as f32;
        let mut g_student = bundle.student.zero_grads();
        let mut g_ae = bundle.autoencoder.zero_grads();
        let mut rec = LossRecord {
            step,
            student_teacher: 0.0,
            autoencoder: 0.0,
            student_autoencoder: 0.0,
        };
        for sample in &batch {
            let x = network_input(&sample.pixels);
            let target = &targets[sample.id.as_str()];

            let ae_trace = bundle.autoencoder.forward_trace(&x);
            let ae_out = ae_trace.last().unwrap();
            let (l_ae, g_ae_out) = mse_and_grad(ae_out, target, scale);
            bundle.autoencoder.backward(&ae_trace, g_ae_out, &mut g_ae);

            let st_trace = bundle.student.forward_trace(&x);
            let st_out = st_trace.last().unwrap();
            let former = st_out.slice_channels(0, c);
            let latter = st_out.slice_channels(c, 2 * c);
            let (l_st, g_former) = mse_and_grad(&former, target, scale);
            // The autoencoder output is a fixed target for the latter half.
            let (l_sae, g_latter) = mse_and_grad(&latter, ae_out, scale);
            let g_st_out = FeatureMap::concat_channels(&[&g_former, &g_latter])?;
            bundle.student.backward(&st_trace, g_st_out, &mut g_student);

            rec.student_teacher += l_st * f64::from(scale);
            rec.autoencoder += l_ae * f64::from(scale);
            rec.student_autoencoder += l_sae * f64::from(scale);
        }
        if !rec.total().is_finite() {
            return Err(Error::Training {
                step: local_step,
                msg: format!("loss became {}", rec.total()),
            });
        }
        let mut lr = hparams.learning_rate;
        if local_step as f64 >= LR_DECAY_AT * hparams.steps as f64 {
            lr *= LR_DECAY_FACTOR;
        }
        let opt = hparams.optimizer;
        opt_student.step(opt, lr, bundle.student.params_mut(), &g_student);
        opt_ae.step(opt, lr, bundle.autoencoder.params_mut(), &g_ae);
        trace.records.push(rec);
        bundle.steps_completed += 1;
    }
    let healthy = bundle
        .student
        .params()
        .iter()
        .chain(bundle.autoencoder.params().iter())
        .all(|p| p.iter().all(|v| v.is_finite()));
    if !healthy {
        return Err(Error::Training {
            step: hparams.steps,
            msg: "non-finite parameters after the last update".into(),
        });
    }
    bundle.trained = true;
    Ok((bundle, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_networks, Arch, SizeTag};
    use crate::dataset::{generate_synthetic, DatasetBundle, Split, SynthConfig};

    fn data() -> DatasetBundle {
        generate_synthetic(&SynthConfig {
            image_size: (32, 32),
            disc_radius: 4,
            ..SynthConfig::with_counts(12, 4, 2, 2, 2, 1)
        })
        .unwrap()
    }

    fn hp(steps: usize) -> TrainHParams {
        TrainHParams {
            steps,
            batch_size: 4,
            seed: 3,
            ..TrainHParams::default()
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let b = init_networks(Arch::for_input(32, 32, 1, SizeTag::S), 0).unwrap();
        let d = data();
        assert!(matches!(
            train(b, d.split(Split::Train).unwrap(), &hp(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn anomalous_training_sample_rejected() {
        let b = init_networks(Arch::for_input(32, 32, 1, SizeTag::S), 0).unwrap();
        let d = data();
        assert!(matches!(
            train(b, d.split(Split::Test).unwrap(), &hp(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let b = init_networks(Arch::for_input(32, 32, 1, SizeTag::S), 0).unwrap();
        let d = data();
        let mut h = hp(50);
        h.learning_rate = 1e6;
        match train(b, d.split(Split::Train).unwrap(), &h) {
            Err(Error::Training { step, .. }) => assert!(step <= 50),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn teacher_untouched_and_deterministic() {
        let d = data();
        let train_set = d.split(Split::Train).unwrap();
        let b = init_networks(Arch::for_input(32, 32, 1, SizeTag::S), 5).unwrap();
        let teacher_before = b.teacher.clone();
        let (t1, trace1) = train(b.clone(), train_set, &hp(6)).unwrap();
        let (t2, trace2) = train(b, train_set, &hp(6)).unwrap();
        assert_eq!(t1.teacher, teacher_before);
        assert_eq!(t1, t2);
        assert_eq!(trace1, trace2);
        assert!(t1.is_trained());
        assert_eq!(t1.steps_completed(), 6);
        assert_eq!(trace1.records.len(), 6);
    }

    #[test]
    fn distilled_mode_is_refused() {
        let d = data();
        let b = init_networks(Arch::for_input(32, 32, 1, SizeTag::S), 0).unwrap();
        let mut h = hp(1);
        h.teacher_mode = TeacherMode::Distilled;
        assert!(matches!(
            train(b, d.split(Split::Train).unwrap(), &h),
            Err(Error::Config(_))
        ));
    }
}
