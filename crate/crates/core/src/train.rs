//! Minibatch training with in-batch mixup and the combined objective.
//!
//! Each sample of a minibatch is differentiated on its own tape (in
//! parallel when the `parallel` feature is on); per-sample gradients are
//! summed in batch order, so results do not depend on thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classnet::{spatial_class_probability, ClassNet, ClassNetConfig, ClassNetError, ResponseMap};
use crate::diffcore::{AdamConfig, AdamState, Checkpoint, CheckpointError, DiffError, Tape, Tensor};
use crate::mixaug::{augment_view, mixup, sample_lambda, AugmentConfig, AugmentError};
use crate::objective::{
    classification_loss, concentration_loss, entropy_loss, total_loss, total_loss_on_tape, LossBreakdown, LossWeights,
    ObjectiveError,
};
use crate::parallel;
use crate::synthdata::LabeledImage;

const SHUFFLE_DOMAIN: u64 = 1;
const STEP_DOMAIN: u64 = 2;
const AUGMENT_DOMAIN: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ClassNetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 − t/T)^0.9` for step `t` of `T`.
    #[default]
    Poly,
}

const POLY_POWER: f64 = 0.9;

impl LrSchedule {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Poly if total == 0 => 1.0,
            Self::Poly => (1.0 - (step as f64 / total as f64).min(1.0)).powf(POLY_POWER),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "poly" => Ok(Self::Poly),
            other => Err(format!("unknown learning-rate schedule `{other}` (constant, poly)")),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Poly => "poly",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `learning_rate` here is the initial rate; `schedule` scales it per step.
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    /// When false the mixing coefficient is pinned to 1 (no mixing).
    pub mixup: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            schedule: LrSchedule::default(),
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            mixup: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.weights.entropy < 0.0 || self.weights.concentration < 0.0 {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        if self.adam.learning_rate.is_nan() || self.adam.learning_rate <= 0.0 || self.adam.weight_decay < 0.0 {
            return Err(TrainError::Config(
                "learning rate must be positive, weight decay non-negative".into(),
            ));
        }
        self.augment.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lambda: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,cls,ent,con,total,lambda_mix";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.step, l.cls, l.ent, l.con, l.total, self.lambda
        )
    }
}

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Loss breakdown and parameter gradients for one (mixed) sample.
pub fn sample_gradients(
    net: &ClassNet,
    image: &[f64],
    label: &[f64],
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.leaf(&Tensor::new(&net.input_shape(), image.to_vec())?);
    let out = net.forward(&mut tape, &bound, x)?;
    let cls = classification_loss(&mut tape, out.logits, label)?;
    let probs = spatial_class_probability(&mut tape, out.cam)?;
    let ent = entropy_loss(&mut tape, probs)?;
    let valid = ResponseMap::valid_from_label(label);
    let con = if valid.is_empty() {
        tape.constant(&[], vec![0.0])?
    } else {
        concentration_loss(&mut tape, out.cam, &valid)?
    };
    let total = total_loss_on_tape(&mut tape, cls, ent, con, weights)?;
    let breakdown = total_loss(tape.item(cls), tape.item(ent), tape.item(con), weights);
    tape.backward(total)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    Ok((breakdown, grads))
}

#[derive(Debug, Clone)]
pub struct Trainer {
    net: ClassNet,
    adam: AdamState,
    config: TrainConfig,
    epoch: usize,
    global_step: u64,
    /// Run length in steps, fixed by the first call to [`Trainer::train_epoch`].
    total_steps: u64,
}

impl Trainer {
    pub fn new(net: ClassNet, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(net.params(), config.adam);
        Ok(Self {
            net,
            adam,
            config,
            epoch: 0,
            global_step: 0,
            total_steps: 0,
        })
    }

    /// Restores network, optimizer and position from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(
        ck: &Checkpoint,
        net_config: ClassNetConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let net = ClassNet::from_params(net_config, ck.params())?;
        let adam = ck
            .adam_state(net.params())?
            .ok_or_else(|| CheckpointError::Malformed("no optimizer state".into()))?;
        let epoch = ck.train_value("epoch").unwrap_or(0.0) as usize;
        let global_step = ck.train_value("step").unwrap_or(0.0) as u64;
        Ok(Self {
            net,
            adam,
            config,
            epoch,
            global_step,
            total_steps: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_params(self.net.params(), Some(&self.adam));
        ck.set_train_value("epoch", self.epoch as f64);
        ck.set_train_value("step", self.global_step as f64);
        ck
    }

    pub fn net(&self) -> &ClassNet {
        &self.net
    }

    pub fn into_net(self) -> ClassNet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Partial final batches are dropped.
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.config.batch_size
    }

    /// One pass over `data` in a seed-determined order.
    pub fn train_epoch(&mut self, data: &[LabeledImage]) -> Result<Vec<StepRecord>, TrainError> {
        let steps = self.steps_per_epoch(data.len());
        if steps == 0 {
            return Err(TrainError::Config(format!(
                "{} samples cannot fill a batch of {}",
                data.len(),
                self.config.batch_size
            )));
        }
        self.total_steps = (self.config.epochs * steps) as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, SHUFFLE_DOMAIN, self.epoch as u64));
        let b = self.config.batch_size;
        let mut records = Vec::with_capacity(steps);
        for chunk in order.chunks_exact(b) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            records.push(self.step(&batch)?);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// One optimizer step on a minibatch: augment each source, mix with a
    /// shuffled partner from the same batch, average the per-sample gradients.
    pub fn step(&mut self, batch: &[&LabeledImage]) -> Result<StepRecord, TrainError> {
        let step = self.global_step;
        let mut rng = stream_rng(self.config.seed, STEP_DOMAIN, step);
        let lambda = if self.config.mixup {
            sample_lambda(self.config.augment.alpha, &mut rng)?
        } else {
            1.0
        };
        let mut partner: Vec<usize> = (0..batch.len()).collect();
        partner.shuffle(&mut rng);

        let augment = &self.config.augment;
        let augmented = parallel::map_indexed(batch.len(), |i| {
            let mut r = stream_rng(augment.seed, AUGMENT_DOMAIN, (step << 20) | i as u64);
            augment_view(batch[i], augment, &mut r)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

        let net = &self.net;
        let weights = self.config.weights;
        let mixup_on = self.config.mixup;
        let results = parallel::map_indexed(batch.len(), |i| -> Result<_, TrainError> {
            let mixed = if mixup_on {
                mixup(&augmented[i], &augmented[partner[i]], lambda)?
            } else {
                mixup(&augmented[i], &augmented[i], 1.0)?
            };
            sample_gradients(net, &mixed.image, &mixed.label, weights)
        });

        let scale = 1.0 / batch.len() as f64;
        let mut sums = LossBreakdown::default();
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let (loss, g) = r?;
            sums.cls += loss.cls;
            sums.ent += loss.ent;
            sums.con += loss.con;
            sums.total += loss.total;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let loss = LossBreakdown {
            cls: sums.cls * scale,
            ent: sums.ent * scale,
            con: sums.con * scale,
            total: sums.total * scale,
        };
        let grads = grads.unwrap_or_default();
        let finite = loss.total.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(TrainError::NonFinite { step });
        }
        let params = self.net.params_mut();
        params.zero_grad();
        for ((_, t), g) in params.iter_mut().zip(grads) {
            let scaled: Vec<f64> = g.into_iter().map(|v| v * scale).collect();
            t.accumulate_grad(&scaled)?;
        }
        self.adam.config.learning_rate =
            self.config.adam.learning_rate * self.config.schedule.factor(step, self.total_steps);
        self.adam.step(params)?;
        self.global_step += 1;
        Ok(StepRecord { step, loss, lambda })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, DatasetConfig};

    fn tiny() -> (ClassNetConfig, Vec<LabeledImage>) {
        let net_cfg = ClassNetConfig {
            input_extent: 16,
            channels: vec![4, 8],
            strides: vec![2, 2],
            classes: 3,
            ..ClassNetConfig::default()
        };
        let data_cfg = DatasetConfig {
            classes: 3,
            extent: 16,
            size_min: 0.4,
            size_max: 0.6,
            seed: 5,
            ..DatasetConfig::default()
        };
        (net_cfg, generate_split(&data_cfg, 0, 20).unwrap().training_view())
    }

    fn cfg(batch: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn drops_partial_batch() {
        let (net_cfg, data) = tiny();
        let mut t = Trainer::new(ClassNet::new(net_cfg, 1).unwrap(), cfg(6)).unwrap();
        let rec = t.train_epoch(&data).unwrap();
        assert_eq!(rec.len(), 3);
        assert_eq!(t.adam().step_count(), 3);
        assert_eq!(rec.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let (net_cfg, data) = tiny();
        let mut t = Trainer::new(ClassNet::new(net_cfg, 1).unwrap(), cfg(64)).unwrap();
        assert!(matches!(t.train_epoch(&data), Err(TrainError::Config(_))));
    }

    #[test]
    fn no_mixup_pins_lambda() {
        let (net_cfg, data) = tiny();
        let c = TrainConfig {
            mixup: false,
            weights: LossWeights {
                entropy: 0.0,
                concentration: 0.0,
            },
            ..cfg(5)
        };
        let mut t = Trainer::new(ClassNet::new(net_cfg, 1).unwrap(), c).unwrap();
        let rec = t.train_epoch(&data).unwrap();
        assert!(rec.iter().all(|r| r.lambda == 1.0 && r.loss.total == r.loss.cls));
    }

    #[test]
    fn breakdown_total_is_consistent() {
        let (net_cfg, data) = tiny();
        let net = ClassNet::new(net_cfg, 2).unwrap();
        let (b, grads) = sample_gradients(&net, &data[0].image, &data[0].label, LossWeights::default()).unwrap();
        assert_eq!(b.total, b.cls + 0.02 * b.ent + 2e-4 * b.con);
        assert_eq!(grads.len(), net.params().len());
        assert!(b.ent >= 0.0 && b.ent <= 3f64.ln() + 1e-12);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let (net_cfg, data) = tiny();
        let mut straight = Trainer::new(ClassNet::new(net_cfg.clone(), 1).unwrap(), cfg(5)).unwrap();
        straight.train_epoch(&data).unwrap();
        let ck = Checkpoint::from_bytes(&straight.checkpoint().to_bytes()).unwrap();
        let tail = straight.train_epoch(&data).unwrap();

        let mut resumed = Trainer::from_checkpoint(&ck, net_cfg, cfg(5)).unwrap();
        assert_eq!(resumed.epoch(), 1);
        let again = resumed.train_epoch(&data).unwrap();
        assert_eq!(tail, again);
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }
}
