use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::blocks::{ForwardOptions, SstModel};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::config::TrainConfig;
use super::data::{PairSampler, SyntheticSet};
use super::optim::{Adam, StepSchedule};

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(pred.sub(target)?.map(|v| v.abs()).mean())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// Loss of the batch before this step's update.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// `step,loss,lr` rows.
pub fn loss_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in records {
        writeln!(s, "{},{},{}", r.step, r.loss, r.lr).expect("write to string");
    }
    s
}

/// Forward, L1 loss, backward and one Adam update. Returns the loss.
pub fn train_step<T: Scalar>(
    model: &mut SstModel<T>,
    opt: &mut Adam<T>,
    lr_img: &Tensor<T>,
    hr_img: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.constant(lr_img.clone());
    let y = model.forward(&mut tape, &bound, x, &ForwardOptions::default())?;
    let t = tape.constant(hr_img.clone());
    let loss = tape.l1_loss(y, t)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    opt.step(&mut model.params, grads.params(), lr)?;
    Ok(value)
}

/// Trains `model` on random patch batches from `data`. Runs are bitwise
/// reproducible for a fixed config. Aborts on the first non-finite loss.
pub fn train_loop<T: Scalar>(
    model: &mut SstModel<T>,
    data: &SyntheticSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.scale != model.cfg.scale {
        return Err(Error::Config(format!(
            "dataset scale {} differs from model scale {}",
            data.scale, model.cfg.scale
        )));
    }
    let schedule = StepSchedule {
        base: cfg.lr,
        milestones: cfg.milestones.clone(),
        gamma: cfg.gamma,
    };
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut sampler = PairSampler::new(cfg.seed, cfg.patch, cfg.batch);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (lo, hi) = sampler.next_batch(data)?;
        let lr = schedule.lr_at(step);
        let loss = train_step(model, &mut opt, &lo.cast(), &hi.cast(), lr)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, value: loss });
        }
        let rec = TrainRecord { step, loss, lr };
        on_step(&rec);
        records.push(rec);
    }
    Ok(TrainReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::SstConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::randn([3, 4], &mut rng).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a.map(|v| v + 0.5), &a).unwrap(), 0.5);
        let b = Tensor::<f64>::randn([3, 4], &mut rng).unwrap();
        let mut s = 0.0;
        for i in 0..12 {
            s += (a.as_slice()[i] - b.as_slice()[i]).abs();
        }
        assert_eq!(l1_loss(&a, &b).unwrap(), s / 12.0);
        assert!(l1_loss(&a, &Tensor::zeros([4, 3]).unwrap()).is_err());
    }

    fn tiny() -> (SstModel<f32>, SyntheticSet) {
        let cfg = SstConfig {
            windows: vec![4],
            layers: 1,
            ..SstConfig::micro()
        };
        let m = SstModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (m, SyntheticSet::new(4, 16, 2, 2).unwrap())
    }

    #[test]
    fn zero_lr_keeps_params_and_loss() {
        let (mut m, data) = tiny();
        let before = m.params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            batch: 1,
            patch: 8,
            samples: 1,
            ..TrainConfig::default()
        };
        let one = SyntheticSet {
            scale: 2,
            hr: data.hr[..1].to_vec(),
            lr: data.lr[..1].to_vec(),
        };
        let r = train_loop(&mut m, &one, &cfg, |_| {}).unwrap();
        assert_eq!(m.params, before);
        assert!(r.records.iter().all(|x| x.loss == r.records[0].loss));
    }

    #[test]
    fn milestone_halves_recorded_lr() {
        let (mut m, data) = tiny();
        let cfg = TrainConfig {
            steps: 12,
            batch: 1,
            patch: 4,
            milestones: vec![10],
            ..TrainConfig::default()
        };
        let r = train_loop(&mut m, &data, &cfg, |_| {}).unwrap();
        assert_eq!(r.records[9].lr, 2e-4);
        assert_eq!(r.records[10].lr, 1e-4);
        assert_eq!(r.records[11].lr, 1e-4);
        let csv = loss_csv(&r.records);
        assert!(csv.starts_with("step,loss,lr\n0,"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn divergence_reports_step() {
        let (mut m, data) = tiny();
        let cfg = TrainConfig {
            steps: 5,
            batch: 1,
            patch: 4,
            ..TrainConfig::default()
        };
        let nan = m.params.get("up.b").unwrap().map(|_| f32::NAN);
        m.params.insert("up.b", nan);
        match train_loop(&mut m, &data, &cfg, |_| {}) {
            Err(Error::Divergence { step: 0, value }) => assert!(value.is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = TrainConfig {
            steps: 4,
            batch: 2,
            patch: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let (mut a, data) = tiny();
        let (mut b, _) = tiny();
        let ra = train_loop(&mut a, &data, &cfg, |_| {}).unwrap();
        let rb = train_loop(&mut b, &data, &cfg, |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert!(a.params.iter().zip(b.params.iter()).all(|((_, x), (_, y))| x.bitwise_eq(y)));
    }
}
