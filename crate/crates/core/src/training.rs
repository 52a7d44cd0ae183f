//! Adam, batch sampling, early stopping and evaluation.
//!
//! Training is serial and fully determined by `(seed, config, corpus)`:
//! batch order comes from `(seed, epoch)` and each sample's dropout mask
//! from `(seed, epoch, sample index)`.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::losses::{total_loss_on, LossBreakdown, LossConfig, LossVars};
use crate::metrics::{compute_eer, ScoreLine, ScoredSet};
use crate::model::{forward_on, AttentionRecord, FeatureStack, HierCon, Mode, ModelConfig, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly lower validation EER before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for fine-tuning alongside a large backbone.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S = f64> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let one = S::one();
    let t = state.step as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (S::lit(cfg.learning_rate), S::lit(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout seed for one sample in one epoch.
pub fn dropout_seed(seed: u64, epoch: u64, sample: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ sample as u64)
}

/// Records the joint loss of `items` on `tape`. `modes[i]` selects eval or a
/// seeded train pass for item `i`.
pub fn batch_objective<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    params: &ParamSet<Var>,
    items: &[(&FeatureStack<S>, Label)],
    modes: &[Mode],
    loss: &LossConfig,
) -> Result<LossVars> {
    if items.is_empty() || items.len() != modes.len() {
        return Err(Error::Config(format!(
            "batch of {} items with {} modes",
            items.len(),
            modes.len()
        )));
    }
    let mut logits = Vec::with_capacity(items.len());
    let mut embeddings = Vec::with_capacity(items.len());
    for ((stack, _), &mode) in items.iter().zip(modes) {
        let out = forward_on(tape, cfg, params, stack, mode)?;
        logits.push(out.logits);
        embeddings.push(out.embedding);
    }
    let logits = tape.concat_rows(&logits)?;
    let embeddings = tape.concat_rows(&embeddings)?;
    let labels: Vec<Label> = items.iter().map(|(_, l)| *l).collect();
    total_loss_on(tape, logits, embeddings, &labels, loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub con: f64,
    pub val_eer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S = f64> {
    /// Parameters from the epoch with the lowest validation EER.
    pub best: HierCon<S>,
    pub best_epoch: usize,
    pub best_val_eer: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Sample-weighted running mean of batch losses.
#[derive(Default)]
struct EpochLoss {
    sum: [f64; 3],
    count: usize,
}

impl EpochLoss {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        for (s, v) in self.sum.iter_mut().zip([b.total, b.ce, b.con]) {
            *s += v * n as f64;
        }
        self.count += n;
    }

    fn record(&self, epoch: usize, val_eer: f64) -> EpochRecord {
        let n = self.count as f64;
        EpochRecord {
            epoch,
            total: self.sum[0] / n,
            ce: self.sum[1] / n,
            con: self.sum[2] / n,
            val_eer,
        }
    }
}

fn check_corpora<S: Scalar>(model: &HierCon<S>, train: &Corpus<S>, val: &Corpus<S>) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if !val.has_both_classes() {
        return Err(Error::Data(
            "validation corpus must contain both real and fake utterances".into(),
        ));
    }
    train.check_matches(&model.config)?;
    val.check_matches(&model.config)
}

/// Trains `model` on `train`, monitoring EER on `val`.
///
/// Epoch 0 is a pass without updates: eval-mode losses over the training
/// set and the validation EER of the initial parameters. Each later epoch
/// runs forward, backward and Adam over every batch. The best checkpoint is
/// the earliest epoch with the lowest validation EER (epoch 0 included).
/// `on_epoch` sees each record as soon as it is complete.
pub fn train<S: Scalar>(
    mut model: HierCon<S>,
    train: &Corpus<S>,
    val: &Corpus<S>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    model.config.validate()?;
    check_corpora(&model, train, val)?;

    let mut history = Vec::new();
    let mut loss = EpochLoss::default();
    for batch in make_batches(train.len(), cfg.batch_size, cfg.seed, 0) {
        let items: Vec<_> = batch.iter().map(|&i| (&train.items[i].0, train.items[i].1)).collect();
        let mut tape = Tape::new();
        let vars = model.params.on_tape(&mut tape);
        let modes = vec![Mode::Eval; items.len()];
        let lv = batch_objective(&mut tape, &model.config, &vars, &items, &modes, &cfg.loss)?;
        loss.add(&lv.breakdown(&tape), items.len());
    }
    let eer0 = validation_eer(&model, val)?;
    let rec = loss.record(0, eer0);
    on_epoch(&rec);
    history.push(rec);

    let mut best = model.clone();
    let (mut best_epoch, mut best_eer) = (0, eer0);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut adam = AdamState::new(model.params.leaves());
    let adam_cfg = cfg.adam();

    for epoch in 1..=cfg.max_epochs {
        let mut loss = EpochLoss::default();
        let mut last = LossBreakdown { total: f64::NAN, ce: f64::NAN, con: f64::NAN };
        for (b, batch) in make_batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let items: Vec<_> = batch.iter().map(|&i| (&train.items[i].0, train.items[i].1)).collect();
            let modes: Vec<Mode> = batch
                .iter()
                .map(|&i| Mode::Train {
                    dropout_seed: dropout_seed(cfg.seed, epoch as u64, i),
                })
                .collect();
            let mut tape = Tape::new();
            let vars = model.params.on_tape(&mut tape);
            let lv = batch_objective(&mut tape, &model.config, &vars, &items, &modes, &cfg.loss)?;
            let bd = lv.breakdown(&tape);
            if !(bd.total.is_finite() && bd.ce.is_finite() && bd.con.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    last_total: last.total,
                    last_ce: last.ce,
                    last_con: last.con,
                });
            }
            let grads = tape.backward(lv.total)?;
            let g: Vec<Tensor<S>> = vars.leaves().into_iter().map(|&v| grads.wrt(v)).collect();
            let mut slots: Vec<&mut Tensor<S>> =
                model.params.entries_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut slots, &g, &mut adam, &adam_cfg)?;
            if !model.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    last_total: bd.total,
                    last_ce: bd.ce,
                    last_con: bd.con,
                });
            }
            loss.add(&bd, items.len());
            last = bd;
        }
        let eer = validation_eer(&model, val)?;
        let rec = loss.record(epoch, eer);
        on_epoch(&rec);
        history.push(rec);
        if eer < best_eer {
            best = model.clone();
            best_epoch = epoch;
            best_eer = eer;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_eer: best_eer,
        history,
        stopped_early,
    })
}

fn validation_eer<S: Scalar>(model: &HierCon<S>, val: &Corpus<S>) -> Result<f64> {
    evaluate(model, val)?
        .eer
        .ok_or_else(|| Error::MetricUndefined("validation EER undefined".into()))
}

#[derive(Debug, Clone)]
pub struct Evaluation<S = f64> {
    pub scores: Vec<ScoreLine>,
    /// Absent unless both classes are present.
    pub eer: Option<f64>,
    pub records: Vec<AttentionRecord<S>>,
}

impl<S: Scalar> Evaluation<S> {
    pub fn scored_set(&self) -> Result<ScoredSet> {
        ScoredSet::from_score_lines(&self.scores)
    }

    /// Element-wise mean of the selected records.
    pub fn mean_attention(&self, filter: impl Fn(Label) -> bool) -> Option<AttentionRecord<S>> {
        let chosen: Vec<&AttentionRecord<S>> = self
            .records
            .iter()
            .zip(&self.scores)
            .filter(|(_, s)| filter(s.label))
            .map(|(r, _)| r)
            .collect();
        mean_attention(&chosen)
    }
}

pub fn mean_attention<S: Scalar>(records: &[&AttentionRecord<S>]) -> Option<AttentionRecord<S>> {
    let first = records.first()?;
    let n = S::lit(records.len() as f64);
    let avg = |get: &dyn Fn(&AttentionRecord<S>) -> &Tensor<S>| {
        let mut acc = Tensor::zeros(get(first).shape());
        for r in records {
            for (a, &x) in acc.data_mut().iter_mut().zip(get(r).data()) {
                *a += x;
            }
        }
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        acc
    };
    Some(AttentionRecord {
        alpha: avg(&|r| &r.alpha),
        beta: avg(&|r| &r.beta),
        gamma: avg(&|r| &r.gamma),
    })
}

/// Eval-mode scores (probability of fake) for every utterance.
pub fn evaluate<S: Scalar>(model: &HierCon<S>, corpus: &Corpus<S>) -> Result<Evaluation<S>> {
    corpus.check_matches(&model.config)?;
    let mut scores = Vec::with_capacity(corpus.len());
    let mut records = Vec::with_capacity(corpus.len());
    for (stack, label) in &corpus.items {
        let p = model.forward(stack, Mode::Eval)?;
        scores.push(ScoreLine {
            utterance_id: stack.utterance_id.clone(),
            score: p.fake_score().as_f64(),
            label: *label,
        });
        records.push(p.record);
    }
    let set = ScoredSet::from_score_lines(&scores)?;
    let eer = match compute_eer(&set) {
        Ok(e) => Some(e),
        Err(Error::MetricUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation { scores, eer, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize;
    use crate::data::SyntheticSpec;

    fn adam_cfg(lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, ..TrainConfig::default().adam() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros([2])], &mut st, &adam_cfg(0.1)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let grads = Tensor::vector(vec![3.0f64, -0.5, 1e-3, -40.0]).unwrap();
        let mut p = Tensor::<f64>::zeros([4]);
        let mut st = AdamState::new([&p]);
        let cfg = adam_cfg(0.01);
        adam_step(&mut [&mut p], std::slice::from_ref(&grads), &mut st, &cfg).unwrap();
        for (x, g) in p.data().iter().zip(grads.data()) {
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
            let expect = -0.01 * g / (g.abs() + cfg.eps);
            assert!((x - expect).abs() < 1e-18);
            assert!((x.abs() - 0.01).abs() < 0.01 * 1e-5);
        }
    }

    /// Textbook Adam on f(x) = ‖x‖², written independently of `adam_step`.
    fn reference_adam(start: [f64; 2], lr: f64, steps: usize) -> [f64; 2] {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut x = start;
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..=steps {
            for k in 0..2 {
                let g = 2.0 * x[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / (1.0 - b1.powi(t as i32));
                let vh = v[k] / (1.0 - b2.powi(t as i32));
                x[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        x
    }

    #[test]
    fn quadratic_bowl_converges_like_reference() {
        let mut p = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let mut st = AdamState::new([&p]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            adam_step(&mut [&mut p], &[g], &mut st, &adam_cfg(0.1)).unwrap();
        }
        let r = reference_adam([1.0, 1.0], 0.1, 500);
        assert!((p.data()[0] - r[0]).abs() < 1e-12 && (p.data()[1] - r[1]).abs() < 1e-12);
        let norm = (p.data()[0].powi(2) + p.data()[1].powi(2)).sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn adam_rejects_misaligned() {
        let mut p = Tensor::<f64>::zeros([2]);
        let mut st = AdamState::new([&p]);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros([3])], &mut st, &adam_cfg(0.1)).is_err());
    }

    #[test]
    fn batches() {
        let b = make_batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 4, 1, 0));
        assert_ne!(make_batches(32, 4, 1, 1), make_batches(32, 4, 1, 2));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::full_scale().learning_rate, 1e-6);
        assert!(TrainConfig { patience: 60, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    fn corpus(spec: &SyntheticSpec) -> Corpus {
        Corpus { items: synthesize(spec).unwrap() }
    }

    fn small_run(lambda: f64, epochs: usize) -> TrainOutcome {
        let spec = SyntheticSpec { n_real: 12, n_fake: 12, ..SyntheticSpec::default() };
        let tr = corpus(&spec);
        let va = corpus(&SyntheticSpec { stream: 1, n_real: 8, n_fake: 8, ..spec });
        let cfg = TrainConfig {
            max_epochs: epochs,
            patience: epochs,
            batch_size: 8,
            loss: LossConfig { lambda_con: lambda, ..LossConfig::default() },
            ..TrainConfig::default()
        };
        let model = HierCon::new(ModelConfig::default(), 3).unwrap();
        train(model, &tr, &va, &cfg, |_| {}).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let a = small_run(0.1, 4);
        let b = small_run(0.1, 4);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.history.len(), 5);
        assert!(a.history.last().unwrap().total < a.history[0].total);
        let min = a.history.iter().map(|r| r.val_eer).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_eer, min);
        assert_eq!(a.history[a.best_epoch].val_eer, min);
    }

    #[test]
    fn zero_lambda_makes_total_equal_ce() {
        let r = small_run(0.0, 2);
        for rec in &r.history {
            assert_eq!(rec.total, rec.ce);
            assert!(rec.con >= 0.0);
        }
    }

    #[test]
    fn single_class_validation_is_rejected() {
        let spec = SyntheticSpec { n_real: 4, n_fake: 4, ..SyntheticSpec::default() };
        let tr = corpus(&spec);
        let va = corpus(&SyntheticSpec { n_fake: 0, ..spec });
        let model = HierCon::new(ModelConfig::default(), 0).unwrap();
        assert!(train(model, &tr, &va, &TrainConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = SyntheticSpec { n_real: 4, n_fake: 4, ..SyntheticSpec::default() };
        let tr = corpus(&spec);
        let mut model = HierCon::new(ModelConfig::default(), 0).unwrap();
        model.params.classifier.output.weight.data_mut()[0] = f64::INFINITY;
        let err = train(model, &tr, &tr, &TrainConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }) || matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn evaluation_of_one_utterance() {
        let spec = SyntheticSpec { n_real: 1, n_fake: 0, ..SyntheticSpec::default() };
        let model = HierCon::new(ModelConfig::default(), 0).unwrap();
        let ev = evaluate(&model, &corpus(&spec)).unwrap();
        assert_eq!(ev.scores.len(), 1);
        assert!((0.0..=1.0).contains(&ev.scores[0].score));
        assert_eq!(ev.eer, None);
        let avg = ev.mean_attention(|_| true).unwrap();
        assert_eq!(avg, ev.records[0]);
    }
}
