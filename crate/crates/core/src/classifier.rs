//! Safety guardrails: adapters that read base-model taps and emit the
//! probability that an input is unsafe, plus the two separate-model
//! baselines trained without tap reuse.
//!
//! Polarity is fixed here once: every head emits P(unsafe), so higher
//! scores mean more unsafe and AUC/thresholds read naturally.

use crate::error::{Error, Result};
use crate::evalsuite::auc;
use crate::model::{bump, ModelConfig, PassCounters, TokenId, Transformer};
use crate::optim::Optimizer;
use crate::rng::{rng_for, shuffled_indices};
use crate::side::{SideConfig, SideNetwork};
use crate::synthbench::LabeledSequence;
use crate::tensor::{no_grad, Elem, Tensor};
use crate::model::Linear;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Probability that an input is unsafe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsafeScore(pub f64);

impl UnsafeScore {
    pub fn new(v: f64) -> Self {
        assert!((0.0..=1.0).contains(&v) && v.is_finite(), "unsafe score {v} out of range");
        UnsafeScore(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierKind {
    Plr,
    Rtb,
    Lst,
    SeparateSmall,
    SeparateLarge,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Plr => "plr",
            ClassifierKind::Rtb => "rtb",
            ClassifierKind::Lst => "lst",
            ClassifierKind::SeparateSmall => "separate_small",
            ClassifierKind::SeparateLarge => "separate_large",
        }
    }
}

/// Cached read-only taps for one example: full per-boundary hidden states
/// plus the pooled last-token rows. The base model never runs again for
/// adapters trained on these.
pub struct ExampleTaps<E: Elem> {
    pub full: Vec<Tensor<E>>,
    pub last: Vec<Tensor<E>>,
}

pub fn cache_taps<E: Elem>(base: &Transformer<E>, tokens: &[TokenId]) -> ExampleTaps<E> {
    no_grad(|| {
        let trace = base.forward(tokens, None, true);
        let last = trace
            .hidden
            .iter()
            .map(|h| h.slice_rows(h.rows() - 1, 1).detach())
            .collect();
        ExampleTaps {
            full: trace.hidden.iter().map(|h| h.detach()).collect(),
            last,
        }
    })
}

/// One classifier training example: tokens, optional cached taps, label.
pub struct ClsExample<E: Elem> {
    pub tokens: Vec<TokenId>,
    pub taps: Option<Rc<ExampleTaps<E>>>,
    pub label: u8,
}

pub fn prepare_examples<E: Elem>(
    base: &Transformer<E>,
    data: &[LabeledSequence],
    with_taps: bool,
) -> Vec<ClsExample<E>> {
    data.iter()
        .map(|ls| ClsExample {
            tokens: ls.tokens.clone(),
            taps: with_taps.then(|| Rc::new(cache_taps(base, &ls.tokens))),
            label: ls.label,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

/// Logistic-regression probe on one layer's last-token hidden state.
pub struct PlrProbe<E: Elem> {
    pub layer: usize,
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Elem> PlrProbe<E> {
    pub fn init(d_model: usize, layer: usize) -> Self {
        PlrProbe {
            layer,
            w: Tensor::param(vec![d_model, 1], vec![E::ZERO; d_model]),
            b: Tensor::param(vec![1], vec![E::ZERO]),
        }
    }

    pub fn logit(&self, taps: &ExampleTaps<E>) -> Tensor<E> {
        taps.last[self.layer].matmul(&self.w).add_bias(&self.b)
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Res-tuning bypass: a last-token stream updated per layer through a
/// bottleneck, then a linear head.
pub struct RtbClassifier<E: Elem> {
    pub downs: Vec<Linear<E>>,
    pub ups: Vec<Linear<E>>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

impl<E: Elem> RtbClassifier<E> {
    pub fn init(rng: &mut ChaCha8Rng, d_model: usize, n_layers: usize, bottleneck: usize) -> Self {
        RtbClassifier {
            downs: (0..n_layers).map(|_| Linear::init(rng, d_model, bottleneck)).collect(),
            // Zero up-projections: the stream starts as the raw embedding tap.
            ups: (0..n_layers).map(|_| Linear::zeros(bottleneck, d_model)).collect(),
            head_w: Tensor::param(vec![d_model, 1], vec![E::ZERO; d_model]),
            head_b: Tensor::param(vec![1], vec![E::ZERO]),
        }
    }

    pub fn logit(&self, taps: &ExampleTaps<E>) -> Tensor<E> {
        let mut stream = taps.last[0].clone();
        for (l, (down, up)) in self.downs.iter().zip(&self.ups).enumerate() {
            let inp = stream.add(&taps.last[l + 1]);
            stream = stream.add(&up.forward(&down.forward(&inp).silu()));
        }
        stream.matmul(&self.head_w).add_bias(&self.head_b)
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        let mut p: Vec<Tensor<E>> = Vec::new();
        for lin in self.downs.iter().chain(&self.ups) {
            p.push(lin.w.clone());
        }
        p.push(self.head_w.clone());
        p.push(self.head_b.clone());
        p
    }
}

/// Ladder side network with a scalar head on the last side position.
pub struct LstClassifier<E: Elem> {
    pub side: SideNetwork<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

impl<E: Elem> LstClassifier<E> {
    pub fn from_side(side: SideNetwork<E>) -> Self {
        let ds = side.cfg.d_side();
        LstClassifier {
            side,
            head_w: Tensor::param(vec![ds, 1], vec![E::ZERO; ds]),
            head_b: Tensor::param(vec![1], vec![E::ZERO]),
        }
    }

    pub fn logit(&self, taps: &ExampleTaps<E>) -> Tensor<E> {
        let h = self.side.forward_full(&taps.full);
        let last = h.slice_rows(h.rows() - 1, 1);
        last.matmul(&self.head_w).add_bias(&self.head_b)
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        let mut p = self.side.params();
        p.push(self.head_w.clone());
        p.push(self.head_b.clone());
        p
    }
}

/// A standalone down-scaled transformer with its own embeddings and a
/// scalar head; consumes raw tokens, reuses nothing from the base.
pub struct SeparateGuardrail<E: Elem> {
    pub model: Transformer<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

impl<E: Elem> SeparateGuardrail<E> {
    pub fn from_model(model: Transformer<E>) -> Self {
        let d = model.cfg.d_model;
        SeparateGuardrail {
            model,
            head_w: Tensor::param(vec![d, 1], vec![E::ZERO; d]),
            head_b: Tensor::param(vec![1], vec![E::ZERO]),
        }
    }

    pub fn logit(&self, tokens: &[TokenId], counters: Option<&PassCounters>) -> Tensor<E> {
        bump(counters, |c| c.separate_passes.set(c.separate_passes.get() + 1));
        let trace = self.model.forward(tokens, None, false);
        let h = &trace.final_hidden;
        let last = h.slice_rows(h.rows() - 1, 1);
        last.matmul(&self.head_w).add_bias(&self.head_b)
    }

    /// All parameters when the backbone is fully trainable (small
    /// baseline); only head and low-rank deltas otherwise (large baseline).
    pub fn params(&self, full_backbone: bool) -> Vec<Tensor<E>> {
        let mut p = if full_backbone {
            self.model.params()
        } else {
            self.model.layers.iter().flat_map(|b| b.lora_params()).collect()
        };
        p.push(self.head_w.clone());
        p.push(self.head_b.clone());
        p
    }
}

/// Any trained safety classifier.
pub enum SafetyClassifier<E: Elem> {
    Plr(PlrProbe<E>),
    Rtb(RtbClassifier<E>),
    Lst(LstClassifier<E>),
    Separate {
        guard: SeparateGuardrail<E>,
        kind: ClassifierKind,
    },
}

impl<E: Elem> SafetyClassifier<E> {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            SafetyClassifier::Plr(_) => ClassifierKind::Plr,
            SafetyClassifier::Rtb(_) => ClassifierKind::Rtb,
            SafetyClassifier::Lst(_) => ClassifierKind::Lst,
            SafetyClassifier::Separate { kind, .. } => *kind,
        }
    }

    /// Whether this classifier reads base taps (true) or runs its own
    /// model pass (false).
    pub fn is_disentangled(&self) -> bool {
        !matches!(self, SafetyClassifier::Separate { .. })
    }

    fn logit_example(&self, ex: &ClsExample<E>, counters: Option<&PassCounters>) -> Tensor<E> {
        match self {
            SafetyClassifier::Plr(p) => p.logit(ex.taps.as_ref().expect("plr needs taps")),
            SafetyClassifier::Rtb(r) => r.logit(ex.taps.as_ref().expect("rtb needs taps")),
            SafetyClassifier::Lst(l) => l.logit(ex.taps.as_ref().expect("lst needs taps")),
            SafetyClassifier::Separate { guard, .. } => guard.logit(&ex.tokens, counters),
        }
    }

    /// Scores cached taps (disentangled kinds).
    pub fn score_taps(&self, taps: &ExampleTaps<E>, counters: Option<&PassCounters>) -> UnsafeScore {
        bump(counters, |c| c.classifier_evals.set(c.classifier_evals.get() + 1));
        let logit = no_grad(|| match self {
            SafetyClassifier::Plr(p) => p.logit(taps),
            SafetyClassifier::Rtb(r) => r.logit(taps),
            SafetyClassifier::Lst(l) => l.logit(taps),
            SafetyClassifier::Separate { .. } => {
                panic!("separate guardrails score tokens, not taps")
            }
        });
        UnsafeScore::new(logit.item().to_f64().sigmoid_f64())
    }

    /// Scores a full tapped prompt trace without re-running the base.
    pub fn score_trace(
        &self,
        trace: &crate::model::ForwardTrace<E>,
        counters: Option<&PassCounters>,
    ) -> UnsafeScore {
        let taps = ExampleTaps {
            last: trace
                .hidden
                .iter()
                .map(|h| h.slice_rows(h.rows() - 1, 1).detach())
                .collect(),
            full: trace.hidden.clone(),
        };
        self.score_taps(&taps, counters)
    }

    pub fn score_tokens(
        &self,
        base: &Transformer<E>,
        tokens: &[TokenId],
        counters: Option<&PassCounters>,
    ) -> UnsafeScore {
        match self {
            SafetyClassifier::Separate { guard, .. } => {
                bump(counters, |c| c.classifier_evals.set(c.classifier_evals.get() + 1));
                let logit = no_grad(|| guard.logit(tokens, counters));
                UnsafeScore::new(logit.item().to_f64().sigmoid_f64())
            }
            _ => {
                let trace = no_grad(|| base.forward(tokens, None, true));
                self.score_trace(&trace, counters)
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor<E>> {
        match self {
            SafetyClassifier::Plr(p) => p.params(),
            SafetyClassifier::Rtb(r) => r.params(),
            SafetyClassifier::Lst(l) => l.params(),
            SafetyClassifier::Separate { guard, kind } => {
                guard.params(*kind == ClassifierKind::SeparateSmall)
            }
        }
    }
}

trait SigmoidF64 {
    fn sigmoid_f64(self) -> f64;
}

impl SigmoidF64 for f64 {
    fn sigmoid_f64(self) -> f64 {
        if self >= 0.0 {
            1.0 / (1.0 + (-self).exp())
        } else {
            let e = self.exp();
            e / (1.0 + e)
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 20,
            patience: 3,
            batch: 32,
            lr_grid: vec![1e-5, 5e-5, 1e-4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub chosen_lr: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<EpochStats>,
    /// Validation loss reached by every grid candidate, by learning rate.
    pub grid_val_losses: Vec<(f64, f64)>,
}

fn check_both_classes<E: Elem>(data: &[ClsExample<E>]) -> Result<()> {
    let pos = data.iter().filter(|e| e.label == 1).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::SingleClass(format!(
            "{pos} positive of {} examples",
            data.len()
        )));
    }
    Ok(())
}

fn snapshot<E: Elem>(params: &[Tensor<E>]) -> Vec<Vec<E>> {
    params.iter().map(|p| p.to_vec()).collect()
}

fn restore<E: Elem>(params: &[Tensor<E>], snap: &[Vec<E>]) {
    for (p, s) in params.iter().zip(snap) {
        p.data_mut().copy_from_slice(s);
    }
}

fn mean_val_loss<E: Elem>(clf: &SafetyClassifier<E>, val: &[ClsExample<E>]) -> f64 {
    no_grad(|| {
        let mut total = 0.0;
        for ex in val {
            let logit = clf.logit_example(ex, None);
            let loss = logit.bce_with_logits(&[E::from_f64(ex.label as f64)]);
            total += loss.item().to_f64();
        }
        total / val.len() as f64
    })
}

/// Binary cross-entropy training with early stopping on validation loss.
/// Runs every learning rate in the grid from the same seeded init and
/// keeps the best-validation weights of the best grid point.
///
/// `make` builds a freshly initialized classifier; it is called once per
/// grid candidate with the same seed so candidates differ only in lr.
pub fn train_classifier_generic<E: Elem>(
    make: &mut dyn FnMut(u64) -> SafetyClassifier<E>,
    train: &[ClsExample<E>],
    val: &[ClsExample<E>],
    settings: &TrainSettings,
    use_sgd_l2: Option<f64>,
) -> Result<(SafetyClassifier<E>, TrainReport)> {
    check_both_classes(train)?;
    check_both_classes(val)?;
    let mut best: Option<(SafetyClassifier<E>, TrainReport)> = None;
    let mut grid_val_losses = Vec::new();
    for &lr in &settings.lr_grid {
        let clf = make(settings.seed);
        let params = clf.params();
        let mut opt = match use_sgd_l2 {
            Some(l2) => Optimizer::sgd(params.clone(), lr, l2),
            None => Optimizer::adam(params.clone(), lr),
        };
        let mut curve = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0usize;
        let mut best_snap = snapshot(&params);
        if settings.epochs == 0 {
            // Zero epochs requested: return the initialization untouched.
            let val_loss = mean_val_loss(&clf, val);
            grid_val_losses.push((lr, val_loss));
            let report = TrainReport {
                chosen_lr: lr,
                best_epoch: 0,
                best_val_loss: val_loss,
                curve,
                grid_val_losses: grid_val_losses.clone(),
            };
            if best.as_ref().map_or(true, |(_, r)| val_loss < r.best_val_loss) {
                best = Some((clf, report));
            }
            continue;
        }
        for epoch in 0..settings.epochs {
            let mut rng = rng_for(
                settings.seed,
                &format!("classifier/shuffle/{lr}/{epoch}"),
            );
            let order = shuffled_indices(&mut rng, train.len());
            let mut train_loss = 0.0;
            for chunk in order.chunks(settings.batch) {
                opt.zero_grad();
                let inv = E::from_f64(1.0 / chunk.len() as f64);
                for &i in chunk {
                    let ex = &train[i];
                    let logit = clf.logit_example(ex, None);
                    let loss = logit
                        .bce_with_logits(&[E::from_f64(ex.label as f64)])
                        .scale(inv);
                    let lv = loss.item().to_f64();
                    if !lv.is_finite() {
                        return Err(Error::Diverged(format!(
                            "classifier loss became {lv} at lr {lr} epoch {epoch}"
                        )));
                    }
                    train_loss += lv * chunk.len() as f64 / train.len() as f64;
                    loss.backward();
                }
                opt.step();
            }
            let val_loss = mean_val_loss(&clf, val);
            curve.push(EpochStats {
                train_loss,
                val_loss,
            });
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_snap = snapshot(&params);
            } else if epoch - best_epoch >= settings.patience {
                break;
            }
        }
        restore(&params, &best_snap);
        grid_val_losses.push((lr, best_val));
        if best.as_ref().map_or(true, |(_, r)| best_val < r.best_val_loss) {
            best = Some((
                clf,
                TrainReport {
                    chosen_lr: lr,
                    best_epoch,
                    best_val_loss: best_val,
                    curve,
                    grid_val_losses: Vec::new(),
                },
            ));
        }
    }
    let (clf, mut report) = best.expect("non-empty lr grid");
    report.grid_val_losses = grid_val_losses;
    Ok((clf, report))
}

/// Scores a labeled set and computes AUC.
pub fn classifier_auc<E: Elem>(
    clf: &SafetyClassifier<E>,
    base: &Transformer<E>,
    data: &[ClsExample<E>],
) -> Result<f64> {
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for ex in data {
        let s = match (clf.is_disentangled(), &ex.taps) {
            (true, Some(taps)) => clf.score_taps(taps, None),
            _ => clf.score_tokens(base, &ex.tokens, None),
        };
        scores.push(s.0);
        labels.push(ex.label);
    }
    auc(&scores, &labels)
}

/// Per-layer probes trained on cached taps; the layer with the best
/// validation AUC wins.
pub fn plr_train<E: Elem>(
    base_cfg: &ModelConfig,
    train: &[ClsExample<E>],
    val: &[ClsExample<E>],
    settings: &TrainSettings,
    l2: f64,
) -> Result<(SafetyClassifier<E>, TrainReport, usize)> {
    check_both_classes(train)?;
    let mut best: Option<(SafetyClassifier<E>, TrainReport, usize, f64)> = None;
    for layer in 0..=base_cfg.n_layers {
        let d = base_cfg.d_model;
        let mut make = move |_seed: u64| SafetyClassifier::Plr(PlrProbe::init(d, layer));
        let (clf, report) = train_classifier_generic(&mut make, train, val, settings, Some(l2))?;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for ex in val {
            scores.push(clf.score_taps(ex.taps.as_ref().unwrap(), None).0);
            labels.push(ex.label);
        }
        let val_auc = auc(&scores, &labels)?;
        if best.as_ref().map_or(true, |(_, _, _, a)| val_auc > *a) {
            best = Some((clf, report, layer, val_auc));
        }
    }
    let (clf, report, layer, _) = best.unwrap();
    Ok((clf, report, layer))
}

// ---------------------------------------------------------------------------
// Distillation initialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSettings {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            steps: 1200,
            batch: 16,
            peak_lr: 6e-4,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub pre_kl: f64,
    pub post_kl: f64,
    pub student_perplexity: f64,
    pub teacher_perplexity: f64,
}

/// Cached teacher signals for one corpus sequence.
pub struct DistillExample<E: Elem> {
    pub tokens: Vec<TokenId>,
    pub taps: Rc<ExampleTaps<E>>,
    pub teacher_logits: Tensor<E>,
}

pub fn cache_distill_corpus<E: Elem>(
    base: &Transformer<E>,
    corpus: &[Vec<TokenId>],
) -> Vec<DistillExample<E>> {
    corpus
        .iter()
        .map(|tokens| {
            let (taps, logits) = no_grad(|| {
                let trace = base.forward(tokens, None, true);
                let last = trace
                    .hidden
                    .iter()
                    .map(|h| h.slice_rows(h.rows() - 1, 1).detach())
                    .collect();
                (
                    ExampleTaps {
                        full: trace.hidden.iter().map(|h| h.detach()).collect(),
                        last,
                    },
                    trace.logits.detach(),
                )
            });
            DistillExample {
                tokens: tokens.clone(),
                taps: Rc::new(taps),
                teacher_logits: logits,
            }
        })
        .collect()
}

fn side_kl<E: Elem>(side: &SideNetwork<E>, head: &Tensor<E>, ex: &DistillExample<E>) -> Tensor<E> {
    let hidden = side.forward_full(&ex.taps.full);
    let logits = side.logits(&hidden, head);
    logits.kl_from_teacher(&ex.teacher_logits)
}

fn mean_kl<E: Elem>(side: &SideNetwork<E>, head: &Tensor<E>, data: &[DistillExample<E>]) -> f64 {
    no_grad(|| {
        data.iter()
            .map(|ex| side_kl(side, head, ex).item().to_f64())
            .sum::<f64>()
            / data.len() as f64
    })
}

fn next_token_nll<E: Elem>(logits: &Tensor<E>, tokens: &[TokenId]) -> f64 {
    let targets: Vec<usize> = tokens.iter().skip(1).map(|&t| t as usize).collect();
    let t = targets.len();
    let shifted = logits.slice_rows(0, t);
    shifted
        .cross_entropy(&targets, None)
        .map(|l| l.item().to_f64())
        .unwrap_or(f64::NAN)
}

/// Held-out next-token perplexity of the side network vs the base.
pub fn distill_perplexities<E: Elem>(
    side: &SideNetwork<E>,
    head: &Tensor<E>,
    data: &[DistillExample<E>],
) -> (f64, f64) {
    no_grad(|| {
        let mut s_nll = 0.0;
        let mut t_nll = 0.0;
        let mut n = 0usize;
        for ex in data {
            if ex.tokens.len() < 2 {
                continue;
            }
            let hidden = side.forward_full(&ex.taps.full);
            let logits = side.logits(&hidden, head);
            s_nll += next_token_nll(&logits, &ex.tokens);
            t_nll += next_token_nll(&ex.teacher_logits, &ex.tokens);
            n += 1;
        }
        ((s_nll / n as f64).exp(), (t_nll / n as f64).exp())
    })
}

/// Initializes a side network by minimizing KL to the frozen base's
/// distribution over the corpus. Ladder connections train too.
pub fn lst_init_distill<E: Elem>(
    base: &Transformer<E>,
    side_cfg: SideConfig,
    corpus: &[DistillExample<E>],
    held_out: &[DistillExample<E>],
    settings: &DistillSettings,
) -> (SideNetwork<E>, DistillReport) {
    let side = SideNetwork::init(side_cfg, settings.seed);
    let head = base.lm_head.as_ref().unwrap_or(&base.embed).clone();
    let pre_kl = mean_kl(&side, &head, held_out);
    let params = side.params();
    let mut opt = Optimizer::adam(params, settings.peak_lr);
    let mut rng = rng_for(settings.seed, "distill/order");
    for step in 0..settings.steps {
        let lr = crate::optim::lr_schedule(
            crate::optim::ScheduleKind::Cosine,
            step,
            settings.steps,
            settings.warmup_fraction,
            settings.peak_lr,
        );
        opt.set_lr(lr);
        opt.zero_grad();
        let inv = E::from_f64(1.0 / settings.batch as f64);
        for _ in 0..settings.batch {
            let i = rand::Rng::gen_range(&mut rng, 0..corpus.len());
            let loss = side_kl(&side, &head, &corpus[i]).scale(inv);
            assert!(loss.item().is_finite(), "distillation loss diverged");
            loss.backward();
        }
        opt.step();
    }
    let post_kl = mean_kl(&side, &head, held_out);
    let (student_ppl, teacher_ppl) = distill_perplexities(&side, &head, held_out);
    (
        side,
        DistillReport {
            pre_kl,
            post_kl,
            student_perplexity: student_ppl,
            teacher_perplexity: teacher_ppl,
        },
    )
}

/// Distills a standalone small model (own embeddings and tied head) from
/// the base over the corpus; the low-cost separate baseline starts here.
pub fn distill_separate_model<E: Elem>(
    small_cfg: ModelConfig,
    corpus: &[DistillExample<E>],
    settings: &DistillSettings,
) -> Transformer<E> {
    let model = Transformer::init(small_cfg, settings.seed);
    let params = model.params();
    let mut opt = Optimizer::adam(params, settings.peak_lr);
    let mut rng = rng_for(settings.seed, "distill_separate/order");
    for step in 0..settings.steps {
        let lr = crate::optim::lr_schedule(
            crate::optim::ScheduleKind::Cosine,
            step,
            settings.steps,
            settings.warmup_fraction,
            settings.peak_lr,
        );
        opt.set_lr(lr);
        opt.zero_grad();
        let inv = E::from_f64(1.0 / settings.batch as f64);
        for _ in 0..settings.batch {
            let i = rand::Rng::gen_range(&mut rng, 0..corpus.len());
            let ex = &corpus[i];
            let trace = model.forward(&ex.tokens, None, false);
            let loss = trace.logits.kl_from_teacher(&ex.teacher_logits).scale(inv);
            assert!(loss.item().is_finite(), "separate distillation diverged");
            loss.backward();
        }
        opt.step();
    }
    model
}

/// Searches small standalone configs for a trainable-parameter count within
/// ±10% of `target_params`.
pub fn match_separate_small_config(base: &ModelConfig, target_params: usize) -> Result<ModelConfig> {
    let mut best: Option<(usize, ModelConfig)> = None;
    for d in (4..=64).step_by(4) {
        for n_layers in 1..=6usize {
            let cfg = ModelConfig {
                vocab_size: base.vocab_size,
                d_model: d,
                n_layers,
                n_heads: 2,
                n_kv_heads: 1,
                d_ff: 4 * d,
                max_seq_len: base.max_seq_len,
                norm_eps: base.norm_eps,
                rope_base: base.rope_base,
                tie_lm_head: true,
            };
            if cfg.validate().is_err() {
                continue;
            }
            let kv = cfg.kv_dim();
            let per_layer = d + d * d + 2 * d * kv + d * d + d + 3 * d * cfg.d_ff;
            let count = base.vocab_size * d + n_layers * per_layer + d;
            let diff = count.abs_diff(target_params);
            if best.as_ref().map_or(true, |(b, _)| diff < *b) {
                best = Some((diff, cfg));
            }
        }
    }
    let (diff, cfg) = best.unwrap();
    if diff as f64 > 0.10 * target_params as f64 {
        return Err(Error::Config(format!(
            "no separate-small config within 10% of {target_params} params (closest off by {diff})"
        )));
    }
    Ok(cfg)
}

/// The large separate baseline: the base architecture cloned with rank-32
/// deltas on all attention and feed-forward projections plus a scalar head.
pub fn separate_large_init<E: Elem>(
    base: &Transformer<E>,
    rank: usize,
    seed: u64,
) -> SeparateGuardrail<E> {
    let mut rng = rng_for(seed, "separate_large/lora");
    let model = Transformer {
        cfg: base.cfg.clone(),
        embed: base.embed.clone(),
        lm_head: base.lm_head.clone(),
        layers: base.layers.iter().map(|b| b.with_lora(&mut rng, rank, 2.0)).collect(),
        final_norm: base.final_norm.clone(),
    };
    SeparateGuardrail::from_model(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::freeze_checksum;

    fn tiny_base() -> Transformer<f32> {
        let cfg = ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_ff: 64,
            max_seq_len: 48,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        let m = Transformer::init(cfg, 42);
        m.freeze();
        m
    }

    fn toy_dataset(base: &Transformer<f32>, n: usize, seed: u64) -> Vec<ClsExample<f32>> {
        let splits = crate::synthbench::gen_safety_set(seed, n.max(100), 0.0).unwrap();
        let mut all = splits.train;
        all.truncate(n);
        prepare_examples(base, &all, true)
    }

    #[test]
    fn plr_zero_weights_scores_half() {
        let base = tiny_base();
        let taps = cache_taps(&base, &[1, 40, 41, 3]);
        let probe: PlrProbe<f32> = PlrProbe::init(base.cfg.d_model, 1);
        let clf = SafetyClassifier::Plr(probe);
        assert_eq!(clf.score_taps(&taps, None).0, 0.5);
    }

    #[test]
    fn plr_bias_ten_scores_sigma_ten() {
        let base = tiny_base();
        let taps = cache_taps(&base, &[1, 40, 41, 3]);
        let probe: PlrProbe<f32> = PlrProbe::init(base.cfg.d_model, 0);
        probe.b.data_mut()[0] = 10.0;
        let clf = SafetyClassifier::Plr(probe);
        let s = clf.score_taps(&taps, None).0;
        assert!((s - 0.9999546).abs() < 1e-5, "sigma(10) ~ 0.99995, got {s}");
    }

    #[test]
    fn plr_matches_scalar_dot_product_oracle() {
        let base = tiny_base();
        let taps = cache_taps(&base, &[1, 40, 99, 3]);
        let probe: PlrProbe<f32> = PlrProbe::init(base.cfg.d_model, 2);
        {
            let mut w = probe.w.data_mut();
            for (i, v) in w.iter_mut().enumerate() {
                *v = (i as f32 * 0.13).sin() * 0.2;
            }
            probe.b.data_mut()[0] = 0.1;
        }
        let h = taps.last[2].to_vec();
        let w = probe.w.to_vec();
        let z: f32 = h.iter().zip(&w).map(|(a, b)| a * b).sum::<f32>() + 0.1;
        let want = 1.0 / (1.0 + (-z as f64).exp());
        let clf = SafetyClassifier::Plr(probe);
        let got = clf.score_taps(&taps, None).0;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn rtb_zero_adapter_scores_half() {
        let base = tiny_base();
        let taps = cache_taps(&base, &[1, 50, 51, 3]);
        let mut rng = rng_for(1, "t");
        let rtb: RtbClassifier<f32> = RtbClassifier::init(&mut rng, base.cfg.d_model, base.cfg.n_layers, 8);
        // Head starts at zero, ups start at zero: sigma(0).
        let clf = SafetyClassifier::Rtb(rtb);
        assert_eq!(clf.score_taps(&taps, None).0, 0.5);
    }

    #[test]
    fn rtb_single_layer_matches_hand_rolled_oracle() {
        let base = {
            let mut cfg = tiny_base().cfg.clone();
            cfg.n_layers = 1;
            let m: Transformer<f32> = Transformer::init(cfg, 9);
            m.freeze();
            m
        };
        let taps = cache_taps(&base, &[1, 60, 61, 3]);
        let mut rng = rng_for(2, "t");
        let rtb: RtbClassifier<f32> = RtbClassifier::init(&mut rng, base.cfg.d_model, 1, 4);
        {
            let mut up = rtb.ups[0].w.data_mut();
            for (i, v) in up.iter_mut().enumerate() {
                *v = ((i * 7 % 13) as f32 - 6.0) * 0.05;
            }
            let mut hw = rtb.head_w.data_mut();
            for (i, v) in hw.iter_mut().enumerate() {
                *v = ((i % 5) as f32 - 2.0) * 0.1;
            }
            rtb.head_b.data_mut()[0] = -0.2;
        }
        // Scalar re-computation.
        let d = base.cfg.d_model;
        let h0 = taps.last[0].to_vec();
        let h1 = taps.last[1].to_vec();
        let down = rtb.downs[0].w.to_vec();
        let up = rtb.ups[0].w.to_vec();
        let mut inp = vec![0.0f32; d];
        for i in 0..d {
            inp[i] = h0[i] + h1[i];
        }
        let bott = 4;
        let mut z = vec![0.0f32; bott];
        for j in 0..bott {
            for i in 0..d {
                z[j] += inp[i] * down[i * bott + j];
            }
        }
        for v in z.iter_mut() {
            let s = 1.0 / (1.0 + (-*v).exp());
            *v *= s;
        }
        let mut stream = h0.clone();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..bott {
                acc += z[j] * up[j * d + i];
            }
            stream[i] += acc;
        }
        let hw = rtb.head_w.to_vec();
        let logit: f32 = stream.iter().zip(&hw).map(|(a, b)| a * b).sum::<f32>() - 0.2;
        let want = 1.0 / (1.0 + (-logit as f64).exp());

        let clf = SafetyClassifier::Rtb(rtb);
        let got = clf.score_taps(&taps, None).0;
        assert!((got - want).abs() < 1e-6, "got {got} want {want}");
    }

    #[test]
    fn lst_zero_head_scores_half_and_gate_ablation_isolates_side() {
        let base = tiny_base();
        let side_cfg = SideConfig::from_base(&base.cfg, 4, 1, None);
        let side: SideNetwork<f32> = SideNetwork::init(side_cfg, 3);
        let taps = cache_taps(&base, &[1, 70, 71, 72, 3]);
        let clf = LstClassifier::from_side(side);
        let wrapped = SafetyClassifier::Lst(clf);
        assert_eq!(wrapped.score_taps(&taps, None).0, 0.5);

        // Force all gates to -inf-ish so no base information flows, then
        // check the side output equals a standalone run on the same stem.
        let SafetyClassifier::Lst(clf) = wrapped else { unreachable!() };
        for g in &clf.side.gates {
            g.data_mut()[0] = -1e9;
        }
        let gated = no_grad(|| clf.side.forward_full(&taps.full)).to_vec();
        // Standalone tiny transformer: same blocks fed only by the stem.
        let standalone = {
            let stem = clf.side.ladder_in.forward(&taps.full[0]);
            let mut s = stem;
            for b in &clf.side.blocks {
                s = b.forward(&s, &clf.side.cfg.geom, 0, None);
            }
            s.rms_norm(&clf.side.final_norm, 1e-5)
        };
        for (a, b) in gated.iter().zip(standalone.to_vec().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn generic_trainer_patience_and_determinism() {
        let base = tiny_base();
        let train = toy_dataset(&base, 60, 5);
        let val = toy_dataset(&base, 30, 6);
        let settings = TrainSettings {
            epochs: 6,
            patience: 3,
            batch: 16,
            lr_grid: vec![1e-3],
            seed: 7,
        };
        let d = base.cfg.d_model;
        let run = || {
            let mut make = move |_s: u64| SafetyClassifier::Plr(PlrProbe::init(d, 2));
            let (clf, report) =
                train_classifier_generic(&mut make, &train, &val, &settings, Some(0.01)).unwrap();
            (clf.params()[0].to_vec(), report.best_epoch)
        };
        let (w1, e1) = run();
        let (w2, e2) = run();
        assert_eq!(w1, w2, "same seed must reproduce identical weights");
        assert_eq!(e1, e2);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let base = tiny_base();
        let train = toy_dataset(&base, 40, 8);
        let val = toy_dataset(&base, 20, 9);
        let settings = TrainSettings {
            epochs: 0,
            patience: 3,
            batch: 8,
            lr_grid: vec![1e-4],
            seed: 1,
        };
        let d = base.cfg.d_model;
        let mut make = move |_s: u64| SafetyClassifier::Plr(PlrProbe::init(d, 1));
        let (clf, report) =
            train_classifier_generic(&mut make, &train, &val, &settings, Some(0.01)).unwrap();
        assert!(clf.params()[0].to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn single_class_dataset_is_error() {
        let base = tiny_base();
        let mut data = toy_dataset(&base, 20, 10);
        for ex in &mut data {
            ex.label = 1;
        }
        let settings = TrainSettings::default();
        let d = base.cfg.d_model;
        let mut make = move |_s: u64| SafetyClassifier::Plr(PlrProbe::init(d, 0));
        let err = train_classifier_generic(&mut make, &data, &data, &settings, Some(0.01));
        assert!(matches!(err, Err(Error::SingleClass(_))));
    }

    #[test]
    fn training_leaves_base_checksum_unchanged() {
        let base = tiny_base();
        let before = freeze_checksum(&base.named_params());
        let train = toy_dataset(&base, 80, 11);
        let val = toy_dataset(&base, 40, 12);
        let settings = TrainSettings {
            epochs: 3,
            patience: 3,
            batch: 16,
            lr_grid: vec![1e-4],
            seed: 3,
        };
        let cfg = base.cfg.clone();
        let mut rngseed = 0u64;
        let mut make = |s: u64| {
            rngseed = s;
            let mut rng = rng_for(s, "rtb/init");
            SafetyClassifier::Rtb(RtbClassifier::init(&mut rng, cfg.d_model, cfg.n_layers, 8))
        };
        let _ = train_classifier_generic(&mut make, &train, &val, &settings, None).unwrap();
        assert_eq!(before, freeze_checksum(&base.named_params()));
    }

    #[test]
    fn plr_on_shuffled_labels_has_null_auc() {
        let base = tiny_base();
        let settings = TrainSettings {
            epochs: 4,
            patience: 3,
            batch: 16,
            lr_grid: vec![1e-3],
            seed: 0,
        };
        let mut aucs = Vec::new();
        for seed in 0..5u64 {
            let mut train = toy_dataset(&base, 80, 20 + seed);
            let mut val = toy_dataset(&base, 40, 40 + seed);
            let mut rng = rng_for(seed, "shuffle_labels");
            for ex in train.iter_mut().chain(val.iter_mut()) {
                ex.label = if rand::Rng::gen_bool(&mut rng, 0.5) { 1 } else { 0 };
            }
            if check_both_classes(&train).is_err() || check_both_classes(&val).is_err() {
                continue;
            }
            let (clf, _, _) = plr_train(&base.cfg, &train, &val, &settings, 0.01).unwrap();
            aucs.push(classifier_auc(&clf, &base, &val).unwrap());
        }
        aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = aucs[aucs.len() / 2];
        assert!(
            (0.35..=0.65).contains(&median),
            "null-label median AUC {median} outside [0.35, 0.65]"
        );
    }

    #[test]
    fn separate_small_matcher_hits_ten_percent() {
        let base_cfg = ModelConfig::compact_default();
        let side_cfg = SideConfig::from_base(&base_cfg, 16, 2, None);
        let side: SideNetwork<f32> = SideNetwork::init(side_cfg, 0);
        let clf = LstClassifier::from_side(side);
        let target: usize =
            clf.params().iter().map(|p| p.numel()).sum();
        let small = match_separate_small_config(&base_cfg, target).unwrap();
        let m: Transformer<f32> = Transformer::init(small, 0);
        let head_params = m.cfg.d_model + 1;
        let total = m.count_params() + head_params;
        let rel = (total as f64 - target as f64).abs() / target as f64;
        assert!(rel <= 0.10 + 0.02, "parameter match off by {rel:.3}");
    }

    #[test]
    fn separate_large_zero_delta_matches_base_hidden() {
        let base = tiny_base();
        let guard = separate_large_init(&base, 4, 77);
        let tokens = [1u32, 80, 81, 3];
        let a = no_grad(|| base.forward(&tokens, None, false)).final_hidden.to_vec();
        let b = no_grad(|| guard.model.forward(&tokens, None, false)).final_hidden.to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(
            no_grad(|| guard.logit(&tokens, None)).item(),
            0.0,
            "zero head gives logit 0"
        );
    }
}
