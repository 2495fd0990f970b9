//! Offline bi-level training of the two teacher-student pairs, online
//! prediction, drift monitoring and retraining.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::csi_sim::{mix, CaseId, NUM_CASES};
use crate::error::{BtsError, Result};
use crate::indicator::{build_indicators_from, confidence_distribution, disarray_all, DisarrayParams, IndicatorSet};
use crate::losses::{
    compute_feedback, ctq_node, ctve_node, init_center, labeled_ce, one_hot, outlier_distance, shifted_ce_node,
    FeedbackSignal, LossComponents, LossWeights,
};
use crate::nets::{dual_input, primal_input, DualNet, ModelBundle, NetConfig, NetOutput, PrimalNet, Predictor};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{DiversityTable, FrameSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Teachers, students, feedback and the projection losses.
    TeacherStudent,
    /// Teachers on the labeled loss only; students untouched.
    Supervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Bifold,
    PrimalOnly,
    DualOnly,
}

impl Architecture {
    fn primal(self) -> bool {
        self != Architecture::DualOnly
    }

    fn dual(self) -> bool {
        self != Architecture::PrimalOnly
    }
}

/// Form of the teacher distribution handed to the students.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabels {
    Soft,
    Hard,
}

/// Granularity of the disarray used for the confidence distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScope {
    /// One distribution per batch from the mean disarray.
    Batch,
    /// One distribution per frame.
    Frame,
}

pub const DESK_ITERATIONS: usize = 1500;
pub const DESK_BATCH: usize = 32;
/// Outlier-distance threshold matched to the desk networks' projection scale.
pub const DESK_DRIFT_THRESHOLD: f64 = 1.5e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    /// Optimizer of the two students.
    pub student_optimizer: AdamConfig,
    pub weights: LossWeights,
    pub disarray: DisarrayParams,
    pub net: NetConfig,
    pub drift_threshold: f64,
    pub drift_window: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub architecture: Architecture,
    pub use_confidence: bool,
    pub confidence_scope: ConfidenceScope,
    pub pseudo_labels: PseudoLabels,
    pub force_zero_feedback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 256,
            optimizer: AdamConfig::default(),
            student_optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            disarray: DisarrayParams::default(),
            net: NetConfig::default(),
            drift_threshold: 50.0,
            drift_window: 100,
            seed: 0,
            mode: TrainMode::TeacherStudent,
            architecture: Architecture::Bifold,
            use_confidence: true,
            confidence_scope: ConfidenceScope::Frame,
            pseudo_labels: PseudoLabels::Soft,
            force_zero_feedback: false,
        }
    }
}

impl TrainConfig {
    /// Small networks and batches that train in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: DESK_ITERATIONS,
            batch: DESK_BATCH,
            net: NetConfig::desk(),
            drift_threshold: DESK_DRIFT_THRESHOLD,
            ..TrainConfig::default()
        }
    }

    /// Seed both the batch sampler and the weight initialization.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.net.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(BtsError::Config("iterations must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(BtsError::Config("batch size must be at least 1".into()));
        }
        if !(self.drift_threshold > 0.0) {
            return Err(BtsError::Config("drift threshold must be positive".into()));
        }
        if self.drift_window == 0 {
            return Err(BtsError::Config("drift window must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(self.student_optimizer.lr > 0.0) {
            return Err(BtsError::Config("learning rate must be positive".into()));
        }
        self.weights.validate()?;
        self.disarray.validate()?;
        self.net.validate()
    }
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub losses: LossComponents,
    pub feedback: FeedbackSignal,
    /// Labeled cross entropy of each student before and after its step.
    pub student_ce: [f64; 4],
    pub wall_ms: f64,
}

impl IterationRecord {
    /// Everything except the wall-clock field.
    pub fn same_trajectory(&self, other: &IterationRecord) -> bool {
        self.iteration == other.iteration
            && self.losses == other.losses
            && self.feedback == other.feedback
            && self.student_ce == other.student_ce
    }
}

pub fn write_log(records: &[IterationRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<IterationRecord>,
    pub indicators: IndicatorSet,
    /// Teacher parameters after each iteration, when requested.
    pub teacher_trace: Vec<Vec<Vec<f64>>>,
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), pos: n };
        s.order.shrink_to_fit();
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn forward_primal(cfg: &NetConfig, table: &DiversityTable, tape: &mut Tape, net: &PrimalNet, v: &[Var], rows: &[&[f64]]) -> NetOutput {
    let x = tape.constant(primal_input(rows, cfg, table), &[rows.len() * cfg.tau, cfg.input_width()]);
    net.forward(cfg, tape, v, x, rows.len())
}

fn forward_dual(cfg: &NetConfig, tape: &mut Tape, net: &DualNet, v: &[Var], rows: &[&[f64]]) -> NetOutput {
    let x = tape.constant(dual_input(rows, cfg), &[rows.len(), cfg.pairs, cfg.tau, cfg.subcarriers]);
    net.forward(cfg, tape, v, x)
}

#[derive(Clone, Copy)]
enum Side {
    Primal,
    Dual,
}

fn pseudo_targets(probs: &[f64], kind: PseudoLabels, classes: usize) -> Vec<f64> {
    match kind {
        PseudoLabels::Soft => probs.to_vec(),
        PseudoLabels::Hard => {
            let mut out = vec![0.0; probs.len()];
            for (row, dst) in probs.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
                let mut best = 0;
                for c in 1..classes {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                dst[best] = 1.0;
            }
            out
        }
    }
}

fn check_finite(iteration: usize, c: &LossComponents) -> Result<()> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(BtsError::NonFinite { iteration, component: name });
        }
    }
    Ok(())
}

fn check_sets(labeled: &FrameSet, unlabeled: &FrameSet, cfg: &TrainConfig) -> Result<Vec<CaseId>> {
    let dims = (cfg.net.tau, cfg.net.subcarriers, cfg.net.pairs);
    for set in [labeled, unlabeled] {
        if set.dims() != dims {
            return Err(BtsError::DimensionMismatch { expected: dims, actual: set.dims() });
        }
    }
    if labeled.is_empty() {
        return Err(BtsError::Empty("labeled set"));
    }
    if unlabeled.is_empty() {
        return Err(BtsError::Empty("unlabeled set"));
    }
    let labels: Vec<CaseId> = labeled
        .labels()
        .into_iter()
        .map(|l| l.ok_or_else(|| BtsError::Config("labeled frame without a case label".into())))
        .collect::<Result<_>>()?;
    let mut seen = [false; NUM_CASES];
    for l in &labels {
        seen[l.index()] = true;
    }
    let missing: Vec<u8> = CaseId::ALL.iter().filter(|c| !seen[c.index()]).map(|c| c.get()).collect();
    if !missing.is_empty() {
        return Err(BtsError::MissingCases(missing));
    }
    Ok(labels)
}

/// Confidence rows for a batch: one shared row, or one row per frame.
fn confidence_rows(cfg: &TrainConfig, rho: &[f64], idx: &[usize], ind: &IndicatorSet) -> Result<Vec<f64>> {
    let c = cfg.net.classes;
    if !cfg.use_confidence {
        return Ok(vec![0.0; c]);
    }
    let batch_rho: Vec<f64> = idx.iter().map(|&i| rho[i]).collect();
    match cfg.confidence_scope {
        ConfidenceScope::Batch => confidence_distribution(&batch_rho, ind),
        ConfidenceScope::Frame => {
            let mut out = Vec::with_capacity(idx.len() * c);
            for r in batch_rho {
                out.extend(confidence_distribution(&[r], ind)?);
            }
            Ok(out)
        }
    }
}

/// Offline training on labeled and unlabeled frames.
pub fn train(labeled: &FrameSet, unlabeled: &FrameSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_traced(labeled, unlabeled, cfg, false)
}

/// As [`train`], optionally recording the teacher parameters after every iteration.
pub fn train_traced(labeled: &FrameSet, unlabeled: &FrameSet, cfg: &TrainConfig, trace: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = check_sets(labeled, unlabeled, cfg)?;
    let net_cfg = &cfg.net;
    let classes = net_cfg.classes;
    let w = cfg.weights;
    let arch = cfg.architecture;
    let semi = cfg.mode == TrainMode::TeacherStudent;

    let rho_l = disarray_all(labeled, cfg.disarray);
    let rho_u = disarray_all(unlabeled, cfg.disarray);
    let indicators = build_indicators_from(labeled, &rho_l, &rho_u)?;

    let mut bundle = ModelBundle::new(net_cfg.clone())?;
    bundle.predictor = if arch == Architecture::DualOnly { Predictor::Dual } else { Predictor::Primal };
    let table = bundle.diversity_table();

    // Center of the initial projections of every unlabeled frame.
    if arch.primal() {
        let frames: Vec<&[f64]> = (0..unlabeled.len()).map(|i| unlabeled.values(i)).collect();
        let proj = bundle.project_primal(&frames);
        bundle.center = Some(init_center(&proj, net_cfg.projection_dim())?);
    }
    let center = bundle.center.clone();

    let adam = |p: &crate::nets::ParamSet| Adam::new(cfg.optimizer, &p.sizes());
    let mut opt_pt = adam(&bundle.primal_teacher.params);
    let mut opt_ps = Adam::new(cfg.student_optimizer, &bundle.primal_student.params.sizes());
    let mut opt_dt = adam(&bundle.dual_teacher.params);
    let mut opt_ds = Adam::new(cfg.student_optimizer, &bundle.dual_student.params.sizes());
    let mut opt_psi = adam(&bundle.projection.params);

    let mut labeled_stream = Sampler::new(labeled.len(), mix(cfg.seed, 0x1AB));
    let mut unlabeled_stream = Sampler::new(unlabeled.len(), mix(cfg.seed, 0x0B1));

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut teacher_trace = Vec::new();
    let start = Instant::now();
    let b = cfg.batch;

    for it in 0..cfg.iterations {
        let li = labeled_stream.next_batch(b);
        let l_rows: Vec<&[f64]> = li.iter().map(|&i| labeled.values(i)).collect();
        let l_labels: Vec<CaseId> = li.iter().map(|&i| labels[i]).collect();
        let y = one_hot(&l_labels, classes);
        let xi_l = confidence_rows(cfg, &rho_l, &li, &indicators)?;

        let (ui, u_rows, xi_u) = if semi {
            let ui = unlabeled_stream.next_batch(b);
            let rows: Vec<&[f64]> = ui.iter().map(|&i| unlabeled.values(i)).collect();
            let xi = confidence_rows(cfg, &rho_u, &ui, &indicators)?;
            (ui, rows, xi)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        let _ = ui;

        let mut teacher_rows = l_rows.clone();
        teacher_rows.extend_from_slice(&u_rows);
        let n_rows = teacher_rows.len();

        let mut comp = LossComponents::default();
        let mut feedback = FeedbackSignal::default();
        let mut student_ce = [0.0; 4];

        // Teacher forward passes; the graph stays alive for the teacher step.
        let mut tape = Tape::new();
        let pt = arch.primal().then(|| {
            let v = bundle.primal_teacher.params.bind(&mut tape);
            let o = forward_primal(net_cfg, &table, &mut tape, &bundle.primal_teacher, &v, &teacher_rows);
            (v, o)
        });
        let dt = arch.dual().then(|| {
            let v = bundle.dual_teacher.params.bind(&mut tape);
            let o = forward_dual(net_cfg, &mut tape, &bundle.dual_teacher, &v, &teacher_rows);
            (v, o)
        });
        let unlabeled_probs = |tape: &Tape, o: &NetOutput| softmax_rows(&tape.value(o.logits)[b * classes..n_rows * classes], classes);
        let pseudo_pt = if semi { pt.as_ref().map(|(_, o)| pseudo_targets(&unlabeled_probs(&tape, o), cfg.pseudo_labels, classes)) } else { None };
        let pseudo_dt = if semi { dt.as_ref().map(|(_, o)| pseudo_targets(&unlabeled_probs(&tape, o), cfg.pseudo_labels, classes)) } else { None };

        // Student steps, strictly before the teacher step.
        if semi {
            if let Some(pseudo) = &pseudo_pt {
                let (uice, before, after) = student_step(Side::Primal, &mut bundle, &mut opt_ps, &table, &u_rows, &l_rows, &l_labels, pseudo, &xi_u);
                comp.uice_ps = uice;
                student_ce[0] = before;
                student_ce[1] = after;
                feedback.primal = if cfg.force_zero_feedback { 0.0 } else { (before - after).max(0.0) };
            }
            if let Some(pseudo) = &pseudo_dt {
                let (uice, before, after) = student_step(Side::Dual, &mut bundle, &mut opt_ds, &table, &u_rows, &l_rows, &l_labels, pseudo, &xi_u);
                comp.uice_ds = uice;
                student_ce[2] = before;
                student_ce[3] = after;
                feedback.dual = if cfg.force_zero_feedback { 0.0 } else { (before - after).max(0.0) };
            }
        }

        // Single backward pass over the combined teacher objective.
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let push = |terms: &mut Vec<(Var, f64)>, v: Var, weight: f64| {
            if weight != 0.0 {
                terms.push((v, weight));
            }
        };
        let mut psi_vars = None;
        let mut proj_pt = None;
        if let Some((_, o)) = &pt {
            let logits_l = tape.rows(o.logits, 0, b);
            let tce = shifted_ce_node(&mut tape, logits_l, &y, &xi_l, classes);
            comp.tce_pt = tape.scalar(tce);
            push(&mut terms, tce, w.lambda1);
            if semi {
                let logits_u = tape.rows(o.logits, b, b);
                let uice = shifted_ce_node(&mut tape, logits_u, pseudo_pt.as_ref().unwrap(), &xi_u, classes);
                comp.uice_pt = feedback.primal * tape.scalar(uice);
                push(&mut terms, uice, w.lambda2 * feedback.primal);
                let pv = bundle.projection.params.bind(&mut tape);
                let proj = bundle.projection.forward(&mut tape, &pv, o.latent);
                let proj_u = tape.rows(proj, b, b);
                let ctve = ctve_node(&mut tape, proj_u, center.as_deref())?;
                comp.ctve = tape.scalar(ctve);
                push(&mut terms, ctve, w.lambda4);
                psi_vars = Some(pv);
                proj_pt = Some(proj);
            }
        }
        if let Some((_, o)) = &dt {
            let logits_l = tape.rows(o.logits, 0, b);
            let tce = shifted_ce_node(&mut tape, logits_l, &y, &xi_l, classes);
            comp.tce_dt = tape.scalar(tce);
            push(&mut terms, tce, w.lambda1);
            if semi {
                let logits_u = tape.rows(o.logits, b, b);
                let uice = shifted_ce_node(&mut tape, logits_u, pseudo_dt.as_ref().unwrap(), &xi_u, classes);
                comp.uice_dt = feedback.dual * tape.scalar(uice);
                push(&mut terms, uice, w.lambda2 * feedback.dual);
                if let (Some(proj_p), Some(pv)) = (proj_pt, psi_vars.as_ref()) {
                    let proj_d = bundle.projection.forward(&mut tape, pv, o.latent);
                    let proj_p = tape.rows(proj_p, b, b);
                    let proj_d = tape.rows(proj_d, b, b);
                    let q = ctq_node(&mut tape, proj_p, proj_d);
                    comp.ctq = tape.scalar(q);
                    push(&mut terms, q, w.lambda3);
                }
            }
        }
        check_finite(it, &comp)?;

        if !terms.is_empty() {
            let root = tape.weighted_sum(&terms);
            let grads = tape.backward(root);
            if let Some((v, _)) = &pt {
                let g = bundle.primal_teacher.params.gradients(&grads, v);
                opt_pt.step(&mut bundle.primal_teacher.params.values, &g);
            }
            if let Some((v, _)) = &dt {
                let g = bundle.dual_teacher.params.gradients(&grads, v);
                opt_dt.step(&mut bundle.dual_teacher.params.values, &g);
            }
            if let Some(v) = &psi_vars {
                let g = bundle.projection.params.gradients(&grads, v);
                opt_psi.step(&mut bundle.projection.params.values, &g);
            }
        }
        if !bundle.primal_teacher.params.all_finite() || !bundle.dual_teacher.params.all_finite() {
            return Err(BtsError::NonFinite { iteration: it, component: "teacher parameters" });
        }
        if trace {
            let mut snap = bundle.primal_teacher.params.values.clone();
            snap.extend(bundle.dual_teacher.params.values.iter().cloned());
            teacher_trace.push(snap);
        }

        let rec = IterationRecord {
            iteration: it,
            losses: comp,
            feedback,
            student_ce,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!("iteration {it}: {:?}", rec.losses);
        log.push(rec);
    }

    Ok(TrainOutcome { bundle, log, indicators, teacher_trace })
}

/// One student update on the teacher's pseudo distribution; returns the
/// student loss and its labeled cross entropy before and after the step.
#[allow(clippy::too_many_arguments)]
fn student_step(
    side: Side,
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    table: &DiversityTable,
    u_rows: &[&[f64]],
    l_rows: &[&[f64]],
    labels: &[CaseId],
    pseudo: &[f64],
    xi_u: &[f64],
) -> (f64, f64, f64) {
    let cfg = bundle.config.clone();
    let classes = cfg.classes;
    let b = u_rows.len();
    let mut rows = u_rows.to_vec();
    rows.extend_from_slice(l_rows);
    let mut tape = Tape::new();
    let (vars, out) = match side {
        Side::Primal => {
            let v = bundle.primal_student.params.bind(&mut tape);
            let o = forward_primal(&cfg, table, &mut tape, &bundle.primal_student, &v, &rows);
            (v, o)
        }
        Side::Dual => {
            let v = bundle.dual_student.params.bind(&mut tape);
            let o = forward_dual(&cfg, &mut tape, &bundle.dual_student, &v, &rows);
            (v, o)
        }
    };
    let before_probs = softmax_rows(&tape.value(out.logits)[b * classes..], classes);
    let before = labeled_ce(&before_probs, labels, classes);
    let logits_u = tape.rows(out.logits, 0, b);
    let loss = shifted_ce_node(&mut tape, logits_u, pseudo, xi_u, classes);
    let uice = tape.scalar(loss);
    let grads = tape.backward(loss);
    let after_probs = match side {
        Side::Primal => {
            let g = bundle.primal_student.params.gradients(&grads, &vars);
            opt.step(&mut bundle.primal_student.params.values, &g);
            bundle.eval_primal(&bundle.primal_student, l_rows).probs
        }
        Side::Dual => {
            let g = bundle.dual_student.params.gradients(&grads, &vars);
            opt.step(&mut bundle.dual_student.params.values, &g);
            bundle.eval_dual(&bundle.dual_student, l_rows).probs
        }
    };
    let after = labeled_ce(&after_probs, labels, classes);
    debug_assert_eq!(compute_feedback(&before_probs, &after_probs, labels, classes), (before - after).max(0.0));
    (uice, before, after)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub cases: Vec<CaseId>,
    /// `(frames, C)`.
    pub probs: Vec<f64>,
}

/// Argmax of the prediction network's probabilities, in input order.
pub fn predict(bundle: &ModelBundle, frames: &FrameSet) -> Result<Prediction> {
    bundle.check_dims(frames.dims())?;
    let rows: Vec<&[f64]> = (0..frames.len()).map(|i| frames.values(i)).collect();
    let out = bundle.eval_predictor(&rows);
    let c = bundle.config.classes;
    let cases = out
        .probs
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            CaseId::from_index(best)
        })
        .collect();
    Ok(Prediction { cases, probs: out.probs })
}

/// Accuracy and confusion matrix (rows are the true case).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub frames: usize,
    pub confusion: [[usize; NUM_CASES]; NUM_CASES],
}

impl Evaluation {
    pub fn per_case_accuracy(&self) -> [f64; NUM_CASES] {
        let mut out = [0.0; NUM_CASES];
        for (c, row) in self.confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            out[c] = if n == 0 { f64::NAN } else { row[c] as f64 / n as f64 };
        }
        out
    }
}

pub fn evaluate(bundle: &ModelBundle, frames: &FrameSet) -> Result<Evaluation> {
    let pred = predict(bundle, frames)?;
    let mut confusion = [[0usize; NUM_CASES]; NUM_CASES];
    let mut hits = 0;
    let mut total = 0;
    for (i, p) in pred.cases.iter().enumerate() {
        if let Some(t) = frames.label(i) {
            confusion[t.index()][p.index()] += 1;
            total += 1;
            if t == *p {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(BtsError::Empty("no labeled frames to evaluate"));
    }
    Ok(Evaluation { accuracy: hits as f64 / total as f64, frames: total, confusion })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDistances {
    pub round_id: u32,
    pub frames: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Drift,
    NoDrift,
}

#[derive(Clone, Debug)]
pub struct DriftReport {
    pub distances: Vec<f64>,
    pub per_round: Vec<RoundDistances>,
    /// Median of the last `window` distances.
    pub window_median: f64,
    pub window: usize,
    pub threshold: f64,
    pub verdict: Verdict,
    /// Frames to retrain on when drift was detected.
    pub retrain_request: Option<FrameSet>,
}

/// Squared distance of every frame's projection from the frozen center.
pub fn outlier_distances(bundle: &ModelBundle, frames: &FrameSet) -> Result<Vec<f64>> {
    bundle.check_dims(frames.dims())?;
    let center = bundle.center()?;
    let dim = center.len();
    let mut out = Vec::with_capacity(frames.len());
    let rows: Vec<&[f64]> = (0..frames.len()).map(|i| frames.values(i)).collect();
    for chunk in rows.chunks(256) {
        let proj = bundle.project_primal(chunk);
        for p in proj.chunks_exact(dim) {
            out.push(outlier_distance(p, Some(center))?);
        }
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drift verdict over a stream: the median of the last `window` outlier
/// distances is compared against `threshold`.
pub fn monitor_drift(bundle: &ModelBundle, frames: &FrameSet, window: usize, threshold: f64) -> Result<DriftReport> {
    if frames.is_empty() {
        return Err(BtsError::Empty("drift monitoring stream"));
    }
    if window == 0 {
        return Err(BtsError::Config("drift window must be at least 1".into()));
    }
    let distances = outlier_distances(bundle, frames)?;
    let mut rounds: Vec<u32> = Vec::new();
    let ids: Vec<u32> = (0..frames.len()).map(|i| frames.round_of(i)).collect();
    for r in &ids {
        if !rounds.contains(r) {
            rounds.push(*r);
        }
    }
    let per_round = rounds
        .iter()
        .map(|&r| {
            let d: Vec<f64> = distances.iter().zip(&ids).filter(|(_, id)| **id == r).map(|(d, _)| *d).collect();
            RoundDistances {
                round_id: r,
                frames: d.len(),
                min: d.iter().cloned().fold(f64::INFINITY, f64::min),
                max: d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean: d.iter().sum::<f64>() / d.len() as f64,
            }
        })
        .collect();
    let tail = &distances[distances.len().saturating_sub(window)..];
    let window_median = median(tail);
    let window = tail.len();
    let verdict = if window_median >= threshold { Verdict::Drift } else { Verdict::NoDrift };
    let retrain_request = (verdict == Verdict::Drift).then(|| frames.clone().with_split(crate::preprocess::Split::Unlabeled));
    Ok(DriftReport { distances, per_round, window_median, window, threshold, verdict, retrain_request })
}

/// Train again from fresh weights on the unchanged labeled set and a new
/// unlabeled set; the center is recomputed from the new data.
pub fn retrain(bundle: &ModelBundle, labeled: &FrameSet, unlabeled: &FrameSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    bundle.check_dims(unlabeled.dims())?;
    bundle.check_dims(labeled.dims())?;
    train(labeled, unlabeled, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{ExperimentSpec, Prepared};
    use crate::preprocess::Split;

    fn toy_net() -> NetConfig {
        NetConfig {
            tau: 10,
            subcarriers: 8,
            pairs: 2,
            model_width: 8,
            heads: 2,
            ff_width: 12,
            latent: 8,
            dual_widths: vec![4, 4],
            projection: vec![8, 4],
            ..NetConfig::default()
        }
    }

    fn toy_config(iterations: usize, batch: usize) -> TrainConfig {
        TrainConfig { iterations, batch, net: toy_net(), ..TrainConfig::default() }.with_seed(11)
    }

    fn toy_data() -> Prepared {
        let spec = ExperimentSpec { subcarriers: 8, pairs: 2, packets: 100, ..ExperimentSpec::default() };
        Prepared::new(&spec, 10).unwrap()
    }

    fn sets(data: &Prepared) -> (FrameSet, FrameSet) {
        (data.train_set(&[1], Split::Labeled).unwrap(), data.train_set(&[2], Split::Unlabeled).unwrap())
    }

    fn one_per_case(set: &FrameSet) -> FrameSet {
        let idx: Vec<usize> = CaseId::ALL
            .iter()
            .map(|c| (0..set.len()).find(|&i| set.label(i) == Some(*c)).unwrap())
            .collect();
        set.subset(&idx)
    }

    #[test]
    fn single_iteration_on_four_frames_logs_one_row() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let (l, u) = (one_per_case(&l), one_per_case(&u).with_split(Split::Unlabeled));
        assert_eq!((l.len(), u.len()), (4, 4));
        let out = train(&l, &u, &toy_config(1, 2)).unwrap();
        assert_eq!(out.log.len(), 1);
        let row = &out.log[0];
        assert_eq!(row.iteration, 0);
        assert!(row.losses.named().iter().all(|(_, v)| v.is_finite()));
        assert!(row.losses.tce_pt > 0.0 && row.losses.tce_dt > 0.0 && row.losses.ctve > 0.0);
        assert!(row.feedback.primal >= 0.0 && row.feedback.dual >= 0.0);

        let mut buf = Vec::new();
        write_log(&out.log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: IterationRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(back.same_trajectory(row));
    }

    #[test]
    fn identical_runs_give_identical_bundles_and_logs() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let cfg = toy_config(6, 4);
        let a = train(&l, &u, &cfg).unwrap();
        let b = train(&l, &u, &cfg).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.same_trajectory(y)));
        let dir = tempfile::tempdir().unwrap();
        a.bundle.save(&dir.path().join("a")).unwrap();
        b.bundle.save(&dir.path().join("b")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("a")).unwrap(), std::fs::read(dir.path().join("b")).unwrap());

        let c = train(&l, &u, &cfg.clone().with_seed(12)).unwrap();
        assert_ne!(a.bundle, c.bundle);
    }

    #[test]
    fn zero_feedback_decouples_teachers_from_unlabeled_data() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let mut cfg = toy_config(5, 4);
        cfg.force_zero_feedback = true;
        cfg.weights.lambda3 = 0.0;
        cfg.weights.lambda4 = 0.0;
        let semi = train_traced(&l, &u, &cfg, true).unwrap();
        let sup = train_traced(&l, &u, &TrainConfig { mode: TrainMode::Supervised, ..cfg.clone() }, true).unwrap();
        assert_eq!(semi.teacher_trace.len(), 5);
        assert_eq!(semi.teacher_trace, sup.teacher_trace);
        assert!(semi.log.iter().all(|r| r.feedback == FeedbackSignal::default() && r.losses.uice_pt == 0.0));
        let tce = |o: &TrainOutcome| o.log.iter().map(|r| (r.losses.tce_pt, r.losses.tce_dt)).collect::<Vec<_>>();
        assert_eq!(tce(&semi), tce(&sup));

        // Nonzero projection weights couple them again.
        cfg.weights.lambda3 = 1.0;
        let coupled = train_traced(&l, &u, &cfg, true).unwrap();
        assert_ne!(coupled.teacher_trace, sup.teacher_trace);
    }

    #[test]
    fn center_is_frozen_at_the_initial_projection_mean() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let cfg = toy_config(4, 4);
        let out = train(&l, &u, &cfg).unwrap();
        let fresh = ModelBundle::new(cfg.net.clone()).unwrap();
        let rows: Vec<&[f64]> = (0..u.len()).map(|i| u.values(i)).collect();
        let expected = init_center(&fresh.project_primal(&rows), cfg.net.projection_dim()).unwrap();
        assert_eq!(out.bundle.center.as_deref(), Some(expected.as_slice()));
        assert_ne!(out.bundle.projection, fresh.projection);
    }

    #[test]
    fn labeled_set_is_untouched_by_training_and_retraining() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let snapshot = |s: &FrameSet| s.iter().collect::<Vec<_>>();
        let before = snapshot(&l);
        let cfg = toy_config(3, 4);
        let out = train(&l, &u, &cfg).unwrap();
        let drifted = data.train_set(&[6], Split::Unlabeled).unwrap();
        let again = retrain(&out.bundle, &l, &drifted, &cfg).unwrap();
        assert_eq!(snapshot(&l), before);
        assert_ne!(again.bundle.center, out.bundle.center);
        assert_eq!(again.log.len(), 3);
    }

    #[test]
    fn retrain_rejects_other_dimensions() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let cfg = toy_config(1, 2);
        let out = train(&l, &u, &cfg).unwrap();
        let spec = ExperimentSpec { subcarriers: 6, pairs: 2, packets: 100, ..ExperimentSpec::default() };
        let other = Prepared::new(&spec, 10).unwrap().train_set(&[2], Split::Unlabeled).unwrap();
        assert!(matches!(retrain(&out.bundle, &l, &other, &cfg), Err(BtsError::DimensionMismatch { .. })));
    }

    #[test]
    fn missing_case_is_reported() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let idx: Vec<usize> = (0..l.len()).filter(|&i| l.label(i) != Some(CaseId::ROOM_B)).collect();
        let err = train(&l.subset(&idx), &u, &toy_config(1, 2)).err();
        assert!(matches!(err, Some(BtsError::MissingCases(ref m)) if m == &vec![3]));
    }

    #[test]
    fn exploding_updates_abort_with_the_iteration() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let mut cfg = toy_config(20, 4);
        cfg.optimizer.lr = 1e300;
        assert!(matches!(train(&l, &u, &cfg), Err(BtsError::NonFinite { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = toy_data();
        let (l, u) = sets(&data);
        for cfg in [
            TrainConfig { iterations: 0, ..toy_config(1, 2) },
            TrainConfig { batch: 0, ..toy_config(1, 2) },
            TrainConfig { drift_threshold: 0.0, ..toy_config(1, 2) },
            TrainConfig { drift_window: 0, ..toy_config(1, 2) },
        ] {
            assert!(matches!(train(&l, &u, &cfg), Err(BtsError::Config(_))));
        }
    }

    #[test]
    fn predictions_keep_input_order() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let out = train(&l, &u, &toy_config(3, 4)).unwrap();
        let frames = &data.get(3).unwrap().held_out;
        let p = predict(&out.bundle, frames).unwrap();
        assert_eq!(p.cases.len(), frames.len());
        assert_eq!(p.probs.len(), frames.len() * NUM_CASES);
        let rev: Vec<usize> = (0..frames.len()).rev().collect();
        let q = predict(&out.bundle, &frames.subset(&rev)).unwrap();
        let mut back = q.cases.clone();
        back.reverse();
        assert_eq!(back, p.cases);
        for (i, row) in p.probs.chunks_exact(NUM_CASES).enumerate() {
            let best = row[p.cases[i].index()];
            assert!(row.iter().all(|v| *v <= best));
        }

        let ev = evaluate(&out.bundle, frames).unwrap();
        assert_eq!(ev.confusion.iter().flatten().sum::<usize>(), frames.len());
    }

    #[test]
    fn drift_window_median_rule() {
        let data = toy_data();
        let (l, u) = sets(&data);
        let out = train(&l, &u, &toy_config(2, 4)).unwrap();
        let stream = &data.get(6).unwrap().held_out;
        let d = outlier_distances(&out.bundle, stream).unwrap();
        assert_eq!(d.len(), stream.len());

        // A window of one thresholds the last frame alone.
        let last = *d.last().unwrap();
        let at = monitor_drift(&out.bundle, stream, 1, last).unwrap();
        assert_eq!((at.verdict, at.window), (Verdict::Drift, 1));
        assert!(at.retrain_request.as_ref().is_some_and(|f| f.len() == stream.len()));
        let above = monitor_drift(&out.bundle, stream, 1, last * (1.0 + 1e-9)).unwrap();
        assert_eq!(above.verdict, Verdict::NoDrift);
        assert!(above.retrain_request.is_none());

        let full = monitor_drift(&out.bundle, stream, 10_000, 1.0).unwrap();
        assert_eq!(full.window, stream.len());
        assert_eq!(full.window_median, median(&d));
        assert_eq!(full.per_round.len(), 1);
        assert_eq!(full.per_round[0].round_id, 6);

        let empty = stream.subset(&[]);
        assert!(matches!(monitor_drift(&out.bundle, &empty, 5, 1.0), Err(BtsError::Empty(_))));
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sampler_covers_every_index_each_epoch() {
        let mut s = Sampler::new(7, 3);
        let mut seen = s.next_batch(7);
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(s.next_batch(20).len(), 20);
    }
}
