//! Six-round synthetic collection schedule and the method comparison harness.

use serde::{Deserialize, Serialize};

use crate::csi_sim::{concat, mix, simulate_round, CaseId, ChannelScenario, CsiDataset, DriftProfile, NUM_CASES};
use crate::error::{BtsError, Result};
use crate::preprocess::{frames_from_dataset, FrameSet, Split};
use crate::trainer::{evaluate, train, Architecture, Evaluation, TrainConfig, TrainMode};

pub const DEFAULT_PACKETS: usize = 2000;
pub const DEFAULT_ENV_SEED: u64 = 17;
pub const DEFAULT_DATA_SEED: u64 = 2;
/// Mean reflection off a person in the six-round schedule.
pub const SCHEDULE_PRESENCE_STATIC: f64 = 0.7;
pub const BENCH_SCHEMA_VERSION: u32 = 1;
/// Fraction of each case segment used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Which static geometry a round starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// The environment's original geometry.
    Base,
    /// The geometry a previous round ended up with after its drift.
    SameAs(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_id: u32,
    pub layout: Layout,
    pub drift: DriftProfile,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub env_seed: u64,
    pub seed: u64,
    pub packets: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    /// Relative std of the per-round static gain perturbation.
    pub round_jitter: f64,
    /// Std of the per-round shift of the person-induced path delays (seconds).
    pub position_jitter: f64,
    /// Std of the per-round phase rotation of the static paths (radians).
    pub phase_jitter: f64,
    /// Mean reflection off a person relative to the fluctuating part.
    pub presence_static: f64,
    pub rounds: Vec<RoundPlan>,
    pub labeled_rounds: Vec<u32>,
    pub unlabeled_rounds: Vec<u32>,
    pub eval_rounds: Vec<u32>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let plan = |round_id, layout, drift, tag: &str| RoundPlan { round_id, layout, drift, tag: tag.to_string() };
        ExperimentSpec {
            env_seed: DEFAULT_ENV_SEED,
            seed: DEFAULT_DATA_SEED,
            packets: DEFAULT_PACKETS,
            subcarriers: crate::csi_sim::DEFAULT_SUBCARRIERS,
            pairs: crate::csi_sim::DEFAULT_PAIRS,
            round_jitter: crate::csi_sim::DEFAULT_ROUND_JITTER,
            position_jitter: crate::csi_sim::DEFAULT_POSITION_JITTER,
            phase_jitter: crate::csi_sim::DEFAULT_PHASE_JITTER,
            presence_static: SCHEDULE_PRESENCE_STATIC,
            rounds: vec![
                plan(1, Layout::Base, DriftProfile::None, "sunny"),
                plan(2, Layout::Base, DriftProfile::None, "sunny"),
                plan(3, Layout::Base, DriftProfile::None, "sunny"),
                plan(4, Layout::Base, DriftProfile::Mild, "rainy, layout changed"),
                plan(5, Layout::SameAs(4), DriftProfile::None, "sunny, layout of round 4"),
                plan(6, Layout::SameAs(4), DriftProfile::Severe, "antenna turned"),
            ],
            labeled_rounds: vec![1],
            unlabeled_rounds: vec![2],
            eval_rounds: vec![2, 3, 4, 5, 6],
        }
    }
}

impl ExperimentSpec {
    pub fn round(&self, id: u32) -> Result<&RoundPlan> {
        self.rounds
            .iter()
            .find(|r| r.round_id == id)
            .ok_or_else(|| BtsError::Config(format!("round {id} is not part of the schedule")))
    }

    pub fn round_seed(&self, id: u32) -> u64 {
        mix(self.seed, 0x5EED_0000 + id as u64)
    }

    /// Scenario of one round, following layout references back to the base.
    pub fn scenario(&self, id: u32) -> Result<ChannelScenario> {
        self.scenario_at(id, 0)
    }

    fn scenario_at(&self, id: u32, depth: usize) -> Result<ChannelScenario> {
        if depth > self.rounds.len() {
            return Err(BtsError::Config("round layouts refer to each other in a cycle".into()));
        }
        let plan = self.round(id)?;
        let start = match plan.layout {
            Layout::Base => {
                let mut base = ChannelScenario::indoor_with_dims(self.env_seed, self.subcarriers, self.pairs);
                base.round_jitter = self.round_jitter;
                base.position_jitter = self.position_jitter;
                base.phase_jitter = self.phase_jitter;
                base.presence_static = self.presence_static;
                base
            }
            Layout::SameAs(prev) => self.scenario_at(prev, depth + 1)?.materialize_drift(),
        };
        Ok(start.with_seed(self.round_seed(id)).with_drift(plan.drift))
    }

    /// All four cases of one round, recorded back to back.
    pub fn generate_round(&self, id: u32) -> Result<CsiDataset> {
        let plan = self.round(id)?;
        let scenario = self.scenario(id)?;
        let parts = CaseId::ALL
            .iter()
            .map(|&c| simulate_round(&scenario, self.packets, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(concat(&parts)?.with_round(id, format!("round {id}: {}", plan.tag)))
    }

    pub fn generate(&self) -> Result<Vec<CsiDataset>> {
        self.rounds.iter().map(|r| self.generate_round(r.round_id)).collect()
    }
}

/// Training and held-out frames of one round.
#[derive(Clone, Debug)]
pub struct RoundFrames {
    pub round_id: u32,
    /// Leading part of every segment, stride 1.
    pub train: FrameSet,
    /// Trailing part of every segment, stride `tau`.
    pub held_out: FrameSet,
}

pub fn split_round(ds: &CsiDataset, tau: usize) -> Result<RoundFrames> {
    Ok(RoundFrames {
        round_id: ds.round_id,
        train: frames_from_dataset(ds, tau, 1, 0.0..TRAIN_FRACTION)?,
        held_out: frames_from_dataset(ds, tau, tau, TRAIN_FRACTION..1.0)?,
    })
}

/// Concatenate the training parts of several rounds.
pub fn merge_train(rounds: &[&RoundFrames], split: Split) -> Result<FrameSet> {
    let first = rounds.first().ok_or(BtsError::Empty("no rounds to merge"))?;
    let mut set = first.train.clone().with_split(split);
    for r in &rounds[1..] {
        set.extend(&r.train)?;
    }
    Ok(set.with_split(split))
}

/// Methods compared by the bench.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Both teacher-student pairs with every loss.
    Bts,
    /// Teachers only, on the labeled rounds.
    Supervised,
    /// Teachers only, with the unlabeled rounds' labels revealed.
    SupervisedAll,
    SinglePrimal,
    SingleDual,
    /// Both pairs without the confidence distribution.
    BtsWithoutCd,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Bts, Method::Supervised, Method::SupervisedAll, Method::SinglePrimal, Method::SingleDual, Method::BtsWithoutCd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bts => "bts",
            Method::Supervised => "supervised",
            Method::SupervisedAll => "supervised_all",
            Method::SinglePrimal => "single_primal_ts",
            Method::SingleDual => "single_dual_ts",
            Method::BtsWithoutCd => "bts_without_cd",
        }
    }

    pub fn parse(name: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| BtsError::Config(format!("unknown method {name:?}")))
    }

    /// Training configuration for this method derived from the base one.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Method::Bts => {}
            Method::Supervised | Method::SupervisedAll => cfg.mode = TrainMode::Supervised,
            Method::SinglePrimal => cfg.architecture = Architecture::PrimalOnly,
            Method::SingleDual => cfg.architecture = Architecture::DualOnly,
            Method::BtsWithoutCd => cfg.use_confidence = false,
        }
        cfg
    }
}

/// Frames of every round of a spec, generated once.
pub struct Prepared {
    pub rounds: Vec<RoundFrames>,
}

impl Prepared {
    pub fn new(spec: &ExperimentSpec, tau: usize) -> Result<Self> {
        let rounds = spec
            .generate()?
            .iter()
            .map(|ds| split_round(ds, tau))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { rounds })
    }

    pub fn get(&self, id: u32) -> Result<&RoundFrames> {
        self.rounds
            .iter()
            .find(|r| r.round_id == id)
            .ok_or_else(|| BtsError::Config(format!("round {id} was not generated")))
    }

    pub fn train_set(&self, ids: &[u32], split: Split) -> Result<FrameSet> {
        let rounds = ids.iter().map(|&id| self.get(id)).collect::<Result<Vec<_>>>()?;
        merge_train(&rounds, split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundScore {
    pub round_id: u32,
    pub accuracy: f64,
    pub per_case: [f64; NUM_CASES],
    pub confusion: [[usize; NUM_CASES]; NUM_CASES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub rounds: Vec<RoundScore>,
}

impl BenchRow {
    pub fn accuracy(&self, round_id: u32) -> Option<f64> {
        self.rounds.iter().find(|r| r.round_id == round_id).map(|r| r.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub schema_version: u32,
    pub labeled_rounds: Vec<u32>,
    pub unlabeled_rounds: Vec<u32>,
    pub eval_rounds: Vec<u32>,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Plain-text table, one line per method.
    pub fn render(&self) -> String {
        let mut out = format!("schema_version {}\nmethod", self.schema_version);
        for r in &self.eval_rounds {
            out.push_str(&format!("\tround{r}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.method.name());
            for r in &self.eval_rounds {
                match row.accuracy(*r) {
                    Some(a) => out.push_str(&format!("\t{:.4}", a)),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Score a trained bundle on the held-out part of the given rounds.
pub fn score_rounds(bundle: &crate::nets::ModelBundle, data: &Prepared, rounds: &[u32]) -> Result<Vec<RoundScore>> {
    rounds
        .iter()
        .map(|&id| {
            let ev: Evaluation = evaluate(bundle, &data.get(id)?.held_out)?;
            Ok(RoundScore { round_id: id, accuracy: ev.accuracy, per_case: ev.per_case_accuracy(), confusion: ev.confusion })
        })
        .collect()
}

/// Train one method under the experiment's round assignment.
pub fn run_method(spec: &ExperimentSpec, data: &Prepared, method: Method, base: &TrainConfig) -> Result<crate::trainer::TrainOutcome> {
    let cfg = method.configure(base);
    let labeled_ids: Vec<u32> = if method == Method::SupervisedAll {
        spec.labeled_rounds.iter().chain(&spec.unlabeled_rounds).copied().collect()
    } else {
        spec.labeled_rounds.clone()
    };
    let labeled = data.train_set(&labeled_ids, Split::Labeled)?;
    let unlabeled = data.train_set(&spec.unlabeled_rounds, Split::Unlabeled)?;
    train(&labeled, &unlabeled, &cfg)
}

pub fn bench(spec: &ExperimentSpec, data: &Prepared, base: &TrainConfig, methods: &[Method]) -> Result<BenchTable> {
    let mut rows = Vec::with_capacity(methods.len());
    for &m in methods {
        log::info!("bench: training {}", m.name());
        let outcome = run_method(spec, data, m, base)?;
        rows.push(BenchRow { method: m, rounds: score_rounds(&outcome.bundle, data, &spec.eval_rounds)? });
    }
    Ok(BenchTable {
        schema_version: BENCH_SCHEMA_VERSION,
        labeled_rounds: spec.labeled_rounds.clone(),
        unlabeled_rounds: spec.unlabeled_rounds.clone(),
        eval_rounds: spec.eval_rounds.clone(),
        rows,
    })
}
