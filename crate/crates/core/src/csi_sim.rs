//! Synthetic MIMO-OFDM CSI amplitudes for the two-room presence problem.
//!
//! The empty-room channel is a static multipath sum plus AWGN. Every occupied
//! room adds one time-varying path whose complex gain follows a smooth AR(1)
//! random walk and whose delay depends on the room, so occupancy raises the
//! temporal variance of the amplitude and each room leaves its own spectral
//! signature. Round-to-round drift perturbs the static geometry.
//!
//! On disk a dataset is a directory holding `meta` (TOML) and `csi.f32`
//! (little-endian `f32`, row-major `(T, S, K)`).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BtsError, Result};

pub const DEFAULT_SUBCARRIERS: usize = 56;
pub const DEFAULT_PAIRS: usize = 4;
pub const DEFAULT_SAMPLE_RATE: f64 = 10.0;
pub const NUM_CASES: usize = 4;
pub const DEFAULT_ROUND_JITTER: f64 = 0.03;
pub const DEFAULT_POSITION_JITTER: f64 = 6e-9;
pub const DEFAULT_PHASE_JITTER: f64 = 0.0;
pub const DEFAULT_PRESENCE_STATIC: f64 = 0.0;
/// Scale of the person-induced path gain relative to the unit-power static channel.
pub const DEFAULT_DYNAMIC_GAIN: f64 = 0.5;
/// 802.11n 20 MHz subcarrier spacing.
pub const SUBCARRIER_SPACING_HZ: f64 = 312.5e3;

const META_FILE: &str = "meta";
const DATA_FILE: &str = "csi.f32";
const FORMAT_VERSION: u32 = 1;
/// Window length assumed when warning about short recordings.
const NOMINAL_WINDOW: usize = 50;

/// Presence case: 1 empty, 2 room A only, 3 room B only, 4 both rooms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CaseId(u8);

impl CaseId {
    pub const EMPTY: CaseId = CaseId(1);
    pub const ROOM_A: CaseId = CaseId(2);
    pub const ROOM_B: CaseId = CaseId(3);
    pub const BOTH: CaseId = CaseId(4);
    pub const ALL: [CaseId; NUM_CASES] = [Self::EMPTY, Self::ROOM_A, Self::ROOM_B, Self::BOTH];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_CASES as u8).contains(&id) {
            Ok(CaseId(id))
        } else {
            Err(BtsError::InvalidCase(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_CASES, "class index {index} out of range");
        CaseId(index as u8 + 1)
    }

    pub fn occupies(self, room: Room) -> bool {
        match room {
            Room::A => matches!(self.0, 2 | 4),
            Room::B => matches!(self.0, 3 | 4),
        }
    }
}

impl TryFrom<u8> for CaseId {
    type Error = BtsError;
    fn try_from(v: u8) -> Result<Self> {
        CaseId::new(v)
    }
}

impl From<CaseId> for u8 {
    fn from(c: CaseId) -> u8 {
        c.0
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Room {
    A,
    B,
}

impl Room {
    pub const BOTH: [Room; 2] = [Room::A, Room::B];

    fn index(self) -> usize {
        match self {
            Room::A => 0,
            Room::B => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DriftProfile {
    #[default]
    None,
    /// Static gains scaled by a random factor in [0.8, 1.2] (weather).
    Mild,
    /// All static path delays resampled (antenna reorientation).
    Severe,
}

impl FromStr for DriftProfile {
    type Err = BtsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DriftProfile::None),
            "mild" => Ok(DriftProfile::Mild),
            "severe" => Ok(DriftProfile::Severe),
            other => Err(BtsError::Config(format!("unknown drift profile {other:?}"))),
        }
    }
}

impl fmt::Display for DriftProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DriftProfile::None => "none",
            DriftProfile::Mild => "mild",
            DriftProfile::Severe => "severe",
        })
    }
}

/// How a person in one room couples into the link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomResponse {
    /// Nominal delay of the person-induced path, per antenna pair (seconds).
    pub delays: Vec<f64>,
    /// Relative strength of the induced path; multiplied by `dynamic_gain_scale`.
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub subcarriers: usize,
    pub pairs: usize,
    pub sample_rate: f64,
    pub num_paths: usize,
    /// Complex gain of every static path, pair-major: `[k * num_paths + l]`.
    pub static_gains: Vec<Complex64>,
    /// Delay of every static path (seconds).
    pub static_delays: Vec<f64>,
    /// Room A then room B.
    pub rooms: [RoomResponse; 2],
    pub dynamic_gain_scale: f64,
    /// AR(1) coefficient of the person-induced gain walk, per packet.
    pub walk_coherence: f64,
    pub drift_profile: DriftProfile,
    /// Relative std of the per-round static gain perturbation.
    pub round_jitter: f64,
    /// Std of the per-round shift of each room's path delay (seconds).
    pub position_jitter: f64,
    /// Std of the per-round phase rotation of every static path (radians).
    pub phase_jitter: f64,
    /// Magnitude of the mean reflection off a person, relative to the
    /// fluctuating part. Its phase is redrawn every round.
    pub presence_static: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Static geometry after drift and per-round perturbations are applied.
struct RoundGeometry {
    gains: Vec<Complex64>,
    delays: Vec<f64>,
    /// `[room][pair]`
    room_delays: [Vec<f64>; 2],
}

impl ChannelScenario {
    /// Random indoor geometry with default dimensions.
    pub fn indoor(env_seed: u64) -> Self {
        Self::indoor_with_dims(env_seed, DEFAULT_SUBCARRIERS, DEFAULT_PAIRS)
    }

    pub fn indoor_with_dims(env_seed: u64, subcarriers: usize, pairs: usize) -> Self {
        let num_paths = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(env_seed, 0xE1F0));
        let static_delays = sample_delays(&mut rng, num_paths);
        let mut static_gains = Vec::with_capacity(pairs * num_paths);
        for _ in 0..pairs {
            let raw: Vec<Complex64> = static_delays
                .iter()
                .map(|d| complex_normal(&mut rng) * (-d / 60e-9).exp())
                .collect();
            let power: f64 = raw.iter().map(|g| g.norm_sqr()).sum();
            static_gains.extend(raw.iter().map(|g| g / power.sqrt()));
        }
        let mut room_delays = |base: f64| -> Vec<f64> {
            (0..pairs).map(|_| base + rng.random_range(-4e-9..4e-9)).collect()
        };
        let rooms = [
            RoomResponse { delays: room_delays(30e-9), sensitivity: 1.0 },
            RoomResponse { delays: room_delays(95e-9), sensitivity: 0.55 },
        ];
        ChannelScenario {
            subcarriers,
            pairs,
            sample_rate: DEFAULT_SAMPLE_RATE,
            num_paths,
            static_gains,
            static_delays,
            rooms,
            dynamic_gain_scale: DEFAULT_DYNAMIC_GAIN,
            walk_coherence: 0.9,
            drift_profile: DriftProfile::None,
            round_jitter: DEFAULT_ROUND_JITTER,
            position_jitter: DEFAULT_POSITION_JITTER,
            phase_jitter: DEFAULT_PHASE_JITTER,
            presence_static: DEFAULT_PRESENCE_STATIC,
            noise_std: 0.01,
            seed: env_seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_drift(mut self, drift: DriftProfile) -> Self {
        self.drift_profile = drift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BtsError::Config(m.to_string()));
        if self.num_paths < 1 {
            return bad("num_paths must be at least 1");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if !(self.dynamic_gain_scale >= 0.0) {
            return bad("dynamic_gain_scale must be non-negative");
        }
        if self.subcarriers == 0 || self.pairs == 0 {
            return bad("subcarriers and pairs must be positive");
        }
        if self.static_gains.len() != self.pairs * self.num_paths
            || self.static_delays.len() != self.num_paths
        {
            return bad("static path tables do not match num_paths and pairs");
        }
        if self.rooms.iter().any(|r| r.delays.len() != self.pairs) {
            return bad("room delay tables must have one entry per antenna pair");
        }
        if !(0.0..1.0).contains(&self.walk_coherence) {
            return bad("walk_coherence must lie in [0, 1)");
        }
        Ok(())
    }

    /// Scenario whose static geometry already includes this scenario's drift,
    /// with the drift profile reset to `None`. Later rounds that keep the
    /// drifted layout are built from this.
    pub fn materialize_drift(&self) -> ChannelScenario {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0xD81F));
        let mut out = self.clone();
        apply_drift(&mut out.static_gains, &mut out.static_delays, self.drift_profile, &mut rng);
        out.drift_profile = DriftProfile::None;
        out
    }

    fn round_geometry(&self) -> RoundGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0xD81F));
        let mut gains = self.static_gains.clone();
        let mut delays = self.static_delays.clone();
        apply_drift(&mut gains, &mut delays, self.drift_profile, &mut rng);
        // Round-level perturbation drawn from an independent stream so that
        // materialize_drift() followed by DriftProfile::None reproduces the layout.
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x2047));
        for g in gains.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *g *= 1.0 + self.round_jitter * n;
        }
        let room_delays = [0, 1].map(|r| {
            let shift: f64 = StandardNormal.sample(&mut rng);
            self.rooms[r]
                .delays
                .iter()
                .map(|d| d + self.position_jitter * shift)
                .collect()
        });
        if self.phase_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x9A5E));
            for g in gains.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *g *= Complex64::from_polar(1.0, self.phase_jitter * n);
            }
        }
        RoundGeometry { gains, delays, room_delays }
    }

    fn subcarrier_frequency(&self, s: usize) -> f64 {
        (s as f64 - (self.subcarriers as f64 - 1.0) / 2.0) * SUBCARRIER_SPACING_HZ
    }
}

fn apply_drift(gains: &mut [Complex64], delays: &mut [f64], drift: DriftProfile, rng: &mut ChaCha8Rng) {
    match drift {
        DriftProfile::None => {}
        DriftProfile::Mild => {
            for g in gains.iter_mut() {
                *g *= rng.random_range(0.8..=1.2);
            }
        }
        DriftProfile::Severe => {
            let fresh = sample_delays(rng, delays.len());
            delays.copy_from_slice(&fresh);
        }
    }
}

fn sample_delays(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(5e-9..150e-9)).collect()
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// SplitMix64 finalizer applied to a combined key.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Contiguous run of packets recorded under one case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub case: CaseId,
}

/// One recording of amplitude CSI, row-major `(T, S, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiDataset {
    pub amplitudes: Vec<f32>,
    pub packets: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    /// Ground truth; always recorded, consumed for training only when `labeled`.
    pub segments: Vec<Segment>,
    pub labeled: bool,
    pub round_id: u32,
    pub sample_rate: f64,
    pub environment_tag: String,
    pub seed: u64,
}

impl CsiDataset {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.packets, self.subcarriers, self.pairs)
    }

    pub fn at(&self, t: usize, s: usize, k: usize) -> f32 {
        self.amplitudes[(t * self.subcarriers + s) * self.pairs + k]
    }

    /// Case of packet `t`, if covered by a segment.
    pub fn label_at(&self, t: usize) -> Option<CaseId> {
        self.segments
            .iter()
            .find(|seg| t >= seg.start && t < seg.start + seg.len)
            .map(|seg| seg.case)
    }

    pub fn with_round(mut self, round_id: u32, tag: impl Into<String>) -> Self {
        self.round_id = round_id;
        self.environment_tag = tag.into();
        self
    }

    pub fn with_labeled(mut self, labeled: bool) -> Self {
        self.labeled = labeled;
        self
    }

    /// Per-(s, k) temporal mean amplitude, flattened in `(S, K)` order.
    pub fn mean_profile(&self) -> Vec<f64> {
        let sk = self.subcarriers * self.pairs;
        let mut acc = vec![0.0; sk];
        for row in self.amplitudes.chunks_exact(sk) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        acc.iter().map(|a| a / self.packets as f64).collect()
    }

    /// Mean over (s, k) of the temporal variance of the amplitude.
    pub fn mean_temporal_variance(&self) -> f64 {
        let sk = self.subcarriers * self.pairs;
        let mean = self.mean_profile();
        let mut var = vec![0.0; sk];
        for row in self.amplitudes.chunks_exact(sk) {
            for ((v, &x), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x as f64 - m;
                *v += d * d;
            }
        }
        var.iter().sum::<f64>() / (sk as f64 * self.packets as f64)
    }
}

/// Generate `packets` packets of case `case` under `scenario`.
///
/// Deterministic in `(scenario, packets, case)`.
pub fn simulate_round(scenario: &ChannelScenario, packets: usize, case: CaseId) -> Result<CsiDataset> {
    scenario.validate()?;
    if packets == 0 {
        return Err(BtsError::Empty("packet count must be at least 1"));
    }
    if packets < NOMINAL_WINDOW {
        log::warn!("simulating {packets} packets, fewer than the nominal window of {NOMINAL_WINDOW}");
    }
    let (s_n, k_n, l_n) = (scenario.subcarriers, scenario.pairs, scenario.num_paths);
    let geo = scenario.round_geometry();

    // Static response and the per-subcarrier phase ramps.
    let freqs: Vec<f64> = (0..s_n).map(|s| scenario.subcarrier_frequency(s)).collect();
    let mut h_static = vec![Complex64::new(0.0, 0.0); s_n * k_n];
    for s in 0..s_n {
        for k in 0..k_n {
            h_static[s * k_n + k] = (0..l_n)
                .map(|l| geo.gains[k * l_n + l] * Complex64::from_polar(1.0, -2.0 * PI * freqs[s] * geo.delays[l]))
                .sum();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, 0xCA5E_0000 + case.get() as u64));
    let active: Vec<Room> = Room::BOTH.into_iter().filter(|r| case.occupies(*r)).collect();
    let a = scenario.walk_coherence;
    let innov = (1.0 - a * a).sqrt();
    let mut walk: Vec<Complex64> = active.iter().map(|_| complex_normal(&mut rng)).collect();
    // Where the person tends to stay in each room this round; shared by every case.
    let mut stay_rng = ChaCha8Rng::seed_from_u64(mix(scenario.seed, 0x57A7));
    let stay: [Complex64; 2] = [0, 1].map(|_| {
        let phase: f64 = stay_rng.random_range(0.0..2.0 * PI);
        Complex64::from_polar(scenario.presence_static, phase)
    });
    // Small body motion along the path, AR(1) around the nominal delay.
    let mut wobble: Vec<f64> = vec![0.0; active.len()];

    let mut amplitudes = Vec::with_capacity(packets * s_n * k_n);
    let mut h = h_static.clone();
    for _t in 0..packets {
        h.copy_from_slice(&h_static);
        for (i, room) in active.iter().enumerate() {
            walk[i] = walk[i] * a + complex_normal(&mut rng) * innov;
            let n: f64 = StandardNormal.sample(&mut rng);
            wobble[i] = 0.95 * wobble[i] + 0.3e-9 * n;
            let gain = (walk[i] + stay[room.index()]) * (scenario.dynamic_gain_scale * scenario.rooms[room.index()].sensitivity);
            for k in 0..k_n {
                let d = geo.room_delays[room.index()][k] + wobble[i];
                for s in 0..s_n {
                    h[s * k_n + k] += gain * Complex64::from_polar(1.0, -2.0 * PI * freqs[s] * d);
                }
            }
        }
        for v in h.iter() {
            let noisy = if scenario.noise_std > 0.0 {
                *v + complex_normal(&mut rng) * scenario.noise_std
            } else {
                *v
            };
            amplitudes.push(noisy.norm() as f32);
        }
    }

    Ok(CsiDataset {
        amplitudes,
        packets,
        subcarriers: s_n,
        pairs: k_n,
        segments: vec![Segment { start: 0, len: packets, case }],
        labeled: true,
        round_id: 0,
        sample_rate: scenario.sample_rate,
        environment_tag: format!("synthetic drift={}", scenario.drift_profile),
        seed: scenario.seed,
    })
}

/// Pearson correlation of two equally long profiles.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    round_id: u32,
    subcarriers: usize,
    pairs: usize,
    packets: usize,
    sample_rate: f64,
    labeled: bool,
    environment_tag: String,
    seed: u64,
    checksum: String,
    segments: Vec<Segment>,
}

fn checksum(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

pub fn write_dataset(ds: &CsiDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| BtsError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(ds.amplitudes.len() * 4);
    for v in &ds.amplitudes {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        round_id: ds.round_id,
        subcarriers: ds.subcarriers,
        pairs: ds.pairs,
        packets: ds.packets,
        sample_rate: ds.sample_rate,
        labeled: ds.labeled,
        environment_tag: ds.environment_tag.clone(),
        seed: ds.seed,
        checksum: checksum(&bytes),
        segments: ds.segments.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| BtsError::Meta {
        path: dir.join(META_FILE),
        reason: e.to_string(),
    })?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &bytes).map_err(|e| BtsError::io(&data_path, e))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| BtsError::io(&meta_path, e))?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| BtsError::io(&meta_path, e))?;
    let meta: Meta = toml::from_str(&text).map_err(|e| BtsError::Meta {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(BtsError::Meta {
            path: meta_path,
            reason: format!("unsupported format_version {}", meta.format_version),
        });
    }
    Ok(meta)
}

/// Load a dataset directory. Checksum mismatches do not fail the read; use
/// [`dataset_integrity`] to detect them.
pub fn read_dataset(dir: &Path) -> Result<CsiDataset> {
    let meta = read_meta(dir)?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| BtsError::io(&data_path, e))?;
    let count = meta.packets * meta.subcarriers * meta.pairs;
    if bytes.len() as u64 != count as u64 * 4 {
        return Err(BtsError::ShapeMismatch {
            context: "read_dataset",
            path: data_path,
            declared: vec![meta.packets, meta.subcarriers, meta.pairs],
            expected_bytes: count as u64 * 4,
            actual_bytes: bytes.len() as u64,
        });
    }
    let amplitudes = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(CsiDataset {
        amplitudes,
        packets: meta.packets,
        subcarriers: meta.subcarriers,
        pairs: meta.pairs,
        segments: meta.segments,
        labeled: meta.labeled,
        round_id: meta.round_id,
        sample_rate: meta.sample_rate,
        environment_tag: meta.environment_tag,
        seed: meta.seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Integrity {
    pub recorded: String,
    pub actual: String,
}

impl Integrity {
    pub fn ok(&self) -> bool {
        self.recorded == self.actual
    }
}

/// Compare the checksum recorded in `meta` with the bytes currently on disk.
pub fn dataset_integrity(dir: &Path) -> Result<Integrity> {
    let meta = read_meta(dir)?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| BtsError::io(&data_path, e))?;
    Ok(Integrity {
        recorded: meta.checksum,
        actual: checksum(&bytes),
    })
}

/// Concatenate case recordings of one round into a single multi-segment dataset.
pub fn concat(parts: &[CsiDataset]) -> Result<CsiDataset> {
    let first = parts.first().ok_or(BtsError::Empty("no datasets to concatenate"))?;
    let mut out = CsiDataset {
        amplitudes: Vec::new(),
        packets: 0,
        subcarriers: first.subcarriers,
        pairs: first.pairs,
        segments: Vec::new(),
        labeled: first.labeled,
        round_id: first.round_id,
        sample_rate: first.sample_rate,
        environment_tag: first.environment_tag.clone(),
        seed: first.seed,
    };
    for p in parts {
        if (p.subcarriers, p.pairs) != (out.subcarriers, out.pairs) {
            return Err(BtsError::Shape {
                op: "concat",
                expected: vec![out.subcarriers, out.pairs],
                actual: vec![p.subcarriers, p.pairs],
            });
        }
        for seg in &p.segments {
            out.segments.push(Segment { start: seg.start + out.packets, ..*seg });
        }
        out.amplitudes.extend_from_slice(&p.amplitudes);
        out.packets += p.packets;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> ChannelScenario {
        let mut sc = ChannelScenario::indoor(seed);
        sc.noise_std = 0.0;
        sc.dynamic_gain_scale = 0.0;
        sc
    }

    #[test]
    fn empty_noiseless_channel_is_constant() {
        let ds = simulate_round(&quiet(3), 64, CaseId::EMPTY).unwrap();
        let sk = ds.subcarriers * ds.pairs;
        let first = &ds.amplitudes[..sk];
        for row in ds.amplitudes.chunks_exact(sk) {
            assert_eq!(row, first);
        }
        assert_eq!(ds.mean_temporal_variance(), 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sc = ChannelScenario::indoor(11);
        let a = simulate_round(&sc, 300, CaseId::BOTH).unwrap();
        let b = simulate_round(&sc, 300, CaseId::BOTH).unwrap();
        assert_eq!(a, b);
        let c = simulate_round(&sc.clone().with_seed(12), 300, CaseId::BOTH).unwrap();
        assert_ne!(a.amplitudes, c.amplitudes);
    }

    #[test]
    fn occupancy_raises_variance() {
        let mut sc = ChannelScenario::indoor(5);
        sc.noise_std = 0.01;
        sc.dynamic_gain_scale = 0.5;
        let v: Vec<f64> = CaseId::ALL
            .iter()
            .map(|c| simulate_round(&sc, 2000, *c).unwrap().mean_temporal_variance())
            .collect();
        assert!(v[3] >= 5.0 * v[0], "variance ratio {}", v[3] / v[0]);
        assert!(v[0] < v[1] && v[0] < v[2]);
        assert!(v[1] < v[3] && v[2] < v[3]);
    }

    #[test]
    fn invalid_case_rejected() {
        assert!(matches!(CaseId::new(0), Err(BtsError::InvalidCase(0))));
        assert!(matches!(CaseId::new(5), Err(BtsError::InvalidCase(5))));
    }

    #[test]
    fn drift_profiles_and_profile_correlation() {
        let base = ChannelScenario::indoor(17);
        let r1 = simulate_round(&base.clone().with_seed(100), 400, CaseId::EMPTY).unwrap();
        let r2 = simulate_round(&base.clone().with_seed(101), 400, CaseId::EMPTY).unwrap();
        let sev = simulate_round(
            &base.clone().with_seed(102).with_drift(DriftProfile::Severe),
            400,
            CaseId::EMPTY,
        )
        .unwrap();
        let same = pearson(&r1.mean_profile(), &r2.mean_profile());
        let drifted = pearson(&r1.mean_profile(), &sev.mean_profile());
        assert!(same >= 0.95, "none-drift correlation {same}");
        assert!(drifted <= 0.5, "severe-drift correlation {drifted}");
    }

    #[test]
    fn materialized_drift_matches_in_place_drift() {
        let sc = ChannelScenario::indoor(4).with_seed(9).with_drift(DriftProfile::Mild);
        let direct = simulate_round(&sc, 50, CaseId::ROOM_B).unwrap();
        let via = simulate_round(&sc.materialize_drift(), 50, CaseId::ROOM_B).unwrap();
        assert_eq!(direct.amplitudes, via.amplitudes);
    }

    #[test]
    fn round_trip_small_array() {
        let dir = tempfile::tempdir().unwrap();
        let ds = CsiDataset {
            amplitudes: vec![0.5, 1.25, 2.0, 3.5, 4.0, 1e-7],
            packets: 3,
            subcarriers: 2,
            pairs: 1,
            segments: vec![Segment { start: 0, len: 3, case: CaseId::ROOM_A }],
            labeled: false,
            round_id: 7,
            sample_rate: 10.0,
            environment_tag: "bench".into(),
            seed: 42,
        };
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(DATA_FILE)).unwrap().len(), 24);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let integrity = dataset_integrity(dir.path()).unwrap();
        assert!(integrity.ok());
        // sha256 of the 24 payload bytes, computed independently of this crate.
        assert_eq!(
            integrity.recorded,
            "sha256:babd23dec27bd629917a90013a04ceed6457ffc9921de04e7492b04f57f64a47"
        );
    }

    #[test]
    fn truncated_payload_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = simulate_round(&ChannelScenario::indoor_with_dims(1, 4, 2), 100, CaseId::EMPTY).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..99 * 4 * 2 * 4]).unwrap();
        match read_dataset(dir.path()) {
            Err(BtsError::ShapeMismatch { declared, actual_bytes, expected_bytes, .. }) => {
                assert_eq!(declared, vec![100, 4, 2]);
                assert_eq!(expected_bytes, 3200);
                assert_eq!(actual_bytes, 3168);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_is_flagged_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ds = simulate_round(&ChannelScenario::indoor_with_dims(2, 4, 2), 10, CaseId::BOTH).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let recorded = dataset_integrity(dir.path()).unwrap().recorded;
        let path = dir.path().join(DATA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[17] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_ne!(back.amplitudes, ds.amplitudes);
        let integrity = dataset_integrity(dir.path()).unwrap();
        assert_eq!(integrity.recorded, recorded);
        assert!(!integrity.ok());
        assert!(integrity.actual.starts_with("sha256:"));
    }

    #[test]
    fn concat_offsets_segments() {
        let sc = ChannelScenario::indoor_with_dims(8, 4, 2);
        let parts: Vec<_> = CaseId::ALL.iter().map(|c| simulate_round(&sc, 20, *c).unwrap()).collect();
        let all = concat(&parts).unwrap();
        assert_eq!(all.packets, 80);
        assert_eq!(all.label_at(45), Some(CaseId::ROOM_B));
        assert_eq!(all.segments[3].start, 60);
    }
}
