//! Synthetic data with planted structure for every stage.
//!
//! Matrix level: nonnegative lifestyles `U*`, Gaussian loadings `Vs*`, `Vm*`
//! with optional null columns, and the derived `S` and `M`. Event level: tower
//! sites, a POI fixture, call logs and card transactions sampled from the
//! planted matrices and written in the formats the ingest and geo stages read.
//!
//! Independent RNG streams drive the matrices, towers, POIs, calls and
//! transactions, so changing an event-level knob never perturbs the matrices.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{CcrEvent, CdrEvent, TowerRecord};
use crate::linalg::serde_rows;
use crate::sparse::{Index, SparseCountMatrix};

/// POI categories present at every generated tower.
pub const GENERIC_CATEGORIES: [&str; 2] = ["establishment", "point_of_interest"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityView {
    /// `M` is built from the same `U*` as `S`.
    Shared,
    /// `M` is built from an independent draw `U'`, so it carries no
    /// information about `S`.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_towers: usize,
    pub n_classes: usize,
    pub n_behaviors: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    /// Factors private to `S`: these columns of `Vm*` are zero.
    pub private_factors_s: Vec<usize>,
    /// Factors private to `M`: these columns of `Vs*` are zero.
    pub private_factors_m: Vec<usize>,
    pub mobility: MobilityView,
    pub seed: u64,
    pub center_lat: f64,
    pub center_lon: f64,
    /// Half side of the square holding the towers, in degrees.
    pub half_width_deg: f64,
    pub mean_towers_per_user: f64,
    pub mean_days_per_visit: f64,
    pub days: usize,
    pub transactions_per_user: usize,
    pub mccs_per_behavior: usize,
    pub categories_per_class: usize,
    pub pois_per_tower: usize,
    /// Fraction of users that also have card transactions.
    pub ccr_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_towers: 100,
            n_classes: 20,
            n_behaviors: 5,
            rank: 3,
            noise_sigma: 0.05,
            private_factors_s: Vec::new(),
            private_factors_m: Vec::new(),
            mobility: MobilityView::Shared,
            seed: 0,
            center_lat: 19.4326,
            center_lon: -99.1332,
            half_width_deg: 0.15,
            mean_towers_per_user: 3.0,
            mean_days_per_visit: 3.0,
            days: 56,
            transactions_per_user: 60,
            mccs_per_behavior: 4,
            categories_per_class: 4,
            pois_per_tower: 12,
            ccr_fraction: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("n_users", self.n_users),
            ("n_towers", self.n_towers),
            ("n_classes", self.n_classes),
            ("n_behaviors", self.n_behaviors),
            ("rank", self.rank),
            ("days", self.days),
            ("mccs_per_behavior", self.mccs_per_behavior),
            ("categories_per_class", self.categories_per_class),
        ] {
            if value == 0 {
                v.push(format!("synth.{name} must be >= 1"));
            }
        }
        if self.rank > self.n_behaviors.min(self.n_classes) {
            v.push(format!(
                "synth.rank {} exceeds min(n_behaviors, n_classes) = {}",
                self.rank,
                self.n_behaviors.min(self.n_classes)
            ));
        }
        if self.n_towers < 3 {
            v.push("synth.n_towers must be >= 3 for a triangulation".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            v.push(format!("synth.noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let s: BTreeSet<usize> = self.private_factors_s.iter().copied().collect();
        let m: BTreeSet<usize> = self.private_factors_m.iter().copied().collect();
        if s.iter().chain(m.iter()).any(|&k| k >= self.rank) {
            v.push(format!("synth private factor indices must be < rank {}", self.rank));
        }
        if !s.is_disjoint(&m) {
            v.push("synth.private_factors_s and private_factors_m overlap".into());
        }
        if !(self.mean_towers_per_user >= 1.0) || !(self.mean_days_per_visit >= 1.0) {
            v.push("synth mean towers per user and mean days per visit must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ccr_fraction) {
            v.push(format!("synth.ccr_fraction must be in [0, 1], got {}", self.ccr_fraction));
        }
        if !(self.half_width_deg > 0.0) {
            v.push("synth.half_width_deg must be > 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMatrices {
    #[serde(rename = "U", with = "serde_rows")]
    pub u: Array2<f64>,
    #[serde(rename = "Vs", with = "serde_rows")]
    pub vs: Array2<f64>,
    #[serde(rename = "Vm", with = "serde_rows")]
    pub vm: Array2<f64>,
    /// Row-normalized proportions before noise.
    #[serde(rename = "S_clean", with = "serde_rows")]
    pub s_clean: Array2<f64>,
    #[serde(rename = "S", with = "serde_rows")]
    pub s: Array2<f64>,
    #[serde(rename = "M", with = "serde_rows")]
    pub m: Array2<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Rows scaled to sum to one; an all-zero row becomes uniform.
pub fn row_normalize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    let width = a.ncols() as f64;
    for mut row in out.rows_mut() {
        let total: f64 = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|x| x / total);
        } else {
            row.fill(1.0 / width);
        }
    }
    out
}

/// Draws `U*`, `Vs*`, `Vm*` and derives `S` and `M`.
pub fn planted_matrices(config: &SynthConfig) -> Result<PlantedMatrices> {
    config.validate()?;
    let (n, k, d, r) = (config.n_users, config.n_behaviors, config.n_classes, config.rank);
    let mut rng = stream(config.seed, 0);
    let u = gaussian(n, r, &mut rng).mapv(f64::abs);
    let mut vs = gaussian(k, r, &mut rng);
    let mut vm = gaussian(d, r, &mut rng);
    for &c in &config.private_factors_m {
        vs.column_mut(c).fill(0.0);
    }
    for &c in &config.private_factors_s {
        vm.column_mut(c).fill(0.0);
    }
    let s_clean = row_normalize(&u.dot(&vs.t()).mapv(|x| x.max(0.0)));
    let noise = if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
        Array2::from_shape_simple_fn((n, k), || normal.sample(&mut rng))
    } else {
        Array2::zeros((n, k))
    };
    let s = (&s_clean + &noise).mapv(|x| x.max(0.0));
    let mobility_users = match config.mobility {
        MobilityView::Shared => u.clone(),
        MobilityView::Independent => gaussian(n, r, &mut rng).mapv(f64::abs),
    };
    let m = mobility_users.dot(&vm.t()).mapv(|x| x.max(0.0));
    Ok(PlantedMatrices { u, vs, vm, s_clean, s, m })
}

/// Fraction of zero entries of `w`.
pub fn sparsity_report(w: &SparseCountMatrix) -> Result<f64> {
    let cells = w.n_rows() * w.n_cols();
    if cells == 0 {
        return Err(Error::Empty("sparsity of an empty matrix".into()));
    }
    Ok(1.0 - w.nnz() as f64 / cells as f64)
}

/// Dense counterpart of [`sparsity_report`].
pub fn zero_fraction(a: ArrayView2<f64>) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Empty("sparsity of an empty matrix".into()));
    }
    Ok(a.iter().filter(|&&x| x == 0.0).count() as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(flatten)]
    pub planted: PlantedMatrices,
    pub private_factors_s: Vec<usize>,
    pub private_factors_m: Vec<usize>,
    pub user_ids: Vec<String>,
    pub tower_ids: Vec<String>,
    /// Planted class of every tower.
    pub tower_class: Vec<usize>,
    pub class_categories: Vec<Vec<String>>,
    pub behavior_mccs: Vec<Vec<String>>,
    pub config: SynthConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub truth: GroundTruth,
    pub towers: Vec<TowerRecord>,
    /// `(tower_id, category)` rows; repeats are separate POIs.
    pub pois: Vec<(String, String)>,
    /// The visit matrix the call log encodes (users x towers, distinct days).
    pub visits: SparseCountMatrix,
    pub cdr: Vec<CdrEvent>,
    pub ccr: Vec<CcrEvent>,
}

/// First day of the generated observation window.
pub fn window_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2015, 3, 2, 0, 0, 0).single().expect("valid date")
}

fn draw_count(mean: f64, cap: usize, rng: &mut ChaCha8Rng) -> usize {
    let extra = if mean > 1.0 {
        Poisson::new(mean - 1.0).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    (1 + extra).min(cap)
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Full synthetic corpus: planted matrices plus raw logs.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    let planted = planted_matrices(config)?;
    let (n, p, d, k) = (config.n_users, config.n_towers, config.n_classes, config.n_behaviors);
    let user_ids: Vec<String> = (0..n).map(|i| format!("u{i:05}")).collect();
    let tower_ids: Vec<String> = (0..p).map(|t| format!("t{t:04}")).collect();

    let mut rng = stream(config.seed, 1);
    let towers: Vec<TowerRecord> = tower_ids
        .iter()
        .map(|id| TowerRecord {
            tower_id: id.clone(),
            lat: config.center_lat + rng.gen_range(-config.half_width_deg..config.half_width_deg),
            lon: config.center_lon + rng.gen_range(-config.half_width_deg..config.half_width_deg),
        })
        .collect();
    // Round-robin classes keep every class populated when p >= d.
    let mut tower_class: Vec<usize> = (0..p).map(|t| t % d).collect();
    for i in (1..p).rev() {
        tower_class.swap(i, rng.gen_range(0..=i));
    }
    let mut towers_of_class = vec![Vec::new(); d];
    for (t, &c) in tower_class.iter().enumerate() {
        towers_of_class[c].push(t);
    }

    let class_categories: Vec<Vec<String>> = (0..d)
        .map(|c| (0..config.categories_per_class).map(|j| format!("category_{c:02}_{j}")).collect())
        .collect();
    let mut rng = stream(config.seed, 2);
    let mut pois = Vec::new();
    for (t, id) in tower_ids.iter().enumerate() {
        for g in GENERIC_CATEGORIES {
            pois.push((id.clone(), g.to_string()));
        }
        for _ in 0..config.pois_per_tower {
            // Mostly the planted class, occasionally another one.
            let c = if rng.gen::<f64>() < 0.85 { tower_class[t] } else { rng.gen_range(0..d) };
            let cats = &class_categories[c];
            pois.push((id.clone(), cats[rng.gen_range(0..cats.len())].clone()));
        }
    }

    let start = window_start();
    let mut rng = stream(config.seed, 3);
    let mut triplets = Vec::new();
    let mut cdr = Vec::new();
    for i in 0..n {
        let weights: Vec<f64> = planted.m.row(i).to_vec();
        let visited_count = draw_count(config.mean_towers_per_user, p, &mut rng);
        let mut visited = BTreeSet::new();
        let mut attempts = 0;
        while visited.len() < visited_count {
            let c = categorical(&weights, &mut rng);
            let pool = &towers_of_class[c];
            let t = if pool.is_empty() || attempts > 50 * visited_count {
                rng.gen_range(0..p)
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            visited.insert(t);
            attempts += 1;
        }
        for t in visited {
            let w = draw_count(config.mean_days_per_visit, config.days, &mut rng);
            triplets.push((i, t, w as u64));
            let mut days: Vec<usize> = sample(&mut rng, config.days, w).into_vec();
            days.sort_unstable();
            for day in days {
                let calls = rng.gen_range(1..=2);
                for _ in 0..calls {
                    let secs = rng.gen_range(0..86_400);
                    cdr.push(CdrEvent {
                        user_id: user_ids[i].clone(),
                        tower_id: tower_ids[t].clone(),
                        timestamp: start + Duration::days(day as i64) + Duration::seconds(secs),
                    });
                }
            }
        }
    }
    let visits = SparseCountMatrix::from_triplets(n, p, triplets)?;

    let behavior_mccs: Vec<Vec<String>> = (0..k)
        .map(|b| (0..config.mccs_per_behavior).map(|j| format!("{}", 5000 + 10 * b + j)).collect())
        .collect();
    let mut rng = stream(config.seed, 4);
    let window_secs = (config.days * 86_400) as i64;
    let mut ccr = Vec::new();
    for i in 0..n {
        if rng.gen::<f64>() >= config.ccr_fraction {
            continue;
        }
        let weights: Vec<f64> = planted.s.row(i).to_vec();
        for _ in 0..config.transactions_per_user {
            let b = categorical(&weights, &mut rng);
            let codes = &behavior_mccs[b];
            let amount: f64 = LogNormal::new(3.0 + 0.3 * b as f64, 0.5).expect("valid").sample(&mut rng);
            ccr.push(CcrEvent {
                user_id: user_ids[i].clone(),
                mcc: codes[rng.gen_range(0..codes.len())].clone(),
                amount: (amount * 100.0).round() / 100.0,
                timestamp: start + Duration::seconds(rng.gen_range(0..window_secs)),
            });
        }
    }
    ccr.sort_by(|a, b| (&a.user_id, a.timestamp).cmp(&(&b.user_id, b.timestamp)));

    Ok(SynthData {
        truth: GroundTruth {
            planted,
            private_factors_s: config.private_factors_s.clone(),
            private_factors_m: config.private_factors_m.clone(),
            user_ids,
            tower_ids,
            tower_class,
            class_categories,
            behavior_mccs,
            config: config.clone(),
        },
        towers,
        pois,
        visits,
        cdr,
        ccr,
    })
}

fn timestamp_text(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl SynthData {
    /// Writes `towers.csv`, `pois.csv`, `cdr.csv`, `ccr.csv`, `visits.csv` and
    /// `ground_truth.json` into `dir`, returning the paths in that order.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = |name: &str| dir.join(name);
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
        let mut written = Vec::new();

        let p = path("towers.csv");
        let mut w = csv::Writer::from_writer(open(&p)?);
        w.write_record(["tower_id", "lat", "lon"])?;
        for t in &self.towers {
            w.write_record([t.tower_id.clone(), format!("{:?}", t.lat), format!("{:?}", t.lon)])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = path("pois.csv");
        let mut w = csv::Writer::from_writer(open(&p)?);
        w.write_record(["tower_id", "category"])?;
        for (t, c) in &self.pois {
            w.write_record([t, c])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = path("cdr.csv");
        let mut w = csv::Writer::from_writer(open(&p)?);
        w.write_record(["user_id", "tower_id", "timestamp"])?;
        for e in &self.cdr {
            w.write_record([e.user_id.clone(), e.tower_id.clone(), timestamp_text(&e.timestamp)])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = path("ccr.csv");
        let mut w = csv::Writer::from_writer(open(&p)?);
        w.write_record(["user_id", "mcc", "amount", "timestamp"])?;
        for e in &self.ccr {
            w.write_record([
                e.user_id.clone(),
                e.mcc.clone(),
                format!("{:?}", e.amount),
                timestamp_text(&e.timestamp),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = path("visits.csv");
        let file = open(&p)?;
        self.visits
            .write_triplets_csv(file, &Index::from(self.truth.user_ids.clone()), &Index::from(self.truth.tower_ids.clone()))?;
        written.push(p);

        let p = path("ground_truth.json");
        let mut file = open(&p)?;
        serde_json::to_writer_pretty(&mut file, &self.truth)?;
        file.flush().map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }
}
