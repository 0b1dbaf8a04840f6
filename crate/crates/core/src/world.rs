//! Synthetic identity world: ground-truth identity clusters, a sampler for
//! "real" observations, and the frozen feature extractor that feeds the
//! reward memory bank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::{self, check_len};
use crate::numerics::{Mlp, MlpSpec, Rng};

pub const WORLD_FORMAT: &str = "idsynth-world";
pub const WORLD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub obs_dim: usize,
    /// Standard deviation of the isotropic center draw.
    pub center_scale: f64,
    /// Base per-identity spread.
    pub spread: f64,
    /// Relative jitter applied to each identity's spread, in `[0, 1)`.
    pub spread_jitter: f64,
    pub min_separation: f64,
    pub num_nuisance: usize,
    /// Nuisance magnitude as a multiple of the identity spread.
    pub nuisance_ratio: f64,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_identities: 10,
            obs_dim: 8,
            center_scale: 1.0,
            spread: 0.45,
            spread_jitter: 0.1,
            min_separation: 1.2,
            num_nuisance: 4,
            nuisance_ratio: 4.0,
            max_retries: 10_000,
        }
    }
}

/// Broader world used to pretrain the generic denoiser and the reward
/// extractor. It shares the target's nuisance directions but has many more
/// identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericWorldConfig {
    pub num_identities: usize,
    pub center_scale: f64,
    /// Multiplier on the target's base spread.
    pub spread_scale: f64,
    pub min_separation: f64,
}

impl Default for GenericWorldConfig {
    fn default() -> Self {
        GenericWorldConfig {
            num_identities: 200,
            center_scale: 1.1,
            spread_scale: 1.0,
            min_separation: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Unit-norm direction.
    pub direction: Vec<f64>,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub center: Vec<f64>,
    pub spread: f64,
    pub nuisance: Vec<Nuisance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityWorld {
    pub obs_dim: usize,
    pub seed: u64,
    pub min_separation: f64,
    pub identities: Vec<Identity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    /// World identity label.
    pub y: usize,
    pub origin: Origin,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    format: String,
    version: u32,
    world: IdentityWorld,
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Some(u) = linalg::normalized(&rng.normal_vec(dim)) {
            return u;
        }
    }
}

/// Orthonormal directions via Gram-Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count.min(dim) {
        let mut v = random_unit(rng, dim);
        for d in &dirs {
            let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            for (vi, di) in v.iter_mut().zip(d) {
                *vi -= p * di;
            }
        }
        if let Some(u) = linalg::normalized(&v) {
            if linalg::norm(&v) > 1e-6 {
                dirs.push(u);
            }
        }
    }
    dirs
}

fn draw_centers(
    rng: &mut Rng,
    count: usize,
    dim: usize,
    scale: f64,
    min_sep: f64,
    max_retries: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..max_retries.max(1) {
            let c: Vec<f64> = rng.normal_vec(dim).into_iter().map(|v| v * scale).collect();
            let ok = centers
                .iter()
                .all(|o| linalg::sq_dist(o, &c).map(|d| d.sqrt() >= min_sep).unwrap_or(false));
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place identity {i} at separation {min_sep} after {max_retries} retries"
            )));
        }
    }
    Ok(centers)
}

fn validate_config(cfg: &WorldConfig) -> Result<()> {
    if cfg.num_identities < 2 {
        return Err(Error::argument("world needs at least 2 identities"));
    }
    if cfg.obs_dim < 2 {
        return Err(Error::argument("obs_dim must be at least 2"));
    }
    if !(cfg.spread > 0.0) || !(0.0..1.0).contains(&cfg.spread_jitter) {
        return Err(Error::argument("spread must be > 0 and jitter in [0,1)"));
    }
    if cfg.min_separation < 0.0 || cfg.center_scale <= 0.0 || cfg.nuisance_ratio < 0.0 {
        return Err(Error::argument("invalid world geometry parameters"));
    }
    Ok(())
}

/// Generates a target world. Deterministic in `(config, seed)`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<IdentityWorld> {
    validate_config(config)?;
    let root = Rng::new(seed);
    let directions =
        orthonormal_directions(&mut root.child("nuisance"), config.obs_dim, config.num_nuisance);
    let centers = draw_centers(
        &mut root.child("centers"),
        config.num_identities,
        config.obs_dim,
        config.center_scale,
        config.min_separation,
        config.max_retries,
    )?;
    let mut spreads = root.child("spreads");
    let identities = centers
        .into_iter()
        .map(|center| {
            let jitter = (2.0 * spreads.uniform() - 1.0) * config.spread_jitter;
            let spread = config.spread * (1.0 + jitter);
            Identity {
                center,
                spread,
                nuisance: directions
                    .iter()
                    .map(|d| Nuisance {
                        direction: d.clone(),
                        magnitude: config.nuisance_ratio * spread,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(IdentityWorld {
        obs_dim: config.obs_dim,
        seed,
        min_separation: config.min_separation,
        identities,
    })
}

/// Generic pretraining world sharing `target`'s nuisance structure.
pub fn generate_generic_world(
    target: &IdentityWorld,
    target_config: &WorldConfig,
    generic: &GenericWorldConfig,
    seed: u64,
) -> Result<IdentityWorld> {
    if generic.num_identities < 2 || generic.spread_scale <= 0.0 {
        return Err(Error::argument("generic world needs >= 2 identities and spread_scale > 0"));
    }
    let root = Rng::new(seed);
    let centers = draw_centers(
        &mut root.child("generic-centers"),
        generic.num_identities,
        target.obs_dim,
        generic.center_scale,
        generic.min_separation,
        target_config.max_retries,
    )?;
    let directions: Vec<Vec<f64>> = target
        .identities
        .first()
        .map(|id| id.nuisance.iter().map(|n| n.direction.clone()).collect())
        .unwrap_or_default();
    let mut spreads = root.child("generic-spreads");
    let identities = centers
        .into_iter()
        .map(|center| {
            let jitter = (2.0 * spreads.uniform() - 1.0) * target_config.spread_jitter;
            let spread = target_config.spread * generic.spread_scale * (1.0 + jitter);
            Identity {
                center,
                spread,
                nuisance: directions
                    .iter()
                    .map(|d| Nuisance {
                        direction: d.clone(),
                        magnitude: target_config.nuisance_ratio * spread,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(IdentityWorld {
        obs_dim: target.obs_dim,
        seed,
        min_separation: generic.min_separation,
        identities,
    })
}

impl IdentityWorld {
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn identity(&self, y: usize) -> Result<&Identity> {
        self.identities.get(y).ok_or(Error::Label {
            label: y,
            size: self.identities.len(),
        })
    }

    /// Gaussian log density of `x` under identity `y`: isotropic spread plus
    /// rank-one variance along each (orthonormal) nuisance direction.
    pub fn log_density(&self, y: usize, x: &[f64]) -> Result<f64> {
        let id = self.identity(y)?;
        check_len("log_density", self.obs_dim, x.len())?;
        let s2 = id.spread * id.spread;
        let r: Vec<f64> = x.iter().zip(&id.center).map(|(a, c)| a - c).collect();
        let mut quad = linalg::dot(&r, &r)? / s2;
        let mut log_det = self.obs_dim as f64 * s2.ln();
        for nz in &id.nuisance {
            let m2 = nz.magnitude * nz.magnitude;
            let p = linalg::dot(&r, &nz.direction)?;
            quad -= p * p * (1.0 / s2 - 1.0 / (s2 + m2));
            log_det += (1.0 + m2 / s2).ln();
        }
        let d = self.obs_dim as f64;
        Ok(-0.5 * (quad + log_det + d * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Maximum-likelihood identity among `candidates` (lowest label on ties).
    pub fn bayes_label(&self, x: &[f64], candidates: &[usize]) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &y in candidates {
            let ll = self.log_density(y, x)?;
            if best.is_none_or(|(_, b)| ll > b) {
                best = Some((y, ll));
            }
        }
        best.map(|(y, _)| y)
            .ok_or_else(|| Error::argument("no candidate identities"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WorldFile {
            format: WORLD_FORMAT.into(),
            version: WORLD_VERSION,
            world: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WorldFile = serde_json::from_str(text)?;
        if file.format != WORLD_FORMAT || file.version != WORLD_VERSION {
            return Err(Error::Serde(format!(
                "unsupported world file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.world)
    }
}

/// Draws `n` real observations of identity `y`:
/// `x = center + spread·z + Σ magnitude·u·η`, with `z`, `η` standard normal.
pub fn sample_real(
    world: &IdentityWorld,
    y: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return Err(Error::argument("sample count must be >= 1"));
    }
    let id = world.identity(y)?;
    Ok((0..n)
        .map(|_| {
            let mut x: Vec<f64> = id
                .center
                .iter()
                .map(|c| c + id.spread * rng.standard_normal())
                .collect();
            for nz in &id.nuisance {
                let eta = rng.standard_normal();
                for (xi, ui) in x.iter_mut().zip(&nz.direction) {
                    *xi += nz.magnitude * ui * eta;
                }
            }
            LabeledSample {
                x,
                y,
                origin: Origin::Real,
            }
        })
        .collect())
}

/// Draws `per_identity` samples for every label in `labels` from child
/// streams keyed by label, so the result does not depend on label order.
pub fn sample_real_set(
    world: &IdentityWorld,
    labels: &[usize],
    per_identity: usize,
    rng: &Rng,
    tag: &str,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(labels.len() * per_identity);
    for &y in labels {
        let mut r = rng.child_indexed(tag, y);
        out.extend(sample_real(world, y, per_identity, &mut r)?);
    }
    Ok(out)
}

/// Frozen network producing the reward features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    net: Mlp,
    normalize_output: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub normalize_output: bool,
    /// Identity-classification pretraining on the generic world; `None`
    /// keeps the randomly initialized network.
    pub pretrain: Option<ExtractorPretrain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorPretrain {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ExtractorPretrain {
    fn default() -> Self {
        ExtractorPretrain {
            iterations: 4000,
            batch_size: 64,
            learning_rate: 3e-3,
        }
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            hidden: vec![64],
            feat_dim: 32,
            normalize_output: true,
            pretrain: Some(ExtractorPretrain::default()),
        }
    }
}

impl FeatureExtractor {
    /// Randomly initialized, never trained.
    pub fn random(obs_dim: usize, config: &ExtractorConfig, seed: u64) -> Result<Self> {
        let spec = MlpSpec {
            state_dim: obs_dim,
            hidden: config.hidden.clone(),
            output_dim: config.feat_dim,
            conditioning: None,
        };
        let net = Mlp::build(&spec, &mut Rng::new(seed))?;
        Ok(FeatureExtractor {
            net,
            normalize_output: config.normalize_output,
        })
    }

    pub fn from_network(net: Mlp, normalize_output: bool) -> Result<Self> {
        if net.conditioning().is_some() {
            return Err(Error::argument("feature extractor must be unconditioned"));
        }
        Ok(FeatureExtractor {
            net,
            normalize_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.state_dim()
    }

    pub fn feat_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn extract_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("extract_features", self.input_dim(), x.len())?;
        let (f, _) = self.net.forward_plain(x)?;
        if self.normalize_output {
            linalg::normalized(&f).ok_or_else(|| Error::numeric("zero-norm feature"))
        } else {
            Ok(f)
        }
    }

    pub fn extract_features(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.extract_one(x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSplit {
    /// Sorted labels used for training and generation.
    pub seen: Vec<usize>,
    /// Sorted labels held out for novel-identity evaluation.
    pub novel: Vec<usize>,
}

impl WorldSplit {
    /// Position of a world label among the seen identities.
    pub fn class_of(&self, label: usize) -> Option<usize> {
        self.seen.binary_search(&label).ok()
    }
}

/// Holds out `holdout_ids` identities chosen by `seed`.
pub fn split_world(world: &IdentityWorld, holdout_ids: usize, seed: u64) -> Result<WorldSplit> {
    let n = world.num_identities();
    if holdout_ids >= n {
        return Err(Error::argument(format!(
            "holdout {holdout_ids} must be smaller than {n} identities"
        )));
    }
    let mut novel = Rng::new(seed).child("split").choose_distinct(n, holdout_ids);
    novel.sort_unstable();
    let seen = (0..n).filter(|i| novel.binary_search(i).is_err()).collect();
    Ok(WorldSplit { seen, novel })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, dim: usize) -> WorldConfig {
        WorldConfig {
            num_identities: n,
            obs_dim: dim,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn two_identities_separated() {
        let cfg = small(2, 2);
        let w = generate_world(&cfg, 7).unwrap();
        let d = linalg::sq_dist(&w.identities[0].center, &w.identities[1].center)
            .unwrap()
            .sqrt();
        assert!(d >= cfg.min_separation);
    }

    #[test]
    fn all_pairs_separated_for_ten() {
        let cfg = small(10, 8);
        let w = generate_world(&cfg, 11).unwrap();
        let mut pairs = 0;
        for i in 0..10 {
            for j in (i + 1)..10 {
                let d = linalg::sq_dist(&w.identities[i].center, &w.identities[j].center)
                    .unwrap()
                    .sqrt();
                assert!(d >= cfg.min_separation, "pair ({i},{j}) at {d}");
                pairs += 1;
            }
        }
        assert_eq!(pairs, 45);
    }

    #[test]
    fn world_is_deterministic_and_valid() {
        let cfg = WorldConfig::default();
        let a = generate_world(&cfg, 3).unwrap();
        assert_eq!(a, generate_world(&cfg, 3).unwrap());
        for id in &a.identities {
            assert!(id.spread > 0.0);
            for n in &id.nuisance {
                assert!((linalg::norm(&n.direction) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impossible_separation_fails() {
        let cfg = WorldConfig {
            min_separation: 1e6,
            max_retries: 20,
            ..small(3, 2)
        };
        assert!(matches!(generate_world(&cfg, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_world(&small(1, 4), 0).is_err());
        assert!(generate_world(&small(3, 1), 0).is_err());
    }

    #[test]
    fn zero_spread_samples_equal_center() {
        let mut w = generate_world(&small(3, 4), 2).unwrap();
        w.identities[1].spread = 0.0;
        w.identities[1].nuisance.clear();
        let xs = sample_real(&w, 1, 5, &mut Rng::new(0)).unwrap();
        for s in xs {
            assert_eq!(s.x, w.identities[1].center);
            assert_eq!(s.origin, Origin::Real);
        }
    }

    #[test]
    fn sample_real_is_reproducible_and_checked() {
        let w = generate_world(&small(3, 4), 2).unwrap();
        let a = sample_real(&w, 0, 1, &mut Rng::new(5)).unwrap();
        let b = sample_real(&w, 0, 1, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_real(&w, 3, 1, &mut Rng::new(5)),
            Err(Error::Label { .. })
        ));
        assert!(sample_real(&w, 0, 0, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn empirical_mean_within_clt_bound() {
        let w = generate_world(&WorldConfig::default(), 4).unwrap();
        let n = 10_000;
        let id = &w.identities[2];
        let xs = sample_real(&w, 2, n, &mut Rng::new(1)).unwrap();
        let mean = linalg::mean_vec(&xs.into_iter().map(|s| s.x).collect::<Vec<_>>()).unwrap();
        // per-coordinate std is at most sqrt(spread² + Σ magnitude²)
        let sd = (id.spread.powi(2) + id.nuisance.iter().map(|n| n.magnitude.powi(2)).sum::<f64>())
            .sqrt();
        for (m, c) in mean.iter().zip(&id.center) {
            assert!((m - c).abs() < 5.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn extractor_outputs_unit_norm_and_is_pure() {
        let ex = FeatureExtractor::random(8, &ExtractorConfig::default(), 3).unwrap();
        let mut rng = Rng::new(0);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(8)).collect();
        let f1 = ex.extract_features(&xs).unwrap();
        let f2 = ex.extract_features(&xs).unwrap();
        assert_eq!(f1, f2);
        for f in f1 {
            assert!((linalg::norm(&f) - 1.0).abs() < 1e-9);
        }
        assert!(ex.extract_features(&[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn split_properties() {
        let w = generate_world(&WorldConfig::default(), 1).unwrap();
        let s0 = split_world(&w, 0, 9).unwrap();
        assert!(s0.novel.is_empty());
        assert_eq!(s0.seen.len(), 10);
        let s = split_world(&w, 3, 9).unwrap();
        assert_eq!((s.seen.len(), s.novel.len()), (7, 3));
        assert!(s.novel.iter().all(|n| !s.seen.contains(n)));
        assert_eq!(s, split_world(&w, 3, 9).unwrap());
        assert!(split_world(&w, 10, 9).is_err());
    }

    #[test]
    fn world_json_roundtrip_and_version_check() {
        let w = generate_world(&WorldConfig::default(), 5).unwrap();
        let text = w.to_json().unwrap();
        assert_eq!(IdentityWorld::from_json(&text).unwrap(), w);
        let bad = text.replace("\"version\": 1", "\"version\": 99");
        assert!(IdentityWorld::from_json(&bad).is_err());
    }
}
