//! Identity classifier trained on real plus (optionally selected) synthetic
//! samples, and its closed-set / novel-identity evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg;
use crate::numerics::{parallel, Grads, Mlp, MlpSpec, Optimizer, OptimizerKind, Rng};
use crate::selector::{select, SelectionConfig, SelectionReport};
use crate::world::{
    sample_real, ExtractorConfig, FeatureExtractor, IdentityWorld, LabeledSample, Origin,
};

/// MLP head over raw observations with its output-unit label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: Mlp,
    /// World label of each output unit, sorted.
    pub labels: Vec<usize>,
}

impl Classifier {
    pub fn new(obs_dim: usize, hidden: usize, labels: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let mut labels = labels;
        labels.sort_unstable();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::argument("classifier needs at least two labels"));
        }
        let spec = MlpSpec {
            state_dim: obs_dim,
            hidden: vec![hidden],
            output_dim: labels.len(),
            conditioning: None,
        };
        Ok(Classifier {
            net: Mlp::build(&spec, rng)?,
            labels,
        })
    }

    pub fn class_of(&self, label: usize) -> Result<usize> {
        self.labels.binary_search(&label).map_err(|_| Error::Label {
            label,
            size: self.labels.len(),
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward_plain(x)?.0)
    }

    /// World label with the largest logit (lowest index on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        Ok(self.labels[best])
    }

    /// Hidden-layer activations.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, tape) = self.net.forward_plain(x)?;
        let n = self.net.layers().len();
        Ok(if n >= 2 {
            tape.layer_output(n - 2).to_vec()
        } else {
            x.to_vec()
        })
    }
}

/// Reward feature extractor: an identity classifier trained on fresh
/// generic-world samples, with its output head dropped. Without a
/// pretraining section the randomly initialized network is returned.
pub fn build_extractor(
    generic: &IdentityWorld,
    config: &ExtractorConfig,
    rng: &Rng,
) -> Result<FeatureExtractor> {
    let Some(pre) = &config.pretrain else {
        return FeatureExtractor::random(generic.obs_dim, config, rng.child("init").seed());
    };
    if pre.batch_size == 0 {
        return Err(Error::argument("extractor batch_size must be positive"));
    }
    let mut hidden = config.hidden.clone();
    hidden.push(config.feat_dim);
    let spec = MlpSpec {
        state_dim: generic.obs_dim,
        hidden,
        output_dim: generic.num_identities(),
        conditioning: None,
    };
    let mut w = Classifier {
        net: Mlp::build(&spec, &mut rng.child("init"))?,
        labels: (0..generic.num_identities()).collect(),
    };
    let mut opt = Optimizer::new(OptimizerKind::adam(), pre.learning_rate)?;
    let mut data = rng.child("data");
    for it in 0..pre.iterations {
        let batch = (0..pre.batch_size)
            .map(|_| {
                let y = data.below(generic.num_identities());
                Ok(sample_real(generic, y, 1, &mut data)?.remove(0))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = id_loss(&w, &batch)?;
        opt.step(&mut w.net, &grads)?;
        if it % 500 == 0 {
            log::debug!("extractor iter {it}: loss {loss:.4}");
        }
    }
    let layers = w.net.layers();
    let body = layers[..layers.len() - 1].to_vec();
    FeatureExtractor::from_network(
        Mlp::from_layers(generic.obs_dim, None, body)?,
        config.normalize_output,
    )
}

/// `−log softmax(z)_y` computed stably, plus `∂/∂z = softmax(z) − e_y`.
fn cross_entropy(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - z[y];
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[y] -= 1.0;
    (loss, g)
}

/// Cross-entropy of one sample.
pub fn sample_loss(w: &Classifier, sample: &LabeledSample) -> Result<f64> {
    let y = w.class_of(sample.y)?;
    Ok(cross_entropy(&w.logits(&sample.x)?, y).0)
}

/// Mean softmax cross-entropy over `batch` and its exact gradient.
pub fn id_loss(w: &Classifier, batch: &[LabeledSample]) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(Error::argument("identity loss on an empty batch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let (total, grads) = parallel::accumulate(&w.net, batch, |_, s, acc| {
        let y = w.class_of(s.y)?;
        let (z, tape) = w.net.forward_plain(&s.x)?;
        let (loss, g) = cross_entropy(&z, y);
        w.net.backward_into(&tape, &g, inv_n, acc)?;
        Ok(loss)
    })?;
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("identity loss"));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Samples per identity (N).
    pub samples_per_identity: usize,
    /// Fraction of each identity's N slots filled with synthetic samples.
    pub synthetic_ratio: f64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub use_selector: bool,
    pub selection: SelectionConfig,
    /// Score candidates with a virtual step that includes them (default) or
    /// on the rest of the batch only.
    pub candidates_in_virtual_batch: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 600,
            identities_per_batch: 4,
            samples_per_identity: 4,
            synthetic_ratio: 0.5,
            hidden: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            use_selector: false,
            selection: SelectionConfig::default(),
            candidates_in_virtual_batch: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch == 0 || self.samples_per_identity == 0 {
            return Err(Error::argument("batch composition must be positive"));
        }
        if !(0.0..=1.0).contains(&self.synthetic_ratio) {
            return Err(Error::argument("synthetic_ratio must be in [0, 1]"));
        }
        self.selection.validate()
    }

    /// Synthetic slots per identity.
    pub fn synthetic_slots(&self) -> usize {
        (self.samples_per_identity as f64 * self.synthetic_ratio).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean batch loss since the previous point.
    pub loss: f64,
    pub synthetic_used: usize,
    pub snapshot_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogRow {
    pub iteration: usize,
    pub candidate: usize,
    /// Index of the candidate within the synthetic pool.
    pub pool_index: usize,
    pub label: usize,
    pub delta: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainCurves {
    pub points: Vec<CurvePoint>,
    pub selection: Vec<SelectionLogRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn group_by_label<'a>(
    samples: &'a [LabeledSample],
    labels: &[usize],
) -> BTreeMap<usize, Vec<(usize, &'a LabeledSample)>> {
    let mut out: BTreeMap<usize, Vec<(usize, &LabeledSample)>> =
        labels.iter().map(|&l| (l, Vec::new())).collect();
    for (i, s) in samples.iter().enumerate() {
        if let Some(v) = out.get_mut(&s.y) {
            v.push((i, s));
        }
    }
    out
}

fn draw<'a>(
    pool: &[(usize, &'a LabeledSample)],
    k: usize,
    rng: &mut Rng,
) -> Vec<(usize, &'a LabeledSample)> {
    if pool.is_empty() || k == 0 {
        return Vec::new();
    }
    if k <= pool.len() {
        rng.choose_distinct(pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.below(pool.len())]).collect()
    }
}

/// Trains a classifier over the labels of `real_data`.
///
/// Every iteration draws P identities and, for each, `N − s` real and `s`
/// synthetic samples (`s = round(N·ratio)`). With the selector on, each
/// identity contributes `ceil(s / keep_fraction)` synthetic candidates that
/// the lookahead selector refines before the update. Real and synthetic
/// draws use separate streams, so a zero ratio reproduces real-only
/// training exactly.
pub fn train(
    real_data: &[LabeledSample],
    synth_pool: &[LabeledSample],
    config: &TrainConfig,
    snapshot_set: Option<&[LabeledSample]>,
    rng: &Rng,
) -> Result<(Classifier, TrainCurves)> {
    config.validate()?;
    if real_data.is_empty() {
        return Err(Error::argument("no real training data"));
    }
    if real_data.iter().any(|s| s.origin != Origin::Real) {
        return Err(Error::argument("real_data contains synthetic samples"));
    }
    if synth_pool.iter().any(|s| s.origin != Origin::Synthetic) {
        return Err(Error::argument("synthetic pool contains real samples"));
    }
    let obs_dim = real_data[0].x.len();
    let labels: Vec<usize> = {
        let mut l: Vec<usize> = real_data.iter().map(|s| s.y).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let mut model = Classifier::new(obs_dim, config.hidden, labels.clone(), &mut rng.child("init"))?;
    let real_by = group_by_label(real_data, &labels);
    let synth_by = group_by_label(synth_pool, &labels);
    let slots = if synth_pool.is_empty() {
        0
    } else {
        config.synthetic_slots()
    };
    let cands_per_id = if config.use_selector {
        (slots as f64 / config.selection.keep_fraction).ceil() as usize
    } else {
        slots
    };
    let mut opt = Optimizer::new(
        OptimizerKind::Sgd {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
        config.learning_rate,
    )?;
    let mut curves = TrainCurves::default();
    let mut running = 0.0;
    let mut window = 0usize;
    let mut synth_used = 0usize;
    for it in 0..config.iterations {
        let it_rng = rng.child_indexed("iteration", it);
        let ids: Vec<usize> = it_rng
            .child("identities")
            .choose_distinct(labels.len(), config.identities_per_batch)
            .into_iter()
            .map(|i| labels[i])
            .collect();
        let mut real_rng = it_rng.child("real");
        let mut synth_rng = it_rng.child("synthetic");
        let mut batch: Vec<LabeledSample> = Vec::new();
        let mut candidates: Vec<(usize, LabeledSample)> = Vec::new();
        for &y in &ids {
            let have_synth = !synth_by[&y].is_empty();
            let s = if have_synth { slots } else { 0 };
            let n_real = config.samples_per_identity - s.min(config.samples_per_identity);
            batch.extend(draw(&real_by[&y], n_real, &mut real_rng).into_iter().map(|(_, s)| s.clone()));
            if have_synth {
                candidates.extend(
                    draw(&synth_by[&y], cands_per_id, &mut synth_rng)
                        .into_iter()
                        .map(|(i, s)| (i, s.clone())),
                );
            }
        }
        let chosen: Vec<LabeledSample> = if config.use_selector && !candidates.is_empty() {
            let cand_samples: Vec<LabeledSample> =
                candidates.iter().map(|(_, s)| s.clone()).collect();
            let mut mixed = batch.clone();
            if config.candidates_in_virtual_batch {
                mixed.extend(cand_samples.iter().cloned());
            }
            let (kept, report) = select(&model, &cand_samples, &mixed, &config.selection)?;
            log_selection(&mut curves.selection, it, &candidates, &report);
            kept
        } else {
            candidates.into_iter().map(|(_, s)| s).collect()
        };
        synth_used += chosen.len();
        batch.extend(chosen);
        let (loss, grads) = id_loss(&model, &batch)?;
        if it == 0 {
            curves.initial_loss = loss;
        }
        opt.step(&mut model.net, &grads)?;
        running += loss;
        window += 1;
        let last = it + 1 == config.iterations;
        if config.log_every > 0 && ((it + 1) % config.log_every == 0 || last) {
            let snapshot_accuracy = match snapshot_set {
                Some(set) if !set.is_empty() => Some(closed_set_accuracy(&model, set)?.0),
                _ => None,
            };
            curves.points.push(CurvePoint {
                iteration: it + 1,
                loss: running / window as f64,
                synthetic_used: synth_used,
                snapshot_accuracy,
            });
            running = 0.0;
            window = 0;
            synth_used = 0;
        }
    }
    curves.final_loss = id_loss(&model, real_data)?.0;
    if config.iterations == 0 {
        curves.initial_loss = curves.final_loss;
    }
    Ok((model, curves))
}

fn log_selection(
    rows: &mut Vec<SelectionLogRow>,
    iteration: usize,
    candidates: &[(usize, LabeledSample)],
    report: &SelectionReport,
) {
    for (k, ((pool_index, s), delta)) in candidates.iter().zip(&report.deltas).enumerate() {
        rows.push(SelectionLogRow {
            iteration,
            candidate: k,
            pool_index: *pool_index,
            label: s.y,
            delta: *delta,
            kept: report.kept.binary_search(&k).is_ok(),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityAccuracy {
    pub label: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub closed_set_accuracy: f64,
    /// `None` when no novel identities are evaluated.
    pub novel_accuracy: Option<f64>,
    pub per_identity: Vec<IdentityAccuracy>,
}

/// Novel-identity protocol: prototypes from labeled exemplars, classified
/// queries.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelSet {
    pub exemplars: Vec<LabeledSample>,
    pub queries: Vec<LabeledSample>,
}

fn closed_set_accuracy(
    model: &Classifier,
    set: &[LabeledSample],
) -> Result<(f64, Vec<IdentityAccuracy>)> {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let preds = set
        .iter()
        .map(|s| model.predict(&s.x))
        .collect::<Result<Vec<_>>>()?;
    for (s, p) in set.iter().zip(preds) {
        let e = per.entry(s.y).or_default();
        e.1 += 1;
        if p == s.y {
            e.0 += 1;
        }
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    let acc = if set.is_empty() {
        0.0
    } else {
        correct as f64 / set.len() as f64
    };
    Ok((
        acc,
        per.into_iter()
            .map(|(label, (correct, total))| IdentityAccuracy {
                label,
                correct,
                total,
            })
            .collect(),
    ))
}

/// Closed-set accuracy on held-out samples of trained identities, and
/// nearest-prototype accuracy over hidden-layer features for novel ones.
pub fn evaluate(
    model: &Classifier,
    heldout_seen: &[LabeledSample],
    novel: Option<&NovelSet>,
) -> Result<EvalReport> {
    if let Some(s) = heldout_seen.iter().find(|s| model.class_of(s.y).is_err()) {
        return Err(Error::Protocol(format!(
            "held-out label {} is not a trained identity",
            s.y
        )));
    }
    let (closed, per_identity) = closed_set_accuracy(model, heldout_seen)?;
    let novel_accuracy = match novel {
        Some(set) if !set.queries.is_empty() => Some(novel_accuracy(model, set)?),
        _ => None,
    };
    Ok(EvalReport {
        closed_set_accuracy: closed,
        novel_accuracy,
        per_identity,
    })
}

fn novel_accuracy(model: &Classifier, set: &NovelSet) -> Result<f64> {
    if let Some(s) = set
        .exemplars
        .iter()
        .chain(&set.queries)
        .find(|s| model.labels.binary_search(&s.y).is_ok())
    {
        return Err(Error::Protocol(format!(
            "novel label {} overlaps trained identities",
            s.y
        )));
    }
    let mut by: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in &set.exemplars {
        by.entry(s.y).or_default().push(model.embed(&s.x)?);
    }
    if by.is_empty() {
        return Err(Error::Protocol("novel protocol has no exemplars".into()));
    }
    let protos: Vec<(usize, Vec<f64>)> = by
        .into_iter()
        .map(|(y, fs)| Ok((y, linalg::mean_vec(&fs)?)))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for q in &set.queries {
        let f = model.embed(&q.x)?;
        let mut best = (f64::INFINITY, usize::MAX);
        for (y, p) in &protos {
            let d = linalg::sq_dist(&f, p)?;
            if d < best.0 {
                best = (d, *y);
            }
        }
        if best.1 == q.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.queries.len() as f64)
}
