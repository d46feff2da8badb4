//! Pairwise training of the cross network.
//!
//! Every judged (query, document) pair is turned into a feature vector, the
//! normalizer is fitted on those vectors, and the network is optimized with
//! Adam over seeded-shuffled mini-batches of cross-grade document pairs.
//! The per-batch loss is the mean pair loss of the batch.

mod adam;
mod gradcheck;
mod loss;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, QueryGroup};
use crate::dcn::{Architecture, Dcn};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::features::{AblationMask, FeatureExtractor, FeatureSchema, FeatureVector, Normalizer};
use crate::lexical::Bm25Params;
use crate::model::Model;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use loss::{hinge_pair_loss, logistic_pair_loss, PairLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Hinge,
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::Logistic => "logistic",
        }
    }

    pub fn pair_loss(self, score_pos: f64, score_neg: f64, margin: f64) -> PairLoss {
        match self {
            LossKind::Hinge => hinge_pair_loss(score_pos, score_neg, margin),
            LossKind::Logistic => logistic_pair_loss(score_pos, score_neg),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "logistic" => Ok(LossKind::Logistic),
            other => Err(Error::invalid(format!("unknown loss `{other}` (hinge | logistic)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub margin: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_pairs_per_query: usize,
    pub seed: u64,
    pub mask: AblationMask,
    pub cross_layers: usize,
    pub hidden_widths: Vec<usize>,
    pub bm25: Bm25Params,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Hinge,
            margin: 1.0,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 30,
            max_pairs_per_query: 100,
            seed: 0,
            mask: AblationMask::combined(),
            cross_layers: 2,
            hidden_widths: vec![64, 64],
            bm25: Bm25Params::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be non-negative, got {}", self.margin)));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam.epsilon.is_nan() || self.adam.epsilon <= 0.0 {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.max_pairs_per_query == 0 {
            return Err(Error::invalid("max pairs per query must be at least 1"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Applies one `key=value` setting using the keys written by [`TrainConfig::echo`].
    /// Returns `false` for keys that are not training settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "loss" => self.loss = value.trim().parse()?,
            "margin" => self.margin = num(key, value)?,
            "lr" => self.adam.learning_rate = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "epsilon" => self.adam.epsilon = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_pairs" => self.max_pairs_per_query = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "use_context" | "use_lexical_context" | "use_semantic_context" => {
                let on: bool = num(key, value)?;
                let (c, l, s) = (
                    self.mask.use_context(),
                    self.mask.use_lexical_context(),
                    self.mask.use_semantic_context(),
                );
                self.mask = match key {
                    "use_context" => AblationMask::new(on, on || l, on || s),
                    "use_lexical_context" => AblationMask::new(c, on, s),
                    _ => AblationMask::new(c, l, on),
                };
            }
            "cross_layers" => self.cross_layers = num(key, value)?,
            "hidden" => {
                self.hidden_widths = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|w| num(key, w)).collect::<Result<_>>()?
                }
            }
            "bm25_k1" => self.bm25 = Bm25Params::new(num(key, value)?, self.bm25.b())?,
            "bm25_b" => self.bm25 = Bm25Params::new(self.bm25.k1(), num(key, value)?)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines stored in the model file.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let widths: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "loss={}", self.loss.name());
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "lr={}", self.adam.learning_rate);
        let _ = writeln!(s, "beta1={}", self.adam.beta1);
        let _ = writeln!(s, "beta2={}", self.adam.beta2);
        let _ = writeln!(s, "epsilon={}", self.adam.epsilon);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "max_pairs={}", self.max_pairs_per_query);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "use_context={}", self.mask.use_context());
        let _ = writeln!(s, "use_lexical_context={}", self.mask.use_lexical_context());
        let _ = writeln!(s, "use_semantic_context={}", self.mask.use_semantic_context());
        let _ = writeln!(s, "cross_layers={}", self.cross_layers);
        let _ = writeln!(s, "hidden={}", widths.join(","));
        let _ = writeln!(s, "bm25_k1={}", self.bm25.k1());
        let _ = writeln!(s, "bm25_b={}", self.bm25.b());
        s
    }
}

/// A cross-grade document pair within one query group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub query_id: String,
    pub doc_id_pos: String,
    pub doc_id_neg: String,
}

/// `(i, j)` for every `labels[i] > labels[j]`, in row-major order; when there
/// are more than `max_pairs`, a seeded subsample (order preserved).
pub fn pair_indices(labels: &[u8], max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi > yj {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() > max_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, pairs.len(), max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

pub fn make_pairs(group: &QueryGroup<'_>, max_pairs: usize, seed: u64) -> Vec<TrainPair> {
    pair_indices(&group.labels(), max_pairs, seed)
        .into_iter()
        .map(|(i, j)| TrainPair {
            query_id: group.query.id.clone(),
            doc_id_pos: group.judged[i].0.id.clone(),
            doc_id_neg: group.judged[j].0.id.clone(),
        })
        .collect()
}

/// Raw features and labels for one query's judged documents.
#[derive(Debug, Clone)]
pub struct FeatureGroup {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub features: Vec<FeatureVector>,
}

pub fn extract_groups(extractor: &FeatureExtractor<'_>, mask: AblationMask) -> Result<Vec<FeatureGroup>> {
    extractor
        .dataset()
        .groups()
        .map(|g| {
            let features = g
                .judged
                .iter()
                .map(|(d, _)| extractor.assemble(g.query, d, mask))
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureGroup {
                query_id: g.query.id.clone(),
                doc_ids: g.judged.iter().map(|(d, _)| d.id.clone()).collect(),
                labels: g.labels(),
                features,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    /// TSV loss log: epoch, mean pair loss, pair count.
    pub fn loss_log(&self) -> String {
        let mut s = String::from("epoch\tmean_pair_loss\tpairs\n");
        for e in &self.history {
            let _ = writeln!(s, "{}\t{:.9}\t{}", e.epoch, e.mean_loss, e.pairs);
        }
        s
    }

    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.loss_log()).map_err(|e| Error::io(path, e))
    }
}

fn group_seed(seed: u64, group: usize) -> u64 {
    seed ^ (group as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains on a single dataset.
pub fn train(dataset: &Dataset, embedder: &Embedder, config: &TrainConfig) -> Result<TrainOutcome> {
    let schema = FeatureSchema::new(dataset.context_schema().to_vec());
    let extractor = FeatureExtractor::new(dataset, &schema, embedder, config.bm25)?;
    let groups = extract_groups(&extractor, config.mask)?;
    train_groups(&groups, &schema, config)
}

/// Trains on pre-extracted groups, possibly pooled from several datasets.
pub fn train_groups(groups: &[FeatureGroup], schema: &FeatureSchema, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let rows: Vec<FeatureVector> = groups.iter().flat_map(|g| g.features.iter().cloned()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != schema.total_dim()) {
        return Err(Error::DimMismatch {
            expected: schema.total_dim(),
            actual: bad.len(),
        });
    }

    // (group, pos, neg)
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (i, j) in pair_indices(&g.labels, config.max_pairs_per_query, group_seed(config.seed, gi)) {
            pairs.push((gi, i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoTrainablePairs);
    }

    let normalizer = Normalizer::fit(&rows)?;
    let inputs: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| {
            g.features
                .iter()
                .map(|f| normalizer.apply(f).map(FeatureVector::into_inner))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let arch = Architecture::new(schema.total_dim(), config.cross_layers, config.hidden_widths.clone());
    let mut net = Dcn::init(arch, config.seed)?;
    let mut state = AdamState::new(&net);
    let mut grads = net.zeros_like();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in pairs.chunks(config.batch_size) {
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            for &(gi, i, j) in batch {
                let (sp, cp) = net.forward(&inputs[gi][i])?;
                let (sn, cn) = net.forward(&inputs[gi][j])?;
                if !(sp.is_finite() && sn.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
                }
                let l = config.loss.pair_loss(sp, sn, config.margin);
                total += l.loss;
                if l.d_pos != 0.0 {
                    net.backward_into(&cp, l.d_pos * scale, &mut grads)?;
                }
                if l.d_neg != 0.0 {
                    net.backward_into(&cn, l.d_neg * scale, &mut grads)?;
                }
            }
            adam_step(&mut net, &grads, &mut state, &config.adam)?;
        }
        let mean_loss = total / pairs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        log::debug!("epoch {}: mean pair loss {mean_loss:.6}", epoch + 1);
        history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss,
            pairs: pairs.len(),
        });
    }

    net.round_to_f32();
    Ok(TrainOutcome {
        model: Model {
            schema: schema.clone(),
            mask: config.mask,
            bm25: config.bm25,
            normalizer,
            net,
            metadata: config.echo(),
        },
        history,
    })
}
