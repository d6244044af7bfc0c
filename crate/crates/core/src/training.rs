//! Pair sampling, DTW pair preparation and the Siamese training loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::UPDATE_GATE_BIAS;
use crate::autodiff::{grad_check, Adam, AdamConfig, GradCheckReport, Gradients, Graph, LossFn, Mode, ParamStore, Precision, Real, Var};
use crate::dtw::{dtw, expand_along_path, AlignedPair, PairLabel, WarpingPath};
use crate::evaluation::{compute_eer, ScoreSet};
use crate::features::{extract_time_functions, znormalize_channels, FeatureSequence};
use crate::model::{half_tensor, ModelConfig, SiameseModel, SiameseNet, Variant};
use crate::signature::{resample_uniform, RawSignature, SignatureLabel, DEFAULT_RATE_HZ};
use crate::{Error, Result};

/// Resample at 100 Hz, extract the 23 time functions and z-normalise them.
pub fn signature_features(sig: &RawSignature) -> Result<FeatureSequence> {
    let u = resample_uniform(sig, DEFAULT_RATE_HZ)?;
    Ok(znormalize_channels(&extract_time_functions(&u)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignatureRecord {
    /// Unique key, e.g. the file path or sample id.
    pub id: String,
    pub subject_id: String,
    pub label: SignatureLabel,
    pub features: FeatureSequence,
}

/// Feature sequences of one dataset split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    records: Vec<SignatureRecord>,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses each signature's sample id as its key.
    pub fn from_signatures(sigs: &[RawSignature]) -> Result<Self> {
        let mut bank = Self::new();
        for s in sigs {
            bank.push(SignatureRecord {
                id: s.sample_id().into(),
                subject_id: s.subject_id().into(),
                label: s.label(),
                features: signature_features(s)?,
            });
        }
        Ok(bank)
    }

    pub fn push(&mut self, record: SignatureRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[SignatureRecord] {
        &self.records
    }

    pub fn get(&self, i: usize) -> &SignatureRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }
}

/// Fails with a protocol error naming the shared subjects.
pub fn check_subject_disjoint<'a>(
    a: impl IntoIterator<Item = &'a str>,
    b: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let a: BTreeSet<&str> = a.into_iter().collect();
    let shared: Vec<&str> = b.into_iter().filter(|s| a.contains(s)).collect::<BTreeSet<_>>().into_iter().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!("overlapping subjects: {}", shared.join(", "))))
    }
}

/// One comparison, referring to records of a [`FeatureBank`] by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairSpec {
    pub enrolled: usize,
    pub questioned: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<PairSpec>,
    /// Set when the skilled share was moved to random pairs.
    pub skilled_reallocated: bool,
}

struct Pools {
    /// Genuine record indices per subject.
    genuine: Vec<Vec<usize>>,
    forgeries: Vec<Vec<usize>>,
}

impl Pools {
    fn new(bank: &FeatureBank) -> Self {
        let mut by_subject: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, r) in bank.records().iter().enumerate() {
            let e = by_subject.entry(r.subject_id.as_str()).or_default();
            match r.label {
                SignatureLabel::Genuine => e.0.push(i),
                SignatureLabel::SkilledForgery => e.1.push(i),
            }
        }
        let (genuine, forgeries) = by_subject.into_values().unzip();
        Self { genuine, forgeries }
    }

    fn subjects_where(&self, f: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.genuine.len()).filter(|&s| f(s)).collect()
    }

    /// Every pair of `label`, in a fixed order.
    fn enumerate(&self, label: PairLabel) -> Vec<PairSpec> {
        let mut out = Vec::new();
        for (s, gen) in self.genuine.iter().enumerate() {
            for &a in gen {
                let qs: Vec<usize> = match label {
                    PairLabel::Match => gen.iter().copied().filter(|&b| b != a).collect(),
                    PairLabel::NonmatchSkilled => self.forgeries[s].clone(),
                    PairLabel::NonmatchRandom => self
                        .genuine
                        .iter()
                        .enumerate()
                        .filter(|&(t, _)| t != s)
                        .flat_map(|(_, g)| g.iter().copied())
                        .collect(),
                };
                out.extend(qs.into_iter().map(|q| PairSpec {
                    enrolled: a,
                    questioned: q,
                    label,
                }));
            }
        }
        out
    }

    fn pool_size(&self, label: PairLabel) -> usize {
        let total: usize = self.genuine.iter().map(Vec::len).sum();
        self.genuine
            .iter()
            .enumerate()
            .map(|(s, g)| {
                let n = g.len();
                match label {
                    PairLabel::Match => n * n.saturating_sub(1),
                    PairLabel::NonmatchSkilled => n * self.forgeries[s].len(),
                    PairLabel::NonmatchRandom => n * (total - n),
                }
            })
            .sum()
    }

    fn draw(&self, label: PairLabel, rng: &mut ChaCha8Rng) -> PairSpec {
        let eligible = match label {
            PairLabel::Match => self.subjects_where(|s| self.genuine[s].len() >= 2),
            PairLabel::NonmatchSkilled => {
                self.subjects_where(|s| !self.genuine[s].is_empty() && !self.forgeries[s].is_empty())
            }
            PairLabel::NonmatchRandom => self.subjects_where(|s| !self.genuine[s].is_empty()),
        };
        let s = eligible[rng.random_range(0..eligible.len())];
        let gen = &self.genuine[s];
        let a = gen[rng.random_range(0..gen.len())];
        let q = match label {
            PairLabel::Match => loop {
                let b = gen[rng.random_range(0..gen.len())];
                if b != a {
                    break b;
                }
            },
            PairLabel::NonmatchSkilled => self.forgeries[s][rng.random_range(0..self.forgeries[s].len())],
            PairLabel::NonmatchRandom => loop {
                let t = eligible[rng.random_range(0..eligible.len())];
                if t != s {
                    let g = &self.genuine[t];
                    break g[rng.random_range(0..g.len())];
                }
            },
        };
        PairSpec {
            enrolled: a,
            questioned: q,
            label,
        }
    }

    /// `count` pairs of `label` without repeats until the pool is used up.
    fn sample(&self, label: PairLabel, count: usize, rng: &mut ChaCha8Rng) -> Vec<PairSpec> {
        let size = self.pool_size(label);
        if count == 0 || size == 0 {
            return Vec::new();
        }
        if size <= 4 * count {
            let mut all = self.enumerate(label);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                all.shuffle(rng);
                out.extend(all.iter().take(count - out.len()).copied());
            }
            return out;
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let p = self.draw(label, rng);
            if seen.insert((p.enrolled, p.questioned)) {
                out.push(p);
            }
        }
        out
    }
}

/// Draws `count` labelled pairs: half matches, a quarter random and a
/// quarter skilled non-matches (shares rounded down, remainder to matches).
/// Without skilled forgeries the skilled share goes to random pairs.
pub fn sample_pairs(bank: &FeatureBank, count: usize, seed: u64) -> Result<PairSample> {
    let pools = Pools::new(bank);
    let subjects_with_genuine = pools.genuine.iter().filter(|g| !g.is_empty()).count();
    if subjects_with_genuine < 2 {
        return Err(Error::Validation(format!(
            "pair sampling needs at least 2 subjects with genuine signatures, got {subjects_with_genuine}"
        )));
    }
    if pools.pool_size(PairLabel::Match) == 0 {
        return Err(Error::Validation("no subject has two genuine signatures".into()));
    }
    let mut n_random = count / 4;
    let mut n_skilled = count / 4;
    let n_match = count - n_random - n_skilled;
    let skilled_reallocated = n_skilled > 0 && pools.pool_size(PairLabel::NonmatchSkilled) == 0;
    if skilled_reallocated {
        n_random += n_skilled;
        n_skilled = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = pools.sample(PairLabel::Match, n_match, &mut rng);
    pairs.extend(pools.sample(PairLabel::NonmatchRandom, n_random, &mut rng));
    pairs.extend(pools.sample(PairLabel::NonmatchSkilled, n_skilled, &mut rng));
    pairs.shuffle(&mut rng);
    Ok(PairSample {
        pairs,
        skilled_reallocated,
    })
}

/// Turns pair references into aligned model inputs.
pub trait PairSource {
    fn prepare(&mut self, bank: &FeatureBank, pairs: &[PairSpec], length: usize) -> Result<Vec<AlignedPair>>;
}

/// Least-recently-used cache of warping paths keyed by (enrolled id, questioned id).
pub type PathKey = (String, String);

pub fn path_key(bank: &FeatureBank, p: &PairSpec) -> PathKey {
    (bank.get(p.enrolled).id.clone(), bank.get(p.questioned).id.clone())
}

#[derive(Debug, Clone)]
pub struct PathCache {
    capacity: usize,
    tick: u64,
    entries: BTreeMap<PathKey, (u64, WarpingPath)>,
    by_age: BTreeMap<u64, PathKey>,
}

impl PathCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            tick: 0,
            entries: BTreeMap::new(),
            by_age: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, key: &PathKey) -> Option<&WarpingPath> {
        self.tick += 1;
        let tick = self.tick;
        let entry = self.entries.get_mut(key)?;
        self.by_age.remove(&entry.0);
        entry.0 = tick;
        self.by_age.insert(tick, key.clone());
        Some(&entry.1)
    }

    pub fn contains(&self, key: &PathKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, key: PathKey, path: WarpingPath) {
        self.tick += 1;
        if let Some((old, _)) = self.entries.insert(key.clone(), (self.tick, path)) {
            self.by_age.remove(&old);
        }
        self.by_age.insert(self.tick, key);
        while self.entries.len() > self.capacity {
            let (_, oldest) = self.by_age.pop_first().expect("age index tracks entries");
            self.entries.remove(&oldest);
        }
    }
}

pub fn align_pair(bank: &FeatureBank, p: &PairSpec) -> Result<WarpingPath> {
    dtw(&bank.get(p.enrolled).features, &bank.get(p.questioned).features)
}

pub fn expand_pair(bank: &FeatureBank, p: &PairSpec, path: &WarpingPath, length: usize) -> Result<AlignedPair> {
    expand_along_path(
        &bank.get(p.enrolled).features,
        &bank.get(p.questioned).features,
        path,
        length,
        Some(p.label),
    )
}

/// Sequential aligner with a path cache.
#[derive(Debug, Clone)]
pub struct CachedAligner {
    pub cache: PathCache,
}

impl CachedAligner {
    pub fn new(capacity: usize) -> Self {
        Self {
            cache: PathCache::new(capacity),
        }
    }
}

impl Default for CachedAligner {
    fn default() -> Self {
        Self::new(8192)
    }
}

impl PairSource for CachedAligner {
    fn prepare(&mut self, bank: &FeatureBank, pairs: &[PairSpec], length: usize) -> Result<Vec<AlignedPair>> {
        pairs
            .iter()
            .map(|p| {
                let key = path_key(bank, p);
                if !self.cache.contains(&key) {
                    let path = align_pair(bank, p)?;
                    self.cache.insert(key.clone(), path);
                }
                let path = self.cache.get(&key).expect("just inserted");
                expand_pair(bank, p, path, length)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pairs_per_epoch: usize,
    /// Comparisons sampled once from the validation split.
    pub validation_pairs: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            pairs_per_epoch: 256,
            validation_pairs: 128,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs_per_epoch == 0 || self.validation_pairs == 0 {
            return Err(Error::Config("batch size and pair counts must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub best_validation_eer: f64,
    pub best_epoch: usize,
    pub patience_counter: usize,
    pub rng_seed: u64,
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_eer_r: Option<f64>,
    pub val_eer_s: Option<f64>,
    pub val_eer_o: f64,
}

pub struct TrainOutcome<F: Real> {
    /// Parameters of the epoch with the lowest validation EER.
    pub model: SiameseModel<F>,
    pub optimizer: Adam<F>,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    pub skilled_reallocated: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.random()
}

/// Mean over `pairs` of the BCE of both argument orders, with gradients.
pub fn batch_loss_and_grads<F: Real>(
    model: &SiameseModel<F>,
    pairs: &[AlignedPair],
    mode_seed: Option<u64>,
) -> Result<(f64, Vec<Gradients<F>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    let scale = 1.0 / pairs.len() as f64;
    for (i, pair) in pairs.iter().enumerate() {
        let mode = match mode_seed {
            Some(s) => Mode::Train { seed: mix(s, 0, i as u64) },
            None => Mode::Eval,
        };
        let mut g = Graph::new(model.params(), mode);
        let l = pair_loss(model.net(), &mut g, pair)?;
        total += g.value(l).data()[0].as_f64();
        let l = g.scale(l, scale);
        grads.push(g.backward(l)?);
    }
    Ok((total * scale, grads))
}

/// Symmetric BCE of one labelled aligned pair, usable with
/// [`grad_check`](crate::autodiff::grad_check).
pub struct PairLoss<'a> {
    pub net: &'a SiameseNet,
    pub pair: &'a AlignedPair,
}

impl LossFn for PairLoss<'_> {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        pair_loss(self.net, g, self.pair)
    }
}

/// A reduced `variant` model and a random labelled pair of `input_length`
/// rows, three quarters of them valid, for finite-difference checks.
///
/// Parameters are moved off their initial values: zero biases put padded
/// rows exactly on relu kinks, and the mirrored head cancels any shift shared
/// by both embeddings, which leaves some gradients exactly zero at init. The
/// update-gate bias is taken back to zero, since a saturated gate shrinks the
/// input-weight gradients to where central-difference round-off dominates.
pub fn grad_check_point(variant: Variant, input_length: usize, seed: u64) -> Result<(SiameseModel<f64>, AlignedPair)> {
    let mut model = SiameseModel::<f64>::new(ModelConfig::reduced(variant, input_length).with_seed(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4, 0));
    let hidden = model.config().rnn_hidden;
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with(".b_ih") {
            for v in &mut p.value.data_mut()[hidden..2 * hidden] {
                *v -= UPDATE_GATE_BIAS;
            }
        }
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let c = model.config().input_channels;
    let valid = (3 * input_length / 4).max(1);
    let mut half = || {
        let mut v = alloc::vec![0.0; input_length * c];
        for x in &mut v[..valid * c] {
            *x = rng.random_range(-1.5..1.5);
        }
        v
    };
    let (a, b) = (half(), half());
    let label = if seed.is_multiple_of(2) { PairLabel::Match } else { PairLabel::NonmatchSkilled };
    let pair = AlignedPair {
        a,
        b,
        length: input_length,
        channels: c,
        valid_length: valid,
        label: Some(label),
    };
    Ok((model, pair))
}

/// [`grad_check`] of the pair loss at [`grad_check_point`].
pub fn grad_check_model(variant: Variant, input_length: usize, seed: u64, precision: Precision) -> Result<GradCheckReport> {
    let (model, pair) = grad_check_point(variant, input_length, seed)?;
    grad_check(
        model.params(),
        &PairLoss {
            net: model.net(),
            pair: &pair,
        },
        precision,
    )
}

/// Mean BCE of both argument orders against the pair's label.
pub fn pair_loss<F: Real>(net: &SiameseNet, g: &mut Graph<'_, F>, pair: &AlignedPair) -> Result<Var> {
    let label = pair
        .label
        .ok_or_else(|| Error::Validation("training pair has no label".into()))?;
    let xa = g.input(half_tensor(&pair.a, pair.length, pair.channels)?);
    let xb = g.input(half_tensor(&pair.b, pair.length, pair.channels)?);
    let ea = net.embed(g, xa, pair.valid_length)?;
    let eb = net.embed(g, xb, pair.valid_length)?;
    let sab = net.score(g, ea, eb)?;
    let sba = net.score(g, eb, ea)?;
    let s = g.concat_cols(&[sab, sba])?;
    let target = if label.is_match() { 1.0 } else { 0.0 };
    g.bce(s, &[target, target])
}

/// One optimizer step on `pairs`; returns the batch loss before the step.
pub fn train_step<F: Real>(
    model: &mut SiameseModel<F>,
    optimizer: &mut Adam<F>,
    pairs: &[AlignedPair],
    mode_seed: Option<u64>,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(model, pairs, mode_seed)?;
    let store: &mut ParamStore<F> = model.params_mut();
    store.zero_grad();
    for g in &grads {
        store.accumulate(g);
    }
    optimizer.step(store);
    Ok(loss)
}

/// Scores aligned labelled pairs with the symmetrised head.
pub fn score_pairs<F: Real>(model: &SiameseModel<F>, pairs: &[AlignedPair]) -> Result<ScoreSet> {
    crate::evaluation::compute_scores(model, pairs)
}

/// Fraction of pairs whose symmetrised score falls on the correct side of 0.5.
pub fn pair_accuracy<F: Real>(model: &SiameseModel<F>, pairs: &[AlignedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("no pairs to score".into()));
    }
    let mut correct = 0usize;
    for p in pairs {
        let label = p.label.ok_or_else(|| Error::Validation("pair has no label".into()))?;
        let s = model.score_pair(p)?;
        if (s >= 0.5) == label.is_match() {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// R, S and overall EER of scored comparisons.
pub fn validation_eers(scores: &ScoreSet) -> Result<(Option<f64>, Option<f64>, f64)> {
    let per = |imp: &[f64]| -> Result<Option<f64>> {
        if imp.is_empty() {
            Ok(None)
        } else {
            Ok(Some(compute_eer(&scores.genuine, imp)?.eer))
        }
    };
    Ok((
        per(&scores.impostor_random)?,
        per(&scores.impostor_skilled)?,
        compute_eer(&scores.genuine, &scores.impostor_all())?.eer,
    ))
}

/// Full training run with early stopping on validation EER.
///
/// Each epoch draws `pairs_per_epoch` fresh pairs, and the validation
/// comparisons are drawn once. `on_epoch` sees every log line as it is made.
pub fn train<F: Real>(
    config: ModelConfig,
    train_set: &FeatureBank,
    validation_set: &FeatureBank,
    hyper: &TrainHyper,
    source: &mut dyn PairSource,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    hyper.validate()?;
    check_subject_disjoint(train_set.subjects(), validation_set.subjects())?;
    let length = config.input_length;
    let mut model = SiameseModel::<F>::new(config)?;
    let mut optimizer = Adam::new(hyper.adam, model.params());

    let val_sample = sample_pairs(validation_set, hyper.validation_pairs, mix(hyper.seed, 1, 0))?;
    let val_pairs = source.prepare(validation_set, &val_sample.pairs, length)?;

    let mut state = TrainState {
        epoch: 0,
        step: 0,
        best_validation_eer: f64::INFINITY,
        best_epoch: 0,
        patience_counter: 0,
        rng_seed: hyper.seed,
    };
    let mut best = model.params().clone();
    let mut log = Vec::new();
    let mut skilled_reallocated = val_sample.skilled_reallocated;

    for epoch in 1..=hyper.max_epochs {
        state.epoch = epoch;
        let sample = sample_pairs(train_set, hyper.pairs_per_epoch, mix(hyper.seed, 2, epoch as u64))?;
        skilled_reallocated |= sample.skilled_reallocated;
        let mut loss_sum = 0.0;
        for (b, chunk) in sample.pairs.chunks(hyper.batch_size).enumerate() {
            let batch = source.prepare(train_set, chunk, length)?;
            let dropout_seed = mix(hyper.seed, 3, (epoch as u64) << 32 | b as u64);
            let loss = train_step(&mut model, &mut optimizer, &batch, Some(dropout_seed))?;
            loss_sum += loss * chunk.len() as f64;
            state.step += 1;
        }
        let scores = score_pairs(&model, &val_pairs)?;
        let (r, s, o) = validation_eers(&scores)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / sample.pairs.len() as f64,
            val_eer_r: r,
            val_eer_s: s,
            val_eer_o: o,
        };
        on_epoch(&entry);
        log.push(entry);
        if o < state.best_validation_eer {
            state.best_validation_eer = o;
            state.best_epoch = epoch;
            state.patience_counter = 0;
            best = model.params().clone();
        } else {
            state.patience_counter += 1;
            if state.patience_counter >= hyper.patience {
                break;
            }
        }
    }
    *model.params_mut() = best;
    Ok(TrainOutcome {
        model,
        optimizer,
        state,
        log,
        skilled_reallocated,
    })
}
