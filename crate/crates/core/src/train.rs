//! Batch loss, optimization loop with per-epoch checkpoints, and
//! evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress, RngState};
use crate::data::{TaskInfo, Utterance, Vocabulary};
use crate::decode::{aligned_positions, attention_greedy_decode, ctc_greedy_decode, slot_hits, WerTally};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::model::{Example, Model, ModelConfig};
use crate::moe::{aux_loss, aux_loss_term, LoadStats};
use crate::params::{GradBuffer, ParamStore};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached linearly after `warmup_steps`.
    pub lr: f64,
    pub warmup_steps: u64,
    pub alpha: f64,
    pub beta: f64,
    pub adam: AdamConfig,
    pub max_decode_len: usize,
    /// Decode the dev set every this many epochs (0 disables).
    pub dev_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 20,
            batch_size: 16,
            lr: 3e-4,
            warmup_steps: 100,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            adam: AdamConfig::default(),
            max_decode_len: 32,
            dev_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return fail("alpha and beta must be finite and >= 0");
        }
        if self.max_decode_len == 0 {
            return fail("max_decode_len must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Learning rate for the 0-based update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Per-layer routing accounting for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccounting {
    pub tokens: usize,
    pub expert_calls: usize,
    pub top_k: usize,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub losses: LossBundle,
    pub aux_per_layer: Vec<f64>,
    pub grads: GradBuffer,
    pub stats: Vec<LoadStats>,
    pub accounting: Vec<LayerAccounting>,
}

/// Forward and backward over a batch with one tape per item.
///
/// `l_att` and `l_ctc` are summed over positions and averaged over items.
/// The load-balancing term uses batch-level fractions `F` and is averaged
/// over MoE layers. Gradients are reduced in item order.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &[&Example], alpha: f64, beta: f64) -> Result<BatchResult> {
    batch_pass(model, store, batch, alpha, beta, true)
}

/// `L_total` of a batch without gradients.
pub fn batch_loss(model: &Model, store: &ParamStore, batch: &[&Example], alpha: f64, beta: f64) -> Result<LossBundle> {
    Ok(batch_pass(model, store, batch, alpha, beta, false)?.losses)
}

fn batch_pass(model: &Model, store: &ParamStore, batch: &[&Example], alpha: f64, beta: f64, backward: bool) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut items = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut tape = Tape::new();
        let f = model.forward_item(store, &mut tape, ex)?;
        items.push((tape, f));
    }
    let layers = model.num_moe_layers();
    let mut stats: Vec<LoadStats> = Vec::with_capacity(layers);
    let mut accounting = Vec::with_capacity(layers);
    for l in 0..layers {
        let e = items[0].1.encoder.moe[l].stats.counts.len();
        let mut s = LoadStats::empty(e);
        let mut calls = 0;
        for (_, f) in &items {
            s.merge(&f.encoder.moe[l].stats);
            calls += f.encoder.moe[l].total_expert_calls();
        }
        accounting.push(LayerAccounting { tokens: s.tokens, expert_calls: calls, top_k: items[0].1.encoder.moe[l].routing.indices[0].len() });
        stats.push(s);
    }
    let aux_per_layer: Vec<f64> = stats.iter().map(aux_loss).collect();
    let fractions: Vec<Vec<f64>> = stats.iter().map(LoadStats::fractions).collect();

    let mut l_att = 0.0;
    let mut l_ctc = 0.0;
    let mut grads = GradBuffer::new(store);
    for (tape, f) in &mut items {
        l_att += tape.value(f.l_att).item()?;
        l_ctc += tape.value(f.l_ctc).item()?;
        if !backward {
            continue;
        }
        let mut terms = vec![tape.scale(f.l_att, 1.0 / b), tape.scale(f.l_ctc, alpha / b)];
        if layers > 0 && beta != 0.0 {
            for (l, out) in f.encoder.moe.iter().enumerate() {
                let t = aux_loss_term(tape, out.probs, &fractions[l], stats[l].tokens)?;
                terms.push(tape.scale(t, beta / layers as f64));
            }
        }
        let loss = tape.add_n(&terms)?;
        tape.backward(loss)?;
        for (id, g) in tape.take_param_grads() {
            grads.accumulate(id, &g);
        }
    }
    let losses = total_loss(l_att / b, l_ctc / b, &aux_per_layer, alpha, beta);
    if !losses.l_total.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {}", losses.l_total)));
    }
    if backward && !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(BatchResult { losses, aux_per_layer, grads, stats, accounting })
}

/// Line written to the metrics log after each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_att: f64,
    pub l_ctc: f64,
    pub l_aux: Vec<f64>,
    pub l_total: f64,
    pub dev_wer: Option<f64>,
    pub steps: u64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn mean_aux(&self) -> f64 {
        if self.l_aux.is_empty() {
            0.0
        } else {
            self.l_aux.iter().sum::<f64>() / self.l_aux.len() as f64
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub progress: Progress,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh model from `seed`; batch shuffling draws from a separate
    /// stream of the same seed.
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, store) = Model::new(cfg.model.clone(), &mut init_rng)?;
        Ok(Self::from_parts(cfg, model, store, seed))
    }

    /// Starts training from existing weights, e.g. a dense model converted
    /// with [`Model::moe_from_dense`].
    pub fn from_parts(cfg: &TrainConfig, model: Model, store: ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let adam = Adam::new(&store, cfg.adam);
        let progress = Progress { epoch: 0, step: 0, rng: RngState::capture(seed, &rng) };
        TrainState { model, store, adam, progress, rng }
    }

    /// Continues from a checkpoint written by [`train`]. The model config
    /// of `cfg` must match the checkpoint's.
    pub fn resume(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let (model, mut store) = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_params_into(&mut store)?;
        let adam = ck.restore_optimizer(&store, cfg.adam)?;
        let rng = ck.progress.rng.restore();
        Ok(TrainState { model, store, adam, progress: ck.progress.clone(), rng })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, task: &TaskInfo) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(&self.model.cfg, task, &self.store).with_optimizer(&self.store, &self.adam);
        ck.progress = self.progress.clone();
        ck.progress.rng = RngState::capture(self.progress.rng.seed, &self.rng);
        ck.extra.insert("train".into(), serde_json::to_value(cfg)?);
        Ok(ck)
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, cfg: &TrainConfig, batch: &[&Example]) -> Result<BatchResult> {
        let result = batch_gradients(&self.model, &self.store, batch, cfg.alpha, cfg.beta)?;
        let lr = cfg.lr_at(self.progress.step);
        self.adam.update(&mut self.store, &result.grads, lr)?;
        self.progress.step += 1;
        if self.store.ids().any(|id| !self.store.get(id).is_finite()) {
            return Err(Error::Numeric(format!("parameters became non-finite at step {}", self.progress.step)));
        }
        Ok(result)
    }
}

/// Where and whether to write checkpoints and metrics.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub ckpt_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (total, not additional).
    pub stop_after_epoch: Option<usize>,
}

/// Runs epochs until `cfg.epochs` (or `stop_after_epoch`), returning the
/// metrics of the epochs run here.
pub fn train(
    cfg: &TrainConfig,
    state: &mut TrainState,
    train_set: &[Utterance],
    dev_set: Option<&[Utterance]>,
    task: &TaskInfo,
    outputs: &TrainOutputs,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for u in train_set {
        let need = crate::losses::ctc_min_frames(&u.example.tokens);
        if u.example.stacked.rows() < need {
            return Err(Error::Input(format!(
                "{}: ctc target infeasible, {} speech tokens but at least {need} required",
                u.utt_id,
                u.example.stacked.rows()
            )));
        }
    }
    if let Some(dir) = &outputs.ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let end = outputs.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut all = Vec::new();
    while state.progress.epoch < end {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut aux_sum = vec![0.0; state.model.num_moe_layers()];
        let mut batches = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i].example).collect();
            lr = cfg.lr_at(state.progress.step);
            let r = state.step(cfg, &batch).map_err(|e| match e {
                Error::CtcInfeasible { .. } => {
                    let ids: Vec<&str> = chunk.iter().map(|&i| train_set[i].utt_id.as_str()).collect();
                    Error::Input(format!("batch [{}]: {e}", ids.join(", ")))
                }
                other => other,
            })?;
            sums.0 += r.losses.l_att;
            sums.1 += r.losses.l_ctc;
            sums.2 += r.losses.l_total;
            for (a, v) in aux_sum.iter_mut().zip(&r.aux_per_layer) {
                *a += v;
            }
            batches += 1;
        }
        state.progress.epoch += 1;
        state.progress.rng = RngState::capture(state.progress.rng.seed, &state.rng);
        let n = batches as f64;
        let dev_wer = match dev_set {
            Some(dev) if cfg.dev_every > 0 && state.progress.epoch.is_multiple_of(cfg.dev_every) => {
                Some(evaluate(&state.model, &state.store, dev, task, cfg.max_decode_len)?.overall_wer)
            }
            _ => None,
        };
        let m = EpochMetrics {
            epoch: state.progress.epoch,
            l_att: sums.0 / n,
            l_ctc: sums.1 / n,
            l_aux: aux_sum.iter().map(|a| a / n).collect(),
            l_total: sums.2 / n,
            dev_wer,
            steps: state.progress.step,
            lr,
        };
        if let Some(dir) = &outputs.ckpt_dir {
            let ck = state.checkpoint(cfg, task)?;
            ck.save(&dir.join(format!("epoch-{:03}.ckpt", m.epoch)))?;
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            let path = dir.join(METRICS_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(&m)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        on_epoch(&m);
        all.push(m);
    }
    Ok(all)
}

/// Scores for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttRecord {
    pub utt_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub ctc_hypothesis: String,
    pub errors: usize,
    pub ref_words: usize,
    pub wer: f64,
    pub has_homophone: bool,
    /// Correctness of each homophone-group word in the reference.
    pub homophone_hits: Vec<bool>,
    /// Per homophone word: `None` if the aligned hypothesis word is not from
    /// the same group, else whether the right member was chosen.
    pub within_group: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    /// Corpus WER from attention greedy decoding.
    pub overall_wer: f64,
    /// CTC greedy decoding, as a diagnostic.
    pub ctc_wer: f64,
    pub homophone_utterances: usize,
    /// WER over utterances that contain a homophone word (`None` if none).
    pub homophone_wer: Option<f64>,
    /// Share of homophone-word reference positions decoded correctly.
    pub homophone_slot_accuracy: Option<f64>,
    pub homophone_slots: usize,
    pub homophone_slot_hits: usize,
    /// Homophone slots decoded as some member of the right group, and how
    /// many of those picked the right member. Audio alone cannot do better
    /// than chance here.
    pub within_group_slots: usize,
    pub within_group_hits: usize,
    pub within_group_accuracy: Option<f64>,
    pub records: Vec<UttRecord>,
}

impl EvalReport {
    /// `1 - homophone_wer`.
    pub fn homophone_word_accuracy(&self) -> Option<f64> {
        self.homophone_wer.map(|w| 1.0 - w)
    }
}

/// Greedy-decodes every utterance and scores it. Words are compared as
/// strings, so unknown ids in a hypothesis count as errors.
pub fn evaluate(model: &Model, store: &ParamStore, utts: &[Utterance], task: &TaskInfo, max_len: usize) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let vocab = Vocabulary::new(&task.words, &model.cfg.special)?;
    if vocab.size() != model.cfg.vocab_size {
        return Err(Error::Config(format!(
            "task has {} ids but the model outputs {}",
            vocab.size(),
            model.cfg.vocab_size
        )));
    }
    let mut overall = WerTally::default();
    let mut ctc = WerTally::default();
    let mut homophone = WerTally::default();
    let (mut slots, mut hits) = (0, 0);
    let (mut group_slots, mut group_hits) = (0, 0);
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let (states, ctc_logits) = encode_plain(model, store, &u.example)?;
        let hyp = attention_greedy_decode(model, store, &states, max_len)?;
        let hyp_words = vocab.decode(&hyp.tokens);
        let ctc_words = vocab.decode(&ctc_greedy_decode(&ctc_logits, model.cfg.special.blank).tokens);
        let reference = &u.words;
        let errors = crate::decode::edit_distance(reference, &hyp_words);
        overall.add(reference, &hyp_words)?;
        ctc.add(reference, &ctc_words)?;
        let hslots = task.homophone_slots(reference);
        let homophone_hits = slot_hits(reference, &hyp_words, &hslots);
        let aligned = aligned_positions(reference, &hyp_words);
        let within_group: Vec<Option<bool>> = hslots
            .iter()
            .map(|&s| {
                let h = &hyp_words[aligned[s]?];
                task.same_group(&reference[s], h).then(|| *h == reference[s])
            })
            .collect();
        group_slots += within_group.iter().flatten().count();
        group_hits += within_group.iter().flatten().filter(|&&h| h).count();
        if !hslots.is_empty() {
            homophone.add(reference, &hyp_words)?;
            slots += hslots.len();
            hits += homophone_hits.iter().filter(|&&h| h).count();
        }
        records.push(UttRecord {
            utt_id: u.utt_id.clone(),
            reference: reference.join(" "),
            hypothesis: hyp_words.join(" "),
            ctc_hypothesis: ctc_words.join(" "),
            errors,
            ref_words: reference.len(),
            wer: errors as f64 / reference.len() as f64,
            has_homophone: !hslots.is_empty(),
            homophone_hits,
            within_group,
        });
    }
    let homophone_utterances = records.iter().filter(|r| r.has_homophone).count();
    Ok(EvalReport {
        utterances: utts.len(),
        overall_wer: overall.wer()?,
        ctc_wer: ctc.wer()?,
        homophone_utterances,
        homophone_wer: (homophone_utterances > 0).then(|| homophone.wer()).transpose()?,
        homophone_slot_accuracy: (slots > 0).then(|| hits as f64 / slots as f64),
        homophone_slots: slots,
        homophone_slot_hits: hits,
        within_group_slots: group_slots,
        within_group_hits: group_hits,
        within_group_accuracy: (group_slots > 0).then(|| group_hits as f64 / group_slots as f64),
        records,
    })
}

/// Encoder states and CTC logits as plain tensors.
pub fn encode_plain(model: &Model, store: &ParamStore, ex: &Example) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let enc = model.encode(store, &mut tape, &ex.stacked, ex.visual.as_ref())?;
    let logits = model.ctc_logits(store, &mut tape, &enc)?;
    Ok((tape.value(enc.states).clone(), tape.value(logits).clone()))
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, load_utterances, SplitSizes, SyntheticTaskSpec};
    use crate::frontend::FrontendConfig;
    use crate::moe::MoeConfig;

    fn tiny_cfg(vocab_size: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                frontend: FrontendConfig { n_mels: 20, ..FrontendConfig::default() },
                hidden: 8,
                heads: 2,
                ffn_hidden: 16,
                num_encoder_blocks: 1,
                num_decoder_blocks: 1,
                vocab_size,
                moe: Some(MoeConfig { num_experts: 4, top_k: 2, ..MoeConfig::default() }),
                ..ModelConfig::default()
            },
            epochs: 2,
            batch_size: 3,
            lr: 1e-3,
            warmup_steps: 2,
            max_decode_len: 6,
            ..TrainConfig::default()
        }
    }

    fn corpus() -> (tempfile::TempDir, SyntheticTaskSpec, Vec<Utterance>, Vec<Utterance>) {
        let mut spec = SyntheticTaskSpec::reference();
        spec.splits = SplitSizes { train: 8, dev: 3, test: 1 };
        spec.symbol_duration_ms = 80.0;
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&spec, dir.path(), false).unwrap();
        let vocab = Vocabulary::new(&spec.vocab, &Default::default()).unwrap();
        let fe = tiny_cfg(16).model.frontend;
        let train = load_utterances(&dir.path().join("train.jsonl"), &vocab, &fe, false).unwrap();
        let dev = load_utterances(&dir.path().join("dev.jsonl"), &vocab, &fe, false).unwrap();
        (dir, spec, train, dev)
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig { lr: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(50), 1.0);
    }

    #[test]
    fn one_epoch_smoke_and_accounting() {
        let (dir, spec, train_set, dev) = corpus();
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg(16) };
        let mut state = TrainState::new(&cfg, 1).unwrap();
        let outputs = TrainOutputs { ckpt_dir: Some(dir.path().join("ck")), stop_after_epoch: None };
        let metrics = train(&cfg, &mut state, &train_set, Some(&dev), &spec.task_info(), &outputs, &mut |_| {}).unwrap();
        assert_eq!(metrics.len(), 1);
        assert!(metrics[0].l_total.is_finite());
        assert!(metrics[0].dev_wer.is_some());
        assert_eq!(read_metrics(&dir.path().join("ck").join(METRICS_FILE)).unwrap(), metrics);
        assert!(dir.path().join("ck/epoch-001.ckpt").exists());

        let batch: Vec<&Example> = train_set.iter().take(3).map(|u| &u.example).collect();
        let r = batch_gradients(&state.model, &state.store, &batch, 0.3, 0.01).unwrap();
        for a in &r.accounting {
            assert_eq!(a.expert_calls, a.top_k * a.tokens);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (dir, spec, train_set, _) = corpus();
        let cfg = tiny_cfg(16);
        let task = spec.task_info();
        let mut full = TrainState::new(&cfg, 5).unwrap();
        train(&cfg, &mut full, &train_set, None, &task, &TrainOutputs::default(), &mut |_| {}).unwrap();

        let ck_dir = dir.path().join("resume");
        let mut first = TrainState::new(&cfg, 5).unwrap();
        let outputs = TrainOutputs { ckpt_dir: Some(ck_dir.clone()), stop_after_epoch: Some(1) };
        train(&cfg, &mut first, &train_set, None, &task, &outputs, &mut |_| {}).unwrap();
        let ck = Checkpoint::load(&ck_dir.join(LAST_CHECKPOINT)).unwrap();
        let mut resumed = TrainState::resume(&cfg, &ck).unwrap();
        assert_eq!(resumed.progress.epoch, 1);
        train(&cfg, &mut resumed, &train_set, None, &task, &TrainOutputs::default(), &mut |_| {}).unwrap();

        for id in full.store.ids() {
            assert_eq!(full.store.get(id).data(), resumed.store.get(id).data(), "{}", full.store.name(id));
        }
        assert_eq!(full.adam, resumed.adam);
        assert_eq!(full.progress, resumed.progress);
    }

    #[test]
    fn nan_input_is_a_numeric_error() {
        let (_dir, _spec, train_set, _) = corpus();
        let cfg = tiny_cfg(16);
        let mut state = TrainState::new(&cfg, 2).unwrap();
        let mut ex = train_set[0].example.clone();
        ex.stacked.data_mut()[0] = f64::NAN;
        assert!(matches!(state.step(&cfg, &[&ex]), Err(Error::Numeric(_))));
    }

    #[test]
    fn infeasible_sample_names_utterance() {
        let (_dir, spec, mut train_set, _) = corpus();
        let cfg = tiny_cfg(16);
        let mut state = TrainState::new(&cfg, 2).unwrap();
        train_set[1].example.stacked = train_set[1].example.stacked.slice_rows(0, 1).unwrap();
        train_set[1].example.tokens = vec![4, 5, 6];
        let err = train(&cfg, &mut state, &train_set, None, &spec.task_info(), &TrainOutputs::default(), &mut |_| {}).unwrap_err();
        assert!(err.to_string().contains(&train_set[1].utt_id), "{err}");
    }

    #[test]
    fn evaluation_is_deterministic_and_counts_slots() {
        let (_dir, spec, _, dev) = corpus();
        let cfg = tiny_cfg(16);
        let state = TrainState::new(&cfg, 3).unwrap();
        let a = evaluate(&state.model, &state.store, &dev, &spec.task_info(), 6).unwrap();
        let b = evaluate(&state.model, &state.store, &dev, &spec.task_info(), 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances, 3);
        let expected: usize = dev.iter().map(|u| spec.task_info().homophone_slots(&u.words).len()).sum();
        assert_eq!(a.homophone_slots, expected);
    }

    #[test]
    fn config_rejects_nonsense() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
        let json = r#"{"epochs": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
    }
}
