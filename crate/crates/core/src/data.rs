//! Synthetic tone-language corpus with homophones, manifests and loading.
//!
//! Every word is a sine tone. Words in a homophone group share one tone, so
//! audio alone cannot tell them apart; the visual tokens of an utterance
//! carry one code per homophone word spoken.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{features, load_audio, stack_frames, write_wav, FrontendConfig, Waveform};
use crate::fusion::{load_visual_embeddings, save_visual_embeddings, VisualTokens};
use crate::model::{Example, SpecialTokens};
use crate::tensor::Tensor;

pub const TASK_FILE: &str = "task.json";
const AMPLITUDE: f64 = 0.5;

/// Maps words to token ids after the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    offset: usize,
}

impl Vocabulary {
    pub fn new(words: &[String], special: &SpecialTokens) -> Result<Self> {
        let offset = special.count();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("word {w:?} is empty or contains whitespace")));
            }
            if index.insert(w.clone(), offset + i).is_some() {
                return Err(Error::Config(format!("duplicate word {w:?}")));
            }
        }
        if words.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let max_special = [special.blank, special.pad, special.sos, special.eos].into_iter().max().unwrap_or(0);
        if max_special >= offset {
            return Err(Error::Config(format!("special ids must lie below {offset}, got {special:?}")));
        }
        Ok(Vocabulary { words: words.to_vec(), index, offset })
    }

    /// Total id count, specials included.
    pub fn size(&self) -> usize {
        self.offset + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        id.checked_sub(self.offset).and_then(|i| self.words.get(i)).map(String::as_str)
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::Input(format!("unknown word {w:?}"))))
            .collect()
    }

    /// Ids without a word (specials) render as `<id>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).map_or_else(|| format!("<{i}>"), str::to_string))
            .collect()
    }
}

pub fn split_words(transcript: &str) -> Vec<String> {
    transcript.split_whitespace().map(str::to_string).collect()
}

/// Words and homophone groups, everything evaluation needs from a task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub words: Vec<String>,
    pub homophone_groups: Vec<Vec<String>>,
}

impl TaskInfo {
    pub fn is_homophone(&self, word: &str) -> bool {
        self.homophone_groups.iter().any(|g| g.iter().any(|w| w == word))
    }

    /// Whether `a` and `b` are members of one homophone group.
    pub fn same_group(&self, a: &str, b: &str) -> bool {
        self.homophone_groups.iter().any(|g| g.iter().any(|w| w == a) && g.iter().any(|w| w == b))
    }

    /// Positions of homophone-group words in `words`.
    pub fn homophone_slots(&self, words: &[String]) -> Vec<usize> {
        (0..words.len()).filter(|&i| self.is_homophone(&words[i])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab: Vec<String>,
    pub homophone_groups: Vec<Vec<String>>,
    /// Tone frequency per word; members of a group must share theirs.
    pub tone_map: BTreeMap<String, f64>,
    pub symbol_duration_ms: f64,
    pub noise_std: f64,
    /// One embedding per homophone-group member.
    pub visual_code: BTreeMap<String, Vec<f64>>,
    pub visual_slots: usize,
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    /// Lower bound on the share of utterances containing a homophone word.
    #[serde(default = "default_homophone_fraction")]
    pub homophone_fraction: f64,
    pub splits: SplitSizes,
}

fn default_sample_rate() -> u32 {
    16_000
}
fn default_min_words() -> usize {
    2
}
fn default_max_words() -> usize {
    4
}
fn default_homophone_fraction() -> f64 {
    0.3
}

impl SyntheticTaskSpec {
    /// Twelve words, two homophone pairs, 16-dim orthonormal visual codes.
    pub fn reference() -> Self {
        let vocab: Vec<String> = [
            "red", "read", "night", "knight", "blue", "green", "one", "two", "sun", "moon", "cat", "dog",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let groups = vec![
            vec!["red".to_string(), "read".to_string()],
            vec!["night".to_string(), "knight".to_string()],
        ];
        // One tone per acoustic class, roughly even on the Mel scale.
        let tones = [300.0, 450.0, 650.0, 900.0, 1200.0, 1600.0, 2100.0, 2700.0, 3400.0, 4300.0];
        let classes: [&[&str]; 10] = [
            &["red", "read"],
            &["night", "knight"],
            &["blue"],
            &["green"],
            &["one"],
            &["two"],
            &["sun"],
            &["moon"],
            &["cat"],
            &["dog"],
        ];
        let mut tone_map = BTreeMap::new();
        for (members, f) in classes.iter().zip(tones) {
            for m in *members {
                tone_map.insert(m.to_string(), f);
            }
        }
        let members: Vec<String> = groups.iter().flatten().cloned().collect();
        let codes = orthonormal_codes(members.len(), 16, 7);
        let visual_code = members.into_iter().zip(codes).collect();
        SyntheticTaskSpec {
            vocab,
            homophone_groups: groups,
            tone_map,
            symbol_duration_ms: 160.0,
            noise_std: 0.02,
            visual_code,
            visual_slots: 4,
            seed: 7,
            sample_rate: 16_000,
            min_words: 2,
            max_words: 4,
            homophone_fraction: 0.3,
            splits: SplitSizes { train: 500, dev: 50, test: 100 },
        }
    }

    pub fn task_info(&self) -> TaskInfo {
        TaskInfo { words: self.vocab.clone(), homophone_groups: self.homophone_groups.clone() }
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_code.values().next().map_or(0, Vec::len)
    }

    pub fn samples_per_symbol(&self) -> usize {
        (self.symbol_duration_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    fn group_of(&self, word: &str) -> Option<usize> {
        self.homophone_groups.iter().position(|g| g.iter().any(|w| w == word))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let vocab: HashSet<&str> = self.vocab.iter().map(String::as_str).collect();
        if vocab.len() != self.vocab.len() || vocab.is_empty() {
            return fail("vocabulary must be non-empty without duplicates".into());
        }
        let mut seen = HashSet::new();
        for g in &self.homophone_groups {
            if g.len() < 2 {
                return fail(format!("homophone group {g:?} needs at least two members"));
            }
            for w in g {
                if !vocab.contains(w.as_str()) {
                    return fail(format!("homophone {w:?} not in vocabulary"));
                }
                if !seen.insert(w.as_str()) {
                    return fail(format!("{w:?} appears in more than one homophone group"));
                }
            }
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut class_freq: Vec<(Option<usize>, &str, f64)> = Vec::new();
        for w in &self.vocab {
            let Some(&f) = self.tone_map.get(w) else {
                return fail(format!("no tone for {w:?}"));
            };
            if !(f > 0.0 && f < nyquist) {
                return fail(format!("tone {f} Hz for {w:?} outside (0, {nyquist})"));
            }
            class_freq.push((self.group_of(w), w, f));
        }
        for (i, a) in class_freq.iter().enumerate() {
            for b in &class_freq[i + 1..] {
                let same_class = a.0.is_some() && a.0 == b.0;
                if same_class && a.2 != b.2 {
                    return fail(format!("homophones {:?} and {:?} have different tones", a.1, b.1));
                }
                if !same_class && a.2 == b.2 {
                    return fail(format!("{:?} and {:?} share a tone but are not homophones", a.1, b.1));
                }
            }
        }
        let dim = self.visual_dim();
        if dim == 0 {
            return fail("visual codes must be non-empty".into());
        }
        for w in &seen {
            match self.visual_code.get(*w) {
                None => return fail(format!("no visual code for homophone {w:?}")),
                Some(c) if c.len() != dim || c.iter().any(|v| !v.is_finite()) => {
                    return fail(format!("visual code for {w:?} must have {dim} finite values"))
                }
                _ => {}
            }
        }
        let codes: Vec<&Vec<f64>> = seen.iter().map(|w| &self.visual_code[*w]).collect();
        for (i, a) in codes.iter().enumerate() {
            if codes[i + 1..].contains(a) {
                return fail("homophone visual codes must be distinct".into());
            }
        }
        if self.visual_slots == 0 {
            return fail("visual_slots must be at least 1".into());
        }
        if self.symbol_duration_ms.is_nan() || self.symbol_duration_ms <= 0.0 || self.samples_per_symbol() == 0 {
            return fail("symbol_duration_ms must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be >= 0".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail("need 1 <= min_words <= max_words".into());
        }
        if !(0.0..=1.0).contains(&self.homophone_fraction) {
            return fail("homophone_fraction must lie in [0, 1]".into());
        }
        let s = self.splits;
        if s.train == 0 || s.dev == 0 || s.test == 0 {
            return fail("every split needs at least one utterance".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SyntheticTaskSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// `n` unit vectors of width `dim`, mutually orthogonal when `n <= dim`.
pub fn orthonormal_codes(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Concatenated tones at amplitude 0.5 plus white noise from `noise_seed`.
pub fn synth_waveform(words: &[String], spec: &SyntheticTaskSpec, noise_seed: u64) -> Result<Waveform> {
    let sr = spec.sample_rate as f64;
    let seg = spec.samples_per_symbol();
    let mut samples = Vec::with_capacity(seg * words.len());
    for w in words {
        let f = *spec.tone_map.get(w).ok_or_else(|| Error::Input(format!("unknown word {w:?}")))?;
        samples.extend((0..seg).map(|n| AMPLITUDE * (2.0 * std::f64::consts::PI * f * n as f64 / sr).sin()));
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for s in &mut samples {
            *s += noise.sample(&mut rng);
        }
    }
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

/// Codes of the homophone words spoken, in order, zero-padded or truncated
/// to `visual_slots` rows.
pub fn visual_tokens_for(words: &[String], spec: &SyntheticTaskSpec) -> Result<VisualTokens> {
    let dim = spec.visual_dim();
    let mut data = vec![0.0; spec.visual_slots * dim];
    let codes = words.iter().filter_map(|w| spec.visual_code.get(w));
    for (slot, code) in codes.take(spec.visual_slots).enumerate() {
        data[slot * dim..(slot + 1) * dim].copy_from_slice(code);
    }
    VisualTokens::new(Tensor::new(vec![spec.visual_slots, dim], data)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioRef {
    Path(String),
    /// Synthesized on load from the transcript and the task file next to
    /// the manifest.
    Synth { synth: SynthRef },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthRef {
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio: AudioRef,
    /// Path to a VEMB file, or `"none"`.
    pub visual: String,
    pub transcript: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() {
            let e: ManifestEntry = serde_json::from_str(body).map_err(|err| Error::Ingest {
                offset,
                message: format!("{}: {err}", path.display()),
            })?;
            if e.transcript.split_whitespace().next().is_none() {
                return Err(Error::Ingest { offset, message: format!("{}: empty transcript", e.utt_id) });
            }
            entries.push(e);
        }
        offset += line.len();
    }
    Ok(entries)
}

/// Reads the task file stored next to `manifest`, if there is one.
pub fn task_next_to(manifest: &Path) -> Result<Option<SyntheticTaskSpec>> {
    let path = manifest.parent().unwrap_or(Path::new(".")).join(TASK_FILE);
    if path.exists() {
        SyntheticTaskSpec::load(&path).map(Some)
    } else {
        Ok(None)
    }
}

/// A loaded utterance ready for the model.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    pub words: Vec<String>,
    pub example: Example,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads audio and visual files, runs the frontend and tokenizes the
/// transcript. `audio_only` drops the visual tokens.
pub fn load_utterances(
    manifest: &Path,
    vocab: &Vocabulary,
    frontend: &FrontendConfig,
    audio_only: bool,
) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = load_manifest(manifest)?;
    let mut task = None;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let words = split_words(&e.transcript);
        let wave = match &e.audio {
            AudioRef::Path(p) => load_audio(&resolve(base, p))?,
            AudioRef::Synth { synth } => {
                if task.is_none() {
                    task = Some(task_next_to(manifest)?.ok_or_else(|| {
                        Error::Input(format!("{}: inline synthesis needs {TASK_FILE} next to the manifest", e.utt_id))
                    })?);
                }
                synth_waveform(&words, task.as_ref().expect("loaded above"), synth.noise_seed)?
            }
        };
        let mel = features(&wave, frontend).map_err(|err| Error::Input(format!("{}: {err}", e.utt_id)))?;
        let stacked = stack_frames(&mel, frontend.stack_factor)?;
        let visual = if audio_only || e.visual == "none" {
            None
        } else {
            Some(load_visual_embeddings(&resolve(base, &e.visual))?)
        };
        let tokens = vocab.encode(&words).map_err(|err| Error::Input(format!("{}: {err}", e.utt_id)))?;
        out.push(Utterance { utt_id: e.utt_id, words, example: Example { stacked, visual, tokens } });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub utterances: usize,
    pub with_homophone: usize,
}

/// Draws one transcript: adjacent words never share a tone and each
/// homophone group contributes at most one word.
fn draw_transcript(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng, need_homophone: bool) -> Option<Vec<String>> {
    let len = rng.random_range(spec.min_words..=spec.max_words);
    let mut words: Vec<String> = Vec::with_capacity(len);
    let mut used_groups = HashSet::new();
    let forced_at = need_homophone.then(|| rng.random_range(0..len));
    for i in 0..len {
        let prev_tone = words.last().map(|w| spec.tone_map[w]);
        let candidates: Vec<&String> = spec
            .vocab
            .iter()
            .filter(|w| Some(spec.tone_map[*w]) != prev_tone)
            .filter(|w| spec.group_of(w).is_none_or(|g| !used_groups.contains(&g)))
            .filter(|w| forced_at != Some(i) || spec.group_of(w).is_some())
            .collect();
        let w = (*candidates.choose(rng)?).clone();
        if let Some(g) = spec.group_of(&w) {
            used_groups.insert(g);
        }
        words.push(w);
    }
    Some(words)
}

/// Writes `train/dev/test.jsonl`, audio and visual files, and the task file
/// into `out_dir`. Transcripts are unique across all splits, so the splits
/// are disjoint. With `audio_only` no visual files are written and every
/// manifest entry says `"none"`.
pub fn generate_corpus(spec: &SyntheticTaskSpec, out_dir: &Path, audio_only: bool) -> Result<Vec<SplitSummary>> {
    spec.validate()?;
    for sub in ["audio", "visual"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let has_groups = !spec.homophone_groups.is_empty();
    let mut summaries = Vec::new();
    for (name, n) in [("train", spec.splits.train), ("dev", spec.splits.dev), ("test", spec.splits.test)] {
        let mut entries = Vec::with_capacity(n);
        let mut with_homophone = 0;
        for i in 0..n {
            // Alternate utterances are forced to contain a homophone, which
            // keeps the share at or above one half.
            let need = has_groups && spec.homophone_fraction > 0.0 && i % 2 == 0;
            let mut words = None;
            for _ in 0..10_000 {
                match draw_transcript(spec, &mut rng, need) {
                    Some(w) if seen.insert(w.join(" ")) => {
                        words = Some(w);
                        break;
                    }
                    _ => {}
                }
            }
            let words = words.ok_or_else(|| {
                Error::Config(format!("cannot draw {n} distinct {name} transcripts under the vocabulary constraints"))
            })?;
            if words.iter().any(|w| spec.group_of(w).is_some()) {
                with_homophone += 1;
            }
            let utt_id = format!("{name}-{i:04}");
            let noise_seed: u64 = rng.random();
            let audio_rel = format!("audio/{utt_id}.wav");
            let wave = synth_waveform(&words, spec, noise_seed)?;
            write_wav(&out_dir.join(&audio_rel), &wave)?;
            let visual = if audio_only {
                "none".to_string()
            } else {
                let rel = format!("visual/{utt_id}.vemb");
                save_visual_embeddings(&out_dir.join(&rel), &visual_tokens_for(&words, spec)?)?;
                rel
            };
            entries.push(ManifestEntry { utt_id, audio: AudioRef::Path(audio_rel), visual, transcript: words.join(" ") });
        }
        if (with_homophone as f64) < spec.homophone_fraction * n as f64 {
            return Err(Error::Config(format!(
                "{name}: only {with_homophone} of {n} utterances contain a homophone word"
            )));
        }
        write_manifest(&out_dir.join(format!("{name}.jsonl")), &entries)?;
        summaries.push(SplitSummary { name: name.to_string(), utterances: n, with_homophone });
    }
    let task_path = out_dir.join(TASK_FILE);
    let mut f = fs::File::create(&task_path).map_err(|e| Error::io(&task_path, e))?;
    serde_json::to_writer_pretty(&mut f, spec)?;
    f.write_all(b"\n").map_err(|e| Error::io(&task_path, e))?;
    Ok(summaries)
}
