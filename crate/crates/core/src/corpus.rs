//! Synthetic paired semantic/acoustic corpus with exact oracle probes.
//!
//! Content is an order-1 Markov chain over `content_states` symbols at the
//! semantic frame rate (state 0 is a pause). Each content symbol is rendered
//! into two 20 ms acoustic frames one semantic frame later than it is
//! spoken: group `t` (frames `2t`, `2t+1`) realises `c[t-1]`, group 0 the
//! leading pause. Every utterance ends in a pause, so the final symbol needs
//! no acoustic group and the rendering stays exactly invertible. The lag is
//! what makes encoder lookahead matter.
//!
//! A frame's code on quantizer `l` is `g_l(unit, phase) * timbre_levels + tau`,
//! where `g_l` is a fixed keyed map (jointly injective across quantizers, and
//! any two units differ on at least two quantizers) and `tau` is a speaker
//! offset that depends on the unit's timbre class. The high part therefore
//! carries content only and the low part speaker only.
//!
//! Semantic tokens are a lossy view of content: the last `tokenizer_merges`
//! states share a token with a partner state that has identical transition
//! statistics, so the token stream alone cannot tell them apart while the
//! acoustics and continuous features can.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use serde::{Deserialize, Serialize};
use streamconv_nn::Mat;

use crate::config::CorpusConfig;
use crate::error::{arg, Error, Result};

pub const ACOUSTIC_FRAME_MS: u32 = 20;
pub const SEMANTIC_FRAME_MS: u32 = 40;
pub const SILENCE: u32 = 0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub timbre_key: u64,
}

impl SpeakerProfile {
    pub fn new(speaker_id: u32) -> Self {
        Self {
            speaker_id,
            timbre_key: splitmix64(0x7153_b0a7_u64 ^ u64::from(speaker_id)),
        }
    }
}

/// `T x L` codec codes, 20 ms per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcousticTokens {
    codes: Vec<u32>,
    quantizers: usize,
}

impl AcousticTokens {
    pub const FRAME_MS: u32 = ACOUSTIC_FRAME_MS;

    pub fn new(codes: Vec<u32>, quantizers: usize) -> Result<Self> {
        if quantizers == 0 || codes.len() % quantizers != 0 {
            return arg(format!("{} codes do not form frames of {quantizers}", codes.len()));
        }
        Ok(Self { codes, quantizers })
    }

    pub fn empty(quantizers: usize) -> Self {
        Self {
            codes: Vec::new(),
            quantizers,
        }
    }

    pub fn frames(&self) -> usize {
        self.codes.len() / self.quantizers
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn quantizers(&self) -> usize {
        self.quantizers
    }

    pub fn frame(&self, j: usize) -> &[u32] {
        &self.codes[j * self.quantizers..(j + 1) * self.quantizers]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            codes: self.codes[start * self.quantizers..end * self.quantizers].to_vec(),
            quantizers: self.quantizers,
        }
    }

    pub fn push_frame(&mut self, frame: &[u32]) {
        assert_eq!(frame.len(), self.quantizers);
        self.codes.extend_from_slice(frame);
    }

    pub fn extend(&mut self, other: &AcousticTokens) {
        assert_eq!(other.quantizers, self.quantizers);
        self.codes.extend_from_slice(&other.codes);
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.codes.iter().find(|&&c| c as usize >= vocab) {
            Some(c) => arg(format!("acoustic code {c} outside vocabulary of {vocab}")),
            None => Ok(()),
        }
    }
}

/// One token per 40 ms frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticTokens {
    pub codes: Vec<u32>,
}

impl SemanticTokens {
    pub const FRAME_MS: u32 = SEMANTIC_FRAME_MS;

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Pre-discretisation teacher features, `T' x sem_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSemantic {
    pub features: Mat<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub content: Vec<u32>,
    pub speaker: SpeakerProfile,
    pub semantic_tokens: SemanticTokens,
    pub continuous_semantic: ContinuousSemantic,
    pub acoustic_tokens: AcousticTokens,
}

impl Utterance {
    pub fn semantic_frames(&self) -> usize {
        self.content.len()
    }

    /// The first `frames` semantic frames (and their acoustic groups), as
    /// used for speaker prompts.
    pub fn crop(&self, frames: usize) -> Utterance {
        let f = frames.min(self.semantic_frames());
        Utterance {
            id: self.id,
            content: self.content[..f].to_vec(),
            speaker: self.speaker,
            semantic_tokens: SemanticTokens {
                codes: self.semantic_tokens.codes[..f].to_vec(),
            },
            continuous_semantic: ContinuousSemantic {
                features: self.continuous_semantic.features.slice_rows(0, f),
            },
            acoustic_tokens: self.acoustic_tokens.slice(0, 2 * f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentReading {
    pub symbols: Vec<u32>,
    /// Per acoustic frame: fraction of quantizers agreeing with the decoded unit.
    pub frame_confidence: Vec<f32>,
}

impl ContentReading {
    pub fn low_confidence_frames(&self, threshold: f32) -> usize {
        self.frame_confidence.iter().filter(|&&c| c < threshold).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerReading {
    pub speaker_id: u32,
    /// Fraction of codes whose timbre part matches the chosen speaker.
    pub confidence: f32,
    /// True when another candidate scored exactly the same.
    pub tied: bool,
}

/// The generative family: content language, tokenizer, feature embedding
/// and acoustic mixing. Fixed by `world_seed`; immutable once built.
#[derive(Clone, Debug)]
pub struct World {
    cfg: CorpusConfig,
    /// Successor lists over token-level states, cumulative probabilities.
    transitions: Vec<Vec<(u32, f64)>>,
    /// `unit_maps[l][2u + phase]` is the content part of the code.
    unit_maps: Vec<Vec<u32>>,
}

impl World {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        let parts = cfg.codec_vocab / cfg.timbre_levels.max(1);
        let units = 2 * cfg.content_states;
        if cfg.timbre_levels == 0 || cfg.codec_vocab % cfg.timbre_levels != 0 {
            return arg("codec_vocab must be a multiple of timbre_levels");
        }
        if parts.pow(cfg.num_quantizers.min(8) as u32) < units {
            return arg("codec too small to render every content unit");
        }
        if cfg.content_states < 2 || cfg.content_states - cfg.tokenizer_merges > cfg.semantic_vocab {
            return arg("content states do not fit the semantic vocabulary");
        }
        let token_states = cfg.content_states - cfg.tokenizer_merges;
        if cfg.branching == 0 || cfg.branching > token_states {
            return arg("branching out of range");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let mut transitions = Vec::with_capacity(token_states);
        let all: Vec<u32> = (0..token_states as u32).collect();
        for _ in 0..token_states {
            let succ: Vec<u32> = all.choose_multiple(&mut rng, cfg.branching).copied().collect();
            let weights: Vec<f64> = succ.iter().map(|_| rng.random_range(0.25..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut acc = 0.0;
            let row = succ
                .into_iter()
                .zip(weights)
                .map(|(s, w)| {
                    acc += w / total;
                    (s, acc)
                })
                .collect();
            transitions.push(row);
        }
        let unit_maps = Self::draw_unit_maps(cfg, parts, units, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            transitions,
            unit_maps,
        })
    }

    /// Random per-quantizer maps, redrawn until every pair of units differs
    /// on at least two quantizers (one with a single quantizer).
    fn draw_unit_maps(cfg: &CorpusConfig, parts: usize, units: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u32>>> {
        let need = 2.min(cfg.num_quantizers);
        for _ in 0..10_000 {
            let maps: Vec<Vec<u32>> = (0..cfg.num_quantizers)
                .map(|_| (0..units).map(|_| rng.random_range(0..parts as u32)).collect())
                .collect();
            let ok = (0..units).all(|a| {
                (a + 1..units).all(|b| maps.iter().filter(|m| m[a] != m[b]).count() >= need)
            });
            if ok {
                return Ok(maps);
            }
        }
        arg("could not find a separable codec layout; enlarge codec_vocab or quantizers")
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn num_quantizers(&self) -> usize {
        self.cfg.num_quantizers
    }

    pub fn codec_vocab(&self) -> usize {
        self.cfg.codec_vocab
    }

    fn token_states(&self) -> u32 {
        (self.cfg.content_states - self.cfg.tokenizer_merges) as u32
    }

    pub fn token_of(&self, content: u32) -> u32 {
        let k = self.token_states();
        if content >= k {
            content - self.cfg.tokenizer_merges as u32
        } else {
            content
        }
    }

    /// Pauses closing every utterance; their rendering falls past its end.
    pub fn trailing_pauses(&self) -> usize {
        self.cfg.acoustic_lag.max(1)
    }

    /// Samples `frames` content symbols ending in `trailing_pauses` pauses.
    pub fn sample_content<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Vec<u32> {
        let tail = self.trailing_pauses().min(frames);
        let k = self.token_states();
        let merged_from = k - self.cfg.tokenizer_merges as u32;
        let mut out = Vec::with_capacity(frames);
        let mut state = SILENCE;
        for _ in 0..frames - tail {
            let u: f64 = rng.random();
            let row = &self.transitions[state as usize];
            state = row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().expect("nonempty")).0;
            let variant = state >= merged_from && rng.random::<bool>();
            out.push(if variant { state + self.cfg.tokenizer_merges as u32 } else { state });
        }
        out.resize(frames, SILENCE);
        out
    }

    pub fn tokenize(&self, content: &[u32]) -> SemanticTokens {
        SemanticTokens {
            codes: content.iter().map(|&c| self.token_of(c)).collect(),
        }
    }

    /// One-hot content embedded into `sem_dim` plus Gaussian noise.
    pub fn continuous<R: Rng + ?Sized>(&self, content: &[u32], rng: &mut R) -> ContinuousSemantic {
        let d = self.cfg.sem_dim;
        let noise = Normal::new(0.0, self.cfg.feature_noise.max(0.0)).expect("finite sigma");
        let mut features = Mat::zeros(content.len(), d);
        for (t, &c) in content.iter().enumerate() {
            let row = features.row_mut(t);
            row[c as usize % d] += 1.0;
            for v in row.iter_mut() {
                *v += noise.sample(rng) as f32;
            }
        }
        ContinuousSemantic { features }
    }

    /// Timbre class of a content unit.
    pub fn timbre_class(&self, unit: u32) -> usize {
        unit as usize % self.cfg.timbre_classes
    }

    /// Speaker offset for quantizer `l` on units of `class`.
    pub fn timbre(&self, speaker: &SpeakerProfile, l: usize, class: usize) -> u32 {
        let h = splitmix64(speaker.timbre_key ^ ((l as u64) << 48) ^ ((class as u64) << 32));
        (h % self.cfg.timbre_levels as u64) as u32
    }

    /// Unit realised by each acoustic group.
    pub fn units_of(&self, content: &[u32]) -> Vec<u32> {
        let lag = self.cfg.acoustic_lag.min(content.len());
        let mut units = vec![SILENCE; lag];
        units.extend_from_slice(&content[..content.len() - lag]);
        units
    }

    pub fn render(&self, content: &[u32], speaker: &SpeakerProfile) -> AcousticTokens {
        let levels = self.cfg.timbre_levels as u32;
        let l = self.cfg.num_quantizers;
        let mut codes = Vec::with_capacity(content.len() * 2 * l);
        for u in self.units_of(content) {
            let class = self.timbre_class(u);
            for phase in 0..2 {
                let w = 2 * u as usize + phase;
                for (q, map) in self.unit_maps.iter().enumerate() {
                    codes.push(map[w] * levels + self.timbre(speaker, q, class));
                }
            }
        }
        AcousticTokens { codes, quantizers: l }
    }

    fn check_shape(&self, a: &AcousticTokens) -> Result<()> {
        if a.quantizers != self.cfg.num_quantizers {
            return arg(format!(
                "probe expects {} quantizers, got {}",
                self.cfg.num_quantizers, a.quantizers
            ));
        }
        Ok(())
    }

    /// Best unit per acoustic group and per-frame agreement.
    fn decode_units(&self, a: &AcousticTokens) -> (Vec<u32>, Vec<f32>) {
        let levels = self.cfg.timbre_levels as u32;
        let l = self.cfg.num_quantizers;
        let groups = a.frames().div_ceil(2);
        let mut units = Vec::with_capacity(groups);
        let mut conf = vec![0.0f32; a.frames()];
        for g in 0..groups {
            let frames: Vec<usize> = (2 * g..(2 * g + 2).min(a.frames())).collect();
            let mut best = (0usize, 0u32);
            for u in 0..self.cfg.content_states {
                let score: usize = frames
                    .iter()
                    .map(|&j| {
                        let w = 2 * u + (j % 2);
                        a.frame(j)
                            .iter()
                            .zip(&self.unit_maps)
                            .filter(|(c, m)| **c / levels == m[w])
                            .count()
                    })
                    .sum();
                if score > best.0 {
                    best = (score, u as u32);
                }
            }
            let u = best.1 as usize;
            for &j in &frames {
                let w = 2 * u + (j % 2);
                let hits = a
                    .frame(j)
                    .iter()
                    .zip(&self.unit_maps)
                    .filter(|(c, m)| **c / levels == m[w])
                    .count();
                conf[j] = hits as f32 / l as f32;
            }
            units.push(best.1);
        }
        (units, conf)
    }

    /// Inverts the acoustic rendering to content symbols (one per semantic
    /// frame, the trailing pauses implied).
    pub fn content_probe(&self, a: &AcousticTokens) -> Result<ContentReading> {
        self.check_shape(a)?;
        let (units, frame_confidence) = self.decode_units(a);
        let groups = units.len();
        let lag = self.cfg.acoustic_lag.min(groups);
        let mut symbols: Vec<u32> = units.into_iter().skip(lag).collect();
        symbols.resize(groups, SILENCE);
        Ok(ContentReading {
            symbols,
            frame_confidence,
        })
    }

    /// Fraction of codes whose timbre part matches `speaker`, classes taken
    /// from the decoded content.
    pub fn speaker_similarity(&self, a: &AcousticTokens, speaker: &SpeakerProfile) -> Result<f64> {
        self.check_shape(a)?;
        if a.is_empty() {
            return Ok(0.0);
        }
        let (units, _) = self.decode_units(a);
        Ok(self.timbre_hits(a, &units, speaker) as f64 / a.codes.len() as f64)
    }

    fn timbre_hits(&self, a: &AcousticTokens, units: &[u32], speaker: &SpeakerProfile) -> usize {
        let levels = self.cfg.timbre_levels as u32;
        let mut hits = 0;
        for j in 0..a.frames() {
            let class = self.timbre_class(units[j / 2]);
            for (q, c) in a.frame(j).iter().enumerate() {
                if c % levels == self.timbre(speaker, q, class) {
                    hits += 1;
                }
            }
        }
        hits
    }

    /// Argmax over `candidates` of timbre agreement; ties go to the lowest id.
    pub fn speaker_probe(&self, a: &AcousticTokens, candidates: &[SpeakerProfile]) -> Result<SpeakerReading> {
        self.check_shape(a)?;
        if candidates.is_empty() {
            return arg("speaker probe needs at least one candidate");
        }
        let (units, _) = self.decode_units(a);
        let mut sorted = candidates.to_vec();
        sorted.sort_by_key(|s| s.speaker_id);
        let scores: Vec<usize> = sorted.iter().map(|s| self.timbre_hits(a, &units, s)).collect();
        let best = *scores.iter().max().expect("nonempty");
        let idx = scores.iter().position(|&s| s == best).expect("max exists");
        let total = a.codes.len().max(1);
        Ok(SpeakerReading {
            speaker_id: sorted[idx].speaker_id,
            confidence: best as f32 / total as f32,
            tied: scores.iter().filter(|&&s| s == best).count() > 1,
        })
    }

    fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64 + 1)))
    }

    /// Draws utterance `index` of a corpus with the given seed and length
    /// bounds, rendered by `speaker`. Content, tokens and features do not
    /// depend on the speaker.
    pub fn utterance(&self, seed: u64, index: usize, bounds: (usize, usize), speaker: SpeakerProfile) -> Utterance {
        let mut rng = Self::utterance_rng(seed, index);
        let frames = rng.random_range(bounds.0..=bounds.1);
        let content = self.sample_content(frames, &mut rng);
        let continuous_semantic = self.continuous(&content, &mut rng);
        Utterance {
            id: index,
            semantic_tokens: self.tokenize(&content),
            acoustic_tokens: self.render(&content, &speaker),
            continuous_semantic,
            content,
            speaker,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_speakers: usize,
    pub num_utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl CorpusSpec {
    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Self {
            seed: cfg.seed,
            num_speakers: cfg.num_speakers,
            num_utterances: cfg.num_speakers * cfg.utterances_per_speaker,
            min_frames: cfg.min_frames,
            max_frames: cfg.max_frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

/// Utterance `i` is spoken by speaker `i mod num_speakers`.
pub fn generate_corpus(world: &World, spec: CorpusSpec) -> Result<Corpus> {
    if spec.num_speakers < 2 {
        return arg("num_speakers must be at least 2");
    }
    if spec.min_frames < 4 || spec.max_frames < spec.min_frames {
        return arg(format!(
            "frame bounds [{}, {}] need max >= min >= 4",
            spec.min_frames, spec.max_frames
        ));
    }
    let utterances = (0..spec.num_utterances)
        .map(|i| {
            let speaker = SpeakerProfile::new((i % spec.num_speakers) as u32);
            world.utterance(spec.seed, i, (spec.min_frames, spec.max_frames), speaker)
        })
        .collect();
    Ok(Corpus { spec, utterances })
}

impl Corpus {
    pub fn speakers(&self) -> Vec<SpeakerProfile> {
        let mut ids: Vec<u32> = self.utterances.iter().map(|u| u.speaker.speaker_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().map(SpeakerProfile::new).collect()
    }

    /// Splits off the highest `holdout` speaker ids as an unseen test set.
    pub fn split_holdout(&self, holdout: usize) -> Result<(Corpus, Corpus)> {
        let speakers = self.speakers();
        if holdout >= speakers.len() {
            return arg("holdout leaves no training speakers");
        }
        let cut = speakers[speakers.len() - holdout].speaker_id;
        let (test, train): (Vec<_>, Vec<_>) = self
            .utterances
            .iter()
            .cloned()
            .partition(|u| u.speaker.speaker_id >= cut);
        Ok((
            Corpus {
                spec: self.spec,
                utterances: train,
            },
            Corpus {
                spec: self.spec,
                utterances: test,
            },
        ))
    }

    /// Keeps roughly `fraction` of the corpus by taking each speaker's first
    /// utterances (at least two per speaker, so prompts remain available).
    pub fn subsample(&self, fraction: f64) -> Corpus {
        let keep = ((self.utterances.len() as f64 * fraction).round() as usize).max(1);
        let mut by_speaker: std::collections::BTreeMap<u32, Vec<&Utterance>> = Default::default();
        for u in &self.utterances {
            by_speaker.entry(u.speaker.speaker_id).or_default().push(u);
        }
        let per = keep.div_ceil(by_speaker.len()).max(2);
        let utterances = by_speaker
            .values()
            .flat_map(|v| v.iter().take(per).map(|u| (*u).clone()))
            .collect();
        Corpus {
            spec: self.spec,
            utterances,
        }
    }

    pub fn by_speaker(&self, speaker_id: u32) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.speaker.speaker_id == speaker_id).collect()
    }
}

/// Rejects corpora whose token shapes or codes do not fit `world`.
pub fn check_corpus_against(world: &World, corpus: &Corpus) -> Result<()> {
    for u in &corpus.utterances {
        if u.acoustic_tokens.quantizers() != world.num_quantizers() {
            return Err(Error::Argument(format!(
                "utterance {} has {} quantizers, world has {}",
                u.id,
                u.acoustic_tokens.quantizers(),
                world.num_quantizers()
            )));
        }
        u.acoustic_tokens.check_vocab(world.codec_vocab())?;
    }
    Ok(())
}

/// Loads a corpus and rejects it unless it was drawn from `world`.
pub fn load_corpus_for(dir: &Path, world: &World) -> Result<Corpus> {
    let (cfg, corpus) = load_corpus(dir)?;
    if &cfg != world.config() {
        return Err(Error::Version(format!(
            "{} was generated under a different corpus configuration",
            dir.display()
        )));
    }
    check_corpus_against(world, &corpus)?;
    Ok(corpus)
}

const CORPUS_FORMAT: &str = "streamconv-corpus";
const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_PAYLOAD: &str = "corpus.bin";

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceEntry {
    id: usize,
    speaker_id: u32,
    timbre_key: u64,
    /// `[T']`, int32.
    content: ArrayRef,
    /// `[T']`, int32.
    semantic_tokens: ArrayRef,
    /// `[T, L]`, int32, row-major.
    acoustic_tokens: ArrayRef,
    /// `[T', sem_dim]`, float32, row-major.
    continuous_semantic: ArrayRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayRef {
    offset: usize,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    format: String,
    version: u32,
    world: CorpusConfig,
    spec: CorpusSpec,
    payload: String,
    byte_order: String,
    utterances: Vec<UtteranceEntry>,
}

fn push_i32(buf: &mut Vec<u8>, values: &[u32], shape: Vec<usize>) -> ArrayRef {
    let offset = buf.len();
    for &v in values {
        buf.extend_from_slice(&(v as i32).to_le_bytes());
    }
    ArrayRef {
        offset,
        shape,
        dtype: "i32".into(),
    }
}

fn read_i32(buf: &[u8], r: &ArrayRef) -> Result<Vec<u32>> {
    let n: usize = r.shape.iter().product();
    let bytes = buf
        .get(r.offset..r.offset + 4 * n)
        .ok_or_else(|| Error::Argument("corpus payload truncated".into()))?;
    bytes
        .chunks_exact(4)
        .map(|c| {
            let v = i32::from_le_bytes(c.try_into().expect("4 bytes"));
            u32::try_from(v).map_err(|_| Error::Argument(format!("negative code {v} in corpus")))
        })
        .collect()
}

/// Writes `dir/manifest.json` and `dir/corpus.bin`.
pub fn save_corpus(dir: &Path, world: &CorpusConfig, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let tp = u.semantic_frames();
        let content = push_i32(&mut buf, &u.content, vec![tp]);
        let semantic_tokens = push_i32(&mut buf, &u.semantic_tokens.codes, vec![tp]);
        let acoustic_tokens = push_i32(
            &mut buf,
            u.acoustic_tokens.codes(),
            vec![u.acoustic_tokens.frames(), u.acoustic_tokens.quantizers()],
        );
        let f = &u.continuous_semantic.features;
        let offset = buf.len();
        for v in f.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(UtteranceEntry {
            id: u.id,
            speaker_id: u.speaker.speaker_id,
            timbre_key: u.speaker.timbre_key,
            content,
            semantic_tokens,
            acoustic_tokens,
            continuous_semantic: ArrayRef {
                offset,
                shape: vec![f.rows(), f.cols()],
                dtype: "f32".into(),
            },
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        world: world.clone(),
        spec: corpus.spec,
        payload: CORPUS_PAYLOAD.into(),
        byte_order: "little".into(),
        utterances: entries,
    };
    std::fs::write(dir.join(CORPUS_PAYLOAD), &buf)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusConfig, Corpus)> {
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CORPUS_FORMAT || manifest.version != CORPUS_VERSION {
        return Err(Error::Version(format!(
            "expected {CORPUS_FORMAT} v{CORPUS_VERSION}, found {} v{}",
            manifest.format, manifest.version
        )));
    }
    let buf = std::fs::read(dir.join(&manifest.payload))?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for e in &manifest.utterances {
        let speaker = SpeakerProfile {
            speaker_id: e.speaker_id,
            timbre_key: e.timbre_key,
        };
        if speaker != SpeakerProfile::new(e.speaker_id) {
            return arg(format!("utterance {} has a foreign timbre key", e.id));
        }
        let q = *e.acoustic_tokens.shape.get(1).unwrap_or(&0);
        let fr = &e.continuous_semantic;
        let (rows, cols) = (fr.shape[0], *fr.shape.get(1).unwrap_or(&0));
        let bytes = buf
            .get(fr.offset..fr.offset + 4 * rows * cols)
            .ok_or_else(|| Error::Argument("corpus payload truncated".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        utterances.push(Utterance {
            id: e.id,
            content: read_i32(&buf, &e.content)?,
            speaker,
            semantic_tokens: SemanticTokens {
                codes: read_i32(&buf, &e.semantic_tokens)?,
            },
            continuous_semantic: ContinuousSemantic {
                features: Mat::from_vec(rows, cols, data),
            },
            acoustic_tokens: AcousticTokens::new(read_i32(&buf, &e.acoustic_tokens)?, q)?,
        });
    }
    Ok((
        manifest.world,
        Corpus {
            spec: manifest.spec,
            utterances,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(&CorpusConfig::default()).unwrap()
    }

    fn spec(seed: u64, speakers: usize, utts: usize) -> CorpusSpec {
        CorpusSpec {
            seed,
            num_speakers: speakers,
            num_utterances: utts,
            min_frames: 8,
            max_frames: 16,
        }
    }

    #[test]
    fn shape_contract() {
        let c = generate_corpus(&world(), spec(7, 2, 4)).unwrap();
        assert_eq!(c.utterances.len(), 4);
        for u in &c.utterances {
            let tp = u.semantic_tokens.len();
            assert!((8..=16).contains(&tp));
            assert_eq!(u.acoustic_tokens.frames(), 2 * tp);
            assert_eq!(u.continuous_semantic.features.rows(), tp);
            assert!(u.continuous_semantic.features.all_finite());
            assert!(u.acoustic_tokens.codes().iter().all(|&c| c < 64));
            assert!(u.semantic_tokens.codes.iter().all(|&c| c < 32));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        assert_eq!(generate_corpus(&w, spec(7, 2, 4)).unwrap(), generate_corpus(&w, spec(7, 2, 4)).unwrap());
        assert_ne!(generate_corpus(&w, spec(8, 2, 4)).unwrap(), generate_corpus(&w, spec(7, 2, 4)).unwrap());
    }

    #[test]
    fn speaker_swap_keeps_semantics_and_changes_acoustics() {
        let w = world();
        let a = w.utterance(7, 0, (8, 16), SpeakerProfile::new(0));
        let b = w.utterance(7, 0, (8, 16), SpeakerProfile::new(1));
        assert_eq!(a.semantic_tokens, b.semantic_tokens);
        assert_eq!(a.continuous_semantic, b.continuous_semantic);
        assert_ne!(a.acoustic_tokens, b.acoustic_tokens);
    }

    #[test]
    fn probes_invert_generated_data() {
        let w = world();
        let c = generate_corpus(&w, spec(3, 8, 64)).unwrap();
        let speakers = c.speakers();
        for u in &c.utterances {
            let r = w.content_probe(&u.acoustic_tokens).unwrap();
            assert_eq!(r.symbols, u.content);
            assert!(r.frame_confidence.iter().all(|&x| x == 1.0));
            let s = w.speaker_probe(&u.acoustic_tokens, &speakers).unwrap();
            assert_eq!(s.speaker_id, u.speaker.speaker_id);
            assert_eq!(s.confidence, 1.0);
        }
    }

    #[test]
    fn speaker_probe_finds_speaker_three() {
        let w = world();
        let u = w.utterance(1, 5, (8, 16), SpeakerProfile::new(3));
        let cands: Vec<_> = (0..6).map(SpeakerProfile::new).collect();
        assert_eq!(w.speaker_probe(&u.acoustic_tokens, &cands).unwrap().speaker_id, 3);
    }

    #[test]
    fn speaker_ties_go_to_lowest_id() {
        let w = world();
        let u = w.utterance(1, 0, (8, 16), SpeakerProfile::new(4));
        let dup = SpeakerProfile::new(4);
        let alias = SpeakerProfile {
            speaker_id: 2,
            timbre_key: dup.timbre_key,
        };
        let r = w.speaker_probe(&u.acoustic_tokens, &[dup, alias]).unwrap();
        assert_eq!(r.speaker_id, 2);
        assert!(r.tied);
        assert_eq!(r.confidence, 1.0);
    }

    #[test]
    fn all_zero_grid_decodes_with_low_confidence() {
        let w = world();
        let a = AcousticTokens::new(vec![0; 12 * 4], 4).unwrap();
        let r = w.content_probe(&a).unwrap();
        assert_eq!(r.symbols.len(), 6);
        assert!(r.symbols.iter().all(|&s| (s as usize) < 32));
        assert!(r.low_confidence_frames(1.0) > 0);
    }

    #[test]
    fn probe_rejects_wrong_quantizer_count() {
        let w = world();
        let a = AcousticTokens::new(vec![0; 12], 3).unwrap();
        assert!(matches!(w.content_probe(&a), Err(Error::Argument(_))));
        assert!(matches!(w.speaker_probe(&a, &[SpeakerProfile::new(0)]), Err(Error::Argument(_))));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let w = world();
        for bad in [
            CorpusSpec { num_speakers: 1, ..spec(1, 2, 2) },
            CorpusSpec { min_frames: 3, ..spec(1, 2, 2) },
            CorpusSpec { min_frames: 9, max_frames: 8, ..spec(1, 2, 2) },
        ] {
            assert!(matches!(generate_corpus(&w, bad), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn units_differ_on_two_quantizers() {
        let w = world();
        let n = w.unit_maps[0].len();
        for a in 0..n {
            for b in a + 1..n {
                assert!(w.unit_maps.iter().filter(|m| m[a] != m[b]).count() >= 2);
            }
        }
    }

    #[test]
    fn merged_states_share_tokens_but_not_acoustics() {
        let w = world();
        let cfg = w.config();
        let k = (cfg.content_states - cfg.tokenizer_merges) as u32;
        for c in k..cfg.content_states as u32 {
            let partner = c - cfg.tokenizer_merges as u32;
            assert_eq!(w.token_of(c), w.token_of(partner));
            let sp = SpeakerProfile::new(0);
            assert_ne!(w.render(&[c, 0, 0], &sp), w.render(&[partner, 0, 0], &sp));
        }
    }

    #[test]
    fn container_round_trip_is_byte_exact() {
        let w = world();
        let c = generate_corpus(&w, spec(11, 3, 9)).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        save_corpus(d1.path(), w.config(), &c).unwrap();
        let (cfg, back) = load_corpus(d1.path()).unwrap();
        assert_eq!(&cfg, w.config());
        assert_eq!(back, c);
        let d2 = tempfile::tempdir().unwrap();
        save_corpus(d2.path(), &cfg, &back).unwrap();
        for f in [MANIFEST_FILE, CORPUS_PAYLOAD] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let w = world();
        let c = generate_corpus(&w, spec(2, 10, 40)).unwrap();
        let (train, test) = c.split_holdout(3).unwrap();
        let tr: Vec<u32> = train.speakers().iter().map(|s| s.speaker_id).collect();
        let te: Vec<u32> = test.speakers().iter().map(|s| s.speaker_id).collect();
        assert_eq!(te, vec![7, 8, 9]);
        assert!(tr.iter().all(|s| !te.contains(s)));
    }
}
