//! Frozen toy decoder and the patch-recall dialogue testbed.
//!
//! The testbed is a single-layer attention decoder whose weights are set
//! analytically (plus small seeded noise) so that it solves a patch-recall
//! task perfectly when nothing is compressed: every image token encodes a
//! (position, class) pair, every prompt asks "which class sits at position
//! t?", and the attention readout matches the prompt's positional channel
//! against the image tokens' positional channels while the value path carries
//! their class channels into a softmax over classes.
//!
//! # Token layout
//!
//! Width-`d` tokens are split into channels:
//!
//! ```text
//! [ position : d_pos | class one-hot : C | marker : 1 | bias one : 1 | zero padding ]
//! ```
//!
//! Prompt and answer tokens set `marker = 1`; the key projection exposes the
//! marker and the query projection subtracts twice the attention gain times
//! it, so text tokens are never useful attention targets and a prompt cannot
//! drown its own question out.
//!
//! # Positional encoding
//!
//! Positions live on a ring of circumference `n` (the episode's own token
//! count, so the scheme adapts to any resolution). The encoding stacks
//! `F = (d_pos+1)/2` harmonics with triangular weights and unit norm; the
//! resulting inner-product kernel is a nonnegative Fejer window that decays
//! with ring distance. Nearby patches therefore look similar, which is what
//! makes pooling-style reducers meaningful, and attention concentrated around
//! a queried position behaves like attention over an image region.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compress::{CompressionMatrix, PredictionTrace};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, read_u64, write_tensor};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frozen decoder hyperparameters. `d >= 2*d_pos` and
/// `d >= d_pos + classes + 2` must hold so every channel fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenModelSpec {
    /// Token embedding width.
    pub d: usize,
    /// Number of value classes C; the output vocabulary is C classes plus one
    /// prompt symbol.
    pub classes: usize,
    pub n_heads: usize,
    /// Position-encoding width.
    pub d_pos: usize,
    /// Effective attention logit gain after the 1/sqrt(d_k) scaling.
    pub attn_gain: f64,
    /// Scale of the class logits in the readout.
    pub readout_scale: f64,
    /// Readout temperature dividing the logits before the final softmax.
    pub temperature: f64,
    /// Std of the seeded Gaussian perturbation added to every weight entry.
    /// Must stay well below the attention margins; see `default`.
    pub noise_std: f64,
}

impl Default for FrozenModelSpec {
    fn default() -> Self {
        FrozenModelSpec {
            d: 32,
            classes: 8,
            n_heads: 1,
            d_pos: 16,
            attn_gain: 120.0,
            readout_scale: 8.0,
            temperature: 1.0,
            noise_std: 1e-3,
        }
    }
}

impl FrozenModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("model spec", "classes must be >= 2"));
        }
        if self.d_pos < 1 || self.d < 2 * self.d_pos {
            return Err(Error::invalid(
                "model spec",
                format!("need d >= 2*d_pos, got d={} d_pos={}", self.d, self.d_pos),
            ));
        }
        if self.d < self.d_pos + self.classes + 2 {
            return Err(Error::invalid(
                "model spec",
                format!(
                    "need d >= d_pos + classes + 2, got d={} d_pos={} classes={}",
                    self.d, self.d_pos, self.classes
                ),
            ));
        }
        if self.n_heads < 1 {
            return Err(Error::invalid("model spec", "n_heads must be >= 1"));
        }
        if !(self.temperature > 0.0) || !(self.attn_gain > 0.0) || !(self.readout_scale > 0.0) {
            return Err(Error::invalid(
                "model spec",
                "temperature, attn_gain and readout_scale must be positive",
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("model spec", "noise_std must be finite and >= 0"));
        }
        Ok(())
    }

    /// Output vocabulary: class tokens then one prompt symbol.
    pub fn vocab_size(&self) -> usize {
        self.classes + 1
    }

    pub fn prompt_symbol(&self) -> usize {
        self.classes
    }

    fn marker_dim(&self) -> usize {
        self.d_pos + self.classes
    }

    fn one_dim(&self) -> usize {
        self.d_pos + self.classes + 1
    }

    fn d_k(&self) -> usize {
        self.d_pos + 1
    }

    /// Unit-norm ring encoding of `pos` among `n` positions.
    pub fn position_encoding(&self, pos: usize, n: usize) -> Vec<f64> {
        assert!(pos < n, "position {} out of {}", pos, n);
        let freqs = self.d_pos.div_ceil(2);
        let theta = 2.0 * std::f64::consts::PI * pos as f64 / n as f64;
        let mut enc = vec![0.0; self.d_pos];
        enc[0] = 1.0f64.sqrt();
        for f in 1..freqs {
            let w = (1.0 - f as f64 / freqs as f64).sqrt();
            enc[2 * f - 1] = w * (f as f64 * theta).cos();
            enc[2 * f] = w * (f as f64 * theta).sin();
        }
        let norm = enc.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut enc {
            *v /= norm;
        }
        enc
    }

    pub fn image_token(&self, pos: usize, n: usize, class: usize) -> Vec<f64> {
        assert!(class < self.classes);
        let mut t = vec![0.0; self.d];
        t[..self.d_pos].copy_from_slice(&self.position_encoding(pos, n));
        t[self.d_pos + class] = 1.0;
        t[self.one_dim()] = 1.0;
        t
    }

    pub fn prompt_token(&self, query_pos: usize, n: usize) -> Vec<f64> {
        let mut t = vec![0.0; self.d];
        t[..self.d_pos].copy_from_slice(&self.position_encoding(query_pos, n));
        t[self.marker_dim()] = 1.0;
        t[self.one_dim()] = 1.0;
        t
    }

    pub fn answer_token(&self, class: usize) -> Vec<f64> {
        assert!(class < self.classes);
        let mut t = vec![0.0; self.d];
        t[self.d_pos + class] = 1.0;
        t[self.marker_dim()] = 1.0;
        t[self.one_dim()] = 1.0;
        t
    }

    /// Encodes one planted class per patch into the `n x d` token matrix.
    pub fn encode_image(&self, classes: &[usize]) -> Result<Tensor> {
        let n = classes.len();
        if n == 0 {
            return Err(Error::invalid("encode_image", "empty image"));
        }
        let mut rows = Vec::with_capacity(n);
        for (pos, &c) in classes.iter().enumerate() {
            if c >= self.classes {
                return Err(Error::invalid(
                    "encode_image",
                    format!("class {} out of {}", c, self.classes),
                ));
            }
            rows.push(self.image_token(pos, n, c));
        }
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone)]
struct HeadWeights {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
}

/// Attention decoder with frozen weights. Built once from a spec and a seed;
/// the same (spec, seed) pair always yields bitwise-identical weights.
#[derive(Clone)]
pub struct FrozenModel {
    spec: FrozenModelSpec,
    heads: Vec<HeadWeights>,
    w_out: Tensor,
    seed: u64,
}

/// Builds the analytic patch-recall solver plus seeded weight noise.
pub fn build_patch_recall_model(spec: &FrozenModelSpec, seed: u64) -> Result<FrozenModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let mut perturb = |t: &mut Tensor| {
        if spec.noise_std > 0.0 {
            for v in t.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    };

    let (d, d_k, d_v) = (spec.d, spec.d_k(), spec.classes);
    let gain = spec.attn_gain * (d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.n_heads);
    for _ in 0..spec.n_heads {
        // Query: amplified positional channel plus a constant -2*gain in the
        // marker slot (driven by the always-one bias dim).
        let mut w_q = Tensor::zeros(&[d, d_k]);
        for j in 0..spec.d_pos {
            w_q.set2(j, j, gain);
        }
        w_q.set2(spec.one_dim(), spec.d_pos, -2.0 * gain);
        perturb(&mut w_q);

        // Key: raw positional channel plus the marker itself.
        let mut w_k = Tensor::zeros(&[d, d_k]);
        for j in 0..spec.d_pos {
            w_k.set2(j, j, 1.0);
        }
        w_k.set2(spec.marker_dim(), spec.d_pos, 1.0);
        perturb(&mut w_k);

        // Value: the class channel, verbatim.
        let mut w_v = Tensor::zeros(&[d, d_v]);
        for c in 0..spec.classes {
            w_v.set2(spec.d_pos + c, c, 1.0);
        }
        perturb(&mut w_v);

        heads.push(HeadWeights { w_q, w_k, w_v });
    }

    // Readout: class channel to class logits; the prompt-symbol column stays
    // at zero so it only wins when no class mass arrives at all.
    let mut w_out = Tensor::zeros(&[d_v, spec.vocab_size()]);
    for c in 0..spec.classes {
        w_out.set2(c, c, spec.readout_scale);
    }
    perturb(&mut w_out);

    Ok(FrozenModel {
        spec: spec.clone(),
        heads,
        w_out,
        seed,
    })
}

impl FrozenModel {
    pub fn spec(&self) -> &FrozenModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn scale_dk(&self) -> f64 {
        1.0 / (self.spec.d_k() as f64).sqrt()
    }

    /// Greedy answer: argmax over the class portion of a distribution row.
    pub fn argmax_class(&self, dist: &[f64]) -> usize {
        let mut best = 0;
        for c in 1..self.spec.classes {
            if dist[c] > dist[best] {
                best = c;
            }
        }
        best
    }
}

/// Per-head key/value history plus the shared length, all living on a tape so
/// gradients can flow from later turns back into compressed image tokens.
pub struct KVCache {
    per_head: Vec<(Var, Var)>,
    len: usize,
}

impl KVCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Runs the image prefix through the decoder: fills the cache with one K/V row
/// per token per head and returns the next-token distribution at the last
/// prefix position.
pub fn prefill(tape: &mut Tape, model: &FrozenModel, tokens: Var) -> Result<(KVCache, Var)> {
    let n = tape.value(tokens).nrows();
    if n == 0 {
        return Err(Error::invalid("prefill", "empty prefix"));
    }
    let mut per_head = Vec::with_capacity(model.heads.len());
    let mut outs = Vec::with_capacity(model.heads.len());
    let last = tape.gather_rows(tokens, &[n - 1])?;
    for head in &model.heads {
        let w_k = tape.constant(head.w_k.clone());
        let w_v = tape.constant(head.w_v.clone());
        let w_q = tape.constant(head.w_q.clone());
        let k = tape.matmul(tokens, w_k)?;
        let v = tape.matmul(tokens, w_v)?;
        let q = tape.matmul(last, w_q)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, model.scale_dk())?;
        let w = tape.row_softmax(scaled)?;
        let out = tape.matmul(w, v)?;
        outs.push(out);
        per_head.push((k, v));
    }
    let dist = readout(tape, model, outs)?;
    Ok((KVCache { per_head, len: n }, dist))
}

/// One cached decode step: appends the token's K/V to the cache, then attends
/// over the extended history exactly as a full forward pass would.
pub fn decode_step(
    tape: &mut Tape,
    model: &FrozenModel,
    cache: &mut KVCache,
    token: Var,
) -> Result<Var> {
    if tape.value(token).shape() != [1, model.spec.d] {
        return Err(Error::shape(
            "decode_step",
            format!("token {:?}", tape.value(token).shape()),
        ));
    }
    let mut outs = Vec::with_capacity(model.heads.len());
    for (h, head) in model.heads.iter().enumerate() {
        let w_k = tape.constant(head.w_k.clone());
        let w_v = tape.constant(head.w_v.clone());
        let w_q = tape.constant(head.w_q.clone());
        let k_new = tape.matmul(token, w_k)?;
        let v_new = tape.matmul(token, w_v)?;
        let (k_prev, v_prev) = cache.per_head[h];
        let k_all = tape.concat_rows(k_prev, k_new)?;
        let v_all = tape.concat_rows(v_prev, v_new)?;
        cache.per_head[h] = (k_all, v_all);

        let q = tape.matmul(token, w_q)?;
        let kt = tape.transpose(k_all)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, model.scale_dk())?;
        let w = tape.row_softmax(scaled)?;
        let out = tape.matmul(w, v_all)?;
        outs.push(out);
    }
    cache.len += 1;
    readout(tape, model, outs)
}

fn readout(tape: &mut Tape, model: &FrozenModel, head_outs: Vec<Var>) -> Result<Var> {
    let mut acc = head_outs[0];
    for &o in &head_outs[1..] {
        acc = tape.add(acc, o)?;
    }
    let avg = tape.scale(acc, 1.0 / head_outs.len() as f64)?;
    let w_out = tape.constant(model.w_out.clone());
    let logits = tape.matmul(avg, w_out)?;
    let tempered = tape.scale(logits, 1.0 / model.spec.temperature)?;
    tape.row_softmax(tempered)
}

/// One dialogue turn: ask about a position, answer with a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub query_pos: usize,
    pub gold_class: usize,
}

/// A multi-turn episode over one synthetic image.
#[derive(Debug, Clone)]
pub struct DialogueEpisode {
    /// Planted class per patch; `image_tokens` is its encoding.
    pub classes: Vec<usize>,
    pub image_tokens: Tensor,
    pub turns: Vec<Turn>,
}

impl DialogueEpisode {
    pub fn n(&self) -> usize {
        self.classes.len()
    }
}

/// How answer tokens are fed back during a dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Gold answers are appended (teacher forcing); traces stay comparable
    /// across reducers because every arm follows the same token path.
    Forced,
    /// The model's own greedy answers are appended.
    Greedy,
}

/// Trace handles from a dialogue run on a live tape, one distribution per
/// forced answer position per turn.
pub struct TapeDialogue {
    pub turn_traces: Vec<Vec<Var>>,
    pub answers: Vec<usize>,
}

/// Drives a full dialogue over (possibly compressed) image tokens already on
/// the tape: prefill once, then per turn decode the prompt token and the
/// answer tokens through the persistent cache.
pub fn run_dialogue_on_tape(
    tape: &mut Tape,
    model: &FrozenModel,
    image: Var,
    episode: &DialogueEpisode,
    mode: DecodeMode,
) -> Result<TapeDialogue> {
    let n = episode.n();
    let spec = &model.spec;
    let (mut cache, _first_head) = prefill(tape, model, image)?;
    let mut turn_traces = Vec::with_capacity(episode.turns.len());
    let mut answers = Vec::with_capacity(episode.turns.len());
    for turn in &episode.turns {
        let prompt = Tensor::from_vec(&[1, spec.d], spec.prompt_token(turn.query_pos, n))?;
        let prompt_var = tape.constant(prompt);
        let dist = decode_step(tape, model, &mut cache, prompt_var)?;
        let answer = model.argmax_class(tape.value(dist).row(0));
        answers.push(answer);
        // Single-token answers: one forced position per turn.
        let trace = vec![dist];
        let fed = match mode {
            DecodeMode::Forced => turn.gold_class,
            DecodeMode::Greedy => answer,
        };
        let answer_tok = Tensor::from_vec(&[1, spec.d], spec.answer_token(fed))?;
        let answer_var = tape.constant(answer_tok);
        let _ = decode_step(tape, model, &mut cache, answer_var)?;
        turn_traces.push(trace);
    }
    Ok(TapeDialogue {
        turn_traces,
        answers,
    })
}

/// Value-level outcome of a dialogue run.
#[derive(Debug, Clone)]
pub struct DialogueOutcome {
    pub answers: Vec<usize>,
    /// One trace per turn (single forced position each).
    pub traces: Vec<PredictionTrace>,
}

/// Convenience wrapper: fresh tape, optional compression of the image tokens,
/// full dialogue, values extracted.
pub fn run_dialogue(
    model: &FrozenModel,
    episode: &DialogueEpisode,
    matrix: Option<&CompressionMatrix>,
    mode: DecodeMode,
) -> Result<DialogueOutcome> {
    let mut tape = Tape::new();
    let tokens = match matrix {
        Some(p) => {
            let compressed = p.apply(&episode.image_tokens)?;
            tape.constant(compressed)
        }
        None => tape.constant(episode.image_tokens.clone()),
    };
    let run = run_dialogue_on_tape(&mut tape, model, tokens, episode, mode)?;
    let traces = run
        .turn_traces
        .iter()
        .map(|vars| PredictionTrace {
            rows: vars
                .iter()
                .map(|&v| tape.value(v).row(0).to_vec())
                .collect(),
        })
        .collect();
    Ok(DialogueOutcome {
        answers: run.answers,
        traces,
    })
}

/// Turn-1 prompt attention over the uncompressed image tokens, averaged over
/// heads. This is the per-token importance signal the pruning baseline and
/// the overlap analysis consume. Computed by value math; no tape involved.
pub fn prompt_attention(model: &FrozenModel, episode: &DialogueEpisode) -> Result<Vec<f64>> {
    let turn = episode
        .turns
        .first()
        .ok_or_else(|| Error::invalid("prompt_attention", "episode has no turns"))?;
    let n = episode.n();
    let spec = &model.spec;
    let prompt = Tensor::from_vec(&[1, spec.d], spec.prompt_token(turn.query_pos, n))?;
    let mut acc = vec![0.0; n];
    for head in &model.heads {
        // Keys for the image prefix plus the prompt's own key, as in a real
        // decode step; only the image entries are reported.
        let k_img = crate::tensor::matmul(&episode.image_tokens, &head.w_k)?;
        let k_prompt = crate::tensor::matmul(&prompt, &head.w_k)?;
        let q = crate::tensor::matmul(&prompt, &head.w_q)?;
        let mut scores = Vec::with_capacity(n + 1);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..spec.d_k() {
                s += q.at2(0, j) * k_img.at2(i, j);
            }
            scores.push(s * model.scale_dk());
        }
        let mut s_self = 0.0;
        for j in 0..spec.d_k() {
            s_self += q.at2(0, j) * k_prompt.at2(0, j);
        }
        scores.push(s_self * model.scale_dk());
        let row = crate::tensor::row_softmax(&Tensor::from_vec(&[1, n + 1], scores)?)?;
        for i in 0..n {
            acc[i] += row.at2(0, i) / model.heads.len() as f64;
        }
    }
    Ok(acc)
}

/// How classes are planted across patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassLayout {
    /// Independent uniform class per patch.
    Iid,
    /// Contiguous same-class runs with lengths uniform in `[min_len, max_len]`,
    /// adjacent runs forced to differ. Mimics object regions, so spatial
    /// coverage and neighbor merging carry real information.
    Segments { min_len: usize, max_len: usize },
}

impl Default for ClassLayout {
    fn default() -> Self {
        ClassLayout::Segments {
            min_len: 4,
            max_len: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeGenConfig {
    /// Candidate token counts; one entry fixes the resolution, several give
    /// variable-resolution data with a uniform per-episode draw.
    pub n_tokens: Vec<usize>,
    pub n_turns: usize,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub layout: ClassLayout,
}

impl EpisodeGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens.is_empty() || self.n_turns == 0 {
            return Err(Error::invalid(
                "episode config",
                "n_tokens and n_turns must be non-empty/non-zero",
            ));
        }
        for &n in &self.n_tokens {
            if n < self.n_turns {
                return Err(Error::invalid(
                    "episode config",
                    format!("n_tokens {} cannot host {} distinct queries", n, self.n_turns),
                ));
            }
        }
        if let ClassLayout::Segments { min_len, max_len } = self.layout {
            if min_len == 0 || max_len < min_len {
                return Err(Error::invalid(
                    "episode config",
                    format!("segment bounds [{}, {}]", min_len, max_len),
                ));
            }
        }
        Ok(())
    }
}

fn plant_classes(rng: &mut ChaCha8Rng, n: usize, classes: usize, layout: ClassLayout) -> Vec<usize> {
    match layout {
        ClassLayout::Iid => (0..n).map(|_| rng.gen_range(0..classes)).collect(),
        ClassLayout::Segments { min_len, max_len } => {
            let mut out = Vec::with_capacity(n);
            let mut prev: Option<usize> = None;
            while out.len() < n {
                let len = rng.gen_range(min_len..=max_len).min(n - out.len());
                let class = match prev {
                    None => rng.gen_range(0..classes),
                    Some(p) => {
                        let c = rng.gen_range(0..classes - 1);
                        if c >= p {
                            c + 1
                        } else {
                            c
                        }
                    }
                };
                out.extend(std::iter::repeat_n(class, len));
                prev = Some(class);
            }
            out
        }
    }
}

/// Generates `count` episodes. Queried positions are uniform and distinct
/// within an episode; the gold answer is always the planted class at the
/// queried position. Fixed seed means identical episodes.
pub fn gen_episodes(spec: &FrozenModelSpec, cfg: &EpisodeGenConfig) -> Result<Vec<DialogueEpisode>> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut episodes = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let n = cfg.n_tokens[rng.gen_range(0..cfg.n_tokens.len())];
        let classes = plant_classes(&mut rng, n, spec.classes, cfg.layout);
        let picks = rand::seq::index::sample(&mut rng, n, cfg.n_turns);
        let turns = picks
            .iter()
            .map(|query_pos| Turn {
                query_pos,
                gold_class: classes[query_pos],
            })
            .collect();
        let image_tokens = spec.encode_image(&classes)?;
        episodes.push(DialogueEpisode {
            classes,
            image_tokens,
            turns,
        });
    }
    Ok(episodes)
}

pub const EPISODE_MAGIC: &[u8; 4] = b"EPDS";
const EPISODE_VERSION: u64 = 1;

/// Binary episode dataset:
///
/// ```text
/// magic "EPDS" | version | d | n_turns | classes | count | seed
/// | layout (0 iid, 1 segments) | seg_min | seg_max
/// | n_resolutions | resolutions...
/// then per episode: n | class per patch | (query, gold) per turn | tokens
/// ```
///
/// All integers u64 little-endian; token matrices use the tensor format.
pub fn save_episodes(
    path: &Path,
    spec: &FrozenModelSpec,
    cfg: &EpisodeGenConfig,
    episodes: &[DialogueEpisode],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(EPISODE_MAGIC)?;
        for v in [
            EPISODE_VERSION,
            spec.d as u64,
            cfg.n_turns as u64,
            spec.classes as u64,
            episodes.len() as u64,
            cfg.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let (tag, lo, hi) = match cfg.layout {
            ClassLayout::Iid => (0u64, 0u64, 0u64),
            ClassLayout::Segments { min_len, max_len } => (1, min_len as u64, max_len as u64),
        };
        for v in [tag, lo, hi, cfg.n_tokens.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &n in &cfg.n_tokens {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for ep in episodes {
            w.write_all(&(ep.n() as u64).to_le_bytes())?;
            for &c in &ep.classes {
                w.write_all(&(c as u64).to_le_bytes())?;
            }
            for t in &ep.turns {
                w.write_all(&(t.query_pos as u64).to_le_bytes())?;
                w.write_all(&(t.gold_class as u64).to_le_bytes())?;
            }
            write_tensor(w, &ep.image_tokens)?;
        }
        w.flush()
    };
    inner(&mut w).map_err(|e| Error::io(path, e))
}

/// Dataset header fields needed to validate against a model spec.
#[derive(Debug, Clone)]
pub struct EpisodeFileMeta {
    pub d: usize,
    pub n_turns: usize,
    pub classes: usize,
    pub seed: u64,
    pub layout: ClassLayout,
    pub n_tokens: Vec<usize>,
}

pub fn load_episodes(path: &Path) -> Result<(EpisodeFileMeta, Vec<DialogueEpisode>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let inner = |r: &mut BufReader<File>| -> io::Result<(EpisodeFileMeta, Vec<DialogueEpisode>)> {
        let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(bad(format!("bad episode magic {:?}", magic)));
        }
        let version = read_u64(r)?;
        if version != EPISODE_VERSION {
            return Err(bad(format!("unsupported episode version {}", version)));
        }
        let d = read_u64(r)? as usize;
        let n_turns = read_u64(r)? as usize;
        let classes = read_u64(r)? as usize;
        let count = read_u64(r)? as usize;
        let seed = read_u64(r)?;
        let tag = read_u64(r)?;
        let lo = read_u64(r)? as usize;
        let hi = read_u64(r)? as usize;
        let layout = match tag {
            0 => ClassLayout::Iid,
            1 => ClassLayout::Segments {
                min_len: lo,
                max_len: hi,
            },
            other => return Err(bad(format!("unknown layout tag {}", other))),
        };
        let n_res = read_u64(r)? as usize;
        let mut n_tokens = Vec::with_capacity(n_res);
        for _ in 0..n_res {
            n_tokens.push(read_u64(r)? as usize);
        }
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u64(r)? as usize;
            let mut cls = Vec::with_capacity(n);
            for _ in 0..n {
                cls.push(read_u64(r)? as usize);
            }
            let mut turns = Vec::with_capacity(n_turns);
            for _ in 0..n_turns {
                let q = read_u64(r)? as usize;
                let g = read_u64(r)? as usize;
                turns.push(Turn {
                    query_pos: q,
                    gold_class: g,
                });
            }
            let image_tokens = read_tensor(r)?;
            if image_tokens.shape() != [n, d] {
                return Err(bad(format!(
                    "episode tensor {:?}, expected [{}, {}]",
                    image_tokens.shape(),
                    n,
                    d
                )));
            }
            episodes.push(DialogueEpisode {
                classes: cls,
                image_tokens,
                turns,
            });
        }
        Ok((
            EpisodeFileMeta {
                d,
                n_turns,
                classes,
                seed,
                layout,
                n_tokens,
            },
            episodes,
        ))
    };
    inner(&mut r).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> FrozenModelSpec {
        FrozenModelSpec {
            d: 16,
            classes: 4,
            d_pos: 8,
            ..FrozenModelSpec::default()
        }
    }

    fn desk_cfg(count: usize, seed: u64) -> EpisodeGenConfig {
        EpisodeGenConfig {
            n_tokens: vec![16],
            n_turns: 3,
            count,
            seed,
            layout: ClassLayout::default(),
        }
    }

    /// Independent oracle: attention output for position `i` of `tokens`
    /// recomputed from scratch over the full prefix, no cache involved.
    fn full_recompute_dist(model: &FrozenModel, token_rows: &[Vec<f64>], i: usize) -> Vec<f64> {
        let spec = model.spec();
        let d_k = spec.d_pos + 1;
        let mut head_sum = vec![0.0; spec.classes];
        for head in &model.heads {
            let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
                let cols = w.ncols();
                let mut out = vec![0.0; cols];
                for c in 0..cols {
                    for (j, &x) in row.iter().enumerate() {
                        out[c] += x * w.at2(j, c);
                    }
                }
                out
            };
            let q = proj(&token_rows[i], &head.w_q);
            let mut scores = Vec::with_capacity(i + 1);
            for row in token_rows.iter().take(i + 1) {
                let k = proj(row, &head.w_k);
                let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                scores.push(s / (d_k as f64).sqrt());
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, row) in token_rows.iter().take(i + 1).enumerate() {
                let v = proj(row, &head.w_v);
                for c in 0..spec.classes {
                    head_sum[c] += exps[j] / z * v[c] / model.heads.len() as f64;
                }
            }
        }
        let mut logits = vec![0.0; spec.vocab_size()];
        for t in 0..spec.vocab_size() {
            for c in 0..spec.classes {
                logits[t] += head_sum[c] * model.w_out.at2(c, t);
            }
            logits[t] /= spec.temperature;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    #[test]
    fn spec_validation_rejects_bad_layouts() {
        let mut s = small_spec();
        s.d_pos = 9; // d < 2*d_pos
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.classes = 16; // channels no longer fit
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.temperature = 0.0;
        assert!(s.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn position_encoding_is_unit_norm_with_nonnegative_decaying_kernel() {
        let spec = FrozenModelSpec::default();
        let n = 64;
        let e0 = spec.position_encoding(0, n);
        let norm: f64 = e0.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let mut prev = 1.0;
        for delta in 1..=6 {
            let e = spec.position_encoding(delta, n);
            let dot: f64 = e0.iter().zip(&e).map(|(a, b)| a * b).sum();
            assert!(dot >= 0.0, "kernel must stay nonnegative, got {} at {}", dot, delta);
            assert!(dot < prev, "kernel must decay over short range");
            prev = dot;
        }
    }

    #[test]
    fn same_seed_builds_bitwise_identical_models() {
        let spec = small_spec();
        let a = build_patch_recall_model(&spec, 9).unwrap();
        let b = build_patch_recall_model(&spec, 9).unwrap();
        for (ha, hb) in a.heads.iter().zip(&b.heads) {
            for (x, y) in ha.w_q.data().iter().zip(hb.w_q.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = build_patch_recall_model(&spec, 10).unwrap();
        assert_ne!(a.heads[0].w_q.data(), c.heads[0].w_q.data());
    }

    #[test]
    fn uncompressed_greedy_accuracy_is_perfect_over_1000_episodes() {
        let spec = FrozenModelSpec::default();
        let model = build_patch_recall_model(&spec, 7).unwrap();
        let cfg = EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 3,
            count: 1000,
            seed: 123,
            layout: ClassLayout::default(),
        };
        let episodes = gen_episodes(&spec, &cfg).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for ep in &episodes {
            let out = run_dialogue(&model, ep, None, DecodeMode::Greedy).unwrap();
            for (ans, turn) in out.answers.iter().zip(&ep.turns) {
                total += 1;
                if *ans == turn.gold_class {
                    correct += 1;
                }
            }
        }
        assert_eq!(correct, total, "uncompressed recall must be exact");
    }

    #[test]
    fn cached_decode_matches_full_recompute_oracle() {
        let spec = small_spec();
        let model = build_patch_recall_model(&spec, 21).unwrap();
        let cfg = desk_cfg(5, 77);
        let episodes = gen_episodes(&spec, &cfg).unwrap();
        for ep in &episodes {
            // Token stream: image prefix, then per turn prompt + gold answer.
            let mut rows: Vec<Vec<f64>> = (0..ep.n())
                .map(|i| ep.image_tokens.row(i).to_vec())
                .collect();

            let mut tape = Tape::new();
            let img = tape.constant(ep.image_tokens.clone());
            let (mut cache, prefill_dist) = prefill(&mut tape, &model, img).unwrap();
            let oracle = full_recompute_dist(&model, &rows, rows.len() - 1);
            for (a, b) in tape.value(prefill_dist).row(0).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "prefill head {} vs {}", a, b);
            }

            for turn in &ep.turns {
                rows.push(spec.prompt_token(turn.query_pos, ep.n()));
                let pv = tape
                    .constant(Tensor::from_vec(&[1, spec.d], rows.last().unwrap().clone()).unwrap());
                let dist = decode_step(&mut tape, &model, &mut cache, pv).unwrap();
                let oracle = full_recompute_dist(&model, &rows, rows.len() - 1);
                for (a, b) in tape.value(dist).row(0).iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-10, "cached {} vs recomputed {}", a, b);
                }

                rows.push(spec.answer_token(turn.gold_class));
                let av = tape
                    .constant(Tensor::from_vec(&[1, spec.d], rows.last().unwrap().clone()).unwrap());
                let dist = decode_step(&mut tape, &model, &mut cache, av).unwrap();
                let oracle = full_recompute_dist(&model, &rows, rows.len() - 1);
                for (a, b) in tape.value(dist).row(0).iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-10, "cached {} vs recomputed {}", a, b);
                }
            }
            assert_eq!(cache.len(), ep.n() + 2 * ep.turns.len());
        }
    }

    #[test]
    fn dialogue_is_deterministic_given_seeds() {
        let spec = small_spec();
        let model = build_patch_recall_model(&spec, 3).unwrap();
        let eps = gen_episodes(&spec, &desk_cfg(3, 5)).unwrap();
        let a = run_dialogue(&model, &eps[0], None, DecodeMode::Forced).unwrap();
        let b = run_dialogue(&model, &eps[0], None, DecodeMode::Forced).unwrap();
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn prompt_attention_peaks_at_queried_position() {
        let spec = FrozenModelSpec::default();
        let model = build_patch_recall_model(&spec, 40).unwrap();
        let cfg = EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 3,
            count: 20,
            seed: 99,
            layout: ClassLayout::default(),
        };
        for ep in gen_episodes(&spec, &cfg).unwrap() {
            let scores = prompt_attention(&model, &ep).unwrap();
            assert_eq!(scores.len(), 64);
            let total: f64 = scores.iter().sum();
            assert!(total > 0.99, "image attention mass {} too low", total);
            let arg = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, ep.turns[0].query_pos);
        }
    }

    #[test]
    fn dropping_the_queried_patch_hurts_only_that_turn() {
        // Iid layout so neighbors carry no information about the dropped patch.
        let spec = FrozenModelSpec::default();
        let model = build_patch_recall_model(&spec, 50).unwrap();
        let cfg = EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 3,
            count: 300,
            seed: 60,
            layout: ClassLayout::Iid,
        };
        let episodes = gen_episodes(&spec, &cfg).unwrap();
        let mut gold_prob_turn2 = 0.0;
        let mut other_turn_flips = 0usize;
        for ep in &episodes {
            let victim = ep.turns[1].query_pos;
            let keep: Vec<usize> = (0..ep.n()).filter(|&j| j != victim).collect();
            let p = CompressionMatrix::from_selection(&keep, ep.n()).unwrap();
            let full = run_dialogue(&model, ep, None, DecodeMode::Forced).unwrap();
            let dropped = run_dialogue(&model, ep, Some(&p), DecodeMode::Forced).unwrap();
            gold_prob_turn2 += dropped.traces[1].rows[0][ep.turns[1].gold_class];
            for t in [0usize, 2] {
                if dropped.answers[t] != full.answers[t] {
                    other_turn_flips += 1;
                }
            }
        }
        gold_prob_turn2 /= episodes.len() as f64;
        // Chance for 8 classes is 0.125; the dropped patch must leave the
        // model near chance on that turn and untouched elsewhere.
        assert!(
            gold_prob_turn2 < 0.125 + 0.05,
            "turn-2 gold probability {} not at chance",
            gold_prob_turn2
        );
        assert_eq!(other_turn_flips, 0, "turns 1 and 3 must be unaffected");
    }

    #[test]
    fn episode_gold_matches_planted_classes_and_queries_are_distinct() {
        let spec = small_spec();
        let eps = gen_episodes(&spec, &desk_cfg(200, 8)).unwrap();
        for ep in &eps {
            let mut seen = Vec::new();
            for t in &ep.turns {
                assert_eq!(t.gold_class, ep.classes[t.query_pos]);
                assert!(!seen.contains(&t.query_pos), "queries must be distinct");
                seen.push(t.query_pos);
            }
        }
    }

    #[test]
    fn query_positions_are_uniform_by_chi_square() {
        let spec = small_spec();
        let cfg = desk_cfg(10_000, 31);
        let eps = gen_episodes(&spec, &cfg).unwrap();
        let n = 16usize;
        let mut counts = vec![0.0f64; n];
        for ep in &eps {
            for t in &ep.turns {
                counts[t.query_pos] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let expected = total / n as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // Chi-square with df = 15: mean df, variance 2 df.
        let df = (n - 1) as f64;
        assert!(
            chi2 < df + 3.0 * (2.0 * df).sqrt(),
            "chi-square {} too large for df {}",
            chi2,
            df
        );
    }

    #[test]
    fn segment_layout_produces_bounded_runs_with_distinct_neighbors() {
        let spec = small_spec();
        let cfg = EpisodeGenConfig {
            n_tokens: vec![64],
            n_turns: 1,
            count: 50,
            seed: 4,
            layout: ClassLayout::Segments {
                min_len: 3,
                max_len: 7,
            },
        };
        for ep in gen_episodes(&spec, &cfg).unwrap() {
            let mut run = 1;
            for i in 1..ep.n() {
                if ep.classes[i] == ep.classes[i - 1] {
                    run += 1;
                    assert!(run <= 7, "run too long");
                } else {
                    run = 1;
                }
            }
        }
    }

    #[test]
    fn variable_resolution_draws_only_listed_sizes() {
        let spec = small_spec();
        let cfg = EpisodeGenConfig {
            n_tokens: vec![16, 24, 40],
            n_turns: 2,
            count: 200,
            seed: 17,
            layout: ClassLayout::Iid,
        };
        let eps = gen_episodes(&spec, &cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for ep in &eps {
            assert!(cfg.n_tokens.contains(&ep.n()));
            seen.insert(ep.n());
        }
        assert_eq!(seen.len(), 3, "all listed resolutions should appear");
    }

    #[test]
    fn episode_file_round_trips_and_is_byte_stable() {
        let spec = small_spec();
        let cfg = desk_cfg(10, 42);
        let eps = gen_episodes(&spec, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.episodes");
        let p2 = dir.path().join("b.episodes");
        save_episodes(&p1, &spec, &cfg, &eps).unwrap();
        save_episodes(&p2, &spec, &cfg, &eps).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let (meta, back) = load_episodes(&p1).unwrap();
        assert_eq!(meta.d, spec.d);
        assert_eq!(meta.classes, spec.classes);
        assert_eq!(back.len(), eps.len());
        for (a, b) in eps.iter().zip(&back) {
            assert_eq!(a.classes, b.classes);
            assert_eq!(a.turns, b.turns);
            assert_eq!(a.image_tokens, b.image_tokens);
        }
    }
}
