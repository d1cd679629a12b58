//! Meta generator: a tiny attention module that emits a compression matrix
//! for any image at any resolution.
//!
//! Given `n` image tokens it adds positional embeddings, average-pools the
//! result down to `m` query slots with a fractional-stride window, and scores
//! every (query, token) pair with a gated bilinear form:
//!
//! ```text
//! X' = X + E_pos
//! Q  = Pool(X'; kernel, stride n/m) W_q
//! S  = Q diag(omega) (X' W_k)^T / sqrt(d_c)
//! P  = row_softmax(S)
//! ```
//!
//! The same parameters serve every resolution because pooling adapts its
//! stride and the positional table is a function of `n` (or a learned table
//! sliced to `n`). Parameter count stays at `2 d d_c + d_c` in the fixed
//! positional mode.
//!
//! `W_q` and `W_k` start as the same Gaussian draw. With tied weights a
//! query's score against a token inside its own pooling window has
//! expectation `(1/kernel) * d * d_c * sigma_c^2 * sigma_w^2` over token and
//! weight randomness (token entries iid `N(0, sigma_c^2)`, weights
//! `N(0, sigma_w^2)`), while out-of-window scores vanish in expectation. The
//! init therefore biases the softmax toward block-pooling before any
//! training happens; both expectations are pinned by Monte-Carlo tests here.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compress::CompressionMatrix;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, read_u64, write_tensor};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Positional information mixed into the generator's view of the tokens
/// (never into the tokens the decoder consumes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Sinusoid recomputed per resolution; adds no trainable parameters.
    FixedSinusoid,
    /// Trainable `n_max x d` table, sliced to the first `n` rows. Initialized
    /// at the sinusoid.
    Learned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Token width; must match the decoder embedding width.
    pub d: usize,
    /// Scoring width of the bilinear form.
    pub d_c: usize,
    /// Pooling window length.
    pub kernel: usize,
    /// Largest resolution a learned positional table must serve.
    pub n_max: usize,
    pub positional: PositionalMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            d: 32,
            d_c: 4,
            kernel: 3,
            n_max: 256,
            positional: PositionalMode::FixedSinusoid,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_c == 0 || self.kernel == 0 || self.n_max == 0 {
            return Err(Error::invalid(
                "meta config",
                "d, d_c, kernel and n_max must be positive",
            ));
        }
        Ok(())
    }
}

/// Trainable parameter count: `2 d d_c + d_c`, plus the positional table in
/// learned mode.
pub fn count_params(cfg: &MetaConfig) -> usize {
    let base = 2 * cfg.d * cfg.d_c + cfg.d_c;
    match cfg.positional {
        PositionalMode::FixedSinusoid => base,
        PositionalMode::Learned => base + cfg.n_max * cfg.d,
    }
}

/// Standard sinusoid table: column pair `2i, 2i+1` holds
/// `sin(p * 10000^(-2i/d))` and `cos(...)` at position `p`.
pub fn sinusoid_table(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for p in 0..n {
        for col in 0..d {
            let pair = (col / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / d as f64);
            let v = if col % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set2(p, col, v);
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct MetaGeneratorParams {
    pub cfg: MetaConfig,
    /// `d x d_c` query projection.
    pub w_q: Tensor,
    /// `d x d_c` key projection.
    pub w_k: Tensor,
    /// `1 x d_c` elementwise gate on the query channels.
    pub omega: Tensor,
    /// `n_max x d` positional table; present only in learned mode.
    pub e_pos: Option<Tensor>,
}

/// Initialization: `W_q` and `W_k` share one `N(0, (1/sqrt(d_c))^2)` draw,
/// the gate starts at all ones, and a learned positional table starts at the
/// sinusoid.
pub fn init_params(cfg: &MetaConfig, seed: u64) -> Result<MetaGeneratorParams> {
    cfg.validate()?;
    let sigma_w = 1.0 / (cfg.d_c as f64).sqrt();
    let dist = Normal::new(0.0, sigma_w).map_err(|e| Error::invalid("init", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w_q = Tensor::zeros(&[cfg.d, cfg.d_c]);
    for v in w_q.data_mut() {
        *v = dist.sample(&mut rng);
    }
    let w_k = w_q.clone();
    let omega = Tensor::from_vec(&[1, cfg.d_c], vec![1.0; cfg.d_c])?;
    let e_pos = match cfg.positional {
        PositionalMode::FixedSinusoid => None,
        PositionalMode::Learned => Some(sinusoid_table(cfg.n_max, cfg.d)),
    };
    Ok(MetaGeneratorParams {
        cfg: cfg.clone(),
        w_q,
        w_k,
        omega,
        e_pos,
    })
}

impl MetaGeneratorParams {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let (d, d_c) = (self.cfg.d, self.cfg.d_c);
        if self.w_q.shape() != [d, d_c] || self.w_k.shape() != [d, d_c] {
            return Err(Error::shape(
                "meta params",
                format!("w_q {:?} / w_k {:?}", self.w_q.shape(), self.w_k.shape()),
            ));
        }
        if self.omega.shape() != [1, d_c] {
            return Err(Error::shape("meta params", format!("omega {:?}", self.omega.shape())));
        }
        match (&self.cfg.positional, &self.e_pos) {
            (PositionalMode::FixedSinusoid, None) => {}
            (PositionalMode::Learned, Some(t)) if t.shape() == [self.cfg.n_max, d] => {}
            _ => {
                return Err(Error::shape(
                    "meta params",
                    "positional table must match the mode and n_max".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Generator parameters staged on a tape, either as trainable params or as
/// frozen constants. Holds the config by value so the tape graph and the
/// source parameters stay decoupled.
pub struct MetaOnTape {
    pub cfg: MetaConfig,
    pub w_q: Var,
    pub w_k: Var,
    pub omega: Var,
    pub e_pos: Option<Var>,
}

pub fn stage_params(tape: &mut Tape, params: &MetaGeneratorParams, trainable: bool) -> Result<MetaOnTape> {
    params.validate()?;
    let mut put = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let w_q = put(&params.w_q);
    let w_k = put(&params.w_k);
    let omega = put(&params.omega);
    let e_pos = params.e_pos.as_ref().map(&mut put);
    Ok(MetaOnTape {
        cfg: params.cfg.clone(),
        w_q,
        w_k,
        omega,
        e_pos,
    })
}

impl MetaOnTape {
    /// Trainable vars in a fixed order, for gradient reads.
    pub fn trainable(&self) -> Vec<Var> {
        let mut vs = vec![self.w_q, self.w_k, self.omega];
        if let Some(e) = self.e_pos {
            vs.push(e);
        }
        vs
    }

    fn positional(&self, tape: &mut Tape, n: usize) -> Result<Var> {
        match (self.cfg.positional, self.e_pos) {
            (PositionalMode::FixedSinusoid, _) => {
                Ok(tape.constant(sinusoid_table(n, self.cfg.d)))
            }
            (PositionalMode::Learned, Some(table)) => {
                if n > self.cfg.n_max {
                    return Err(Error::invalid(
                        "meta generate",
                        format!("n = {} exceeds learned table n_max = {}", n, self.cfg.n_max),
                    ));
                }
                let idx: Vec<usize> = (0..n).collect();
                tape.gather_rows(table, &idx)
            }
            (PositionalMode::Learned, None) => {
                Err(Error::invalid("meta generate", "learned mode without a table"))
            }
        }
    }

    /// Pre-softmax scores `Q diag(omega) K^T / sqrt(d_c)`, shape `m x n`.
    pub fn raw_scores(&self, tape: &mut Tape, image: Var, m: usize) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d {
            return Err(Error::shape(
                "meta raw_scores",
                format!("image {:?} vs d = {}", shape, self.cfg.d),
            ));
        }
        let n = shape[0];
        if m == 0 || m > n {
            return Err(Error::invalid(
                "meta raw_scores",
                format!("m = {} out of range for n = {}", m, n),
            ));
        }
        let e = self.positional(tape, n)?;
        let x = tape.add(image, e)?;
        let pooled = tape.frac_avg_pool(x, m, self.cfg.kernel)?;
        let q = tape.matmul(pooled, self.w_q)?;
        let k = tape.matmul(x, self.w_k)?;
        let gated = tape.mul_row_vec(q, self.omega)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(gated, kt)?;
        tape.scale(s, 1.0 / (self.cfg.d_c as f64).sqrt())
    }

    /// The compression matrix as a tape var: row-softmax of the raw scores.
    pub fn generate(&self, tape: &mut Tape, image: Var, m: usize) -> Result<Var> {
        let s = self.raw_scores(tape, image, m)?;
        tape.row_softmax(s)
    }
}

/// Value-level generation: same graph on a scratch tape, result validated
/// into a [`CompressionMatrix`]. Depends only on the image tokens; prompts
/// never enter, so one image always maps to one matrix.
pub fn generate(params: &MetaGeneratorParams, image: &Tensor, m: usize) -> Result<CompressionMatrix> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params, false)?;
    let img = tape.constant(image.clone());
    let p = staged.generate(&mut tape, img, m)?;
    CompressionMatrix::new(tape.value(p).clone())
}

/// Value-level raw scores, for analysis.
pub fn raw_scores(params: &MetaGeneratorParams, image: &Tensor, m: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params, false)?;
    let img = tape.constant(image.clone());
    let s = staged.raw_scores(&mut tape, img, m)?;
    Ok(tape.value(s).clone())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
const CHECKPOINT_VERSION: u64 = 1;

/// Checkpoint layout:
///
/// ```text
/// magic "MGCK" | version | d | d_c | kernel | n_max | positional tag
/// | w_q | w_k | omega | e_pos (learned mode only)
/// ```
pub fn save_checkpoint(path: &Path, params: &MetaGeneratorParams) -> Result<()> {
    params.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let tag = match params.cfg.positional {
            PositionalMode::FixedSinusoid => 0u64,
            PositionalMode::Learned => 1,
        };
        for v in [
            CHECKPOINT_VERSION,
            params.cfg.d as u64,
            params.cfg.d_c as u64,
            params.cfg.kernel as u64,
            params.cfg.n_max as u64,
            tag,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_tensor(w, &params.w_q)?;
        write_tensor(w, &params.w_k)?;
        write_tensor(w, &params.omega)?;
        if let Some(t) = &params.e_pos {
            write_tensor(w, t)?;
        }
        w.flush()
    };
    inner(&mut w).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MetaGeneratorParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let inner = |r: &mut BufReader<File>| -> io::Result<MetaGeneratorParams> {
        let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad checkpoint magic {:?}", magic)));
        }
        let version = read_u64(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", version)));
        }
        let d = read_u64(r)? as usize;
        let d_c = read_u64(r)? as usize;
        let kernel = read_u64(r)? as usize;
        let n_max = read_u64(r)? as usize;
        let positional = match read_u64(r)? {
            0 => PositionalMode::FixedSinusoid,
            1 => PositionalMode::Learned,
            other => return Err(bad(format!("unknown positional tag {}", other))),
        };
        let w_q = read_tensor(r)?;
        let w_k = read_tensor(r)?;
        let omega = read_tensor(r)?;
        let e_pos = match positional {
            PositionalMode::FixedSinusoid => None,
            PositionalMode::Learned => Some(read_tensor(r)?),
        };
        Ok(MetaGeneratorParams {
            cfg: MetaConfig {
                d,
                d_c,
                kernel,
                n_max,
                positional,
            },
            w_q,
            w_k,
            omega,
            e_pos,
        })
    };
    let params = inner(&mut r).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    params.validate().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        detail: "checkpoint tensors disagree with header".to_string(),
    })?;
    Ok(params)
}
