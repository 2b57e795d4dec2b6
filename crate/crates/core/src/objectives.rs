//! Retriever training objectives: in-batch InfoNCE and the KL-combined total.
//!
//! Similarities are cosines. The KL term compares, per row, the softmax over
//! `cos(q_i, e_k) / tau` with the softmax over `cos(s_i, e_k) / tau`, as
//! `KL(P_q || P_s)`.
//!
//! Batch file layout (little-endian):
//!
//! ```text
//! magic "MKGB" | version u16 | flags u16 (bit 0: declaratives) | dim u32 | B u32 |
//! tau f64 | alpha f64 | Z_q, Z_e[, Z_s] as row-major f32
//! ```

use std::path::Path;

use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 2.0;

const MAGIC: &[u8; 4] = b"MKGB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 32;
const FLAG_DECLARATIVES: u16 = 1;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("alpha must be non-negative, got {0}")]
    Alpha(f64),
    #[error("alpha > 0 requires declarative embeddings")]
    MissingDeclaratives,
    #[error("bad batch shape: {0}")]
    Shape(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("row {row} out of range for batch of {size}")]
    RowOutOfRange { row: usize, size: usize },
    #[error("zero vector in batch")]
    ZeroVector,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed batch file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub queries: Vec<Vec<f64>>,
    pub evidences: Vec<Vec<f64>>,
    pub declaratives: Option<Vec<Vec<f64>>>,
    pub temperature: f64,
    pub alpha: f64,
}

impl BatchEmbeddings {
    /// Batch with default temperature and `alpha = 0`.
    pub fn new(queries: Vec<Vec<f64>>, evidences: Vec<Vec<f64>>) -> Self {
        Self { queries, evidences, declaratives: None, temperature: DEFAULT_TEMPERATURE, alpha: 0.0 }
    }

    pub fn with_declaratives(mut self, declaratives: Vec<Vec<f64>>, alpha: f64) -> Self {
        self.declaratives = Some(declaratives);
        self.alpha = alpha;
        self
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn size(&self) -> usize {
        self.queries.len()
    }

    pub fn dim(&self) -> usize {
        self.queries.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ObjectiveError::Temperature(self.temperature));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(ObjectiveError::Alpha(self.alpha));
        }
        let b = self.queries.len();
        if b == 0 {
            return Err(ObjectiveError::Shape("empty batch".into()));
        }
        if self.evidences.len() != b {
            return Err(ObjectiveError::Shape(format!("{b} queries but {} evidences", self.evidences.len())));
        }
        if let Some(s) = &self.declaratives {
            if s.len() != b {
                return Err(ObjectiveError::Shape(format!("{b} queries but {} declaratives", s.len())));
            }
        }
        let dim = self.dim();
        let all = self.queries.iter().chain(&self.evidences).chain(self.declaratives.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(ObjectiveError::DimMismatch(dim, v.len()));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(ObjectiveError::ZeroVector);
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `cos(x_i, e_k) / tau` for every evidence `e_k`.
fn logits_row(x: &[f64], evidences: &[Vec<f64>], tau: f64) -> Vec<f64> {
    evidences.iter().map(|e| cosine(x, e) / tau).collect()
}

fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(p, q)| p.exp() * (p - q)).sum()
}

/// Contrastive loss of one row, max-subtracted for stability. Exactly 0 at B = 1.
pub fn infonce_loss(batch: &BatchEmbeddings, row: usize) -> Result<f64, ObjectiveError> {
    batch.validate()?;
    if row >= batch.size() {
        return Err(ObjectiveError::RowOutOfRange { row, size: batch.size() });
    }
    let logits = logits_row(&batch.queries[row], &batch.evidences, batch.temperature);
    Ok(-log_softmax(&logits)[row])
}

/// Mean contrastive loss over rows.
pub fn batch_infonce(batch: &BatchEmbeddings) -> Result<f64, ObjectiveError> {
    batch.validate()?;
    let b = batch.size();
    let total: f64 = (0..b)
        .map(|i| -log_softmax(&logits_row(&batch.queries[i], &batch.evidences, batch.temperature))[i])
        .sum();
    Ok(total / b as f64)
}

/// `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> Result<f64, ObjectiveError> {
    if p_logits.len() != q_logits.len() {
        return Err(ObjectiveError::DimMismatch(p_logits.len(), q_logits.len()));
    }
    if p_logits.is_empty() {
        return Err(ObjectiveError::Shape("empty distribution".into()));
    }
    Ok(kl_from_log_probs(&log_softmax(p_logits), &log_softmax(q_logits)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub infonce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean InfoNCE plus `alpha` times the mean per-row KL.
pub fn evaluate_objective(batch: &BatchEmbeddings) -> Result<ObjectiveValue, ObjectiveError> {
    let infonce = batch_infonce(batch)?;
    let kl = match (&batch.declaratives, batch.alpha > 0.0) {
        (None, true) => return Err(ObjectiveError::MissingDeclaratives),
        (None, false) => 0.0,
        (Some(s), _) => {
            let tau = batch.temperature;
            let sum: f64 = (0..batch.size())
                .map(|i| {
                    let lp = log_softmax(&logits_row(&batch.queries[i], &batch.evidences, tau));
                    let lq = log_softmax(&logits_row(&s[i], &batch.evidences, tau));
                    kl_from_log_probs(&lp, &lq)
                })
                .sum();
            sum / batch.size() as f64
        }
    };
    let total = if batch.alpha == 0.0 { infonce } else { infonce + batch.alpha * kl };
    Ok(ObjectiveValue { infonce, kl, total })
}

pub fn combined_objective(batch: &BatchEmbeddings) -> Result<f64, ObjectiveError> {
    evaluate_objective(batch).map(|v| v.total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub queries: Vec<Vec<f64>>,
    pub evidences: Vec<Vec<f64>>,
    pub declaratives: Option<Vec<Vec<f64>>>,
}

/// Adds `coef * d cos(a, b) / da` to `out`.
fn add_cos_grad(out: &mut [f64], a: &[f64], b: &[f64], coef: f64) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    for ((o, ai), bi) in out.iter_mut().zip(a).zip(b) {
        *o += coef * (bi / (na * nb) - c * ai / (na * na));
    }
}

/// Analytic gradient of [`combined_objective`] with respect to every embedding entry.
pub fn combined_gradient(batch: &BatchEmbeddings) -> Result<ObjectiveGradient, ObjectiveError> {
    batch.validate()?;
    if batch.alpha > 0.0 && batch.declaratives.is_none() {
        return Err(ObjectiveError::MissingDeclaratives);
    }
    let (b, dim, tau) = (batch.size(), batch.dim(), batch.temperature);
    let zeros = || vec![vec![0.0; dim]; b];
    let mut gq = zeros();
    let mut ge = zeros();
    let mut gs = batch.declaratives.as_ref().map(|_| zeros());
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let lp = log_softmax(&logits_row(&batch.queries[i], &batch.evidences, tau));
        // d/dL_ik of the row's contrastive term
        let mut g_l: Vec<f64> = lp.iter().enumerate().map(|(k, l)| l.exp() - if k == i { 1.0 } else { 0.0 }).collect();
        if let (Some(s), true) = (&batch.declaratives, batch.alpha > 0.0) {
            let lq = log_softmax(&logits_row(&s[i], &batch.evidences, tau));
            let kl = kl_from_log_probs(&lp, &lq);
            for k in 0..b {
                let p = lp[k].exp();
                g_l[k] += batch.alpha * p * (lp[k] - lq[k] - kl);
                let g_s = batch.alpha * (lq[k].exp() - p) * scale / tau;
                add_cos_grad(&mut gs.as_mut().unwrap()[i], &s[i], &batch.evidences[k], g_s);
                add_cos_grad(&mut ge[k], &batch.evidences[k], &s[i], g_s);
            }
        }
        for k in 0..b {
            let coef = g_l[k] * scale / tau;
            add_cos_grad(&mut gq[i], &batch.queries[i], &batch.evidences[k], coef);
            add_cos_grad(&mut ge[k], &batch.evidences[k], &batch.queries[i], coef);
        }
    }
    Ok(ObjectiveGradient { queries: gq, evidences: ge, declaratives: gs })
}

impl BatchEmbeddings {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ObjectiveError> {
        self.validate()?;
        let flags = if self.declaratives.is_some() { FLAG_DECLARATIVES } else { 0 };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.size() as u32).to_le_bytes());
        out.extend_from_slice(&self.temperature.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for row in self.queries.iter().chain(&self.evidences).chain(self.declaratives.iter().flatten()) {
            for &x in row {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ObjectiveError> {
        let bad = |m: &str| ObjectiveError::Format(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("short header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
            return Err(bad("unsupported version"));
        }
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let b = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let temperature = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let alpha = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let matrices = if flags & FLAG_DECLARATIVES != 0 { 3 } else { 2 };
        let expected = matrices * b * dim * 4;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(bad(&format!("expected {expected} body bytes, found {}", body.len())));
        }
        let floats: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let mut rows = floats.chunks(dim.max(1)).map(<[f64]>::to_vec);
        let mut take = || (0..b).map(|_| rows.next().unwrap_or_default()).collect::<Vec<_>>();
        let queries = take();
        let evidences = take();
        let declaratives = (matrices == 3).then(&mut take);
        let batch = Self { queries, evidences, declaratives, temperature, alpha };
        batch.validate()?;
        Ok(batch)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ObjectiveError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ObjectiveError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
