//! Residual vector quantization.
//!
//! Stage `i` picks the codeword nearest (squared Euclidean, ties to the lowest
//! index) to the residual left by stages `0..i`. Codebooks created by this crate
//! keep row 0 pinned at the zero vector, so a stage can always pass the residual
//! through unchanged and the per-frame residual energy never grows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Continuous latent frames, `[frames x dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl LatentSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(Error::invalid(format!(
                "latent of {frames}x{dim} needs {} values, got {}",
                frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            values: vec![0.0; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid(format!(
                "latent window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(Self {
            frames: len,
            dim: self.dim,
            values: self.values[start * self.dim..(start + len) * self.dim].to_vec(),
        })
    }

    /// Mean of squared entries.
    pub fn mean_square(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / self.values.len() as f64
    }
}

/// Per-frame stacks of codebook indices, `[frames x Q]` row-major (frame-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    frames: usize,
    num_quantizers: usize,
    indices: Vec<u32>,
}

impl TokenSequence {
    pub fn new(frames: usize, num_quantizers: usize, indices: Vec<u32>) -> Result<Self> {
        if num_quantizers == 0 {
            return Err(Error::invalid("token sequence needs at least one quantizer"));
        }
        if indices.len() != frames * num_quantizers {
            return Err(Error::invalid(format!(
                "token sequence of {frames}x{num_quantizers} needs {} indices, got {}",
                frames * num_quantizers,
                indices.len()
            )));
        }
        Ok(Self {
            frames,
            num_quantizers,
            indices,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_quantizers(&self) -> usize {
        self.num_quantizers
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, frame: usize, stage: usize) -> u32 {
        self.indices[frame * self.num_quantizers + stage]
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid(format!(
                "token window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let q = self.num_quantizers;
        Self::new(len, q, self.indices[start * q..(start + len) * q].to_vec())
    }

    pub fn check_bounds(&self, codebook_size: usize) -> Result<()> {
        match self.indices.iter().position(|&i| i as usize >= codebook_size) {
            Some(pos) => Err(Error::Corruption(format!(
                "token {} at frame {} stage {} is outside a codebook of {codebook_size}",
                self.indices[pos],
                pos / self.num_quantizers,
                pos % self.num_quantizers
            ))),
            None => Ok(()),
        }
    }
}

/// One `[codebook_size x dim]` table per quantizer stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    codebook_size: usize,
    dim: usize,
    tables: Vec<Vec<f32>>,
}

impl Codebooks {
    pub fn new(codebook_size: usize, dim: usize, tables: Vec<Vec<f32>>) -> Result<Self> {
        if tables.is_empty() || codebook_size == 0 || dim == 0 {
            return Err(Error::invalid("codebooks need at least one non-empty table"));
        }
        if let Some(bad) = tables.iter().position(|t| t.len() != codebook_size * dim) {
            return Err(Error::invalid(format!(
                "codebook table {bad} has {} values, expected {}",
                tables[bad].len(),
                codebook_size * dim
            )));
        }
        Ok(Self {
            codebook_size,
            dim,
            tables,
        })
    }

    /// Gaussian tables with stage scales halving per stage; row 0 of each table is zero.
    pub fn random(num_quantizers: usize, codebook_size: usize, dim: usize, scale: f32, rng: &mut ChaCha8Rng) -> Self {
        let tables = (0..num_quantizers)
            .map(|stage| {
                let s = scale * 0.5f32.powi(stage as i32);
                let mut table: Vec<f32> = (0..codebook_size * dim)
                    .map(|_| standard_normal(rng) * s)
                    .collect();
                table[..dim].iter_mut().for_each(|v| *v = 0.0);
                table
            })
            .collect();
        Self {
            codebook_size,
            dim,
            tables,
        }
    }

    pub fn num_quantizers(&self) -> usize {
        self.tables.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self, stage: usize) -> &[f32] {
        &self.tables[stage]
    }

    pub fn tables(&self) -> &[Vec<f32>] {
        &self.tables
    }

    pub(crate) fn table_mut(&mut self, stage: usize) -> &mut [f32] {
        &mut self.tables[stage]
    }

    pub fn row(&self, stage: usize, index: usize) -> &[f32] {
        &self.tables[stage][index * self.dim..(index + 1) * self.dim]
    }

    /// Whether any table holds two bit-identical rows.
    pub fn has_duplicate_rows(&self) -> bool {
        self.tables.iter().any(|table| {
            let mut rows: Vec<Vec<u32>> = table
                .chunks(self.dim)
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows.windows(2).any(|w| w[0] == w[1])
        })
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Index and squared distance of the nearest row of `table` to `x`.
pub fn nearest_codeword(table: &[f32], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, row) in table.chunks_exact(dim).enumerate() {
        let mut d = 0.0f64;
        for (a, b) in x.iter().zip(row) {
            let diff = *a as f64 - *b as f64;
            d += diff * diff;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    pub tokens: TokenSequence,
    /// Sum of the selected codewords over all stages.
    pub quantized: LatentSequence,
    /// Mean squared residual after each stage.
    pub residual_norms: Vec<f64>,
    /// Residual entering each stage.
    pub stage_inputs: Vec<LatentSequence>,
    /// Codewords selected at each stage.
    pub stage_outputs: Vec<LatentSequence>,
}

pub fn quantize(latent: &LatentSequence, books: &Codebooks) -> Result<QuantizeOutput> {
    if latent.frames() == 0 {
        return Err(Error::invalid("cannot quantize an empty latent sequence"));
    }
    if latent.dim() != books.dim() {
        return Err(Error::invalid(format!(
            "latent width {} does not match codeword width {}",
            latent.dim(),
            books.dim()
        )));
    }
    let (frames, dim, q) = (latent.frames(), latent.dim(), books.num_quantizers());
    let mut residual = latent.values().to_vec();
    let mut indices = vec![0u32; frames * q];
    let mut residual_norms = Vec::with_capacity(q);
    let mut stage_inputs = Vec::with_capacity(q);
    let mut stage_outputs = Vec::with_capacity(q);
    for stage in 0..q {
        stage_inputs.push(LatentSequence {
            frames,
            dim,
            values: residual.clone(),
        });
        let table = books.table(stage);
        let mut selected = Vec::with_capacity(frames * dim);
        for t in 0..frames {
            let r = &mut residual[t * dim..(t + 1) * dim];
            let (idx, _) = nearest_codeword(table, dim, r);
            indices[t * q + stage] = idx as u32;
            let code = books.row(stage, idx);
            for (rv, cv) in r.iter_mut().zip(code) {
                *rv -= cv;
            }
            selected.extend_from_slice(code);
        }
        stage_outputs.push(LatentSequence {
            frames,
            dim,
            values: selected,
        });
        residual_norms.push(
            residual.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / residual.len() as f64,
        );
    }
    let tokens = TokenSequence::new(frames, q, indices)?;
    let quantized = dequantize(&tokens, books)?;
    Ok(QuantizeOutput {
        tokens,
        quantized,
        residual_norms,
        stage_inputs,
        stage_outputs,
    })
}

pub fn dequantize(tokens: &TokenSequence, books: &Codebooks) -> Result<LatentSequence> {
    if tokens.num_quantizers() != books.num_quantizers() {
        return Err(Error::Incompatible(format!(
            "tokens carry {} stages, codebooks have {}",
            tokens.num_quantizers(),
            books.num_quantizers()
        )));
    }
    tokens.check_bounds(books.codebook_size())?;
    let dim = books.dim();
    let mut values = vec![0.0f32; tokens.frames() * dim];
    for t in 0..tokens.frames() {
        let out = &mut values[t * dim..(t + 1) * dim];
        for stage in 0..tokens.num_quantizers() {
            let code = books.row(stage, tokens.get(t, stage) as usize);
            for (o, c) in out.iter_mut().zip(code) {
                *o += c;
            }
        }
    }
    Ok(LatentSequence {
        frames: tokens.frames(),
        dim,
        values,
    })
}

/// Exponential-moving-average codebook learning with dead-code reseeding.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEma {
    pub decay: f32,
    pub dead_threshold: f32,
    pub initialized: bool,
    /// Smoothed assignment counts, one vector per stage.
    pub cluster_size: Vec<Vec<f32>>,
    /// Smoothed sums of assigned residuals, one table per stage.
    pub embed_sum: Vec<Vec<f32>>,
}

const EMA_EPS: f32 = 1e-5;

impl CodebookEma {
    pub fn new(books: &Codebooks, decay: f32, dead_threshold: f32) -> Self {
        Self {
            decay,
            dead_threshold,
            initialized: false,
            cluster_size: vec![vec![1.0; books.codebook_size()]; books.num_quantizers()],
            embed_sum: books.tables().to_vec(),
        }
    }

    fn reseed_row(table: &mut [f32], dim: usize, row: usize, source: &LatentSequence, rng: &mut ChaCha8Rng) {
        let pick = rng.random_range(0..source.frames());
        let jitter = 1e-3 * (source.mean_square().sqrt() as f32).max(1e-3);
        for (j, v) in table[row * dim..(row + 1) * dim].iter_mut().enumerate() {
            *v = source.row(pick)[j] + jitter * standard_normal(rng);
        }
    }

    /// Seeds every non-zero row of each stage from that stage's batch residuals.
    pub fn initialize_from(&mut self, books: &mut Codebooks, stage_inputs: &[LatentSequence], rng: &mut ChaCha8Rng) {
        let dim = books.dim();
        for (stage, input) in stage_inputs.iter().enumerate() {
            let table = books.table_mut(stage);
            for row in 1..table.len() / dim {
                Self::reseed_row(table, dim, row, input, rng);
            }
            self.embed_sum[stage] = table.to_vec();
            self.cluster_size[stage].iter_mut().for_each(|c| *c = 1.0);
        }
        self.initialized = true;
    }

    /// One EMA step from the residuals each stage saw and the indices it chose.
    /// Returns the number of reseeded codewords.
    pub fn update(
        &mut self,
        books: &mut Codebooks,
        stage_inputs: &[LatentSequence],
        tokens: &TokenSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        if stage_inputs.len() != books.num_quantizers() || tokens.num_quantizers() != books.num_quantizers() {
            return Err(Error::invalid("EMA update needs one residual set per stage"));
        }
        let (size, dim) = (books.codebook_size(), books.dim());
        let decay = self.decay;
        let mut reseeded = 0;
        for (stage, input) in stage_inputs.iter().enumerate() {
            let mut counts = vec![0.0f32; size];
            let mut sums = vec![0.0f32; size * dim];
            for t in 0..tokens.frames() {
                let idx = tokens.get(t, stage) as usize;
                counts[idx] += 1.0;
                for (s, v) in sums[idx * dim..(idx + 1) * dim].iter_mut().zip(input.row(t)) {
                    *s += v;
                }
            }
            let cs = &mut self.cluster_size[stage];
            for (c, n) in cs.iter_mut().zip(&counts) {
                *c = decay * *c + (1.0 - decay) * n;
            }
            for (e, s) in self.embed_sum[stage].iter_mut().zip(&sums) {
                *e = decay * *e + (1.0 - decay) * s;
            }
            let total: f32 = cs.iter().sum();
            let table = books.table_mut(stage);
            // Row 0 stays the zero codeword.
            for row in 1..size {
                let smoothed = (cs[row] + EMA_EPS) / (total + size as f32 * EMA_EPS) * total;
                if cs[row] < self.dead_threshold {
                    Self::reseed_row(table, dim, row, input, rng);
                    self.embed_sum[stage][row * dim..(row + 1) * dim]
                        .copy_from_slice(&table[row * dim..(row + 1) * dim]);
                    cs[row] = 1.0;
                    reseeded += 1;
                } else {
                    for j in 0..dim {
                        table[row * dim + j] = self.embed_sum[stage][row * dim + j] / smoothed;
                    }
                }
            }
        }
        Ok(reseeded)
    }
}
