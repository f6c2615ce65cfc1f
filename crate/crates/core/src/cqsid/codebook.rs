use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::Tensor;
use crate::{Error, Result};

/// One quantization level: code vectors plus EMA bookkeeping and usage
/// counters over a sliding window of recent batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub vectors: Tensor,
    pub decay: f64,
    /// Laplace-smoothed decayed assignment counts.
    pub ema_counts: Vec<f64>,
    /// Decayed sums of assigned residuals.
    pub ema_sums: Tensor,
    /// Assignments per code within the window.
    pub usage: Vec<u64>,
    /// Window length in batches; 0 keeps counting forever.
    pub window: usize,
    history: VecDeque<Vec<u64>>,
    /// Batches seen since each code was created or restarted.
    age: Vec<usize>,
}

impl Codebook {
    pub fn new(level: usize, vectors: Tensor, decay: f64) -> Result<Self> {
        if !(1..=3).contains(&level) {
            return Err(Error::Config(format!("codebook level {level} outside 1..=3")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay {decay} outside (0, 1)")));
        }
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        let k = vectors.rows();
        Ok(Self {
            level,
            ema_sums: vectors.clone(),
            vectors,
            decay,
            ema_counts: vec![1.0; k],
            usage: vec![0; k],
            window: 0,
            history: VecDeque::new(),
            age: vec![0; k],
        })
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    /// True once a full window of batches has been recorded.
    pub fn window_full(&self) -> bool {
        self.window == 0 || self.history.len() >= self.window
    }

    fn record(&mut self, counts: &[usize]) {
        for (u, &n) in self.usage.iter_mut().zip(counts) {
            *u += n as u64;
        }
        for a in &mut self.age {
            *a += 1;
        }
        if self.window == 0 {
            return;
        }
        self.history.push_back(counts.iter().map(|&n| n as u64).collect());
        while self.history.len() > self.window {
            let old = self.history.pop_front().expect("non-empty history");
            for (u, o) in self.usage.iter_mut().zip(old) {
                *u -= o;
            }
        }
    }

    fn forget(&mut self, j: usize) {
        self.usage[j] = 0;
        self.age[j] = 0;
        for h in &mut self.history {
            h[j] = 0;
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn code(&self, j: usize) -> &[f64] {
        self.vectors.row_slice(j)
    }

    fn check_dim(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.dim() {
            return Err(Error::shape(
                "codebook",
                format!("residual of dim {} against level-{} codes of dim {}", r.len(), self.level, self.dim()),
            ));
        }
        Ok(())
    }

    /// Index of the closest code by squared distance; smallest index on ties.
    pub fn nearest(&self, r: &[f64]) -> Result<usize> {
        self.check_dim(r)?;
        let mut best = (f64::INFINITY, 0);
        for j in 0..self.size() {
            let d: f64 = self.code(j).iter().zip(r).map(|(e, x)| (x - e) * (x - e)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        Ok(best.1)
    }
}

/// Level-1 index: the category when known, nearest code otherwise.
pub fn quantize_level1(codebook: &Codebook, r0: &[f64], category: Option<u32>) -> Result<usize> {
    codebook.check_dim(r0)?;
    match category {
        Some(c) if c as usize >= codebook.size() => Err(Error::OutOfRange(format!(
            "category {c} does not fit a level-1 codebook of {} codes",
            codebook.size()
        ))),
        Some(c) => Ok(c as usize),
        None => codebook.nearest(r0),
    }
}

/// Nearest-code index and the residual left after subtracting that code.
pub fn quantize_level(codebook: &Codebook, r: &[f64]) -> Result<(usize, Vec<f64>)> {
    let k = codebook.nearest(r)?;
    let next = r.iter().zip(codebook.code(k)).map(|(x, e)| x - e).collect();
    Ok((k, next))
}

/// Moves every assigned code toward the mean of its assigned residuals:
/// `e_j <- decay * e_j + (1 - decay) * mean_j`. Unassigned codes keep their
/// vectors. Usage counters and the smoothed accumulators are updated too.
pub fn ema_update(codebook: &mut Codebook, residuals: &Tensor, indices: &[usize]) -> Result<()> {
    let (k, d) = (codebook.size(), codebook.dim());
    if residuals.rows() != indices.len() || (residuals.rows() > 0 && residuals.cols() != d) {
        return Err(Error::shape(
            "ema_update",
            format!("{:?} residuals for {} indices of dim {d}", residuals.shape(), indices.len()),
        ));
    }
    if let Some(&bad) = indices.iter().find(|&&j| j >= k) {
        return Err(Error::OutOfRange(format!("code index {bad} of {k}")));
    }
    let mut counts = vec![0usize; k];
    let mut sums = Tensor::zeros(k, d);
    for (i, &j) in indices.iter().enumerate() {
        counts[j] += 1;
        for (s, r) in sums.row_slice_mut(j).iter_mut().zip(residuals.row_slice(i)) {
            *s += r;
        }
    }
    let lam = codebook.decay;
    for j in 0..k {
        let n = counts[j];
        // bookkeeping accumulators decay for every code
        codebook.ema_counts[j] = lam * codebook.ema_counts[j] + (1.0 - lam) * n as f64;
        for (acc, s) in codebook.ema_sums.row_slice_mut(j).iter_mut().zip(sums.row_slice(j)) {
            *acc = lam * *acc + (1.0 - lam) * s;
        }
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        let sum_row = sums.row_slice(j).to_vec();
        for (e, s) in codebook.vectors.row_slice_mut(j).iter_mut().zip(sum_row) {
            *e = lam * *e + (1.0 - lam) * (s * inv);
        }
    }
    codebook.record(&counts);
    Ok(())
}

/// Replaces every code with fewer than `threshold` uses in the window by a
/// randomly drawn row of `recent`, skipping indices below `reserved`. Does
/// nothing until the window is full; a code is only eligible once it has
/// been live for a whole window. Returns the number of restarts.
pub fn restart_dead_codes<R: Rng + ?Sized>(
    codebook: &mut Codebook,
    recent: &Tensor,
    threshold: u64,
    reserved: usize,
    rng: &mut R,
) -> Result<usize> {
    if recent.rows() == 0 || !codebook.window_full() {
        return Ok(0);
    }
    if recent.cols() != codebook.dim() {
        return Err(Error::shape("restart_dead_codes", format!("recent {:?} vs dim {}", recent.shape(), codebook.dim())));
    }
    let mut restarted = 0;
    for j in reserved.min(codebook.size())..codebook.size() {
        if codebook.usage[j] >= threshold || codebook.age[j] < codebook.window {
            continue;
        }
        let pick = rng.random_range(0..recent.rows());
        let row = recent.row_slice(pick).to_vec();
        codebook.vectors.row_slice_mut(j).copy_from_slice(&row);
        codebook.ema_sums.row_slice_mut(j).copy_from_slice(&row);
        codebook.ema_counts[j] = 1.0;
        codebook.forget(j);
        restarted += 1;
    }
    Ok(restarted)
}
