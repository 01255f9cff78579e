//! Order-m Markov DNA with a Dirichlet-drawn transition table.
//!
//! The concentration of the symmetric Dirichlet sets how peaked each
//! transition row is, and therefore the conditional entropy of the chain.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::numeric::Rng;

pub const BASES: [u8; 4] = *b"ACGT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovDnaParams {
    pub order: usize,
    pub concentration: f64,
    pub length: usize,
    pub seed: u64,
}

impl MarkovDnaParams {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.length == 0 {
            return Err(CorpusError::InvalidParams("length must be >= 1".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(CorpusError::InvalidParams(format!("concentration must be > 0, got {}", self.concentration)));
        }
        if self.order > 10 {
            return Err(CorpusError::InvalidParams(format!("order {} too large (max 10)", self.order)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MarkovChain {
    order: usize,
    /// `4^order` rows of 4 transition probabilities.
    rows: Vec<[f64; 4]>,
}

impl MarkovChain {
    /// Draws the transition table from the first part of the seed stream.
    pub fn draw(params: &MarkovDnaParams) -> Result<Self, CorpusError> {
        params.validate()?;
        let mut rng = Rng::stream(params.seed, &[0]);
        let n_ctx = 4usize.pow(params.order as u32);
        let rows = (0..n_ctx).map(|_| dirichlet4(params.concentration, &mut rng)).collect();
        Ok(Self { order: params.order, rows })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.rows
    }

    /// Stationary distribution over contexts.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.rows.len();
        if n == 1 {
            return vec![1.0];
        }
        if n <= 256 {
            if let Some(pi) = self.stationary_direct() {
                return pi;
            }
        }
        // Lazy power iteration: (P + I)/2 has the same stationary law and is aperiodic.
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..200_000 {
            let mut next = vec![0.0; n];
            for (ctx, row) in self.rows.iter().enumerate() {
                next[ctx] += 0.5 * pi[ctx];
                for (s, p) in row.iter().enumerate() {
                    next[(ctx * 4 + s) % n] += 0.5 * pi[ctx] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Solves `pi (P - I) = 0, sum(pi) = 1` by Gaussian elimination.
    fn stationary_direct(&self) -> Option<Vec<f64>> {
        let n = self.rows.len();
        // a[i][j]: equation i over unknown j; row n-1 replaced by normalization
        let mut a = vec![vec![0.0; n + 1]; n];
        for (ctx, row) in self.rows.iter().enumerate() {
            for (s, p) in row.iter().enumerate() {
                a[(ctx * 4 + s) % n][ctx] += p;
            }
        }
        for (i, eq) in a.iter_mut().enumerate() {
            eq[i] -= 1.0;
        }
        for j in 0..n {
            a[n - 1][j] = 1.0;
        }
        a[n - 1][n] = 1.0;
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
            if a[piv][col].abs() < 1e-300 {
                return None;
            }
            a.swap(col, piv);
            for r in 0..n {
                if r != col && a[r][col] != 0.0 {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let pi: Vec<f64> = (0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect();
        let s: f64 = pi.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return None;
        }
        Some(pi.into_iter().map(|x| x / s).collect())
    }

    /// Entropy rate in bits/symbol: `sum_ctx pi(ctx) H(row_ctx)`.
    pub fn conditional_entropy(&self) -> f64 {
        let pi = self.stationary();
        pi.iter().zip(&self.rows).map(|(w, row)| w * row_entropy(row)).sum()
    }

    /// Samples `length` bases; the first `order` bases are uniform.
    pub fn sample(&self, length: usize, rng: &mut Rng) -> String {
        let n_ctx = self.rows.len();
        let mut out = Vec::with_capacity(length);
        let mut ctx = 0usize;
        for i in 0..length {
            let s = if i < self.order {
                rng.below(4)
            } else {
                let u = rng.uniform();
                let row = &self.rows[ctx];
                let mut acc = 0.0;
                let mut pick = 3;
                for (s, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = s;
                        break;
                    }
                }
                pick
            };
            out.push(BASES[s]);
            if n_ctx > 1 {
                ctx = (ctx * 4 + s) % n_ctx;
            }
        }
        String::from_utf8(out).expect("ascii")
    }
}

fn row_entropy(row: &[f64; 4]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

/// Symmetric Dirichlet(alpha) over 4 outcomes, computed in log space so that
/// tiny concentrations do not underflow to an all-zero row.
fn dirichlet4(alpha: f64, rng: &mut Rng) -> [f64; 4] {
    let mut logs = [0.0; 4];
    for l in logs.iter_mut() {
        *l = if alpha >= 1.0 {
            Gamma::new(alpha, 1.0).expect("valid gamma").sample(rng).max(f64::MIN_POSITIVE).ln()
        } else {
            // G(a) = G(a+1) * U^(1/a)
            let g = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma").sample(rng).max(f64::MIN_POSITIVE);
            g.ln() + rng.uniform_open0().ln() / alpha
        };
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut row = [0.0; 4];
    let mut sum = 0.0;
    for (r, l) in row.iter_mut().zip(&logs) {
        *r = (l - max).exp();
        sum += *r;
    }
    for r in row.iter_mut() {
        *r /= sum;
    }
    row
}

/// Generates a DNA sequence from a freshly drawn chain. Pure in `params`.
pub fn gen_markov_dna(params: &MarkovDnaParams) -> Result<String, CorpusError> {
    let chain = MarkovChain::draw(params)?;
    let mut rng = Rng::stream(params.seed, &[1]);
    Ok(chain.sample(params.length, &mut rng))
}
