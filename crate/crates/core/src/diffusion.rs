//! Masked discrete diffusion over codebook tokens.
//!
//! States are the `K` codebook indices plus an absorbing `MASK = K`.
//! Transition matrices are column-stochastic: `Q[m][n] = q(next = m | prev = n)`.
//! Per step `t` a non-mask token is masked with probability `γ_t = 1/(T−t+1)`,
//! resampled uniformly with total probability `K·β_t`, and kept otherwise,
//! which makes the marginal mask probability after `t` steps exactly `t/T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token indices over `{0..K−1} ∪ {MASK = K}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub codebook_size: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t > codebook_size) {
            return Err(Error::Input(format!(
                "token {bad} exceeds mask index {codebook_size}"
            )));
        }
        Ok(Self {
            tokens,
            codebook_size,
        })
    }

    pub fn all_mask(len: usize, codebook_size: usize) -> Self {
        Self {
            tokens: vec![codebook_size; len],
            codebook_size,
        }
    }

    pub fn mask(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.contains(&self.codebook_size)
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.codebook_size).count()
    }
}

/// Serialized form of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub codebook_size: usize,
    pub uniform_leak: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 100,
            codebook_size: 128,
            uniform_leak: 1.0,
        }
    }
}

/// Dense `(K+1)×(K+1)` row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StateMatrix {
    n: usize,
    data: Vec<f64>,
}

impl StateMatrix {
    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `q(to | from)`.
    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.data[to * self.n + from]
    }

    pub fn column(&self, from: usize) -> Vec<f64> {
        (0..self.n).map(|m| self.get(m, from)).collect()
    }

    pub fn product(&self, rhs: &StateMatrix) -> StateMatrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        crate::tensor::gemm(n, n, n, &self.data, false, &rhs.data, false, &mut data, 0.0);
        StateMatrix { n, data }
    }

    pub fn max_abs_diff(&self, other: &StateMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-step and cumulative transition matrices for `t = 1..=T`.
#[derive(Clone, Debug)]
pub struct TransitionSchedule {
    params: ScheduleParams,
    per_step: Vec<StateMatrix>,
    cumulative: Vec<StateMatrix>,
    identity: StateMatrix,
}

/// Scalars of one step: (stay α, uniform β, mask γ).
pub fn step_coefficients(t: usize, steps: usize, codebook_size: usize, leak: f64) -> (f64, f64, f64) {
    let gamma = 1.0 / (steps - t + 1) as f64;
    let beta = leak / (codebook_size as f64 * steps as f64) * (1.0 - gamma);
    let alpha = (1.0 - gamma) * (1.0 - leak / steps as f64);
    (alpha, beta, gamma)
}

/// Build the schedule. Cumulative matrices are formed by explicit products.
pub fn build_schedule(steps: usize, codebook_size: usize, uniform_leak: f64) -> Result<TransitionSchedule> {
    if steps < 1 {
        return Err(Error::Schedule("need at least one diffusion step".into()));
    }
    if codebook_size < 2 {
        return Err(Error::Schedule("codebook needs at least two entries".into()));
    }
    if !uniform_leak.is_finite() || uniform_leak < 0.0 || uniform_leak > steps as f64 {
        return Err(Error::Schedule(format!(
            "uniform leak {uniform_leak} outside [0, {steps}] makes a negative transition probability"
        )));
    }
    let n = codebook_size + 1;
    let mask = codebook_size;
    let mut per_step = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (alpha, beta, gamma) = step_coefficients(t, steps, codebook_size, uniform_leak);
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
            return Err(Error::Schedule(format!("negative coefficient at step {t}")));
        }
        let mut data = vec![0.0; n * n];
        for from in 0..codebook_size {
            for to in 0..codebook_size {
                data[to * n + from] = beta + if to == from { alpha } else { 0.0 };
            }
            data[mask * n + from] = gamma;
        }
        data[mask * n + mask] = 1.0;
        per_step.push(StateMatrix { n, data });
    }
    let mut cumulative: Vec<StateMatrix> = Vec::with_capacity(steps);
    for q in &per_step {
        let next = match cumulative.last() {
            Some(prev) => q.product(prev),
            None => q.clone(),
        };
        cumulative.push(next);
    }
    Ok(TransitionSchedule {
        params: ScheduleParams {
            steps,
            codebook_size,
            uniform_leak,
        },
        per_step,
        cumulative,
        identity: StateMatrix::identity(n),
    })
}

impl TransitionSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        build_schedule(p.steps, p.codebook_size, p.uniform_leak)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn codebook_size(&self) -> usize {
        self.params.codebook_size
    }

    pub fn mask(&self) -> usize {
        self.params.codebook_size
    }

    /// `Q^t`, `1 ≤ t ≤ T`.
    pub fn step(&self, t: usize) -> &StateMatrix {
        &self.per_step[t - 1]
    }

    /// `Q̄^t = Q^t⋯Q^1`; `Q̄^0` is the identity.
    pub fn cumulative(&self, t: usize) -> &StateMatrix {
        if t == 0 {
            &self.identity
        } else {
            &self.cumulative[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Input(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Probability that a clean token is masked after `t` steps.
    pub fn mask_marginal(&self, t: usize) -> f64 {
        self.cumulative(t).get(self.mask(), 0)
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            if u < p {
                return i;
            }
            u -= p;
        }
    }
    last
}

/// Corrupt clean tokens to step `t` in one draw from `Q̄^t v(d0)`.
pub fn q_sample<R: Rng + ?Sized>(
    d0: &TokenSequence,
    t: usize,
    schedule: &TransitionSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    schedule.check_t(t)?;
    if d0.codebook_size != schedule.codebook_size() {
        return Err(Error::Input("codebook size differs from schedule".into()));
    }
    if d0.has_mask() {
        return Err(Error::Input("clean sequence contains MASK".into()));
    }
    let qbar = schedule.cumulative(t);
    let tokens = d0
        .tokens
        .iter()
        .map(|&x| sample_categorical(&qbar.column(x), rng))
        .collect();
    TokenSequence::new(tokens, d0.codebook_size)
}

/// `q(d^{t−1} | d^t, d^0)` over all `K+1` states, for `1 ≤ t ≤ T`.
pub fn posterior(d_t: usize, d0: usize, t: usize, schedule: &TransitionSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let n = schedule.codebook_size() + 1;
    if d_t >= n || d0 >= n {
        return Err(Error::Input(format!("state out of range ({d_t}, {d0})")));
    }
    let q = schedule.step(t);
    let prev = schedule.cumulative(t - 1);
    let denom = schedule.cumulative(t).get(d_t, d0);
    if !(denom > 0.0) {
        return Err(Error::Support(format!(
            "state {d_t} unreachable from {d0} in {t} steps"
        )));
    }
    let log_denom = denom.ln();
    Ok((0..n)
        .map(|s| {
            let a = q.get(d_t, s);
            let b = prev.get(s, d0);
            if a > 0.0 && b > 0.0 {
                (a.ln() + b.ln() - log_denom).exp()
            } else {
                0.0
            }
        })
        .collect())
}

/// One reverse step: per position, the `p0`-weighted mixture of exact
/// posteriors, then a categorical draw. Positions flagged in `fixed` are
/// copied unchanged.
pub fn reverse_step<R: Rng + ?Sized>(
    d_t: &TokenSequence,
    p0: &[Vec<f64>],
    t: usize,
    schedule: &TransitionSchedule,
    fixed: &[bool],
    rng: &mut R,
) -> Result<TokenSequence> {
    schedule.check_t(t)?;
    let k = schedule.codebook_size();
    if p0.len() != d_t.len() || fixed.len() != d_t.len() {
        return Err(Error::shape(format!(
            "{} tokens, {} distributions, {} flags",
            d_t.len(),
            p0.len(),
            fixed.len()
        )));
    }
    let n = k + 1;
    let mut out = Vec::with_capacity(d_t.len());
    for (pos, (&xt, dist)) in d_t.tokens.iter().zip(p0).enumerate() {
        if fixed[pos] {
            out.push(xt);
            continue;
        }
        if dist.len() != k {
            return Err(Error::shape(format!("p0 row has {} entries, need {k}", dist.len())));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("p0 row {pos} sums to {total}")));
        }
        let mut mix = vec![0.0; n];
        for (x0, &w) in dist.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            match posterior(xt, x0, t, schedule) {
                Ok(post) => {
                    for (m, p) in mix.iter_mut().zip(post) {
                        *m += w * p;
                    }
                }
                Err(Error::Support(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Support(format!(
                "no predicted clean token can produce state {xt} at position {pos}"
            )));
        }
        out.push(sample_categorical(&mix, rng));
    }
    TokenSequence::new(out, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn columns_are_stochastic_and_mask_absorbs() {
        let s = build_schedule(10, 6, 1.0).unwrap();
        for t in 1..=10 {
            for m in [s.step(t), s.cumulative(t)] {
                for from in 0..7 {
                    let col = m.column(from);
                    assert!(col.iter().all(|&p| p >= 0.0));
                    assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                assert_eq!(m.get(6, 6), 1.0);
            }
        }
        for from in 0..6 {
            assert!((s.cumulative(10).get(6, from) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_marginal_is_linear() {
        for u in [0.0, 0.5, 1.0, 3.0] {
            let s = build_schedule(20, 5, u).unwrap();
            for t in 1..=20 {
                for from in 0..5 {
                    let p = s.cumulative(t).get(5, from);
                    assert!((p - t as f64 / 20.0).abs() < 1e-12, "u={u} t={t}");
                }
            }
        }
    }

    #[test]
    fn pure_absorbing_keeps_identity() {
        let s = build_schedule(8, 4, 0.0).unwrap();
        for t in 1..=8 {
            for from in 0..4 {
                for to in 0..4 {
                    if to != from {
                        assert_eq!(s.cumulative(t).get(to, from), 0.0);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d0 = TokenSequence::new(vec![0, 1, 2, 3, 1, 2], 4).unwrap();
        for t in 1..8 {
            let dt = q_sample(&d0, t, &s, &mut rng).unwrap();
            for (a, b) in dt.tokens.iter().zip(&d0.tokens) {
                assert!(*a == 4 || a == b);
            }
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(build_schedule(0, 4, 0.0).is_err());
        assert!(build_schedule(5, 1, 0.0).is_err());
        assert!(build_schedule(5, 4, 6.0).is_err());
        assert!(build_schedule(5, 4, -0.1).is_err());
    }

    #[test]
    fn q_sample_errors_and_terminal() {
        let s = build_schedule(10, 8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let masked = TokenSequence::new(vec![1, 8], 8).unwrap();
        assert!(q_sample(&masked, 3, &s, &mut rng).is_err());
        let d0 = TokenSequence::new(vec![1, 2, 3], 8).unwrap();
        assert!(q_sample(&d0, 0, &s, &mut rng).is_err());
        assert!(q_sample(&d0, 11, &s, &mut rng).is_err());
        assert_eq!(q_sample(&d0, 10, &s, &mut rng).unwrap().mask_count(), 3);
    }

    #[test]
    fn posterior_at_first_step_is_endpoint() {
        let s = build_schedule(5, 4, 1.0).unwrap();
        for x0 in 0..4 {
            for x1 in 0..5 {
                let p = posterior(x1, x0, 1, &s).unwrap();
                for (i, v) in p.iter().enumerate() {
                    let e = if i == x0 { 1.0 } else { 0.0 };
                    assert!((v - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impossible_pair_is_support_error() {
        let s = build_schedule(5, 4, 0.0).unwrap();
        assert!(matches!(posterior(2, 1, 3, &s), Err(Error::Support(_))));
    }

    #[test]
    fn unmasked_position_is_stable_without_leak() {
        let s = build_schedule(10, 6, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dt = TokenSequence::new(vec![3, 6], 6).unwrap();
        let p0 = vec![vec![1.0 / 6.0; 6]; 2];
        for _ in 0..50 {
            let out = reverse_step(&dt, &p0, 5, &s, &[false, false], &mut rng).unwrap();
            assert_eq!(out.tokens[0], 3);
        }
    }

    #[test]
    fn fixed_positions_are_copied() {
        let s = build_schedule(10, 6, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dt = TokenSequence::new(vec![6, 6, 6], 6).unwrap();
        let p0 = vec![vec![1.0 / 6.0; 6]; 3];
        let out = reverse_step(&dt, &p0, 10, &s, &[true, false, false], &mut rng).unwrap();
        assert_eq!(out.tokens[0], 6);
    }

    #[test]
    fn reverse_step_rejects_bad_distributions() {
        let s = build_schedule(10, 4, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dt = TokenSequence::new(vec![2], 4).unwrap();
        let r = reverse_step(&dt, &[vec![0.5, 0.2, 0.0, 0.0]], 4, &s, &[false], &mut rng);
        assert!(matches!(r, Err(Error::Input(_))));
        // all weight on clean tokens that cannot have produced `2`
        let r = reverse_step(&dt, &[vec![1.0, 0.0, 0.0, 0.0]], 4, &s, &[false], &mut rng);
        assert!(matches!(r, Err(Error::Support(_))));
    }
}
