//! Straight-line dense transcription of the continuous actor-critic update,
//! used as an independent oracle for the sparse learner.

#![allow(dead_code, clippy::needless_range_loop, clippy::assign_op_pattern, clippy::redundant_field_names)]

pub struct DenseActorCritic {
    pub w_mu: Vec<f64>,
    pub w_sigma: Vec<f64>,
    pub v: Vec<f64>,
    pub e_mu: Vec<f64>,
    pub e_sigma: Vec<f64>,
    pub e_v: Vec<f64>,
    pub alpha_v: f64,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub gamma: f64,
    pub lambda_w: f64,
    pub lambda_v: f64,
    pub sigma_min: f64,
    pub limit: f64,
    pub use_raw_action: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl DenseActorCritic {
    pub fn new(n: usize, use_raw_action: bool) -> Self {
        let m = 16.0;
        DenseActorCritic {
            w_mu: vec![0.0; n],
            w_sigma: vec![0.0; n],
            v: vec![0.0; n],
            e_mu: vec![0.0; n],
            e_sigma: vec![0.0; n],
            e_v: vec![0.0; n],
            alpha_v: 0.01 / m,
            alpha_mu: 0.005 / m,
            alpha_sigma: 0.005 / m,
            gamma: 0.9,
            lambda_w: 0.3,
            lambda_v: 0.7,
            sigma_min: 0.01,
            limit: 0.05,
            use_raw_action: use_raw_action,
        }
    }

    /// Mean and bounded standard deviation.
    pub fn policy(&self, x: &[f64]) -> (f64, f64) {
        let mu = dot(&self.w_mu, x);
        let mut sigma = dot(&self.w_sigma, x).exp();
        if sigma < self.sigma_min {
            sigma = self.sigma_min;
        }
        (mu, sigma)
    }

    /// One update given a standard normal draw `z`. Returns (a_raw, delta).
    pub fn step(&mut self, x: &[f64], z: f64, r: f64, x_next: &[f64]) -> (f64, f64) {
        let n = x.len();
        let (mu, sigma) = self.policy(x);
        let a_raw = mu + sigma * z;
        let a_exec = if a_raw > self.limit {
            self.limit
        } else if a_raw < -self.limit {
            -self.limit
        } else {
            a_raw
        };
        let a = if self.use_raw_action { a_raw } else { a_exec };

        let delta = r + self.gamma * dot(&self.v, x_next) - dot(&self.v, x);
        for i in 0..n {
            let e = self.lambda_v * self.gamma * self.e_v[i] + x[i];
            self.e_v[i] = if e < 1.0 { e } else { 1.0 };
        }
        for i in 0..n {
            self.v[i] = self.v[i] + self.alpha_v * delta * self.e_v[i];
        }
        for i in 0..n {
            self.e_mu[i] = self.lambda_w * self.e_mu[i] + (a - mu) * x[i];
        }
        for i in 0..n {
            self.w_mu[i] = self.w_mu[i] + self.alpha_mu * delta * self.e_mu[i];
        }
        for i in 0..n {
            self.e_sigma[i] = self.lambda_w * self.e_sigma[i] + ((a - mu) * (a - mu) - sigma * sigma) * x[i];
        }
        for i in 0..n {
            self.w_sigma[i] = self.w_sigma[i] + self.alpha_sigma * delta * self.e_sigma[i];
        }
        (a_raw, delta)
    }
}

/// Largest absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}
