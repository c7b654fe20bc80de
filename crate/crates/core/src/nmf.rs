//! Unbiased non-negative matrix factorization trained with regularized
//! multiplicative updates.
//!
//! Each epoch accumulates numerators and denominators for every observed
//! (user, item) pair using the factors as they stood at the start of the
//! epoch, then rescales all user and item factors at once:
//!
//! ```text
//! P[u,f] <- P[u,f] * sum_i Q[i,f] r_ui / (sum_i Q[i,f] rhat_ui + |I_u| reg_pu P[u,f])
//! Q[i,f] <- Q[i,f] * sum_u P[u,f] r_ui / (sum_u P[u,f] rhat_ui + |U_i| reg_qi Q[i,f])
//! ```
//!
//! Observations are sorted before training so the accumulation order, and
//! therefore the fitted factors, do not depend on input order.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{MovieId, UserId};
use crate::rng;

/// Denominator floor.
const EPS: f64 = 1e-12;

pub const RATING_CLIP: (f64, f64) = (0.5, 5.0);
pub const CHOICE_CLIP: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfConfig {
    pub n_factors: usize,
    pub n_epochs: usize,
    pub reg_pu: f64,
    pub reg_qi: f64,
    pub init_low: f64,
    pub init_high: f64,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig { n_factors: 15, n_epochs: 10, reg_pu: 0.06, reg_qi: 0.06, init_low: 0.0, init_high: 1.0, seed: 0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NmfError {
    #[error("observation for user {user} item {item} has negative or non-finite value {value}")]
    NegativeObservation { user: UserId, item: MovieId, value: f64 },
    #[error("no observations to train on")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed model: {0}")]
    Malformed(String),
}

impl NmfConfig {
    pub fn validate(&self) -> Result<(), NmfError> {
        let bad = |m: &str| Err(NmfError::InvalidConfig(m.to_string()));
        if self.n_factors == 0 {
            return bad("n_factors must be at least 1");
        }
        if !(self.reg_pu >= 0.0 && self.reg_qi >= 0.0) {
            return bad("regularization must be non-negative");
        }
        if !(self.init_low >= 0.0 && self.init_high > self.init_low && self.init_high.is_finite()) {
            return bad("init range must satisfy 0 <= init_low < init_high");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub user: UserId,
    pub item: MovieId,
    pub value: f64,
}

/// Fitted factors. `p` and `q` are row-major `n_users x k` and
/// `n_items x k` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorModelLayout", into = "FactorModelLayout")]
pub struct FactorModel {
    k: usize,
    users: Vec<UserId>,
    items: Vec<MovieId>,
    user_index: HashMap<UserId, usize>,
    item_index: HashMap<MovieId, usize>,
    p: Vec<f64>,
    q: Vec<f64>,
    pub global_mean: f64,
}

/// On-disk JSON layout: row ids plus row-major factor arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FactorModelLayout {
    k: usize,
    users: Vec<UserId>,
    items: Vec<MovieId>,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    global_mean: f64,
}

impl From<FactorModel> for FactorModelLayout {
    fn from(m: FactorModel) -> Self {
        FactorModelLayout {
            k: m.k,
            users: m.users,
            items: m.items,
            user_factors: m.p,
            item_factors: m.q,
            global_mean: m.global_mean,
        }
    }
}

impl TryFrom<FactorModelLayout> for FactorModel {
    type Error = NmfError;
    fn try_from(l: FactorModelLayout) -> Result<Self, NmfError> {
        FactorModel::from_parts(l.k, l.users, l.items, l.user_factors, l.item_factors, l.global_mean)
    }
}

/// A prediction, with `imputed` set when the user or item was never seen in
/// training and the training mean was substituted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairVerdict {
    A,
    B,
    Tie,
}

impl FactorModel {
    pub fn from_parts(
        k: usize,
        users: Vec<UserId>,
        items: Vec<MovieId>,
        p: Vec<f64>,
        q: Vec<f64>,
        global_mean: f64,
    ) -> Result<Self, NmfError> {
        if k == 0 {
            return Err(NmfError::Malformed("k must be at least 1".into()));
        }
        if p.len() != users.len() * k || q.len() != items.len() * k {
            return Err(NmfError::Malformed("factor array length does not match index size".into()));
        }
        if p.iter().chain(&q).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NmfError::Malformed("factors must be finite and non-negative".into()));
        }
        let user_index: HashMap<UserId, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_index: HashMap<MovieId, usize> = items.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        if user_index.len() != users.len() || item_index.len() != items.len() {
            return Err(NmfError::Malformed("duplicate ids in index".into()));
        }
        Ok(FactorModel { k, users, items, user_index, item_index, p, q, global_mean })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn items(&self) -> &[MovieId] {
        &self.items
    }

    pub fn user_factors(&self, user: UserId) -> Option<&[f64]> {
        self.user_index.get(&user).map(|&u| &self.p[u * self.k..(u + 1) * self.k])
    }

    pub fn item_factors(&self, item: MovieId) -> Option<&[f64]> {
        self.item_index.get(&item).map(|&i| &self.q[i * self.k..(i + 1) * self.k])
    }

    fn dot(&self, u: usize, i: usize) -> f64 {
        let k = self.k;
        self.p[u * k..(u + 1) * k].iter().zip(&self.q[i * k..(i + 1) * k]).map(|(a, b)| a * b).sum()
    }

    /// Raw dot product, or `None` if either side is unknown.
    pub fn raw(&self, user: UserId, item: MovieId) -> Option<f64> {
        let u = *self.user_index.get(&user)?;
        let i = *self.item_index.get(&item)?;
        Some(self.dot(u, i))
    }

    pub fn predict(&self, user: UserId, item: MovieId, clip: (f64, f64)) -> Estimate {
        match self.raw(user, item) {
            Some(v) => Estimate { value: v.clamp(clip.0, clip.1), imputed: false },
            None => Estimate { value: self.global_mean, imputed: true },
        }
    }

    pub fn predict_pair(&self, user: UserId, a: MovieId, b: MovieId, clip: (f64, f64)) -> PairVerdict {
        let va = self.predict(user, a, clip).value;
        let vb = self.predict(user, b, clip).value;
        if va > vb {
            PairVerdict::A
        } else if vb > va {
            PairVerdict::B
        } else {
            PairVerdict::Tie
        }
    }

    /// Root-mean-square error of the unclipped dot product over `obs`.
    /// Observations with unknown ids are skipped.
    pub fn training_rmse(&self, obs: &[Observation]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for o in obs {
            if let Some(v) = self.raw(o.user, o.item) {
                sum += (v - o.value).powi(2);
                n += 1;
            }
        }
        if n == 0 {
            return 0.0;
        }
        (sum / n as f64).sqrt()
    }

    fn indexed(&self, obs: &[Observation]) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<(usize, usize, f64)> = obs
            .iter()
            .filter_map(|o| Some((*self.user_index.get(&o.user)?, *self.item_index.get(&o.item)?, o.value)))
            .collect();
        out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        out
    }

    /// Runs `epochs` multiplicative-update epochs over `obs` in place.
    pub fn train(&mut self, obs: &[Observation], reg_pu: f64, reg_qi: f64, epochs: usize) {
        let indexed = self.indexed(obs);
        let mut user_count = vec![0usize; self.users.len()];
        let mut item_count = vec![0usize; self.items.len()];
        for &(u, i, _) in &indexed {
            user_count[u] += 1;
            item_count[i] += 1;
        }
        for _ in 0..epochs {
            self.epoch(&indexed, &user_count, &item_count, reg_pu, reg_qi);
        }
    }

    fn epoch(&mut self, obs: &[(usize, usize, f64)], user_count: &[usize], item_count: &[usize], reg_pu: f64, reg_qi: f64) {
        let k = self.k;
        let mut user_num = vec![0.0; self.p.len()];
        let mut user_den = vec![0.0; self.p.len()];
        let mut item_num = vec![0.0; self.q.len()];
        let mut item_den = vec![0.0; self.q.len()];
        for &(u, i, r) in obs {
            let est = self.dot(u, i);
            for f in 0..k {
                let (pu, qi) = (self.p[u * k + f], self.q[i * k + f]);
                user_num[u * k + f] += qi * r;
                user_den[u * k + f] += qi * est;
                item_num[i * k + f] += pu * r;
                item_den[i * k + f] += pu * est;
            }
        }
        for u in 0..self.users.len() {
            if user_count[u] == 0 {
                continue;
            }
            let reg = user_count[u] as f64 * reg_pu;
            for f in 0..k {
                let idx = u * k + f;
                let den = (user_den[idx] + reg * self.p[idx]).max(EPS);
                self.p[idx] *= user_num[idx] / den;
            }
        }
        for i in 0..self.items.len() {
            if item_count[i] == 0 {
                continue;
            }
            let reg = item_count[i] as f64 * reg_qi;
            for f in 0..k {
                let idx = i * k + f;
                let den = (item_den[idx] + reg * self.q[idx]).max(EPS);
                self.q[idx] *= item_num[idx] / den;
            }
        }
    }
}

fn check_observations(obs: &[Observation]) -> Result<(), NmfError> {
    if obs.is_empty() {
        return Err(NmfError::EmptyTrainingSet);
    }
    if let Some(o) = obs.iter().find(|o| !(o.value.is_finite() && o.value >= 0.0)) {
        return Err(NmfError::NegativeObservation { user: o.user, item: o.item, value: o.value });
    }
    Ok(())
}

/// Seeded uniform initialization over the sorted set of users and items in
/// `obs`.
pub fn initialize(obs: &[Observation], config: &NmfConfig) -> Result<FactorModel, NmfError> {
    config.validate()?;
    check_observations(obs)?;
    let mut users: Vec<UserId> = obs.iter().map(|o| o.user).collect();
    users.sort();
    users.dedup();
    let mut items: Vec<MovieId> = obs.iter().map(|o| o.item).collect();
    items.sort();
    items.dedup();
    let k = config.n_factors;
    let mut rng = rng::stream(config.seed, &[rng::tag("nmf-init")]);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(config.init_low..config.init_high)).collect() };
    let p = draw(users.len() * k);
    let q = draw(items.len() * k);
    let global_mean = obs.iter().map(|o| o.value).sum::<f64>() / obs.len() as f64;
    FactorModel::from_parts(k, users, items, p, q, global_mean)
}

pub fn fit(obs: &[Observation], config: &NmfConfig) -> Result<FactorModel, NmfError> {
    let mut model = initialize(obs, config)?;
    model.train(obs, config.reg_pu, config.reg_qi, config.n_epochs);
    Ok(model)
}

/// Implicit-feedback variant: seen pairs are labeled 1.0, sampled negatives
/// 0.0. A pair listed as both seen and negative is treated as seen.
pub fn fit_choice(
    seen: &[(UserId, MovieId)],
    negatives: &[(UserId, MovieId)],
    config: &NmfConfig,
) -> Result<FactorModel, NmfError> {
    if seen.is_empty() {
        return Err(NmfError::EmptyTrainingSet);
    }
    let positive: std::collections::HashSet<(UserId, MovieId)> = seen.iter().copied().collect();
    let mut obs: Vec<Observation> =
        positive.iter().map(|&(user, item)| Observation { user, item, value: 1.0 }).collect();
    let mut neg: Vec<(UserId, MovieId)> = negatives.iter().copied().filter(|p| !positive.contains(p)).collect();
    neg.sort();
    neg.dedup();
    obs.extend(neg.into_iter().map(|(user, item)| Observation { user, item, value: 0.0 }));
    obs.sort_by(|a, b| (a.user, a.item).cmp(&(b.user, b.item)));
    fit(&obs, config)
}
