//! Factorized personalized Markov chains trained with BPR.
//!
//! `x(u, l, i) = <U_u, IU_i> + <LI_l, IL_i>` where `l` is the user's last item.
//! Training minimizes, per (user, last, positive, negative) sample,
//! `-ln sigmoid(x_pos - x_neg)` plus an L2 penalty on the rows it touches.
//! Within a minibatch parameters are frozen and per-sample gradients summed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Recommender, TrainingData};
use crate::catalog::ItemId;
use crate::error::{Error, Result};
use crate::seed;

const MAGIC: &[u8; 8] = b"FPMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpmcParams {
    pub dim: usize,
    pub learning_rate: f64,
    pub reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for FpmcParams {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 1e-2,
            reg: 1e-4,
            epochs: 30,
            batch_size: 128,
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    User,
    ItemUser,
    LastItem,
    ItemLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub last: ItemId,
    pub pos: ItemId,
    pub neg: ItemId,
}

/// Sparse gradient keyed by factor row.
pub type Gradient = BTreeMap<(Factor, usize), Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Fpmc {
    dim: usize,
    num_items: usize,
    params: FpmcParams,
    user_index: BTreeMap<String, usize>,
    user_ids: Vec<String>,
    u: Vec<f64>,
    iu: Vec<f64>,
    li: Vec<f64>,
    il: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Fpmc {
    /// Randomly initialized model over the users in `data`.
    pub fn init(data: &TrainingData, params: &FpmcParams) -> Result<Self> {
        if params.dim == 0 || data.num_items == 0 {
            return Err(Error::Precondition("fpmc needs dim > 0 and at least one item".into()));
        }
        let user_ids: Vec<String> = data.sequences.iter().map(|(u, _)| u.clone()).collect();
        let user_index: BTreeMap<String, usize> =
            user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        if user_index.len() != user_ids.len() {
            return Err(Error::Precondition("duplicate user ids in training data".into()));
        }
        let normal = Normal::new(0.0, params.init_std).map_err(|e| Error::Precondition(e.to_string()))?;
        let mut rng = seed::rng(params.seed, &["fpmc", "init"]);
        let mut draw = |n: usize| -> Vec<f64> { (0..n * params.dim).map(|_| normal.sample(&mut rng)).collect() };
        let u = draw(user_ids.len());
        let iu = draw(data.num_items);
        let li = draw(data.num_items);
        let il = draw(data.num_items);
        Ok(Self {
            dim: params.dim,
            num_items: data.num_items,
            params: *params,
            user_index,
            user_ids,
            u,
            iu,
            li,
            il,
            epoch_losses: Vec::new(),
        })
    }

    pub fn train(data: &TrainingData, params: &FpmcParams) -> Result<Self> {
        let mut model = Self::init(data, params)?;
        for epoch in 0..params.epochs {
            let mut rng = seed::rng(params.seed, &["fpmc", "epoch", &epoch.to_string()]);
            let mut samples = model.draw_samples(data, &mut rng);
            samples.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in samples.chunks(params.batch_size.max(1)) {
                let (loss, grad) = model.loss_and_gradient(batch);
                total += loss;
                model.apply(&grad, params.learning_rate);
            }
            let mean = if samples.is_empty() { 0.0 } else { total / samples.len() as f64 };
            if !mean.is_finite() || !model.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("mean loss {mean}"),
                });
            }
            log::debug!("fpmc epoch {epoch}: loss {mean:.5}");
            model.epoch_losses.push(mean);
        }
        Ok(model)
    }

    /// One sample per consecutive pair; the negative is uniform over items the
    /// user never touched.
    pub fn draw_samples(&self, data: &TrainingData, rng: &mut seed::Rng) -> Vec<Sample> {
        let mut out = Vec::new();
        for (user_id, seq) in &data.sequences {
            let user = self.user_index[user_id];
            let touched: BTreeSet<ItemId> = seq.iter().copied().collect();
            if touched.len() >= self.num_items {
                continue;
            }
            for w in seq.windows(2) {
                let neg = loop {
                    let c = rng.random_range(0..self.num_items) as ItemId;
                    if !touched.contains(&c) {
                        break c;
                    }
                };
                out.push(Sample {
                    user,
                    last: w[0],
                    pos: w[1],
                    neg,
                });
            }
        }
        out
    }

    fn row(&self, f: Factor, r: usize) -> &[f64] {
        let m = match f {
            Factor::User => &self.u,
            Factor::ItemUser => &self.iu,
            Factor::LastItem => &self.li,
            Factor::ItemLast => &self.il,
        };
        &m[r * self.dim..(r + 1) * self.dim]
    }

    fn row_mut(&mut self, f: Factor, r: usize) -> &mut [f64] {
        let dim = self.dim;
        let m = match f {
            Factor::User => &mut self.u,
            Factor::ItemUser => &mut self.iu,
            Factor::LastItem => &mut self.li,
            Factor::ItemLast => &mut self.il,
        };
        &mut m[r * dim..(r + 1) * dim]
    }

    pub fn param_mut(&mut self, f: Factor, row: usize, col: usize) -> &mut f64 {
        &mut self.row_mut(f, row)[col]
    }

    pub fn params(&self) -> &FpmcParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    fn raw_score(&self, user: usize, last: Option<ItemId>, item: ItemId) -> f64 {
        let i = item as usize;
        let mut x = dot(self.row(Factor::User, user), self.row(Factor::ItemUser, i));
        if let Some(l) = last {
            x += dot(self.row(Factor::LastItem, l as usize), self.row(Factor::ItemLast, i));
        }
        x
    }

    /// Summed loss over `batch` and its gradient, at the current parameters.
    pub fn loss_and_gradient(&self, batch: &[Sample]) -> (f64, Gradient) {
        let mut grad: Gradient = BTreeMap::new();
        let mut loss = 0.0;
        let lambda = self.params.reg;
        for s in batch {
            let (u, l, p, n) = (s.user, s.last as usize, s.pos as usize, s.neg as usize);
            let d = self.raw_score(u, Some(s.last), s.pos) - self.raw_score(u, Some(s.last), s.neg);
            let rows = [
                (Factor::User, u),
                (Factor::ItemUser, p),
                (Factor::ItemUser, n),
                (Factor::LastItem, l),
                (Factor::ItemLast, p),
                (Factor::ItemLast, n),
            ];
            let penalty: f64 = rows.iter().map(|&(f, r)| dot(self.row(f, r), self.row(f, r))).sum();
            loss += softplus(-d) + 0.5 * lambda * penalty;

            // d loss / d d
            let g = -sigmoid(-d);
            let uu = self.row(Factor::User, u);
            let lr = self.row(Factor::LastItem, l);
            let diff_iu: Vec<f64> = self
                .row(Factor::ItemUser, p)
                .iter()
                .zip(self.row(Factor::ItemUser, n))
                .map(|(a, b)| a - b)
                .collect();
            let diff_il: Vec<f64> = self
                .row(Factor::ItemLast, p)
                .iter()
                .zip(self.row(Factor::ItemLast, n))
                .map(|(a, b)| a - b)
                .collect();
            let mut add = |key: (Factor, usize), dir: &[f64], scale: f64| {
                let own = self.row(key.0, key.1);
                let acc = grad.entry(key).or_insert_with(|| vec![0.0; self.dim]);
                for k in 0..self.dim {
                    acc[k] += scale * dir[k] + lambda * own[k];
                }
            };
            add((Factor::User, u), &diff_iu, g);
            add((Factor::ItemUser, p), uu, g);
            add((Factor::ItemUser, n), uu, -g);
            add((Factor::LastItem, l), &diff_il, g);
            add((Factor::ItemLast, p), lr, g);
            add((Factor::ItemLast, n), lr, -g);
        }
        (loss, grad)
    }

    fn apply(&mut self, grad: &Gradient, lr: f64) {
        for (&(f, r), g) in grad {
            for (w, gk) in self.row_mut(f, r).iter_mut().zip(g) {
                *w -= lr * gk;
            }
        }
    }

    fn is_finite(&self) -> bool {
        [&self.u, &self.iu, &self.li, &self.il]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [CHECKPOINT_VERSION, self.dim as u32, self.num_items as u32, self.user_ids.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let p = &self.params;
        buf.extend_from_slice(&p.seed.to_le_bytes());
        for v in [p.epochs as u64, p.batch_size as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [p.learning_rate, p.reg, p.init_std] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for u in &self.user_ids {
            buf.extend_from_slice(&(u.len() as u32).to_le_bytes());
            buf.extend_from_slice(u.as_bytes());
        }
        for m in [&self.u, &self.iu, &self.li, &self.il] {
            for x in m.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: 0,
            reason: reason.to_string(),
        };
        let mut r = Reader { buf: &buf, at: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not an fpmc checkpoint"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut next = || r.u32().map(|v| v as usize).ok_or_else(|| bad("truncated header"));
        let (dim, num_items, num_users) = (next()?, next()?, next()?);
        let mut word = || r.u64().ok_or_else(|| bad("truncated header"));
        let (seed, epochs, batch_size) = (word()?, word()? as usize, word()? as usize);
        let mut real = || r.f64().ok_or_else(|| bad("truncated header"));
        let (learning_rate, reg, init_std) = (real()?, real()?, real()?);
        let params = FpmcParams {
            dim,
            learning_rate,
            reg,
            epochs,
            batch_size,
            init_std,
            seed,
        };
        let mut user_ids = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let len = r.u32().ok_or_else(|| bad("truncated user table"))? as usize;
            let bytes = r.take(len).ok_or_else(|| bad("truncated user table"))?;
            user_ids.push(String::from_utf8(bytes.to_vec()).map_err(|_| bad("user id is not utf-8"))?);
        }
        let mut matrix = |rows: usize| -> Result<Vec<f64>> {
            (0..rows * dim).map(|_| r.f64().ok_or_else(|| bad("truncated parameters"))).collect()
        };
        let u = matrix(num_users)?;
        let iu = matrix(num_items)?;
        let li = matrix(num_items)?;
        let il = matrix(num_items)?;
        if r.at != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let user_index = user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        Ok(Self {
            dim,
            num_items,
            params,
            user_index,
            user_ids,
            u,
            iu,
            li,
            il,
            epoch_losses: Vec::new(),
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

impl Recommender for Fpmc {
    fn id(&self) -> &str {
        "fpmc"
    }

    fn score(&self, user: &str, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        let u = *self
            .user_index
            .get(user)
            .ok_or_else(|| Error::UnknownId(format!("user {user}")))?;
        if let Some(bad) = candidates.iter().chain(history.last()).find(|&&i| i as usize >= self.num_items) {
            return Err(Error::UnknownId(format!("item {bad}")));
        }
        Ok(candidates
            .iter()
            .map(|&i| self.raw_score(u, history.last().copied(), i))
            .collect())
    }
}

/// Users walk a fixed cycle `i -> i + 1 (mod items)` from random starting points.
pub fn planted_chain(num_items: usize, num_users: usize, len: usize, base_seed: u64) -> TrainingData {
    let mut rng = seed::rng(base_seed, &["planted-chain"]);
    TrainingData {
        num_items,
        sequences: (0..num_users)
            .map(|u| {
                let start = rng.random_range(0..num_items);
                let seq = (0..len).map(|t| ((start + t) % num_items) as ItemId).collect();
                (format!("u{u}"), seq)
            })
            .collect(),
    }
}

/// Fraction of users whose true successor ranks in the top `k` among itself
/// and `negatives` unseen items.
pub fn chain_probe(model: &dyn Recommender, data: &TrainingData, negatives: usize, k: usize, base_seed: u64) -> Result<f64> {
    let mut hits = 0;
    for (user, seq) in &data.sequences {
        let last = *seq.last().expect("non-empty sequence");
        let succ = (last + 1) % data.num_items as ItemId;
        let seen: BTreeSet<ItemId> = seq.iter().copied().chain([succ]).collect();
        let pool: Vec<ItemId> = (0..data.num_items as ItemId).filter(|i| !seen.contains(i)).collect();
        let mut rng = seed::rng(base_seed, &["probe", user]);
        let mut candidates: Vec<ItemId> = rand::seq::index::sample(&mut rng, pool.len(), negatives)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        candidates.push(succ);
        let session = super::Session::new(user.clone(), seq.clone());
        let ranked = super::rank_slate(model, &session, &candidates)?;
        if ranked.iter().take(k).any(|r| r.0 == succ) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.sequences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainingData {
        TrainingData {
            num_items: 6,
            sequences: vec![("a".into(), vec![0, 1, 2]), ("b".into(), vec![3, 4, 0, 1])],
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = FpmcParams { dim: 4, reg: 0.01, init_std: 0.3, ..Default::default() };
        let mut m = Fpmc::init(&tiny(), &params).unwrap();
        let mut rng = seed::rng(1, &["t"]);
        let batch = m.draw_samples(&tiny(), &mut rng);
        let (_, grad) = m.loss_and_gradient(&batch);
        for (&(f, r), g) in &grad {
            for (k, &gk) in g.iter().enumerate() {
                let h = 1e-6;
                let orig = *m.param_mut(f, r, k);
                *m.param_mut(f, r, k) = orig + h;
                let up = m.loss_and_gradient(&batch).0;
                *m.param_mut(f, r, k) = orig - h;
                let down = m.loss_and_gradient(&batch).0;
                *m.param_mut(f, r, k) = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - gk).abs() <= 1e-4 * fd.abs().max(1e-3), "{f:?}[{r}][{k}]: {fd} vs {gk}");
            }
        }
    }

    #[test]
    fn training_is_seeded_and_loss_falls() {
        let data = planted_chain(30, 40, 8, 2);
        let params = FpmcParams { epochs: 10, ..Default::default() };
        let a = Fpmc::train(&data, &params).unwrap();
        let b = Fpmc::train(&data, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
    }

    #[test]
    fn planted_chain_successor_ranks_high() {
        let data = planted_chain(200, 500, 20, 7);
        let start = std::time::Instant::now();
        let model = Fpmc::train(&data, &FpmcParams::default()).unwrap();
        let rate = chain_probe(&model, &data, 19, 5, 11).unwrap();
        eprintln!("top-5 rate {rate}, {:?}", start.elapsed());
        assert!(rate >= 0.8, "{rate}");
    }

    #[test]
    fn zero_model_scores_zero_and_ranks_by_id() {
        let params = FpmcParams { init_std: 0.0, ..Default::default() };
        let m = Fpmc::init(&tiny(), &params).unwrap();
        assert_eq!(m.score("a", &[1], &[5, 2, 4]).unwrap(), [0.0, 0.0, 0.0]);
        let s = super::super::Session::new("a", vec![1]);
        let ranked: Vec<ItemId> = super::super::rank_slate(&m, &s, &[5, 2, 4]).unwrap().iter().map(|r| r.0).collect();
        assert_eq!(ranked, [2, 4, 5]);
    }

    #[test]
    fn hand_set_two_dim_score() {
        let params = FpmcParams { dim: 2, init_std: 0.0, ..Default::default() };
        let mut m = Fpmc::init(&tiny(), &params).unwrap();
        // user b = (1, 2), IU_3 = (3, -1), LI_0 = (0.5, 0), IL_3 = (4, 7)
        for (f, r, v) in [
            (Factor::User, 1, [1.0, 2.0]),
            (Factor::ItemUser, 3, [3.0, -1.0]),
            (Factor::LastItem, 0, [0.5, 0.0]),
            (Factor::ItemLast, 3, [4.0, 7.0]),
        ] {
            for (k, x) in v.iter().enumerate() {
                *m.param_mut(f, r, k) = *x;
            }
        }
        // (1*3 + 2*-1) + (0.5*4 + 0*7) = 3
        assert_eq!(m.score("b", &[2, 0], &[3]).unwrap(), [3.0]);
        assert_eq!(m.score("b", &[], &[3]).unwrap(), [1.0]);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let params = FpmcParams { epochs: 0, ..Default::default() };
        assert_eq!(Fpmc::train(&tiny(), &params).unwrap(), Fpmc::init(&tiny(), &params).unwrap());
    }

    #[test]
    fn divergence_detected() {
        let data = planted_chain(30, 40, 8, 2);
        let params = FpmcParams { learning_rate: 1e200, init_std: 1.0, ..Default::default() };
        assert!(matches!(Fpmc::train(&data, &params), Err(Error::Divergence { .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Fpmc::init(&tiny(), &FpmcParams::default()).unwrap();
        m.save(&path).unwrap();
        let back = Fpmc::load(&path).unwrap();
        assert_eq!(back.score("b", &[3], &[0, 1, 5]).unwrap(), m.score("b", &[3], &[0, 1, 5]).unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Fpmc::load(&path), Err(Error::MalformedRecord { .. })));
    }

    #[test]
    fn unknown_user_and_item() {
        let m = Fpmc::init(&tiny(), &FpmcParams::default()).unwrap();
        assert!(matches!(m.score("zz", &[], &[0]), Err(Error::UnknownId(_))));
        assert!(matches!(m.score("a", &[], &[6]), Err(Error::UnknownId(_))));
    }
}
