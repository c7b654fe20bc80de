//! Experiment-grid sampling: per-user history subsets of size `c` and the
//! held-out task instances built from the remaining ratings.
//!
//! One history is drawn per (user, c, repeat) and shared by all three task
//! kinds. Every draw comes from a stream keyed by the run seed and the cell
//! coordinates, so output is independent of iteration order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ratings_by_user, MovieCatalog, MovieId, Rating, RatingEvent, UserId, UserPool};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub history_sizes: Vec<usize>,
    pub items_per_cell: usize,
    pub seed: u64,
    /// Negatives per training-history item for the choice factorization.
    pub unseen_pool_multiplier: f64,
    /// Independent (history, instances) draws per (user, c).
    pub repeats: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            history_sizes: vec![10, 20, 30],
            items_per_cell: 3,
            seed: 0,
            unseen_pool_multiplier: 5.0,
            repeats: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
}

impl SamplingConfig {
    pub fn validate(&self, ratings_per_user: usize) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.history_sizes.is_empty() {
            return bad("history_sizes is empty".into());
        }
        for &c in &self.history_sizes {
            if c == 0 {
                return bad("history sizes must be at least 1".into());
            }
            if c >= ratings_per_user {
                return bad(format!("history size {c} must be below the per-user rating count {ratings_per_user}"));
            }
        }
        if self.items_per_cell == 0 {
            return bad("items_per_cell must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.unseen_pool_multiplier >= 0.0 && self.unseen_pool_multiplier.is_finite()) {
            return bad("unseen_pool_multiplier must be a finite non-negative number".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSample {
    pub id: String,
    pub user: UserId,
    pub history_size: usize,
    pub repeat: usize,
    pub history: Vec<RatingEvent>,
    pub held_out: Vec<RatingEvent>,
}

impl UserSample {
    pub fn sample_id(user: UserId, c: usize, repeat: usize) -> String {
        format!("u{user}-c{c}-r{repeat}")
    }

    pub fn history_mean(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        Some(self.history.iter().map(|e| e.rating.value()).sum::<f64>() / self.history.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Rating,
    Preference,
    Choice,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Rating, TaskKind::Preference, TaskKind::Choice];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Rating => "rating",
            TaskKind::Preference => "preference",
            TaskKind::Choice => "choice",
        }
    }

    pub fn is_pairwise(self) -> bool {
        !matches!(self, TaskKind::Rating)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rating" => Ok(TaskKind::Rating),
            "preference" => Ok(TaskKind::Preference),
            "choice" => Ok(TaskKind::Choice),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// Which of the two displayed positions an item occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::A => "A",
            Side::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    Rating { movie: MovieId, rating: Rating },
    /// `truth` is the side holding the higher-rated movie.
    Preference { a: MovieId, b: MovieId, rating_a: Rating, rating_b: Rating, truth: Side },
    /// `truth` is the side holding the movie the user actually rated.
    Choice { a: MovieId, b: MovieId, truth: Side },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub sample_id: String,
    pub user: UserId,
    pub history_size: usize,
    pub repeat: usize,
    pub index: usize,
    pub target: Target,
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        match self.target {
            Target::Rating { .. } => TaskKind::Rating,
            Target::Preference { .. } => TaskKind::Preference,
            Target::Choice { .. } => TaskKind::Choice,
        }
    }

    pub fn target_movies(&self) -> Vec<MovieId> {
        match self.target {
            Target::Rating { movie, .. } => vec![movie],
            Target::Preference { a, b, .. } | Target::Choice { a, b, .. } => vec![a, b],
        }
    }

    pub fn pair(&self) -> Option<(MovieId, MovieId)> {
        match self.target {
            Target::Rating { .. } => None,
            Target::Preference { a, b, .. } | Target::Choice { a, b, .. } => Some((a, b)),
        }
    }

    pub fn truth_side(&self) -> Option<Side> {
        match self.target {
            Target::Rating { .. } => None,
            Target::Preference { truth, .. } | Target::Choice { truth, .. } => Some(truth),
        }
    }

    pub fn truth_rating(&self) -> Option<Rating> {
        match self.target {
            Target::Rating { rating, .. } => Some(rating),
            _ => None,
        }
    }

    fn make_id(kind: TaskKind, sample_id: &str, index: usize) -> String {
        format!("{}-{sample_id}-{index}", kind.as_str())
    }

    pub fn manifest_entry(&self) -> ManifestEntry {
        let truth = match &self.target {
            Target::Rating { rating, .. } => serde_json::json!(rating.value()),
            Target::Preference { truth, .. } | Target::Choice { truth, .. } => serde_json::json!(truth.as_str()),
        };
        ManifestEntry {
            instance_id: self.id.clone(),
            kind: self.kind(),
            user: self.user,
            c: self.history_size,
            repeat: self.repeat,
            target_ids: self.target_movies(),
            truth,
            position: self.truth_side(),
        }
    }
}

/// One line of the instance manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub kind: TaskKind,
    pub user: UserId,
    pub c: usize,
    pub repeat: usize,
    pub target_ids: Vec<MovieId>,
    pub truth: serde_json::Value,
    /// Displayed position of the ground-truth item for pairwise tasks.
    pub position: Option<Side>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    InsufficientHeldOut,
    InsufficientDistinctRatings,
    NoUnseenMovies,
}

/// Instances that could not be formed; excluded from all denominators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub sample_id: String,
    pub kind: TaskKind,
    pub missing: usize,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskSet {
    pub instances: Vec<TaskInstance>,
    pub skips: Vec<SkipRecord>,
}

impl TaskSet {
    pub fn count(&self, kind: TaskKind) -> usize {
        self.instances.iter().filter(|i| i.kind() == kind).count()
    }
}

/// One sample per (eval user, c, repeat), ordered by user, then c, then
/// repeat.
pub fn sample_user_histories(
    pool: &UserPool,
    ratings: &[RatingEvent],
    config: &SamplingConfig,
) -> Result<Vec<UserSample>, SamplerError> {
    let by_user = ratings_by_user(ratings);
    let mut users = pool.eval_users.clone();
    users.sort();
    let mut out = Vec::with_capacity(users.len() * config.history_sizes.len() * config.repeats);
    for user in users {
        let events = by_user.get(&user).map(Vec::as_slice).unwrap_or(&[]);
        config.validate(events.len())?;
        for &c in &config.history_sizes {
            for repeat in 0..config.repeats {
                let mut rng = rng::stream(
                    config.seed,
                    &[rng::tag("history"), user.0, c as u64, repeat as u64],
                );
                let mut shuffled = events.to_vec();
                shuffled.shuffle(&mut rng);
                let held_out = shuffled.split_off(c);
                out.push(UserSample {
                    id: UserSample::sample_id(user, c, repeat),
                    user,
                    history_size: c,
                    repeat,
                    history: shuffled,
                    held_out,
                });
            }
        }
    }
    Ok(out)
}

fn cell_rng(config: &SamplingConfig, sample: &UserSample, kind: TaskKind) -> rand_chacha::ChaCha8Rng {
    rng::stream(
        config.seed,
        &[
            rng::tag("tasks"),
            rng::tag(kind.as_str()),
            sample.user.0,
            sample.history_size as u64,
            sample.repeat as u64,
        ],
    )
}

/// Builds `items_per_cell` instances of each kind per sample. Cells that
/// cannot be filled are recorded as skips rather than failing the batch.
pub fn sample_task_instances(
    samples: &[UserSample],
    catalog: &MovieCatalog,
    config: &SamplingConfig,
) -> TaskSet {
    let mut set = TaskSet::default();
    let k = config.items_per_cell;
    for sample in samples {
        let rated: HashSet<MovieId> =
            sample.history.iter().chain(&sample.held_out).map(|e| e.movie).collect();

        // rating
        let mut rng = cell_rng(config, sample, TaskKind::Rating);
        let take = k.min(sample.held_out.len());
        for (index, pos) in index::sample(&mut rng, sample.held_out.len(), take).into_iter().enumerate() {
            let e = &sample.held_out[pos];
            set.instances.push(TaskInstance {
                id: TaskInstance::make_id(TaskKind::Rating, &sample.id, index),
                sample_id: sample.id.clone(),
                user: sample.user,
                history_size: sample.history_size,
                repeat: sample.repeat,
                index,
                target: Target::Rating { movie: e.movie, rating: e.rating },
            });
        }
        if take < k {
            set.skips.push(SkipRecord {
                sample_id: sample.id.clone(),
                kind: TaskKind::Rating,
                missing: k - take,
                reason: SkipReason::InsufficientHeldOut,
            });
        }

        // preference
        let mut rng = cell_rng(config, sample, TaskKind::Preference);
        let pairs = preference_pairs(&sample.held_out, k, &mut rng);
        for (index, (hi, lo)) in pairs.iter().enumerate() {
            let truth = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            let (a, b) = if truth == Side::A { (hi, lo) } else { (lo, hi) };
            set.instances.push(TaskInstance {
                id: TaskInstance::make_id(TaskKind::Preference, &sample.id, index),
                sample_id: sample.id.clone(),
                user: sample.user,
                history_size: sample.history_size,
                repeat: sample.repeat,
                index,
                target: Target::Preference {
                    a: a.movie,
                    b: b.movie,
                    rating_a: a.rating,
                    rating_b: b.rating,
                    truth,
                },
            });
        }
        if pairs.len() < k {
            set.skips.push(SkipRecord {
                sample_id: sample.id.clone(),
                kind: TaskKind::Preference,
                missing: k - pairs.len(),
                reason: SkipReason::InsufficientDistinctRatings,
            });
            log::info!("{}: {} preference pairs skipped, not enough distinct ratings", sample.id, k - pairs.len());
        }

        // choice
        let mut rng = cell_rng(config, sample, TaskKind::Choice);
        let unseen: Vec<MovieId> = catalog.ids().filter(|m| !rated.contains(m)).collect();
        let take = k.min(sample.held_out.len()).min(unseen.len());
        let positives = index::sample(&mut rng, sample.held_out.len(), take);
        let negatives = index::sample(&mut rng, unseen.len(), take);
        for (index, (p, n)) in positives.into_iter().zip(negatives).enumerate() {
            let seen = sample.held_out[p].movie;
            let other = unseen[n];
            let truth = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            let (a, b) = if truth == Side::A { (seen, other) } else { (other, seen) };
            set.instances.push(TaskInstance {
                id: TaskInstance::make_id(TaskKind::Choice, &sample.id, index),
                sample_id: sample.id.clone(),
                user: sample.user,
                history_size: sample.history_size,
                repeat: sample.repeat,
                index,
                target: Target::Choice { a, b, truth },
            });
        }
        if take < k {
            let reason =
                if unseen.len() < k { SkipReason::NoUnseenMovies } else { SkipReason::InsufficientHeldOut };
            set.skips.push(SkipRecord { sample_id: sample.id.clone(), kind: TaskKind::Choice, missing: k - take, reason });
        }
    }
    set.instances.sort_by(|x, y| {
        (x.user, x.history_size, x.repeat, x.kind(), x.index).cmp(&(y.user, y.history_size, y.repeat, y.kind(), y.index))
    });
    set
}

/// Draws up to `k` disjoint pairs with strictly different ratings, returned
/// as (higher, lower).
fn preference_pairs<'a, R: Rng>(held_out: &'a [RatingEvent], k: usize, rng: &mut R) -> Vec<(&'a RatingEvent, &'a RatingEvent)> {
    let mut used = vec![false; held_out.len()];
    let mut pairs = Vec::with_capacity(k);
    while pairs.len() < k {
        let mut count_by_rating: BTreeMap<Rating, usize> = BTreeMap::new();
        for (i, e) in held_out.iter().enumerate() {
            if !used[i] {
                *count_by_rating.entry(e.rating).or_default() += 1;
            }
        }
        let free_total: usize = count_by_rating.values().sum();
        let candidates: Vec<usize> = (0..held_out.len())
            .filter(|&i| !used[i] && free_total - count_by_rating[&held_out[i].rating] > 0)
            .collect();
        let Some(&first) = candidates.choose(rng) else { break };
        let partners: Vec<usize> = (0..held_out.len())
            .filter(|&j| !used[j] && held_out[j].rating != held_out[first].rating)
            .collect();
        let second = *partners.choose(rng).expect("candidate has a partner");
        used[first] = true;
        used[second] = true;
        let (x, y) = (&held_out[first], &held_out[second]);
        pairs.push(if x.rating > y.rating { (x, y) } else { (y, x) });
    }
    pairs
}

/// Movies the user never rated, sized `ceil(multiplier * history_size)`
/// (or every unrated movie when fewer exist). Sorted by id.
pub fn sample_unseen_pool(
    user: UserId,
    rated: &HashSet<MovieId>,
    history_size: usize,
    catalog: &MovieCatalog,
    config: &SamplingConfig,
) -> Vec<MovieId> {
    let want = (config.unseen_pool_multiplier * history_size as f64).ceil() as usize;
    if want == 0 {
        return Vec::new();
    }
    let unseen: Vec<MovieId> = catalog.ids().filter(|m| !rated.contains(m)).collect();
    let take = want.min(unseen.len());
    let mut rng = rng::stream(config.seed, &[rng::tag("unseen-pool"), user.0, history_size as u64]);
    let mut pool: Vec<MovieId> = index::sample(&mut rng, unseen.len(), take).into_iter().map(|i| unseen[i]).collect();
    pool.sort();
    pool
}

pub fn write_manifest<W: Write>(out: W, instances: &[TaskInstance]) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for inst in instances {
        serde_json::to_writer(&mut out, &inst.manifest_entry())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_manifest_file(path: &Path, instances: &[TaskInstance]) -> std::io::Result<()> {
    write_manifest(File::create(path)?, instances)
}
