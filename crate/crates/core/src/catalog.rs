//! Rating and movie-metadata ingestion, plus selection of the evaluation
//! user pool.
//!
//! Ratings are accepted either in the MovieLens CSV layout
//! (`userId,movieId,rating,timestamp`) or as JSON lines carrying the same
//! keys. Movie titles keep their `(YYYY)` suffix for display in prompts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MovieId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for MovieId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A score on the half-star grid {0.5, 1.0, ..., 5.0}, stored as a count of
/// half stars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rating(u8);

impl Rating {
    pub const MIN: f64 = 0.5;
    pub const MAX: f64 = 5.0;

    /// Accepts only values that sit exactly on the half-star grid.
    pub fn new(value: f64) -> Option<Rating> {
        if !value.is_finite() || !(Self::MIN..=Self::MAX).contains(&value) {
            return None;
        }
        let halves = value * 2.0;
        if (halves - halves.round()).abs() > 1e-9 {
            return None;
        }
        Some(Rating(halves.round() as u8))
    }

    /// Clips into [0.5, 5.0] and rounds to the nearest half star.
    pub fn quantize(value: f64) -> Rating {
        let v = if value.is_nan() { Self::MIN } else { value.clamp(Self::MIN, Self::MAX) };
        Rating((v * 2.0).round() as u8)
    }

    pub fn half_stars(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

impl Serialize for Rating {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Rating {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Rating::new(v).ok_or_else(|| serde::de::Error::custom(format!("rating {v} is off the half-star grid")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingEvent {
    pub user: UserId,
    pub movie: MovieId,
    pub rating: Rating,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Movie {
    /// Name with the year suffix removed.
    pub title: String,
    /// Release year, or 0 when the title carried no parseable year.
    pub year: u16,
    /// Title exactly as it appeared in the source file.
    pub display: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MovieCatalog {
    pub movies: BTreeMap<MovieId, Movie>,
}

impl MovieCatalog {
    pub fn len(&self) -> usize {
        self.movies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.movies.is_empty()
    }

    pub fn get(&self, id: MovieId) -> Option<&Movie> {
        self.movies.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = MovieId> + '_ {
        self.movies.keys().copied()
    }

    pub fn insert(&mut self, id: MovieId, display: &str) -> Option<LoadWarning> {
        let (title, year) = split_title_year(display);
        let warning = if year == 0 {
            Some(LoadWarning { line: 0, reason: format!("no parseable year in title {display:?}") })
        } else {
            None
        };
        self.movies.insert(id, Movie { title, year, display: display.to_string() });
        warning
    }
}

/// A non-fatal ingestion problem, written out as `{line, reason}` JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate rating for user {0} and movie {1}")]
    DuplicateRating(UserId, MovieId),
    #[error("rating {0} is outside [0.5, 5.0] or off the half-star grid")]
    OffScaleRating(f64),
    #[error("not enough qualifying users: found {found}, needed {needed}")]
    InsufficientUsers { found: usize, needed: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CatalogError {
    CatalogError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingsFormat {
    Csv,
    Jsonl,
}

impl RatingsFormat {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> RatingsFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => RatingsFormat::Jsonl,
            _ => RatingsFormat::Csv,
        }
    }
}

#[derive(Deserialize)]
struct RawRating {
    #[serde(rename = "userId")]
    user: u64,
    #[serde(rename = "movieId")]
    movie: u64,
    rating: f64,
    #[serde(default)]
    timestamp: Option<i64>,
}

pub fn load_ratings(path: &Path, format: RatingsFormat) -> Result<Vec<RatingEvent>, CatalogError> {
    let raws = match format {
        RatingsFormat::Csv => read_csv_ratings(path)?,
        RatingsFormat::Jsonl => read_jsonl_ratings(path)?,
    };
    let mut seen = HashSet::with_capacity(raws.len());
    let mut events = Vec::with_capacity(raws.len());
    for raw in raws {
        let rating = Rating::new(raw.rating).ok_or(CatalogError::OffScaleRating(raw.rating))?;
        let (user, movie) = (UserId(raw.user), MovieId(raw.movie));
        if !seen.insert((user, movie)) {
            return Err(CatalogError::DuplicateRating(user, movie));
        }
        events.push(RatingEvent { user, movie, rating, timestamp: raw.timestamp });
    }
    Ok(events)
}

fn read_csv_ratings(path: &Path) -> Result<Vec<RawRating>, CatalogError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for record in reader.deserialize::<RawRating>() {
        match record {
            Ok(r) => out.push(r),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(CatalogError::MalformedRow { line, reason: e.to_string() });
            }
        }
    }
    Ok(out)
}

fn read_jsonl_ratings(path: &Path) -> Result<Vec<RawRating>, CatalogError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRating = serde_json::from_str(&line).map_err(|e| CatalogError::MalformedRow {
            line: idx as u64 + 1,
            reason: e.to_string(),
        })?;
        out.push(raw);
    }
    Ok(out)
}

/// Splits `"Name (YYYY)"` into its name and year. Years outside
/// [1870, 2100] count as unparseable and yield year 0.
pub fn split_title_year(raw: &str) -> (String, u16) {
    let trimmed = raw.trim();
    if let Some(open) = trimmed.rfind('(') {
        let tail = &trimmed[open..];
        if tail.len() == 6 && tail.ends_with(')') {
            if let Ok(year) = tail[1..5].parse::<u16>() {
                if (1870..=2100).contains(&year) {
                    return (trimmed[..open].trim_end().to_string(), year);
                }
            }
        }
    }
    (trimmed.to_string(), 0)
}

/// Loads a `movieId,title[,...]` CSV. Extra columns (e.g. `genres`) are
/// ignored.
pub fn load_catalog(path: &Path) -> Result<(MovieCatalog, Vec<LoadWarning>), CatalogError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let mut catalog = MovieCatalog::default();
    let mut warnings = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CatalogError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: &str| CatalogError::MalformedRow { line, reason: reason.to_string() };
        let id = record
            .get(0)
            .ok_or_else(|| malformed("missing movieId"))?
            .trim()
            .parse::<u64>()
            .map_err(|_| malformed("movieId is not an integer"))?;
        let title = record.get(1).map(str::trim).unwrap_or("");
        if title.is_empty() {
            return Err(malformed("empty title"));
        }
        if let Some(mut w) = catalog.insert(MovieId(id), title) {
            w.line = line;
            warnings.push(w);
        }
    }
    Ok((catalog, warnings))
}

pub fn write_warnings(path: &Path, warnings: &[LoadWarning]) -> Result<(), CatalogError> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    for w in warnings {
        let line = serde_json::to_string(w).expect("warning serializes");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Groups events by user, each user's events sorted by movie id.
pub fn ratings_by_user(ratings: &[RatingEvent]) -> BTreeMap<UserId, Vec<RatingEvent>> {
    let mut by_user: BTreeMap<UserId, Vec<RatingEvent>> = BTreeMap::new();
    for e in ratings {
        by_user.entry(e.user).or_default().push(e.clone());
    }
    for events in by_user.values_mut() {
        events.sort_by_key(|e| e.movie);
    }
    by_user
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub exact_count: usize,
    pub n_eval: usize,
    pub n_background: usize,
    pub background_min_ratings: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { exact_count: 150, n_eval: 300, n_background: 1200, background_min_ratings: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPool {
    pub eval_users: Vec<UserId>,
    pub background_users: Vec<UserId>,
    pub ratings_per_eval_user: usize,
}

/// Filters to users with exactly `exact_count` ratings, then samples the
/// evaluation set from them. Background users come from everyone else with
/// at least `background_min_ratings` ratings; when fewer than
/// `n_background` exist, all of them are taken.
pub fn select_typical_users(ratings: &[RatingEvent], config: &PoolConfig) -> Result<UserPool, CatalogError> {
    let mut counts: BTreeMap<UserId, usize> = BTreeMap::new();
    for e in ratings {
        *counts.entry(e.user).or_default() += 1;
    }
    let mut qualifying: Vec<UserId> =
        counts.iter().filter(|(_, &n)| n == config.exact_count).map(|(&u, _)| u).collect();
    if qualifying.len() < config.n_eval {
        return Err(CatalogError::InsufficientUsers { found: qualifying.len(), needed: config.n_eval });
    }
    let mut rng = rng::stream(config.seed, &[rng::tag("eval-users")]);
    qualifying.shuffle(&mut rng);
    qualifying.truncate(config.n_eval);
    let chosen: HashSet<UserId> = qualifying.iter().copied().collect();

    let mut background: Vec<UserId> = counts
        .iter()
        .filter(|(u, &n)| !chosen.contains(u) && n >= config.background_min_ratings)
        .map(|(&u, _)| u)
        .collect();
    if background.len() < config.n_background {
        log::warn!(
            "only {} background users available, {} requested",
            background.len(),
            config.n_background
        );
    }
    let mut rng = rng::stream(config.seed, &[rng::tag("background-users")]);
    background.shuffle(&mut rng);
    background.truncate(config.n_background);

    Ok(UserPool {
        eval_users: qualifying,
        background_users: background,
        ratings_per_eval_user: config.exact_count,
    })
}
