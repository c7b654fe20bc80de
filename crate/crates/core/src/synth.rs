//! Synthetic persona worlds.
//!
//! Every movie carries one or two genres out of `n_genres`; every persona a
//! weight per genre plus a bias. The true rating is
//! `quantize(intercept + scale * (bias + mean of the persona's weights over
//! the movie's genres))`. Ratings are emitted exactly on that oracle unless
//! the noise knob is set.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{MovieCatalog, MovieId, Rating, RatingEvent, UserId};
use crate::rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    ConfigInvalid(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthWorldConfig {
    pub n_genres: usize,
    pub n_movies: usize,
    /// Users with exactly `ratings_per_user` ratings.
    pub n_users: usize,
    pub ratings_per_user: usize,
    /// Extra users with a different rating count, usable as NMF background.
    pub n_background_users: usize,
    pub background_ratings: usize,
    pub n_liked: usize,
    pub n_disliked: usize,
    pub liked_weight: (f64, f64),
    pub disliked_weight: (f64, f64),
    /// Neutral genres draw from U(-spread, spread).
    pub neutral_spread: f64,
    pub bias_spread: f64,
    pub intercept: f64,
    pub scale: f64,
    /// Watch probability is proportional to exp(sharpness * utility).
    pub watch_sharpness: f64,
    /// Adds a uniform draw from {-0.5, 0, +0.5} to each emitted rating.
    pub noise: bool,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        SynthWorldConfig {
            n_genres: 8,
            n_movies: 400,
            n_users: 50,
            ratings_per_user: 150,
            n_background_users: 0,
            background_ratings: 60,
            n_liked: 2,
            n_disliked: 1,
            liked_weight: (0.7, 1.0),
            disliked_weight: (-1.0, -0.7),
            neutral_spread: 0.0,
            bias_spread: 0.0,
            intercept: 3.0,
            scale: 2.0,
            watch_sharpness: 4.0,
            noise: false,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if self.n_genres == 0 {
            return bad("n_genres must be positive".into());
        }
        if self.n_movies < self.n_genres {
            return bad(format!("n_movies ({}) must be at least n_genres ({})", self.n_movies, self.n_genres));
        }
        if self.n_liked + self.n_disliked > self.n_genres {
            return bad("more liked and disliked genres than genres".into());
        }
        if self.ratings_per_user > self.n_movies || (self.n_background_users > 0 && self.background_ratings > self.n_movies) {
            return bad("a user cannot rate more movies than exist".into());
        }
        for (name, (lo, hi)) in [("liked_weight", self.liked_weight), ("disliked_weight", self.disliked_weight)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} must be a finite range with low <= high"));
            }
        }
        for (name, v) in [
            ("neutral_spread", self.neutral_spread),
            ("bias_spread", self.bias_spread),
            ("intercept", self.intercept),
            ("scale", self.scale),
            ("watch_sharpness", self.watch_sharpness),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.neutral_spread < 0.0 || self.bias_spread < 0.0 {
            return bad("spreads must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Movies this persona rated.
    pub seen: BTreeSet<MovieId>,
}

/// The hidden truth behind a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaRegistry {
    pub genres: Vec<String>,
    pub intercept: f64,
    pub scale: f64,
    /// Genre indices per movie.
    pub movie_genres: BTreeMap<MovieId, Vec<usize>>,
    pub personas: BTreeMap<UserId, Persona>,
}

pub fn genre_name(i: usize) -> String {
    format!("genre_{i}")
}

impl PersonaRegistry {
    /// Mean weight over the movie's genres plus bias.
    pub fn utility_with(&self, weights: &[f64], bias: f64, movie: MovieId) -> Option<f64> {
        let genres = self.movie_genres.get(&movie)?;
        if genres.is_empty() {
            return Some(bias);
        }
        Some(bias + genres.iter().map(|&g| weights.get(g).copied().unwrap_or(0.0)).sum::<f64>() / genres.len() as f64)
    }

    pub fn utility(&self, user: UserId, movie: MovieId) -> Option<f64> {
        let p = self.personas.get(&user)?;
        self.utility_with(&p.weights, p.bias, movie)
    }

    pub fn rating_from_utility(&self, utility: f64) -> Rating {
        Rating::quantize(self.intercept + self.scale * utility)
    }

    pub fn true_rating(&self, user: UserId, movie: MovieId) -> Option<Rating> {
        self.utility(user, movie).map(|u| self.rating_from_utility(u))
    }

    pub fn has_seen(&self, user: UserId, movie: MovieId) -> bool {
        self.personas.get(&user).is_some_and(|p| p.seen.contains(&movie))
    }

    pub fn genre_index(&self, name: &str) -> Option<usize> {
        self.genres.iter().position(|g| g == name)
    }

    pub fn load(path: &Path) -> Result<PersonaRegistry, SynthError> {
        let io = |reason: String| SynthError::Io { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let io = |reason: String| SynthError::Io { path: path.to_path_buf(), reason };
        let text = serde_json::to_string(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub catalog: MovieCatalog,
    pub ratings: Vec<RatingEvent>,
    pub registry: PersonaRegistry,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn draw_persona<R: Rng>(config: &SynthWorldConfig, rng: &mut R) -> (Vec<f64>, f64) {
    let spread = config.neutral_spread;
    let mut weights: Vec<f64> =
        (0..config.n_genres).map(|_| if spread > 0.0 { rng.gen_range(-spread..spread) } else { 0.0 }).collect();
    let picked = index::sample(rng, config.n_genres, config.n_liked + config.n_disliked).into_vec();
    for (j, &g) in picked.iter().enumerate() {
        weights[g] = if j < config.n_liked {
            uniform(rng, config.liked_weight)
        } else {
            uniform(rng, config.disliked_weight)
        };
    }
    let bias = if config.bias_spread > 0.0 { rng.gen_range(-config.bias_spread..config.bias_spread) } else { 0.0 };
    (weights, bias)
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys).
fn watched_set<R: Rng>(utilities: &[(MovieId, f64)], n: usize, sharpness: f64, rng: &mut R) -> Vec<MovieId> {
    let mut keyed: Vec<(f64, MovieId)> = utilities
        .iter()
        .map(|&(m, u)| {
            let x: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (x.ln() / (sharpness * u).exp(), m)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<MovieId> = keyed.into_iter().take(n).map(|(_, m)| m).collect();
    out.sort();
    out
}

pub fn generate_world(config: &SynthWorldConfig) -> Result<SynthWorld, SynthError> {
    config.validate()?;
    let mut catalog = MovieCatalog::default();
    let mut movie_genres = BTreeMap::new();
    let mut rng = rng::stream(config.seed, &[rng::tag("synth-movies")]);
    for i in 0..config.n_movies {
        let id = MovieId(i as u64 + 1);
        let year = 1950 + (i % 70);
        catalog.insert(id, &format!("Film {:04} ({year})", i + 1));
        // the first n_genres movies cover every genre once
        let mut genres = if i < config.n_genres {
            vec![i]
        } else {
            let count = if config.n_genres > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
            index::sample(&mut rng, config.n_genres, count).into_vec()
        };
        genres.sort();
        movie_genres.insert(id, genres);
    }
    let mut registry = PersonaRegistry {
        genres: (0..config.n_genres).map(genre_name).collect(),
        intercept: config.intercept,
        scale: config.scale,
        movie_genres,
        personas: BTreeMap::new(),
    };

    let mut ratings = Vec::new();
    let total = config.n_users + config.n_background_users;
    for u in 0..total {
        let user = UserId(u as u64 + 1);
        let mut rng = rng::stream(config.seed, &[rng::tag("synth-persona"), user.0]);
        let (weights, bias) = draw_persona(config, &mut rng);
        let utilities: Vec<(MovieId, f64)> = registry
            .movie_genres
            .keys()
            .map(|&m| (m, registry.utility_with(&weights, bias, m).expect("movie has genres")))
            .collect();
        let n = if u < config.n_users { config.ratings_per_user } else { config.background_ratings };
        let seen = watched_set(&utilities, n, config.watch_sharpness, &mut rng);
        for (t, &movie) in seen.iter().enumerate() {
            let u = registry.utility_with(&weights, bias, movie).expect("movie has genres");
            let mut value = registry.rating_from_utility(u).value();
            if config.noise {
                value += [-0.5, 0.0, 0.5][rng.gen_range(0..3)];
            }
            ratings.push(RatingEvent {
                user,
                movie,
                rating: Rating::quantize(value),
                timestamp: Some(1_000_000_000 + t as i64),
            });
        }
        registry.personas.insert(user, Persona { weights, bias, seen: seen.into_iter().collect() });
    }
    Ok(SynthWorld { catalog, ratings, registry })
}

/// Writes `ratings.csv`, `movies.csv` and `registry.json` into `dir`.
pub fn write_world(world: &SynthWorld, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let io = |path: &Path, e: &dyn std::fmt::Display| SynthError::Io { path: path.to_path_buf(), reason: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;

    let ratings_path = dir.join("ratings.csv");
    let mut w = BufWriter::new(File::create(&ratings_path).map_err(|e| io(&ratings_path, &e))?);
    writeln!(w, "userId,movieId,rating,timestamp").map_err(|e| io(&ratings_path, &e))?;
    for e in &world.ratings {
        writeln!(w, "{},{},{},{}", e.user, e.movie, e.rating, e.timestamp.unwrap_or(0))
            .map_err(|err| io(&ratings_path, &err))?;
    }
    w.flush().map_err(|e| io(&ratings_path, &e))?;

    let movies_path = dir.join("movies.csv");
    let mut w = csv::Writer::from_path(&movies_path).map_err(|e| io(&movies_path, &e))?;
    w.write_record(["movieId", "title", "genres"]).map_err(|e| io(&movies_path, &e))?;
    for id in world.catalog.ids() {
        let genres = world.registry.movie_genres[&id].iter().map(|&g| world.registry.genres[g].as_str()).collect::<Vec<_>>().join("|");
        let title = &world.catalog.get(id).expect("id from catalog").display;
        w.write_record([id.to_string().as_str(), title, &genres]).map_err(|e| io(&movies_path, &e))?;
    }
    w.flush().map_err(|e| io(&movies_path, &e))?;

    let registry_path = dir.join("registry.json");
    world.registry.save(&registry_path)?;
    Ok(vec![ratings_path, movies_path, registry_path])
}
