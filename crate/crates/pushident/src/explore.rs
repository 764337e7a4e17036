//! Push-selection strategies over a sampled candidate set.
//!
//! Candidates push inward (opposite a contour normal, with angular jitter)
//! at magnitudes drawn relative to a breakaway-force estimate. Three
//! strategies pick among them: uniform random, farthest from the executed
//! pushes in generalized-force space, and highest predicted disagreement
//! between the ensemble models.

use nalgebra::Vector2;
use rand::Rng;

use crate::dynamics::{expand_velocity, predict_velocity, WorldConfig};
use crate::identify::ModelEnsemble;
use crate::object::{rotate, BodyState, GridObject, PushAction};
use crate::{Error, Result};

/// Candidate sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreConfig {
    /// Candidates per selection round.
    pub n_candidates: usize,
    /// Push direction jitter around the inward normal (rad, +/-).
    pub jitter: f64,
    /// Duration of exploration pushes (s).
    pub push_duration: f64,
    /// Magnitude range as fractions of the breakaway-force estimate.
    pub f_min_frac: f64,
    pub f_max_frac: f64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            n_candidates: 32,
            jitter: 15f64.to_radians(),
            push_duration: 0.15,
            f_min_frac: 0.2,
            f_max_frac: 1.0,
        }
    }
}

/// How the next exploration push is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Random,
    MostDifferent,
    MostDistinctive,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "mostDifferent" => Ok(Self::MostDifferent),
            "mostDistinctive" => Ok(Self::MostDistinctive),
            other => Err(Error::InvalidConfig(format!("unknown selection mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::MostDifferent => "mostDifferent",
            Self::MostDistinctive => "mostDistinctive",
        })
    }
}

/// A sampled set of candidate pushes at the current state.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<PushAction>,
}

/// Sample random candidate forces on random contour cells. Directions point
/// into the object (minus the surface normal, rotated by the jitter) and
/// magnitudes are uniform in `[f_min_frac, f_max_frac] * force_scale`.
pub fn sample_candidates<R: Rng>(
    obj: &GridObject,
    state: &BodyState,
    cfg: &ExploreConfig,
    force_scale: f64,
    rng: &mut R,
) -> CandidateSet {
    let contour = obj.contour();
    let mut candidates = Vec::with_capacity(cfg.n_candidates);
    for _ in 0..cfg.n_candidates {
        let cc = &contour[rng.gen_range(0..contour.len())];
        let normal = cc.normals[rng.gen_range(0..cc.normals.len())];
        let jitter = rng.gen_range(-cfg.jitter..=cfg.jitter);
        let dir = rotate(state.rotation + jitter, -normal);
        let mag = rng.gen_range(cfg.f_min_frac..=cfg.f_max_frac) * force_scale;
        candidates.push(PushAction {
            contact_cell: cc.cell,
            force: dir * mag,
            duration: cfg.push_duration,
        });
    }
    CandidateSet { candidates }
}

/// Distance between two pushes in the sparse 3n generalized-force embedding:
/// pushes at different cells are orthogonal, so contact location matters.
fn force_distance(a: &PushAction, b: &PushAction) -> f64 {
    if a.contact_cell == b.contact_cell {
        (a.force - b.force).norm()
    } else {
        (a.force.norm_squared() + b.force.norm_squared()).sqrt()
    }
}

/// Model disagreement for one candidate: sum over unordered model pairs of
/// the distance between predicted 3n cell-velocity responses.
fn disagreement(
    candidate: &PushAction,
    ensemble: &ModelEnsemble,
    obj: &GridObject,
    state: &BodyState,
    cfg: &WorldConfig,
) -> Result<f64> {
    let mut responses = Vec::with_capacity(ensemble.len());
    for model in &ensemble.models {
        let twist = predict_velocity(obj, state, candidate, model, cfg)?;
        responses.push(expand_velocity(obj, state.rotation, &twist));
    }
    let mut d = 0.0;
    for i in 0..responses.len() {
        for j in (i + 1)..responses.len() {
            d += responses[i]
                .iter()
                .zip(&responses[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(d)
}

/// Pick the next push. Ties (and the degenerate single-model disagreement)
/// resolve to the lowest candidate index.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng>(
    mode: SelectionMode,
    candidates: &CandidateSet,
    history: &[PushAction],
    ensemble: Option<&ModelEnsemble>,
    obj: &GridObject,
    state: &BodyState,
    cfg: &WorldConfig,
    rng: &mut R,
) -> Result<PushAction> {
    let set = &candidates.candidates;
    if set.is_empty() {
        return Err(Error::InvalidConfig("empty candidate set".into()));
    }
    match mode {
        SelectionMode::Random => Ok(set[rng.gen_range(0..set.len())]),
        SelectionMode::MostDifferent => {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, cand) in set.iter().enumerate() {
                let score = history
                    .iter()
                    .map(|h| force_distance(h, cand))
                    .fold(f64::INFINITY, f64::min);
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            Ok(set[best])
        }
        SelectionMode::MostDistinctive => {
            let ensemble = ensemble.ok_or_else(|| {
                Error::InvalidConfig("mostDistinctive needs a model ensemble".into())
            })?;
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, cand) in set.iter().enumerate() {
                let score = disagreement(cand, ensemble, obj, state, cfg)?;
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            Ok(set[best])
        }
    }
}
