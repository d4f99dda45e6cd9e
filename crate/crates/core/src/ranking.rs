//! Layer scoring and selection.
//!
//! Every criterion is "lower is more substitutable". The CCA bound and the
//! direct NMSE are evaluated on the residual output `X + Y`; the linear maps
//! themselves are fit on the bare sublayer output `Y`, so the residual add is
//! kept in the compressed block.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, LayerStatistics};
use crate::cca::{cca_bound_for, direct_nmse, CcaSpectrum};
use crate::error::{NblError, Result};
use crate::lmmse::{fit_lmmse, LinearMap};
use crate::spectral::Regularization;
use crate::toymodel::ToyTransformer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Criterion {
    CcaBound,
    DirectNmse,
    Cosine,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::CcaBound => "cca_bound",
            Criterion::DirectNmse => "direct_nmse",
            Criterion::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Strategy {
    OneShot,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_index: usize,
    pub criterion: Criterion,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho_spectrum: Option<CcaSpectrum>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub layers: Vec<usize>,
    pub criterion: Criterion,
    pub strategy: Strategy,
}

pub fn score_layer(stats: &LayerStatistics, criterion: Criterion, reg: &Regularization) -> Result<LayerScore> {
    let (score, rho_spectrum) = match criterion {
        Criterion::CcaBound => {
            let residual = stats.covariances.derive_residual()?;
            let (spec, bound) = cca_bound_for(&residual, reg)?;
            (bound, Some(spec))
        }
        Criterion::DirectNmse => {
            let residual = stats.covariances.derive_residual()?;
            (direct_nmse(&residual, reg)?, None)
        }
        Criterion::Cosine => (stats.cosine.ok_or(NblError::CosineUnavailable(stats.layer))?, None),
    };
    if !score.is_finite() {
        return Err(NblError::Degenerate(format!("layer {} scored {score}", stats.layer)));
    }
    Ok(LayerScore {
        layer_index: stats.layer,
        criterion,
        score,
        rho_spectrum,
    })
}

/// Scores sorted ascending, ties broken by lower layer index.
pub fn sort_scores(scores: &mut [LayerScore]) {
    scores.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.layer_index.cmp(&b.layer_index)));
}

pub fn select_one_shot(scores: &[LayerScore], m: usize) -> Result<SelectionPlan> {
    if m > scores.len() {
        return Err(NblError::InvalidArgument(format!(
            "cannot select {m} layers out of {}",
            scores.len()
        )));
    }
    let criterion = scores.first().map_or(Criterion::CcaBound, |s| s.criterion);
    if scores.iter().any(|s| s.criterion != criterion) {
        return Err(NblError::InvalidArgument("scores mix criteria".into()));
    }
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    let layers: Vec<usize> = sorted.iter().take(m).map(|s| s.layer_index).collect();
    let mut seen = std::collections::BTreeSet::new();
    if !layers.iter().all(|l| seen.insert(*l)) {
        return Err(NblError::InvalidArgument("duplicate layer indices in scores".into()));
    }
    Ok(SelectionPlan {
        layers,
        criterion,
        strategy: Strategy::OneShot,
    })
}

/// Outcome of a greedy run: the plan, the per-round scores and the final model.
#[derive(Debug, Clone)]
pub struct GreedyOutcome {
    pub plan: SelectionPlan,
    pub rounds: Vec<Vec<LayerScore>>,
    pub maps: Vec<LinearMap>,
    pub model: ToyTransformer,
}

/// Substitutes one layer per round, recalibrating the partially substituted
/// model on the same token stream before each round.
pub fn greedy_select(
    model: &ToyTransformer,
    calib: &[Vec<u32>],
    m: usize,
    criterion: Criterion,
    reg: &Regularization,
) -> Result<GreedyOutcome> {
    let available = model.attention_layers().len();
    if m > available {
        return Err(NblError::InvalidArgument(format!(
            "cannot select {m} layers out of {available}"
        )));
    }
    let mut current = model.clone();
    let mut plan = SelectionPlan {
        layers: Vec::with_capacity(m),
        criterion,
        strategy: Strategy::Greedy,
    };
    let mut rounds = Vec::with_capacity(m);
    let mut maps = Vec::with_capacity(m);
    for _ in 0..m {
        let remaining = current.attention_layers();
        let accs = calibrate(&current, calib, &remaining)?;
        let stats = accs.iter().map(|a| a.finish()).collect::<Result<Vec<_>>>()?;
        let mut scores = stats
            .iter()
            .map(|s| score_layer(s, criterion, reg))
            .collect::<Result<Vec<_>>>()?;
        sort_scores(&mut scores);
        let pick = scores[0].layer_index;
        let chosen = stats.iter().find(|s| s.layer == pick).expect("scored layer has stats");
        let map = fit_lmmse(&chosen.covariances, pick, reg)?;
        let step = SelectionPlan {
            layers: vec![pick],
            criterion,
            strategy: Strategy::Greedy,
        };
        current = current.substitute(&step, std::slice::from_ref(&map))?;
        plan.layers.push(pick);
        maps.push(map);
        rounds.push(scores);
    }
    Ok(GreedyOutcome {
        plan,
        rounds,
        maps,
        model: current,
    })
}
