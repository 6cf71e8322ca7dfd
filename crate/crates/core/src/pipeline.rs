//! The self-training loop and its evaluation.
//!
//! Round 0 crops each case around its clicks and solves a seeded random walker
//! for the first pseudo label. Every later round trains the segmenter on all
//! cases' current labels, predicts, and (optionally) re-solves a random walker
//! seeded from the eroded prediction. The loop stops once two consecutive
//! rounds agree to `convergence_dice` or `max_rounds` is spent.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{build_seed_map, SeedConfig, SeedMap};
use crate::learner::{LearnerInput, LearnerModel, Segmenter, TrainConfig};
use crate::morphology::{ball, erode};
use crate::points::{bounding_box, point_channel, ExtremePointSet, PointChannelParams};
use crate::randomwalker::{solve_with_guess, RwConfig};
use crate::volume::{dice_score, BoundingBox, Mask, ProbabilityMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub padding_mm: f64,
    /// Ball radii in voxels.
    pub r_fg: usize,
    pub r_bg: usize,
    pub r_rw: usize,
    pub beta: f64,
    pub sigma_mm: f64,
    pub max_rounds: usize,
    pub convergence_dice: f64,
    pub rw_regularization: bool,
    pub point_channel: bool,
    /// Keep training the same model across rounds instead of re-initializing.
    pub warm_start: bool,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let rw = RwConfig::default();
        PipelineConfig {
            padding_mm: 20.0,
            r_fg: 2,
            r_bg: 30,
            r_rw: 4,
            beta: 130.0,
            sigma_mm: 3.0,
            max_rounds: 10,
            convergence_dice: 0.99,
            rw_regularization: true,
            point_channel: true,
            warm_start: true,
            cg_tol: rw.cg_tol,
            cg_max_iter: rw.cg_max_iter,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.padding_mm >= 0.0 && self.padding_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "padding_mm must be >= 0, got {}",
                self.padding_mm
            )));
        }
        if !(self.convergence_dice > 0.0 && self.convergence_dice <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "convergence_dice must be in (0, 1], got {}",
                self.convergence_dice
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidArgument("max_rounds must be >= 1".into()));
        }
        if !(self.sigma_mm > 0.0 && self.sigma_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_mm must be > 0, got {}",
                self.sigma_mm
            )));
        }
        self.rw().validate()?;
        if self.max_rounds > 1 {
            self.train.validate()?;
        }
        Ok(())
    }

    pub fn rw(&self) -> RwConfig {
        RwConfig {
            beta: self.beta,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            ..RwConfig::default()
        }
    }

    pub fn seeds(&self) -> SeedConfig {
        SeedConfig {
            r_fg: self.r_fg,
            r_bg: self.r_bg,
        }
    }
}

/// One input case; `gt` only feeds the logged Dice.
#[derive(Clone, Debug)]
pub struct Case {
    pub volume: Volume,
    pub points: ExtremePointSet,
    pub gt: Option<Mask>,
}

/// A case cut down to its padded click box, with the learner channels.
#[derive(Clone, Debug)]
pub struct CroppedCase {
    pub bbox: BoundingBox,
    pub volume: Volume,
    pub points: ExtremePointSet,
    pub input: LearnerInput,
}

impl CroppedCase {
    pub fn new(v: &Volume, pts: &ExtremePointSet, cfg: &PipelineConfig) -> Result<Self> {
        let bbox = bounding_box(pts, v.geometry(), cfg.padding_mm)?;
        let volume = v.crop(&bbox)?;
        let points = pts.relative_to(bbox.lo);
        let clicks = if cfg.point_channel {
            point_channel(
                volume.geometry(),
                &points,
                &PointChannelParams {
                    sigma_mm: cfg.sigma_mm,
                },
            )?
        } else {
            Volume::filled(*volume.geometry(), 0.0)
        };
        let input = LearnerInput::new(&volume.normalized(), &clicks)?;
        Ok(CroppedCase {
            bbox,
            volume,
            points,
            input,
        })
    }
}

/// A label on the cropped grid together with where the crop sits.
#[derive(Clone, Debug)]
pub struct CropLabel {
    pub bbox: BoundingBox,
    pub probabilities: ProbabilityMap,
}

pub fn initial_pseudo_label(v: &Volume, pts: &ExtremePointSet, cfg: &PipelineConfig) -> Result<CropLabel> {
    cfg.validate()?;
    let case = CroppedCase::new(v, pts, cfg)?;
    Ok(CropLabel {
        bbox: case.bbox,
        probabilities: seeded_walk(&case, cfg)?,
    })
}

fn seeded_walk(case: &CroppedCase, cfg: &PipelineConfig) -> Result<ProbabilityMap> {
    let seeds = build_seed_map(&case.volume, &case.points, &cfg.seeds())?;
    solve_with_guess(&case.volume, &seeds, &cfg.rw(), None)
}

#[derive(Clone, Debug)]
pub struct Regularized {
    pub probabilities: ProbabilityMap,
    /// Set when erosion emptied a seed class and `p` came back unchanged.
    pub degenerate: bool,
}

/// Re-solves the random walker with the eroded foreground and background of
/// `p` as seeds, leaving a band around the predicted surface free.
pub fn rw_regularize(p: &ProbabilityMap, v: &Volume, cfg: &PipelineConfig) -> Result<Regularized> {
    v.geometry().check_same_dims(p.geometry())?;
    let fg_pred = p.threshold(0.5)?;
    let element = ball(cfg.r_rw);
    let fg = erode(&fg_pred, &element);
    let bg = erode(&fg_pred.complement(), &element);
    if fg.is_empty() || bg.is_empty() {
        return Ok(Regularized {
            probabilities: p.clone(),
            degenerate: true,
        });
    }
    let seeds = SeedMap::from_masks(&fg, &bg)?;
    Ok(Regularized {
        probabilities: solve_with_guess(v, &seeds, &cfg.rw(), Some(p))?,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mean_dice_gt: Option<f64>,
    /// Dice between this round's and the previous round's thresholded labels; null at round 0.
    pub mean_dice_prev: Option<f64>,
    pub seconds: f64,
    pub converged: bool,
    pub degenerate_cases: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Thresholded final labels on each case's full grid.
    pub masks: Vec<Mask>,
    pub probabilities: Vec<ProbabilityMap>,
    pub rounds: Vec<RoundRecord>,
    pub model: Option<LearnerModel>,
}

pub fn run(dataset: &[Case], cfg: &PipelineConfig) -> Result<RunOutput> {
    run_with(dataset, cfg, |_| {})
}

/// As [`run`], calling `on_round` as soon as each round's record is ready.
pub fn run_with(
    dataset: &[Case],
    cfg: &PipelineConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<RunOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let start = Instant::now();
    let cases: Vec<CroppedCase> = dataset
        .iter()
        .map(|c| CroppedCase::new(&c.volume, &c.points, cfg))
        .collect::<Result<_>>()?;
    let gts: Vec<Option<Mask>> = dataset
        .iter()
        .zip(&cases)
        .map(|(c, cc)| c.gt.as_ref().map(|g| g.crop(&cc.bbox)).transpose())
        .collect::<Result<_>>()?;

    let mut labels: Vec<ProbabilityMap> = cases
        .par_iter()
        .map(|c| seeded_walk(c, cfg))
        .collect::<Result<_>>()?;
    let mut masks: Vec<Mask> = labels.iter().map(|p| p.threshold(0.5)).collect::<Result<_>>()?;
    let mut rounds = vec![RoundRecord {
        round: 0,
        mean_dice_gt: mean_gt_dice(&masks, &gts)?,
        mean_dice_prev: None,
        seconds: start.elapsed().as_secs_f64(),
        converged: false,
        degenerate_cases: 0,
    }];
    log::info!("round 0: {:?}", rounds[0]);
    on_round(&rounds[0]);

    let mut model: Option<LearnerModel> = None;
    for round in 1..cfg.max_rounds {
        let t0 = Instant::now();
        let m = match model.take() {
            Some(m) if cfg.warm_start => model.insert(m),
            _ => model.insert(LearnerModel::new(cfg.train.rng_seed)),
        };
        let data: Vec<(&LearnerInput, &ProbabilityMap)> =
            cases.iter().map(|c| &c.input).zip(labels.iter()).collect();
        let history = m.train(&data, &cfg.train)?;
        log::debug!("round {round}: training loss {:?} -> {:?}", history.first(), history.last());

        let m: &LearnerModel = m;
        let next: Vec<(ProbabilityMap, bool)> = cases
            .par_iter()
            .zip(labels.par_iter())
            .map(|(c, prev)| {
                let pred = m.predict(&c.input)?;
                if !cfg.rw_regularization {
                    return Ok((pred, false));
                }
                let r = rw_regularize(&pred, &c.volume, cfg)?;
                Ok(if r.degenerate {
                    (prev.clone(), true)
                } else {
                    (r.probabilities, false)
                })
            })
            .collect::<Result<_>>()?;
        let degenerate_cases = next.iter().filter(|(_, d)| *d).count();
        let next_labels: Vec<ProbabilityMap> = next.into_iter().map(|(p, _)| p).collect();
        let next_masks: Vec<Mask> = next_labels.iter().map(|p| p.threshold(0.5)).collect::<Result<_>>()?;

        let mut agreement = 0.0;
        for (a, b) in masks.iter().zip(&next_masks) {
            agreement += dice_score(a, b)?;
        }
        let mean_dice_prev = agreement / masks.len() as f64;
        let converged = mean_dice_prev >= cfg.convergence_dice;
        labels = next_labels;
        masks = next_masks;
        let record = RoundRecord {
            round,
            mean_dice_gt: mean_gt_dice(&masks, &gts)?,
            mean_dice_prev: Some(mean_dice_prev),
            seconds: t0.elapsed().as_secs_f64(),
            converged,
            degenerate_cases,
        };
        log::info!("round {round}: {record:?}");
        on_round(&record);
        rounds.push(record);
        if converged {
            break;
        }
    }

    let mut full_masks = Vec::with_capacity(cases.len());
    let mut full_probs = Vec::with_capacity(cases.len());
    for ((c, case), (mask, prob)) in dataset.iter().zip(&cases).zip(masks.iter().zip(&labels)) {
        full_masks.push(mask.uncrop(*c.volume.geometry(), case.bbox.lo)?);
        full_probs.push(prob.uncrop(*c.volume.geometry(), case.bbox.lo)?);
    }
    Ok(RunOutput {
        masks: full_masks,
        probabilities: full_probs,
        rounds,
        model,
    })
}

/// Dice on the full grid. Inside the crop this equals the Dice of the crop
/// only when the ground truth lies inside it, so callers should uncrop first.
pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<f64> {
    dice_score(pred, gt)
}

/// Uncrops `label` into `gt`'s grid, thresholds at 0.5 and scores it.
pub fn evaluate_crop(label: &CropLabel, gt: &Mask) -> Result<f64> {
    let full = label.probabilities.threshold(0.5)?.uncrop(*gt.geometry(), label.bbox.lo)?;
    evaluate(&full, gt)
}

fn mean_gt_dice(masks: &[Mask], gts: &[Option<Mask>]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for (m, g) in masks.iter().zip(gts) {
        if let Some(g) = g {
            sum += dice_score(m, g)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// One JSON object per line.
pub fn write_round_log(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("round record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
