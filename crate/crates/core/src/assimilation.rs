//! Twin experiment: a truth run produces Infected-field data, and an
//! ensemble is cycled against it with one of the four filter variants.
//!
//! One cycle works in population fractions: the forecast is divided by the
//! population raster, filtered, then clipped to `[0, 1]`, thresholded on the
//! infected fraction, renormalized per cell and scaled back to people, after
//! which every member is advanced `cycle_steps` model steps.
//!
//! Seeds: the master seed derives the named streams `truth`, `member-k`,
//! `reference`, `population` and `filter-c` (one per cycle). Each member owns
//! its stream, so results do not depend on how many lanes advance them.

use std::time::{Duration, Instant};

use crate::config::{ExperimentConfig, PopulationKind, Variant};
use crate::enkf::{dense_analysis_with, perturb_all, ObsSpec};
use crate::error::{Error, Result};
use crate::fft_enkf::fft_analysis_with;
use crate::grid::{ensemble_mean, Ensemble, FieldBlock, Grid, ModelState, StateBlocks, INFECTED};
use crate::morphing::{morph_forecast, morph_update, perturb_state, FilterKind, InversionOptions, MorphingOptions};
use crate::rng::RandomStream;
use crate::sir::SirModel;

/// Divides every block by the population; cells without people map to 0.
pub fn to_fraction(state: &ModelState<f64>, population: &FieldBlock<f64>) -> ModelState<f64> {
    state.map_blocks(|b| field_fraction(b, population))
}

fn field_fraction(b: &FieldBlock<f64>, population: &FieldBlock<f64>) -> FieldBlock<f64> {
    FieldBlock::from_fn(b.shape().0, b.shape().1, |(i, j)| {
        let p = population.get(i, j);
        if p > 0.0 {
            b.get(i, j) / p
        } else {
            0.0
        }
    })
}

/// Multiplies every block by the population.
pub fn from_fraction(state: &ModelState<f64>, population: &FieldBlock<f64>) -> ModelState<f64> {
    let f = |b: &FieldBlock<f64>| {
        FieldBlock::from_fn(b.shape().0, b.shape().1, |(i, j)| b.get(i, j) * population.get(i, j))
    };
    state.map_blocks(f)
}

/// Absolute state from per-cell fractions `(i, r)`; S takes the rest of the
/// population, so the cell total is the population up to one rounding.
fn assemble(
    i_frac: &FieldBlock<f64>,
    r_frac: &FieldBlock<f64>,
    population: &FieldBlock<f64>,
    time: f64,
) -> ModelState<f64> {
    let (nx, ny) = population.shape();
    let i = FieldBlock::from_fn(nx, ny, |(a, b)| i_frac.get(a, b) * population.get(a, b));
    let r = FieldBlock::from_fn(nx, ny, |(a, b)| r_frac.get(a, b) * population.get(a, b));
    let s = FieldBlock::from_fn(nx, ny, |(a, b)| {
        (population.get(a, b) - i.get(a, b) - r.get(a, b)).max(0.0)
    });
    ModelState::new(s, i, r, time).expect("blocks share the population shape")
}

/// Clip to `[0, 1]`, zero infected fractions below `threshold`, renormalize
/// each cell to sum 1 (cells summing to 0 become all susceptible), and scale
/// back to people.
pub fn postprocess(state_fraction: &ModelState<f64>, population: &FieldBlock<f64>, threshold: f64) -> ModelState<f64> {
    let (nx, ny) = population.shape();
    let clip = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let mut i_frac = FieldBlock::zeros(nx, ny);
    let mut r_frac = FieldBlock::zeros(nx, ny);
    for a in 0..nx {
        for b in 0..ny {
            let s = clip(state_fraction.s().get(a, b));
            let mut i = clip(state_fraction.i().get(a, b));
            let r = clip(state_fraction.r().get(a, b));
            if i < threshold {
                i = 0.0;
            }
            let total = s + i + r;
            if total > 0.0 {
                i_frac.values_mut()[[a, b]] = i / total;
                r_frac.values_mut()[[a, b]] = r / total;
            }
        }
    }
    assemble(&i_frac, &r_frac, population, state_fraction.time)
}

/// Makes a perturbed absolute state consistent with the population again:
/// infected and removed fractions are kept (clipped, and scaled down if they
/// exceed the cell), and S fills the remainder.
pub fn rebalance(state: &ModelState<f64>, population: &FieldBlock<f64>) -> ModelState<f64> {
    let frac = to_fraction(state, population);
    let (nx, ny) = population.shape();
    let mut i_frac = FieldBlock::zeros(nx, ny);
    let mut r_frac = FieldBlock::zeros(nx, ny);
    for a in 0..nx {
        for b in 0..ny {
            let i = frac.i().get(a, b).clamp(0.0, 1.0);
            let r = frac.r().get(a, b).clamp(0.0, 1.0);
            let scale = if i + r > 1.0 { 1.0 / (i + r) } else { 1.0 };
            i_frac.values_mut()[[a, b]] = i * scale;
            r_frac.values_mut()[[a, b]] = r * scale;
        }
    }
    assemble(&i_frac, &r_frac, population, state.time)
}

/// Intensity-weighted centroid (km).
pub fn centroid(field: &FieldBlock<f64>, grid: &Grid<f64>) -> Result<(f64, f64)> {
    grid.check(field)?;
    let mut mass = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    for ((i, j), &v) in field.values().indexed_iter() {
        let (x, y) = grid.center(i, j);
        mass += v;
        mx += v * x;
        my += v * y;
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok((mx / mass, my / mass))
}

/// Distance (km) between the intensity-weighted centroids of `a` and `b`.
pub fn centroid_error(a: &FieldBlock<f64>, b: &FieldBlock<f64>, grid: &Grid<f64>) -> Result<f64> {
    let (ax, ay) = centroid(a, grid)?;
    let (bx, by) = centroid(b, grid)?;
    Ok((ax - bx).hypot(ay - by))
}

/// Population surrogate: a constant density, optionally with Gaussian blobs
/// at positions drawn from `rng`.
pub fn population_field(config: &ExperimentConfig, grid: &Grid<f64>, rng: &mut RandomStream) -> FieldBlock<f64> {
    let pop = &config.population;
    let (nx, ny) = grid.shape();
    let mut field = FieldBlock::constant(nx, ny, pop.density);
    if pop.kind == PopulationKind::Blobs {
        let (w, h) = (nx as f64 * grid.dx(), ny as f64 * grid.dy());
        for _ in 0..pop.blob_count {
            let (cx, cy) = (rng.uniform() * w, rng.uniform() * h);
            let two_r2 = 2.0 * pop.blob_radius * pop.blob_radius;
            field = FieldBlock::from_fn(nx, ny, |(i, j)| {
                let (x, y) = grid.center(i, j);
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                field.get(i, j) + pop.blob_peak * (-d2 / two_r2).exp()
            });
        }
    }
    field
}

/// Everyone susceptible except a fraction infected inside the outbreak disc.
pub fn initial_state(config: &ExperimentConfig, grid: &Grid<f64>, population: &FieldBlock<f64>) -> ModelState<f64> {
    let ob = &config.outbreak;
    let (nx, ny) = grid.shape();
    let cx = ob.x.unwrap_or(nx as f64 * grid.dx() / 2.0);
    let cy = ob.y.unwrap_or(ny as f64 * grid.dy() / 2.0);
    let i_frac = FieldBlock::from_fn(nx, ny, |(i, j)| {
        let (x, y) = grid.center(i, j);
        if (x - cx).hypot(y - cy) <= ob.radius {
            ob.infected_fraction
        } else {
            0.0
        }
    });
    assemble(&i_frac, &FieldBlock::zeros(nx, ny), population, 0.0)
}

/// Named random streams derived from the master seed.
#[derive(Debug, Clone)]
pub struct Streams {
    pub master_seed: u64,
    pub truth: RandomStream,
    pub members: Vec<RandomStream>,
    pub reference: RandomStream,
    pub population: RandomStream,
}

impl Streams {
    pub fn new(master_seed: u64, n_members: usize) -> Self {
        let master = RandomStream::from_seed(master_seed);
        Streams {
            master_seed,
            truth: master.derive("truth"),
            members: (0..n_members).map(|k| master.derive_indexed("member", k + 1)).collect(),
            reference: master.derive("reference"),
            population: master.derive("population"),
        }
    }

    /// Analysis noise of cycle `c` (1-based).
    pub fn filter(&self, cycle: usize) -> RandomStream {
        RandomStream::from_seed(self.master_seed).derive_indexed("filter", cycle)
    }

    /// `(name, seed)` of every stream used by a run with `n_cycles` cycles.
    pub fn seeds(&self, n_cycles: usize) -> Vec<(String, u64)> {
        let mut out = vec![
            ("master".to_string(), self.master_seed),
            ("truth".to_string(), self.truth.seed()),
            ("reference".to_string(), self.reference.seed()),
            ("population".to_string(), self.population.seed()),
        ];
        for (k, s) in self.members.iter().enumerate() {
            out.push((format!("member-{}", k + 1), s.seed()));
        }
        for c in 1..=n_cycles {
            out.push((format!("filter-{c}"), self.filter(c).seed()));
        }
        out
    }
}

/// Grid, population raster, model and initial state of an experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: Grid<f64>,
    pub population: FieldBlock<f64>,
    pub model: SirModel<f64>,
    pub initial: ModelState<f64>,
}

impl Setup {
    pub fn new(config: &ExperimentConfig, streams: &mut Streams) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let population = population_field(config, &grid, &mut streams.population);
        let model = SirModel::new(grid, config.epi_params())?;
        let initial = initial_state(config, &grid, &population);
        Ok(Setup {
            grid,
            population,
            model,
            initial,
        })
    }

    /// Spinup followed by the random warp and amplitude perturbation, with
    /// the result rebalanced against the population.
    pub fn spun_up_member(&self, config: &ExperimentConfig, rng: &mut RandomStream) -> Result<ModelState<f64>> {
        let spun = self.model.advance(&self.initial, config.ensemble.spinup_steps, rng)?;
        let perturbed = perturb_state(
            &spun,
            &self.grid,
            &config.position_spec()?,
            &config.amplitude_spec()?,
            config.perturbation.amplitude_mode,
            rng,
        )?;
        Ok(rebalance(&perturbed, &self.population))
    }
}

/// Advances every state `steps` model steps, each with its own stream, on up
/// to `lanes` threads.
pub fn advance_all(
    model: &SirModel<f64>,
    states: &mut [ModelState<f64>],
    streams: &mut [RandomStream],
    steps: usize,
    lanes: usize,
) -> Result<()> {
    assert_eq!(states.len(), streams.len(), "one stream per state");
    if states.is_empty() || steps == 0 {
        return Ok(());
    }
    let chunk = states.len().div_ceil(lanes.max(1));
    let advance_chunk = |sts: &mut [ModelState<f64>], rngs: &mut [RandomStream]| -> Result<()> {
        for (s, r) in sts.iter_mut().zip(rngs.iter_mut()) {
            *s = model.advance(s, steps, r)?;
        }
        Ok(())
    };
    if lanes <= 1 {
        return advance_chunk(states, streams);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = states
            .chunks_mut(chunk)
            .zip(streams.chunks_mut(chunk))
            .map(|(sts, rngs)| scope.spawn(move || advance_chunk(sts, rngs)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("member advance panicked"))
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(())
}

/// Truth run: spinup and perturbation like a member, then the Infected field
/// at the `n_cycles` analysis times, `cycle_steps` apart.
pub fn synthesize_data(config: &ExperimentConfig, rng: &mut RandomStream) -> Result<Vec<FieldBlock<f64>>> {
    let mut streams = Streams::new(config.ensemble.seed, 0);
    let setup = Setup::new(config, &mut streams)?;
    truth_frames(&setup, config, rng)
}

fn truth_frames(setup: &Setup, config: &ExperimentConfig, rng: &mut RandomStream) -> Result<Vec<FieldBlock<f64>>> {
    let mut truth = setup.spun_up_member(config, rng)?;
    let mut frames = Vec::with_capacity(config.ensemble.n_cycles);
    for c in 0..config.ensemble.n_cycles {
        if c > 0 {
            truth = setup.model.advance(&truth, config.ensemble.cycle_steps, rng)?;
        }
        frames.push(truth.i().clone());
    }
    Ok(frames)
}

/// Observation variances in use; set from the cycle-1 spread when tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsVariances {
    /// Infected fraction, plain variants.
    pub absolute: f64,
    /// Warp components, km², morphing variants.
    pub position: f64,
    /// Infected-fraction residual, morphing variants.
    pub amplitude: f64,
}

/// Mean ensemble variance of one block over the cells where it is nonzero.
fn active_variance(members: &[ModelState<f64>], block: usize) -> f64 {
    let n = members.len() as f64;
    let (nx, ny) = members[0].shape();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..nx {
        for j in 0..ny {
            let vals: Vec<f64> = members.iter().map(|m| m.blocks()[block].get(i, j)).collect();
            if vals.iter().all(|&v| v == vals[0]) {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var > 0.0 {
                acc += var;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// EnKF or FFT EnKF analysis of the Infected block; S and R are updated
/// through their cross-covariance with I.
pub fn plain_analysis(
    variant: Variant,
    members: &[ModelState<f64>],
    data: &FieldBlock<f64>,
    r: f64,
    rng: &mut RandomStream,
) -> Result<Vec<ModelState<f64>>> {
    let obs = [ObsSpec::new(INFECTED, r, data.clone())?];
    let perturbed = perturb_all(&obs, members.len(), rng);
    if variant.is_spectral() {
        fft_analysis_with(members, &obs, &perturbed)
    } else {
        dense_analysis_with(members, &obs, &perturbed)
    }
}

/// Fixed inputs of every cycle of one run.
#[derive(Debug, Clone)]
pub struct CycleContext<'a> {
    pub setup: &'a Setup,
    pub config: &'a ExperimentConfig,
    pub variant: Variant,
    /// `None` until tuned (or taken from the config) in the first cycle.
    pub variances: Option<ObsVariances>,
}

impl CycleContext<'_> {
    fn configured(&self) -> ObsVariances {
        let f = &self.config.filter;
        ObsVariances {
            absolute: f.absolute_variance,
            position: f.position_variance,
            amplitude: f.amplitude_variance,
        }
    }

    fn morphing_options(&self, v: &ObsVariances) -> MorphingOptions<f64> {
        MorphingOptions {
            filter: if self.variant.is_spectral() {
                FilterKind::Spectral
            } else {
                FilterKind::Dense
            },
            observed_block: INFECTED,
            position_variance: v.position,
            amplitude_variance: v.amplitude,
            registration: self.config.registration_options(),
            inversion: InversionOptions::default(),
        }
    }
}

/// Diagnostics of one assimilation cycle. Field dumps are in people.
#[derive(Debug, Clone)]
pub struct CycleReport {
    /// 1-based.
    pub cycle: usize,
    pub time: f64,
    pub variant: Variant,
    pub forecast_mean: ModelState<f64>,
    pub data: FieldBlock<f64>,
    pub analysis_mean: ModelState<f64>,
    /// RMSE of the mean Infected field against the data, people per cell.
    pub rmse_forecast: f64,
    pub rmse_analysis: f64,
    /// Centroid distance of the mean Infected field to the data, km.
    pub centroid_error_forecast: f64,
    pub centroid_error_analysis: f64,
    /// Centroid distance between the forecast and analysis means, km.
    pub centroid_shift: f64,
    pub variances: ObsVariances,
    pub warnings: Vec<String>,
    pub elapsed: Duration,
}

/// Analysis of `ens` against `data` (absolute Infected field), postprocess,
/// then advance every member `cycle_steps`. `member_rngs` holds one stream
/// per member, followed by the reference stream when the ensemble has one.
pub fn run_cycle(
    ens: &Ensemble<ModelState<f64>>,
    data: &FieldBlock<f64>,
    cycle: usize,
    ctx: &mut CycleContext<'_>,
    filter_rng: &mut RandomStream,
    member_rngs: &mut [RandomStream],
) -> Result<(Ensemble<ModelState<f64>>, CycleReport)> {
    let started = Instant::now();
    let setup = ctx.setup;
    let (grid, pop) = (&setup.grid, &setup.population);
    let threshold = ctx.config.filter.threshold;
    grid.check(data)?;
    if ens.len() < 2 {
        return Err(Error::EnsembleTooSmall(ens.len()));
    }
    let time = ens.members[0].time;
    let frac: Vec<ModelState<f64>> = ens.members.iter().map(|m| to_fraction(m, pop)).collect();
    let data_frac = field_fraction(data, pop);

    let mut warnings = Vec::new();
    let (forecast_mean, analysed, new_reference, variances) = if ctx.variant.is_morphing() {
        let reference = ens.reference.as_ref().ok_or(Error::MissingReference)?;
        let ens_frac = Ensemble::with_reference(frac, to_fraction(reference, pop));
        let provisional = ctx.variances.unwrap_or_else(|| ctx.configured());
        let forecast = morph_forecast(&ens_frac, &data_frac, grid, &ctx.morphing_options(&provisional))?;
        let variances = *ctx.variances.get_or_insert_with(|| {
            let mut v = provisional;
            if ctx.config.filter.auto_tune {
                let s = forecast.position_spread();
                if s > 0.0 && s.is_finite() {
                    v.position = s;
                }
            }
            v
        });
        let outcome = morph_update(&forecast, grid, &ctx.morphing_options(&variances), filter_rng)?;
        warnings.extend(outcome.warnings.iter().cloned());
        let reference = outcome.ensemble.reference.clone().expect("morphing keeps a reference");
        (
            from_fraction(&outcome.forecast_mean, pop),
            outcome.ensemble.members,
            Some(reference),
            variances,
        )
    } else {
        let variances = *ctx.variances.get_or_insert_with(|| {
            let mut v = ObsVariances {
                absolute: ctx.config.filter.absolute_variance,
                position: ctx.config.filter.position_variance,
                amplitude: ctx.config.filter.amplitude_variance,
            };
            if ctx.config.filter.auto_tune {
                let s = active_variance(&frac, INFECTED);
                if s > 0.0 && s.is_finite() {
                    v.absolute = s;
                }
            }
            v
        });
        let analysed = plain_analysis(ctx.variant, &frac, &data_frac, variances.absolute, filter_rng)?;
        (ensemble_mean(ens)?, analysed, None, variances)
    };

    let members: Vec<ModelState<f64>> = analysed.iter().map(|m| postprocess(m, pop, threshold)).collect();
    let reference = new_reference.map(|r| postprocess(&r, pop, threshold));
    let analysis_mean = match &reference {
        Some(r) => r.clone(),
        None => ensemble_mean(&Ensemble::new(members.clone()))?,
    };

    let centroid_error_forecast = centroid_error(forecast_mean.i(), data, grid)?;
    let centroid_error_analysis = centroid_error(analysis_mean.i(), data, grid)?;
    let centroid_shift = centroid_error(forecast_mean.i(), analysis_mean.i(), grid)?;
    let report = CycleReport {
        cycle,
        time,
        variant: ctx.variant,
        rmse_forecast: forecast_mean.i().rmse(data),
        rmse_analysis: analysis_mean.i().rmse(data),
        centroid_error_forecast,
        centroid_error_analysis,
        centroid_shift,
        forecast_mean,
        data: data.clone(),
        analysis_mean,
        variances,
        warnings,
        elapsed: Duration::ZERO,
    };
    for w in &report.warnings {
        log::warn!("cycle {cycle}: {w}");
    }

    let mut states = members;
    let has_reference = reference.is_some();
    states.extend(reference);
    let expected = ens.len() + usize::from(has_reference);
    if member_rngs.len() < expected {
        return Err(Error::InvalidParameter {
            name: "member_rngs",
            reason: format!("need {expected} streams, got {}", member_rngs.len()),
        });
    }
    advance_all(
        &setup.model,
        &mut states,
        &mut member_rngs[..expected],
        ctx.config.ensemble.cycle_steps,
        ctx.config.ensemble.lanes,
    )?;
    let reference = if has_reference { states.pop() } else { None };
    let next = Ensemble {
        members: states,
        reference,
    };
    let mut report = report;
    report.elapsed = started.elapsed();
    Ok((next, report))
}

/// Receives the products of [`run_experiment_with`] as they appear, so a
/// failing cycle leaves the earlier output in place.
pub trait ExperimentSink {
    fn spinup(&mut self, _ensemble: &Ensemble<ModelState<f64>>, _truth_frames: &[FieldBlock<f64>]) -> Result<()> {
        Ok(())
    }

    fn cycle(&mut self, report: &CycleReport) -> Result<()>;
}

impl ExperimentSink for Vec<CycleReport> {
    fn cycle(&mut self, report: &CycleReport) -> Result<()> {
        self.push(report.clone());
        Ok(())
    }
}

/// Timings of the phases of a run.
#[derive(Debug, Clone, Default)]
pub struct RunTimings {
    pub spinup: Duration,
    pub cycles: Vec<Duration>,
}

/// Spinup, initial ensemble and `n_cycles` cycles against synthesized data.
pub fn run_experiment_with(config: &ExperimentConfig, sink: &mut dyn ExperimentSink) -> Result<RunTimings> {
    let started = Instant::now();
    let n = config.ensemble.n_ensemble;
    let variant = config.filter.variant;
    let mut streams = Streams::new(config.ensemble.seed, n);
    let setup = Setup::new(config, &mut streams)?;

    let frames = truth_frames(&setup, config, &mut streams.truth)?;
    let mut members = Vec::with_capacity(n);
    for rng in streams.members.iter_mut() {
        members.push(setup.spun_up_member(config, rng)?);
    }
    let reference = if variant.is_morphing() {
        Some(
            setup
                .model
                .advance(&setup.initial, config.ensemble.spinup_steps, &mut streams.reference)?,
        )
    } else {
        None
    };
    let mut ens = Ensemble { members, reference };
    sink.spinup(&ens, &frames)?;
    let mut timings = RunTimings {
        spinup: started.elapsed(),
        cycles: Vec::new(),
    };

    let mut ctx = CycleContext {
        setup: &setup,
        config,
        variant,
        variances: None,
    };
    let mut member_rngs: Vec<RandomStream> = streams.members.clone();
    member_rngs.push(streams.reference.clone());
    for (c, data) in frames.iter().enumerate() {
        let cycle = c + 1;
        let mut filter_rng = streams.filter(cycle);
        let (next, report) = run_cycle(&ens, data, cycle, &mut ctx, &mut filter_rng, &mut member_rngs)?;
        log::info!(
            "cycle {cycle} {variant}: centroid error {:.1} -> {:.1} km, rmse {:.2} -> {:.2}",
            report.centroid_error_forecast,
            report.centroid_error_analysis,
            report.rmse_forecast,
            report.rmse_analysis
        );
        timings.cycles.push(report.elapsed);
        sink.cycle(&report)?;
        ens = next;
    }
    Ok(timings)
}

/// [`run_experiment_with`] collecting the reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<CycleReport>> {
    let mut reports = Vec::new();
    run_experiment_with(config, &mut reports)?;
    Ok(reports)
}

/// Unperturbed model run from the initial state on the truth stream;
/// returns the states at steps `0, every, 2·every, …` up to `steps`.
pub fn simulate(config: &ExperimentConfig, steps: usize, every: usize) -> Result<Vec<ModelState<f64>>> {
    let mut streams = Streams::new(config.ensemble.seed, 0);
    let setup = Setup::new(config, &mut streams)?;
    let every = every.max(1);
    let mut state = setup.initial.clone();
    let mut out = vec![state.clone()];
    let mut done = 0;
    while done < steps {
        let k = every.min(steps - done);
        state = setup.model.advance(&state, k, &mut streams.truth)?;
        done += k;
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkf::dense_analysis_with_covariance;
    use crate::fft_enkf::spectral_covariance_matrix;
    use crate::morphing::AmplitudePerturbation;

    fn state(s: f64, i: f64, r: f64) -> ModelState<f64> {
        ModelState::new(
            FieldBlock::constant(4, 4, s),
            FieldBlock::constant(4, 4, i),
            FieldBlock::constant(4, 4, r),
            0.0,
        )
        .unwrap()
    }

    fn small_config(n: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.grid.nx = n;
        c.grid.ny = n;
        c.model.alpha = 2e-7;
        c.model.q = 2e-3;
        c.outbreak.radius = 20.0;
        c.ensemble.spinup_steps = 10;
        c.ensemble.cycle_steps = 5;
        c.ensemble.n_cycles = 2;
        c.perturbation.position_rms = 10.0;
        c
    }

    #[test]
    fn fractions() {
        let pop = FieldBlock::from_fn(
            4,
            4,
            |(i, j)| if i == 0 && j == 0 { 0.0 } else { 100.0 + (i * j) as f64 },
        );
        let mut u = state(0.0, 0.0, 0.0);
        *u.s_mut() = pop.clone();
        let f = to_fraction(&u, &pop);
        assert_eq!(f.s().get(0, 0), 0.0);
        assert_eq!(f.s().get(2, 3), 1.0);
        assert_eq!(f.i().max_abs(), 0.0);

        let mut rng = RandomStream::from_seed(6);
        let v = ModelState::new(
            FieldBlock::from_fn(4, 4, |(i, j)| pop.get(i, j) * rng.uniform()),
            FieldBlock::from_fn(4, 4, |(i, j)| pop.get(i, j) * rng.uniform()),
            FieldBlock::from_fn(4, 4, |(i, j)| pop.get(i, j) * rng.uniform()),
            1.0,
        )
        .unwrap();
        let back = from_fraction(&to_fraction(&v, &pop), &pop);
        for (a, b) in back.blocks().iter().zip(v.blocks()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn postprocess_examples() {
        let pop = FieldBlock::constant(4, 4, 50.0);
        let out = postprocess(&state(0.7, 0.2, 0.1), &pop, 0.01);
        assert!((out.s().get(1, 1) - 35.0).abs() < 1e-12);
        assert!((out.i().get(1, 1) - 10.0).abs() < 1e-12);
        assert!((out.r().get(1, 1) - 5.0).abs() < 1e-12);

        let out = postprocess(&state(0.895, 0.005, 0.1), &pop, 0.01);
        assert_eq!(out.i().get(0, 0), 0.0);
        assert!((out.cell_totals().get(0, 0) - 50.0).abs() < 1e-12);

        let out = postprocess(&state(1.4, -0.2, 0.1), &pop, 0.01);
        assert!((out.s().get(2, 2) / 50.0 - 1.0 / 1.1).abs() < 1e-12);
        assert_eq!(out.i().get(2, 2), 0.0);
        assert!((out.r().get(2, 2) / 50.0 - 0.1 / 1.1).abs() < 1e-12);

        let out = postprocess(&state(-1.0, 0.0, -3.0), &pop, 0.01);
        assert_eq!(out.s().get(3, 3), 50.0);
    }

    #[test]
    fn postprocess_preserves_cell_population() {
        let mut rng = RandomStream::from_seed(12);
        for _ in 0..50 {
            let pop = FieldBlock::from_fn(6, 5, |_| 1.0 + 1e5 * rng.uniform());
            let u = ModelState::new(
                FieldBlock::from_fn(6, 5, |_| 2.0 * rng.uniform() - 0.5),
                FieldBlock::from_fn(6, 5, |_| 2.0 * rng.uniform() - 0.5),
                FieldBlock::from_fn(6, 5, |_| 2.0 * rng.uniform() - 0.5),
                0.0,
            )
            .unwrap();
            let out = postprocess(&u, &pop, 0.01);
            let tot = out.cell_totals();
            for (t, p) in tot.values().iter().zip(pop.values()) {
                assert!((t - p).abs() <= 1e-9 * p);
            }
            assert!(out.blocks().iter().all(|b| b.min() >= 0.0));
        }
    }

    #[test]
    fn centroids() {
        let g = Grid::new(5, 5, 10.0, 10.0).unwrap();
        let mut a = FieldBlock::zeros(5, 5);
        a.values_mut()[[1, 2]] = 1.0;
        let mut b = FieldBlock::zeros(5, 5);
        b.values_mut()[[2, 2]] = 1.0;
        assert_eq!(centroid_error(&a, &a, &g).unwrap(), 0.0);
        assert!((centroid_error(&a, &b, &g).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(centroid_error(&a, &g.zeros(), &g), Err(Error::ZeroMass)));

        let mut rng = RandomStream::from_seed(1);
        let f = FieldBlock::from_fn(5, 5, |_| rng.uniform());
        let h = FieldBlock::from_fn(5, 5, |_| rng.uniform());
        let oracle = |f: &FieldBlock<f64>| {
            let (mut m, mut x, mut y) = (0.0, 0.0, 0.0);
            for i in 0..5 {
                for j in 0..5 {
                    m += f.get(i, j);
                    x += f.get(i, j) * (i as f64 + 0.5) * 10.0;
                    y += f.get(i, j) * (j as f64 + 0.5) * 10.0;
                }
            }
            (x / m, y / m)
        };
        let (fa, fb) = (oracle(&f), oracle(&h));
        let want = ((fa.0 - fb.0).powi(2) + (fa.1 - fb.1).powi(2)).sqrt();
        assert!((centroid_error(&f, &h, &g).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn population_and_initial_state() {
        let mut c = small_config(16);
        c.population.kind = PopulationKind::Blobs;
        let g = c.grid().unwrap();
        let pop = population_field(&c, &g, &mut RandomStream::from_seed(2));
        assert!(pop.min() >= c.population.density);
        assert!(pop.max() > c.population.density);
        let u = initial_state(&c, &g, &pop);
        for (t, p) in u.cell_totals().values().iter().zip(pop.values()) {
            assert!((t - p).abs() <= 1e-9 * p);
        }
        assert!(u.i().sum() > 0.0);
    }

    #[test]
    fn spun_up_members_fit_the_population() {
        for mode in [AmplitudePerturbation::Multiplicative, AmplitudePerturbation::Additive] {
            let mut c = small_config(20);
            c.perturbation.amplitude_mode = mode;
            if mode == AmplitudePerturbation::Additive {
                c.perturbation.amplitude_rms = 50.0;
            }
            let mut streams = Streams::new(3, 2);
            let setup = Setup::new(&c, &mut streams).unwrap();
            let a = setup.spun_up_member(&c, &mut streams.members[0]).unwrap();
            let b = setup.spun_up_member(&c, &mut streams.members[1]).unwrap();
            assert_ne!(a, b);
            for u in [a, b] {
                assert!(u.s().min() >= 0.0 && u.i().min() >= 0.0 && u.r().min() >= 0.0);
                for (t, p) in u.cell_totals().values().iter().zip(setup.population.values()) {
                    assert!((t - p).abs() <= 1e-9 * p);
                }
            }
        }
    }

    #[test]
    fn synthesized_data() {
        let mut c = small_config(16);
        let stream = || Streams::new(c.ensemble.seed, 0).truth;
        let a = synthesize_data(&c, &mut stream()).unwrap();
        let b = synthesize_data(&c, &mut stream()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert!(a[0].sum() > 0.0);

        c.outbreak.infected_fraction = 0.0;
        let z = synthesize_data(&c, &mut stream()).unwrap();
        assert!(z.iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn zero_spread_plain_cycle_keeps_the_forecast() {
        let c = small_config(16);
        let mut streams = Streams::new(c.ensemble.seed, 3);
        let setup = Setup::new(&c, &mut streams).unwrap();
        // fractions are 0 or above the threshold, so postprocessing is exact
        let u = postprocess(&to_fraction(&setup.initial, &setup.population), &setup.population, 0.01);
        let data = u.i().map(|v| v * 1.3 + 5.0);
        for variant in [Variant::Enkf, Variant::FftEnkf] {
            let ens = Ensemble::new(vec![u.clone(); 3]);
            let mut ctx = CycleContext {
                setup: &setup,
                config: &c,
                variant,
                variances: None,
            };
            let mut rngs = streams.members.clone();
            let (_, rep) = run_cycle(&ens, &data, 1, &mut ctx, &mut RandomStream::from_seed(1), &mut rngs).unwrap();
            let diff = rep.analysis_mean.i().max_abs_diff(u.i());
            assert!(diff < 1e-9 * u.i().max(), "{diff}");
            assert!((rep.rmse_analysis - rep.rmse_forecast).abs() < 1e-9);
            assert!(rep.centroid_shift < 1e-9);
            assert_eq!(rep.variances.absolute, c.filter.absolute_variance);
        }
    }

    #[test]
    fn plain_dispatch_matches_spectral_covariance_oracle() {
        let c = small_config(12);
        let mut streams = Streams::new(4, 5);
        let setup = Setup::new(&c, &mut streams).unwrap();
        let members: Vec<ModelState<f64>> = streams
            .members
            .iter_mut()
            .map(|r| to_fraction(&setup.spun_up_member(&c, r).unwrap(), &setup.population))
            .collect();
        let data = members[0].i().map(|v| v * 0.8);
        let r = 1e-3;
        let fft = plain_analysis(Variant::FftEnkf, &members, &data, r, &mut RandomStream::from_seed(9)).unwrap();

        let obs = [ObsSpec::new(INFECTED, r, data.clone()).unwrap()];
        let perturbed = perturb_all(&obs, members.len(), &mut RandomStream::from_seed(9));
        let cov = spectral_covariance_matrix(&members, &[INFECTED]).unwrap();
        let dense = dense_analysis_with_covariance(&members, &obs, &perturbed, &cov).unwrap();
        for (a, b) in fft.iter().zip(&dense) {
            for (x, y) in a.blocks().iter().zip(b.blocks()) {
                assert!(x.max_abs_diff(y) < 1e-10);
            }
        }
    }

    #[test]
    fn lanes_do_not_change_results() {
        let mut c = small_config(16);
        c.filter.variant = Variant::Enkf;
        let one = run_experiment(&c).unwrap();
        c.ensemble.lanes = 3;
        let three = run_experiment(&c).unwrap();
        assert_eq!(one.len(), 2);
        for (a, b) in one.iter().zip(&three) {
            assert_eq!(a.analysis_mean, b.analysis_mean);
            assert_eq!(a.rmse_forecast.to_bits(), b.rmse_forecast.to_bits());
        }
    }

    #[test]
    fn no_cycles_gives_no_reports() {
        let mut c = small_config(16);
        c.ensemble.n_cycles = 0;
        assert!(run_experiment(&c).unwrap().is_empty());
    }

    #[test]
    fn simulate_conserves_population() {
        let c = small_config(16);
        let frames = simulate(&c, 12, 5).unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames[3].time, 12.0);
        let p0 = crate::grid::total_population(&frames[0]);
        for f in &frames {
            assert!((crate::grid::total_population(f) - p0).abs() <= 1e-9 * p0);
        }
    }
}
