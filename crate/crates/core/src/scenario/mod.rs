//! Randomized closed-loop days: meals, boluses, rescue carbs, CGM noise,
//! cohort variability — the machinery that produces the raw state→action
//! dataset by running the controller against the nonlinear plant.
//!
//! A campaign is a grid of (subject, day) cells. Every cell derives its own
//! RNG seed from the master seed, so cells are independent and the whole
//! campaign is reproducible bitwise regardless of execution order; subjects
//! are simulated in parallel and written out in index order.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataPair, DatasetWriter};
use crate::error::{Error, Result};
use crate::glucose::{
    basal_model, glucose_rate, integrate_step, kalman_step, EstimatorState, InsulinHistory,
    KalmanNoise, PlantState, SubjectParams,
};
use crate::mpc::{mpc_step, AugmentedState, LinearModel, MpcParams};
use crate::qp::SolveStatus;

/// Meal absorption class; the two time constants shape the biexponential
/// glucose appearance curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MealAbsorption {
    Fast,
    Slow,
}

impl MealAbsorption {
    /// `(tau_1, tau_2)` of `e^{-t/tau_1} - e^{-t/tau_2}`, minutes.
    pub fn time_constants(self) -> (f64, f64) {
        match self {
            MealAbsorption::Fast => (40.0, 20.0),
            MealAbsorption::Slow => (90.0, 45.0),
        }
    }
}

/// One scheduled meal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MealEvent {
    /// Minutes after midnight.
    pub time: f64,
    /// Grams of carbohydrate.
    pub carbs: f64,
    pub absorption: MealAbsorption,
    /// Whether the user announces this meal with a bolus (hybrid mode).
    pub bolused: bool,
    /// Announced bolus, U.
    pub bolus_size: f64,
}

impl MealEvent {
    pub fn new(
        time: f64,
        carbs: f64,
        absorption: MealAbsorption,
        bolused: bool,
        bolus_size: f64,
    ) -> Result<Self> {
        if !time.is_finite() || !(0.0..1440.0).contains(&time) {
            return Err(Error::InvalidParams(format!("meal time {time} outside the day")));
        }
        if !carbs.is_finite() || !(0.0..=200.0).contains(&carbs) {
            return Err(Error::InvalidParams(format!("carbs {carbs} outside 0..=200 g")));
        }
        if !bolus_size.is_finite() || bolus_size < 0.0 {
            return Err(Error::InvalidParams("bolus must be nonnegative".into()));
        }
        Ok(Self { time, carbs, absorption, bolused, bolus_size })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Controller handles everything; meals are unannounced disturbances.
    FullClosedLoop,
    /// Some meals carry a user bolus on top of the controller output.
    Hybrid,
}

/// One day's worth of disturbances and its noise seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Sorted by time.
    pub meals: Vec<MealEvent>,
    pub mode: ControlMode,
    pub rescue_carbs_enabled: bool,
    /// CGM additive noise, mg/dL (standard deviation).
    pub cgm_noise_sd: f64,
    /// Seed of the day's measurement-noise stream.
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !self.meals.windows(2).all(|w| w[0].time <= w[1].time) {
            return Err(Error::InvalidParams("meals must be sorted by time".into()));
        }
        if !self.cgm_noise_sd.is_finite() || self.cgm_noise_sd < 0.0 {
            return Err(Error::InvalidParams("CGM noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Distribution the daily meal schedule is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MealDistribution {
    pub count_min: usize,
    pub count_max: usize,
    /// Carbohydrate range, g (uniform).
    pub carbs_min: f64,
    pub carbs_max: f64,
    /// Mealtime window, minutes after midnight (uniform, gap-constrained).
    pub time_start: f64,
    pub time_end: f64,
    pub min_gap: f64,
    /// When set, mealtimes are exactly these instants (count follows suit).
    pub fixed_times: Option<Vec<f64>>,
    pub slow_probability: f64,
}

impl Default for MealDistribution {
    fn default() -> Self {
        Self {
            count_min: 2,
            count_max: 5,
            carbs_min: 20.0,
            carbs_max: 120.0,
            time_start: 360.0,
            time_end: 1320.0,
            min_gap: 90.0,
            fixed_times: None,
            slow_probability: 0.3,
        }
    }
}

/// Plant/loop mechanics shared by every simulated day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    /// Control period, minutes.
    pub period: f64,
    /// Cycles per day (24 h at the control period).
    pub cycles_per_day: usize,
    /// Peak glucose appearance per gram of carbohydrate, mg/dL/min/g.
    pub meal_gain: f64,
    /// Rescue-carb dose, g; trigger threshold, mg/dL; lockout, minutes.
    pub rescue_carbs: f64,
    pub rescue_threshold: f64,
    pub rescue_lockout: f64,
    /// Linear insulin-activity decay horizon, minutes.
    pub iob_decay: f64,
    /// Initial estimator covariance (diagonal).
    pub estimator_p0: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            period: 5.0,
            cycles_per_day: 288,
            meal_gain: 0.05,
            rescue_carbs: 15.0,
            rescue_threshold: 70.0,
            rescue_lockout: 30.0,
            iob_decay: 240.0,
            estimator_p0: 1.0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        let fin = [
            self.period,
            self.meal_gain,
            self.rescue_carbs,
            self.rescue_threshold,
            self.rescue_lockout,
            self.iob_decay,
            self.estimator_p0,
        ];
        if fin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simulation settings"));
        }
        if self.period <= 0.0 || self.cycles_per_day == 0 {
            return Err(Error::InvalidParams("period and cycle count must be positive".into()));
        }
        if self.meal_gain <= 0.0 || self.iob_decay <= self.period || self.estimator_p0 <= 0.0 {
            return Err(Error::InvalidParams("simulation settings out of range".into()));
        }
        if self.rescue_carbs < 0.0 || self.rescue_lockout < 0.0 {
            return Err(Error::InvalidParams("rescue settings must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Campaign description: cohort size, randomization, scenario distribution,
/// controller tuning, seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub n_subjects: usize,
    pub days_per_subject: usize,
    /// Lognormal sigma applied multiplicatively to each subject parameter.
    pub param_spread: f64,
    /// Basal glucose is held at nominal unless explicitly randomized.
    pub randomize_g_b: bool,
    pub meals: MealDistribution,
    pub mode: ControlMode,
    /// Probability that a meal is announced (hybrid mode only).
    pub bolus_probability: f64,
    /// Carbohydrate ratio for announced boluses, g/U.
    pub carb_ratio: f64,
    pub rescue_enabled: bool,
    pub cgm_noise_sd: f64,
    pub settings: SimSettings,
    /// Cohort nominal physiology; per-subject draws randomize around it.
    pub nominal: SubjectParams<f64>,
    /// Controller tuning; `u_b` is replaced per subject.
    pub mpc: MpcParams<f64>,
    /// Audit every `audit_stride`-th record by recomputing the control law.
    pub audit_stride: usize,
    pub master_seed: u64,
}

impl CampaignConfig {
    /// Desk-scale default: 20 subjects x 250 days = 1.44e6 records.
    pub fn desk_default(master_seed: u64) -> Self {
        let nominal = SubjectParams::<f64>::nominal();
        Self {
            n_subjects: 20,
            days_per_subject: 250,
            param_spread: 0.2,
            randomize_g_b: false,
            meals: MealDistribution::default(),
            mode: ControlMode::Hybrid,
            bolus_probability: 0.5,
            carb_ratio: 10.0,
            rescue_enabled: true,
            cgm_noise_sd: 2.0,
            settings: SimSettings::default(),
            mpc: MpcParams::defaults(nominal.u_b),
            nominal,
            audit_stride: 100,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.days_per_subject == 0 {
            return Err(Error::InvalidParams("cohort counts must be at least 1".into()));
        }
        if !self.param_spread.is_finite() || self.param_spread < 0.0 {
            return Err(Error::InvalidParams("parameter spread must be nonnegative".into()));
        }
        let m = &self.meals;
        if m.count_min > m.count_max || m.count_max > 16 {
            return Err(Error::InvalidParams("meal count range".into()));
        }
        if !(0.0..=200.0).contains(&m.carbs_min)
            || !(0.0..=200.0).contains(&m.carbs_max)
            || m.carbs_min > m.carbs_max
        {
            return Err(Error::InvalidParams("carb range must sit inside 0..=200 g".into()));
        }
        if !(0.0..1440.0).contains(&m.time_start)
            || !(m.time_start..1440.0).contains(&m.time_end)
            || m.min_gap < 0.0
        {
            return Err(Error::InvalidParams("mealtime window".into()));
        }
        if let Some(times) = &m.fixed_times {
            if times.iter().any(|t| !(0.0..1440.0).contains(t)) {
                return Err(Error::InvalidParams("fixed mealtimes outside the day".into()));
            }
        }
        if !(0.0..=1.0).contains(&m.slow_probability)
            || !(0.0..=1.0).contains(&self.bolus_probability)
        {
            return Err(Error::InvalidParams("probabilities must lie in [0,1]".into()));
        }
        if self.carb_ratio <= 0.0 || !self.carb_ratio.is_finite() {
            return Err(Error::InvalidParams("carb ratio must be positive".into()));
        }
        if !self.cgm_noise_sd.is_finite() || self.cgm_noise_sd < 0.0 {
            return Err(Error::InvalidParams("CGM noise must be nonnegative".into()));
        }
        if self.audit_stride == 0 {
            return Err(Error::InvalidParams("audit stride must be at least 1".into()));
        }
        self.settings.validate()
    }
}

/// Deterministic per-cell seed derivation (splitmix64 mixing), so any
/// (subject, day) cell can be replayed in isolation.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(master ^ splitmix64(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ splitmix64(index)))
}

/// Draw one day's scenario. Draw order is fixed (times, then per-meal carbs,
/// absorption, bolus flag, then the noise seed) so identical RNG state gives
/// an identical scenario.
pub fn sample_scenario<R: Rng>(rng: &mut R, config: &CampaignConfig) -> Scenario {
    let m = &config.meals;
    let times: Vec<f64> = if let Some(fixed) = &m.fixed_times {
        let mut t = fixed.clone();
        t.sort_by(f64::total_cmp);
        t
    } else {
        let count = rng.random_range(m.count_min..=m.count_max);
        let mut accepted = Vec::new();
        // Gap-constrained rejection sampling, bounded; the final attempt is
        // accepted as-is so the draw always terminates.
        for attempt in 0..100 {
            let mut t: Vec<f64> =
                (0..count).map(|_| rng.random_range(m.time_start..=m.time_end)).collect();
            t.sort_by(f64::total_cmp);
            if t.windows(2).all(|w| w[1] - w[0] >= m.min_gap) || attempt == 99 {
                accepted = t;
                break;
            }
        }
        accepted
    };
    let meals = times
        .into_iter()
        .map(|time| {
            let carbs = if m.carbs_max > m.carbs_min {
                rng.random_range(m.carbs_min..=m.carbs_max)
            } else {
                m.carbs_min
            };
            let absorption = if rng.random_bool(m.slow_probability) {
                MealAbsorption::Slow
            } else {
                MealAbsorption::Fast
            };
            let bolused =
                config.mode == ControlMode::Hybrid && rng.random_bool(config.bolus_probability);
            let bolus_size = if bolused { carbs / config.carb_ratio } else { 0.0 };
            MealEvent::new(time, carbs, absorption, bolused, bolus_size)
                .expect("drawn meal within configured ranges")
        })
        .collect();
    Scenario {
        meals,
        mode: config.mode,
        rescue_carbs_enabled: config.rescue_enabled,
        cgm_noise_sd: config.cgm_noise_sd,
        seed: rng.next_u64(),
    }
}

/// Glucose appearance at time `t` from a set of meals: each contributes a
/// biexponential normalized to unit peak, scaled by `carbs * gain`.
fn disturbance_at(meals: &[(f64, f64, MealAbsorption)], gain: f64, t: f64) -> f64 {
    let mut d = 0.0;
    for &(time, carbs, absorption) in meals {
        let s = t - time;
        if s <= 0.0 {
            continue;
        }
        let (t1, t2) = absorption.time_constants();
        // Peak of e^{-s/t1} - e^{-s/t2} sits at s* = ln(t1/t2) * t1 t2/(t1-t2).
        let s_star = (t1 / t2).ln() * t1 * t2 / (t1 - t2);
        let peak = (-s_star / t1).exp() - (-s_star / t2).exp();
        d += carbs * gain * ((-s / t1).exp() - (-s / t2).exp()) / peak;
    }
    d
}

/// Per-cycle closed-loop record of one simulated day.
#[derive(Clone, Debug, Default)]
pub struct DayTrace {
    /// Cycle start, minutes after midnight.
    pub minutes: Vec<f64>,
    /// Plant glucose at cycle start, mg/dL.
    pub glucose: Vec<f64>,
    /// CGM reading at cycle start, mg/dL.
    pub measured: Vec<f64>,
    /// Total delivery over the cycle, mU/min (absolute).
    pub delivered: Vec<f64>,
    /// Meal-driven appearance at cycle start, mg/dL/min.
    pub disturbance: Vec<f64>,
}

/// Result of simulating one day.
#[derive(Clone, Debug)]
pub struct DayOutcome {
    pub pairs: Vec<DataPair>,
    pub trace: DayTrace,
    /// Plant hit the glucose floor: the day must not enter the dataset.
    pub degenerate: bool,
    pub rescue_events: usize,
    /// Control cycles whose QP hit the iteration cap (used, but telemetry).
    pub maxiter_steps: usize,
}

/// Run one closed-loop day: 5-minute cycles of measure → estimate → control →
/// deliver → integrate. Returns every emitted state→action pair plus the
/// plant-side trace. Solver failure aborts the day with an error.
pub fn simulate_day(
    subject: &SubjectParams<f64>,
    scenario: &Scenario,
    settings: &SimSettings,
    model: &LinearModel<f64>,
    params: &MpcParams<f64>,
) -> Result<DayOutcome> {
    scenario.validate()?;
    settings.validate()?;
    params.validate()?;
    let n = settings.cycles_per_day;
    let period = settings.period;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let mut plant = PlantState::equilibrium(subject);
    let mut est = EstimatorState::<f64>::new(settings.estimator_p0);
    let kalman_noise = KalmanNoise::default_cgm();
    let mut history = InsulinHistory::new(period, settings.iob_decay)?;
    history.preload_basal(subject.u_b, 0.0);

    let mut meals: Vec<(f64, f64, MealAbsorption)> =
        scenario.meals.iter().map(|m| (m.time, m.carbs, m.absorption)).collect();

    let mut measured_hist: Vec<f64> = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut trace = DayTrace::default();
    let mut u_prev = 0.0; // controller's previous action, deviation
    let mut delivered_prev_dev = 0.0; // actual delivery over the last cycle
    let mut pending_bolus_mu = 0.0;
    let mut lockout_until = f64::NEG_INFINITY;
    let mut degenerate = false;
    let mut rescue_events = 0usize;
    let mut maxiter_steps = 0usize;

    // One-minute plant substeps; the appearance signal is refreshed at each.
    let substeps = (period.ceil() as usize).max(1);
    let dt = period / substeps as f64;

    for cycle in 0..n {
        let t = cycle as f64 * period;
        let g_start = plant.g;

        let z: f64 = noise_rng.sample(StandardNormal);
        let y_meas = plant.g + scenario.cgm_noise_sd * z;

        if scenario.rescue_carbs_enabled
            && y_meas < settings.rescue_threshold
            && t >= lockout_until
        {
            meals.push((t, settings.rescue_carbs, MealAbsorption::Fast));
            lockout_until = t + settings.rescue_lockout;
            rescue_events += 1;
        }

        measured_hist.push(y_meas);
        let y_dot = if measured_hist.len() >= 3 {
            glucose_rate(&measured_hist, period)?
        } else {
            0.0
        };

        est = kalman_step(&est, y_meas - subject.g_b, delivered_prev_dev, model, &kalman_noise)?;
        let iob = history.iob(subject.u_b, t)?;
        let state = AugmentedState::new(est.x_hat, est.d_hat, y_dot, iob.max(0.0))?;

        let step = mpc_step(&state, model, params, u_prev)?;
        if step.status == SolveStatus::MaxIter {
            maxiter_steps += 1;
        }
        pairs.push(DataPair::from_state(&state, step.u)?);

        // Announced boluses join the delivery stream at their meal's cycle
        // and drain as fast as the delivery ceiling allows.
        for m in &scenario.meals {
            if m.bolused && m.time >= t && m.time < t + period {
                pending_bolus_mu += m.bolus_size * 1000.0;
            }
        }
        let controller_abs = subject.u_b + step.u;
        let bolus_rate = if pending_bolus_mu > 0.0 {
            (pending_bolus_mu / period).min((params.u_max_abs - controller_abs).max(0.0))
        } else {
            0.0
        };
        pending_bolus_mu = (pending_bolus_mu - bolus_rate * period).max(0.0);
        let total = (controller_abs + bolus_rate).clamp(0.0, params.u_max_abs);

        trace.minutes.push(t);
        trace.glucose.push(g_start);
        trace.measured.push(y_meas);
        trace.delivered.push(total);
        trace.disturbance.push(disturbance_at(&meals, settings.meal_gain, t));

        for s in 0..substeps {
            plant.d = disturbance_at(&meals, settings.meal_gain, t + dt * s as f64);
            let (next, clamped) = integrate_step(&plant, total, dt, subject)?;
            plant = next;
            if clamped {
                degenerate = true;
            }
        }
        history.push(t, total)?;
        u_prev = step.u;
        delivered_prev_dev = total - subject.u_b;
    }

    Ok(DayOutcome { pairs, trace, degenerate, rescue_events, maxiter_steps })
}

/// Draw a subject around the nominal parameter set: independent lognormal
/// multipliers `e^{sigma z}` per parameter, fixed draw order. Basal glucose
/// stays nominal unless `randomize_g_b` is set (then clamped to its valid
/// range).
pub fn randomize_subject<R: Rng>(rng: &mut R, config: &CampaignConfig) -> Result<SubjectParams<f64>> {
    let nom = &config.nominal;
    let sigma = config.param_spread;
    let mut draw = |v: f64| {
        let z: f64 = rng.sample(StandardNormal);
        v * (sigma * z).exp()
    };
    let s_g = draw(nom.s_g);
    let s_i = draw(nom.s_i);
    let p_2 = draw(nom.p_2);
    let k_a1 = draw(nom.k_a1);
    let k_d = draw(nom.k_d);
    let k_a2 = draw(nom.k_a2);
    let k_cl = draw(nom.k_cl);
    let v_i = draw(nom.v_i);
    let bw = draw(nom.bw);
    let i_b = draw(nom.i_b);
    let g_b = if config.randomize_g_b {
        draw(nom.g_b).clamp(70.0, 180.0)
    } else {
        nom.g_b
    };
    SubjectParams::new(s_g, g_b, s_i, p_2, k_a1, k_d, k_a2, k_cl, v_i, bw, i_b)
}

/// Campaign-level telemetry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub records_written: u64,
    pub days_simulated: usize,
    /// Days excluded because the plant hit the glucose floor.
    pub days_excluded: usize,
    /// Days aborted by a solver error.
    pub days_aborted: usize,
    pub rescue_events: u64,
    pub maxiter_steps: u64,
    /// Plant-side statistics over retained days.
    pub mean_glucose: f64,
    /// Fraction of cycles with plant glucose in [70, 180] mg/dL.
    pub time_in_range: f64,
    /// Control-law round-trip audit over sampled records.
    pub audit_checked: u64,
    pub audit_mismatches: u64,
}

struct SubjectBatch {
    days: Vec<DayOutcome>,
    excluded: usize,
    aborted: usize,
}

fn simulate_subject(config: &CampaignConfig, subject_idx: usize) -> Result<SubjectBatch> {
    let mut srng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, u64::MAX, subject_idx as u64));
    let subject = randomize_subject(&mut srng, config)?;
    let model = basal_model(&subject, config.settings.period)?;
    let params = config.mpc.clone().with_basal(subject.u_b);
    params.validate()?;

    let mut batch = SubjectBatch { days: Vec::new(), excluded: 0, aborted: 0 };
    for day in 0..config.days_per_subject {
        let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.master_seed,
            subject_idx as u64,
            day as u64,
        ));
        let scenario = sample_scenario(&mut drng, config);
        match simulate_day(&subject, &scenario, &config.settings, &model, &params) {
            Ok(out) if out.degenerate => batch.excluded += 1,
            Ok(out) => batch.days.push(out),
            Err(e) => {
                log::warn!("subject {subject_idx} day {day} aborted: {e}");
                batch.aborted += 1;
            }
        }
    }
    Ok(batch)
}

/// Simulate the whole cohort and stream every retained day's records to
/// `out_path` in (subject, day, cycle) order. The 1-in-`audit_stride` control
/// audit recomputes `u = MPC(x)` from the serialized state and demands bitwise
/// equality.
pub fn run_campaign(config: &CampaignConfig, out_path: impl AsRef<Path>) -> Result<CampaignReport> {
    config.validate()?;

    let batches: Vec<(usize, Result<SubjectBatch>)> = (0..config.n_subjects)
        .into_par_iter()
        .map(|idx| (idx, simulate_subject(config, idx)))
        .collect();

    let mut report = CampaignReport::default();
    let mut writer = DatasetWriter::create(&out_path)?;
    let mut glucose_sum = 0.0f64;
    let mut glucose_count = 0u64;
    let mut in_range = 0u64;

    for (idx, batch) in batches {
        let batch = batch?;
        report.days_simulated += batch.days.len() + batch.excluded + batch.aborted;
        report.days_excluded += batch.excluded;
        report.days_aborted += batch.aborted;

        // Per-subject controller context for the audit.
        let mut srng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, u64::MAX, idx as u64));
        let subject = randomize_subject(&mut srng, config)?;
        let model = basal_model(&subject, config.settings.period)?;
        let params = config.mpc.clone().with_basal(subject.u_b);

        for day in &batch.days {
            report.rescue_events += day.rescue_events as u64;
            report.maxiter_steps += day.maxiter_steps as u64;
            for g in &day.trace.glucose {
                glucose_sum += g;
                glucose_count += 1;
                if (70.0..=180.0).contains(g) {
                    in_range += 1;
                }
            }
            for (k, pair) in day.pairs.iter().enumerate() {
                let global = report.records_written + k as u64;
                if global % config.audit_stride as u64 == 0 {
                    let u_prev = if k == 0 { 0.0 } else { day.pairs[k - 1].u };
                    let redo = mpc_step(&pair.state(), &model, &params, u_prev)?;
                    report.audit_checked += 1;
                    if redo.u.to_bits() != pair.u.to_bits() {
                        report.audit_mismatches += 1;
                    }
                }
                writer.push(pair)?;
            }
            report.records_written += day.pairs.len() as u64;
        }
    }
    writer.finish()?;

    if glucose_count > 0 {
        report.mean_glucose = glucose_sum / glucose_count as f64;
        report.time_in_range = in_range as f64 / glucose_count as f64;
    }
    log::info!(
        "campaign: {} records, {} days ({} excluded, {} aborted), mean glucose {:.1}, TIR {:.1}%",
        report.records_written,
        report.days_simulated,
        report.days_excluded,
        report.days_aborted,
        report.mean_glucose,
        100.0 * report.time_in_range
    );
    Ok(report)
}
