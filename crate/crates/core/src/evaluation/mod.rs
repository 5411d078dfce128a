//! Measurement: surrogate-vs-controller error reports, test-set
//! construction, paired training-regime comparisons, and deployment
//! footprint/timing accounting.
//!
//! One caveat worth knowing up front: the bit-exact "does the stored pair
//! really satisfy `u = MPC(x̃)`" audit happens during data generation (see
//! the campaign's `audit_stride`), because replaying the control law needs
//! the previous action for the rate limit — context a bare record no longer
//! carries. Reports downstream of a campaign inherit that guarantee.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::DataPair;
use crate::mpc::{build_condensed_qp, mpc_step, AugmentedState, LinearModel, MpcParams};
use crate::neural::{train, Footprint, NetParams, NetSpec, TrainConfig, TrainLog};
use crate::osd::{
    build_osd, measure_resolution, BuildOptions, Osd, OsdParams, ResolutionReport,
    SaturationStats,
};
use crate::{Error, Result};

/// Width of the glucose-axis bins in an [`ErrorReport`], mg/dL.
pub const GLUCOSE_BIN_WIDTH: f64 = 10.0;

/// Default train→test tightening: the test set is built at `J*/2.5` and
/// `S_u·2.5` relative to the training cell.
pub const DEFAULT_TEST_RATIO: f64 = 2.5;

/// One glucose-axis bin of absolute surrogate errors. The axis is the first
/// state coordinate: estimated glucose deviation from basal, mg/dL.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ErrorBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_err: f64,
    pub max_err: f64,
}

/// Distribution of `|controller(x) − surrogate(x)|` over a test set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub bins: Vec<ErrorBin>,
    /// Raw per-sample errors, kept for downstream analysis but not
    /// serialized into report files.
    #[serde(skip)]
    pub errors: Vec<f64>,
}

/// Nearest-rank percentile of a sorted ascending slice; `q` in (0, 1].
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Absolute error of the surrogate against the stored control action of
/// every record, summarized overall and per 10 mg/dL glucose bin.
pub fn nn_error_report(net: &NetParams<f64>, test: &[DataPair]) -> Result<ErrorReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = net.forward_batch(test);
    let errors: Vec<f64> = outputs
        .iter()
        .zip(test)
        .map(|(y, p)| (y - p.u).abs())
        .collect();

    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let median = percentile_sorted(&sorted, 0.5);
    let p95 = percentile_sorted(&sorted, 0.95);
    let max = *sorted.last().expect("nonempty");

    let g_min = test.iter().map(|p| p.x[0]).fold(f64::INFINITY, f64::min);
    let g_max = test.iter().map(|p| p.x[0]).fold(f64::NEG_INFINITY, f64::max);
    let lo_edge = (g_min / GLUCOSE_BIN_WIDTH).floor() * GLUCOSE_BIN_WIDTH;
    let n_bins = (((g_max - lo_edge) / GLUCOSE_BIN_WIDTH).floor() as usize + 1).max(1);
    let mut bins: Vec<ErrorBin> = (0..n_bins)
        .map(|k| ErrorBin {
            lo: lo_edge + k as f64 * GLUCOSE_BIN_WIDTH,
            hi: lo_edge + (k + 1) as f64 * GLUCOSE_BIN_WIDTH,
            count: 0,
            mean_err: 0.0,
            max_err: 0.0,
        })
        .collect();
    for (p, e) in test.iter().zip(&errors) {
        let k = (((p.x[0] - lo_edge) / GLUCOSE_BIN_WIDTH).floor() as usize).min(n_bins - 1);
        let b = &mut bins[k];
        b.count += 1;
        b.mean_err += e;
        b.max_err = b.max_err.max(*e);
    }
    for b in &mut bins {
        if b.count > 0 {
            b.mean_err /= b.count as f64;
        }
    }
    Ok(ErrorReport {
        samples: test.len(),
        mean,
        median,
        p95,
        max,
        bins,
        errors,
    })
}

impl ErrorReport {
    /// Plot-ready columns: bin center, mean error, max error, count.
    pub fn bin_columns(&self) -> String {
        let mut out = String::from("# glucose_deviation_mgdl mean_abs_err max_abs_err count\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{:.1} {:.9e} {:.9e} {}\n",
                0.5 * (b.lo + b.hi),
                b.mean_err,
                b.max_err,
                b.count
            ));
        }
        out
    }
}

/// Test-set parameters from a training cell: tighter spacing, stronger
/// action weighting.
pub fn scaled_test_params(train: &OsdParams, ratio: f64) -> Result<OsdParams> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::InvalidParams(
            "test tightening ratio must be positive".into(),
        ));
    }
    OsdParams::new(train.j_star / ratio, train.s_x, train.s_u * ratio)
}

/// A test distillation plus how many of its records were discarded for
/// coinciding with a training centroid.
#[derive(Clone, Debug)]
pub struct TestOsd {
    pub osd: Osd,
    /// Records removed because they appear verbatim in an excluded set.
    pub removed: usize,
}

fn record_key(p: &DataPair) -> [u64; 9] {
    let mut k = [0u64; 9];
    for (i, v) in p.x.iter().enumerate() {
        k[i] = v.to_bits();
    }
    k[8] = p.u.to_bits();
    k
}

/// Drop every record that is bitwise identical to a member of an excluded
/// set, returning how many were removed. Overlap means exact (x, u) bit
/// equality: a test query must not be a point the trainee memorized.
pub fn remove_overlaps(records: &mut Vec<DataPair>, exclude: &[&[DataPair]]) -> usize {
    let taken: HashSet<[u64; 9]> = exclude
        .iter()
        .flat_map(|set| set.iter().map(record_key))
        .collect();
    let before = records.len();
    records.retain(|r| !taken.contains(&record_key(r)));
    before - records.len()
}

/// Build a test set at `params` from the raw stream, then drop any record
/// that is bitwise identical to a member of an excluded (training) set, so
/// remaining queries probe the empty volumes between training centroids.
pub fn make_test_osd(
    raw: &[DataPair],
    params: &OsdParams,
    exclude: &[&[DataPair]],
    build: &BuildOptions,
) -> Result<TestOsd> {
    let mut osd = build_osd(raw.iter().copied(), params, build)?;
    let removed = remove_overlaps(&mut osd.records, exclude);
    Ok(TestOsd { removed, osd })
}

/// Everything measured for one training cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellOutcome {
    pub j_star: f64,
    pub s_u: f64,
    pub n_d: usize,
    /// Action-accuracy bound accumulated during the build.
    pub build_us: f64,
    pub build_wall_s: f64,
    pub saturation: SaturationStats,
    pub resolution: Option<ResolutionReport>,
    pub train_log: Option<TrainLog>,
    pub error: Option<ErrorReport>,
    /// Populated instead of the fields above when the cell failed.
    pub failure: Option<String>,
}

/// Paired comparison of raw-data training against distilled-set training,
/// all nets evaluated on one common test set.
#[derive(Clone, Debug, Serialize)]
pub struct GridResult {
    pub test_j_star: f64,
    pub test_s_u: f64,
    pub test_samples: usize,
    pub test_removed: usize,
    pub raw_records: usize,
    pub raw_log: TrainLog,
    pub raw_error: ErrorReport,
    pub cells: Vec<CellOutcome>,
}

/// Train one net per distillation cell plus one on the raw stream, under an
/// identical gradient-step budget, and evaluate all of them on a common test
/// set built at `test_params` (training centroids removed).
///
/// `cfg.max_steps` must be set: it is the budget that makes the comparison
/// paired. A cell that cannot meet the budget, or fails to build or train,
/// is marked failed and the run continues; a raw-side failure aborts, since
/// nothing is left to compare against.
pub fn compare_training_regimes(
    raw: &[DataPair],
    cells: &[OsdParams],
    test_params: &OsdParams,
    net_spec: &NetSpec,
    cfg: &TrainConfig,
    build: &BuildOptions,
) -> Result<GridResult> {
    let budget = cfg.max_steps.ok_or_else(|| {
        Error::InvalidParams(
            "paired comparison needs an explicit gradient-step budget (max_steps)".into(),
        )
    })?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }

    struct BuiltCell {
        j_star: f64,
        s_u: f64,
        osd: Option<Osd>,
        wall_s: f64,
        failure: Option<String>,
    }
    let mut built: Vec<BuiltCell> = Vec::with_capacity(cells.len());
    for params in cells {
        let t0 = Instant::now();
        match build_osd(raw.iter().copied(), params, build) {
            Ok(osd) => built.push(BuiltCell {
                j_star: params.j_star,
                s_u: params.s_u,
                osd: Some(osd),
                wall_s: t0.elapsed().as_secs_f64(),
                failure: None,
            }),
            Err(e) => built.push(BuiltCell {
                j_star: params.j_star,
                s_u: params.s_u,
                osd: None,
                wall_s: t0.elapsed().as_secs_f64(),
                failure: Some(format!("build failed: {e}")),
            }),
        }
    }

    let train_sets: Vec<&[DataPair]> =
        built.iter().filter_map(|c| c.osd.as_ref().map(|o| o.records.as_slice())).collect();
    let test = make_test_osd(raw, test_params, &train_sets, build)?;
    if test.osd.records.is_empty() {
        return Err(Error::InvalidParams(
            "test set is empty after removing training centroids".into(),
        ));
    }

    let (raw_net, raw_log) = train(net_spec, raw, cfg)?;
    if raw_log.gradient_steps != budget {
        return Err(Error::InvalidParams(format!(
            "raw training ran {} of the {budget} budgeted steps; raise epochs",
            raw_log.gradient_steps
        )));
    }
    let raw_error = nn_error_report(&raw_net, &test.osd.records)?;

    let mut outcomes = Vec::with_capacity(built.len());
    for cell in built {
        let mut out = CellOutcome {
            j_star: cell.j_star,
            s_u: cell.s_u,
            n_d: 0,
            build_us: 0.0,
            build_wall_s: cell.wall_s,
            saturation: SaturationStats {
                window_size: 0,
                rejections_in_window: 0,
                rejection_ratio_history: Vec::new(),
            },
            resolution: None,
            train_log: None,
            error: None,
            failure: cell.failure,
        };
        let Some(osd) = cell.osd else {
            outcomes.push(out);
            continue;
        };
        out.n_d = osd.records.len();
        out.build_us = osd.build_us;
        out.saturation = osd.stats.clone();
        match measure_resolution(&osd, raw) {
            Ok(r) => out.resolution = Some(r),
            Err(e) => {
                out.failure = Some(format!("resolution measurement failed: {e}"));
                outcomes.push(out);
                continue;
            }
        }
        match train(net_spec, &osd.records, cfg) {
            Ok((net, log)) if log.gradient_steps == budget => {
                out.error = Some(nn_error_report(&net, &test.osd.records)?);
                out.train_log = Some(log);
            }
            Ok((_, log)) => {
                out.failure = Some(format!(
                    "budget shortfall: ran {} of {budget} steps; raise epochs",
                    log.gradient_steps
                ));
                out.train_log = Some(log);
            }
            Err(e) => out.failure = Some(format!("training failed: {e}")),
        }
        outcomes.push(out);
    }

    Ok(GridResult {
        test_j_star: test_params.j_star,
        test_s_u: test_params.s_u,
        test_samples: test.osd.records.len(),
        test_removed: test.removed,
        raw_records: raw.len(),
        raw_log,
        raw_error,
        cells: outcomes,
    })
}

impl GridResult {
    /// Human-readable summary table, one row per training regime.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "test set: J*={} S_u={} ({} records, {} overlapping removed)\n",
            self.test_j_star, self.test_s_u, self.test_samples, self.test_removed
        ));
        out.push_str(
            "regime            records      steps   mean_err    p95_err    max_err\n",
        );
        let row = |name: &str, n: usize, steps: u64, e: &ErrorReport| {
            format!(
                "{name:<16} {n:>8} {steps:>10} {:>10.4} {:>10.4} {:>10.4}\n",
                e.mean, e.p95, e.max
            )
        };
        out.push_str(&row(
            "raw",
            self.raw_records,
            self.raw_log.gradient_steps,
            &self.raw_error,
        ));
        for c in &self.cells {
            let name = format!("J*={} S_u={}", c.j_star, c.s_u);
            match (&c.error, &c.train_log, &c.failure) {
                (Some(e), Some(l), _) => out.push_str(&row(&name, c.n_d, l.gradient_steps, e)),
                (_, _, Some(f)) => out.push_str(&format!("{name:<16} FAILED: {f}\n")),
                _ => out.push_str(&format!("{name:<16} incomplete\n")),
            }
        }
        out
    }
}

/// Size and speed of the surrogate next to the controller's QP.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FootprintComparison {
    pub net: Footprint,
    /// Decision-vector length of the condensed QP (controls + slacks).
    pub qp_variables: usize,
    pub qp_constraint_rows: usize,
    /// Size of the KKT system a second-order solver factorizes.
    pub kkt_dimension: usize,
    /// RAM for one dense KKT matrix at 4-byte scalars.
    pub qp_kkt_ram_bytes: usize,
    pub mpc_mean_us: f64,
    pub nn_mean_us: f64,
    /// Mean controller solve time over mean surrogate evaluation time.
    pub timing_ratio: f64,
    pub states_timed: usize,
}

/// KKT system dimension of an inequality-constrained QP: variables plus one
/// multiplier per constraint row.
pub fn kkt_dimension(constraint_rows: usize, variables: usize) -> usize {
    constraint_rows + variables
}

/// Measure the controller and the surrogate on the same states and report
/// footprint plus wall-time ratio. States are replayed with a startup
/// previous action (0, basal delivery); the QP dims come from the first
/// state's condensed problem.
pub fn footprint_comparison(
    net: &NetParams<f64>,
    model: &LinearModel<f64>,
    mpc: &MpcParams<f64>,
    states: &[DataPair],
) -> Result<FootprintComparison> {
    if states.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tilde: Vec<AugmentedState<f64>> = states
        .iter()
        .map(|p| p.state())
        .collect::<Vec<_>>();
    for s in &tilde {
        s.validate()?;
    }
    let qp = build_condensed_qp(model, mpc, &tilde[0], 0.0)?;
    let p = qp.c.len();
    let m = qp.a_ineq.nrows();

    let t0 = Instant::now();
    for s in &tilde {
        std::hint::black_box(mpc_step(s, model, mpc, 0.0)?);
    }
    let mpc_total = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    for pair in states {
        std::hint::black_box(net.forward(&pair.x)?);
    }
    let nn_total = t1.elapsed().as_secs_f64();

    let n = states.len() as f64;
    let kkt = kkt_dimension(m, p);
    Ok(FootprintComparison {
        net: net.footprint(),
        qp_variables: p,
        qp_constraint_rows: m,
        kkt_dimension: kkt,
        qp_kkt_ram_bytes: 4 * kkt * kkt,
        mpc_mean_us: 1e6 * mpc_total / n,
        nn_mean_us: 1e6 * nn_total / n,
        timing_ratio: mpc_total / nn_total.max(f64::MIN_POSITIVE),
        states_timed: states.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::STATE_DIM;
    use crate::glucose::{basal_model, SubjectParams};
    use crate::neural::{init, Body, NetKind, ShortcutKind};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_at(g_dev: f64, u: f64) -> DataPair {
        let mut x = [0.0; STATE_DIM];
        x[0] = g_dev;
        DataPair::new(x, u).unwrap()
    }

    /// Net that outputs exactly x[0]: identity normalization, zeroed block
    /// bodies over identity shortcuts, selector lift and head.
    fn first_coordinate_net() -> NetParams<f64> {
        let mut spec = NetSpec::resnet(2, 4);
        spec.epsilon = 0.0;
        let mut p = init(&spec, 0).unwrap();
        if let Body::ResNet { lift, blocks } = &mut p.body {
            lift.w.fill(0.0);
            lift.w[(0, 0)] = 1.0;
            for blk in blocks {
                blk.a1.w.fill(0.0);
                blk.a2.w.fill(0.0);
            }
        }
        p.head.w = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        p.head.b = DVector::zeros(1);
        p
    }

    #[test]
    fn report_summary_hand_values() {
        // Zeroed net ⇒ error distribution is |u|. Eleven samples 0..10.
        let mut net = init(&NetSpec::resnet(1, 4), 0).unwrap();
        let zeros = DVector::zeros(net.param_count());
        net.load_flat(&zeros).unwrap();
        let data: Vec<DataPair> = (0..=10).map(|i| pair_at(0.0, i as f64)).collect();
        let r = nn_error_report(&net, &data).unwrap();
        assert_eq!(r.samples, 11);
        assert_eq!(r.mean, 5.0);
        assert_eq!(r.median, 5.0);
        assert_eq!(r.p95, 10.0); // nearest rank: ceil(0.95·11) = 11th of 11
        assert_eq!(r.max, 10.0);
        assert!(r.errors.iter().all(|e| *e >= 0.0));
    }

    #[test]
    fn report_of_exact_net_is_zero() {
        let net = first_coordinate_net();
        let data: Vec<DataPair> = (0..50).map(|i| pair_at(i as f64, i as f64)).collect();
        let r = nn_error_report(&net, &data).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.max, 0.0);
        assert!(r.bins.iter().all(|b| b.max_err == 0.0));
    }

    #[test]
    fn report_bins_partition_the_samples() {
        let mut net = init(&NetSpec::resnet(1, 4), 1).unwrap();
        let zeros = DVector::zeros(net.param_count());
        net.load_flat(&zeros).unwrap();
        // Glucose axis from -25 to +37: bins [-30,-20) … [30,40).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<DataPair> = (0..500)
            .map(|_| pair_at(rng.random_range(-25.0..37.0), rng.random_range(-5.0..5.0)))
            .collect();
        let r = nn_error_report(&net, &data).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 500);
        for b in &r.bins {
            assert_eq!(b.hi - b.lo, GLUCOSE_BIN_WIDTH);
            assert!(b.mean_err <= b.max_err + 1e-15);
        }
        assert_eq!(r.bins.first().unwrap().lo, -30.0);
        assert!(matches!(nn_error_report(&net, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn scaled_params_follow_the_ratio_rule() {
        let train = OsdParams::identity(0.5, 0.004).unwrap();
        let test = scaled_test_params(&train, 2.5).unwrap();
        assert!((test.j_star - 0.2).abs() < 1e-15);
        assert!((test.s_u - 0.01).abs() < 1e-15);
        assert!(scaled_test_params(&train, 0.0).is_err());
    }

    /// Dense planar stream: two informative coordinates, so the distillation
    /// thresholds actually reject (8 iid coordinates would leave every pair
    /// farther apart than any J* in the tests).
    fn mixture(n: usize, seed: u64) -> Vec<DataPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x = [0.0f64; STATE_DIM];
                x[0] = rng.random_range(-2.0..2.0);
                x[1] = rng.random_range(-2.0..2.0);
                // Smooth action over the informative plane.
                let u = (2.0 * x[0] + 0.5 * x[1]).clamp(-3.0, 3.0);
                DataPair::new(x, u).unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_test_build_empties_after_overlap_removal() {
        let raw = mixture(2_000, 3);
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let opts = BuildOptions::default();
        let train_osd = build_osd(raw.iter().copied(), &params, &opts).unwrap();
        // ratio 1: same params, same stream order ⇒ identical centroids.
        let test = make_test_osd(&raw, &params, &[&train_osd.records], &opts).unwrap();
        assert_eq!(test.osd.records.len(), 0);
        assert_eq!(test.removed, train_osd.records.len());
    }

    #[test]
    fn tighter_test_set_is_finer_than_training_set() {
        let raw = mixture(4_000, 4);
        let train_params = OsdParams::identity(1.0, 0.0).unwrap();
        let opts = BuildOptions::default();
        let train_osd = build_osd(raw.iter().copied(), &train_params, &opts).unwrap();
        let test_params = scaled_test_params(&train_params, DEFAULT_TEST_RATIO).unwrap();
        let test = make_test_osd(&raw, &test_params, &[&train_osd.records], &opts).unwrap();
        let test_total = test.osd.records.len() + test.removed;
        assert!(
            test_total > train_osd.records.len(),
            "finer spacing must keep more records ({test_total} vs {})",
            train_osd.records.len()
        );
        assert!(!test.osd.records.is_empty());
    }

    #[test]
    fn regime_comparison_is_paired_and_deterministic() {
        let raw = mixture(3_000, 5);
        let cells = vec![OsdParams::identity(0.2, 0.0).unwrap()];
        let test_params = OsdParams::identity(0.05, 0.0).unwrap();
        let spec = NetSpec::resnet(2, 8);
        let cfg = TrainConfig {
            batch: 256,
            epochs: 1_000,
            max_steps: Some(150),
            seed: 6,
            ..TrainConfig::default()
        };
        let opts = BuildOptions::default();
        let run = || {
            compare_training_regimes(&raw, &cells, &test_params, &spec, &cfg, &opts).unwrap()
        };
        let a = run();
        assert_eq!(a.raw_log.gradient_steps, 150);
        let cell = &a.cells[0];
        assert!(cell.failure.is_none(), "{:?}", cell.failure);
        assert_eq!(cell.train_log.as_ref().unwrap().gradient_steps, 150);
        assert!(cell.error.is_some());
        assert!(cell.resolution.is_some());
        assert!(cell.n_d > 0);
        assert!(a.test_samples > 0);

        let b = run();
        assert_eq!(a.raw_error.mean.to_bits(), b.raw_error.mean.to_bits());
        assert_eq!(
            a.cells[0].error.as_ref().unwrap().max.to_bits(),
            b.cells[0].error.as_ref().unwrap().max.to_bits()
        );
        assert!(!a.render_table().is_empty());
    }

    #[test]
    fn regime_comparison_requires_a_budget() {
        let raw = mixture(200, 7);
        let cfg = TrainConfig::default(); // no max_steps
        let err = compare_training_regimes(
            &raw,
            &[],
            &OsdParams::identity(0.1, 0.0).unwrap(),
            &NetSpec::resnet(1, 4),
            &cfg,
            &BuildOptions::default(),
        );
        assert!(matches!(err, Err(Error::InvalidParams(_))));
    }

    #[test]
    fn kkt_dimension_matches_reference_dims() {
        assert_eq!(kkt_dimension(120, 48), 168);
        // One dense KKT factorization at 4-byte scalars: 168² floats.
        assert_eq!(4 * 168 * 168, 112_896); // = 110.25 KiB
    }

    #[test]
    fn footprint_comparison_times_both_paths() {
        let subject = SubjectParams::<f64>::nominal();
        let model = basal_model(&subject, 5.0).unwrap();
        let mpc = MpcParams::defaults(subject.u_b);
        let net = init(&NetSpec::resnet(12, 16), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let states: Vec<DataPair> = (0..40)
            .map(|_| {
                let mut x = [0.0; STATE_DIM];
                for v in x.iter_mut().take(5) {
                    *v = rng.random_range(-20.0..20.0);
                }
                x[5] = rng.random_range(-1.0..1.0);
                x[6] = rng.random_range(-2.0..2.0);
                x[7] = rng.random_range(0.0..5.0);
                DataPair::new(x, 0.0).unwrap()
            })
            .collect();
        let cmp = footprint_comparison(&net, &model, &mpc, &states).unwrap();
        assert_eq!(cmp.qp_variables, 48);
        assert_eq!(cmp.kkt_dimension, cmp.qp_constraint_rows + 48);
        assert_eq!(cmp.qp_kkt_ram_bytes, 4 * cmp.kkt_dimension * cmp.kkt_dimension);
        assert_eq!(cmp.net.matmul_count, 38);
        assert_eq!(cmp.states_timed, 40);
        assert!(cmp.mpc_mean_us > 0.0 && cmp.nn_mean_us > 0.0);
        assert!(
            cmp.timing_ratio > 1.0,
            "QP solve should dominate a 38-matmul forward pass (ratio {})",
            cmp.timing_ratio
        );
        assert!(matches!(
            footprint_comparison(&net, &model, &mpc, &[]),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn shortcut_accounting_flows_into_comparison() {
        let affine = init(&NetSpec::resnet(12, 16), 0).unwrap();
        let identity = init(
            &NetSpec {
                shortcut: ShortcutKind::Identity,
                ..NetSpec::resnet(12, 16)
            },
            0,
        )
        .unwrap();
        assert_eq!(affine.footprint().matmul_count, 38);
        assert_eq!(identity.footprint().matmul_count, 26);
        assert!(matches!(affine.spec.kind, NetKind::ResNet));
    }
}
