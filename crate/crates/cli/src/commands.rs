//! The five pipeline commands.
//!
//! Each command is a plain function over a loaded [`Ctx`] so integration
//! tests can run stages in-process; the binary is a thin argument parser on
//! top. Commands print a short human summary to stdout, write the
//! deterministic manifest plus the wall-time sidecar, and return a typed
//! error that `main` maps onto the exit-code policy.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nnmpc_core::config::{GridCell, PipelineConfig};
use nnmpc_core::dataset::{read_dataset, sha256_hex, write_dataset, DataPair, STATE_DIM};
use nnmpc_core::error::Error;
use nnmpc_core::evaluation::{footprint_comparison, nn_error_report, remove_overlaps};
use nnmpc_core::glucose::basal_model;
use nnmpc_core::neural::{load_weights_f64, save_weights, train};
use nnmpc_core::osd::{build_osd, mann_kendall_z, verify_osd, verify_osd_exact, Osd, StateMetric};
use nnmpc_core::scenario::run_campaign;

use crate::manifest::{
    CellBuild, CellVerify, EvaluateSummary, FileStamp, NetEval, NetTrain, RunManifest,
    StaticFootprint, WallReport,
};
use crate::{CliError, CliResult};

/// A loaded, validated configuration plus run-level identity.
pub struct Ctx {
    pub config: PipelineConfig,
    /// SHA-256 of the config file bytes.
    pub config_sha256: String,
    pub seed_override: Option<u64>,
}

impl Ctx {
    /// Read the config file, hash its bytes, validate the schema, and apply
    /// the seed override to every stage seed (campaign master, index levels,
    /// training) so one flag reseeds whichever stage runs next.
    pub fn load(config_path: &Path, seed_override: Option<u64>) -> CliResult<Self> {
        let bytes = fs::read(config_path).map_err(|e| {
            Error::Config(format!("reading config {}: {e}", config_path.display()))
        })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
        let mut config = PipelineConfig::from_toml_str(&text)?;
        if let Some(seed) = seed_override {
            config.campaign.master_seed = seed;
            config.osd.hnsw.seed = seed;
            config.train.optimizer.seed = seed;
        }
        Ok(Ctx {
            config,
            config_sha256: sha256_hex(&bytes),
            seed_override,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.config_sha256, self.seed_override)
    }

    /// Load an upstream manifest and insist it came from this config file.
    fn upstream(&self, command: &str) -> CliResult<RunManifest> {
        let m = RunManifest::load(&self.config.paths.reports_dir, command)?;
        if m.config_sha256 != self.config_sha256 {
            return Err(CliError::Violation(format!(
                "config file changed since `{command}` ran (manifest hash {}, current {})",
                m.config_sha256, self.config_sha256
            )));
        }
        Ok(m)
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
    }
    Ok(())
}

/// Check a file against the stamp an upstream manifest recorded for it.
fn check_stamp(upstream: &RunManifest, path: &Path) -> CliResult<()> {
    let s = path_str(path);
    let recorded = upstream.output_stamp(&s).ok_or_else(|| {
        CliError::Core(Error::Config(format!(
            "{s} is not an output of `{}`; rebuild or fix the config",
            upstream.command
        )))
    })?;
    let current = FileStamp::of(path)?;
    if current.sha256 != recorded.sha256 {
        return Err(CliError::Violation(format!(
            "{s} changed since `{}` ran (sha256 {} != recorded {})",
            upstream.command, current.sha256, recorded.sha256
        )));
    }
    Ok(())
}

/// Check a file against the stamp an upstream manifest recorded among its
/// inputs. A path the upstream never read is allowed (verifying against a
/// different raw sample is legitimate); the same path with different bytes
/// means the file was regenerated after the upstream ran, and anything
/// derived from the old bytes is stale.
fn check_input_stamp(upstream: &RunManifest, path: &Path) -> CliResult<()> {
    if let Some(recorded) = upstream.input_stamp(&path_str(path)) {
        let current = FileStamp::of(path)?;
        if current.sha256 != recorded.sha256 {
            return Err(CliError::Violation(format!(
                "{} changed since `{}` ran (sha256 {} != recorded {}); re-run `nnmpc {}`",
                path.display(),
                upstream.command,
                current.sha256,
                recorded.sha256,
                upstream.command
            )));
        }
    }
    Ok(())
}

/// The file a grid cell was distilled into, per the build manifest.
fn built_cell_file(built: &RunManifest, cell: &GridCell) -> CliResult<PathBuf> {
    built
        .build
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .find(|b| b.j_star == cell.j_star && b.s_u == cell.s_u)
        .map(|b| PathBuf::from(&b.file))
        .ok_or_else(|| {
            CliError::Core(Error::Config(format!(
                "{cell} has no recorded build; run `nnmpc build-osd`"
            )))
        })
}

/// Reconstruct the build-time state metric recorded in the build manifest.
fn recorded_metric(built: &RunManifest) -> CliResult<StateMetric> {
    let v = built.state_metric.as_deref().ok_or_else(|| {
        CliError::Core(Error::Config(
            "build manifest lacks the state metric; re-run `nnmpc build-osd`".into(),
        ))
    })?;
    if v.len() != STATE_DIM * STATE_DIM {
        return Err(CliError::Core(Error::Config(format!(
            "state metric in the build manifest has {} entries, expected {}",
            v.len(),
            STATE_DIM * STATE_DIM
        ))));
    }
    Ok(StateMetric::from_column_slice(v))
}

/// Resolve `--grid-cell` selections against a configured cell list.
fn select_cells(configured: &[GridCell], requested: &[GridCell], what: &str) -> CliResult<Vec<GridCell>> {
    if requested.is_empty() {
        return Ok(configured.to_vec());
    }
    for cell in requested {
        if !configured.contains(cell) {
            return Err(CliError::Core(Error::InvalidParams(format!(
                "--grid-cell {cell} is not one of the configured {what}"
            ))));
        }
    }
    Ok(requested.to_vec())
}

/// Run the closed-loop campaign and write the raw dataset.
pub fn cmd_simulate(ctx: &Ctx, output: Option<PathBuf>) -> CliResult<()> {
    let t0 = Instant::now();
    let out = output.unwrap_or_else(|| ctx.config.paths.raw_dataset.clone());
    ensure_parent(&out)?;

    let report = run_campaign(&ctx.config.campaign, &out)?;
    let sim_s = t0.elapsed().as_secs_f64();
    println!(
        "simulate: {} records -> {} ({} days kept, {} excluded, {} aborted; audit {} checked / {} mismatches)",
        report.records_written,
        out.display(),
        report.days_simulated - report.days_excluded - report.days_aborted,
        report.days_excluded,
        report.days_aborted,
        report.audit_checked,
        report.audit_mismatches,
    );

    let mut manifest = ctx.manifest("simulate");
    manifest.outputs.push(FileStamp::of(&out)?);
    manifest.simulate = Some(report.clone());
    manifest.save(&ctx.config.paths.reports_dir)?;

    let mut wall = WallReport::new("simulate");
    wall.total_s = t0.elapsed().as_secs_f64();
    wall.stage("campaign_s", sim_s);
    wall.save(&ctx.config.paths.reports_dir)?;

    if report.audit_mismatches > 0 {
        return Err(CliError::Violation(format!(
            "{} of {} audited records failed the control-law recomputation",
            report.audit_mismatches, report.audit_checked
        )));
    }
    Ok(())
}

/// Distill the raw dataset into one file per grid cell.
///
/// A `--grid-cell` subset merges into the existing build manifest so the
/// untouched cells keep their records and stamps — but only when the config
/// and raw dataset are the ones that manifest was produced from; a partial
/// rebuild on changed inputs would silently mix geometries.
pub fn cmd_build_osd(
    ctx: &Ctx,
    input: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    grid_cells: &[GridCell],
) -> CliResult<()> {
    let t0 = Instant::now();
    let raw_path = input.unwrap_or_else(|| ctx.config.paths.raw_dataset.clone());
    let dir = output_dir.unwrap_or_else(|| ctx.config.paths.osd_dir.clone());
    fs::create_dir_all(&dir).map_err(Error::from)?;

    let cells = select_cells(&ctx.config.osd.cells(), grid_cells, "grid cells")?;
    let raw_stamp = FileStamp::of(&raw_path)?;
    let prior = if grid_cells.is_empty() {
        None
    } else {
        match RunManifest::load(&ctx.config.paths.reports_dir, "build-osd") {
            Ok(m) => {
                let same_raw = m
                    .input_stamp(&raw_stamp.path)
                    .is_some_and(|s| s.sha256 == raw_stamp.sha256);
                if m.config_sha256 != ctx.config_sha256 || !same_raw {
                    return Err(CliError::Violation(
                        "config or raw dataset changed since the recorded grid build; \
                         run a full `nnmpc build-osd` so every cell shares one source"
                            .into(),
                    ));
                }
                Some(m)
            }
            Err(_) => None,
        }
    };

    let raw = read_dataset(&raw_path)?;
    let s_x = ctx.config.osd.metric(&raw)?;
    let opts = ctx.config.osd.build_options();

    let mut manifest = ctx.manifest("build-osd");
    manifest.inputs.push(raw_stamp);
    manifest.state_metric = Some(s_x.as_slice().to_vec());
    let mut wall = WallReport::new("build-osd");
    let mut builds = Vec::with_capacity(cells.len());
    let mut stamps = Vec::with_capacity(cells.len());

    for cell in &cells {
        let tc = Instant::now();
        let params = cell.params(s_x)?;
        let osd = build_osd(raw.iter().copied(), &params, &opts)?;
        let file = dir.join(format!("osd-{}.osd1", cell.slug()));
        write_dataset(&file, &osd.records)?;
        let ratios: Vec<f64> = osd
            .stats
            .rejection_ratio_history
            .iter()
            .map(|&(_, r)| r)
            .collect();
        let cb = CellBuild {
            j_star: cell.j_star,
            s_u: cell.s_u,
            file: path_str(&file),
            n_raw: raw.len(),
            n_d: osd.records.len(),
            build_us: osd.build_us,
            end_rejection_ratio: osd.stats.end_ratio(),
            trend_z: mann_kendall_z(&ratios),
            saturation: osd.stats.clone(),
        };
        println!(
            "build-osd {}: kept {}/{} (trailing rejection {:.1}%), u_s<={:.3}",
            cell,
            cb.n_d,
            cb.n_raw,
            100.0 * cb.end_rejection_ratio,
            cb.build_us
        );
        stamps.push(FileStamp::of(&file)?);
        builds.push(cb);
        wall.stage(format!("build_{}_s", cell.slug()), tc.elapsed().as_secs_f64());
    }

    // Assemble cells in configured grid order, rebuilt entries taking
    // precedence over carried-over ones.
    let prior_builds = prior.as_ref().and_then(|m| m.build.as_deref()).unwrap_or(&[]);
    let mut merged = Vec::new();
    for cell in &ctx.config.osd.cells() {
        if let Some(i) = builds
            .iter()
            .position(|b| b.j_star == cell.j_star && b.s_u == cell.s_u)
        {
            merged.push(builds[i].clone());
            manifest.outputs.push(stamps[i].clone());
        } else if let Some(pb) = prior_builds
            .iter()
            .find(|b| b.j_star == cell.j_star && b.s_u == cell.s_u)
        {
            merged.push(pb.clone());
            if let Some(s) = prior.as_ref().unwrap().output_stamp(&pb.file) {
                manifest.outputs.push(s.clone());
            }
        }
    }

    manifest.build = Some(merged);
    manifest.save(&ctx.config.paths.reports_dir)?;
    wall.total_s = t0.elapsed().as_secs_f64();
    wall.save(&ctx.config.paths.reports_dir)?;
    Ok(())
}

/// Check the separation and coverage conditions of built cells against the
/// raw stream.
pub fn cmd_verify(
    ctx: &Ctx,
    input: Option<PathBuf>,
    grid_cells: &[GridCell],
    exact: bool,
) -> CliResult<()> {
    let t0 = Instant::now();
    let raw_path = input.unwrap_or_else(|| ctx.config.paths.raw_dataset.clone());
    let built = ctx.upstream("build-osd")?;
    // A different raw path is fine (checking a sample of the stream), but the
    // same path must hold the same bytes the grid was built from.
    check_input_stamp(&built, &raw_path)?;
    let cell_builds = built.build.as_deref().unwrap_or(&[]);
    let configured: Vec<GridCell> = cell_builds
        .iter()
        .map(|b| GridCell::new(b.j_star, b.s_u))
        .collect();
    let cells = select_cells(&configured, grid_cells, "built cells")?;

    let raw = read_dataset(&raw_path)?;
    let s_x = recorded_metric(&built)?;
    let u_tol = ctx.config.evaluation.u_tol;
    let min_coverage = ctx.config.evaluation.min_coverage;

    let mut manifest = ctx.manifest("verify");
    manifest.inputs.push(FileStamp::of(&raw_path)?);
    let mut wall = WallReport::new("verify");
    let mut results = Vec::with_capacity(cells.len());
    let mut violations = Vec::new();

    for cell in &cells {
        let tc = Instant::now();
        let cb = cell_builds
            .iter()
            .find(|b| b.j_star == cell.j_star && b.s_u == cell.s_u)
            .expect("selection came from this list");
        let file = PathBuf::from(&cb.file);
        check_stamp(&built, &file)?;
        manifest.inputs.push(FileStamp::of(&file)?);

        let osd = Osd {
            params: cell.params(s_x)?,
            records: read_dataset(&file)?,
            build_us: cb.build_us,
            stats: cb.saturation.clone(),
        };
        let report = if exact {
            verify_osd_exact(&osd, &raw, u_tol)?
        } else {
            verify_osd(&osd, &raw, u_tol)?
        };
        println!(
            "verify {}: coverage {:.4}% ({} of {}), separation violations {}, \
             gap exceedances {}, mean u_s {:.4}, max u_s {:.4}",
            cell,
            100.0 * report.coverage,
            report.covered,
            report.raw_checked,
            report.separation_violations,
            report.us_exceedances,
            report.mean_us,
            report.recomputed_us,
        );
        if report.separation_violations > 0 {
            violations.push(format!("{cell}: {} separation violations", report.separation_violations));
        }
        // Records whose recomputed action gap tops the build-time bound are
        // expected when a later insertion became the nearest neighbor: the
        // recomputed value is the authoritative u_s. Reported, not fatal.
        if report.us_exceedances > 0 {
            println!(
                "verify {cell}: note: {} records exceed the build-time action-gap bound; \
                 the recomputed max ({:.4}) supersedes it",
                report.us_exceedances, report.recomputed_us,
            );
        }
        if report.coverage < min_coverage {
            violations.push(format!(
                "{cell}: coverage {:.6} below configured minimum {:.6}",
                report.coverage, min_coverage
            ));
        }
        results.push(CellVerify {
            j_star: cell.j_star,
            s_u: cell.s_u,
            file: cb.file.clone(),
            exact,
            verification: report,
        });
        wall.stage(format!("verify_{}_s", cell.slug()), tc.elapsed().as_secs_f64());
    }

    manifest.verify = Some(results);
    manifest.save(&ctx.config.paths.reports_dir)?;
    wall.total_s = t0.elapsed().as_secs_f64();
    wall.save(&ctx.config.paths.reports_dir)?;

    if !violations.is_empty() {
        return Err(CliError::Violation(violations.join("; ")));
    }
    Ok(())
}

/// Train one surrogate per configured dataset under the common step budget.
pub fn cmd_train(
    ctx: &Ctx,
    input: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    grid_cells: &[GridCell],
) -> CliResult<()> {
    let t0 = Instant::now();
    let dir = output_dir.unwrap_or_else(|| ctx.config.paths.weights_dir.clone());
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let built = ctx.upstream("build-osd")?;
    let spec = &ctx.config.train.net;
    let cfg = &ctx.config.train.optimizer;
    let budget = cfg
        .max_steps
        .expect("validated: budget is explicit");

    let cells = select_cells(&ctx.config.train.cells, grid_cells, "training cells")?;
    // Subset selection trains only those cells; the raw baseline belongs to
    // the full configured run. Untouched nets are carried over from the
    // previous train manifest, provided it came from this config.
    let train_raw = ctx.config.train.include_raw && grid_cells.is_empty();
    let prior = if grid_cells.is_empty() {
        None
    } else {
        match RunManifest::load(&ctx.config.paths.reports_dir, "train") {
            Ok(m) => {
                if m.config_sha256 != ctx.config_sha256 {
                    return Err(CliError::Violation(
                        "config file changed since the recorded training run; \
                         run a full `nnmpc train` so every net shares one setup"
                            .into(),
                    ));
                }
                Some(m)
            }
            Err(_) => None,
        }
    };

    let mut manifest = ctx.manifest("train");
    let mut wall = WallReport::new("train");
    let mut nets = Vec::new();

    let mut jobs: Vec<(String, PathBuf, Vec<DataPair>)> = Vec::new();
    for cell in &cells {
        let file = built_cell_file(&built, cell)?;
        check_stamp(&built, &file)?;
        manifest.inputs.push(FileStamp::of(&file)?);
        jobs.push((cell.slug(), dir.join(format!("net-{}.nnw1", cell.slug())), read_dataset(&file)?));
    }
    if train_raw {
        let raw_path = input.unwrap_or_else(|| ctx.config.paths.raw_dataset.clone());
        // The baseline must train on the same stream the grid distilled.
        check_input_stamp(&built, &raw_path)?;
        manifest.inputs.push(FileStamp::of(&raw_path)?);
        jobs.push(("raw".into(), dir.join("net-raw.nnw1"), read_dataset(&raw_path)?));
    }

    for (name, out, records) in jobs {
        let tc = Instant::now();
        let (net, log) = train(spec, &records, cfg)?;
        if log.gradient_steps != budget {
            return Err(CliError::Violation(format!(
                "net-{name}: ran {} gradient steps instead of the budgeted {budget}; \
                 increase epochs or shrink max_steps so every dataset trains under \
                 the same budget",
                log.gradient_steps
            )));
        }
        save_weights(&net.to_f32(), &out)?;
        println!(
            "train net-{name}: {} records, {} steps, best val mse {:.5} (epoch {}) -> {}",
            records.len(),
            log.gradient_steps,
            log.best_val_mse,
            log.best_epoch,
            out.display()
        );
        manifest.outputs.push(FileStamp::of(&out)?);
        nets.push(NetTrain {
            name: name.clone(),
            file: path_str(&out),
            records: records.len(),
            log,
        });
        wall.stage(format!("train_net-{name}_s"), tc.elapsed().as_secs_f64());
    }

    // Carry over previously trained nets that were not retrained this run.
    if let Some(prior) = &prior {
        for pn in prior.train.as_deref().unwrap_or(&[]) {
            if nets.iter().all(|n| n.name != pn.name) {
                nets.push(pn.clone());
                if let Some(s) = prior.output_stamp(&pn.file) {
                    manifest.outputs.push(s.clone());
                }
            }
        }
    }

    manifest.train = Some(nets);
    manifest.save(&ctx.config.paths.reports_dir)?;
    wall.total_s = t0.elapsed().as_secs_f64();
    wall.save(&ctx.config.paths.reports_dir)?;
    Ok(())
}

/// Compare trained surrogates on a common held-out test set and account for
/// the deployment footprint.
pub fn cmd_evaluate(
    ctx: &Ctx,
    input: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    grid_cells: &[GridCell],
) -> CliResult<()> {
    let t0 = Instant::now();
    let reports_dir = output_dir.unwrap_or_else(|| ctx.config.paths.reports_dir.clone());
    fs::create_dir_all(&reports_dir).map_err(Error::from)?;
    let built = ctx.upstream("build-osd")?;
    let trained = ctx.upstream("train")?;
    let trained_nets = trained.train.as_deref().unwrap_or(&[]);

    let cells = select_cells(&ctx.config.train.cells, grid_cells, "training cells")?;
    let eval_raw = ctx.config.train.include_raw && grid_cells.is_empty();

    let mut manifest = ctx.manifest("evaluate");
    let mut wall = WallReport::new("evaluate");

    // Training sets are reloaded for overlap removal, hash-checked against
    // the build manifest.
    let mut train_sets: Vec<Vec<DataPair>> = Vec::new();
    for cell in &cells {
        let file = built_cell_file(&built, cell)?;
        check_stamp(&built, &file)?;
        train_sets.push(read_dataset(&file)?);
    }

    // The common test set: reuse the built grid cell when the test cell is
    // part of the grid, otherwise distill it from the raw stream under the
    // build-time metric.
    let test_cell = ctx.config.evaluation.test_cell;
    let tc = Instant::now();
    let (mut test_records, test_source) = if ctx.config.osd.cells().contains(&test_cell) {
        let file = built_cell_file(&built, &test_cell)?;
        check_stamp(&built, &file)?;
        manifest.inputs.push(FileStamp::of(&file)?);
        (read_dataset(&file)?, format!("grid cell {}", path_str(&file)))
    } else {
        let raw_path = input.unwrap_or_else(|| ctx.config.paths.raw_dataset.clone());
        check_input_stamp(&built, &raw_path)?;
        manifest.inputs.push(FileStamp::of(&raw_path)?);
        let raw = read_dataset(&raw_path)?;
        let s_x = recorded_metric(&built)?;
        let params = test_cell.params(s_x)?;
        let osd = build_osd(raw.iter().copied(), &params, &ctx.config.osd.build_options())?;
        (osd.records, format!("built from {}", path_str(&raw_path)))
    };
    let exclude: Vec<&[DataPair]> = train_sets.iter().map(|v| v.as_slice()).collect();
    let overlap_removed = remove_overlaps(&mut test_records, &exclude);
    if test_records.is_empty() {
        return Err(CliError::Core(Error::InvalidParams(
            "test set is empty after removing training records".into(),
        )));
    }
    wall.stage("test_set_s", tc.elapsed().as_secs_f64());
    println!(
        "evaluate: test cell {} -> {} records ({} overlaps removed; {})",
        test_cell,
        test_records.len(),
        overlap_removed,
        test_source
    );

    // Score every requested net on the common test set.
    let mut names: Vec<String> = cells.iter().map(|c| c.slug()).collect();
    if eval_raw {
        names.push("raw".into());
    }
    let mut evals = Vec::new();
    let mut first_net: Option<nnmpc_core::NetParams64> = None;
    for name in &names {
        let nt = trained_nets.iter().find(|n| n.name == *name).ok_or_else(|| {
            CliError::Core(Error::Config(format!(
                "net-{name} is not in the train manifest; run `nnmpc train` first"
            )))
        })?;
        let file = PathBuf::from(&nt.file);
        check_stamp(&trained, &file)?;
        manifest.inputs.push(FileStamp::of(&file)?);
        let net = load_weights_f64(&file)?;
        let error = nn_error_report(&net, &test_records)?;
        println!(
            "evaluate net-{name}: mean {:.4}, median {:.4}, p95 {:.4}, max {:.4} (mU/min over {} states)",
            error.mean, error.median, error.p95, error.max, error.samples
        );
        if first_net.is_none() {
            first_net = Some(net);
        }
        evals.push(NetEval {
            name: name.clone(),
            file: nt.file.clone(),
            error,
        });
    }

    // Deployment accounting: sizes from the architecture, latency measured
    // on this machine (reported in the wall sidecar only).
    let tf = Instant::now();
    let net = first_net.expect("at least one net: config validation");
    let nominal = &ctx.config.campaign.nominal;
    let model = basal_model(nominal, ctx.config.campaign.settings.period)?;
    let mpc = ctx.config.campaign.mpc.clone().with_basal(nominal.u_b);
    let n_timing = ctx.config.evaluation.timing_states.min(test_records.len());
    let fc = footprint_comparison(&net, &model, &mpc, &test_records[..n_timing])?;
    let weights_file_bytes = fs::metadata(PathBuf::from(&evals[0].file))
        .map_err(Error::from)?
        .len();
    println!(
        "footprint: {} params, {} B weights file, {} matmuls; KKT dim {} ({} B dense); \
         controller {:.1} us vs surrogate {:.1} us ({:.0}x)",
        fc.net.param_count,
        weights_file_bytes,
        fc.net.matmul_count,
        fc.kkt_dimension,
        fc.qp_kkt_ram_bytes,
        fc.mpc_mean_us,
        fc.nn_mean_us,
        fc.timing_ratio
    );
    wall.stage("footprint_s", tf.elapsed().as_secs_f64());
    wall.stage("mpc_mean_us", fc.mpc_mean_us);
    wall.stage("nn_mean_us", fc.nn_mean_us);
    wall.stage("timing_ratio", fc.timing_ratio);

    manifest.evaluate = Some(EvaluateSummary {
        test_j_star: test_cell.j_star,
        test_s_u: test_cell.s_u,
        test_source,
        test_records: test_records.len(),
        overlap_removed,
        nets: evals,
        footprint: StaticFootprint {
            net: fc.net,
            weights_file_bytes,
            qp_variables: fc.qp_variables,
            qp_constraint_rows: fc.qp_constraint_rows,
            kkt_dimension: fc.kkt_dimension,
            qp_kkt_ram_bytes: fc.qp_kkt_ram_bytes,
        },
    });
    manifest.save(&reports_dir)?;
    wall.total_s = t0.elapsed().as_secs_f64();
    wall.save(&reports_dir)?;
    Ok(())
}
