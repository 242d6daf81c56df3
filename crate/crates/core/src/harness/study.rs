//! Convergence-study driver: micro runs per ε, one macro run, error
//! report, field export and the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{parse_config, StudyConfig};
use crate::geometry::{build_micro_geometry, build_reference_cell, to_f64, Q};
use crate::grid::{build_cell_grid, build_micro_grid, Field};
use crate::macrosim::{MacroProblem, MacroState, MacroTrajectory};
use crate::microsim::{step_count, MicroProblem, MicroState, MicroTrajectory};
use crate::twoscale::{
    calibrate_trace_constant, shift_diagnostic, trace_inequality_diagnostic, ts_error, verify_identities,
    ErrorRow, IdentityResiduals, TwoScaleError, TwoScaleField,
};
use crate::Error;

pub const REPORT_HEADER: &str = "eps,E_chan,E_bulk_plus,E_bulk_minus,E_N,apriori_norm,shift_ratio";

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `1/ε` as used in file names.
pub fn inverse(eps: Q) -> i64 {
    eps.recip().to_integer()
}

pub fn micro_problem(cfg: &StudyConfig, eps: Q) -> Result<MicroProblem, Error> {
    let cell = build_reference_cell(&cfg.profile)?;
    let geom = build_micro_geometry(eps, cfg.height, cell)?;
    Ok(MicroProblem::new(geom, cfg.k, cfg.diff.clone(), cfg.kin.clone(), cfg.solver)?)
}

pub fn macro_problem(cfg: &StudyConfig) -> Result<MacroProblem, Error> {
    let cell = build_reference_cell(&cfg.profile)?;
    Ok(MacroProblem::new(
        cell,
        to_f64(cfg.height),
        cfg.diff.clone(),
        cfg.kin.clone(),
        cfg.macro_settings(),
    )?)
}

pub struct MicroRun {
    pub eps: Q,
    pub problem: MicroProblem,
    pub traj: MicroTrajectory,
    pub seconds: f64,
}

pub struct MacroRun {
    pub problem: MacroProblem,
    pub traj: MacroTrajectory,
    pub seconds: f64,
}

pub fn run_micro(cfg: &StudyConfig, eps: Q) -> Result<MicroRun, Error> {
    let start = Instant::now();
    let problem = micro_problem(cfg, eps)?;
    let traj = problem.run(&cfg.init, cfg.final_time, cfg.dt, cfg.stride)?;
    Ok(MicroRun {
        eps,
        problem,
        traj,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_macro(cfg: &StudyConfig) -> Result<MacroRun, Error> {
    let start = Instant::now();
    let problem = macro_problem(cfg)?;
    let traj = problem.run(&cfg.init, cfg.final_time, cfg.dt, cfg.stride)?;
    Ok(MacroRun {
        problem,
        traj,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
fn parallel<T: Send>(threads: usize, jobs: usize, work: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, jobs.max(1));
    if threads == 1 {
        return (0..jobs).map(work).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = work(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Micro runs for every ε in the config, tagged with ε on failure.
pub fn run_micro_all(cfg: &StudyConfig, threads: usize) -> Result<Vec<MicroRun>, Error> {
    parallel(threads, cfg.eps.len(), |i| {
        run_micro(cfg, cfg.eps[i]).map_err(|e| e.context(format!("ε = {}", cfg.eps[i])))
    })
    .into_iter()
    .collect()
}

/// One report row; the shift ratio is empty when the shift does not fit.
pub fn report_row(cfg: &StudyConfig, micro: &MicroRun, mac: &MacroRun) -> Result<ErrorRow, Error> {
    let mut row = ts_error(&micro.problem, &micro.traj, &mac.problem, &mac.traj)?;
    row.shift_ratio = match shift_diagnostic(&micro.problem, &micro.traj, cfg.shift_l, to_f64(cfg.shift_margin)) {
        Ok(r) => Some(r.ratio),
        Err(TwoScaleError::Shift(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let values = [
        row.e_chan,
        row.e_bulk_plus,
        row.e_bulk_minus,
        row.e_n,
        row.apriori_norm,
        row.shift_ratio.unwrap_or(0.0),
    ];
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical(format!("non-finite report entry at ε = {}", micro.eps)));
    }
    Ok(row)
}

pub fn report_csv(rows: &[ErrorRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let shift = r.shift_ratio.map(fmt_num).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_num(r.eps),
            fmt_num(r.e_chan),
            fmt_num(r.e_bulk_plus),
            fmt_num(r.e_bulk_minus),
            fmt_num(r.e_n),
            fmt_num(r.apriori_norm),
            shift
        )
        .unwrap();
    }
    s
}

pub struct StudyResult {
    pub rows: Vec<ErrorRow>,
    pub micro: Vec<MicroRun>,
    pub macro_run: MacroRun,
}

/// Micro runs for every ε and the macro run (concurrently with up to
/// `threads` workers), then the report rows in ε order.
pub fn run_study(cfg: &StudyConfig, threads: usize) -> Result<StudyResult, Error> {
    enum Job {
        Micro(MicroRun),
        Macro(MacroRun),
    }
    let n = cfg.eps.len();
    let results = parallel(threads, n + 1, |i| {
        if i == n {
            run_macro(cfg).map(Job::Macro).map_err(|e| e.context("macro run"))
        } else {
            run_micro(cfg, cfg.eps[i])
                .map(Job::Micro)
                .map_err(|e| e.context(format!("ε = {}", cfg.eps[i])))
        }
    });
    let mut micro = Vec::with_capacity(n);
    let mut macro_run = None;
    for r in results {
        match r? {
            Job::Micro(m) => micro.push(m),
            Job::Macro(m) => macro_run = Some(m),
        }
    }
    let macro_run = macro_run.expect("macro job ran");
    let rows = parallel(threads, n, |i| {
        report_row(cfg, &micro[i], &macro_run).map_err(|e| e.context(format!("ε = {}", micro[i].eps)))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(StudyResult {
        rows,
        micro,
        macro_run,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn micro_field_name(eps: Q) -> String {
    format!("fields/micro_eps_{}.csv", inverse(eps))
}

pub fn write_micro_fields(path: &Path, run: &MicroRun) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "time", "x_bar", "x_n", "region", "value"])
        .map_err(csv_err)?;
    let cells = run.problem.grid.grid().cells();
    for s in &run.traj.snapshots {
        let (step, t) = (s.step.to_string(), fmt_num(s.t));
        for (c, v) in cells.iter().zip(s.u.values()) {
            w.write_record([
                step.as_str(),
                &t,
                &fmt_num(c.center.0),
                &fmt_num(c.center.1),
                c.region.label(),
                &fmt_num(*v),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const MACRO_FILES: [&str; 3] = [
    "fields/macro_bulk.csv",
    "fields/macro_cells.csv",
    "fields/macro_interface.csv",
];

pub fn write_macro_fields(dir: &Path, run: &MacroRun) -> Result<(), Error> {
    let p = &run.problem;
    let mut bulk = csv_writer(&dir.join(MACRO_FILES[0]))?;
    bulk.write_record(["step", "time", "side", "x_bar", "x_n", "value"])
        .map_err(csv_err)?;
    let mut cells = csv_writer(&dir.join(MACRO_FILES[1]))?;
    cells
        .write_record(["step", "time", "node", "y_bar", "y_n", "value"])
        .map_err(csv_err)?;
    let mut iface = csv_writer(&dir.join(MACRO_FILES[2]))?;
    iface
        .write_record([
            "step",
            "time",
            "node",
            "x_bar",
            "v_plus",
            "v_minus",
            "flux_plus",
            "flux_minus",
        ])
        .map_err(csv_err)?;
    for s in &run.traj.snapshots {
        let (step, t) = (s.step.to_string(), fmt_num(s.t));
        for (side, grid, vals) in [
            ("plus", &p.layout.plus, p.plus_values(s)),
            ("minus", &p.layout.minus, p.minus_values(s)),
        ] {
            for (c, v) in grid.cells().iter().zip(vals) {
                bulk.write_record([
                    step.as_str(),
                    &t,
                    side,
                    &fmt_num(c.center.0),
                    &fmt_num(c.center.1),
                    &fmt_num(*v),
                ])
                .map_err(csv_err)?;
            }
        }
        for j in 0..p.nodes() {
            let node = j.to_string();
            for (c, v) in p.layout.cell.cells().iter().zip(p.cell_values(s, j)) {
                cells
                    .write_record([
                        step.as_str(),
                        &t,
                        &node,
                        &fmt_num(c.center.0),
                        &fmt_num(c.center.1),
                        &fmt_num(*v),
                    ])
                    .map_err(csv_err)?;
            }
            let (fp, fm) = p.cell_flux(s, j);
            iface
                .write_record([
                    step.as_str(),
                    &t,
                    &node,
                    &fmt_num(p.layout.node_center(j)),
                    &fmt_num(s.x[p.v_plus_index(j)]),
                    &fmt_num(s.x[p.v_minus_index(j)]),
                    &fmt_num(fp),
                    &fmt_num(fm),
                ])
                .map_err(csv_err)?;
        }
    }
    bulk.flush()?;
    cells.flush()?;
    iface.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub package: &'static str,
    pub version: &'static str,
    pub command: String,
    pub timings_seconds: Vec<(String, f64)>,
    pub files: Vec<ManifestEntry>,
}

pub fn hash_file(dir: &Path, rel: &str) -> Result<ManifestEntry, Error> {
    let bytes = fs::read(dir.join(rel))?;
    Ok(ManifestEntry {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Writes `manifest.json` listing `files` (relative to `dir`).
pub fn write_manifest(
    dir: &Path,
    command: &str,
    files: &[String],
    timings: Vec<(String, f64)>,
) -> Result<Manifest, Error> {
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        timings_seconds: timings,
        files: files.iter().map(|f| hash_file(dir, f)).collect::<Result<_, _>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(manifest)
}

fn prepare(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir.join("fields"))?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &StudyConfig) -> Result<String, Error> {
    fs::write(dir.join("config.json"), cfg.echo_json() + "\n")?;
    Ok("config.json".into())
}

/// Runs the full study and writes every artifact into `dir`.
pub fn run_and_write(cfg: &StudyConfig, dir: &Path, threads: usize) -> Result<StudyResult, Error> {
    prepare(dir)?;
    let start = Instant::now();
    let result = run_study(cfg, threads)?;
    let mut files = vec![write_config(dir, cfg)?];
    fs::write(dir.join("report.csv"), report_csv(&result.rows))?;
    files.push("report.csv".into());
    let mut timings = Vec::new();
    for run in &result.micro {
        let name = micro_field_name(run.eps);
        write_micro_fields(&dir.join(&name), run)?;
        files.push(name);
        timings.push((format!("micro eps={}", run.eps), run.seconds));
    }
    write_macro_fields(dir, &result.macro_run)?;
    files.extend(MACRO_FILES.iter().map(|s| s.to_string()));
    timings.push(("macro".into(), result.macro_run.seconds));
    timings.push(("total".into(), start.elapsed().as_secs_f64()));
    write_manifest(dir, "run", &files, timings)?;
    Ok(result)
}

/// Micro runs only.
pub fn micro_and_write(cfg: &StudyConfig, dir: &Path, threads: usize) -> Result<Vec<MicroRun>, Error> {
    prepare(dir)?;
    let runs = run_micro_all(cfg, threads)?;
    let mut files = vec![write_config(dir, cfg)?];
    let mut timings = Vec::new();
    for run in &runs {
        let name = micro_field_name(run.eps);
        write_micro_fields(&dir.join(&name), run)?;
        files.push(name);
        timings.push((format!("micro eps={}", run.eps), run.seconds));
    }
    write_manifest(dir, "micro", &files, timings)?;
    Ok(runs)
}

/// Macro run only.
pub fn macro_and_write(cfg: &StudyConfig, dir: &Path) -> Result<MacroRun, Error> {
    prepare(dir)?;
    let run = run_macro(cfg)?;
    let mut files = vec![write_config(dir, cfg)?];
    write_macro_fields(dir, &run)?;
    files.extend(MACRO_FILES.iter().map(|s| s.to_string()));
    write_manifest(dir, "macro", &files, vec![("macro".into(), run.seconds)])?;
    Ok(run)
}

type Rows = Vec<csv::StringRecord>;

fn read_rows(path: &Path, header: &[&str]) -> Result<Rows, Error> {
    let bad = |m: String| Error::Numerical(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let h = r.headers().map_err(|e| bad(e.to_string()))?;
    if h.iter().ne(header.iter().copied()) {
        return Err(bad(format!("unexpected header {h:?}")));
    }
    r.records().map(|x| x.map_err(|e| bad(e.to_string()))).collect()
}

fn num(rec: &csv::StringRecord, i: usize) -> Result<f64, Error> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Numerical(format!("bad number in column {i} of {rec:?}")))
}

fn int(rec: &csv::StringRecord, i: usize) -> Result<usize, Error> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Numerical(format!("bad integer in column {i} of {rec:?}")))
}

/// Splits rows into consecutive snapshots of `per` rows each.
fn snapshots(rows: &Rows, per: usize, what: &str) -> Result<Vec<(usize, f64, std::ops::Range<usize>)>, Error> {
    if per == 0 || rows.len() % per != 0 {
        return Err(Error::Numerical(format!(
            "{what}: {} rows are not a whole number of {per}-row snapshots",
            rows.len()
        )));
    }
    (0..rows.len() / per)
        .map(|s| {
            let r = s * per..(s + 1) * per;
            Ok((int(&rows[r.start], 0)?, num(&rows[r.start], 1)?, r))
        })
        .collect()
}

pub fn load_micro(cfg: &StudyConfig, eps: Q, path: &Path) -> Result<MicroRun, Error> {
    let problem = micro_problem(cfg, eps)?;
    let rows = read_rows(path, &["step", "time", "x_bar", "x_n", "region", "value"])?;
    let grid = problem.grid.grid();
    let mut snaps = Vec::new();
    for (step, t, r) in snapshots(&rows, grid.len(), &path.display().to_string())? {
        let values = rows[r].iter().map(|rec| num(rec, 5)).collect::<Result<Vec<_>, _>>()?;
        snaps.push(MicroState {
            step,
            t,
            u: Field::new(grid, values, t)?,
        });
    }
    let (_, dt) = step_count(cfg.final_time, cfg.dt)?;
    Ok(MicroRun {
        eps,
        problem,
        traj: MicroTrajectory { dt, snapshots: snaps },
        seconds: 0.0,
    })
}

pub fn load_macro(cfg: &StudyConfig, dir: &Path) -> Result<MacroRun, Error> {
    let problem = macro_problem(cfg)?;
    let bulk = read_rows(&dir.join(MACRO_FILES[0]), &["step", "time", "side", "x_bar", "x_n", "value"])?;
    let cells = read_rows(&dir.join(MACRO_FILES[1]), &["step", "time", "node", "y_bar", "y_n", "value"])?;
    let iface = read_rows(
        &dir.join(MACRO_FILES[2]),
        &["step", "time", "node", "x_bar", "v_plus", "v_minus", "flux_plus", "flux_minus"],
    )?;
    let nb = problem.layout.plus.len() + problem.layout.minus.len();
    let nc = problem.layout.cell.len() * problem.nodes();
    let sb = snapshots(&bulk, nb, MACRO_FILES[0])?;
    let sc = snapshots(&cells, nc, MACRO_FILES[1])?;
    let si = snapshots(&iface, problem.nodes(), MACRO_FILES[2])?;
    if sb.len() != sc.len() || sb.len() != si.len() {
        return Err(Error::Numerical("macro field files disagree on snapshot count".into()));
    }
    let mut snaps = Vec::with_capacity(sb.len());
    for ((b, c), i) in sb.into_iter().zip(sc).zip(si) {
        let mut x = vec![0.0; problem.len()];
        let np = problem.layout.plus.len();
        for (a, rec) in bulk[b.2].iter().enumerate() {
            let idx = if a < np {
                problem.plus_range().start + a
            } else {
                problem.minus_range().start + a - np
            };
            x[idx] = num(rec, 5)?;
        }
        let ncell = problem.layout.cell.len();
        for (a, rec) in cells[c.2].iter().enumerate() {
            x[problem.cell_range(a / ncell).start + a % ncell] = num(rec, 5)?;
        }
        for (j, rec) in iface[i.2].iter().enumerate() {
            x[problem.v_plus_index(j)] = num(rec, 4)?;
            x[problem.v_minus_index(j)] = num(rec, 5)?;
        }
        snaps.push(MacroState { step: b.0, t: b.1, x });
    }
    let (_, dt) = step_count(cfg.final_time, cfg.dt)?;
    Ok(MacroRun {
        problem,
        traj: MacroTrajectory { dt, snapshots: snaps },
        seconds: 0.0,
    })
}

/// Recomputes the report from the stored config and fields of a run
/// directory. Returns `(stored, recomputed)` report text.
pub fn rederive_report(dir: &Path) -> Result<(String, String), Error> {
    let text = fs::read_to_string(dir.join("config.json"))?;
    let cfg = parse_config(&text)?;
    let stored = fs::read_to_string(dir.join("report.csv"))?;
    let mac = load_macro(&cfg, dir)?;
    let mut rows = Vec::with_capacity(cfg.eps.len());
    for &eps in &cfg.eps {
        let run = load_micro(&cfg, eps, &dir.join(micro_field_name(eps)))?;
        rows.push(report_row(&cfg, &run, &mac).map_err(|e| e.context(format!("ε = {eps}")))?);
    }
    Ok((stored, report_csv(&rows)))
}

/// Identity residuals and trace-inequality check for one ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorCheck {
    pub eps: f64,
    pub residuals: IdentityResiduals,
    pub trace_constant: f64,
    /// Largest `lhs / rhs` of the trace inequality over the samples.
    pub trace_ratio: f64,
}

/// Unfolding identities on `samples` random fields per ε, plus the trace
/// inequality with `θ = 1` on random smooth channel fields.
pub fn verify_operators(cfg: &StudyConfig, seed: u64, samples: usize) -> Result<Vec<OperatorCheck>, Error> {
    let cell = build_reference_cell(&cfg.profile)?;
    let cell_grid = build_cell_grid(&cell, cfg.m)?;
    let constant = calibrate_trace_constant(&cell_grid, 1.0);
    let mut out = Vec::with_capacity(cfg.eps.len());
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let geom = build_micro_geometry(eps, cfg.height, cell.clone())?;
        let grid = build_micro_grid(&geom, cfg.k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let n = grid.grid().len();
        let nref = grid.cell_grid().len();
        let mut residuals = IdentityResiduals::default();
        let mut trace_ratio: f64 = 0.0;
        for _ in 0..samples {
            let random = |rng: &mut ChaCha8Rng| -> Result<Field, Error> {
                Ok(Field::new(grid.grid(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.0)?)
            };
            let v = random(&mut rng)?;
            let w = random(&mut rng)?;
            let cols = grid.columns();
            let phi = TwoScaleField::new(
                cols,
                nref,
                (0..cols * nref).map(|_| rng.random_range(-1.0..1.0)).collect(),
                0.0,
            )?;
            residuals = residuals.combine(&verify_identities(&grid, &v, &w, &phi)?);

            let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let smooth = Field::from_fn(grid.grid(), 0.0, |cell| {
                let (x, y) = cell.center;
                a + (std::f64::consts::PI * (b * x + 2.0 * c * y)).sin()
            });
            let (lhs, rhs) = trace_inequality_diagnostic(&grid, &smooth, 1.0, constant)?;
            if rhs > 0.0 {
                trace_ratio = trace_ratio.max(lhs / rhs);
            }
        }
        out.push(OperatorCheck {
            eps: to_f64(eps),
            residuals,
            trace_constant: constant,
            trace_ratio,
        });
    }
    Ok(out)
}

pub fn resolve_out(cfg: &StudyConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&cfg.output))
}
