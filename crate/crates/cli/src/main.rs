//! `vfl` — drives the stochastic point vortex laboratory: mean-field and
//! fluctuation SPDE runs, particle ensembles, the statistical studies, and
//! manifest-based replay. Exit codes: 0 all gates pass, 2 gates failed,
//! 3 configuration error, 4 numerical alarm.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vfl_core::error::VflError;
use vfl_core::io;
use vfl_core::runs::{
    run_fluctuation_limit, run_mean_field, run_mean_field_with_noise, run_particles, study,
    MeanFieldRun, StudyKind, StudyOutput,
};
use vfl_core::scenario::{FileEntry, RunManifest, Scenario};
use vfl_core::Result;

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "VFL_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "vfl",
    about = "Numerical laboratory for the stochastic point vortex model with common noise",
    after_help = "Any scenario key can be overridden with a trailing --section.key=value argument."
)]
struct Cli {
    /// Scenario configuration file (sectioned key = value grammar).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $VFL_OUT_DIR or ./vfl-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker-thread count for the parallel force loop.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force reproducible mode (keyed streams, byte-stable artifacts).
    #[arg(long, global = true)]
    reproducible: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the mean-field SPDE; persist v snapshots and the W path.
    MeanField {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run one interacting-particle ensemble member (conditional on a W
    /// record when supplied, fresh otherwise).
    Particles {
        /// Particle count (default: the largest entry of the N list).
        #[arg(long)]
        n: Option<usize>,
        /// Ensemble member id (selects the idiosyncratic streams).
        #[arg(long, default_value_t = 0)]
        ensemble: u64,
        /// Persisted W path (VFLW) to condition on.
        #[arg(long)]
        w_path: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Integrate the limit fluctuation SPDE along the scenario's W path.
    FluctLimit {
        #[arg(long, default_value_t = 0)]
        ensemble: u64,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run a statistical study and emit its result table and plot data.
    Study {
        /// rate | clt0 | conditional-m | coupling | limit-compare
        kind: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Summarize the pass/fail state of result tables under the output dir.
    Report,
    /// Re-execute a persisted manifest and verify byte-identical artifacts.
    Replay {
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // a failure here only means a pool already exists; that is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match dispatch(&cli) {
        Ok(gates_pass) => {
            if gates_pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("one or more acceptance gates failed");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                VflError::Alarm(_)
                | VflError::Domain(_)
                | VflError::Sampling(_)
                | VflError::Singularity => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("vfl-out"))
    })
}

fn load_scenario(cli: &Cli, overrides: &[String]) -> Result<Scenario> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let mut sc = Scenario::from_text(&text, overrides)?;
    if let Some(seed) = cli.seed {
        sc.master_seed = seed;
    }
    if cli.reproducible {
        sc.reproducible = true;
    }
    sc.validate()?;
    Ok(sc)
}

/// Tracks written artifacts so the manifest can list them with hashes.
struct Artifacts {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Artifacts {
            dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.push(FileEntry {
            path: name.to_string(),
            fnv64: io::fnv64_hex(bytes),
        });
        Ok(())
    }

    fn finish(mut self, command: &str, sc: &Scenario, planned_runs: u64) -> Result<()> {
        let mut manifest = RunManifest::new(command, sc, planned_runs);
        manifest.files = std::mem::take(&mut self.files);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| VflError::Format(format!("manifest serialization failed: {e}")))?;
        std::fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// Run a command's artifact-producing body; returns whether all gates pass.
fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::MeanField { overrides } => {
            let sc = load_scenario(cli, overrides)?;
            let mut art = Artifacts::new(out_dir(cli))?;
            execute_mean_field(&sc, &mut art)?;
            art.finish("mean-field", &sc, 1)?;
            Ok(true)
        }
        Command::Particles {
            n,
            ensemble,
            w_path,
            overrides,
        } => {
            let sc = load_scenario(cli, overrides)?;
            if sc.conditional_on_w && w_path.is_none() {
                return Err(VflError::Config(
                    "conditional_on_w is set but no --w-path record was supplied".into(),
                ));
            }
            let n = n.unwrap_or(*sc.n_list.last().expect("validated nonempty"));
            let mf = match w_path {
                Some(path) => {
                    let rec = io::read_noise_path(&mut std::fs::File::open(path)?)?;
                    run_mean_field_with_noise(&sc, rec)?
                }
                None => run_mean_field(&sc)?,
            };
            let mut art = Artifacts::new(out_dir(cli))?;
            execute_particles(&sc, n, *ensemble, &mf, &mut art)?;
            art.finish(&format!("particles --n {n} --ensemble {ensemble}"), &sc, 1)?;
            Ok(true)
        }
        Command::FluctLimit {
            ensemble,
            overrides,
        } => {
            let sc = load_scenario(cli, overrides)?;
            let mf = run_mean_field(&sc)?;
            let mut art = Artifacts::new(out_dir(cli))?;
            execute_fluct_limit(&sc, &mf, *ensemble, &mut art)?;
            art.finish(&format!("fluct-limit --ensemble {ensemble}"), &sc, 1)?;
            Ok(true)
        }
        Command::Study { kind, overrides } => {
            let sc = load_scenario(cli, overrides)?;
            let study_kind: StudyKind = kind.parse()?;
            let mut art = Artifacts::new(out_dir(cli))?;
            let pass = execute_study(&sc, study_kind, kind, &mut art)?;
            art.finish(&format!("study {kind}"), &sc, sc.ensembles as u64)?;
            Ok(pass)
        }
        Command::Report => report(&out_dir(cli)),
        Command::Replay { manifest } => replay(cli, manifest),
    }
}

fn execute_mean_field(sc: &Scenario, art: &mut Artifacts) -> Result<()> {
    let run = run_mean_field(sc)?;
    persist_mean_field(sc, &run, art)
}

fn persist_mean_field(sc: &Scenario, run: &MeanFieldRun, art: &mut Artifacts) -> Result<()> {
    let mut w_bytes = Vec::new();
    io::write_noise_path(&mut w_bytes, &run.noise)?;
    art.write("w_path.vflw", &w_bytes)?;
    for (i, state) in run.states.iter().enumerate() {
        if i % sc.snapshot_stride == 0 || i == run.states.len() - 1 {
            let mut bytes = Vec::new();
            io::write_field(&mut bytes, &state.v)?;
            art.write(&format!("mean_field/v_{i:06}.vflf"), &bytes)?;
        }
    }
    let mut csv = String::from("time,mass,l2_sq,grid_min,grid_max\n");
    for m in &run.monitors {
        csv.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            m.time, m.mass, m.l2_sq, m.grid_min, m.grid_max
        ));
    }
    art.write("mean_field/monitors.csv", csv.as_bytes())?;
    println!(
        "mean-field: {} steps, final mass {:.3}, grid min {:.6}",
        run.states.len() - 1,
        run.monitors.last().unwrap().mass,
        run.monitors.last().unwrap().grid_min
    );
    Ok(())
}

fn execute_particles(
    sc: &Scenario,
    n: usize,
    ensemble: u64,
    mf: &MeanFieldRun,
    art: &mut Artifacts,
) -> Result<()> {
    persist_mean_field(sc, mf, art)?;
    let run = run_particles(sc, n, ensemble, mf)?;
    let mut traj_bytes = Vec::new();
    io::write_trajectory(&mut traj_bytes, &run.trajectory)?;
    art.write(&format!("particles/traj_e{ensemble:04}.vflp"), &traj_bytes)?;
    let mut csv = Vec::new();
    let refs: Vec<&vfl_core::stats::PairingSeries> = run.series.iter().collect();
    for (i, s) in refs.iter().enumerate() {
        let mut named = format!("# series: {}\n", s.name).into_bytes();
        io::write_series_csv(&mut named, s, i == 0)?;
        csv.extend(named);
    }
    art.write(&format!("particles/series_e{ensemble:04}.csv"), &csv)?;
    println!(
        "particles: N={n}, ensemble {ensemble}, {} snapshots, {} series",
        run.trajectory.times.len(),
        run.series.len()
    );
    Ok(())
}

fn execute_fluct_limit(
    sc: &Scenario,
    mf: &MeanFieldRun,
    ensemble: u64,
    art: &mut Artifacts,
) -> Result<()> {
    persist_mean_field(sc, mf, art)?;
    let run = run_fluctuation_limit(sc, mf, ensemble)?;
    let mut eta_bytes = Vec::new();
    io::write_field(&mut eta_bytes, &run.final_state.eta)?;
    art.write(&format!("fluct/eta_final_e{ensemble:04}.vflf"), &eta_bytes)?;
    let mut csv = Vec::new();
    for (i, s) in run.series.iter().enumerate() {
        let mut named = format!("# series: {}\n", s.name).into_bytes();
        io::write_series_csv(&mut named, s, i == 0)?;
        csv.extend(named);
    }
    art.write(&format!("fluct/series_e{ensemble:04}.csv"), &csv)?;
    println!(
        "fluct-limit: ensemble {ensemble}, final <eta, {}> = {:.6}",
        sc.phis.first().map(String::as_str).unwrap_or("cos_x1"),
        run.series
            .first()
            .and_then(|s| s.values.last())
            .copied()
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn execute_study(
    sc: &Scenario,
    kind: StudyKind,
    kind_name: &str,
    art: &mut Artifacts,
) -> Result<bool> {
    let StudyOutput { table, curves } = study(kind, sc)?;
    art.write("result_table.csv", table.to_csv().as_bytes())?;
    for c in &curves {
        art.write(&format!("curve_{}.csv", c.name), c.to_csv().as_bytes())?;
    }
    let summary = serde_json::json!({
        "study": kind_name,
        "scenario_hash": sc.hash(),
        "rows": table.rows,
        "all_pass": table.all_pass(),
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| VflError::Format(format!("summary serialization failed: {e}")))?;
    art.write("summary.json", (text + "\n").as_bytes())?;
    for row in &table.rows {
        println!(
            "[{}] {} N={} estimate={:.6e} -> {}",
            row.study,
            row.observable,
            row.n,
            row.estimate,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(table.all_pass())
}

/// Walk the output directory for study summaries and print pass/fail lines.
fn report(dir: &Path) -> Result<bool> {
    let mut all_pass = true;
    let mut found = 0usize;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = match std::fs::read_dir(&d) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                found += 1;
                let summary: serde_json::Value = io::read_json(&path)?;
                let pass = summary["all_pass"].as_bool().unwrap_or(false);
                all_pass &= pass;
                println!(
                    "{}: study {} -> {}",
                    path.display(),
                    summary["study"].as_str().unwrap_or("?"),
                    if pass { "pass" } else { "FAIL" }
                );
            }
        }
    }
    if found == 0 {
        println!("no study summaries under {}", dir.display());
    }
    Ok(all_pass)
}

/// Re-execute a manifest into a scratch directory and compare artifact
/// hashes against the recorded inventory.
fn replay(cli: &Cli, manifest_path: &Path) -> Result<bool> {
    let manifest: RunManifest = io::read_json(manifest_path)?;
    let sc = &manifest.scenario;
    sc.validate()?;
    if sc.hash() != manifest.scenario_hash {
        return Err(VflError::Format(
            "manifest scenario hash does not match its embedded scenario".into(),
        ));
    }
    let dir = out_dir(cli).join(format!("replay-{}", manifest.scenario_hash));
    let mut art = Artifacts::new(dir.clone())?;
    let parts: Vec<&str> = manifest.command.split_whitespace().collect();
    match parts.as_slice() {
        ["mean-field"] => execute_mean_field(sc, &mut art)?,
        ["study", kind] => {
            let study_kind: StudyKind = kind.parse()?;
            execute_study(sc, study_kind, kind, &mut art)?;
        }
        ["particles", rest @ ..] => {
            let mut n = *sc.n_list.last().expect("validated nonempty");
            let mut ensemble = 0u64;
            let mut it = rest.iter();
            while let Some(flag) = it.next() {
                match (*flag, it.next()) {
                    ("--n", Some(v)) => {
                        n = v.parse().map_err(|_| {
                            VflError::Format(format!("manifest: bad N '{v}'"))
                        })?
                    }
                    ("--ensemble", Some(v)) => {
                        ensemble = v.parse().map_err(|_| {
                            VflError::Format(format!("manifest: bad ensemble '{v}'"))
                        })?
                    }
                    _ => return Err(VflError::Format(format!(
                        "manifest: unsupported particle argument '{flag}'"
                    ))),
                }
            }
            let mf = run_mean_field(sc)?;
            execute_particles(sc, n, ensemble, &mf, &mut art)?;
        }
        ["fluct-limit", rest @ ..] => {
            let mut ensemble = 0u64;
            let mut it = rest.iter();
            while let Some(flag) = it.next() {
                if *flag == "--ensemble" {
                    if let Some(v) = it.next() {
                        ensemble = v.parse().map_err(|_| {
                            VflError::Format(format!("manifest: bad ensemble '{v}'"))
                        })?;
                    }
                }
            }
            let mf = run_mean_field(sc)?;
            execute_fluct_limit(sc, &mf, ensemble, &mut art)?;
        }
        other => {
            return Err(VflError::Format(format!(
                "manifest: unsupported command '{}'",
                other.join(" ")
            )))
        }
    }
    // compare regenerated artifacts against the recorded inventory
    let mut all_match = true;
    for entry in &manifest.files {
        let regenerated = art.files.iter().find(|f| f.path == entry.path);
        match regenerated {
            Some(f) if f.fnv64 == entry.fnv64 => {
                println!("match: {}", entry.path);
            }
            Some(f) => {
                println!("MISMATCH: {} ({} != {})", entry.path, f.fnv64, entry.fnv64);
                all_match = false;
            }
            None => {
                println!("MISSING: {}", entry.path);
                all_match = false;
            }
        }
    }
    art.finish(&manifest.command, sc, manifest.run_seeds.len() as u64)?;
    Ok(all_match)
}
