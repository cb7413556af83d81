//! Scenario configuration: a plain-text sectioned key-value grammar,
//! CLI-style overrides, validation of the model hypotheses, and the run
//! manifest that makes every run reproducible.
//!
//! Grammar: section headers in brackets (`[model]`), `key = value` lines,
//! lists comma-separated, `#` comments. Every key can be overridden on the
//! command line as `--section.key=value`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::kernel::{Kernel, KernelSpec};
use crate::sigma::{DivFreeVectorField, Phase, TrigTerm};
use crate::spde::STABILITY_C;
use crate::spectral::{default_density, Fft2, FourierField, SpectralGrid};
use crate::stats::TestFunction;
use crate::{Result, VflError};

/// Initial density specification.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum V0Spec {
    Uniform,
    /// The cosine-bump preset `(1/(2pi)^2)(1 + 1/2 cos x1 cos x2)`.
    Default,
    /// Explicit coefficients added on top of the uniform density, as
    /// `(k, re, im)` triples; Hermitian partners must be listed explicitly.
    Coeffs(Vec<([i64; 2], f64, f64)>),
}

/// Common-noise coefficient specification.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SigmaSpec {
    Off,
    /// The preset `amp (cos x2, cos x1)`.
    Default { amp: f64 },
    /// Explicit trigonometric terms.
    Modes(Vec<TrigTerm>),
}

/// How the particle interaction drift is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ForceMode {
    /// Direct O(N^2) pair summation with the configured kernel.
    Direct,
    /// Particle-mesh evaluation (deposit, spectral multiply, read back) on
    /// the given mesh; approximates the spectrally truncated kernel at
    /// k_max = mesh/2.
    Mesh { mesh: usize },
    /// Interaction disabled (pure diffusion / transport).
    Off,
}

/// Full description of one experiment family.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scenario {
    pub v0: V0Spec,
    pub sigma: SigmaSpec,
    pub t_final: f64,
    pub dt: f64,
    pub grid_m: usize,
    pub kernel: KernelSpec,
    pub n_list: Vec<usize>,
    pub ensembles: usize,
    /// Sample count for distributional tests.
    pub samples: usize,
    pub conditional_on_w: bool,
    pub alphas: Vec<f64>,
    /// Test-function preset names (`cos_x1`, `cos_x2`, `cos_sum`).
    pub phis: Vec<String>,
    pub k_stat: i64,
    pub force: ForceMode,
    pub master_seed: u64,
    pub reproducible: bool,
    /// Snapshot cadence (in steps) for persisted trajectories.
    pub snapshot_stride: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            v0: V0Spec::Default,
            sigma: SigmaSpec::Default { amp: 0.5 },
            t_final: 0.25,
            dt: 2.5e-3,
            grid_m: 128,
            kernel: KernelSpec::Regularized { eps: PI / 128.0 },
            n_list: vec![256, 512, 1024, 2048, 4096],
            ensembles: 100,
            samples: 2000,
            conditional_on_w: false,
            alphas: vec![-2.0],
            phis: vec!["cos_x1".into(), "cos_x2".into(), "cos_sum".into()],
            k_stat: 32,
            force: ForceMode::Direct,
            master_seed: 1,
            reproducible: true,
            snapshot_stride: 10,
        }
    }
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "cos" => Ok(Phase::Cos),
        "sin" => Ok(Phase::Sin),
        other => Err(VflError::Config(format!("unknown phase '{other}'"))),
    }
}

/// Raw parsed configuration: (section, key) -> value.
pub type ConfigMap = BTreeMap<(String, String), String>;

/// Parse the sectioned key-value grammar.
pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    let mut section = String::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or_else(|| {
                VflError::Config(format!("line {}: malformed section header '{line}'", ln + 1))
            })?;
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(VflError::Config(format!("line {}: empty section name", ln + 1)));
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            VflError::Config(format!("line {}: expected 'key = value', got '{line}'", ln + 1))
        })?;
        if section.is_empty() {
            return Err(VflError::Config(format!(
                "line {}: key outside any [section]",
                ln + 1
            )));
        }
        map.insert(
            (section.clone(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(map)
}

/// Apply `--section.key=value` overrides on top of a parsed config.
pub fn apply_overrides(map: &mut ConfigMap, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let body = o.strip_prefix("--").unwrap_or(o);
        let (path, value) = body.split_once('=').ok_or_else(|| {
            VflError::Config(format!("override '{o}' is not of the form --section.key=value"))
        })?;
        let (section, key) = path.split_once('.').ok_or_else(|| {
            VflError::Config(format!("override '{o}' is missing the section prefix"))
        })?;
        map.insert(
            (section.trim().to_string(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(())
}

struct Cfg<'a> {
    map: &'a ConfigMap,
}

impl<'a> Cfg<'a> {
    fn get(&self, section: &str, key: &str) -> Option<&'a str> {
        self.map
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                VflError::Config(format!("[{section}] {key}: cannot parse '{s}'"))
            }),
        }
    }

    fn parse_list<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: Vec<T>,
    ) -> Result<Vec<T>> {
        match self.get(section, key) {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|_| {
                        VflError::Config(format!("[{section}] {key}: cannot parse '{item}'"))
                    })
                })
                .collect(),
        }
    }

    fn parse_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("on") | Some("yes") => Ok(true),
            Some("false") | Some("off") | Some("no") => Ok(false),
            Some(s) => Err(VflError::Config(format!("[{section}] {key}: not a bool: '{s}'"))),
        }
    }
}

impl Scenario {
    /// Build a scenario from a parsed config, falling back to the defaults
    /// for any absent key.
    pub fn from_config(map: &ConfigMap) -> Result<Self> {
        let c = Cfg { map };
        let d = Scenario::default();

        let v0 = match c.get("model", "v0") {
            None | Some("default") => V0Spec::Default,
            Some("uniform") => V0Spec::Uniform,
            Some("coeffs") => {
                let spec = c.get("model", "v0_coeffs").ok_or_else(|| {
                    VflError::Config("[model] v0 = coeffs requires v0_coeffs".into())
                })?;
                let mut coeffs = Vec::new();
                for item in spec.split(',') {
                    let parts: Vec<&str> = item.trim().split(':').collect();
                    if parts.len() != 4 {
                        return Err(VflError::Config(format!(
                            "[model] v0_coeffs entry '{item}' is not k1:k2:re:im"
                        )));
                    }
                    let k1 = parts[0].parse().map_err(|_| {
                        VflError::Config(format!("[model] v0_coeffs: bad k1 in '{item}'"))
                    })?;
                    let k2 = parts[1].parse().map_err(|_| {
                        VflError::Config(format!("[model] v0_coeffs: bad k2 in '{item}'"))
                    })?;
                    let re = parts[2].parse().map_err(|_| {
                        VflError::Config(format!("[model] v0_coeffs: bad re in '{item}'"))
                    })?;
                    let im = parts[3].parse().map_err(|_| {
                        VflError::Config(format!("[model] v0_coeffs: bad im in '{item}'"))
                    })?;
                    coeffs.push(([k1, k2], re, im));
                }
                V0Spec::Coeffs(coeffs)
            }
            Some(other) => {
                return Err(VflError::Config(format!("[model] v0: unknown preset '{other}'")))
            }
        };

        let sigma = match c.get("model", "sigma") {
            Some("off") => SigmaSpec::Off,
            None | Some("default") => SigmaSpec::Default {
                amp: c.parse("model", "sigma_amp", 0.5)?,
            },
            Some("modes") => {
                let spec = c.get("model", "sigma_modes").ok_or_else(|| {
                    VflError::Config("[model] sigma = modes requires sigma_modes".into())
                })?;
                let mut terms = Vec::new();
                for item in spec.split(',') {
                    let parts: Vec<&str> = item.trim().split(':').collect();
                    if parts.len() != 5 {
                        return Err(VflError::Config(format!(
                            "[model] sigma_modes entry '{item}' is not comp:k1:k2:phase:amp"
                        )));
                    }
                    terms.push(TrigTerm {
                        comp: parts[0].parse().map_err(|_| {
                            VflError::Config(format!("[model] sigma_modes: bad comp in '{item}'"))
                        })?,
                        k: [
                            parts[1].parse().map_err(|_| {
                                VflError::Config(format!("[model] sigma_modes: bad k1 in '{item}'"))
                            })?,
                            parts[2].parse().map_err(|_| {
                                VflError::Config(format!("[model] sigma_modes: bad k2 in '{item}'"))
                            })?,
                        ],
                        phase: parse_phase(parts[3])?,
                        amp: parts[4].parse().map_err(|_| {
                            VflError::Config(format!("[model] sigma_modes: bad amp in '{item}'"))
                        })?,
                    });
                }
                SigmaSpec::Modes(terms)
            }
            Some(other) => {
                return Err(VflError::Config(format!("[model] sigma: unknown spec '{other}'")))
            }
        };

        let kernel = match c.get("kernel", "mode") {
            None | Some("regularized") => KernelSpec::Regularized {
                eps: c.parse("kernel", "eps", PI / 128.0)?,
            },
            Some("spectral") => KernelSpec::SpectralTruncated {
                k_max: c.parse("kernel", "k_max", 64)?,
            },
            Some("free_space") => KernelSpec::FreeSpacePlusCorrection {
                table_resolution: c.parse("kernel", "table_resolution", 256)?,
            },
            Some(other) => {
                return Err(VflError::Config(format!("[kernel] mode: unknown '{other}'")))
            }
        };

        let force = match c.get("study", "force") {
            None | Some("direct") => ForceMode::Direct,
            Some("mesh") => ForceMode::Mesh {
                mesh: c.parse("study", "mesh", 128)?,
            },
            Some("off") => ForceMode::Off,
            Some(other) => {
                return Err(VflError::Config(format!(
                    "[study] force: unknown mode '{other}' (expected direct, mesh or off)"
                )))
            }
        };

        Ok(Scenario {
            v0,
            sigma,
            t_final: c.parse("model", "t_final", d.t_final)?,
            dt: c.parse("model", "dt", d.dt)?,
            grid_m: c.parse("model", "grid_m", d.grid_m)?,
            kernel,
            n_list: c.parse_list("study", "n_list", d.n_list)?,
            ensembles: c.parse("study", "ensembles", d.ensembles)?,
            samples: c.parse("study", "samples", d.samples)?,
            conditional_on_w: c.parse_bool("study", "conditional_on_w", d.conditional_on_w)?,
            alphas: c.parse_list("study", "alpha_list", d.alphas)?,
            phis: c.parse_list("study", "phi_list", d.phis)?,
            k_stat: c.parse("study", "k_stat", d.k_stat)?,
            force,
            master_seed: c.parse("run", "master_seed", d.master_seed)?,
            reproducible: c.parse_bool("run", "reproducible", d.reproducible)?,
            snapshot_stride: c.parse("run", "snapshot_stride", d.snapshot_stride)?,
        })
    }

    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = parse_config(text)?;
        apply_overrides(&mut map, overrides)?;
        let s = Scenario::from_config(&map)?;
        s.validate()?;
        Ok(s)
    }

    pub fn grid(&self) -> Result<SpectralGrid> {
        SpectralGrid::new(self.grid_m)
    }

    pub fn build_v0(&self, grid: SpectralGrid) -> Result<FourierField> {
        match &self.v0 {
            V0Spec::Uniform => Ok(FourierField::uniform_density(grid)),
            V0Spec::Default => Ok(default_density(grid)),
            V0Spec::Coeffs(list) => {
                let mut f = FourierField::uniform_density(grid);
                for &(k, re, im) in list {
                    f.set(k, num_complex::Complex64::new(re, im));
                }
                let defect = f.hermitian_defect();
                if defect > 1e-12 {
                    return Err(VflError::Config(format!(
                        "v0 coefficient list is not Hermitian (defect {defect:.3e})"
                    )));
                }
                Ok(f)
            }
        }
    }

    pub fn build_sigma(&self) -> Result<DivFreeVectorField> {
        match &self.sigma {
            SigmaSpec::Off => Ok(DivFreeVectorField::zero()),
            SigmaSpec::Default { amp } => Ok(DivFreeVectorField::default_field(*amp)),
            SigmaSpec::Modes(terms) => DivFreeVectorField::new(terms.clone())
                .map_err(|e| VflError::Config(format!("sigma_modes invalid: {e}"))),
        }
    }

    pub fn build_kernel(&self) -> Result<Kernel> {
        Kernel::new(self.kernel)
    }

    /// Step count for the configured horizon.
    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Largest dt the common-noise transport scheme tolerates on this grid.
    pub fn stability_bound(&self) -> Result<f64> {
        let sup = self.build_sigma()?.sup_norm_bound();
        Ok(if sup == 0.0 {
            f64::INFINITY
        } else {
            STABILITY_C / (sup * sup * (self.grid_m * self.grid_m) as f64)
        })
    }

    /// Check every scenario invariant; `Config` error on violation.
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !(self.dt > 0.0) {
            return Err(VflError::Config(format!(
                "t_final = {} and dt = {} must be positive",
                self.t_final, self.dt
            )));
        }
        if self.dt > self.t_final {
            return Err(VflError::Config("dt exceeds t_final".into()));
        }
        let grid = self.grid()?;
        let v0 = self.build_v0(grid)?;
        let fft = Fft2::new(grid);
        let min = fft
            .field_to_grid(&v0)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(VflError::Config(format!(
                "v0 must have a strictly positive lower bound; grid minimum {min:.3e}"
            )));
        }
        let sigma = self.build_sigma()?;
        let defect = sigma.divergence_defect();
        if defect > 1e-10 {
            return Err(VflError::Config(format!(
                "sigma is not divergence-free (defect {defect:.3e})"
            )));
        }
        let bound = self.stability_bound()?;
        if self.dt > bound {
            return Err(VflError::Config(format!(
                "dt = {} violates the stability bound {bound:.3e} for M = {}",
                self.dt, self.grid_m
            )));
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VflError::Config(format!(
                "N list must be strictly increasing and nonempty: {:?}",
                self.n_list
            )));
        }
        if self.n_list[0] < 2 {
            return Err(VflError::Config("N values must be >= 2".into()));
        }
        if self.ensembles == 0 || self.samples == 0 {
            return Err(VflError::Config("ensembles and samples must be positive".into()));
        }
        if self.k_stat < 1 {
            return Err(VflError::Config(format!("k_stat must be >= 1, got {}", self.k_stat)));
        }
        if self.snapshot_stride == 0 {
            return Err(VflError::Config("snapshot_stride must be positive".into()));
        }
        if let ForceMode::Mesh { mesh } = self.force {
            if mesh < 4 || mesh % 2 != 0 {
                return Err(VflError::Config(format!(
                    "mesh must be an even integer >= 4, got {mesh}"
                )));
            }
        }
        if let KernelSpec::Regularized { eps } = self.kernel {
            if !(eps > 0.0) || eps >= PI {
                return Err(VflError::Config(format!(
                    "regularization eps must lie in (0, pi), got {eps}"
                )));
            }
        }
        for name in &self.phis {
            test_function_preset(name)?;
        }
        Ok(())
    }

    /// Stable content hash over the canonical serialization (FNV-1a 64).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        crate::io::fnv64_hex(json.as_bytes())
    }
}

/// Resolve a test-function preset name.
pub fn test_function_preset(name: &str) -> Result<TestFunction> {
    match name {
        "cos_x1" => Ok(TestFunction::cos_x1()),
        "cos_x2" => Ok(TestFunction::cos_x2()),
        "cos_sum" => Ok(TestFunction::cos_sum()),
        other => Err(VflError::Config(format!(
            "unknown test function preset '{other}' (expected cos_x1, cos_x2 or cos_sum)"
        ))),
    }
}

/// Everything needed to reproduce a run bitwise: the scenario itself, the
/// numerical conventions frozen by this artifact version, the derived
/// per-run seeds, and the files written.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub artifact_version: u32,
    /// The CLI command this manifest reproduces (e.g. `study rate`).
    pub command: String,
    pub scenario_hash: String,
    pub scenario: Scenario,
    /// Norm and regularization conventions (documented, not configurable).
    pub conventions: Conventions,
    /// (ensemble_id, derived seed documentation) per planned run.
    pub run_seeds: Vec<RunSeed>,
    pub files: Vec<FileEntry>,
}

/// One artifact produced by a run, with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub fnv64: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Conventions {
    /// Coefficient convention: `c_k = <f, e^{ik.x}>`, inversion with
    /// `(2pi)^{-2}`.
    pub fourier: String,
    /// Sobolev weight `(1+|k|^2)^alpha`, truncated at `|k|_inf <= k_stat`.
    pub sobolev: String,
    /// Kernel regularization parameter actually used.
    pub kernel: KernelSpec,
    /// Stability constant in `dt <= c / (sup|sigma|^2 M^2)`.
    pub stability_c: f64,
    pub k_stat: i64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunSeed {
    pub ensemble_id: u64,
    pub master_seed: u64,
    /// Derivation rule for the idiosyncratic streams of this run.
    pub stream_rule: String,
}

impl RunManifest {
    pub fn new(command: &str, scenario: &Scenario, planned_runs: u64) -> Self {
        let run_seeds = (0..planned_runs)
            .map(|ensemble_id| RunSeed {
                ensemble_id,
                master_seed: scenario.master_seed,
                stream_rule:
                    "streams keyed by (master_seed, role, ensemble_id, particle, step); \
                     the common-noise stream ignores ensemble_id"
                        .into(),
            })
            .collect();
        RunManifest {
            artifact_version: crate::io::FORMAT_VERSION,
            command: command.to_string(),
            scenario_hash: scenario.hash(),
            scenario: scenario.clone(),
            conventions: Conventions {
                fourier: "c_k = integral f(x) exp(-ik.x) dx; f = (2pi)^{-2} sum c_k exp(ik.x)"
                    .into(),
                sobolev: format!(
                    "||f||_a^2 = sum (1+|k|^2)^a |c_k|^2 over |k|_inf <= {}",
                    scenario.k_stat
                ),
                kernel: scenario.kernel,
                stability_c: STABILITY_C,
                k_stat: scenario.k_stat,
            },
            run_seeds,
            files: Vec::new(),
        }
    }
}
