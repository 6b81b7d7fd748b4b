//! Run configuration loaded from TOML. Every section is optional and falls
//! back to the built-in defaults; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lateral_mpc::anfis::HybridTrainConfig;
use lateral_mpc::mpc::{HildrethSettings, MpcConstraints, MpcParams, DEFAULT_TS};
use lateral_mpc::nn::TrainConfig;
use lateral_mpc::pso::{GridSpec, TuningConfig};
use lateral_mpc::scenario::{LoopConfig, PlantKind, Profile, Scenario};
use lateral_mpc::vehicle::{PacejkaParams, VehicleParams};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "LATERAL_MPC_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub vehicle: VehicleParams,
    pub tire: PacejkaParams,
    pub mpc: MpcSection,
    pub pso: TuningConfig,
    pub grid: GridSpec,
    pub nn: TrainConfig,
    pub anfis: HybridTrainConfig,
    pub paths: Paths,
    /// Per-scenario overrides of the built-in profiles, keyed by scenario name.
    pub scenarios: BTreeMap<String, ScenarioOverride>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("out"),
            vehicle: VehicleParams::default(),
            tire: PacejkaParams::default(),
            mpc: MpcSection::default(),
            pso: TuningConfig::default(),
            grid: GridSpec::default(),
            nn: TrainConfig::default(),
            anfis: HybridTrainConfig::default(),
            paths: Paths::default(),
            scenarios: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub np: usize,
    pub nc: usize,
    pub q: f64,
    pub r: f64,
    pub du_max: f64,
    pub u_max: f64,
    pub y_max: Option<f64>,
    pub ts: f64,
    pub plant: PlantKind,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Query the adapter every this many control steps.
    pub adapter_every: usize,
    /// Record adapter query latency (makes summaries machine dependent).
    pub measure_latency: bool,
}

impl Default for MpcSection {
    fn default() -> Self {
        let p = MpcParams::default();
        let c = MpcConstraints::default();
        let s = HildrethSettings::default();
        Self {
            np: p.np,
            nc: p.nc,
            q: p.q,
            r: p.r,
            du_max: c.du_max,
            u_max: c.u_max,
            y_max: c.y_max,
            ts: DEFAULT_TS,
            plant: PlantKind::Nonlinear,
            solver_tol: s.tol,
            solver_max_iter: s.max_iter,
            adapter_every: 1,
            measure_latency: false,
        }
    }
}

/// Input and output locations. Relative paths are resolved against the
/// working directory, except the model paths, which default to the
/// output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub nn_model: Option<PathBuf>,
    pub anfis_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioOverride {
    pub duration: Option<f64>,
    pub velocity: Option<Profile>,
    pub wind: Option<Profile>,
    pub mu: Option<Profile>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: lateral_mpc::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.vehicle.validate())?;
        check(self.tire.validate())?;
        check(self.mpc_params().validate())?;
        check(self.constraints().validate())?;
        if !(self.mpc.ts > 0.0 && self.mpc.ts.is_finite()) {
            return Err(CliError::Config(format!("mpc.ts: must be > 0, got {}", self.mpc.ts)));
        }
        if self.mpc.adapter_every == 0 || self.mpc.solver_max_iter == 0 || !(self.mpc.solver_tol > 0.0) {
            return Err(CliError::Config(
                "mpc.adapter_every, mpc.solver_max_iter and mpc.solver_tol must be > 0".into(),
            ));
        }
        check(self.pso.validate())?;
        check(self.grid.validate())?;
        check(self.nn.validate())?;
        check(self.anfis.validate())?;
        for name in self.scenarios.keys() {
            let sc = self.scenario(name).map_err(|_| CliError::Config(format!("scenarios.{name}: unknown scenario")))?;
            check(sc.validate()).map_err(|e| CliError::Config(format!("scenarios.{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn mpc_params(&self) -> MpcParams {
        MpcParams {
            np: self.mpc.np,
            nc: self.mpc.nc,
            q: self.mpc.q,
            r: self.mpc.r,
        }
    }

    pub fn constraints(&self) -> MpcConstraints {
        MpcConstraints {
            du_max: self.mpc.du_max,
            u_max: self.mpc.u_max,
            y_max: self.mpc.y_max,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            vehicle: self.vehicle,
            tire: self.tire,
            plant: self.mpc.plant,
            ts: self.mpc.ts,
            constraints: self.constraints(),
            solver: HildrethSettings {
                tol: self.mpc.solver_tol,
                max_iter: self.mpc.solver_max_iter,
            },
            fixed_params: self.mpc_params(),
            adapter_every: self.mpc.adapter_every,
            measure_latency: self.mpc.measure_latency,
        }
    }

    /// Built-in scenario with any configured overrides applied.
    pub fn scenario(&self, name: &str) -> Result<Scenario, CliError> {
        let mut sc = Scenario::builtin(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown scenario `{name}` (known: {})",
                Scenario::BUILTIN_NAMES.join(", ")
            ))
        })?;
        if let Some(o) = self.scenarios.get(name) {
            if let Some(d) = o.duration {
                sc.duration = d;
            }
            if let Some(v) = &o.velocity {
                sc.velocity = v.clone();
            }
            if let Some(w) = &o.wind {
                sc.wind = w.clone();
            }
            if let Some(m) = &o.mu {
                sc.mu = m.clone();
            }
        }
        Ok(sc)
    }

    /// Output root, honouring the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn nn_model_path(&self) -> PathBuf {
        self.paths.nn_model.clone().unwrap_or_else(|| self.output_root().join("models").join("nn.json"))
    }

    pub fn anfis_model_path(&self) -> PathBuf {
        self.paths
            .anfis_model
            .clone()
            .unwrap_or_else(|| self.output_root().join("models").join("anfis.json"))
    }

    /// SHA-256 of the canonical TOML rendering of the effective config.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mpc_params(), MpcParams::default());
        assert_eq!(cfg.grid.points().len(), 6400);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml("[mpc]\nnp = 30\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("bogus")), "{err}");
    }

    #[test]
    fn invalid_value_names_field() {
        let err = RunConfig::from_toml("[tire]\nc_shape = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("tire.c_shape"), "{err}");
        let err = RunConfig::from_toml("[mpc]\nnp = 4\nnc = 8\n").unwrap_err();
        assert!(err.to_string().contains("mpc.nc"), "{err}");
    }

    #[test]
    fn partial_sections_and_overrides() {
        let text = r#"
seed = 7
[grid.vx]
lo = 5.0
hi = 10.0
n = 2
[scenarios.triple-lane-change]
velocity = { kind = "constant", value = 8.0 }
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.len(), 2 * 10 * 10 * 8);
        let sc = cfg.scenario("triple-lane-change").unwrap();
        assert_eq!(sc.velocity, Profile::Constant { value: 8.0 });
        assert!(RunConfig::from_toml("[scenarios.nowhere]\nduration = 3.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.mpc.q = 11.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn shipped_config_matches_the_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.dataset.as_deref(), Some(Path::new("data/tuning_dataset.csv")));
        cfg.paths.dataset = None;
        assert_eq!(cfg, RunConfig::default());
        let text = std::fs::read_to_string(&path).unwrap();
        let example = text
            .lines()
            .skip_while(|l| !l.starts_with("# [scenarios."))
            .map(|l| l.trim_start_matches("# "))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = RunConfig::from_toml(&example).unwrap();
        assert_eq!(cfg.scenario("triple-lane-change").unwrap().mu, Profile::Constant { value: 0.9 });
    }
}
