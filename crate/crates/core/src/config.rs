//! TOML run configuration.
//!
//! Every section has defaults matching the six-vehicle benchmark, so an
//! empty file is a valid configuration. Relative paths resolve against the
//! directory of the configuration file.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::datamat::MatrixKind;
use crate::model::{Equilibrium, FleetTopology, ModelError, OvmParams};
use crate::privacy::{demo_maps, lift_maps, AffineMap1, AffineMap2, ConstraintMode, FleetMasks, PrivacyError};
use crate::sim::{ExcitationSpec, NoiseSpec, ScenarioKind, ScenarioSpec, SimSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse configuration")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSpec {
    /// Followers behind the head vehicle.
    pub n: usize,
    /// 1-based positions of the automated vehicles.
    pub cavs: Vec<usize>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self { n: 6, cavs: vec![2, 5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumSpec {
    pub velocity: f64,
}

impl Default for EquilibriumSpec {
    fn default() -> Self {
        Self { velocity: 15.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Columns of the data matrix; the sample count follows from the matrix kind.
    pub columns: usize,
    pub excitation: ExcitationSpec,
    /// Dataset written by `collect`; data-driven modes read it when present
    /// and otherwise collect in memory.
    pub dataset: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { columns: 900, excitation: ExcitationSpec::default(), dataset: None }
    }
}

/// State map of one automated vehicle, as a rotation angle or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateMaskSpec {
    Rotation { rotation: f64, l: [f64; 2] },
    /// Row-major `p`.
    Matrix { p: [[f64; 2]; 2], l: [f64; 2] },
}

impl StateMaskSpec {
    pub fn to_map(&self) -> AffineMap2 {
        match *self {
            StateMaskSpec::Rotation { rotation, l } => AffineMap2::rotation(rotation, Vector2::from(l)),
            StateMaskSpec::Matrix { p, l } => AffineMap2 { p: Matrix2::new(p[0][0], p[0][1], p[1][0], p[1][1]), l: Vector2::from(l) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub state: Vec<StateMaskSpec>,
    pub input: Vec<AffineMap1>,
}

impl MaskSpec {
    /// Masks of the benchmark fleet with CAVs at positions 2 and 5.
    pub fn demo() -> Self {
        let (s, i) = demo_maps();
        let state = s
            .iter()
            .map(|m| StateMaskSpec::Rotation { rotation: m.p[(1, 0)].atan2(m.p[(0, 0)]), l: [m.l[0], m.l[1]] })
            .collect();
        Self { state, input: i }
    }

    pub fn lift(&self, fleet: &FleetTopology) -> Result<FleetMasks, PrivacyError> {
        let state: Vec<AffineMap2> = self.state.iter().map(StateMaskSpec::to_map).collect();
        lift_maps(&state, &self.input, fleet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySpec {
    pub constraints: ConstraintMode,
    /// Diversity witnesses produced by `mask-demo`.
    pub witnesses: usize,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self { constraints: ConstraintMode::ExactPreimage, witnesses: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub fleet: FleetSpec,
    pub ovm: OvmParams,
    pub equilibrium: EquilibriumSpec,
    pub controller: ControllerConfig,
    pub data: DataSpec,
    pub scenario: ScenarioSpec,
    pub noise: NoiseSpec,
    pub simulation: SimSettings,
    /// Defaults to the benchmark set; identity maps disable masking.
    pub masks: Option<MaskSpec>,
    pub privacy: PrivacySpec,
    /// Directory relative paths resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            fleet: FleetSpec::default(),
            ovm: OvmParams::default(),
            equilibrium: EquilibriumSpec::default(),
            controller: ControllerConfig::default(),
            data: DataSpec::default(),
            scenario: ScenarioSpec::emergency_brake(),
            noise: NoiseSpec::default(),
            simulation: SimSettings::default(),
            masks: Some(MaskSpec::demo()),
            privacy: PrivacySpec::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn fleet(&self) -> Result<FleetTopology, ConfigError> {
        Ok(FleetTopology::new(self.fleet.n, &self.fleet.cavs)?)
    }

    pub fn equilibrium(&self) -> Result<Equilibrium, ConfigError> {
        Ok(Equilibrium::from_velocity(&self.ovm, self.equilibrium.velocity)?)
    }

    pub fn masks(&self, fleet: &FleetTopology) -> Result<FleetMasks, ConfigError> {
        match &self.masks {
            Some(spec) => Ok(spec.lift(fleet)?),
            None => Ok(FleetMasks::identity(fleet)),
        }
    }

    pub fn matrix_kind(&self) -> MatrixKind {
        self.controller.matrix_kind
    }

    /// Samples needed for the configured column count.
    pub fn samples(&self) -> usize {
        self.matrix_kind().samples_for_columns(self.data.columns, self.controller.t_ini + self.controller.horizon)
    }

    pub fn steps(&self) -> usize {
        (self.scenario.duration / self.simulation.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fleet = self.fleet()?;
        self.equilibrium()?;
        self.controller.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(spec) = &self.masks {
            if spec.state.len() != fleet.m() || spec.input.len() != fleet.m() {
                return Err(ConfigError::Invalid(format!(
                    "mask set has {} state and {} input maps for {} automated vehicles",
                    spec.state.len(),
                    spec.input.len(),
                    fleet.m()
                )));
            }
            spec.lift(&fleet)?;
        }
        if self.data.columns == 0 {
            return Err(ConfigError::Invalid("data.columns must be positive".into()));
        }
        let sim = &self.simulation;
        if !(sim.dt > 0.0 && sim.dt.is_finite()) || !(sim.accel_bounds.0 < 0.0 && sim.accel_bounds.1 > 0.0) {
            return Err(ConfigError::Invalid("simulation.dt must be positive and accel_bounds must bracket zero".into()));
        }
        if !(self.noise.half_width >= 0.0) {
            return Err(ConfigError::Invalid("noise.half_width must be nonnegative".into()));
        }
        let ex = &self.data.excitation;
        if !(ex.input_half_width >= 0.0 && ex.head_half_width >= 0.0) {
            return Err(ConfigError::Invalid("excitation half-widths must be nonnegative".into()));
        }
        if !matches!(self.scenario.kind, ScenarioKind::ReplayCsv { .. }) {
            self.scenario.validate(sim.accel_bounds.0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_benchmark() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        let mut expected = RunConfig::default();
        expected.base_dir = cfg.base_dir.clone();
        assert_eq!(cfg, expected);
        assert_eq!(cfg.samples(), 944);
        assert_eq!(cfg.steps(), 600);
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn demo_mask_spec_matches_maps() {
        let fleet = FleetTopology::new(6, &[2, 5]).unwrap();
        let (s, i) = demo_maps();
        let expected = lift_maps(&s, &i, &fleet).unwrap();
        let got = MaskSpec::demo().lift(&fleet).unwrap();
        assert!((got.p_y - expected.p_y).amax() < 1e-15);
        assert_eq!(got.l_u, expected.l_u);
    }

    #[test]
    fn matrix_masks_parse() {
        let text = r#"
            [fleet]
            n = 2
            cavs = [1]
            [masks]
            state = [{ p = [[2.0, 0.0], [0.0, 1.0]], l = [1.0, 0.0] }]
            input = [{ p = 1.0, l = 0.0 }]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let masks = cfg.masks(&cfg.fleet().unwrap()).unwrap();
        assert_eq!(masks.p_y[(0, 0)], 2.0);
    }

    #[test]
    fn mask_count_must_match_fleet() {
        let text = "[fleet]\nn = 3\ncavs = [1]\n";
        assert!(matches!(RunConfig::from_toml_str(text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_keys_and_bad_kinds_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 3").is_err());
        assert!(RunConfig::from_toml_str("[controller]\nmatrix_kind = \"toeplitz\"").is_err());
        assert!(RunConfig::from_toml_str("[equilibrium]\nvelocity = 45.0").is_err());
        assert!(RunConfig::from_toml_str("[scenario]\nkind = \"drive_cycle\"\nduration = 5.0\nbreakpoints = []\nspeed = 3.0").is_err());
    }

    #[test]
    fn scenario_sections_parse() {
        let text = r#"
            [scenario]
            kind = "drive_cycle"
            duration = 20.0
            breakpoints = [[0.0, 15.0], [10.0, 18.0]]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert!(matches!(cfg.scenario.kind, ScenarioKind::DriveCycle { .. }));
    }
}
