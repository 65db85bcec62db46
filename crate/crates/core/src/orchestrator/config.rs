//! Run configuration: TOML text, optionally layered over a named preset.
//!
//! A config either spells out every section or names `preset = "..."` and
//! overrides individual keys. Tables merge key by key; arrays and scalars
//! replace the preset value. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::presets;
use crate::coarse_opt::{CoarseParams, OcParams, ThresholdPolicy};
use crate::fem::Material;
use crate::fine_opt::{FineParams, LoadMode, ProjectionParams};
use crate::grid::{BoundarySpec, CartesianGrid, Side, Vec2};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config error at `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("unknown preset `{0}` (try `preset-list`)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read mask file {path}: {message}")]
    MaskFile { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub rho0: f64,
    /// `[rho_bar_min, rho_bar_max]`.
    pub thresholds: [f64; 2],
    pub load_mode: LoadMode,
    pub grid: GridConfig,
    pub material: MaterialConfig,
    pub coarse: CoarseParams,
    pub oc: OcParams,
    pub fine: FineConfig,
    pub projection: ProjectionParams,
    pub supports: Vec<SupportConfig>,
    pub loads: Vec<LoadConfig>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    pub mask: MaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskConfig {
    Full,
    /// Removes the elements whose centre lies at `x > x`, `y > y`.
    RemoveUpperRight { x: f64, y: f64 },
    /// Text file with one row of `0`/`1` per element row, top row first.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub young: f64,
    pub poisson: f64,
    pub rho_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineConfig {
    pub n: usize,
    pub penalty: f64,
    pub r_min: f64,
    pub eps: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    pub side: Side,
    /// Range along the side in physical coordinates (x for bottom/top, y
    /// for left/right).
    pub from: f64,
    pub to: f64,
    pub fix: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub side: Side,
    pub from: f64,
    pub to: f64,
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    Constant { value: [f64; 2] },
    /// Linear from `start` at `from` to `end` at `to`.
    Linear { start: [f64; 2], end: [f64; 2] },
    /// `peak (1 - ξ²)` with `ξ` running from -1 at `from` to 1 at `to`.
    Parabolic { peak: [f64; 2] },
}

impl Profile {
    pub fn eval(&self, s: f64, from: f64, to: f64) -> Vec2 {
        let v = |a: [f64; 2]| Vec2::new(a[0], a[1]);
        match self {
            Profile::Constant { value } => v(*value),
            Profile::Linear { start, end } => {
                let r = (s - from) / (to - from);
                v(*start) * (1.0 - r) + v(*end) * r
            }
            Profile::Parabolic { peak } => {
                let xi = (2.0 * s - from - to) / (to - from);
                v(*peak) * (1.0 - xi * xi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Worker threads for the cell farm; 0 picks the number of CPUs.
    pub workers: usize,
    /// Also write one raster per cell.
    #[serde(default)]
    pub cell_rasters: bool,
    /// Reuse per-cell results already present in the output directory.
    #[serde(default)]
    pub resume: bool,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse config text, resolving `preset = "..."`.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut value: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let preset = value.as_table_mut().and_then(|t| t.remove("preset"));
    if let Some(p) = preset {
        let name = p.as_str().ok_or_else(|| ConfigError::Field { path: "preset".into(), message: "expected a string".into() })?;
        let mut base: toml::Value = presets::preset_text(name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.into()))?
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| ConfigError::Parse(format!("preset {name}: {e}")))?;
        merge(&mut base, value);
        value = base;
    }
    let config: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| ConfigError::Field { path: e.path().to_string(), message: e.into_inner().to_string() })?;
    config.validate()?;
    Ok(config)
}

pub fn preset_config(name: &str) -> Result<RunConfig, ConfigError> {
    parse_config(&format!("preset = \"{name}\"\n"))
}

impl RunConfig {
    pub fn policy(&self) -> ThresholdPolicy {
        ThresholdPolicy { rho_bar_min: self.thresholds[0], rho_bar_max: self.thresholds[1], rho0: self.rho0 }
    }

    pub fn coarse_material(&self) -> Material {
        Material {
            young: self.material.young,
            poisson: self.material.poisson,
            penalty: self.coarse.penalty,
            rho_min: self.material.rho_min,
        }
    }

    pub fn fine_params(&self) -> FineParams {
        FineParams {
            n: self.fine.n,
            penalty: self.fine.penalty,
            r_min: self.fine.r_min,
            eps: self.fine.eps,
            max_iterations: self.fine.max_iterations,
            oc: self.oc,
            projection: self.projection,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        let g = &self.grid;
        if g.nx == 0 || g.ny == 0 || !(g.width > 0.0) || !(g.height > 0.0) {
            return Err(inv("grid needs positive nx, ny, width and height".into()));
        }
        let m = self.coarse_material();
        m.validate().map_err(|e| inv(e.to_string()))?;
        m.with_penalty(self.fine.penalty).validate().map_err(|e| inv(format!("fine: {e}")))?;
        self.policy().validate(self.material.rho_min).map_err(|e| inv(e.to_string()))?;
        self.coarse.validate().map_err(|e| inv(e.to_string()))?;
        self.oc.validate().map_err(|e| inv(e.to_string()))?;
        self.fine_params().validate().map_err(|e| inv(e.to_string()))?;
        if self.supports.is_empty() {
            return Err(inv("at least one support is required".into()));
        }
        let ranges = self.supports.iter().map(|s| (s.side, s.from, s.to)).chain(self.loads.iter().map(|l| (l.side, l.from, l.to)));
        for (side, from, to) in ranges {
            if !(from <= to) || !from.is_finite() || !to.is_finite() {
                return Err(inv(format!("range [{from}, {to}] on {side:?} must satisfy from <= to")));
            }
        }
        for l in &self.loads {
            if l.from == l.to {
                return Err(inv(format!("load on {:?} has an empty range", l.side)));
            }
        }
        Ok(())
    }

    /// Element mask (true = active), by element id.
    pub fn mask(&self) -> Result<Vec<bool>, ConfigError> {
        let g = &self.grid;
        let (hx, hy) = (g.width / g.nx as f64, g.height / g.ny as f64);
        let mut mask = vec![true; g.nx * g.ny];
        match &g.mask {
            MaskConfig::Full => {}
            MaskConfig::RemoveUpperRight { x, y } => {
                for ix in 0..g.nx {
                    for iy in 0..g.ny {
                        let (cx, cy) = ((ix as f64 + 0.5) * hx, (iy as f64 + 0.5) * hy);
                        if cx > *x && cy > *y {
                            mask[ix * g.ny + iy] = false;
                        }
                    }
                }
            }
            MaskConfig::File { path } => {
                let err = |message: String| ConfigError::MaskFile { path: path.display().to_string(), message };
                let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
                let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
                if rows.len() != g.ny {
                    return Err(err(format!("expected {} rows, found {}", g.ny, rows.len())));
                }
                for (r, row) in rows.iter().enumerate() {
                    let cells: Vec<char> = row.chars().filter(|c| !c.is_whitespace()).collect();
                    if cells.len() != g.nx {
                        return Err(err(format!("row {} has {} entries, expected {}", r + 1, cells.len(), g.nx)));
                    }
                    let iy = g.ny - 1 - r;
                    for (ix, c) in cells.iter().enumerate() {
                        mask[ix * g.ny + iy] = match c {
                            '1' => true,
                            '0' => false,
                            other => return Err(err(format!("unexpected character `{other}`"))),
                        };
                    }
                }
            }
        }
        Ok(mask)
    }

    pub fn build_grid(&self) -> Result<CartesianGrid, ConfigError> {
        let g = &self.grid;
        CartesianGrid::new(g.nx, g.ny, g.width / g.nx as f64, g.height / g.ny as f64, self.mask()?)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn build_boundary(&self, grid: &CartesianGrid) -> Result<BoundarySpec, ConfigError> {
        let mut b = BoundarySpec::new();
        for s in &self.supports {
            b.support_side(grid, s.side, s.from, s.to, s.fix);
        }
        for l in &self.loads {
            b.load_side(grid, l.side, l.from, l.to, |s| l.profile.eval(s, l.from, l.to));
        }
        b.validate(grid).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if b.neumann.is_empty() {
            return Err(ConfigError::Invalid("loads select no boundary edge".into()));
        }
        Ok(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_preset_matches_table() {
        let c = preset_config("example1").unwrap();
        assert_eq!((c.grid.nx, c.grid.ny, c.fine.n), (32, 16, 32));
        assert_eq!((c.coarse.penalty, c.fine.penalty), (1.0, 3.0));
        assert_eq!((c.coarse.r_min, c.fine.r_min), (1.5, 1.3));
        assert_eq!((c.coarse.eps, c.fine.eps), (0.03, 0.01));
        let p = c.projection;
        assert_eq!((p.beta0, p.beta_max, p.mu, p.m_nd_min), (1.0, 2.0, 0.5, 50.0));
        assert_eq!(c.thresholds, [0.12, 0.88]);
        assert_eq!((c.material.young, c.material.poisson, c.rho0), (1000.0, 0.3, 0.5));
    }

    #[test]
    fn example2_preset_matches_table() {
        let c = preset_config("example2").unwrap();
        assert_eq!((c.grid.nx, c.grid.ny, c.grid.width, c.grid.height), (32, 32, 10.0, 10.0));
        assert_eq!((c.projection.beta_max, c.projection.m_nd_min), (4.5, 45.0));
        let grid = c.build_grid().unwrap();
        assert_eq!(grid.num_active_elements(), 32 * 32 * 3 / 4);
        assert!(!grid.is_active(grid.element_id(16, 16)));
        assert!(grid.is_active(grid.element_id(15, 16)));
    }

    #[test]
    fn overrides_merge_over_preset() {
        let c = parse_config("preset = \"example1\"\nthresholds = [0.3, 0.7]\n[fine]\nn = 8\n[output]\nworkers = 2\n").unwrap();
        assert_eq!(c.thresholds, [0.3, 0.7]);
        assert_eq!(c.fine.n, 8);
        assert_eq!(c.fine.r_min, 1.3);
        assert_eq!(c.output.workers, 2);
        assert_eq!(c.grid.nx, 32);
    }

    #[test]
    fn inverted_thresholds_are_rejected() {
        let err = parse_config("preset = \"example1\"\nthresholds = [0.6, 0.4]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = parse_config("preset = \"example1\"\n[fine]\nradius = 2.0\n").unwrap_err();
        match err {
            ConfigError::Field { path, .. } => assert!(path.starts_with("fine"), "{path}"),
            other => panic!("{other}"),
        }
        assert!(matches!(parse_config("preset = \"nope\"\n"), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(parse_config("rho0 = "), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn full_config_without_preset_round_trips() {
        let c = preset_config("example2").unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn mask_file_rows_run_top_down() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.txt");
        std::fs::write(&path, "1 0\n1 1\n").unwrap();
        let mut c = preset_config("example1").unwrap();
        c.grid.nx = 2;
        c.grid.ny = 2;
        c.grid.mask = MaskConfig::File { path };
        let mask = c.mask().unwrap();
        // element (1, 1) is the top-right one
        assert_eq!(mask, vec![true, true, true, false]);
    }

    #[test]
    fn parabolic_profile() {
        let p = Profile::Parabolic { peak: [0.0, -1.0] };
        assert_eq!(p.eval(0.5, 0.0, 1.0), Vec2::new(0.0, -1.0));
        assert_eq!(p.eval(0.0, 0.0, 1.0), Vec2::new(0.0, -0.0));
        assert!((p.eval(2.5, 0.0, 5.0).y + 1.0).abs() < 1e-15);
    }
}
