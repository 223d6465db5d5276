//! Tool configuration and scenario files.
//!
//! Both are TOML with a small, documented key set so fixtures stay
//! hand-editable and diffable. Unknown keys are rejected rather than
//! silently ignored; a typo in a grid size should fail loudly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DimSpec, Grid};
use crate::hj_solver::SolveConfig;
use crate::sim::Scenario;

/// Pose grid symmetric about the origin: x and y on [-extent, extent],
/// heading periodic over the full circle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymmetricGridSection {
    pub extent: f64,
    pub nodes: [usize; 3],
}

impl Default for SymmetricGridSection {
    fn default() -> Self {
        SymmetricGridSection {
            extent: 15.0,
            nodes: [61, 61, 45],
        }
    }
}

/// World-frame pose grid sized from the scenario: the bounding box of all
/// initial poses and goals, padded by `margin` on every side.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginGridSection {
    pub margin: f64,
    pub nodes: [usize; 3],
}

impl Default for MarginGridSection {
    fn default() -> Self {
        MarginGridSection {
            margin: 10.0,
            nodes: [81, 81, 45],
        }
    }
}

/// Origin-centered forward-reach table: grid extent and stored horizon.
/// Queries beyond the horizon fall back to the analytic speed bound, so the
/// horizon trades table size against lookup sharpness.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardReachSection {
    pub extent: f64,
    pub nodes: [usize; 3],
    pub horizon: f64,
}

impl Default for ForwardReachSection {
    fn default() -> Self {
        ForwardReachSection {
            extent: 4.0,
            nodes: [81, 81, 41],
            horizon: 3.0,
        }
    }
}

/// Top-level tool configuration. Every field has a default, so an empty file
/// is a valid configuration.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Scenario file used when the command line does not name one.
    pub scenario: Option<PathBuf>,
    pub relative_grid: SymmetricGridSection,
    pub outsider_grid: MarginGridSection,
    pub forward_reach: ForwardReachSection,
    pub solver: SolveConfig,
    pub out_dir: Option<PathBuf>,
    /// Cache location; the REACHGUARD_CACHE environment variable and the
    /// --cache flag take precedence in that order (flag strongest).
    pub cache_dir: Option<PathBuf>,
    /// Worker threads for the solver loops; 0 or absent means automatic.
    pub jobs: Option<usize>,
}

impl Config {
    /// Structural checks independent of any scenario.
    pub fn validate(&self) -> Result<()> {
        for (name, nodes) in [
            ("relative_grid", &self.relative_grid.nodes),
            ("outsider_grid", &self.outsider_grid.nodes),
            ("forward_reach", &self.forward_reach.nodes),
        ] {
            if nodes.iter().any(|n| *n < 11) {
                return Err(Error::argument(format!(
                    "{name}: every dimension needs at least 11 nodes, got {nodes:?}"
                )));
            }
        }
        if !(self.relative_grid.extent > 0.0) || !(self.forward_reach.extent > 0.0) {
            return Err(Error::argument("grid extents must be positive"));
        }
        if !(self.outsider_grid.margin > 0.0) {
            return Err(Error::argument("outsider grid margin must be positive"));
        }
        if !(self.forward_reach.horizon > 0.0) {
            return Err(Error::argument("forward-reach horizon must be positive"));
        }
        Ok(())
    }

    /// Checks that tie the configuration to a concrete scenario.
    pub fn validate_for(&self, sc: &Scenario) -> Result<()> {
        self.validate()?;
        if self.relative_grid.extent <= sc.rc {
            return Err(Error::argument(format!(
                "relative grid extent {} does not strictly contain the danger disk (Rc = {})",
                self.relative_grid.extent, sc.rc
            )));
        }
        Ok(())
    }

    pub fn relative_grid_handle(&self) -> Result<Arc<Grid>> {
        symmetric_pose_grid(self.relative_grid.extent, self.relative_grid.nodes)
    }

    pub fn forward_reach_grid_handle(&self) -> Result<Arc<Grid>> {
        symmetric_pose_grid(self.forward_reach.extent, self.forward_reach.nodes)
    }

    /// World grid covering every initial pose and goal, padded by the margin.
    pub fn outsider_grid_for(&self, sc: &Scenario) -> Result<Arc<Grid>> {
        let pi = std::f64::consts::PI;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &sc.vehicles {
            for (k, val) in [v.initial.x, v.initial.y].into_iter().enumerate() {
                lo[k] = lo[k].min(val);
                hi[k] = hi[k].max(val);
            }
            for (k, val) in v.goal.point.into_iter().enumerate() {
                lo[k] = lo[k].min(val);
                hi[k] = hi[k].max(val);
            }
        }
        let m = self.outsider_grid.margin;
        let n = self.outsider_grid.nodes;
        Grid::new(vec![
            DimSpec {
                min: lo[0] - m,
                max: hi[0] + m,
                nodes: n[0],
                periodic: false,
            },
            DimSpec {
                min: lo[1] - m,
                max: hi[1] + m,
                nodes: n[1],
                periodic: false,
            },
            DimSpec {
                min: -pi,
                max: pi,
                nodes: n[2],
                periodic: true,
            },
        ])
    }
}

fn symmetric_pose_grid(extent: f64, nodes: [usize; 3]) -> Result<Arc<Grid>> {
    let pi = std::f64::consts::PI;
    Grid::new(vec![
        DimSpec {
            min: -extent,
            max: extent,
            nodes: nodes[0],
            periodic: false,
        },
        DimSpec {
            min: -extent,
            max: extent,
            nodes: nodes[1],
            periodic: false,
        },
        DimSpec {
            min: -pi,
            max: pi,
            nodes: nodes[2],
            periodic: true,
        },
    ])
}

fn toml_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        what: e.to_string(),
    }
}

pub fn parse_config(text: &str) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| toml_error(Path::new("<inline>"), e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| toml_error(path, e))?;
    let cfg: Config = toml::from_str(&text).map_err(|e| toml_error(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let sc: Scenario = toml::from_str(text).map_err(|e| toml_error(Path::new("<inline>"), e))?;
    sc.validate()?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| toml_error(path, e))?;
    let sc: Scenario = toml::from_str(&text).map_err(|e| toml_error(path, e))?;
    sc.validate()?;
    Ok(sc)
}
