//! Pipeline configuration: one namespaced table per stage, TOML on disk,
//! `key=value` overrides on the command line. Unknown keys are rejected.

use crate::bayes::BayesConfig;
use crate::kinematics::TrackerConfig;
use crate::localization::LocConfig;
use crate::reasoner::ReasonerConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),

    #[error("override '{0}' is not of the form key=value")]
    Override(String),

    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Slicing of large frames for small-object detection. Used when merging
/// per-tile detections and when exporting a tile plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: f64,
    pub nms_iou: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile_w: 640,
            tile_h: 640,
            overlap: 0.25,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsConfig {
    /// Length of the historical window, frames.
    pub tau_h: u64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self { tau_h: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrenetConfig {
    /// Neighbourhood radius as a fraction of the frame diagonal.
    pub radius_frac: f64,
    /// Minimum track age for neighbourhood membership, frames.
    pub tau_trk: u64,
    /// Minimum flow speed for a usable flow direction, px/frame.
    pub eps_flow: f64,
}

impl Default for FrenetConfig {
    fn default() -> Self {
        Self {
            radius_frac: 0.25,
            tau_trk: 5,
            eps_flow: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub fps: f64,
    pub camera_id: String,
    pub frame_w: u32,
    pub frame_h: u32,
    pub tiling: TilingConfig,
    pub tracker: TrackerConfig,
    pub kinematics: KinematicsConfig,
    pub frenet: FrenetConfig,
    pub bayes: BayesConfig,
    pub loc: LocConfig,
    pub reasoner: ReasonerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fps: 10.0,
            camera_id: "cam0".into(),
            frame_w: 1920,
            frame_h: 1080,
            tiling: TilingConfig::default(),
            tracker: TrackerConfig::default(),
            kinematics: KinematicsConfig::default(),
            frenet: FrenetConfig::default(),
            bayes: BayesConfig::default(),
            loc: LocConfig::default(),
            reasoner: ReasonerConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text and applies `key=value` overrides (dotted keys,
    /// values in TOML syntax; bare words are taken as strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(o.clone()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Override(o.clone()));
            }
            let value = parse_value(raw.trim());
            set_path(&mut table, key, value)
                .map_err(|e| ConfigError::Parse(format!("override '{o}': {e}")))?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if !(self.fps > 0.0) {
            return inv(format!("fps = {} must be > 0", self.fps));
        }
        if self.frame_w == 0 || self.frame_h == 0 {
            return inv("frame_w and frame_h must be positive".into());
        }
        if self.kinematics.tau_h == 0 {
            return inv("kinematics.tau_h must be >= 1".into());
        }
        if !(self.frenet.radius_frac > 0.0) || !(self.frenet.eps_flow >= 0.0) {
            return inv("frenet.radius_frac must be > 0 and frenet.eps_flow >= 0".into());
        }
        if !(self.tracker.iou_gate > 0.0 && self.tracker.iou_gate <= 1.0)
            || self.tracker.delta_max == 0
        {
            return inv("tracker.iou_gate must be in (0, 1] and tracker.delta_max >= 1".into());
        }
        if !(self.tiling.overlap >= 0.0 && self.tiling.overlap < 1.0)
            || !(self.tiling.nms_iou > 0.0 && self.tiling.nms_iou <= 1.0)
        {
            return inv("tiling.overlap must be in [0, 1) and tiling.nms_iou in (0, 1]".into());
        }
        self.bayes
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loc
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reasoner
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Neighbourhood radius in pixels.
    pub fn radius(&self) -> f64 {
        self.frenet.radius_frac * (self.frame_w as f64).hypot(self.frame_h as f64)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.trim_matches('"').to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("'{p}' is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::ScoringMode;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(
            PipelineConfig::from_toml_with_overrides("", &[]).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = PipelineConfig::default().to_toml();
        assert_eq!(
            PipelineConfig::from_toml_with_overrides(&text, &[]).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "fps = 25\nbayes.alpha_par = 0.05\n[loc]\ntau_p = 7\n";
        let cfg = PipelineConfig::from_toml_with_overrides(
            text,
            &[
                "loc.tau_p=9".into(),
                "bayes.mode=no_frenet".into(),
                "camera_id=north".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.fps, 25.0);
        assert_eq!(cfg.bayes.alpha_par, 0.05);
        assert_eq!(cfg.loc.tau_p, 9);
        assert_eq!(cfg.bayes.mode, ScoringMode::NoFrenet);
        assert_eq!(cfg.camera_id, "north");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_with_overrides("bayes.alpha = 0.1", &[]).is_err());
        assert!(PipelineConfig::from_toml_with_overrides("", &["nonsense=1".into()]).is_err());
        assert!(PipelineConfig::from_toml_with_overrides("", &["loc".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(
            PipelineConfig::from_toml_with_overrides("", &["bayes.alpha_par=0.7".into()]).is_err()
        );
        assert!(
            PipelineConfig::from_toml_with_overrides("", &["reasoner.max_crops=0".into()]).is_err()
        );
        assert!(PipelineConfig::from_toml_with_overrides("", &["fps=0".into()]).is_err());
    }
}
