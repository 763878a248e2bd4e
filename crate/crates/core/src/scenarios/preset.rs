//! Line-oriented preset files.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines are
//! ignored; values are decimal floats, comma-separated float lists, or bare
//! words (for `name` and `kind`). Keys may not repeat.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{heat_lq, lq_scalar_with, make_heat_scenario, HeatParams, LqParams, LqScalarParams};
use crate::error::{Error, Result};
use crate::forward::Scenario;

pub const PRESET_DIR_ENV: &str = "SMPKIT_PRESET_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetKind {
    LqScalar,
    Heat,
    /// Scalar second-order data with path-dependent terminal weight, used by
    /// the Lipschitz probe.
    SecondOrderScalar,
}

impl PresetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "lq_scalar" => Ok(Self::LqScalar),
            "heat" => Ok(Self::Heat),
            "second_order_scalar" => Ok(Self::SecondOrderScalar),
            other => Err(Error::Preset(format!("unknown preset kind `{other}`"))),
        }
    }
}

/// Bias constants `c_bias` of the pass rule `|r| ≤ k·stderr + c_bias·dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub first_identity: f64,
    pub second_identity: f64,
    pub gradient: f64,
    pub spike: f64,
    /// Gradient form of the condition check, which is linear in `u − ū`.
    pub condition: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    name: String,
    kind: PresetKind,
    entries: BTreeMap<String, String>,
}

/// Directories searched for `<name>.preset`, in order.
pub fn preset_dir() -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Ok(d) = std::env::var(PRESET_DIR_ENV) {
        dirs.push(PathBuf::from(d));
    }
    dirs.push(PathBuf::from("presets"));
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("presets"));
    dirs
}

/// Resolves a preset name (or a path to a `.preset` file).
pub fn find_preset(name: &str) -> Result<PathBuf> {
    let direct = Path::new(name);
    if name.ends_with(".preset") && direct.is_file() {
        return Ok(direct.to_path_buf());
    }
    for dir in preset_dir() {
        let p = dir.join(format!("{name}.preset"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Preset(format!("unknown preset `{name}`")))
}

impl Preset {
    pub fn load(name: &str) -> Result<Self> {
        let path = find_preset(name)?;
        let text = fs::read_to_string(&path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Preset(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::Preset(format!("line {}: empty key or value", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Preset(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        let name = entries
            .get("name")
            .cloned()
            .ok_or_else(|| Error::Preset("missing `name`".into()))?;
        let kind = PresetKind::parse(
            entries
                .get("kind")
                .ok_or_else(|| Error::Preset("missing `kind`".into()))?,
        )?;
        Ok(Self { name, kind, entries })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> PresetKind {
        self.kind
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Preset(format!("{}: missing key `{key}`", self.name)))?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Preset(format!("{}: `{key}` is not a number list: {v}", self.name)))
            })
            .collect()
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        match self.get_list(key)?.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Preset(format!("{}: `{key}` must be a single number", self.name))),
        }
    }

    pub fn get_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.entries.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        let x = self.get(key)?;
        if x < 1.0 || x.fract() != 0.0 {
            return Err(Error::Preset(format!("{}: `{key}` must be a positive integer", self.name)));
        }
        Ok(x as usize)
    }

    pub fn calibration(&self) -> Result<Calibration> {
        Ok(Calibration {
            first_identity: self.get_or("c_bias_first", 0.0)?,
            second_identity: self.get_or("c_bias_second", 0.0)?,
            gradient: self.get_or("c_bias_gradient", 0.0)?,
            spike: self.get_or("c_bias_spike", 0.0)?,
            condition: self.get_or("c_bias_condition", 0.0)?,
        })
    }

    fn scalar_params(&self) -> Result<LqScalarParams> {
        let d = LqScalarParams::default();
        Ok(LqScalarParams {
            sigma: self.get_or("sigma", d.sigma)?,
            horizon: self.get_or("horizon", d.horizon)?,
            x0: self.get_or("x0", d.x0)?,
            u_bound: self.get_or("u_bound", d.u_bound)?,
        })
    }

    fn heat_params(&self) -> Result<(usize, usize, HeatParams)> {
        let d = HeatParams::default();
        let p = HeatParams {
            beta: self.get_or("beta", d.beta)?,
            control_gain: self.get_or("control_gain", d.control_gain)?,
            diffusion_gain: self.get_or("diffusion_gain", d.diffusion_gain)?,
            length: self.get_or("length", d.length)?,
            horizon: self.get_or("horizon", d.horizon)?,
            x0: if self.entries.contains_key("x0") {
                self.get_list("x0")?
            } else {
                d.x0
            },
            u_bound: self.get_or("u_bound", d.u_bound)?,
        };
        Ok((self.get_usize("n_modes")?, self.get_usize("control_dim")?, p))
    }

    /// The control problem described by the preset, with its LQ data.
    pub fn build(&self) -> Result<(Scenario, LqParams)> {
        match self.kind {
            PresetKind::LqScalar => lq_scalar_with(&self.scalar_params()?),
            PresetKind::Heat => {
                let (n, m, p) = self.heat_params()?;
                Ok((make_heat_scenario(n, m, &p)?, heat_lq(n, m, &p)?))
            }
            PresetKind::SecondOrderScalar => {
                let p = LqScalarParams {
                    sigma: self.get("sigma")?,
                    horizon: self.get_or("horizon", 1.0)?,
                    x0: 0.0,
                    u_bound: 1.0,
                };
                lq_scalar_with(&p)
            }
        }
    }
}
