//! Relight parameters shared by the command line and the HTTP service.

use derender_core::formation::{LightParams, RenderConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::LightMaterialJson;

/// The relight body: pad position, strengths and optional material overrides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelightRequest {
    pub x: f64,
    pub y: f64,
    pub s_amb: f64,
    pub s_dir: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_spec: Option<f64>,
}

/// A validation failure tied to one request field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub error: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.error)
    }
}

impl std::error::Error for FieldError {}

/// A validated light plus the material values to render with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightOverride {
    pub light: LightParams,
    pub alpha: Option<f64>,
    pub a_spec: Option<f64>,
}

fn field(name: &str, msg: String) -> FieldError {
    FieldError {
        field: name.to_string(),
        error: msg,
    }
}

fn bounded(name: &str, v: f64, lo: f64, hi: f64) -> Result<f64, FieldError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(v)
    } else {
        Err(field(name, format!("{name} = {v} is outside [{lo}, {hi}]")))
    }
}

impl RelightRequest {
    pub fn from_light(light: &LightParams) -> Self {
        let (x, y) = light.xy();
        Self {
            x,
            y,
            s_amb: light.s_amb,
            s_dir: light.s_dir,
            alpha: None,
            a_spec: None,
        }
    }

    /// Check every field against the model ranges of `cfg`.
    pub fn validate(&self, cfg: &RenderConfig) -> Result<LightOverride, FieldError> {
        let x = bounded("x", self.x, -1.0, 1.0)?;
        let y = bounded("y", self.y, -1.0, 1.0)?;
        let s_amb = bounded("s_amb", self.s_amb, 0.0, 1.0)?;
        let s_dir = bounded("s_dir", self.s_dir, 0.0, 1.0)?;
        let alpha = self
            .alpha
            .map(|a| bounded("alpha", a, 1.0, cfg.alpha_upper()))
            .transpose()?;
        let a_spec = self
            .a_spec
            .map(|a| bounded("a_spec", a, 0.0, cfg.a_spec_max))
            .transpose()?;
        let light =
            LightParams::from_xy(s_amb, s_dir, x, y).map_err(|e| field("x", e.to_string()))?;
        Ok(LightOverride {
            light,
            alpha,
            a_spec,
        })
    }

    /// Parse a JSON body field by field so errors name the offending field.
    pub fn from_json(body: &[u8]) -> Result<Self, FieldError> {
        let value: serde_json::Value = serde_json::from_slice(body)
            .map_err(|e| field("body", format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| field("body", "expected a JSON object".into()))?;
        const KNOWN: [&str; 6] = ["x", "y", "s_amb", "s_dir", "alpha", "a_spec"];
        if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(field(k, format!("unknown field {k:?}")));
        }
        let get = |name: &str, required: bool| -> Result<Option<f64>, FieldError> {
            match obj.get(name) {
                None | Some(serde_json::Value::Null) if !required => Ok(None),
                None | Some(serde_json::Value::Null) => {
                    Err(field(name, format!("{name} is required")))
                }
                Some(v) => v
                    .as_f64()
                    .map(Some)
                    .ok_or_else(|| field(name, format!("{name} must be a number"))),
            }
        };
        Ok(Self {
            x: get("x", true)?.expect("required"),
            y: get("y", true)?.expect("required"),
            s_amb: get("s_amb", true)?.expect("required"),
            s_dir: get("s_dir", true)?.expect("required"),
            alpha: get("alpha", false)?,
            a_spec: get("a_spec", false)?,
        })
    }
}

/// Parse a `--light` argument: `"x,y,s_amb,s_dir"`, an inline JSON object
/// (a relight body or a light file), or the path of a JSON file.
pub fn parse_light_arg(arg: &str, cfg: &RenderConfig) -> Result<LightOverride, FieldError> {
    let trimmed = arg.trim();
    if trimmed.starts_with('{') {
        return parse_light_json(trimmed.as_bytes(), cfg);
    }
    let path = std::path::Path::new(trimmed);
    if path.is_file() {
        let bytes =
            std::fs::read(path).map_err(|e| field("light", format!("{}: {e}", path.display())))?;
        return parse_light_json(&bytes, cfg);
    }
    let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(field(
            "light",
            format!("expected \"x,y,s_amb,s_dir\", JSON or a JSON file, got {arg:?}"),
        ));
    }
    let names = ["x", "y", "s_amb", "s_dir"];
    let mut v = [0.0; 4];
    for (k, p) in parts.iter().enumerate() {
        v[k] = p
            .parse()
            .map_err(|_| field(names[k], format!("{} = {p:?} is not a number", names[k])))?;
    }
    RelightRequest {
        x: v[0],
        y: v[1],
        s_amb: v[2],
        s_dir: v[3],
        alpha: None,
        a_spec: None,
    }
    .validate(cfg)
}

fn parse_light_json(bytes: &[u8], cfg: &RenderConfig) -> Result<LightOverride, FieldError> {
    if let Ok(lm) = serde_json::from_slice::<LightMaterialJson>(bytes) {
        let light = lm.light().map_err(|e| field("l", e.to_string()))?;
        let alpha = bounded("alpha", lm.alpha, 1.0, cfg.alpha_upper())?;
        let a_spec = bounded("a_spec", lm.a_spec, 0.0, 1.0)?;
        return Ok(LightOverride {
            light,
            alpha: Some(alpha),
            a_spec: Some(a_spec),
        });
    }
    RelightRequest::from_json(bytes)?.validate(cfg)
}
