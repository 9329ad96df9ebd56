//! Flat key = value experiment configuration with a typed schema.
//!
//! The format is deliberately primitive: one `key = value` pair per line,
//! full-line `#` comments, comma-separated lists. Every key is checked
//! against the schema and every value is parsed with a field-level error, so
//! a config echoed into a manifest can be replayed verbatim.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

/// Which family of iterations an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemFamily {
    /// Debiased tanh chain: `f_1 = 1`, `f_t = tanh(x_{t-1})`, correction
    /// coefficients from the covariance recursion.
    TanhAmp,
    /// Constant orthogonal directions `f_t = sqrt(n) e_t` with no drift.
    Orthogonal,
    /// Constant orthogonal directions with an order-one autoregressive
    /// drift `g_t = lambda x_{t-1}` mirrored in the comparison means.
    LinearAr,
}

impl SystemFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemFamily::TanhAmp => "tanh-amp",
            SystemFamily::Orthogonal => "orthogonal",
            SystemFamily::LinearAr => "linear-ar",
        }
    }

    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "tanh-amp" => Ok(SystemFamily::TanhAmp),
            "orthogonal" => Ok(SystemFamily::Orthogonal),
            "linear-ar" => Ok(SystemFamily::LinearAr),
            other => Err(invalid(
                "system",
                format!("unknown family `{other}` (tanh-amp | orthogonal | linear-ar)"),
            )),
        }
    }

    /// Whether the recursion parameters have an exact closed form.
    pub fn is_linear(self) -> bool {
        !matches!(self, SystemFamily::TanhAmp)
    }
}

/// Where the recursion parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeSource {
    MonteCarlo,
    ClosedForm,
}

impl SeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SeSource::MonteCarlo => "monte-carlo",
            SeSource::ClosedForm => "closed-form",
        }
    }

    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "monte-carlo" => Ok(SeSource::MonteCarlo),
            "closed-form" => Ok(SeSource::ClosedForm),
            other => Err(invalid(
                "se_source",
                format!("unknown source `{other}` (monte-carlo | closed-form)"),
            )),
        }
    }
}

/// What the runner produces: coupled trajectories or the checker battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Coupling,
    Oracle,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Coupling => "coupling",
            RunMode::Oracle => "oracle",
        }
    }

    fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "coupling" => Ok(RunMode::Coupling),
            "oracle" => Ok(RunMode::Oracle),
            other => Err(invalid(
                "mode",
                format!("unknown mode `{other}` (coupling | oracle)"),
            )),
        }
    }
}

/// Fully resolved experiment description. Every run is a grid over
/// `n_values x sigma_scales` blocks of `trials` trials each.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub mode: RunMode,
    pub system: SystemFamily,
    pub t_max: usize,
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub se_source: SeSource,
    /// Replicates for the Monte Carlo covariance recursion.
    pub se_replicates: usize,
    /// Replicates for the population mismatch estimates.
    pub psi_replicates: usize,
    /// Tail parameters at which exceedance frequencies are tabulated.
    pub r_grid: Vec<f64>,
    /// Drift coefficient of the autoregressive family.
    pub lambda: f64,
    /// Multipliers applied to the comparison covariance (1 = matched).
    pub sigma_scales: Vec<f64>,
    /// Worker threads; 0 picks the runtime default.
    pub threads: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Canonical flat form, suitable for embedding in a manifest and feeding
    /// back through the parser.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        if let Some(p) = &self.preset {
            kv.push(("preset".into(), p.clone()));
        }
        kv.push(("mode".into(), self.mode.as_str().into()));
        kv.push(("system".into(), self.system.as_str().into()));
        kv.push(("t_max".into(), self.t_max.to_string()));
        kv.push(("n".into(), join_usize(&self.n_values)));
        kv.push(("trials".into(), self.trials.to_string()));
        kv.push(("seed".into(), self.seed.to_string()));
        kv.push(("se_source".into(), self.se_source.as_str().into()));
        kv.push(("se_replicates".into(), self.se_replicates.to_string()));
        kv.push(("psi_replicates".into(), self.psi_replicates.to_string()));
        kv.push(("r_grid".into(), join_f64(&self.r_grid)));
        kv.push(("lambda".into(), format_f64(self.lambda)));
        kv.push(("sigma_scale".into(), join_f64(&self.sigma_scales)));
        kv.push(("threads".into(), self.threads.to_string()));
        kv.push(("out".into(), self.out.display().to_string()));
        kv
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.t_max == 0 {
            return Err(invalid("t_max", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.n_values.is_empty() {
            return Err(invalid("n", "need at least one dimension"));
        }
        for &n in &self.n_values {
            if n < self.t_max {
                return Err(invalid(
                    "n",
                    format!("every dimension must be >= t_max; got n = {n} < {}", self.t_max),
                ));
            }
        }
        if self.se_replicates < 2 {
            return Err(invalid("se_replicates", "need at least 2 replicates"));
        }
        if self.psi_replicates < 2 {
            return Err(invalid("psi_replicates", "need at least 2 replicates"));
        }
        if self.sigma_scales.is_empty() {
            return Err(invalid("sigma_scale", "need at least one scale"));
        }
        for &s in &self.sigma_scales {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("sigma_scale", format!("scales must be positive, got {s}")));
            }
        }
        for &r in &self.r_grid {
            if !(r.is_finite() && r >= 0.0) {
                return Err(invalid("r_grid", format!("tail parameters must be >= 0, got {r}")));
            }
        }
        if !self.lambda.is_finite() {
            return Err(invalid("lambda", "must be finite"));
        }
        if self.se_source == SeSource::ClosedForm && !self.system.is_linear() {
            return Err(invalid(
                "se_source",
                "closed-form parameters exist only for the linear families; \
                 use se_source = monte-carlo with system = tanh-amp",
            ));
        }
        Ok(())
    }
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join(",")
}

/// Shortest decimal form that round-trips through `f64` parsing.
fn format_f64(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains(['.', 'e', 'n', 'i']) {
        s.push_str(".0");
    }
    s
}

/// Ordered accumulation of raw key/value pairs from presets, files, and
/// flags. Later layers overwrite earlier ones; typing happens in
/// [`ConfigDraft::finalize`].
#[derive(Debug, Default, Clone)]
pub struct ConfigDraft {
    values: BTreeMap<String, String>,
    preset: Option<String>,
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "system",
    "t_max",
    "n",
    "trials",
    "seed",
    "se_source",
    "se_replicates",
    "psi_replicates",
    "r_grid",
    "lambda",
    "sigma_scale",
    "threads",
    "out",
];

impl ConfigDraft {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overlays a preset's pairs, recording the name for the echo.
    pub fn apply_preset(&mut self, name: &str) -> Result<(), ConfigError> {
        let pairs = crate::presets::preset(name).ok_or_else(|| ConfigError::UnknownPreset {
            name: name.to_string(),
            available: crate::presets::PRESET_NAMES.join(", "),
        })?;
        for (k, v) in pairs {
            self.values.insert(k.to_string(), v);
        }
        self.preset = Some(name.to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Parses config text and overlays its pairs. A `preset` key is applied
    /// first so explicit keys in the same file win over the preset.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeMap::new();
        let mut file_preset = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                text: line.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), ()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
            if key == "preset" {
                file_preset = Some(value);
                continue;
            }
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            pairs.push((key, value));
        }
        if let Some(name) = file_preset {
            if self.preset.is_none() {
                self.apply_preset(&name)?;
            }
        }
        for (k, v) in pairs {
            self.values.insert(k, v);
        }
        Ok(())
    }

    /// Types and validates the accumulated pairs. Missing keys fall back to
    /// defaults, except `seed`, which is mandatory.
    pub fn finalize(self) -> Result<ExperimentConfig, ConfigError> {
        for key in self.values.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let get = |key: &str| self.values.get(key).map(|s| s.as_str());

        let seed = match get("seed") {
            Some(s) => parse_u64("seed", s)?,
            None => {
                return Err(invalid(
                    "seed",
                    "required; set it in the config file or pass --seed \
                     (runs are never seeded from the clock)",
                ))
            }
        };

        let cfg = ExperimentConfig {
            preset: self.preset,
            mode: match get("mode") {
                Some(s) => RunMode::parse(s)?,
                None => RunMode::Coupling,
            },
            system: match get("system") {
                Some(s) => SystemFamily::parse(s)?,
                None => SystemFamily::TanhAmp,
            },
            t_max: parse_usize("t_max", get("t_max").unwrap_or("4"))?,
            n_values: parse_usize_list("n", get("n").unwrap_or("500"))?,
            trials: parse_usize("trials", get("trials").unwrap_or("50"))?,
            seed,
            se_source: match get("se_source") {
                Some(s) => SeSource::parse(s)?,
                None => SeSource::MonteCarlo,
            },
            se_replicates: parse_usize("se_replicates", get("se_replicates").unwrap_or("2000"))?,
            psi_replicates: parse_usize("psi_replicates", get("psi_replicates").unwrap_or("400"))?,
            r_grid: parse_f64_list("r_grid", get("r_grid").unwrap_or("1,2,3"))?,
            lambda: parse_f64("lambda", get("lambda").unwrap_or("0.5"))?,
            sigma_scales: parse_f64_list("sigma_scale", get("sigma_scale").unwrap_or("1.0"))?,
            threads: parse_usize("threads", get("threads").unwrap_or("0"))?,
            out: PathBuf::from(get("out").unwrap_or("gfom-out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_usize(field: &'static str, s: &str) -> Result<usize, ConfigError> {
    s.trim()
        .parse()
        .map_err(|_| invalid(field, format!("expected a nonnegative integer, got `{s}`")))
}

fn parse_u64(field: &'static str, s: &str) -> Result<u64, ConfigError> {
    s.trim()
        .parse()
        .map_err(|_| invalid(field, format!("expected an unsigned 64-bit integer, got `{s}`")))
}

fn parse_f64(field: &'static str, s: &str) -> Result<f64, ConfigError> {
    s.trim()
        .parse()
        .map_err(|_| invalid(field, format!("expected a number, got `{s}`")))
}

fn parse_usize_list(field: &'static str, s: &str) -> Result<Vec<usize>, ConfigError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_usize(field, p))
        .collect()
}

fn parse_f64_list(field: &'static str, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_f64(field, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ConfigDraft {
        let mut d = ConfigDraft::new();
        d.set("seed", "7");
        d
    }

    #[test]
    fn defaults_fill_in_around_mandatory_seed() {
        let cfg = base().finalize().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.system, SystemFamily::TanhAmp);
        assert_eq!(cfg.t_max, 4);
        assert_eq!(cfg.n_values, vec![500]);
        assert_eq!(cfg.sigma_scales, vec![1.0]);
        assert_eq!(cfg.mode, RunMode::Coupling);
    }

    #[test]
    fn missing_seed_is_a_field_error() {
        let err = ConfigDraft::new().finalize().unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("seed:"), "{msg}");
        assert!(msg.contains("--seed"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_at_parse_time() {
        let mut d = base();
        let err = d.apply_text("wibble = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "wibble"));
    }

    #[test]
    fn text_round_trips_through_the_echo() {
        let mut d = base();
        d.apply_text(
            "# demo\nsystem = linear-ar\nlambda = 0.5\nn = 80, 120\nr_grid = 1, 2.5\ntrials = 9\n",
        )
        .unwrap();
        let cfg = d.finalize().unwrap();
        assert_eq!(cfg.n_values, vec![80, 120]);
        assert_eq!(cfg.r_grid, vec![1.0, 2.5]);

        let echoed = cfg
            .to_key_values()
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        let mut d2 = ConfigDraft::new();
        d2.apply_text(&echoed).unwrap();
        let cfg2 = d2.finalize().unwrap();
        assert_eq!(cfg2.n_values, cfg.n_values);
        assert_eq!(cfg2.r_grid, cfg.r_grid);
        assert_eq!(cfg2.seed, cfg.seed);
        assert_eq!(cfg2.lambda, cfg.lambda);
    }

    #[test]
    fn malformed_lines_report_their_position() {
        let mut d = base();
        let err = d.apply_text("system = orthogonal\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let mut d = base();
        let err = d.apply_text("trials = 3\ntrials = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey(k) if k == "trials"));
    }

    #[test]
    fn typed_errors_name_the_field() {
        let mut d = base();
        d.set("t_max", "three");
        let msg = d.finalize().unwrap_err().to_string();
        assert!(msg.starts_with("t_max:"), "{msg}");
    }

    #[test]
    fn dimension_below_step_count_is_invalid() {
        let mut d = base();
        d.set("n", "3");
        d.set("t_max", "5");
        let msg = d.finalize().unwrap_err().to_string();
        assert!(msg.starts_with("n:"), "{msg}");
    }

    #[test]
    fn closed_form_requires_a_linear_family() {
        let mut d = base();
        d.set("se_source", "closed-form");
        let msg = d.finalize().unwrap_err().to_string();
        assert!(msg.starts_with("se_source:"), "{msg}");

        let mut d = base();
        d.set("system", "linear-ar");
        d.set("se_source", "closed-form");
        assert!(d.finalize().is_ok());
    }

    #[test]
    fn file_preset_applies_under_explicit_keys() {
        let mut d = ConfigDraft::new();
        d.apply_text("preset = linear-ar\nseed = 3\ntrials = 11\n").unwrap();
        let cfg = d.finalize().unwrap();
        assert_eq!(cfg.preset.as_deref(), Some("linear-ar"));
        assert_eq!(cfg.system, SystemFamily::LinearAr);
        assert_eq!(cfg.trials, 11, "explicit key must beat the preset");
    }

    #[test]
    fn unknown_preset_lists_the_catalogue() {
        let mut d = ConfigDraft::new();
        let msg = d.apply_preset("nope").unwrap_err().to_string();
        assert!(msg.contains("linear-ar") && msg.contains("tail-check"), "{msg}");
    }
}
