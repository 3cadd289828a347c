//! Flat `key = value` configuration.
//!
//! `#` starts a comment, blank lines are ignored and a later duplicate
//! overrides an earlier one. Values are typed by their syntax: an optional
//! sign and digits is an integer, anything else that parses as a finite
//! decimal is a real, `true`/`false` are booleans, and the rest are strings.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Every key any consumer understands.
pub const KNOWN_KEYS: &[&str] = &[
    // environment
    "task",
    "grid.width",
    "grid.height",
    "car.gain_left",
    "car.gain_right",
    "budget",
    "push.distance",
    // expert and demonstrations
    "demos",
    "expert.mode_prob",
    "expert.overshoot",
    "expert.early_prob",
    "expert.noise",
    // training
    "head",
    "steps",
    "batch",
    "lr",
    "adam.beta1",
    "adam.beta2",
    "adam.epsilon",
    "beta",
    "beta.warmup",
    "tau",
    "straight_through",
    "tau.start",
    "tau.end",
    "gan.ratio",
    "latent",
    "noise_dim",
    "trunk.hidden",
    "trunk.features",
    "head.hidden",
    // evaluation
    "trials",
    "probe.samples",
    "probe.threshold",
    "probe.episodes",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigValue {
    Str(String),
    Int(i64),
    Real(f64),
    Bool(bool),
}

impl ConfigValue {
    /// Types a raw value by its syntax.
    pub fn parse(raw: &str) -> ConfigValue {
        let raw = raw.trim();
        let digits = raw.strip_prefix(['-', '+']).unwrap_or(raw);
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(i) = raw.parse::<i64>() {
                return ConfigValue::Int(i);
            }
        }
        let numeric_syntax = raw.bytes().any(|b| b.is_ascii_digit())
            && raw
                .bytes()
                .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
        if numeric_syntax {
            if let Ok(x) = raw.parse::<f64>() {
                if x.is_finite() {
                    return ConfigValue::Real(x);
                }
            }
        }
        match raw {
            "true" => ConfigValue::Bool(true),
            "false" => ConfigValue::Bool(false),
            _ => ConfigValue::Str(raw.to_string()),
        }
    }
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Str(s) => f.write_str(s),
            ConfigValue::Int(i) => write!(f, "{i}"),
            // Debug keeps a decimal point, so reals re-parse as reals
            ConfigValue::Real(x) => write!(f, "{x:?}"),
            ConfigValue::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, ConfigValue>,
}

/// Parses config text, rejecting keys outside [`KNOWN_KEYS`].
pub fn parse_config(text: &str) -> Result<Config> {
    let mut config = Config::default();
    let mut unknown = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) || value.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("malformed entry `{line}`"),
            });
        }
        if !KNOWN_KEYS.contains(&key) {
            if !unknown.iter().any(|k| k == key) {
                unknown.push(key.to_string());
            }
            continue;
        }
        config.entries.insert(key.to_string(), ConfigValue::parse(value));
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys(unknown));
    }
    Ok(config)
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: ConfigValue) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::UnknownKeys(vec![key.to_string()]));
        }
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(k.trim(), ConfigValue::parse(v))
    }

    /// Entries of `other` win.
    pub fn merge(&mut self, other: &Config) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&ConfigValue> {
        self.entries.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConfigValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn string(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::Str(s)) => Ok(Some(s.clone())),
            Some(other) => Err(type_error(key, "a string", other)),
        }
    }

    pub fn int(&self, key: &str) -> Result<Option<i64>> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::Int(i)) => Ok(Some(*i)),
            Some(other) => Err(type_error(key, "an integer", other)),
        }
    }

    /// Non-negative integer.
    pub fn count(&self, key: &str) -> Result<Option<usize>> {
        match self.int(key)? {
            None => Ok(None),
            Some(i) if i >= 0 => Ok(Some(i as usize)),
            Some(i) => Err(Error::Config(format!("`{key}` must be non-negative, got {i}"))),
        }
    }

    /// Reals accept integer syntax too.
    pub fn real(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::Real(x)) => Ok(Some(*x)),
            Some(ConfigValue::Int(i)) => Ok(Some(*i as f64)),
            Some(other) => Err(type_error(key, "a number", other)),
        }
    }

    pub fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(ConfigValue::Bool(b)) => Ok(Some(*b)),
            Some(other) => Err(type_error(key, "a boolean", other)),
        }
    }
}

fn type_error(key: &str, wanted: &str, found: &ConfigValue) -> Error {
    Error::Config(format!("`{key}` must be {wanted}, found `{found}`"))
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integer_typing() {
        let c = parse_config("budget = 200").unwrap();
        assert_eq!(c.get("budget"), Some(&ConfigValue::Int(200)));
    }

    #[test]
    fn comments_and_blanks() {
        let c = parse_config("# comment\n\n   \n").unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn last_duplicate_wins() {
        let c = parse_config("steps = 10\nsteps = 20\n").unwrap();
        assert_eq!(c.int("steps").unwrap(), Some(20));
    }

    #[test]
    fn value_types() {
        let c = parse_config(
            "task = grid-reach\nlr = 0.001\nexpert.noise = 1e-3\nbeta = -2\nhead=gan # trailing\n",
        )
        .unwrap();
        assert_eq!(c.string("task").unwrap().as_deref(), Some("grid-reach"));
        assert_eq!(c.get("lr"), Some(&ConfigValue::Real(0.001)));
        assert_eq!(c.get("expert.noise"), Some(&ConfigValue::Real(0.001)));
        assert_eq!(c.get("beta"), Some(&ConfigValue::Int(-2)));
        assert_eq!(c.string("head").unwrap().as_deref(), Some("gan"));
        assert_eq!(ConfigValue::parse("true"), ConfigValue::Bool(true));
        assert_eq!(ConfigValue::parse("inf"), ConfigValue::Str("inf".into()));
        assert_eq!(ConfigValue::parse("1-2"), ConfigValue::Str("1-2".into()));
    }

    #[test]
    fn malformed_line_reports_number() {
        match parse_config("task = grid-reach\n\nthis is wrong\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("budget =\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_keys_listed() {
        match parse_config("task = grid-reach\nfoo = 1\nbar.baz = x\n") {
            Err(Error::UnknownKeys(keys)) => assert_eq!(keys, vec!["foo", "bar.baz"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_is_reported() {
        let c = parse_config("steps = lots").unwrap();
        assert!(matches!(c.int("steps"), Err(Error::Config(_))));
        let c = parse_config("lr = 3").unwrap();
        assert_eq!(c.real("lr").unwrap(), Some(3.0));
    }

    fn value_strategy() -> impl Strategy<Value = ConfigValue> {
        prop_oneof![
            any::<i64>().prop_map(ConfigValue::Int),
            (-1e9f64..1e9).prop_map(ConfigValue::Real),
            any::<bool>().prop_map(ConfigValue::Bool),
            "[a-z][a-z_-]{0,12}"
                .prop_filter("reserved words", |s| s != "true" && s != "false")
                .prop_map(ConfigValue::Str),
        ]
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            entries in proptest::collection::vec(
                (proptest::sample::select(KNOWN_KEYS), value_strategy()),
                0..12,
            )
        ) {
            let mut c = Config::new();
            for (k, v) in entries {
                c.set(k, v).unwrap();
            }
            let back = parse_config(&c.to_string()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
