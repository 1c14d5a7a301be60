//! Field-wise option resolution: command-line flag, then `key=value` config
//! file, then `JSRNN_<KEY>` environment variable, then the built-in default.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const ENV_PREFIX: &str = "JSRNN_";

#[derive(Debug, Default)]
pub struct Layers {
    file: HashMap<String, String>,
    env: HashMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

pub fn parse_config(text: &str) -> Result<HashMap<String, String>, CliError> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(normalize(key), value.trim().to_string());
    }
    Ok(out)
}

impl Layers {
    /// Reads the config file (explicit path, else `JSRNN_CONFIG`) and the
    /// process environment.
    pub fn load(config: Option<&Path>) -> Result<Self, CliError> {
        Self::from_parts(config, std::env::vars())
    }

    pub fn from_parts(
        config: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let env: HashMap<String, String> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (normalize(k), v)))
            .collect();
        let path = config
            .map(Path::to_path_buf)
            .or_else(|| env.get("config").map(Into::into));
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::Core(jsrnn::Error::io(&p, e)))?;
                parse_config(&text)?
            }
            None => HashMap::new(),
        };
        Ok(Self { file, env })
    }

    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        let (source, raw) = match (self.file.get(key), self.env.get(key)) {
            (Some(v), _) => ("config file", v),
            (None, Some(v)) => ("environment", v),
            (None, None) => return Ok(None),
        };
        raw.parse()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("invalid {key} {raw:?} from {source}: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required option --{}", key.replace('_', "-"))))
    }
}
