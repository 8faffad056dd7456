//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # Poisson problem on a 32x32 grid, 8 nodes, ESRP every 20 iterations
//! matrix = poisson2d
//! n = 32
//! nodes = 8
//! mode = esrp
//! T = 20
//! nredu = 1
//! failures = 1
//! location = center
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use esrp_core::{Mode, DEFAULT_MAX_BLOCK};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixSource {
    /// 5-point Laplacian on a `side x side` grid.
    Poisson2d { side: usize },
    MatrixMarket { path: PathBuf },
}

/// Where the contiguous block of failed ranks begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Start,
    Center,
    Rank(usize),
}

impl Location {
    pub fn first_rank(self, num_nodes: usize) -> usize {
        match self {
            Location::Start => 0,
            Location::Center => num_nodes / 2,
            Location::Rank(r) => r,
        }
    }

    pub fn label(self) -> String {
        match self {
            Location::Start => "start".into(),
            Location::Center => "center".into(),
            Location::Rank(r) => format!("rank{r}"),
        }
    }
}

impl FromStr for Location {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "start" => Ok(Location::Start),
            "center" => Ok(Location::Center),
            other => other
                .strip_prefix("rank")
                .unwrap_or(other)
                .parse()
                .map(Location::Rank)
                .map_err(|_| format!("expected start, center or a rank, got {other:?}")),
        }
    }
}

/// When the failure strikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureAt {
    /// Two iterations before the end of the interval containing `C/2`.
    Worst,
    Iteration(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub matrix: MatrixSource,
    pub nodes: usize,
    pub mode: Mode,
    pub period: usize,
    pub nredu: usize,
    /// Size of the contiguous failed block; 0 runs failure-free only.
    pub failures: usize,
    pub location: Location,
    pub at: FailureAt,
    pub rtol: f64,
    pub reps: usize,
    pub seed: u64,
    pub max_block: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            matrix: MatrixSource::Poisson2d { side: 32 },
            nodes: 8,
            mode: Mode::Esrp,
            period: 20,
            nredu: 1,
            failures: 0,
            location: Location::Start,
            at: FailureAt::Worst,
            rtol: 1e-8,
            reps: 5,
            seed: 0,
            max_block: DEFAULT_MAX_BLOCK,
            out: None,
        }
    }
}

const KEYS: &[&str] = &[
    "matrix", "n", "nodes", "mode", "T", "nredu", "failures", "location", "at", "rtol", "reps",
    "seed", "out", "max_block",
];

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec = Self::parse(&text)?;
        // Relative paths in a config file are relative to that file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let MatrixSource::MatrixMarket { path: p } = &mut spec.matrix {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut spec.out {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::Config {
                line: line_no,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(HarnessError::Config {
                    line: line_no,
                    message: format!("unknown key {key:?}"),
                });
            }
            if entries.insert(key, (line_no, value)).is_some() {
                return Err(HarnessError::Config {
                    line: line_no,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }

        fn field<T: FromStr>(
            entries: &BTreeMap<&str, (usize, &str)>,
            key: &str,
        ) -> Result<Option<T>>
        where
            T::Err: std::fmt::Display,
        {
            entries
                .get(key)
                .map(|&(line, v)| {
                    v.parse().map_err(|e: T::Err| HarnessError::Config {
                        line,
                        message: format!("{key}: {e}"),
                    })
                })
                .transpose()
        }

        let d = Self::default();
        let side: Option<usize> = field(&entries, "n")?;
        let matrix = match entries.get("matrix").map(|e| e.1) {
            None | Some("poisson2d") | Some("poisson") => MatrixSource::Poisson2d {
                side: side.unwrap_or(32),
            },
            Some(path) => MatrixSource::MatrixMarket { path: path.into() },
        };
        let spec = Self {
            matrix,
            nodes: field(&entries, "nodes")?.unwrap_or(d.nodes),
            mode: field(&entries, "mode")?.unwrap_or(d.mode),
            period: field(&entries, "T")?.unwrap_or(d.period),
            nredu: field(&entries, "nredu")?.unwrap_or(d.nredu),
            failures: field(&entries, "failures")?.unwrap_or(d.failures),
            location: field(&entries, "location")?.unwrap_or(d.location),
            at: match field::<String>(&entries, "at")?.as_deref() {
                None | Some("worst") => FailureAt::Worst,
                Some(_) => FailureAt::Iteration(field(&entries, "at")?.expect("present")),
            },
            rtol: field(&entries, "rtol")?.unwrap_or(d.rtol),
            reps: field(&entries, "reps")?.unwrap_or(d.reps),
            seed: field(&entries, "seed")?.unwrap_or(d.seed),
            max_block: field(&entries, "max_block")?.unwrap_or(d.max_block),
            out: field::<String>(&entries, "out")?.map(PathBuf::from),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.nodes == 0 {
            return bad("nodes must be positive".into());
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if self.failures > 0 && self.failures > self.nredu && self.mode != Mode::Plain {
            return bad(format!(
                "{} simultaneous failures exceed nredu = {}",
                self.failures, self.nredu
            ));
        }
        if self.failures >= self.nodes && self.failures > 0 {
            return bad("at least one node must survive".into());
        }
        if let Location::Rank(r) = self.location {
            if r >= self.nodes {
                return bad(format!("location rank {r} out of range for {} nodes", self.nodes));
            }
        }
        if let MatrixSource::Poisson2d { side: 0 } = self.matrix {
            return bad("poisson2d grid side must be positive".into());
        }
        Ok(())
    }
}
