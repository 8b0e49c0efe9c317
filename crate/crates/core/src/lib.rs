//! Desk-scale laboratory for unlearning in class-conditional diffusion models.
//!
//! Trains a small conditional DDPM on synthetic Gaussian-mixture classes,
//! erases one class with gradient ascent, condition replacement or
//! memorization-based unlearning, then finetunes the result on data without
//! that class to measure how much of it comes back.

pub mod attacker;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod epsnet;
pub mod evaluator;
pub mod exec;
pub mod numerics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod unlearner;

pub use numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("evaluation setup error: {0}")]
    EvalSetup(String),
    #[error("numeric abort in {phase} at step {step}: loss {value}")]
    NumericAbort {
        phase: String,
        step: usize,
        value: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Format(_) => 2,
            Error::NumericAbort { .. } | Error::Numerics(_) => 3,
            Error::Io { .. } => 4,
            Error::Integrity(_) | Error::EvalSetup(_) => 2,
        }
    }
}

/// Which stage produced a checkpoint; also selects the AR metric an evaluation fills in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Unlearn,
    Attack,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Unlearn => "unlearn",
            Phase::Attack => "attack",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "unlearn" => Ok(Self::Unlearn),
            "attack" => Ok(Self::Attack),
            other => Err(Error::Usage(format!("unknown phase '{other}' (expected pretrain, unlearn or attack)"))),
        }
    }
}

/// `%.9g`-style formatting: enough digits to round-trip any `f32`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{exp}")
    }
}
