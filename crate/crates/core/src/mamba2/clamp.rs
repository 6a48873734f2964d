//! Per-channel maximum replacement used for the outlier ablation.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    Off,
    MaxToZero,
    MaxToOne,
}

impl FromStr for ClampMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ClampMode::Off),
            "max_to_zero" => Ok(ClampMode::MaxToZero),
            "max_to_one" => Ok(ClampMode::MaxToOne),
            other => Err(Error::input(format!("unknown clamp mode `{other}`"))),
        }
    }
}

/// Activation site inside a block: its input `u_t` or the normalized output `y_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "u_t")]
    Input,
    #[serde(rename = "y_t")]
    Output,
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u_t" | "u" => Ok(Site::Input),
            "y_t" | "y" => Ok(Site::Output),
            other => Err(Error::input(format!("unknown site `{other}` (expected u_t or y_t)"))),
        }
    }
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Input => "u_t",
            Site::Output => "y_t",
        }
    }
}

/// Keep mask and replacement values for `y [rows × d]` split into sequences of
/// `seq_len` rows. In each sequence and channel the first maximal entry is replaced.
pub fn clamp_mask<T: Scalar>(y: &Tensor<T>, mode: ClampMode, seq_len: usize) -> Result<(Vec<bool>, Tensor<T>)> {
    let (rows, d) = (y.rows(), y.cols());
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim(format!("{rows} rows do not split into length-{seq_len} sequences")));
    }
    let mut keep = vec![true; rows * d];
    let fill = match mode {
        ClampMode::Off => return Ok((keep, y.clone())),
        ClampMode::MaxToZero => T::zero(),
        ClampMode::MaxToOne => T::one(),
    };
    let data = y.data();
    for s in 0..rows / seq_len {
        for ch in 0..d {
            let mut best = s * seq_len;
            for t in s * seq_len + 1..(s + 1) * seq_len {
                if data[t * d + ch] > data[best * d + ch] {
                    best = t;
                }
            }
            keep[best * d + ch] = false;
        }
    }
    Ok((keep, Tensor::full(y.shape(), fill)))
}

/// Replaces each channel's per-sequence maximum of `y [T × d]` with 0 or 1.
pub fn clamp_channel_hook<T: Scalar>(y: &Tensor<T>, mode: ClampMode) -> Result<Tensor<T>> {
    let (keep, repl) = clamp_mask(y, mode, y.rows())?;
    let data = y
        .data()
        .iter()
        .zip(repl.data())
        .zip(&keep)
        .map(|((&a, &b), &k)| if k { a } else { b })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}
