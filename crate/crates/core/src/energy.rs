//! Analytic per-token energy model.
//!
//! Operation counts are tallied per block component, multiplied by the number
//! of layers and priced with per-operation energies for 32-bit arithmetic.
//! Spiking variants replace the projection MACs with additions scaled by the
//! measured fire rate and the micro-step count.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy per operation, in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mm: f64,
    pub e_em: f64,
    pub e_add: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mm: 4.6,
            e_em: 3.7,
            e_add: 0.9,
        }
    }
}

impl EnergyConstants {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            e_mm: self.e_mm * c,
            e_em: self.e_em * c,
            e_add: self.e_add * c,
        }
    }

    fn price(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Mm => self.e_mm,
            OpKind::Em => self.e_em,
            OpKind::Add => self.e_add,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ann,
    Lif,
    Ilif,
    Tilif,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ann => "ann",
            Variant::Lif => "lif",
            Variant::Ilif => "ilif",
            Variant::Tilif => "tilif",
        }
    }

    pub fn is_spiking(self) -> bool {
        self != Variant::Ann
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ann" => Ok(Variant::Ann),
            "lif" => Ok(Variant::Lif),
            "ilif" => Ok(Variant::Ilif),
            "tilif" => Ok(Variant::Tilif),
            other => Err(Error::input(format!("unknown energy variant `{other}`"))),
        }
    }
}

/// Architecture dimensions the energy model needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub name: String,
    pub d_model: usize,
    pub n_state: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
}

impl ModelShape {
    pub fn mamba2_130m() -> Self {
        Self {
            name: "130m".into(),
            d_model: 768,
            n_state: 128,
            n_heads: 24,
            d_head: 64,
            n_layers: 24,
        }
    }

    pub fn mamba2_1_3b() -> Self {
        Self {
            name: "1.3b".into(),
            d_model: 2048,
            n_state: 128,
            n_heads: 64,
            d_head: 64,
            n_layers: 48,
        }
    }

    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            d_model: 64,
            n_state: 16,
            n_heads: 2,
            d_head: 64,
            n_layers: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "130m" => Ok(Self::mamba2_130m()),
            "1.3b" | "1_3b" | "1300m" => Ok(Self::mamba2_1_3b()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::input(format!("unknown model preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Mm,
    Em,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    InProj,
    OutProj,
    Ssm,
    Others,
    Neuron,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpRow {
    pub name: &'static str,
    pub kind: OpKind,
    pub category: Category,
    /// Operations per token summed over all layers.
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCounts {
    pub config: String,
    pub variant: Variant,
    pub fr_in: f64,
    pub fr_out: f64,
    pub k: u32,
    pub rows: Vec<OpRow>,
}

impl OpCounts {
    pub fn total(&self, category: Category) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.category == category)
            .map(|r| r.count)
            .sum()
    }
}

/// Per-token operation counts for every block component.
///
/// The ANN projection rows are MACs; spiking variants count `k · fr · MACs`
/// additions. `k` is forced to 1 for the ANN and ignored fire rates are zeroed.
pub fn count_ops(shape: &ModelShape, variant: Variant, fr_in: f64, fr_out: f64, k: u32) -> Result<OpCounts> {
    for (name, fr) in [("fr_in", fr_in), ("fr_out", fr_out)] {
        if !(0.0..=1.0).contains(&fr) {
            return Err(Error::input(format!("{name} = {fr} outside [0, 1]")));
        }
    }
    if k < 1 {
        return Err(Error::input("k must be at least 1"));
    }
    let d = shape.d_model as f64;
    let n = shape.n_state as f64;
    let h = shape.n_heads as f64;
    let p = shape.d_head as f64;
    let layers = shape.n_layers as f64;

    use Category::*;
    use OpKind::*;
    let in_macs = (4.0 * d + 2.0 * n + h) * d;
    let out_macs = d * 2.0 * d;
    let (in_proj, out_proj, proj_kind, fr_in, fr_out, k) = match variant {
        Variant::Ann => (in_macs, out_macs, Mm, 0.0, 0.0, 1),
        _ => {
            let kf = k as f64;
            (kf * fr_in * in_macs, kf * fr_out * out_macs, Add, fr_in, fr_out, k)
        }
    };
    let mut rows = vec![
        OpRow { name: "in_proj", kind: proj_kind, category: InProj, count: in_proj },
        OpRow { name: "out_proj", kind: proj_kind, category: OutProj, count: out_proj },
        OpRow { name: "dt*B", kind: Mm, category: Ssm, count: h * p * n },
        OpRow { name: "C*h", kind: Mm, category: Ssm, count: h * p * n },
        OpRow { name: "conv1d", kind: Mm, category: Others, count: (2.0 * d + 2.0 * n) * 4.0 },
        OpRow { name: "act", kind: Em, category: Others, count: 3.0 * 2.0 * d },
        OpRow { name: "x*D", kind: Em, category: Ssm, count: h * p },
        OpRow { name: "x*dB", kind: Em, category: Ssm, count: h * p * n },
        OpRow { name: "A*dt", kind: Em, category: Ssm, count: h },
        OpRow { name: "A*h", kind: Em, category: Ssm, count: h * p * n },
        OpRow { name: "norm", kind: Em, category: Others, count: 2.0 * d },
        OpRow { name: "y*act(z)", kind: Em, category: Others, count: 2.0 * d },
        OpRow { name: "dt+dt_bias", kind: Add, category: Ssm, count: h },
        OpRow { name: "A*h+x*dB", kind: Add, category: Ssm, count: h * p * n },
        OpRow { name: "y+D*x", kind: Add, category: Ssm, count: h * p },
    ];
    if variant == Variant::Lif {
        rows.extend([
            OpRow { name: "neuron_in_em", kind: Em, category: Neuron, count: d + d },
            OpRow { name: "neuron_in_add", kind: Add, category: Neuron, count: d + d },
            OpRow { name: "neuron_out_em", kind: Em, category: Neuron, count: 2.0 * d + 2.0 * d },
            OpRow { name: "neuron_out_add", kind: Add, category: Neuron, count: 2.0 * d + 2.0 * d },
        ]);
    }
    for r in &mut rows {
        r.count *= layers;
    }
    Ok(OpCounts {
        config: shape.name.clone(),
        variant,
        fr_in,
        fr_out,
        k,
        rows,
    })
}

/// Per-token energy in microjoules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub config: String,
    pub variant: Variant,
    pub k: u32,
    pub fr_in: f64,
    pub fr_out: f64,
    pub in_proj: f64,
    pub out_proj: f64,
    pub ssm: f64,
    pub others: f64,
    /// Spiking-neuron bookkeeping; reported but not part of `total`.
    pub neuron_overhead: f64,
    pub total: f64,
    /// Dense-baseline total over this total; 1 for the baseline itself.
    pub ratio: f64,
}

pub fn energy_report(counts: &OpCounts, constants: &EnergyConstants) -> EnergyReport {
    let uj = |cat: Category| -> f64 {
        counts
            .rows
            .iter()
            .filter(|r| r.category == cat)
            .map(|r| r.count * constants.price(r.kind))
            .sum::<f64>()
            * 1e-6
    };
    let (in_proj, out_proj, ssm, others) = (
        uj(Category::InProj),
        uj(Category::OutProj),
        uj(Category::Ssm),
        uj(Category::Others),
    );
    EnergyReport {
        config: counts.config.clone(),
        variant: counts.variant,
        k: counts.k,
        fr_in: counts.fr_in,
        fr_out: counts.fr_out,
        in_proj,
        out_proj,
        ssm,
        others,
        neuron_overhead: uj(Category::Neuron),
        total: in_proj + out_proj + ssm + others,
        ratio: 1.0,
    }
}

pub fn ratio(ann: &EnergyReport, snn: &EnergyReport) -> f64 {
    ann.total / snn.total
}

/// Report for `variant` with its ratio against the dense baseline of the same shape.
pub fn report_with_ratio(
    shape: &ModelShape,
    variant: Variant,
    fr_in: f64,
    fr_out: f64,
    k: u32,
    constants: &EnergyConstants,
) -> Result<EnergyReport> {
    let ann = energy_report(&count_ops(shape, Variant::Ann, 0.0, 0.0, 1)?, constants);
    let mut rep = energy_report(&count_ops(shape, variant, fr_in, fr_out, k)?, constants);
    rep.ratio = ratio(&ann, &rep);
    Ok(rep)
}

pub const CSV_HEADER: &str =
    "config,variant,k,fr_in,fr_out,in_proj_uj,out_proj_uj,ssm_uj,others_uj,neuron_uj,total_uj,ratio";

impl EnergyReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.config,
            self.variant.as_str(),
            self.k,
            self.fr_in,
            self.fr_out,
            self.in_proj,
            self.out_proj,
            self.ssm,
            self.others,
            self.neuron_overhead,
            self.total,
            self.ratio
        )
    }
}

pub fn to_csv(reports: &[EnergyReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn to_text_table(reports: &[EnergyReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<6} {:>2} {:>7} {:>7} {:>11} {:>11} {:>10} {:>8} {:>8} {:>11} {:>7}",
        "config", "var", "k", "fr_in", "fr_out", "in_proj", "out_proj", "ssm", "others", "neuron", "total", "ratio"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<6} {:<6} {:>2} {:>7.4} {:>7.4} {:>11.4} {:>11.4} {:>10.4} {:>8.4} {:>8.4} {:>11.4} {:>7.4}",
            r.config,
            r.variant.as_str(),
            r.k,
            r.fr_in,
            r.fr_out,
            r.in_proj,
            r.out_proj,
            r.ssm,
            r.others,
            r.neuron_overhead,
            r.total,
            r.ratio
        );
    }
    out
}

/// One published row of per-token energy figures.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenRow {
    pub config: String,
    pub variant: Variant,
    /// `base`, or a training-recipe tag such as `sgc` / `sgc-dpo`.
    pub label: String,
    pub k: u32,
    pub fr_in: f64,
    pub fr_out: f64,
    pub in_proj: f64,
    pub out_proj: f64,
    pub ssm: f64,
    pub others: f64,
    pub total: f64,
    pub ratio: f64,
}

const GOLDEN_CSV: &str = include_str!("../data/energy_golden.csv");

pub fn golden_rows() -> Vec<GoldenRow> {
    GOLDEN_CSV
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f[i].parse::<f64>().expect("golden data is numeric");
            GoldenRow {
                config: f[0].to_string(),
                variant: f[1].parse().expect("golden variant"),
                label: f[2].to_string(),
                k: f[3].parse().expect("golden k"),
                fr_in: num(4),
                fr_out: num(5),
                in_proj: num(6),
                out_proj: num(7),
                ssm: num(8),
                others: num(9),
                total: num(10),
                ratio: num(11),
            }
        })
        .collect()
}

/// The base (no extra training recipe) published row for a preset and variant.
pub fn golden_base(config: &str, variant: Variant) -> Option<GoldenRow> {
    golden_rows()
        .into_iter()
        .find(|r| r.config == config && r.variant == variant && r.label == "base")
}
