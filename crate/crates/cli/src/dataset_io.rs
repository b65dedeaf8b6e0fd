//! Dataset CSV format and the score-anchor sidecar.
//!
//! Header: `episode,t,s0,s1,s2,s3,a0,a1,reward,ns0,ns1,ns2,ns3,done`,
//! decimal floats with 17 significant digits, rows in (episode, t) order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use offdyn_core::env::{Domain, OfflineDataset, Transition};

pub const CSV_HEADER: &str = "episode,t,s0,s1,s2,s3,a0,a1,reward,ns0,ns1,ns2,ns3,done";

/// 17 significant digits; round-trips every f64 exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn dataset_to_csv(dataset: &OfflineDataset) -> String {
    let mut out = String::with_capacity(dataset.len() * 128);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for tr in dataset.transitions() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            tr.episode_id,
            tr.t,
            format_float(tr.s[0]),
            format_float(tr.s[1]),
            format_float(tr.s[2]),
            format_float(tr.s[3]),
            format_float(tr.a[0]),
            format_float(tr.a[1]),
            format_float(tr.r),
            format_float(tr.s_next[0]),
            format_float(tr.s_next[1]),
            format_float(tr.s_next[2]),
            format_float(tr.s_next[3]),
            tr.done,
        ));
    }
    out
}

pub fn write_dataset(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    crate::metrics::atomic_write(path, dataset_to_csv(dataset).as_bytes())
}

pub fn parse_dataset(text: &str, domain: Domain) -> Result<OfflineDataset> {
    let mut lines = text.lines();
    let header = lines.next().context("dataset CSV is empty")?;
    if header != CSV_HEADER {
        bail!("dataset CSV header mismatch: {header}");
    }
    let mut transitions = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            bail!("dataset CSV line {}: {} fields, expected 14", lineno + 2, fields.len());
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .with_context(|| format!("dataset CSV line {} field {i}", lineno + 2))
        };
        transitions.push(Transition {
            episode_id: fields[0].parse().context("episode id")?,
            t: fields[1].parse().context("step index")?,
            s: [f(2)?, f(3)?, f(4)?, f(5)?],
            a: [f(6)?, f(7)?],
            r: f(8)?,
            s_next: [f(9)?, f(10)?, f(11)?, f(12)?],
            done: match fields[13] {
                "true" => true,
                "false" => false,
                other => bail!("dataset CSV line {}: bad done flag {other}", lineno + 2),
            },
        });
    }
    OfflineDataset::from_transitions(domain, transitions).map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn read_dataset(path: &Path, domain: Domain) -> Result<OfflineDataset> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing dataset file {}", path.display()))?;
    parse_dataset(&text, domain)
}

/// Random/expert return anchors for one environment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvAnchors {
    pub j_random: f64,
    pub j_expert: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Anchors {
    pub source: EnvAnchors,
    pub target: EnvAnchors,
    pub config_hash: String,
    pub seed: u64,
}

pub fn write_anchors(path: &Path, anchors: &Anchors) -> Result<()> {
    let text = serde_json::to_string_pretty(anchors)?;
    crate::metrics::atomic_write(path, text.as_bytes())
}

pub fn read_anchors(path: &Path) -> Result<Anchors> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing anchors file {}", path.display()))?;
    serde_json::from_str(&text).context("anchors file is not valid JSON")
}

#[cfg(test)]
mod tests {
    use super::*;
    use offdyn_core::env::{collect_dataset, BehaviorPolicy, EnvParams};

    #[test]
    fn csv_round_trip_is_bitwise() {
        let params = EnvParams { episode_len: 9, ..EnvParams::default() };
        let data =
            collect_dataset(&params, BehaviorPolicy::MediumPd, 30, Domain::Source, 3).unwrap();
        let text = dataset_to_csv(&data);
        let back = parse_dataset(&text, Domain::Source).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.transitions().iter().zip(back.transitions()) {
            assert_eq!(a.s.map(f64::to_bits), b.s.map(f64::to_bits));
            assert_eq!(a.a.map(f64::to_bits), b.a.map(f64::to_bits));
            assert_eq!(a.r.to_bits(), b.r.to_bits());
            assert_eq!(a.s_next.map(f64::to_bits), b.s_next.map(f64::to_bits));
            assert_eq!(a.done, b.done);
            assert_eq!((a.episode_id, a.t), (b.episode_id, b.t));
        }
    }

    #[test]
    fn header_mismatch_is_rejected() {
        assert!(parse_dataset("bogus\n1,2,3\n", Domain::Source).is_err());
    }

    #[test]
    fn float_formatting_has_17_significant_digits() {
        let s = format_float(std::f64::consts::PI);
        // 1 leading digit + 16 after the decimal point.
        assert!(s.starts_with("3.1415926535897931"), "{s}");
        let v: f64 = s.parse().unwrap();
        assert_eq!(v.to_bits(), std::f64::consts::PI.to_bits());
    }
}
