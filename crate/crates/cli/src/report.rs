//! Run summaries: a CSV table over all evaluated arms plus line plots of
//! training losses and evaluation scores.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use plotters::style::register_font;

use crate::config::{shift_descriptor, ExperimentConfig};
use crate::metrics::{atomic_write, read_metrics};
use crate::pipeline::{EvalSummary, Paths};

pub const SUMMARY_HEADER: &str = "env,shift_type,level,arm,mean,std";

/// The pure-Rust font backend needs a registered face before any text is
/// drawn. Returns false (or plots render without labels) when no font file
/// is available.
fn fonts_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let candidates = [
            std::env::var("OFFDYN_FONT").unwrap_or_default(),
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf".to_string(),
            "/usr/share/fonts/TTF/DejaVuSans.ttf".to_string(),
            "/System/Library/Fonts/Supplemental/Arial.ttf".to_string(),
        ];
        for path in candidates.iter().filter(|p| !p.is_empty()) {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn read_summaries(paths: &Paths) -> Result<Vec<EvalSummary>> {
    let eval_dir = paths.root().join("eval");
    let mut out = Vec::new();
    if eval_dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(&eval_dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let text = std::fs::read_to_string(&path)?;
            let summary: EvalSummary = serde_json::from_str(&text)
                .with_context(|| format!("bad eval summary {}", path.display()))?;
            out.push(summary);
        }
    }
    Ok(out)
}

pub fn report_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let summaries = read_summaries(&paths)?;
    if summaries.is_empty() {
        bail!(
            "no evaluation artifacts under {}; run plan/evaluate first",
            paths.root().join("eval").display()
        );
    }
    let (shift_type, level) = shift_descriptor(config);
    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for s in &summaries {
        csv.push_str(&format!(
            "pointmass,{shift_type},{level},{arm},{mean:.6},{std:.6}\n",
            arm = s.arm,
            mean = s.mean_score,
            std = s.std_score,
        ));
    }
    atomic_write(&paths.report_csv(), csv.as_bytes())?;

    std::fs::create_dir_all(paths.plots_dir())?;
    plot_losses(&paths)?;
    plot_scores(&paths.plots_dir().join("eval_scores.png"), &summaries)?;
    Ok(())
}

fn plot_losses(paths: &Paths) -> Result<()> {
    let metrics_dir = paths.metrics_dir();
    for (phase, metric_names) in [
        ("train-diffusion", vec!["diffusion_loss"]),
        (
            "train-energy",
            vec!["classifier_loss", "return_loss", "behavior_nll", "reward_loss"],
        ),
        ("train-policy", vec!["value_loss", "q_loss", "policy_loss"]),
    ] {
        let file = metrics_dir.join(format!("{phase}.jsonl"));
        if !file.is_file() {
            continue;
        }
        let records = read_metrics(&file)?;
        for metric in metric_names {
            let series: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.metric == metric)
                .map(|r| (r.step as f64, r.value))
                .collect();
            if series.len() < 2 {
                continue;
            }
            let out = paths.plots_dir().join(format!("{phase}_{metric}.png"));
            plot_line(&out, &format!("{phase}: {metric}"), "step", metric, &series)?;
        }
    }
    Ok(())
}

fn plot_line(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(f64, f64)]) -> Result<()> {
    let x_max = series.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let x_min = series.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let y_max = series.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let y_min = series.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let pad = ((y_max - y_min) * 0.05).max(1e-9);
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60);
    if with_text {
        builder.caption(title, ("sans-serif", 22));
    }
    let mut chart =
        builder.build_cartesian_2d(x_min..x_max.max(x_min + 1.0), (y_min - pad)..(y_max + pad))?;
    let mut mesh = chart.configure_mesh();
    if with_text {
        mesh.x_desc(x_label).y_desc(y_label);
    } else {
        mesh.disable_axes();
    }
    mesh.draw()?;
    chart.draw_series(LineSeries::new(series.iter().copied(), &BLUE))?;
    root.present()?;
    Ok(())
}

fn plot_scores(path: &Path, summaries: &[EvalSummary]) -> Result<()> {
    let n = summaries.len();
    let y_max = summaries
        .iter()
        .map(|s| s.mean_score + s.std_score)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let y_min = summaries
        .iter()
        .map(|s| s.mean_score - s.std_score)
        .fold(0.0f64, f64::min);
    let with_text = fonts_available();
    let root = BitMapBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12).x_label_area_size(80).y_label_area_size(60);
    if with_text {
        builder.caption("normalized scores by arm", ("sans-serif", 22));
    }
    let mut chart =
        builder.build_cartesian_2d(-0.5f64..(n as f64 - 0.5), (y_min - 5.0)..(y_max + 5.0))?;
    let mut mesh = chart.configure_mesh();
    if with_text {
        mesh.x_desc("arm index").y_desc("normalized score");
    } else {
        mesh.disable_axes();
    }
    mesh.draw()?;
    // Mean with a +/- std whisker per arm.
    for (i, s) in summaries.iter().enumerate() {
        let x = i as f64;
        chart.draw_series(std::iter::once(Circle::new((x, s.mean_score), 5, BLUE.filled())))?;
        chart.draw_series(std::iter::once(PathElement::new(
            vec![(x, s.mean_score - s.std_score), (x, s.mean_score + s.std_score)],
            &BLUE,
        )))?;
        if with_text {
            chart.draw_series(std::iter::once(Text::new(
                s.arm.clone(),
                (x, y_min - 2.0),
                ("sans-serif", 13),
            )))?;
        }
    }
    root.present()?;
    Ok(())
}
