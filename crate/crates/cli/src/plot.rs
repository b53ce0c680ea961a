//! SVG charts from report files.

use std::path::{Path, PathBuf};

use mobgcl::eval::{AblationResult, EvalReport, SweepReport};
use mobgcl::privacy::UniquenessReport;
use plotters::prelude::*;
use serde_json::Value;

use crate::error::{CliError, CliResult};

type DrawResult<T> = Result<T, Box<dyn std::error::Error>>;

pub enum ReportKind {
    Uniqueness(UniquenessReport),
    Eval(EvalReport),
    Sweep(SweepReport),
    Ablation(Vec<AblationResult>),
}

pub fn detect(value: Value) -> CliResult<ReportKind> {
    let parse = |e: serde_json::Error| CliError::Data(format!("malformed report: {e}"));
    let has = |k: &str| value.get(k).is_some();
    if has("cdf") {
        Ok(ReportKind::Uniqueness(serde_json::from_value(value).map_err(parse)?))
    } else if has("points") {
        Ok(ReportKind::Sweep(serde_json::from_value(value).map_err(parse)?))
    } else if has("scorer") && has("cities") {
        Ok(ReportKind::Eval(serde_json::from_value(value).map_err(parse)?))
    } else if value.as_array().is_some_and(|a| a.first().is_some_and(|v| v.get("ablation").is_some())) {
        Ok(ReportKind::Ablation(serde_json::from_value(value).map_err(parse)?))
    } else {
        Err(CliError::Data("unrecognized report; expected a uniqueness, eval, sweep or ablation report".into()))
    }
}

/// Renders `report` into `dir` and returns the files written.
pub fn render(report: &ReportKind, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let drawn = match report {
        ReportKind::Uniqueness(r) => uniqueness(r, dir),
        ReportKind::Eval(r) => eval_bars(r, dir),
        ReportKind::Sweep(r) => sweep(r, dir),
        ReportKind::Ablation(r) => ablation(r, dir),
    };
    drawn.map_err(|e| CliError::Data(format!("plot: {e}")))
}

fn uniqueness(r: &UniquenessReport, dir: &Path) -> DrawResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (m, cdf) in r.top_m.iter().zip(&r.cdf) {
        let path = dir.join(format!("uniqueness_top{m}.svg"));
        {
            let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
            root.fill(&WHITE)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("top-{m} similarity, {} generations", r.generations), ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(48)
                .build_cartesian_2d(0f64..1f64, 0f64..1f64)?;
            chart.configure_mesh().x_desc("similarity").y_desc("CDF").draw()?;
            let mut steps = vec![(0.0, 0.0)];
            let mut prev = 0.0;
            for p in cdf {
                steps.push((p.similarity, prev));
                steps.push((p.similarity, p.fraction));
                prev = p.fraction;
            }
            steps.push((1.0, prev));
            chart.draw_series(LineSeries::new(steps, BLUE.stroke_width(2)))?;
            root.present()?;
        }
        out.push(path);
    }
    Ok(out)
}

fn eval_bars(r: &EvalReport, dir: &Path) -> DrawResult<Vec<PathBuf>> {
    let path = dir.join("eval.svg");
    {
        let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let n = r.cities.len();
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{} acc@k, round {}", r.scorer, r.round), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)?;
        let labels: Vec<String> = r.cities.iter().map(|c| format!("city {}", c.city_id)).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
            .y_desc("accuracy")
            .draw()?;
        for (i, c) in r.cities.iter().enumerate() {
            let x = i as f64;
            chart.draw_series([
                Rectangle::new([(x + 0.1, 0.0), (x + 0.45, c.acc1)], BLUE.filled()),
                Rectangle::new([(x + 0.55, 0.0), (x + 0.9, c.acc3)], RED.filled()),
            ])?;
        }
        chart.draw_series([Rectangle::new([(0.0, 0.0), (0.0, 0.0)], BLUE.filled())])?.label("acc@1").legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], BLUE.filled()));
        chart.draw_series([Rectangle::new([(0.0, 0.0), (0.0, 0.0)], RED.filled())])?.label("acc@3").legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], RED.filled()));
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
    }
    Ok(vec![path])
}

fn sweep(r: &SweepReport, dir: &Path) -> DrawResult<Vec<PathBuf>> {
    let path = dir.join("replay_volume.svg");
    {
        let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let hi = r.points.iter().map(|p| p.alpha).fold(0.0, f64::max) * 1.1;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("replay volume, new city {}", r.new_city), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..hi.max(1e-3), 0f64..1f64)?;
        chart.configure_mesh().x_desc("alpha").y_desc("acc@1").draw()?;
        for (name, color, get) in [
            ("base cities", BLUE, (|p: &mobgcl::eval::SweepPoint| p.base_acc1) as fn(&_) -> f64),
            ("new city", RED, |p| p.new_acc1),
        ] {
            let pts: Vec<(f64, f64)> = r.points.iter().map(|p| (p.alpha, get(p))).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
    }
    Ok(vec![path])
}

fn ablation(r: &[AblationResult], dir: &Path) -> DrawResult<Vec<PathBuf>> {
    let path = dir.join("ablation.svg");
    {
        let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let n = r.len();
        let mut chart = ChartBuilder::on(&root)
            .caption("base-city acc@1 after one round", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)?;
        let labels: Vec<String> = r.iter().map(|a| a.ablation.name().to_string()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
            .y_desc("retention")
            .draw()?;
        chart.draw_series(
            r.iter()
                .enumerate()
                .map(|(i, a)| Rectangle::new([(i as f64 + 0.2, 0.0), (i as f64 + 0.8, a.retention())], BLUE.filled())),
        )?;
        root.present()?;
    }
    Ok(vec![path])
}
