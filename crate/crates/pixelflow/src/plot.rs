//! Line charts as SVG, each next to a CSV holding exactly the plotted values.
//! The CSV is the contract; the SVG is drawn with labels when a TrueType
//! font can be found and bare otherwise.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{fail, Error, Result};
use crate::report::{read_report, write_text, Table};

const FONT_PATHS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let from_env = std::env::var("PIXELFLOW_FONT").ok();
        for p in from_env.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

/// A chart of `series` against a shared x axis.
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_name: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl Chart {
    pub fn csv(&self) -> String {
        let mut s = self.x_name.clone();
        for (name, _) in &self.series {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (i, x) in self.x.iter().enumerate() {
            s.push_str(&x.to_string());
            for (_, ys) in &self.series {
                s.push(',');
                s.push_str(&ys[i].to_string());
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
    pub fn emit(&self, dir: &Path, stem: &str) -> Result<()> {
        if let Some((name, _)) = self.series.iter().find(|(_, ys)| ys.len() != self.x.len()) {
            fail!(Data, "series {} has a different length than the x axis", name);
        }
        write_text(&dir.join(format!("{stem}.csv")), &self.csv())?;
        let svg = dir.join(format!("{stem}.svg"));
        self.draw(&svg).map_err(|e| Error::Data(format!("{}: {}", svg.display(), e)))
    }

    fn draw(&self, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
        let finite = |v: &&f64| v.is_finite();
        let (x0, x1) = bounds(self.x.iter().filter(finite));
        let (y0, y1) = bounds(self.series.iter().flat_map(|(_, ys)| ys.iter()).filter(finite));
        let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let labels = font_available();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(15);
        if labels {
            builder.caption(&self.title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(60);
        }
        let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1)?;
        if labels {
            chart.configure_mesh().x_desc(&self.x_label).y_desc(&self.y_label).draw()?;
        } else {
            chart.configure_mesh().disable_x_mesh().disable_y_mesh().x_labels(0).y_labels(0).draw()?;
        }
        for (i, (name, ys)) in self.series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts = self.x.iter().zip(ys).filter(|(x, y)| x.is_finite() && y.is_finite()).map(|(&x, &y)| (x, y));
            let line = chart.draw_series(LineSeries::new(pts, color.stroke_width(2)))?;
            if labels {
                line.label(name.as_str()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            }
        }
        if labels {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        }
        root.present()?;
        Ok(())
    }
}

fn bounds<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Per-lead-time CSI and HSS curves, one series per report.
pub fn lead_time_charts(reports: &[(String, &Path)]) -> Result<[Chart; 2]> {
    let mut csi = Vec::new();
    let mut hss = Vec::new();
    for (label, path) in reports {
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).map_err(Error::io(*path))?)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
        let missing: Vec<&str> =
            ["csi", "hss"].into_iter().filter(|k| raw.pointer(&format!("/per_lead_time/{k}")).is_none()).collect();
        if !missing.is_empty() {
            fail!(Data, "{}: missing series per_lead_time.{}", path.display(), missing.join(", per_lead_time."));
        }
        let r = read_report(path)?;
        csi.push((format!("{label}_csi"), r.per_lead_time.csi));
        hss.push((format!("{label}_hss"), r.per_lead_time.hss));
    }
    let Some(n) = csi.first().map(|(_, v)| v.len()) else {
        fail!(Config, "no reports to plot");
    };
    if let Some((name, _)) = csi.iter().find(|(_, v)| v.len() != n) {
        fail!(Data, "{} covers a different number of lead times than {}", name, csi[0].0);
    }
    let x: Vec<f64> = (1..=n).map(|f| f as f64).collect();
    let chart = |title: &str, y: &str, series| Chart {
        title: title.into(),
        x_label: "lead time (frames)".into(),
        y_label: y.into(),
        x_name: "frame".into(),
        x: x.clone(),
        series,
    };
    Ok([chart("CSI by lead time", "CSI", csi), chart("HSS by lead time", "HSS", hss)])
}

/// Total loss per step, one series per loss file.
pub fn loss_chart(files: &[(String, &Path)]) -> Result<Chart> {
    let mut x: Option<Vec<f64>> = None;
    let mut series = Vec::new();
    for (label, path) in files {
        let t = Table::read(path)?;
        let mut cols = t.columns(&["step", "total"], path)?;
        let total = cols.pop().unwrap();
        let steps = cols.pop().unwrap();
        match &x {
            None => x = Some(steps),
            Some(prev) if *prev != steps => fail!(Data, "{}: steps differ from the first loss file", path.display()),
            _ => {}
        }
        series.push((format!("{label}_total"), total));
    }
    let Some(x) = x else { fail!(Config, "no loss files to plot") };
    Ok(Chart {
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "total loss".into(),
        x_name: "step".into(),
        x,
        series,
    })
}
