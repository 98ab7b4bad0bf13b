//! Kaplan-Meier curve exports: CSV step data and a standalone SVG plot.

use std::fmt::Write;

use time_drs::data::SurvivalRecord;
use time_drs::stats::{administrative_censor, kaplan_meier, KmCurve};
use time_drs::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 4] = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"];

pub struct KmSeries {
    pub label: String,
    pub observations: Vec<(f64, bool)>,
    pub curve: KmCurve,
}

impl KmSeries {
    pub fn new(label: &str, records: &[SurvivalRecord], censor_at: Option<f64>) -> Result<Self> {
        Ok(KmSeries {
            label: label.to_string(),
            observations: administrative_censor(records, censor_at),
            curve: kaplan_meier(records, censor_at)?,
        })
    }

    fn max_time(&self) -> f64 {
        self.observations.iter().map(|o| o.0).fold(0.0, f64::max)
    }
}

pub fn format_p(p: f64) -> String {
    if p >= 1e-3 {
        format!("{p:.4}")
    } else {
        format!("{p:.3e}")
    }
}

/// One row per group and distinct time (plus the origin): survival just after
/// the time, number at risk at it and number censored at it.
pub fn km_csv(series: &[KmSeries]) -> String {
    let mut out = String::from("group,time,survival,at_risk,censored\n");
    for s in series {
        let mut times: Vec<f64> = s.observations.iter().map(|o| o.0).collect();
        times.push(0.0);
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            let at_risk = s.observations.iter().filter(|o| o.0 >= t).count();
            let censored = s.observations.iter().filter(|o| o.0 == t && !o.1).count();
            writeln!(out, "{},{},{},{},{}", s.label, t, s.curve.survival_at(t), at_risk, censored).unwrap();
        }
    }
    out
}

pub fn km_svg(title: &str, series: &[KmSeries], p_value: Option<f64>) -> String {
    let t_max = series.iter().map(KmSeries::max_time).fold(0.0, f64::max).max(1e-9);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + t / t_max * plot_w;
    let y = |s: f64| MARGIN + (1.0 - s) * plot_h;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(
        svg,
        r#"<path class="axes" d="M{m:.2},{top:.2} V{b:.2} H{r:.2}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        top = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )
    .unwrap();
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{s:.2}</text>"#, MARGIN - 6.0, y(s) + 4.0).unwrap();
        let t = t_max * k as f64 / 4.0;
        writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.1}</text>"#, x(t), HEIGHT - MARGIN + 16.0).unwrap();
    }
    writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">months</text>"#, WIDTH / 2.0, HEIGHT - 18.0).unwrap();

    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let c = &s.curve;
        let mut d = format!("M{:.2},{:.2}", x(0.0), y(c.survival_prob[0]));
        for k in 1..c.event_times.len() {
            write!(d, " H{:.2} V{:.2}", x(c.event_times[k]), y(c.survival_prob[k])).unwrap();
        }
        write!(d, " H{:.2}", x(s.max_time())).unwrap();
        writeln!(svg, r#"<path class="km-step" data-group="{}" d="{d}" fill="none" stroke="{colour}" stroke-width="2"/>"#, escape(&s.label)).unwrap();
        for &t in &c.censor_marks {
            let (cx, cy) = (x(t), y(c.survival_at(t)));
            writeln!(svg, r#"<line class="censor" x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{colour}"/>"#, cy - 4.0, cy + 4.0).unwrap();
        }
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<text class="legend" x="{:.2}" y="{ly:.2}" fill="{colour}" text-anchor="end">{} (n = {})</text>"#,
            WIDTH - MARGIN - 4.0,
            escape(&s.label),
            s.observations.len()
        )
        .unwrap();
    }
    if let Some(p) = p_value {
        writeln!(
            svg,
            r#"<text class="p-value" x="{:.2}" y="{:.2}">log-rank p = {}</text>"#,
            MARGIN + 8.0,
            HEIGHT - MARGIN - 8.0,
            format_p(p)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
