use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Readout;
use crate::model::Variant;

use super::phase2::{scatter, scatter_correlation, SignConsistency};
use super::{io::write_atomic, readouts, stats, FactorialResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    /// Entries in `dir` whose checksum no longer matches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.files {
            let p = dir.join(&e.path);
            match std::fs::read(&p) {
                Ok(b) if hex::encode(&Sha256::digest(&b)) == e.sha256 => {}
                _ => bad.push(e.path.clone()),
            }
        }
        Ok(bad)
    }
}

struct Table {
    name: &'static str,
    title: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    fn text(&self) -> String {
        let n = self.header.len();
        let mut w = vec![0; n];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{c:<0$}", w[i]) } else { format!("{c:>0$}", w[i]) })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut s = format!("{}\n\n{}\n", self.title, line(&self.header));
        let total = w.iter().sum::<usize>() + 2 * (n.saturating_sub(1));
        s.push_str(&"-".repeat(total));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }
}

fn num(x: Option<f64>, prec: usize) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.prec$}"),
        _ => "n/a".into(),
    }
}

fn sci(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.4e}"),
        _ => "n/a".into(),
    }
}

fn layer_table(
    r: &FactorialResult,
    name: &'static str,
    title: &str,
    cols: &[(&str, &dyn Fn(Variant, Readout) -> String)],
) -> Table {
    let mut header = vec!["layer".to_string()];
    for v in &r.variants {
        for (suffix, _) in cols {
            header.push(if suffix.is_empty() { v.name().to_string() } else { format!("{}_{suffix}", v.name()) });
        }
    }
    let rows = readouts(r.n_layers)
        .into_iter()
        .map(|l| {
            let mut row = vec![l.to_string()];
            for &v in &r.variants {
                for (_, f) in cols {
                    row.push(f(v, l));
                }
            }
            row
        })
        .collect();
    Table {
        name,
        title: title.to_string(),
        header,
        rows,
    }
}

fn primary_concept(r: &FactorialResult) -> String {
    r.phase2.first().map(|c| c.concept.clone()).unwrap_or_default()
}

fn tables(r: &FactorialResult) -> Vec<Table> {
    let concept = primary_concept(r);
    let erank = |v, l| num(r.phase1_cell(v, l).and_then(|c| c.summary.as_ref()).map(|s| s.effective_rank), 3);
    let erank_mean = |v, l| num(r.phase1_cell(v, l).and_then(|c| c.per_context_mean.as_ref()).map(|s| s.effective_rank), 3);
    let kappa = |v, l| sci(r.phase1_cell(v, l).and_then(|c| c.summary.as_ref()).and_then(|s| s.condition_number));
    let trace = |v, l| sci(r.phase1_cell(v, l).and_then(|c| c.summary.as_ref()).map(|s| s.trace));
    let adv = |v, l| sci(r.phase2_cell(v, l, &concept).and_then(|c| c.kl_advantage()));
    let fails = |v, l| {
        r.phase2_cell(v, l, &concept)
            .map(|c| {
                let (e, d) = c.failures();
                format!("{e}/{d}")
            })
            .unwrap_or_else(|| "n/a".into())
    };
    let cos = |v, l| num(r.phase2_cell(v, l, &concept).and_then(|c| c.cosine), 4);
    let ref_eps = r.phase2.first().map(|c| c.reference_epsilon).unwrap_or(f64::NAN);

    let mut out = vec![
        layer_table(r, "table1_effective_rank", "Effective rank of the context-averaged Hessian by layer", &[("", &erank)]),
        layer_table(
            r,
            "table1_per_context_mean",
            "Effective rank averaged over per-context Hessians",
            &[("", &erank_mean)],
        ),
        layer_table(
            r,
            "table2_condition_trace",
            "Condition number and trace of the context-averaged Hessian",
            &[("kappa", &kappa), ("trace", &trace)],
        ),
        layer_table(
            r,
            "table3_kl_advantage",
            &format!(
                "Off-target KL advantage (Euclidean minus dual) at the 80% stop, concept '{concept}', step size {ref_eps}; failures as euclidean/dual"
            ),
            &[("", &adv), ("failures", &fails)],
        ),
        layer_table(r, "table4_cosine", &format!("Cosine between v and Hv, concept '{concept}'"), &[("", &cos)]),
    ];

    let mut by_eps = Table {
        name: "table3_by_step_size",
        title: "KL advantage at every step size".into(),
        header: ["variant", "layer", "concept", "epsilon", "kl_advantage", "pairs_used", "pairs_excluded", "euclidean_failures", "dual_failures"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    let mut sign = Table {
        name: "sign_consistency",
        title: "Sign of the KL advantage across step sizes".into(),
        header: ["variant", "layer", "concept", "reference_advantage", "noise_floor", "sign", "advantages", "failure"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    for c in &r.phase2 {
        for e in &c.by_epsilon {
            by_eps.rows.push(vec![
                c.variant.to_string(),
                c.layer.to_string(),
                c.concept.clone(),
                e.epsilon.to_string(),
                sci(e.advantage.value),
                e.advantage.n_used.to_string(),
                e.advantage.n_excluded.to_string(),
                e.euclidean_failures.to_string(),
                e.dual_failures.to_string(),
            ]);
        }
        let advs: Vec<String> = c.by_epsilon.iter().map(|e| sci(e.advantage.value)).collect();
        sign.rows.push(vec![
            c.variant.to_string(),
            c.layer.to_string(),
            c.concept.clone(),
            sci(c.kl_advantage()),
            sci(Some(c.noise_floor)),
            sign_label(c.sign).into(),
            advs.join(";"),
            c.failure.clone().unwrap_or_default().replace(',', ";"),
        ]);
    }
    let mut sc = Table {
        name: "scatter",
        title: format!("Cosine versus KL advantage, concept '{concept}'"),
        header: ["variant", "layer", "cosine", "kl_advantage", "verdict"].map(String::from).to_vec(),
        rows: Vec::new(),
    };
    for p in scatter(&r.phase2, &concept) {
        sc.rows.push(vec![
            p.variant.to_string(),
            p.layer.to_string(),
            num(p.cosine, 6),
            sci(p.kl_advantage),
            p.cosine.map(|c| crate::steering::verdict(c).to_string()).unwrap_or_else(|| "n/a".into()),
        ]);
    }
    let mut effects = Table {
        name: "task_effects",
        title: "Change in p(correct) per task, layer and step size".into(),
        header: ["variant", "task", "layer", "epsilon", "effect", "p_correct_base"].map(String::from).to_vec(),
        rows: Vec::new(),
    };
    for c in &r.tasks {
        effects.rows.push(vec![
            c.variant.to_string(),
            c.task.name().into(),
            c.layer.to_string(),
            c.epsilon.to_string(),
            sci(Some(c.effect)),
            num(Some(c.p_correct_base), 6),
        ]);
    }
    let mut summary = Table {
        name: "task_summary",
        title: "Best (layer, step size) cell per task".into(),
        header: ["variant", "task", "best_layer", "best_epsilon", "best_effect", "sign_consistent", "layer_profile"]
            .map(String::from)
            .to_vec(),
        rows: Vec::new(),
    };
    for s in &r.task_summaries {
        let profile: Vec<String> = s.layer_profile.iter().map(|(l, e)| format!("{l}:{e:.4e}")).collect();
        summary.rows.push(vec![
            s.variant.to_string(),
            s.task.name().into(),
            s.best_layer.to_string(),
            s.best_epsilon.to_string(),
            sci(Some(s.best_effect)),
            s.sign_consistent.to_string(),
            profile.join(";"),
        ]);
    }
    out.extend([by_eps, sc, sign, effects, summary]);
    out
}

fn sign_label(s: SignConsistency) -> &'static str {
    match s {
        SignConsistency::Consistent => "consistent",
        SignConsistency::Inconsistent => "inconsistent",
        SignConsistency::BelowFloor => "below_floor",
        SignConsistency::Undefined => "undefined",
    }
}

/// Headline numbers computed from the tables' own values.
fn headline(r: &FactorialResult) -> String {
    let concept = primary_concept(r);
    let mut s = String::from("Summary\n\n");
    let inter: Vec<Readout> = (0..r.n_layers.saturating_sub(1)).map(Readout::Layer).collect();
    for &v in &r.variants {
        let er: Vec<f64> = inter
            .iter()
            .filter_map(|&l| r.phase1_cell(v, l)?.summary.as_ref().map(|s| s.effective_rank))
            .collect();
        let deepest = inter
            .last()
            .and_then(|&l| r.phase1_cell(v, l)?.summary.as_ref().map(|s| s.trace));
        writeln!(
            s,
            "{:<16} median intermediate erank {}  deepest intermediate trace {}",
            v.name(),
            num(stats::median(&er), 3),
            sci(deepest)
        )
        .unwrap();
    }
    let pts = scatter(&r.phase2, &concept);
    let used = pts.iter().filter(|p| p.cosine.is_some() && p.kl_advantage.is_some()).count();
    writeln!(
        s,
        "\nSpearman rho(cosine, KL advantage) = {} over {used} of {} cells",
        num(scatter_correlation(&pts), 4),
        pts.len()
    )
    .unwrap();
    let judged: Vec<_> = r
        .phase2
        .iter()
        .filter(|c| c.concept == concept && !matches!(c.sign, SignConsistency::BelowFloor))
        .collect();
    let ok = judged.iter().filter(|c| c.sign == SignConsistency::Consistent).count();
    writeln!(s, "sign-consistent cells above the noise floor: {ok} of {}", judged.len()).unwrap();
    s
}

const COLORS: [&str; 4] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 80.0;
const MR: f64 = 170.0;
const MT: f64 = 40.0;
const MB: f64 = 60.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>
<line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/>"#,
        (ML + W - MR) / 2.0,
        esc(title),
        (ML + W - MR) / 2.0,
        H - 15.0,
        esc(xlabel),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        esc(ylabel),
        H - MB,
        W - MR,
        H - MB,
        H - MB,
    )
    .unwrap();
    s
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = MT + 10.0 + 20.0 * i as f64;
        let x = W - MR + 15.0;
        writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            x + 18.0,
            y,
            esc(n)
        )
        .unwrap();
    }
}

/// Maps data to pixels; `log` uses base-10 on the y axis.
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: &[f64], log: bool) -> Option<Axis> {
        let vals: Vec<f64> = values
            .iter()
            .copied()
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(|v| if log { v.log10() } else { v })
            .collect();
        let mut lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return None;
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        } else if !log {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Some(Axis { lo, hi, log })
    }

    fn map(&self, v: f64, p0: f64, p1: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let t = if self.log { v.log10() } else { v };
        Some(p0 + (t - self.lo) / (self.hi - self.lo) * (p1 - p0))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32).map(|e| (10f64.powi(e), format!("1e{e}"))).collect()
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

fn y_ticks(s: &mut String, ax: &Axis) {
    for (v, label) in ax.ticks() {
        if let Some(y) = ax.map(v, H - MB, MT) {
            writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{ML}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#,
                ML - 5.0,
                ML - 8.0,
                y + 4.0
            )
            .unwrap();
        }
    }
}

fn line_chart(
    r: &FactorialResult,
    title: &str,
    ylabel: &str,
    log: bool,
    value: &dyn Fn(Variant, Readout) -> Option<f64>,
) -> String {
    let layers = readouts(r.n_layers);
    let all: Vec<f64> = r
        .variants
        .iter()
        .flat_map(|&v| layers.iter().filter_map(move |&l| value(v, l)))
        .collect();
    let mut s = svg_open(title, "layer", ylabel);
    let x_of = |i: usize| ML + 20.0 + (W - MR - ML - 40.0) * i as f64 / (layers.len().max(2) - 1) as f64;
    for (i, l) in layers.iter().enumerate() {
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{l}</text>"#,
            H - MB,
            H - MB + 5.0,
            H - MB + 20.0,
            x = x_of(i)
        )
        .unwrap();
    }
    if let Some(ax) = Axis::fit(&all, log) {
        y_ticks(&mut s, &ax);
        for (k, &v) in r.variants.iter().enumerate() {
            let pts: Vec<String> = layers
                .iter()
                .enumerate()
                .filter_map(|(i, &l)| Some(format!("{:.2},{:.2}", x_of(i), ax.map(value(v, l)?, H - MB, MT)?)))
                .collect();
            let color = COLORS[k % COLORS.len()];
            if !pts.is_empty() {
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
            }
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
            }
        }
    }
    let names: Vec<String> = r.variants.iter().map(|v| v.name().to_string()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn scatter_chart(r: &FactorialResult) -> String {
    let concept = primary_concept(r);
    let pts = scatter(&r.phase2, &concept);
    let mut s = svg_open(
        &format!("Cosine diagnostic versus KL advantage ({concept})"),
        "cosine(v, Hv)",
        "KL advantage (Euclidean - dual)",
    );
    let xs: Vec<f64> = pts.iter().filter_map(|p| p.cosine).chain([0.0, 0.3, 1.0]).collect();
    let ys: Vec<f64> = pts.iter().filter_map(|p| p.kl_advantage).chain([0.0]).collect();
    let (Some(ax), Some(ay)) = (Axis::fit(&xs, false), Axis::fit(&ys, false)) else {
        s.push_str("</svg>\n");
        return s;
    };
    y_ticks(&mut s, &ay);
    for (v, label) in ax.ticks() {
        let x = ax.map(v, ML, W - MR).unwrap();
        writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{label}</text>"#,
            H - MB,
            H - MB + 5.0,
            H - MB + 20.0
        )
        .unwrap();
    }
    let x03 = ax.map(crate::steering::UNRELIABLE_BELOW, ML, W - MR).unwrap();
    writeln!(
        s,
        r##"<line x1="{x03:.2}" y1="{MT}" x2="{x03:.2}" y2="{}" stroke="#555555" stroke-dasharray="6,4"/>"##,
        H - MB
    )
    .unwrap();
    let y0 = ay.map(0.0, H - MB, MT).unwrap();
    writeln!(
        s,
        r##"<line x1="{ML}" y1="{y0:.2}" x2="{}" y2="{y0:.2}" stroke="#bbbbbb"/>"##,
        W - MR
    )
    .unwrap();
    for p in &pts {
        let k = r.variants.iter().position(|v| *v == p.variant).unwrap_or(0);
        if let (Some(c), Some(a)) = (p.cosine, p.kl_advantage) {
            let (x, y) = (ax.map(c, ML, W - MR).unwrap(), ay.map(a, H - MB, MT).unwrap());
            writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"><title>{} layer {}</title></circle>"#,
                COLORS[k % COLORS.len()],
                p.variant,
                p.layer
            )
            .unwrap();
        }
    }
    let names: Vec<String> = r.variants.iter().map(|v| v.name().to_string()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

fn figures(r: &FactorialResult) -> Vec<(String, String)> {
    let erank = |v, l| r.phase1_cell(v, l)?.summary.as_ref().map(|s| s.effective_rank);
    let trace = |v, l| r.phase1_cell(v, l)?.summary.as_ref().map(|s| s.trace);
    vec![
        (
            "fig1_effective_rank.svg".into(),
            line_chart(r, "Effective rank of H by layer", "effective rank", false, &erank),
        ),
        (
            "fig2_trace.svg".into(),
            line_chart(r, "Trace of H by layer", "trace (log scale)", true, &trace),
        ),
        ("fig3_cosine_vs_advantage.svg".into(), scatter_chart(r)),
    ]
}

/// Lists every file under `dir` with its SHA-256 and writes `manifest.json`.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(&path, e.into())
        })?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_none_or(|e| e != "tmp") && p != dir.join(Manifest::FILE) {
            files.push(p.to_path_buf());
        }
    }
    let mut entries: Vec<ManifestEntry> = files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(dir).expect("under dir");
            Ok(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(&Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: super::RAW_SCHEMA_VERSION,
        files: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(Manifest::FILE), &json)?;
    Ok(manifest)
}

/// Renders every table (CSV and aligned text) and figure (SVG) under
/// `out_dir`, then rewrites the manifest. Nothing is written unless the
/// result has all three stages.
pub fn render_report(result: &FactorialResult, out_dir: &Path) -> Result<Manifest> {
    let mut missing = Vec::new();
    if result.variants.is_empty() {
        missing.push("variants");
    }
    if result.phase1.is_empty() {
        missing.push("phase 1");
    }
    if result.phase2.is_empty() {
        missing.push("phase 2");
    }
    if result.tasks.is_empty() {
        missing.push("task sweep");
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!("cannot render an incomplete result: missing {}", missing.join(", "))));
    }
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let tdir = out_dir.join("tables");
    let mut all_text = String::new();
    for t in tables(result) {
        files.push((tdir.join(format!("{}.csv", t.name)), t.csv()));
        let text = t.text();
        all_text.push_str(&text);
        all_text.push('\n');
        files.push((tdir.join(format!("{}.txt", t.name)), text));
    }
    let head = headline(result);
    files.push((tdir.join("summary.txt"), format!("{head}\n{all_text}")));
    for (name, svg) in figures(result) {
        files.push((out_dir.join("figures").join(name), svg));
    }
    for (p, body) in &files {
        write_atomic(p, body.as_bytes())?;
    }
    write_manifest(out_dir)
}
