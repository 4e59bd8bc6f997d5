//! Matched-pair attack metrics, AP drop, practicality scoring and color
//! statistics.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camotex::{ConstraintFlags, TextureMap};
use crate::detectors::{match_detections, DetectionSet};
use crate::render::Annotation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
    /// No vehicle was detected in the original images.
    #[error("metric undefined (N/A): {0}")]
    Undefined(String),
}

/// Per-vehicle outcome counts over a matched original/adversarial pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedEvalResult {
    pub v_dd: usize,
    pub v_dm: usize,
    pub v_md: usize,
    pub v_mm: usize,
}

impl MatchedEvalResult {
    pub fn total(&self) -> usize {
        self.v_dd + self.v_dm + self.v_md + self.v_mm
    }
}

impl std::ops::Add for MatchedEvalResult {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { v_dd: self.v_dd + o.v_dd, v_dm: self.v_dm + o.v_dm, v_md: self.v_md + o.v_md, v_mm: self.v_mm + o.v_mm }
    }
}

fn detected_flags(det: &DetectionSet, gt: &[Annotation], radius: f64) -> Vec<bool> {
    let centers: Vec<[f64; 2]> = gt.iter().map(|a| a.center).collect();
    let mut hit = vec![false; gt.len()];
    for j in match_detections(det, &centers, radius).into_iter().flatten() {
        hit[j] = true;
    }
    hit
}

/// Classifies every ground-truth vehicle as detected or missed in each image
/// of the pair, with the same greedy matching as AP.
pub fn match_outcomes(
    gt_or: &[Vec<Annotation>],
    det_or: &[DetectionSet],
    gt_adv: &[Vec<Annotation>],
    det_adv: &[DetectionSet],
    radius: f64,
) -> Result<MatchedEvalResult, MetricError> {
    if gt_or.len() != gt_adv.len() || gt_or.len() != det_or.len() || gt_adv.len() != det_adv.len() {
        return Err(MetricError::Contract("paired datasets differ in image count".into()));
    }
    if !(radius > 0.0) {
        return Err(MetricError::Contract(format!("match radius {radius} must be positive")));
    }
    let mut out = MatchedEvalResult::default();
    for (i, (go, ga)) in gt_or.iter().zip(gt_adv).enumerate() {
        let ids = |g: &[Annotation]| g.iter().map(|a| a.id).collect::<Vec<_>>();
        if ids(go) != ids(ga) {
            return Err(MetricError::Contract(format!("image {i}: vehicle ids differ between original and adversarial")));
        }
        let a = detected_flags(&det_or[i], go, radius);
        let b = detected_flags(&det_adv[i], ga, radius);
        for (x, y) in a.into_iter().zip(b) {
            match (x, y) {
                (true, true) => out.v_dd += 1,
                (true, false) => out.v_dm += 1,
                (false, true) => out.v_md += 1,
                (false, false) => out.v_mm += 1,
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRates {
    pub asr: f64,
    pub er: f64,
    pub easr: f64,
}

/// `EASR = (v_dm - v_md) / (v_dd + v_dm)`, together with its ASR and ER parts.
pub fn easr(r: &MatchedEvalResult) -> Result<AttackRates, MetricError> {
    let base = r.v_dd + r.v_dm;
    if base == 0 {
        return Err(MetricError::Undefined("no vehicle detected in the original images".into()));
    }
    let b = base as f64;
    let (asr, er) = (r.v_dm as f64 / b, r.v_md as f64 / b);
    Ok(AttackRates { asr, er, easr: (r.v_dm as f64 - r.v_md as f64) / b })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Apd {
    pub value: f64,
    /// The adversarial AP exceeds the original.
    pub negative: bool,
}

pub fn apd(ap_or: f64, ap_adv: f64) -> Result<Apd, MetricError> {
    if !(0.0..=1.0).contains(&ap_or) || !(0.0..=1.0).contains(&ap_adv) {
        return Err(MetricError::Contract(format!("AP values {ap_or}, {ap_adv} outside [0,1]")));
    }
    let value = ap_or - ap_adv;
    Ok(Apd { value, negative: value < 0.0 })
}

/// Harmonic mean of EASR and practicality, zero when both vanish. A negative
/// EASR counts as zero.
pub fn p1(easr: f64, pr: f64) -> f64 {
    let e = easr.max(0.0);
    if e + pr == 0.0 {
        0.0
    } else {
        2.0 * e * pr / (e + pr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    Texture,
    Shape,
    Combined,
}

impl AttackKind {
    fn prefix(self) -> &'static str {
        match self {
            AttackKind::Texture => "T",
            AttackKind::Shape => "S",
            AttackKind::Combined => "C",
        }
    }
}

/// `T-PixFcMa`, `S-O`, `C-PixFc`, ...
pub fn attack_label(flags: ConstraintFlags, kind: AttackKind) -> String {
    match kind {
        AttackKind::Shape => "S-O".into(),
        k => format!("{}-{flags}", k.prefix()),
    }
}

/// Scores of one practicality criterion: `+1` good, `0` insignificant,
/// `-1` bad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub texture: i8,
    pub shape: i8,
}

fn sign(v: i8) -> &'static str {
    match v.signum() {
        1 => "+",
        -1 => "-",
        _ => "0",
    }
}

impl fmt::Display for CriterionScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", sign(self.texture), sign(self.shape))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PracticalityLedger {
    /// Production cost.
    pub pc: CriterionScore,
    /// Difficulty of installation.
    pub di: CriterionScore,
    /// Difficulty of operation.
    pub dop: CriterionScore,
    pub notes: String,
}

impl PracticalityLedger {
    pub fn total(&self) -> i32 {
        [self.pc, self.di, self.dop].iter().map(|c| c.texture as i32 + c.shape as i32).sum()
    }
}

/// Rule table: Pix improves installation, Ma improves operation, fixed colors
/// with Pix lower production cost (learned colors with Pix are neutral).
/// Shape components always score bad; shape-only attacks leave the texture
/// neutral.
pub fn practicality_score(flags: ConstraintFlags, kind: AttackKind) -> Result<PracticalityLedger, MetricError> {
    flags.validate().map_err(|e| MetricError::Contract(e.to_string()))?;
    let good_or_bad = |b: bool| if b { 1 } else { -1 };
    let (tex, notes) = match kind {
        AttackKind::Shape => ([0, 0, 0], "shape deformation only".to_string()),
        _ => {
            let pc = match (flags.pix, flags.fc, flags.lc) {
                (true, true, _) => 1,
                (true, _, true) => 0,
                _ => -1,
            };
            ([pc, good_or_bad(flags.pix), good_or_bad(flags.ma)], format!("texture {flags}"))
        }
    };
    let shape = if kind == AttackKind::Texture { 0 } else { -1 };
    let c = |t| CriterionScore { texture: t, shape };
    Ok(PracticalityLedger { pc: c(tex[0]), di: c(tex[1]), dop: c(tex[2]), notes })
}

/// The fifteen attacks of our taxonomy, in report order.
pub fn attack_taxonomy() -> Vec<(ConstraintFlags, AttackKind)> {
    let t = ["U", "Ma", "Pix", "PixMa", "Lc", "Fc", "LcMa", "FcMa", "PixLc", "PixFc", "PixLcMa", "PixFcMa"];
    let mut v: Vec<_> = t.iter().map(|s| (s.parse().expect("valid label"), AttackKind::Texture)).collect();
    v.push((ConstraintFlags::NONE, AttackKind::Shape));
    v.push(("Fc".parse().expect("valid label"), AttackKind::Combined));
    v.push(("PixFc".parse().expect("valid label"), AttackKind::Combined));
    v
}

/// Published scores of related camouflages, as `(name, PC, DI, DO)` texture
/// symbols; their shape symbols are all neutral.
pub const OTHER_WORKS: [(&str, i8, i8, i8); 6] = [
    ("Du et al. (ON)", 1, 1, 1),
    ("Du et al. (OFF)", 0, 1, -1),
    ("EVD4UAV", 1, 1, 1),
    ("FCA", -1, -1, 1),
    ("ACTIVE", -1, -1, 1),
    ("DTA", -1, -1, 1),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PracticalityRow {
    pub group: &'static str,
    pub camouflage: String,
    pub ledger: PracticalityLedger,
}

pub fn practicality_table() -> Vec<PracticalityRow> {
    let mut rows: Vec<PracticalityRow> = OTHER_WORKS
        .iter()
        .map(|&(name, pc, di, dop)| {
            let c = |t| CriterionScore { texture: t, shape: 0 };
            PracticalityRow {
                group: "Other works",
                camouflage: name.into(),
                ledger: PracticalityLedger { pc: c(pc), di: c(di), dop: c(dop), notes: "reference".into() },
            }
        })
        .collect();
    for (flags, kind) in attack_taxonomy() {
        rows.push(PracticalityRow {
            group: "Ours",
            camouflage: attack_label(flags, kind),
            ledger: practicality_score(flags, kind).expect("taxonomy flags are valid"),
        });
    }
    rows
}

fn signed(v: i32) -> String {
    if v > 0 {
        format!("+{v}")
    } else {
        v.to_string()
    }
}

pub fn practicality_markdown(rows: &[PracticalityRow]) -> String {
    let mut s = String::from("| Group | Camouflage | PC | DI | DO | Total Score |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let l = &r.ledger;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.group,
            r.camouflage,
            l.pc,
            l.di,
            l.dop,
            signed(l.total())
        ));
    }
    s
}

pub fn practicality_csv(rows: &[PracticalityRow]) -> String {
    let mut s = String::from("group,camouflage,PC,DI,DO,total\n");
    for r in rows {
        let l = &r.ledger;
        s.push_str(&format!("{},{},{},{},{},{}\n", r.group, r.camouflage, l.pc, l.di, l.dop, signed(l.total())));
    }
    s
}

/// Fraction of pixels with at least one channel within 5% of either end of
/// the range.
pub const EDGE_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    /// `[r, g, b]`, each normalized to sum 1.
    pub channels: [Vec<f64>; 3],
    pub edge_mass: f64,
}

pub fn color_histogram(texture: &TextureMap, n_bins: usize) -> Result<ColorHistogram, MetricError> {
    if n_bins < 2 {
        return Err(MetricError::Contract(format!("{n_bins} bins; at least 2 required")));
    }
    let n = texture.width * texture.height;
    if n == 0 {
        return Err(MetricError::Contract("empty texture".into()));
    }
    let mut channels = [vec![0.0; n_bins], vec![0.0; n_bins], vec![0.0; n_bins]];
    let mut edge = 0usize;
    for px in texture.pixels() {
        let mut on_edge = false;
        for (c, &v) in px.iter().enumerate() {
            let b = ((v * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
            channels[c][b] += 1.0;
            on_edge |= v <= EDGE_WIDTH || v >= 1.0 - EDGE_WIDTH;
        }
        edge += on_edge as usize;
    }
    for ch in &mut channels {
        ch.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ColorHistogram { channels, edge_mass: edge as f64 / n as f64 })
}

/// One row of the metrics CSV; absent values print as `N/A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub attack: String,
    pub constraint_flags: String,
    pub pm: Option<f64>,
    pub pr: Option<f64>,
    pub detector: String,
    pub asr: Option<f64>,
    pub er: Option<f64>,
    pub easr: Option<f64>,
    pub ap_or: f64,
    pub ap_adv: f64,
    pub apd: f64,
    pub p1: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "run_id,attack,constraint_flags,pm,pr,detector,ASR,ER,EASR,AP_or,AP_adv,APD,P1";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.6}"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.run_id,
            r.attack,
            r.constraint_flags,
            opt(r.pm),
            opt(r.pr),
            r.detector,
            opt(r.asr),
            opt(r.er),
            opt(r.easr),
            r.ap_or,
            r.ap_adv,
            r.apd,
            opt(r.p1)
        ));
    }
    s
}

/// Parses [`metrics_csv`] output.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, MetricError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_CSV_HEADER) {
        return Err(MetricError::Contract("metrics CSV header mismatch".into()));
    }
    let num = |s: &str| -> Result<Option<f64>, MetricError> {
        if s == "N/A" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| MetricError::Contract(format!("bad number {s:?}")))
        }
    };
    let req = |s: &str| num(s)?.ok_or_else(|| MetricError::Contract("required value is N/A".into()));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 13 {
                return Err(MetricError::Contract(format!("expected 13 fields, got {}", f.len())));
            }
            Ok(MetricsRow {
                run_id: f[0].into(),
                attack: f[1].into(),
                constraint_flags: f[2].into(),
                pm: num(f[3])?,
                pr: num(f[4])?,
                detector: f[5].into(),
                asr: num(f[6])?,
                er: num(f[7])?,
                easr: num(f[8])?,
                ap_or: req(f[9])?,
                ap_adv: req(f[10])?,
                apd: req(f[11])?,
                p1: num(f[12])?,
            })
        })
        .collect()
}
