//! Comma-separated metrics, curves, sweeps and cross-pair tables, and the
//! per-episode trace log.

use std::fmt::Write;

use super::{CrossPair, CurvePoint, DialogTrace, MetricsReport, Score, SweepPoint};

pub const METRICS_HEADER: &str = "scope,count,ema,emp";
pub const CURVES_HEADER: &str = "seed,epoch,ema,emp,mean_reward,mean_entropy";
pub const SWEEP_HEADER: &str = "ratio,seed,ema,emp";

/// Rows: `all`, `hops=N`, then one per complex template, then the
/// termination and malformed-turn counters (count column only).
pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    let row = |s: &mut String, scope: &str, t: &super::Tally| {
        writeln!(s, "{scope},{},{:.6},{:.6}", t.count, t.ema(), t.emp()).expect("write to string");
    };
    row(&mut s, "all", &r.overall);
    for (h, t) in &r.by_hops {
        row(&mut s, &format!("hops={h}"), t);
    }
    for (id, t) in &r.by_template {
        row(&mut s, id, t);
    }
    writeln!(s, "termination_errors,{},,", r.termination_errors).expect("write to string");
    writeln!(s, "malformed_turns,{},,", r.malformed_turns).expect("write to string");
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

pub fn curves_csv(series: &[CurveSeries]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for c in series {
        for p in &c.points {
            writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", c.seed, p.epoch, p.ema, p.emp, p.mean_reward, p.mean_entropy)
                .expect("write to string");
        }
    }
    s
}

fn fields<'a>(line: &'a str, n: usize, lineno: usize) -> Result<Vec<&'a str>, String> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(format!("line {lineno}: expected {n} fields, found {}", f.len()));
    }
    Ok(f)
}

fn num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T, String> {
    s.parse().map_err(|_| format!("line {lineno}: `{s}` is not a number"))
}

fn body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>, String> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(format!("line 1: expected header `{header}`")),
    }
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()))
}

/// Series in order of first appearance; epochs must increase within a series.
pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveSeries>, String> {
    let mut out: Vec<CurveSeries> = Vec::new();
    for (n, line) in body(text, CURVES_HEADER)? {
        let f = fields(line, 6, n)?;
        let seed: u64 = num(f[0], n)?;
        let p = CurvePoint {
            epoch: num(f[1], n)?,
            ema: num(f[2], n)?,
            emp: num(f[3], n)?,
            mean_reward: num(f[4], n)?,
            mean_entropy: num(f[5], n)?,
        };
        match out.iter_mut().find(|c| c.seed == seed) {
            Some(c) => {
                if c.points.last().is_some_and(|q| q.epoch >= p.epoch) {
                    return Err(format!("line {n}: epoch {} does not increase", p.epoch));
                }
                c.points.push(p);
            }
            None => out.push(CurveSeries { seed, points: vec![p] }),
        }
    }
    Ok(out)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for p in points {
        writeln!(s, "{},{},{:.6},{:.6}", p.ratio, p.seed, p.ema, p.emp).expect("write to string");
    }
    s
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepPoint>, String> {
    let mut out = Vec::new();
    for (n, line) in body(text, SWEEP_HEADER)? {
        let f = fields(line, 4, n)?;
        out.push(SweepPoint { ratio: num(f[0], n)?, seed: num(f[1], n)?, ema: num(f[2], n)?, emp: num(f[3], n)? });
    }
    Ok(out)
}

/// Rows are panel groups, columns moderators; a final row flags the columns
/// whose native pairing is the maximum.
pub fn cross_pair_csv(cp: &CrossPair) -> String {
    let cols = cp.ema.first().map_or(0, Vec::len);
    let mut s = String::from("panel\\moderator");
    for j in 0..cols {
        write!(s, ",M{}", j + 1).expect("write to string");
    }
    s.push('\n');
    for (i, row) in cp.ema.iter().enumerate() {
        write!(s, "P{}", i + 1).expect("write to string");
        for v in row {
            write!(s, ",{v:.6}").expect("write to string");
        }
        s.push('\n');
    }
    s.push_str("diagonal_is_max");
    for f in &cp.diagonal_max {
        write!(s, ",{f}").expect("write to string");
    }
    s.push('\n');
    s
}

#[derive(serde::Serialize)]
struct TraceLine<'a> {
    #[serde(flatten)]
    trace: &'a DialogTrace,
    ema: bool,
    emp: bool,
}

/// One JSON object per episode.
pub fn trace_jsonl(traces: &[DialogTrace], scores: &[Score]) -> String {
    let mut s = String::new();
    for (t, sc) in traces.iter().zip(scores) {
        let line = TraceLine { trace: t, ema: sc.ema, emp: sc.emp };
        s.push_str(&serde_json::to_string(&line).expect("trace serializes"));
        s.push('\n');
    }
    s
}
