//! Trajectory CSV read/write. One row per PMU sample, dot-decimal, LF,
//! header row `t,theta_<bus>...,v_<bus>...,p_<bus>...,q_<bus>...`. Values
//! use the shortest round-trip float formatting, so a parsed file
//! reproduces the in-memory trajectory bit for bit.

use super::HarnessError;
use crate::net::BusId;
use crate::sim::PmuWindow;
use nalgebra::DMatrix;
use std::fmt::Write as _;
use std::path::Path;

pub fn trajectory_to_csv(window: &PmuWindow) -> String {
    let m = window.n_buses();
    let n = window.n_samples();
    let mut out = String::new();
    out.push('t');
    for ch in ["theta", "v", "p", "q"] {
        if (ch == "p" && window.p.is_none()) || (ch == "q" && window.q.is_none()) {
            continue;
        }
        for id in &window.bus_ids {
            let _ = write!(out, ",{ch}_{id}");
        }
    }
    out.push('\n');
    let dt = window.dt();
    for i in 0..n {
        let t = window.t0 + (i + 1) as f64 * dt;
        let _ = write!(out, "{t}");
        for k in 0..m {
            let _ = write!(out, ",{}", window.theta[(i, k)]);
        }
        for k in 0..m {
            let _ = write!(out, ",{}", window.v[(i, k)]);
        }
        if let Some(p) = &window.p {
            for k in 0..m {
                let _ = write!(out, ",{}", p[(i, k)]);
            }
        }
        if let Some(q) = &window.q {
            for k in 0..m {
                let _ = write!(out, ",{}", q[(i, k)]);
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: impl AsRef<Path>, window: &PmuWindow) -> Result<(), HarnessError> {
    std::fs::write(path, trajectory_to_csv(window))?;
    Ok(())
}

pub fn parse_trajectory(text: &str) -> Result<PmuWindow, HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Csv("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(HarnessError::Csv("first column must be t".into()));
    }
    let mut bus_ids: Vec<BusId> = Vec::new();
    let mut have = [false; 4]; // theta, v, p, q
    for c in &cols[1..] {
        let (ch, bus) = c
            .rsplit_once('_')
            .ok_or_else(|| HarnessError::Csv(format!("bad column name {c}")))?;
        let id = BusId(
            bus.parse::<u32>()
                .map_err(|_| HarnessError::Csv(format!("bad bus id in {c}")))?,
        );
        let slot = match ch {
            "theta" => 0,
            "v" => 1,
            "p" => 2,
            "q" => 3,
            other => return Err(HarnessError::Csv(format!("unknown channel {other}"))),
        };
        if slot == 0 {
            bus_ids.push(id);
        }
        have[slot] = true;
    }
    let m = bus_ids.len();
    if m == 0 {
        return Err(HarnessError::Csv("no theta channels".into()));
    }
    let expected = 1 + m * have.iter().filter(|&&h| h).count();
    if cols.len() != expected {
        return Err(HarnessError::Csv(format!(
            "expected {expected} columns, found {}",
            cols.len()
        )));
    }

    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    let n = rows.len();
    if n < 2 {
        return Err(HarnessError::Csv("need at least two samples".into()));
    }
    let mut times = Vec::with_capacity(n);
    let mut theta = DMatrix::zeros(n, m);
    let mut v = DMatrix::zeros(n, m);
    let mut p = have[2].then(|| DMatrix::zeros(n, m));
    let mut q = have[3].then(|| DMatrix::zeros(n, m));
    for (i, line) in rows.iter().enumerate() {
        let mut fields = line.split(',');
        let t: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| HarnessError::Csv(format!("bad t at row {i}")))?;
        times.push(t);
        let mut parse_block = |mat: &mut DMatrix<f64>| -> Result<(), HarnessError> {
            for k in 0..m {
                mat[(i, k)] = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| HarnessError::Csv(format!("bad value at row {i}")))?;
            }
            Ok(())
        };
        parse_block(&mut theta)?;
        parse_block(&mut v)?;
        if let Some(p) = &mut p {
            parse_block(p)?;
        }
        if let Some(q) = &mut q {
            parse_block(q)?;
        }
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err(HarnessError::Csv("non-increasing time column".into()));
    }
    Ok(PmuWindow {
        sample_rate: 1.0 / dt,
        t0: times[0] - dt,
        bus_ids,
        theta,
        v,
        p,
        q,
    })
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<PmuWindow, HarnessError> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}
