//! Artifact output: result-table CSV (round-trippable), per-episode and
//! guard-event logs, SVG heatmaps, and a text summary.

use std::path::Path;

use super::{HarnessError, ResultRow};
use crate::fedtrain::EpisodeLog;
use crate::guard::GuardEvent;
use crate::gridworld::Outcome;

fn io_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
}

const RESULT_COLUMNS: [&str; 10] = [
    "episode", "ber", "location", "mode", "persistence", "guard", "mean_sr", "sr_std", "ci_half",
    "mean_flips",
];

/// Write a result table with a stable column order. Runtimes are deliberately
/// not serialized: the CSV must be byte-identical across repeated runs.
pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(io_err(path))?;
    w.write_record(RESULT_COLUMNS).map_err(io_err(path))?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.ber.to_string(),
            r.location.clone(),
            r.mode.clone(),
            r.persistence.clone(),
            r.guard.to_string(),
            r.mean_sr.to_string(),
            r.sr_std.to_string(),
            r.ci_half.to_string(),
            r.mean_flips.to_string(),
        ])
        .map_err(io_err(path))?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(io_err(path))?;
    let bad = |message: String| HarnessError::Io { path: path.to_path_buf(), message };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io_err(path))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("missing column {i}")));
        rows.push(ResultRow {
            episode: field(0)?.parse().map_err(|e| bad(format!("episode: {e}")))?,
            ber: field(1)?.parse().map_err(|e| bad(format!("ber: {e}")))?,
            location: field(2)?.to_string(),
            mode: field(3)?.to_string(),
            persistence: field(4)?.to_string(),
            guard: field(5)?.parse().map_err(|e| bad(format!("guard: {e}")))?,
            mean_sr: field(6)?.parse().map_err(|e| bad(format!("mean_sr: {e}")))?,
            sr_std: field(7)?.parse().map_err(|e| bad(format!("sr_std: {e}")))?,
            ci_half: field(8)?.parse().map_err(|e| bad(format!("ci_half: {e}")))?,
            mean_flips: field(9)?.parse().map_err(|e| bad(format!("mean_flips: {e}")))?,
            runtime_s: 0.0,
        });
    }
    Ok(rows)
}

pub fn outcome_str(o: Outcome) -> &'static str {
    match o {
        Outcome::Ongoing => "ongoing",
        Outcome::ReachedGoal => "reached_goal",
        Outcome::HitHell => "hit_hell",
        Outcome::Timeout => "timeout",
    }
}

/// Per-episode training log with the canonical column set.
pub fn write_episode_log_csv(path: &Path, logs: &[EpisodeLog]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record([
        "episode", "agent", "return", "outcome", "epsilon", "alpha", "flips_injected",
        "sr_window100",
    ])
    .map_err(io_err(path))?;
    for r in logs {
        w.write_record([
            r.episode.to_string(),
            r.agent.to_string(),
            r.ret.to_string(),
            outcome_str(r.outcome).to_string(),
            r.epsilon.to_string(),
            r.alpha.to_string(),
            r.flips_injected.to_string(),
            r.sr_window100.to_string(),
        ])
        .map_err(io_err(path))?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(())
}

pub fn write_guard_events_csv(path: &Path, events: &[GuardEvent]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    w.write_record(["episode", "verdict", "agent", "action_taken", "recovered_within_k"])
        .map_err(io_err(path))?;
    for e in events {
        w.write_record([
            e.episode.to_string(),
            e.verdict.clone(),
            e.agent.map(|a| a.to_string()).unwrap_or_default(),
            e.action_taken.clone(),
            e.recovered_within_k.map(|b| b.to_string()).unwrap_or_default(),
        ])
        .map_err(io_err(path))?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(())
}

fn sr_color(sr: f64) -> String {
    // red (SR 0) to green (SR 1) through yellow
    let sr = sr.clamp(0.0, 1.0);
    let (r, g) = if sr < 0.5 { (255, (2.0 * sr * 255.0) as u8) } else { ((2.0 * (1.0 - sr) * 255.0) as u8, 200) };
    format!("#{r:02x}{g:02x}30")
}

/// Episode x BER success-rate heatmap for one (location, mode, persistence,
/// guard) slice of a result table. Returns the SVG document and the number of
/// cells drawn.
pub fn heatmap_svg(rows: &[ResultRow], episodes: &[usize], bers: &[f64]) -> (String, usize) {
    const CELL: usize = 48;
    const MARGIN: usize = 70;
    let w = MARGIN + CELL * bers.len() + 10;
    let h = MARGIN + CELL * episodes.len() + 10;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"10\">\n"
    );
    let mut cells = 0;
    for (i, &ep) in episodes.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{}\">ep {ep}</text>\n",
            MARGIN + i * CELL + CELL / 2
        ));
        for (j, &ber) in bers.iter().enumerate() {
            let sr = rows
                .iter()
                .find(|r| r.episode == ep && r.ber == ber)
                .map(|r| r.mean_sr)
                .unwrap_or(f64::NAN);
            let x = MARGIN + j * CELL;
            let y = MARGIN + i * CELL;
            if sr.is_nan() {
                svg.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#ccc\"/>\n"
                ));
            } else {
                svg.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"/>\n<text x=\"{}\" y=\"{}\">{:.2}</text>\n",
                    sr_color(sr),
                    x + 6,
                    y + CELL / 2,
                    sr
                ));
            }
            cells += 1;
        }
    }
    for (j, &ber) in bers.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" transform=\"rotate(-45 {} {})\">{ber:e}</text>\n",
            MARGIN + j * CELL + 4,
            MARGIN - 8,
            MARGIN + j * CELL + 4,
            MARGIN - 8
        ));
    }
    svg.push_str("</svg>\n");
    (svg, cells)
}

/// Human-readable digest of a result table: one line per cell plus a
/// comparison against the fault-free baseline when a BER=0 row exists.
pub fn text_summary(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    let baseline = rows.iter().find(|r| r.ber == 0.0).map(|r| r.mean_sr);
    if let Some(b) = baseline {
        out.push_str(&format!("fault-free baseline SR: {b:.4}\n"));
    }
    for r in rows {
        out.push_str(&format!(
            "ep {:>5}  ber {:>8.0e}  {:<16} {:<10} {:<17} guard={:<5}  SR {:.4} +/- {:.4}",
            r.episode, r.ber, r.location, r.mode, r.persistence, r.guard, r.mean_sr, r.ci_half
        ));
        if let Some(b) = baseline {
            out.push_str(&format!("  (delta vs baseline {:+.4})", r.mean_sr - b));
        }
        out.push('\n');
    }
    out
}
