use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use uwbsim_core::ekf::Verdict;
use uwbsim_core::eval::EvalError;
use uwbsim_core::{
    affine_rank, apply_command, cell_ellipses, emit_reports, load, run_grid, run_session, store, AnchorConfigError, AnchorTable,
    ColdStart, Fix, Tracker,
};

use crate::config::Resolved;
use crate::CliError;

fn csv_out() -> csv::Writer<io::StdoutLock<'static>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(io::stdout().lock())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require_tag(run: &Resolved) -> Result<(), CliError> {
    match run.tag {
        Some(_) => Ok(()),
        None => Err(CliError::Config("no tag position: pass --tag x,y,z or set [tag] position".into())),
    }
}

/// One CSV row per scheduled ranging.
pub fn range(run: &Resolved) -> Result<(), CliError> {
    require_tag(run)?;
    let session = run_session(&run.schedule, &run.scenario, run.seed, 0, run.rounds).map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = csv_out();
    out.write_record(["round", "sim_time_ps", "anchor", "distance_m", "status"]).map_err(runtime)?;
    for round in session {
        for m in &round.measurements {
            let distance = if m.distance.is_finite() { m.distance.to_string() } else { String::new() };
            out.write_record([
                round.round_index.to_string(),
                m.sim_time.to_string(),
                m.anchor.to_string(),
                distance,
                m.status.as_str().to_string(),
            ])
            .map_err(runtime)?;
        }
    }
    out.flush().map_err(runtime)
}

/// One CSV row per round with the filter's estimate.
pub fn localize(run: &Resolved) -> Result<(), CliError> {
    require_tag(run)?;
    let positions: Vec<_> = run.schedule.anchors().iter().filter_map(|id| run.table.get(*id)).collect();
    let rank = affine_rank(&positions);
    if rank < 3 {
        return Err(CliError::Geometry(format!(
            "{} scheduled anchors span {rank} dimension(s); a 3-D fix needs at least 4 non-coplanar anchors",
            positions.len()
        )));
    }
    let session = run_session(&run.schedule, &run.scenario, run.seed, 0, run.rounds).map_err(|e| CliError::Config(e.to_string()))?;
    let mut tracker = Tracker::new(run.table.clone(), run.ekf).map_err(|e| CliError::Config(e.to_string()))?;

    let anchors = run.schedule.anchors();
    let mut header: Vec<String> =
        ["round", "sim_time_ps", "state", "x", "y", "z", "var_x", "var_y", "var_z", "accepted", "rejected", "max_abs_innovation_m"]
            .map(String::from)
            .into();
    header.extend(anchors.iter().map(|id| format!("innov_{id}")));
    header.push("rejections".into());

    let mut out = csv_out();
    out.write_record(&header).map_err(runtime)?;
    for round in session {
        let fix = tracker.process_round(&round).map_err(runtime)?;
        let row = match &fix {
            Some(fix) => fix_row(fix, anchors),
            None => waiting_row(round.round_index, round.t_round_end, anchors.len()),
        };
        out.write_record(&row).map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}

fn fix_row(fix: &Fix, anchors: &[uwbsim_core::AnchorId]) -> Vec<String> {
    let state = match fix.cold_start {
        Some(ColdStart::Multilateration) => "init-multilateration",
        Some(ColdStart::Centroid) => "init-centroid",
        None => "tracking",
    };
    let [vx, vy, vz] = fix.variances();
    let report = &fix.report;
    let mut row = vec![
        fix.round_index.to_string(),
        fix.sim_time.to_string(),
        state.to_string(),
        fix.position.x.to_string(),
        fix.position.y.to_string(),
        fix.position.z.to_string(),
        vx.to_string(),
        vy.to_string(),
        vz.to_string(),
        report.accepted().to_string(),
        report.rejected().to_string(),
        if report.accepted() > 0 { report.max_abs_accepted_innovation().to_string() } else { String::new() },
    ];
    let accepted: BTreeMap<_, _> = report.entries.iter().filter(|e| e.accepted()).map(|e| (e.anchor, e.innovation)).collect();
    row.extend(anchors.iter().map(|id| accepted.get(id).map(|v| v.to_string()).unwrap_or_default()));
    let rejections: Vec<String> =
        report.entries.iter().filter(|e| e.verdict != Verdict::Accepted).map(|e| format!("{}:{}", e.anchor, e.verdict.as_str())).collect();
    row.push(rejections.join(";"));
    row
}

fn waiting_row(round: u64, t: u64, n_anchors: usize) -> Vec<String> {
    let mut row = vec![round.to_string(), t.to_string(), "waiting".to_string()];
    row.resize(12 + n_anchors + 1, String::new());
    row
}

/// Runs the grid and writes the three report files.
pub fn grid_eval(run: &Resolved, out_dir: &Path) -> Result<(), CliError> {
    let outcomes = run_grid(&run.grid, &run.schedule, &run.scenario, &run.ekf, run.seed, &run.eval).map_err(|e| match e {
        EvalError::InvalidGrid(_) => CliError::Config(e.to_string()),
        e => runtime(e),
    })?;
    let ellipses = cell_ellipses(&outcomes, run.ellipse_k);
    emit_reports(&outcomes, &ellipses, out_dir).map_err(runtime)?;
    let empty = outcomes.iter().filter(|o| o.stats.empty).count();
    println!("wrote {} cells ({empty} empty) to {}", outcomes.len(), out_dir.display());
    Ok(())
}

/// Applies configuration commands to the anchor file and prints the replies.
/// Mutations are persisted after each successful command.
pub fn config(path: &Path, create: bool, commands: Vec<String>) -> Result<bool, CliError> {
    let mut table = match load(path) {
        Ok(table) => table,
        Err(AnchorConfigError::NotProvisioned(_)) if create => AnchorTable::new(),
        Err(e) => return Err(e.into()),
    };
    let mut all_ok = true;
    let stdout = io::stdout();
    let mut handle = |line: &str, table: &mut AnchorTable| -> Result<(), CliError> {
        if line.trim().is_empty() {
            return Ok(());
        }
        let (next, reply) = apply_command(table, line);
        if reply.is_ok() && next != *table {
            store(&next, path).map_err(runtime)?;
            *table = next;
        }
        all_ok &= reply.is_ok();
        writeln!(stdout.lock(), "{}", reply.to_wire()).map_err(runtime)
    };
    if commands.is_empty() {
        for line in io::stdin().lock().lines() {
            handle(&line.map_err(runtime)?, &mut table)?;
        }
    } else {
        handle(&commands.join(" "), &mut table)?;
    }
    Ok(all_ok)
}
