//! CSV and JSON artifacts.
//!
//! Every CSV has a header row, comma separators and LF line endings. Floats
//! are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{StepOutput, Variant};
use crate::experiments::{ArmseRow, SweepRow, TimingRow, VariantSummary};
use crate::linsys::Trajectory;
use crate::sensing::Level;
use crate::solvers::SolveStatus;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn parse_f64(field: &str, what: &str, row: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("row {row}: {what} '{field}' is not a number")))
}

fn parse_usize(field: &str, what: &str, row: usize) -> Result<usize> {
    field
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("row {row}: {what} '{field}' is not a nonnegative integer")))
}

fn serialize_rows<W: Write, S: Serialize>(w: W, rows: &[S]) -> Result<()> {
    let mut out = writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// `time, sensor_index, y`; one row per sample and sensor.
pub fn write_measurements<W: Write>(w: W, readings: &[Vec<Level>]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["time", "sensor_index", "y"])?;
    for (t, row) in readings.iter().enumerate() {
        for (i, y) in row.iter().enumerate() {
            out.write_record([t.to_string(), i.to_string(), y.as_i8().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a measurement log; rows may come in any order but every
/// `(time, sensor)` pair from 0 up to the largest index must appear once.
pub fn read_measurements<R: Read>(r: R) -> Result<Vec<Vec<Level>>> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["time", "sensor_index", "y"] {
        return Err(Error::Format(format!(
            "expected header 'time,sensor_index,y', found '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut cells: BTreeMap<(usize, usize), Level> = BTreeMap::new();
    let (mut max_t, mut max_i) = (0, 0);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 2;
        let t = parse_usize(&rec[0], "time", row)?;
        let i = parse_usize(&rec[1], "sensor_index", row)?;
        let y = match &rec[2] {
            "1" | "+1" => Level::High,
            "-1" => Level::Low,
            other => return Err(Error::Format(format!("row {row}: y '{other}' is not -1 or +1"))),
        };
        if cells.insert((t, i), y).is_some() {
            return Err(Error::Format(format!("row {row}: duplicate reading for time {t}, sensor {i}")));
        }
        max_t = max_t.max(t);
        max_i = max_i.max(i);
    }
    if cells.is_empty() {
        return Err(Error::Format("measurement log has no rows".into()));
    }
    let (times, sensors) = (max_t + 1, max_i + 1);
    if cells.len() != times * sensors {
        let missing = (0..times)
            .flat_map(|t| (0..sensors).map(move |i| (t, i)))
            .find(|k| !cells.contains_key(k))
            .expect("count mismatch implies a gap");
        return Err(Error::Format(format!("no reading for time {}, sensor {}", missing.0, missing.1)));
    }
    let mut readings = vec![Vec::with_capacity(sensors); times];
    for ((t, _), y) in cells {
        readings[t].push(y);
    }
    Ok(readings)
}

/// `t, x0.., u0.., z0..`; the input cells of the last row are empty.
pub fn write_trajectory<W: Write>(w: W, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let p = traj.outputs.first().map_or(0, |z| z.len());
    let mut out = writer(w);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..n).map(|j| format!("x{j}")))
        .chain((0..m).map(|j| format!("u{j}")))
        .chain((0..p).map(|j| format!("z{j}")))
        .collect();
    out.write_record(&header)?;
    for t in 0..traj.states.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(traj.states[t].iter().map(|&v| fmt_f64(v)));
        match traj.inputs.get(t) {
            Some(u) => rec.extend(u.iter().map(|&v| fmt_f64(v))),
            None => rec.extend(std::iter::repeat_n(String::new(), m)),
        }
        rec.extend(traj.outputs[t].iter().map(|&v| fmt_f64(v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Trajectory> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let count = |prefix: char| headers.iter().filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok()).count();
    let (n, m, p) = (count('x'), count('u'), count('z'));
    if headers.get(0) != Some("t") || headers.len() != 1 + n + m + p || n == 0 {
        return Err(Error::Format("trajectory header must be t, x0.., u0.., z0..".into()));
    }
    let mut traj = Trajectory {
        states: Vec::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let mut last_input_empty = false;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 2;
        if last_input_empty {
            return Err(Error::Format(format!("row {row}: only the last row may omit inputs")));
        }
        if parse_usize(&rec[0], "t", row)? != traj.states.len() {
            return Err(Error::Format(format!("row {row}: t must count up from 0")));
        }
        let floats = |range: std::ops::Range<usize>| -> Result<DVector<f64>> {
            let v = range.map(|j| parse_f64(&rec[j], &headers[j], row)).collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(v))
        };
        traj.states.push(floats(1..1 + n)?);
        traj.outputs.push(floats(1 + n + m..1 + n + m + p)?);
        if m > 0 && rec[1 + n].is_empty() {
            last_input_empty = true;
        } else {
            traj.inputs.push(floats(1 + n..1 + n + m)?);
        }
    }
    if traj.states.len() < 2 {
        return Err(Error::Format("trajectory needs at least two rows".into()));
    }
    // the last input is not part of the trajectory
    traj.inputs.truncate(traj.states.len() - 1);
    Ok(traj)
}

/// `t, variant, start_x*, end_x*, cost, iterations, wall_time_s`.
pub fn write_estimates<W: Write>(w: W, n: usize, rows: &[(Variant, StepOutput)]) -> Result<()> {
    let mut out = writer(w);
    let header: Vec<String> = ["t", "variant"]
        .into_iter()
        .map(String::from)
        .chain((0..n).map(|j| format!("start_x{j}")))
        .chain((0..n).map(|j| format!("end_x{j}")))
        .chain(["cost", "iterations", "wall_time_s"].into_iter().map(String::from))
        .collect();
    out.write_record(&header)?;
    for (variant, s) in rows {
        let mut rec = vec![s.t.to_string(), variant.to_string()];
        rec.extend(s.estimate.first().iter().map(|&v| fmt_f64(v)));
        rec.extend(s.estimate.last().iter().map(|&v| fmt_f64(v)));
        rec.push(fmt_f64(s.estimate.cost));
        rec.push(s.estimate.iterations.to_string());
        rec.push(fmt_f64(s.wall_time_s));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn status_str(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::MaxIterations => "max-iterations",
        SolveStatus::Infeasible => "infeasible",
    }
}

/// `window, solver, status, iterations, residual, wall_time_s, fell_back`.
pub fn write_diagnostics<W: Write>(w: W, rows: &[(Variant, StepOutput)]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["window", "solver", "status", "iterations", "residual", "wall_time_s", "fell_back"])?;
    for (variant, s) in rows {
        out.write_record([
            s.t.to_string(),
            variant.to_string(),
            status_str(s.status).to_string(),
            s.estimate.iterations.to_string(),
            fmt_f64(s.estimate.residual),
            fmt_f64(s.wall_time_s),
            s.fell_back.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `sweep_variable, value, delta_mean, delta_min, rank_fraction, delta_stderr`.
pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    serialize_rows(w, rows)
}

/// `sweep_variable, value, variant, armse`.
pub fn write_armse<W: Write>(w: W, rows: &[ArmseRow]) -> Result<()> {
    serialize_rows(w, rows)
}

/// `horizon, variant, median_step_s, min_step_s, max_step_s, runs, steps_per_run`.
pub fn write_timing<W: Write>(w: W, rows: &[TimingRow]) -> Result<()> {
    serialize_rows(w, rows)
}

/// Long format `time, variant, rmse`.
pub fn write_rmse<W: Write>(w: W, summaries: &[VariantSummary]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["time", "variant", "rmse"])?;
    for s in summaries {
        for (t, e) in s.rmse.times.iter().zip(&s.rmse.rmse) {
            out.write_record([fmt_f64(*t), s.variant.to_string(), fmt_f64(*e)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<W: Write, S: Serialize>(mut w: W, value: &S) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurements_round_trip() {
        let readings = vec![vec![Level::High, Level::Low], vec![Level::Low, Level::Low], vec![Level::High, Level::High]];
        let mut buf = Vec::new();
        write_measurements(&mut buf, &readings).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,sensor_index,y\n0,0,1\n0,1,-1\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_measurements(buf.as_slice()).unwrap(), readings);
    }

    #[test]
    fn measurement_gaps_and_bad_values_are_rejected() {
        let gap = "time,sensor_index,y\n0,0,1\n1,1,1\n0,1,1\n";
        assert!(read_measurements(gap.as_bytes()).is_err());
        let bad = "time,sensor_index,y\n0,0,0\n";
        assert!(read_measurements(bad.as_bytes()).is_err());
        let dup = "time,sensor_index,y\n0,0,1\n0,0,-1\n";
        assert!(read_measurements(dup.as_bytes()).is_err());
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let traj = Trajectory {
            states: vec![DVector::from_vec(vec![0.1, -1.0 / 3.0]), DVector::from_vec(vec![1e-300, 2.5])],
            inputs: vec![DVector::from_vec(vec![0.7])],
            outputs: vec![DVector::from_vec(vec![0.2]), DVector::from_vec(vec![f64::MIN_POSITIVE])],
        };
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn floats_are_shortest_round_trip() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1e-5), "1e-5");
        assert_eq!(fmt_f64(2.0), "2.0");
    }
}
