//! CSV artifacts. Floats are written in Rust's shortest round-trip form, so
//! re-reading a file reproduces the values bit for bit.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::framework::{EvaluationReport, Predictions, SessionSummary, TrainingData};
use crate::ilcbf::IlcSession;
use crate::plant::ClosedLoopResponse;
use crate::trajectory::Reference;

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn position_header(dim: usize) -> Vec<String> {
    (0..dim).map(|d| format!("rho_{d}")).collect()
}

/// Columns `k, t, r_0, …`.
pub fn write_reference_csv<W: Write>(mut w: W, reference: &Reference) -> Result<()> {
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((0..reference.axes()).map(|a| format!("r_{a}")));
    writeln!(w, "{}", header.join(","))?;
    for k in 0..reference.len() {
        let t = k as f64 * reference.sample_time();
        let values = (0..reference.axes()).map(|a| reference.axis(a)[k]);
        writeln!(w, "{k},{t},{}", join(values))?;
    }
    Ok(())
}

/// Parse a reference CSV written by [`write_reference_csv`].
pub fn read_reference_csv<R: BufRead>(r: R, sample_time: f64) -> Result<Reference> {
    let rows = read_numeric(r)?;
    let (header, rows) = rows;
    let axes = header.iter().filter(|h| h.starts_with("r_")).count();
    if axes == 0 || header.len() != axes + 2 {
        return Err(Error::InvalidInput("reference CSV needs columns k,t,r_0,…".into()));
    }
    let signals = (0..axes)
        .map(|a| rows.iter().map(|row| row[2 + a]).collect())
        .collect();
    Reference::new(signals, sample_time, Vec::new())
}

/// Columns `j, error_2norm, criterion, theta_0, …`; one row per history entry.
pub fn write_session_csv<W: Write>(mut w: W, session: &IlcSession) -> Result<()> {
    let n_theta = session.history.first().map_or(0, |t| t.theta.len());
    let mut header = vec!["j".to_string(), "error_2norm".into(), "criterion".into()];
    header.extend((0..n_theta).map(|i| format!("theta_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for t in &session.history {
        writeln!(
            w,
            "{},{},{},{}",
            t.trial,
            t.error_norm,
            t.criterion,
            join(t.theta.iter())
        )?;
    }
    Ok(())
}

/// Columns `k, t, r_a, y_a, e_a, u_a` per axis.
pub fn write_simulation_csv<W: Write>(
    mut w: W,
    reference: &Reference,
    response: &ClosedLoopResponse,
) -> Result<()> {
    let mut header = vec!["k".to_string(), "t".to_string()];
    for a in 0..reference.axes() {
        header.extend(["r", "y", "e", "u"].iter().map(|s| format!("{s}_{a}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for k in 0..reference.len() {
        let mut row = vec![k.to_string(), (k as f64 * reference.sample_time()).to_string()];
        for a in 0..reference.axes() {
            row.push(reference.axis(a)[k].to_string());
            row.push(response.y[a][k].to_string());
            row.push(response.e[a][k].to_string());
            row.push(response.u[a][k].to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Columns `rho_0, …, <label>, …, var_<label>, …`: one row per training
/// position with the trailing-mean observation of every parameter and its
/// variance.
pub fn write_training_csv<W: Write>(mut w: W, data: &TrainingData) -> Result<()> {
    let dim = data.sessions.first().map_or(0, |s| s.position.len());
    let mut header = position_header(dim);
    header.extend(data.labels.iter().cloned());
    header.extend(data.labels.iter().map(|l| format!("var_{l}")));
    writeln!(w, "{}", header.join(","))?;
    for s in &data.sessions {
        writeln!(
            w,
            "{},{},{}",
            join(s.position.iter()),
            join(s.observation.iter()),
            join(s.observation_variance.iter())
        )?;
    }
    Ok(())
}

/// Inverse of [`write_training_csv`]; session histories are not stored, so
/// only positions and observations are restored.
pub fn read_training_csv<R: BufRead>(r: R) -> Result<TrainingData> {
    let (header, rows) = read_numeric(r)?;
    let dim = header.iter().take_while(|h| h.starts_with("rho_")).count();
    if dim == 0 || dim == header.len() {
        return Err(Error::InvalidInput(
            "training CSV needs rho_* columns followed by parameter columns".into(),
        ));
    }
    let rest = &header[dim..];
    let n_var = rest.iter().filter(|h| h.starts_with("var_")).count();
    let labels = rest[..rest.len() - n_var].to_vec();
    let with_variance = n_var == labels.len()
        && labels
            .iter()
            .zip(&rest[labels.len()..])
            .all(|(l, v)| *v == format!("var_{l}"));
    if n_var > 0 && !with_variance {
        return Err(Error::InvalidInput(
            "training CSV variance columns must be var_<label> for every label".into(),
        ));
    }
    let n = labels.len();
    let sessions = rows
        .into_iter()
        .map(|row| SessionSummary {
            position: row[..dim].to_vec(),
            seed: 0,
            error_norms: Vec::new(),
            thetas: Vec::new(),
            observation: row[dim..dim + n].to_vec(),
            observation_variance: if with_variance {
                row[dim + n..].to_vec()
            } else {
                vec![0.0; n]
            },
            relative_change: f64::NAN,
            update_condition: f64::NAN,
        })
        .collect();
    Ok(TrainingData { labels, sessions })
}

/// Columns `rho_0, …, mean_<label>, variance_<label>, …`.
pub fn write_predictions_csv<W: Write>(
    mut w: W,
    labels: &[String],
    predictions: &Predictions,
) -> Result<()> {
    let dim = predictions.positions.first().map_or(0, |p| p.len());
    let mut header = position_header(dim);
    for l in labels {
        header.push(format!("mean_{l}"));
        header.push(format!("variance_{l}"));
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, p) in predictions.positions.iter().enumerate() {
        let stats = predictions.mean[i]
            .iter()
            .zip(&predictions.variance[i])
            .flat_map(|(m, v)| [*m, *v]);
        writeln!(w, "{},{}", join(p.iter()), join(stats))?;
    }
    Ok(())
}

/// Columns `rho_0, …, method, error_2norm, max_abs_error`.
pub fn write_summary_csv<W: Write>(mut w: W, report: &EvaluationReport) -> Result<()> {
    let dim = report.cells.first().map_or(0, |c| c.position.len());
    let mut header = position_header(dim);
    header.extend(["method", "error_2norm", "max_abs_error"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for c in &report.cells {
        writeln!(
            w,
            "{},{},{},{}",
            join(c.position.iter()),
            c.method.name(),
            c.error_2norm,
            c.max_abs_error
        )?;
    }
    Ok(())
}

fn read_numeric<R: BufRead>(r: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = r.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty CSV".into()))??
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!("line {}: `{s}` is not a number ({e})", i + 2))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::InvalidInput(format!(
                "line {} has {} fields, header has {}",
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
