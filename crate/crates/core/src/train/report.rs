//! CSV outputs of training and evaluation runs.

use std::path::Path;

use crate::error::{Error, Result};

use super::eval::EvalSummary;
use super::experiment::{CompareRow, SweepRow};
use super::EpochLog;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch, train_loss, val_loss, lr`, one row per epoch.
pub fn write_train_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "train_loss", "val_loss", "lr"],
        epochs.iter().map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string(), e.lr.to_string()]),
    )
}

/// `sample_id, loss, MA, IU, DC, flags`, one row per sample and a final
/// `all` row computed from the summed counts.
pub fn write_metrics_csv(path: &Path, eval: &EvalSummary) -> Result<()> {
    let rows = eval
        .rows
        .iter()
        .map(|r| (r.sample_id.clone(), r.loss, r.metrics))
        .chain(std::iter::once(("all".to_string(), eval.mean_loss, eval.metrics)))
        .map(|(id, loss, m)| {
            vec![id, loss.to_string(), m.ma.value.to_string(), m.iu.value.to_string(), m.dc.value.to_string(), m.flags()]
        });
    write_rows(path, &["sample_id", "loss", "MA", "IU", "DC", "flags"], rows)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    write_rows(
        path,
        &["model", "loss", "MA", "IU", "DC", "params", "train_s", "apply_s", "memory_bytes"],
        rows.iter().map(|r| {
            vec![
                r.model.to_string(),
                r.loss.to_string(),
                r.ma.to_string(),
                r.iu.to_string(),
                r.dc.to_string(),
                r.params.to_string(),
                format!("{:.3}", r.train_seconds),
                format!("{:.3}", r.apply_seconds),
                r.memory_bytes.to_string(),
            ]
        }),
    )
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(
        path,
        &["p", "loss", "MA", "IU", "DC"],
        rows.iter().map(|r| vec![r.p.to_string(), r.loss.to_string(), r.ma.to_string(), r.iu.to_string(), r.dc.to_string()]),
    )
}
