//! Per-epoch metrics files and their CSV export.
//!
//! A metrics file holds one `epoch=N train_loss=X test_accuracy=Y` line per
//! epoch; blank lines and `#` comments are ignored. Accuracy is a fraction.

use std::fmt::Write as _;

use ghvit::train::EpochMetrics;

pub const CSV_HEADER: &str = "epoch,train_loss,test_accuracy";

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("line {line}: {detail}")]
pub struct MetricsError {
    pub line: usize,
    pub detail: String,
}

pub fn format_metrics(history: &[EpochMetrics]) -> String {
    let mut out = String::from("# epoch train_loss test_accuracy\n");
    for m in history {
        let _ = writeln!(
            out,
            "epoch={} train_loss={} test_accuracy={}",
            m.epoch, m.train_loss, m.test_accuracy
        );
    }
    out
}

fn number<T: std::str::FromStr>(text: &str, field: &str, line: usize) -> Result<T, MetricsError> {
    text.parse().map_err(|_| MetricsError {
        line,
        detail: format!("`{text}` is not a valid {field}"),
    })
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochMetrics>, MetricsError> {
    let mut history = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let malformed = || MetricsError {
            line,
            detail: format!("expected `epoch=N train_loss=X test_accuracy=Y`, got `{body}`"),
        };
        if fields.len() != 3 {
            return Err(malformed());
        }
        let value = |slot: usize, key: &str| -> Result<&str, MetricsError> {
            fields[slot]
                .strip_prefix(key)
                .and_then(|f| f.strip_prefix('='))
                .ok_or_else(malformed)
        };
        history.push(EpochMetrics {
            epoch: number(value(0, "epoch")?, "epoch", line)?,
            train_loss: number(value(1, "train_loss")?, "train_loss", line)?,
            test_accuracy: number(value(2, "test_accuracy")?, "test_accuracy", line)?,
        });
    }
    Ok(history)
}

pub fn to_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for m in history {
        let _ = writeln!(out, "{},{},{}", m.epoch, m.train_loss, m.test_accuracy);
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<EpochMetrics>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        other => {
            return Err(MetricsError {
                line: 1,
                detail: format!("expected header `{CSV_HEADER}`, got `{}`", other.map_or("", |(_, h)| h)),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, row)| {
            let line = index + 1;
            let cells: Vec<&str> = row.trim().split(',').collect();
            let [epoch, loss, acc] = cells[..] else {
                return Err(MetricsError {
                    line,
                    detail: format!("expected 3 columns, got {}", cells.len()),
                });
            };
            Ok(EpochMetrics {
                epoch: number(epoch, "epoch", line)?,
                train_loss: number(loss, "train_loss", line)?,
                test_accuracy: number(acc, "test_accuracy", line)?,
            })
        })
        .collect()
}
