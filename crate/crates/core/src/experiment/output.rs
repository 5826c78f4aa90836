use std::path::Path;

use serde_json::json;

use crate::diffusion::CHECKPOINT_FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::forge::ForgeResult;

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Package and format versions. Deliberately free of timestamps and host
/// details so reruns produce identical bytes.
pub fn versions_json() -> String {
    let v = json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
    });
    serde_json::to_string_pretty(&v).expect("static json")
}

/// Echoes the resolved inputs of a command and stamps versions.
pub fn write_run_metadata(dir: &Path, resolved: &serde_json::Value) -> Result<()> {
    write_file(&dir.join("resolved_config.json"), &serde_json::to_string_pretty(resolved)?)?;
    write_file(&dir.join("versions.json"), &versions_json())
}

fn to_csv(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `epoch,loss`, epochs counted from 1.
pub fn loss_csv(curve: &[f64]) -> Result<String> {
    to_csv(
        &["epoch".into(), "loss".into()],
        curve
            .iter()
            .enumerate()
            .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )
}

/// `x0,x1,...` for a point set.
pub fn points_csv(points: &[Vec<f64>]) -> Result<String> {
    let d = points.first().map_or(0, Vec::len);
    to_csv(
        &(0..d).map(|j| format!("x{j}")).collect::<Vec<_>>(),
        points.iter().map(|p| p.iter().map(f64::to_string).collect()),
    )
}

/// `step,e0,e1,...`: the token embedding after every step, 0 being the
/// initialization.
pub fn token_snapshots_csv(result: &ForgeResult) -> Result<String> {
    let d = result.embedding_trajectory[0].len();
    let mut header = vec!["step".to_string()];
    header.extend((0..d).map(|j| format!("e{j}")));
    to_csv(
        &header,
        result.embedding_trajectory.iter().enumerate().map(|(k, e)| {
            let mut row = vec![k.to_string()];
            row.extend(e.iter().map(f64::to_string));
            row
        }),
    )
}
