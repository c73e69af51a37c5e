//! Per-head selection-count grids, exported as CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::{RunMeta, SelectionTrace};

/// Counts indexed `[layer * n_heads + head][chunk]`.
pub fn selection_grid(trace: &SelectionTrace, m: usize) -> Result<Vec<Vec<u64>>> {
    let (layers, heads) = (trace.meta.n_layers, trace.meta.n_heads);
    let mut grid = vec![vec![0u64; m]; layers * heads];
    for r in &trace.records {
        if r.layer >= layers || r.head >= heads {
            return Err(Error::Precondition(format!(
                "record for layer {} head {} outside a {layers}x{heads} trace",
                r.layer, r.head
            )));
        }
        let row = &mut grid[r.layer * heads + r.head];
        for &c in &r.chunks {
            if c >= m {
                return Err(Error::UnknownChunk { chunk: c, sealed: m });
            }
            row[c] += 1;
        }
    }
    Ok(grid)
}

/// CSV with header `layer,head,c0,...,c{m-1}` and one row per (layer, head).
pub fn heatmap_csv(trace: &SelectionTrace, m: usize) -> Result<String> {
    let grid = selection_grid(trace, m)?;
    let mut out = String::from("layer,head");
    for c in 0..m {
        write!(out, ",c{c}").unwrap();
    }
    out.push('\n');
    let heads = trace.meta.n_heads;
    for (i, row) in grid.iter().enumerate() {
        write!(out, "{},{}", i / heads, i % heads).unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct HeatmapMeta<'a> {
    #[serde(flatten)]
    run: &'a RunMeta,
    columns: usize,
    rows: usize,
}

/// Writes the CSV to `path` and the run metadata next to it as `<stem>.json`.
pub fn export_heatmap(trace: &SelectionTrace, m: usize, path: &Path) -> Result<()> {
    let csv = heatmap_csv(trace, m)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let meta = HeatmapMeta {
        run: &trace.meta,
        columns: m,
        rows: trace.meta.n_layers * trace.meta.n_heads,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        context: "heatmap metadata".into(),
        source,
    })?;
    let meta_path = path.with_extension("json");
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}
