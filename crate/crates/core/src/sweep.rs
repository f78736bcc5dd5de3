//! Grid runs written as CSV, one row per cell.

use std::io::Write;

use crate::error::{Error, Result};
use crate::metrics::{CsvRow, RunSummary};
use crate::schemes::SchemeKind;

/// Cells are visited scheme-major: every `g` for the first scheme, then the next.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SweepGrid {
    pub schemes: Vec<SchemeKind>,
    pub gs: Vec<usize>,
}

impl SweepGrid {
    pub fn cells(&self) -> impl Iterator<Item = (SchemeKind, usize)> + '_ {
        self.schemes.iter().flat_map(move |&s| self.gs.iter().map(move |&g| (s, g)))
    }

    pub fn len(&self) -> usize {
        self.schemes.len() * self.gs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Internal(format!("writing CSV: {io}")),
        other => Error::Internal(format!("writing CSV: {other:?}")),
    }
}

/// Runs every cell in order and writes the header plus one row per finished
/// cell. Rows are flushed as they complete, so a failing cell leaves the
/// rows before it in `out`. Returns the number of rows written.
pub fn run_sweep<W, F>(benchmark: &str, grid: &SweepGrid, out: W, mut run: F) -> Result<usize>
where
    W: Write,
    F: FnMut(SchemeKind, usize) -> Result<RunSummary>,
{
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CsvRow::HEADER).map_err(csv_err)?;
    w.flush().map_err(|e| Error::Internal(format!("writing CSV: {e}")))?;
    let mut rows = 0;
    for (scheme, g) in grid.cells() {
        let summary = run(scheme, g)?;
        w.serialize(CsvRow::new(benchmark, &summary)).map_err(csv_err)?;
        w.flush().map_err(|e| Error::Internal(format!("writing CSV: {e}")))?;
        rows += 1;
    }
    Ok(rows)
}
