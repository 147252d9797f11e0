use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::CliError;
use crate::analysis::TraceSeries;
use crate::flow::FlowRecord;

pub const TRACE_HEADER: [&str; 9] = ["tau", "J", "L", "reg", "slope", "support_radius", "dirichlet", "step_size", "accepted"];

/// 17 significant digits, so values survive a text round trip.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Streams records to `trace.csv` as they are produced.
pub(crate) struct TraceWriter {
    inner: csv::Writer<BufWriter<File>>,
    error: Option<String>,
}

impl TraceWriter {
    pub(crate) fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut inner = csv::Writer::from_writer(BufWriter::new(file));
        inner.write_record(TRACE_HEADER).map_err(|e| CliError::Io(e.to_string()))?;
        Ok(Self { inner, error: None })
    }

    pub(crate) fn push(&mut self, r: &FlowRecord) {
        if self.error.is_some() {
            return;
        }
        let row = [
            num(r.tau),
            num(r.j),
            num(r.loss),
            num(r.regularizer),
            num(r.slope),
            num(r.support_radius),
            num(r.dirichlet),
            num(r.step_size),
            u8::from(r.accepted).to_string(),
        ];
        if let Err(e) = self.inner.write_record(&row).and_then(|_| self.inner.flush().map_err(Into::into)) {
            self.error = Some(e.to_string());
        }
    }

    pub(crate) fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(CliError::Io(e));
        }
        self.inner.flush().map_err(|e| CliError::Io(e.to_string()))
    }
}

/// Reads the `tau`, `J` and `slope` columns of a trace file.
pub fn read_trace_csv(path: &Path) -> Result<TraceSeries, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let (ti, ji, si) = (column("tau")?, column("J")?, column("slope")?);
    let mut series = TraceSeries::default();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| -> Result<f64, CliError> {
            row.get(i)
                .ok_or_else(|| bad(format!("row {} is short", line + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: {e}", line + 1)))
        };
        series.tau.push(field(ti)?);
        series.j.push(field(ji)?);
        series.slope.push(field(si)?);
    }
    Ok(series)
}
