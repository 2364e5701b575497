//! Per-chunk execution trace and its CSV form.
//!
//! Times are seconds since the start of the run, written with exactly nine
//! fractional digits, so nanosecond [`Duration`]s round-trip without loss.
//! `f_after` uses the shortest representation that parses back to the same
//! `f64`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::partitioner::{cpu_chunk_size, ResourceKind, SchedulerConfig};

pub const TRACE_HEADER: [&str; 11] = [
    "seq",
    "resource_kind",
    "resource_id",
    "begin",
    "end",
    "size",
    "t_start",
    "t_end",
    "duration",
    "f_after",
    "r_before",
];

/// One executed chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: u64,
    pub kind: ResourceKind,
    pub resource_id: usize,
    pub begin: usize,
    pub end: usize,
    pub t_start: Duration,
    pub t_end: Duration,
    /// Speed factor right after this chunk's timing was recorded.
    pub f_after: f64,
    /// Remaining iterations just before this chunk was claimed.
    pub r_before: usize,
}

impl TraceRecord {
    pub fn size(&self) -> usize {
        self.end - self.begin
    }

    pub fn duration(&self) -> Duration {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad trace header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("malformed trace row {row}: {reason}")]
    Row { row: u64, reason: String },
}

pub fn format_seconds(d: Duration) -> String {
    format!("{}.{:09}", d.as_secs(), d.subsec_nanos())
}

pub fn parse_seconds(s: &str) -> Option<Duration> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if whole.is_empty() || frac.len() > 9 || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let secs: u64 = whole.parse().ok()?;
    let nanos: u32 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<9}").parse().ok()?
    };
    Some(Duration::new(secs, nanos))
}

pub fn write_trace_to<W: Write>(records: &[TraceRecord], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.seq.to_string(),
            r.kind.to_string(),
            r.resource_id.to_string(),
            r.begin.to_string(),
            r.end.to_string(),
            r.size().to_string(),
            format_seconds(r.t_start),
            format_seconds(r.t_end),
            format_seconds(r.duration()),
            r.f_after.to_string(),
            r.r_before.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    let file = File::create(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_trace_to(records, BufWriter::new(file))
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace_to(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace CSV is ASCII")
}

/// Reads a trace. Row numbers in errors are file line numbers (header = 1).
pub fn read_trace_from<R: Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => {
            return Err(TraceError::Header {
                expected: TRACE_HEADER.join(","),
                found: String::new(),
            })
        }
    };
    if header.iter().ne(TRACE_HEADER) {
        return Err(TraceError::Header {
            expected: TRACE_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        out.push(parse_row(&row, line)?);
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_trace_from(file)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<TraceRecord, TraceError> {
    let bad = |reason: String| TraceError::Row { row: line, reason };
    if row.len() != TRACE_HEADER.len() {
        return Err(bad(format!(
            "expected {} fields, found {}",
            TRACE_HEADER.len(),
            row.len()
        )));
    }
    let field = |i: usize| row.get(i).unwrap_or("");
    let int = |i: usize| -> Result<u64, TraceError> {
        field(i)
            .parse::<u64>()
            .map_err(|_| bad(format!("{} is not an integer: `{}`", TRACE_HEADER[i], field(i))))
    };
    let secs = |i: usize| -> Result<Duration, TraceError> {
        parse_seconds(field(i))
            .ok_or_else(|| bad(format!("{} is not a time: `{}`", TRACE_HEADER[i], field(i))))
    };
    let kind = match field(1) {
        "CC" => ResourceKind::Cc,
        "FC" => ResourceKind::Fc,
        other => return Err(bad(format!("unknown resource_kind `{other}`"))),
    };
    let rec = TraceRecord {
        seq: int(0)?,
        kind,
        resource_id: int(2)? as usize,
        begin: int(3)? as usize,
        end: int(4)? as usize,
        t_start: secs(6)?,
        t_end: secs(7)?,
        f_after: field(9)
            .parse::<f64>()
            .map_err(|_| bad(format!("f_after is not a number: `{}`", field(9))))?,
        r_before: int(10)? as usize,
    };
    if rec.end < rec.begin {
        return Err(bad("end precedes begin".into()));
    }
    if int(5)? as usize != rec.size() {
        return Err(bad("size does not equal end - begin".into()));
    }
    if rec.t_end < rec.t_start {
        return Err(bad("t_end precedes t_start".into()));
    }
    if secs(8)? != rec.duration() {
        return Err(bad("duration does not equal t_end - t_start".into()));
    }
    Ok(rec)
}

/// Checks that the records tile `[begin, end)` exactly. Returns a description
/// of the first gap or overlap.
pub fn check_coverage(records: &[TraceRecord], begin: usize, end: usize) -> Result<(), String> {
    let mut ranges: Vec<_> = records.iter().map(|r| (r.begin, r.end)).collect();
    ranges.sort_unstable();
    let mut cursor = begin;
    for (b, e) in ranges {
        if b >= e {
            return Err(format!("empty chunk [{b}, {e})"));
        }
        match b.cmp(&cursor) {
            std::cmp::Ordering::Less => return Err(format!("overlap at {b}")),
            std::cmp::Ordering::Greater => return Err(format!("gap [{cursor}, {b})")),
            std::cmp::Ordering::Equal => cursor = e,
        }
    }
    if cursor != end {
        return Err(format!("gap [{cursor}, {end})"));
    }
    Ok(())
}

/// Speed factor each record's chunk was sized with: the `f_after` of the same
/// token's previous chunk, or `f_init` for its first chunk. Records must be
/// in issue (`seq`) order.
pub fn factors_at_issue(records: &[TraceRecord], f_init: f64) -> Vec<f64> {
    let mut last = std::collections::HashMap::new();
    records
        .iter()
        .map(|r| {
            let f = *last.get(&(r.kind, r.resource_id)).unwrap_or(&f_init);
            last.insert((r.kind, r.resource_id), r.f_after);
            f
        })
        .collect()
}

/// Re-derives every CPU chunk size from the trace. Returns the seqs whose
/// recorded size disagrees with the partitioner formula.
pub fn replay_mismatches(records: &[TraceRecord], cfg: &SchedulerConfig) -> Vec<u64> {
    let f_issue = factors_at_issue(records, cfg.f_init);
    records
        .iter()
        .zip(f_issue)
        .filter(|(r, _)| r.kind == ResourceKind::Cc)
        .filter(|(r, f)| cpu_chunk_size(cfg, r.r_before, *f) != r.size())
        .map(|(r, _)| r.seq)
        .collect()
}
