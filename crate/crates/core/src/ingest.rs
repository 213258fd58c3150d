//! Web access log ingestion.
//!
//! Lines follow the NCSA Combined Log Format:
//!
//! ```text
//! host ident authuser [dd/Mon/yyyy:HH:MM:SS +zzzz] "request" status bytes "referer" "user-agent"
//! ```
//!
//! `ident`, `authuser` and `bytes` are checked and dropped. Quoted fields
//! accept `\"`, `\\`, `\n`, `\r`, `\t` and `\xHH` escapes unless
//! [`ParseOptions::strict`] is set. Fields after the user agent are ignored.

use std::fmt;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use chrono::{DateTime, Datelike, FixedOffset, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::WebLogData;
use crate::codec;
use crate::identity::Credential;
use crate::netsim::{AppendOutcome, AppendSink};

const DATE_FORMAT: &str = "%d/%b/%Y:%H:%M:%S %z";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("missing {0}")]
    MissingField(&'static str),
    #[error("bad bracket: {0}")]
    BadBracket(&'static str),
    #[error("unbalanced quotes in {0}")]
    UnbalancedQuote(&'static str),
    #[error("bad escape sequence")]
    BadEscape,
    #[error("non-numeric status {0:?}")]
    NonNumericStatus(String),
    #[error("status {0} outside 100..=599")]
    StatusOutOfRange(u16),
    #[error("non-numeric byte count {0:?}")]
    BadByteCount(String),
    #[error("invalid date {0:?}")]
    InvalidDate(String),
    #[error("date {0:?} outside years 1970..=9999")]
    DateOutOfRange(String),
    #[error("invalid address {0:?}")]
    InvalidAddress(String),
    #[error("expected a space between fields")]
    ExpectedSpace,
    #[error("line is not valid UTF-8")]
    InvalidUtf8,
}

/// A rejected line. `column` is 1-based and counts bytes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {kind}")]
pub struct ParseError {
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Treat backslashes in quoted fields literally.
    pub strict: bool,
}

struct Cursor<'a> {
    line: &'a str,
    pos: usize,
    options: ParseOptions,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, kind: ParseErrorKind) -> Result<T, ParseError> {
        Err(ParseError { column: self.pos + 1, kind })
    }

    fn rest(&self) -> &'a str {
        &self.line[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.line.len()
    }

    /// Separator before `next`.
    fn space(&mut self, next: &'static str) -> Result<(), ParseError> {
        if self.at_end() {
            return self.err(ParseErrorKind::MissingField(next));
        }
        if !self.rest().starts_with(' ') {
            return self.err(ParseErrorKind::ExpectedSpace);
        }
        while self.rest().starts_with(' ') {
            self.pos += 1;
        }
        Ok(())
    }

    /// A run of non-space characters.
    fn token(&mut self, field: &'static str) -> Result<(&'a str, usize), ParseError> {
        let start = self.pos;
        let len = self.rest().find(' ').unwrap_or(self.rest().len());
        if len == 0 {
            return self.err(ParseErrorKind::MissingField(field));
        }
        self.pos += len;
        Ok((&self.line[start..start + len], start))
    }

    fn bracketed(&mut self) -> Result<(&'a str, usize), ParseError> {
        if !self.rest().starts_with('[') {
            return self.err(ParseErrorKind::BadBracket("expected '['"));
        }
        let start = self.pos + 1;
        let Some(len) = self.line[start..].find(']') else {
            return self.err(ParseErrorKind::BadBracket("no closing ']'"));
        };
        self.pos = start + len + 1;
        Ok((&self.line[start..start + len], start))
    }

    fn quoted(&mut self, field: &'static str) -> Result<(String, usize), ParseError> {
        if self.at_end() {
            return self.err(ParseErrorKind::MissingField(field));
        }
        if !self.rest().starts_with('"') {
            return self.err(ParseErrorKind::UnbalancedQuote(field));
        }
        let start = self.pos + 1;
        let bytes = self.line.as_bytes();
        let mut out = Vec::new();
        let mut i = start;
        loop {
            match bytes.get(i) {
                None => {
                    self.pos = start - 1;
                    return self.err(ParseErrorKind::UnbalancedQuote(field));
                }
                Some(b'"') => break,
                Some(b'\\') if !self.options.strict => {
                    let decoded = match bytes.get(i + 1) {
                        Some(b'"') => Some((b'"', 2)),
                        Some(b'\\') => Some((b'\\', 2)),
                        Some(b'n') => Some((b'\n', 2)),
                        Some(b'r') => Some((b'\r', 2)),
                        Some(b't') => Some((b'\t', 2)),
                        Some(b'x') => bytes
                            .get(i + 2..i + 4)
                            .and_then(|h| std::str::from_utf8(h).ok())
                            .filter(|h| h.bytes().all(|b| b.is_ascii_hexdigit()))
                            .and_then(|h| u8::from_str_radix(h, 16).ok())
                            .map(|b| (b, 4)),
                        _ => None,
                    };
                    let Some((byte, width)) = decoded else {
                        self.pos = i;
                        return self.err(ParseErrorKind::BadEscape);
                    };
                    out.push(byte);
                    i += width;
                }
                Some(&b) => {
                    out.push(b);
                    i += 1;
                }
            }
        }
        self.pos = i + 1;
        match String::from_utf8(out) {
            Ok(s) => Ok((s, start)),
            Err(_) => {
                self.pos = start;
                self.err(ParseErrorKind::BadEscape)
            }
        }
    }
}

fn fail<T>(column: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
    Err(ParseError { column: column + 1, kind })
}

/// URI of a `METHOD URI [PROTOCOL]` request line; any other request text is
/// kept whole, and `-` becomes empty.
fn request_url(request: &str) -> String {
    let parts: Vec<&str> = request.split(' ').collect();
    match parts.as_slice() {
        ["-"] => String::new(),
        [method, uri] | [method, uri, _] if !method.is_empty() && !uri.is_empty() => uri.to_string(),
        _ => request.to_string(),
    }
}

fn parse_datetime(text: &str, column: usize) -> Result<u64, ParseError> {
    let parsed = DateTime::parse_from_str(text, DATE_FORMAT)
        .or_else(|_| fail(column, ParseErrorKind::InvalidDate(text.into())))?;
    let utc = parsed.with_timezone(&Utc);
    if !(1970..=9999).contains(&utc.year()) {
        return fail(column, ParseErrorKind::DateOutOfRange(text.into()));
    }
    Ok(utc.timestamp_millis() as u64)
}

pub fn parse_combined_log_line(line: &str) -> Result<WebLogData, ParseError> {
    parse_combined_log_line_with(line, ParseOptions::default())
}

/// Parses one line into an asset with an empty `asset_id`.
pub fn parse_combined_log_line_with(line: &str, options: ParseOptions) -> Result<WebLogData, ParseError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut c = Cursor { line, pos: 0, options };

    let (host, host_at) = c.token("host")?;
    if host.parse::<std::net::IpAddr>().is_err() {
        return fail(host_at, ParseErrorKind::InvalidAddress(host.into()));
    }
    c.space("ident")?;
    c.token("ident")?;
    c.space("authuser")?;
    c.token("authuser")?;
    c.space("timestamp")?;
    let (date, date_at) = c.bracketed()?;
    let datetime = parse_datetime(date, date_at)?;
    c.space("request")?;
    let (request, _) = c.quoted("request")?;
    c.space("status")?;
    let (status, status_at) = c.token("status")?;
    let return_code: u16 = match status.parse() {
        Ok(code) if status.bytes().all(|b| b.is_ascii_digit()) => code,
        _ => return fail(status_at, ParseErrorKind::NonNumericStatus(status.into())),
    };
    if !(100..=599).contains(&return_code) {
        return fail(status_at, ParseErrorKind::StatusOutOfRange(return_code));
    }
    c.space("bytes")?;
    let (bytes, bytes_at) = c.token("bytes")?;
    if bytes != "-" && !bytes.bytes().all(|b| b.is_ascii_digit()) {
        return fail(bytes_at, ParseErrorKind::BadByteCount(bytes.into()));
    }
    c.space("referer")?;
    let (referer, _) = c.quoted("referer")?;
    c.space("user-agent")?;
    let (user_agent, _) = c.quoted("user-agent")?;
    if !c.at_end() {
        c.space("trailer")?;
    }

    Ok(WebLogData {
        asset_id: String::new(),
        url: request_url(&request),
        referer: if referer == "-" { String::new() } else { referer },
        return_code,
        user_agent,
        datetime,
        ip: host.to_string(),
    })
}

fn escape_field(value: &str) -> String {
    let mut out = String::with_capacity(value.len() + 2);
    for ch in value.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_ascii_control() => out.push_str(&format!("\\x{:02X}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Formats an asset as a Combined Log Format line. Millisecond precision is
/// lost; `url` must not contain spaces and `referer` must not be `-`.
pub fn format_combined_log_line(asset: &WebLogData, offset_seconds: i32, bytes: u64) -> String {
    let tz = FixedOffset::east_opt(offset_seconds).unwrap_or(FixedOffset::east_opt(0).expect("zero offset"));
    let when = tz
        .timestamp_millis_opt(asset.datetime as i64)
        .single()
        .expect("datetime within chrono range")
        .format(DATE_FORMAT);
    let referer = if asset.referer.is_empty() { "-".to_string() } else { escape_field(&asset.referer) };
    format!(
        "{} - - [{when}] \"GET {} HTTP/1.1\" {} {bytes} \"{referer}\" \"{}\"",
        asset.ip,
        escape_field(&asset.url),
        asset.return_code,
        escape_field(&asset.user_agent)
    )
}

/// First 16 bytes, hex, of SHA-256 over the canonical asset with an empty id.
pub fn derive_asset_id(asset: &WebLogData) -> String {
    let mut anonymous = asset.clone();
    anonymous.asset_id.clear();
    let digest = codec::digest_of(&anonymous);
    hex::encode(&digest.0[..16])
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub line_number: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub lines_read: u64,
    pub parsed_ok: u64,
    pub parse_failed: u64,
    pub submitted: u64,
    pub committed_valid: u64,
    pub rejected_duplicates: u64,
    /// Submitted but refused for any other reason.
    pub rejected_other: u64,
    pub failures: Vec<IngestFailure>,
}

impl IngestReport {
    /// The counting identities every report satisfies.
    pub fn reconciles(&self) -> bool {
        self.lines_read == self.parsed_ok + self.parse_failed
            && self.submitted <= self.parsed_ok
            && self.committed_valid + self.rejected_duplicates + self.rejected_other == self.submitted
    }

    pub fn to_canonical(&self) -> String {
        codec::to_canonical_string(self)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (label, value) in [
            ("lines read", self.lines_read),
            ("parsed ok", self.parsed_ok),
            ("parse failed", self.parse_failed),
            ("submitted", self.submitted),
            ("committed valid", self.committed_valid),
            ("rejected duplicates", self.rejected_duplicates),
            ("rejected other", self.rejected_other),
        ] {
            out.push_str(&format!("{label:<20} {value}\n"));
        }
        for f in &self.failures {
            out.push_str(&format!("line {}: {}\n", f.line_number, f.reason));
        }
        out
    }

    fn absorb(&mut self, outcomes: &[AppendOutcome], line_numbers: &[u64]) {
        for (outcome, line_number) in outcomes.iter().zip(line_numbers) {
            if outcome.is_committed() {
                self.committed_valid += 1;
            } else if outcome.is_duplicate() {
                self.rejected_duplicates += 1;
            } else {
                self.rejected_other += 1;
                self.failures.push(IngestFailure { line_number: *line_number, reason: format!("{outcome:?}") });
            }
        }
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable { path: String, source: io::Error },
    #[error("submission failed after {} lines: {reason}", report.lines_read)]
    SubmissionFailure { report: IngestReport, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub batch_size: usize,
    pub parse: ParseOptions,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { batch_size: 100, parse: ParseOptions::default() }
    }
}

pub fn ingest_file(
    path: &Path,
    credential: &Credential,
    sink: &mut dyn AppendSink,
    batch_size: usize,
) -> Result<IngestReport, IngestError> {
    ingest_file_with(path, credential, sink, IngestOptions { batch_size, ..IngestOptions::default() })
}

pub fn ingest_file_with(
    path: &Path,
    credential: &Credential,
    sink: &mut dyn AppendSink,
    options: IngestOptions,
) -> Result<IngestReport, IngestError> {
    let unreadable = |source| IngestError::FileUnreadable { path: path.display().to_string(), source };
    let file = fs::File::open(path).map_err(unreadable)?;
    ingest_reader(io::BufReader::new(file), credential, sink, options).map_err(|e| match e {
        IngestError::FileUnreadable { source, .. } => unreadable(source),
        other => other,
    })
}

/// Parses lines from `reader` and submits them in batches, in file order.
/// Blank lines are skipped without being counted.
pub fn ingest_reader<R: BufRead>(
    mut reader: R,
    credential: &Credential,
    sink: &mut dyn AppendSink,
    options: IngestOptions,
) -> Result<IngestReport, IngestError> {
    let batch_size = options.batch_size.max(1);
    let mut report = IngestReport::default();
    let mut batch: Vec<WebLogData> = Vec::with_capacity(batch_size);
    let mut batch_lines: Vec<u64> = Vec::with_capacity(batch_size);
    let mut buf = Vec::new();
    let mut line_number = 0u64;

    let mut flush = |batch: &mut Vec<WebLogData>, lines: &mut Vec<u64>, report: &mut IngestReport| {
        if batch.is_empty() {
            return Ok(());
        }
        report.submitted += batch.len() as u64;
        match sink.append_batch(credential, batch) {
            Ok(outcomes) => {
                report.absorb(&outcomes, lines);
                batch.clear();
                lines.clear();
                Ok(())
            }
            Err(e) => {
                report.submitted -= batch.len() as u64;
                Err(e.to_string())
            }
        }
    };

    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| IngestError::FileUnreadable { path: String::new(), source })?;
        if n == 0 {
            break;
        }
        line_number += 1;
        let raw = buf.strip_suffix(b"\n").unwrap_or(&buf);
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        report.lines_read += 1;
        let parsed = std::str::from_utf8(raw)
            .map_err(|e| ParseError { column: e.valid_up_to() + 1, kind: ParseErrorKind::InvalidUtf8 })
            .and_then(|line| parse_combined_log_line_with(line, options.parse));
        match parsed {
            Ok(mut asset) => {
                report.parsed_ok += 1;
                asset.asset_id = derive_asset_id(&asset);
                batch.push(asset);
                batch_lines.push(line_number);
            }
            Err(e) => {
                report.parse_failed += 1;
                log::debug!("line {line_number}: {e}");
                report.failures.push(IngestFailure { line_number, reason: e.to_string() });
            }
        }
        if batch.len() >= batch_size {
            if let Err(reason) = flush(&mut batch, &mut batch_lines, &mut report) {
                return Err(IngestError::SubmissionFailure { report, reason });
            }
        }
    }
    if let Err(reason) = flush(&mut batch, &mut batch_lines, &mut report) {
        return Err(IngestError::SubmissionFailure { report, reason });
    }
    Ok(report)
}
