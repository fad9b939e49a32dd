//! CSV and JSON serialization of study records.
//!
//! Floats are written with 17 significant digits (`{:.16e}`) so every value
//! reads back bit-for-bit. Non-finite values are written as `inf`, `-inf`
//! and `nan`; a missing optional value is an empty CSV field or JSON `null`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::approximations::ApproximationKind;
use crate::error::{Error, Result};
use crate::experiments::{ConditionRecord, DiggingInRecord, FitPoint, FitReport, StudyOutputs};
use crate::oracle::CompositionChain;

/// Formats a float with 17 significant digits.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}

/// Serde helper for `f64` fields: numbers when finite, strings otherwise.
pub mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Number(x) => Ok(x),
            Repr::Text(s) => super::parse_float(&s).ok_or_else(|| E::custom(format!("not a float: `{s}`"))),
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&super::format_float(*x))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match x {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

/// A record type with a fixed CSV column layout.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];

    fn to_fields(&self) -> Vec<String>;

    fn from_row(row: &Row<'_>) -> Result<Self>;
}

/// One CSV data row with its columns resolved by name.
pub struct Row<'a> {
    header: &'static [&'static str],
    positions: &'a [usize],
    record: &'a csv::StringRecord,
    line: u64,
}

impl Row<'_> {
    fn error(&self, column: &str, message: impl Into<String>) -> Error {
        Error::Record {
            line: self.line,
            column: column.into(),
            message: message.into(),
        }
    }

    pub fn text(&self, column: &str) -> Result<&str> {
        let idx = self
            .header
            .iter()
            .position(|c| *c == column)
            .ok_or_else(|| self.error(column, "unknown column"))?;
        self.record
            .get(self.positions[idx])
            .ok_or_else(|| self.error(column, "missing field"))
    }

    pub fn float(&self, column: &str) -> Result<f64> {
        let s = self.text(column)?;
        parse_float(s).ok_or_else(|| self.error(column, format!("not a float: `{s}`")))
    }

    pub fn opt_float(&self, column: &str) -> Result<Option<f64>> {
        match self.text(column)? {
            "" => Ok(None),
            _ => self.float(column).map(Some),
        }
    }

    pub fn int<T: std::str::FromStr>(&self, column: &str) -> Result<T> {
        let s = self.text(column)?;
        s.trim()
            .parse()
            .map_err(|_| self.error(column, format!("not an integer: `{s}`")))
    }

    pub fn opt_int<T: std::str::FromStr>(&self, column: &str) -> Result<Option<T>> {
        match self.text(column)? {
            "" => Ok(None),
            _ => self.int(column).map(Some),
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

impl CsvRow for ConditionRecord {
    const HEADER: &'static [&'static str] = &[
        "experiment",
        "context",
        "q1",
        "q2",
        "n",
        "step",
        "mean_surprisal",
        "stdev",
        "stderr",
        "absorbed_fraction",
        "failed_fraction",
        "trials",
        "pred_second_order",
        "pred_linear_diffusion",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            self.context.clone(),
            format_float(self.q1),
            format_float(self.q2),
            self.n.to_string(),
            self.step.to_string(),
            format_float(self.mean_surprisal),
            format_float(self.stdev),
            format_float(self.stderr),
            format_float(self.absorbed_fraction),
            format_float(self.failed_fraction),
            self.trials.to_string(),
            opt(self.pred_second_order),
            opt(self.pred_linear_diffusion),
        ]
    }

    fn from_row(row: &Row<'_>) -> Result<Self> {
        Ok(ConditionRecord {
            experiment: row.text("experiment")?.to_string(),
            context: row.text("context")?.to_string(),
            q1: row.float("q1")?,
            q2: row.float("q2")?,
            n: row.int("n")?,
            step: row.int("step")?,
            mean_surprisal: row.float("mean_surprisal")?,
            stdev: row.float("stdev")?,
            stderr: row.float("stderr")?,
            absorbed_fraction: row.float("absorbed_fraction")?,
            failed_fraction: row.float("failed_fraction")?,
            trials: row.int("trials")?,
            pred_second_order: row.opt_float("pred_second_order")?,
            pred_linear_diffusion: row.opt_float("pred_linear_diffusion")?,
        })
    }
}

impl CsvRow for DiggingInRecord {
    const HEADER: &'static [&'static str] = &[
        "experiment",
        "q1",
        "q2",
        "n",
        "short_step",
        "long_step",
        "gp_short",
        "gp_short_stderr",
        "gp_long",
        "gp_long_stderr",
        "digging_in",
        "digging_in_stderr",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            format_float(self.q1),
            format_float(self.q2),
            self.n.map(|n| n.to_string()).unwrap_or_default(),
            self.short_step.to_string(),
            self.long_step.to_string(),
            format_float(self.gp_short),
            format_float(self.gp_short_stderr),
            format_float(self.gp_long),
            format_float(self.gp_long_stderr),
            format_float(self.digging_in),
            format_float(self.digging_in_stderr),
        ]
    }

    fn from_row(row: &Row<'_>) -> Result<Self> {
        Ok(DiggingInRecord {
            experiment: row.text("experiment")?.to_string(),
            q1: row.float("q1")?,
            q2: row.float("q2")?,
            n: row.opt_int("n")?,
            short_step: row.int("short_step")?,
            long_step: row.int("long_step")?,
            gp_short: row.float("gp_short")?,
            gp_short_stderr: row.float("gp_short_stderr")?,
            gp_long: row.float("gp_long")?,
            gp_long_stderr: row.float("gp_long_stderr")?,
            digging_in: row.float("digging_in")?,
            digging_in_stderr: row.float("digging_in_stderr")?,
        })
    }
}

impl CsvRow for FitPoint {
    const HEADER: &'static [&'static str] = &[
        "kind",
        "experiment",
        "context",
        "q1",
        "q2",
        "n",
        "step",
        "true_delta",
        "predicted_delta",
    ];

    fn to_fields(&self) -> Vec<String> {
        vec![
            self.kind.as_str().to_string(),
            self.experiment.clone(),
            self.context.clone(),
            format_float(self.q1),
            format_float(self.q2),
            self.n.to_string(),
            self.step.to_string(),
            format_float(self.true_delta),
            format_float(self.predicted_delta),
        ]
    }

    fn from_row(row: &Row<'_>) -> Result<Self> {
        let kind: ApproximationKind = row
            .text("kind")?
            .parse()
            .map_err(|e: Error| row.error("kind", e.to_string()))?;
        Ok(FitPoint {
            kind,
            experiment: row.text("experiment")?.to_string(),
            context: row.text("context")?.to_string(),
            q1: row.float("q1")?,
            q2: row.float("q2")?,
            n: row.int("n")?,
            step: row.int("step")?,
            true_delta: row.float("true_delta")?,
            predicted_delta: row.float("predicted_delta")?,
        })
    }
}

/// Writes a header line and one line per row. An empty slice gives a
/// header-only file.
pub fn write_csv<T: CsvRow, W: Write>(rows: &[T], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.write_record(row.to_fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows by column name; extra columns are ignored.
pub fn read_csv<T: CsvRow, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let positions = T::HEADER
        .iter()
        .map(|name| {
            header.iter().position(|h| h == *name).ok_or_else(|| Error::Record {
                line: 1,
                column: name.to_string(),
                message: "column missing from header".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        out.push(T::from_row(&Row {
            header: T::HEADER,
            positions: &positions,
            record: &record,
            line: i as u64 + 2,
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(value: &T, mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, R: Read>(reader: R) -> Result<T> {
    Ok(serde_json::from_reader(reader)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// JSON for a `.json` extension, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes records as CSV or as a JSON array.
pub fn emit_records<T: CsvRow + Serialize>(rows: &[T], path: &Path, format: Format) -> Result<()> {
    let w = create(path)?;
    match format {
        Format::Csv => write_csv(rows, w),
        Format::Json => write_json(rows, w),
    }
}

pub fn load_records<T: CsvRow + DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)?;
    match Format::from_path(path) {
        Format::Csv => read_csv(f),
        Format::Json => read_json(f),
    }
}

pub fn emit_report(report: &FitReport, path: &Path) -> Result<()> {
    write_json(report, create(path)?)
}

/// Writes every transition with its probability, one line per nonzero entry.
pub fn write_chain_csv<W: Write>(chain: &CompositionChain, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["from_index", "from_counts", "to_index", "to_counts", "probability"])?;
    let counts = |s: &[u64]| s.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
    for i in 0..chain.len() {
        for (j, p) in chain.row(i) {
            w.write_record([
                i.to_string(),
                counts(chain.state(i)),
                j.to_string(),
                counts(chain.state(j)),
                format_float(p),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const TRAJECTORIES_FILE: &str = "fig1_trajectories.csv";
pub const DIGGING_IN_TOP_FILE: &str = "fig2_top_surprisal.csv";
pub const DIGGING_IN_BOTTOM_FILE: &str = "fig2_bottom_effects.csv";
pub const APPROXIMATIONS_FILE: &str = "fig3_approximations.csv";
pub const FIT_POINTS_FILE: &str = "fig4_points.csv";
pub const FIT_REPORT_FILE: &str = "fig4_report.json";

/// Writes each produced study into `dir` and returns the paths written.
pub fn write_study(outputs: &StudyOutputs, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        f(&path)?;
        written.push(path);
        Ok(())
    };
    if let Some(records) = &outputs.trajectories {
        put(TRAJECTORIES_FILE, &|p| emit_records(records, p, Format::Csv))?;
    }
    if let Some(study) = &outputs.digging_in {
        put(DIGGING_IN_TOP_FILE, &|p| emit_records(&study.trajectories, p, Format::Csv))?;
        put(DIGGING_IN_BOTTOM_FILE, &|p| emit_records(&study.effects, p, Format::Csv))?;
    }
    if let Some(records) = &outputs.approximations {
        put(APPROXIMATIONS_FILE, &|p| emit_records(records, p, Format::Csv))?;
    }
    if let Some(fit) = &outputs.fit {
        put(FIT_POINTS_FILE, &|p| emit_records(&fit.points, p, Format::Csv))?;
        put(FIT_REPORT_FILE, &|p| emit_report(fit, p))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(x: f64) -> ConditionRecord {
        ConditionRecord {
            experiment: "fig1".into(),
            context: "AMB".into(),
            q1: 0.004,
            q2: 0.5,
            n: 25,
            step: 3,
            mean_surprisal: x,
            stdev: 0.1,
            stderr: f64::INFINITY,
            absorbed_fraction: 1.0 / 3.0,
            failed_fraction: 0.0,
            trials: 50_000,
            pred_second_order: Some(x * 2.0),
            pred_linear_diffusion: None,
        }
    }

    #[test]
    fn empty_list_is_header_only() {
        let mut buf = Vec::new();
        write_csv::<ConditionRecord, _>(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "experiment,context,q1,q2,n,step,mean_surprisal,stdev,stderr,absorbed_fraction,\
             failed_fraction,trials,pred_second_order,pred_linear_diffusion\n"
        );
        assert!(read_csv::<ConditionRecord, _>(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn one_record_is_one_row() {
        let mut buf = Vec::new();
        write_csv(&[record(2.2712)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("fig1,AMB,4.0000000000000001e-3,5.0000000000000000e-1,25,3,"));
        assert!(lines[1].contains(",inf,"));
        assert!(lines[1].ends_with(",50000,4.5423999999999998e0,"));
    }

    #[test]
    fn json_keeps_non_finite_values() {
        let mut buf = Vec::new();
        write_json(&[record(f64::NAN)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"stderr\": \"inf\""));
        assert!(text.contains("\"pred_linear_diffusion\": null"));
        let back: Vec<ConditionRecord> = read_json(text.as_bytes()).unwrap();
        assert!(back[0].mean_surprisal.is_nan());
        assert_eq!(back[0].stderr, f64::INFINITY);
    }

    #[test]
    fn missing_column_is_reported() {
        let err = read_csv::<FitPoint, _>("kind,q1\nsecond_order,0.1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("`experiment`"), "{err}");
        let bad = "kind,experiment,context,q1,q2,n,step,true_delta,predicted_delta\n\
                   second_order,e,c,x,0.5,2,0,0.1,0.1\n";
        let err = read_csv::<FitPoint, _>(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 2, column `q1`"), "{err}");
    }

    #[test]
    fn digging_in_parallel_row_has_blank_n() {
        let row = DiggingInRecord {
            experiment: "fig2".into(),
            q1: 0.1,
            q2: 0.5,
            n: None,
            short_step: 0,
            long_step: 2,
            gp_short: 1.0,
            gp_short_stderr: 0.0,
            gp_long: 1.0,
            gp_long_stderr: 0.0,
            digging_in: 0.0,
            digging_in_stderr: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let back: Vec<DiggingInRecord> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![row]);
    }

    fn same(a: f64, b: f64) -> bool {
        a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(
            xs in prop::collection::vec(prop::num::f64::ANY, 1..20),
            n in 1u64..1_000_000,
        ) {
            let rows: Vec<_> = xs.iter().map(|&x| {
                let mut r = record(x);
                r.n = n;
                r.q1 = x / 7.0;
                r
            }).collect();
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf).unwrap();
            let back: Vec<ConditionRecord> = read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            for (a, b) in rows.iter().zip(&back) {
                prop_assert!(same(a.mean_surprisal, b.mean_surprisal));
                prop_assert!(same(a.q1, b.q1));
                prop_assert!(same(a.pred_second_order.unwrap(), b.pred_second_order.unwrap()));
                prop_assert_eq!(b.pred_linear_diffusion, None);
                prop_assert_eq!(a.n, b.n);
            }
        }

        #[test]
        fn json_round_trip_is_exact(x in prop::num::f64::ANY) {
            let mut buf = Vec::new();
            write_json(&[record(x)], &mut buf).unwrap();
            let back: Vec<ConditionRecord> = read_json(buf.as_slice()).unwrap();
            prop_assert!(same(back[0].mean_surprisal, x));
        }
    }
}
