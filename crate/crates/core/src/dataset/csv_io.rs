//! `series_id,timestamp,value[,value_2…][,cov_*]` files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::series::TimeSeries;
use crate::error::{Error, Result};

struct Layout {
    value_cols: usize,
    covariate_names: Vec<String>,
}

fn parse_header(headers: &csv::StringRecord) -> Result<Layout> {
    let h: Vec<&str> = headers.iter().map(str::trim).collect();
    if h.len() < 3 || h[0] != "series_id" || h[1] != "timestamp" || h[2] != "value" {
        return Err(Error::Ingestion(format!(
            "header must start with `series_id,timestamp,value`, found `{}`",
            h.join(",")
        )));
    }
    let mut value_cols = 1;
    let mut covariate_names = Vec::new();
    for name in &h[3..] {
        if covariate_names.is_empty() && *name == format!("value_{}", value_cols + 1) {
            value_cols += 1;
        } else if name.starts_with("cov_") {
            covariate_names.push(name.to_string());
        } else {
            return Err(Error::Ingestion(format!("unexpected column `{name}`")));
        }
    }
    Ok(Layout {
        value_cols,
        covariate_names,
    })
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv(reader: impl Read) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let layout = parse_header(rdr.headers()?)?;
    let width = 2 + layout.value_cols + layout.covariate_names.len();

    // series id -> rows of (timestamp, values, covariates), in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, Vec<f64>, Vec<f64>)>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Ingestion(format!(
                "row {line}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        let ts: i64 = rec[1].parse().map_err(|_| {
            Error::Ingestion(format!("row {line}: unparsable timestamp `{}`", &rec[1]))
        })?;
        let mut nums = Vec::with_capacity(width - 2);
        for (j, field) in rec.iter().enumerate().skip(2) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Ingestion(format!("row {line}: unparsable number `{field}` in column {}", j + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion(format!("row {line}: non-finite value `{field}`")));
            }
            nums.push(v);
        }
        let covs = nums.split_off(layout.value_cols);
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((ts, nums, covs));
    }

    let mut duplicates = Vec::new();
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut r = rows.remove(&id).unwrap_or_default();
        r.sort_by_key(|row| row.0);
        for w in r.windows(2) {
            if w[0].0 == w[1].0 {
                duplicates.push(format!("({id}, {})", w[0].0));
            }
        }
        if !duplicates.is_empty() {
            continue;
        }
        let ts = TimeSeries {
            series_id: id,
            timestamps: r.iter().map(|x| x.0).collect(),
            values: r.iter().flat_map(|x| x.1.iter().copied()).collect(),
            channels: layout.value_cols,
            covariate_names: layout.covariate_names.clone(),
            covariates: r.iter().flat_map(|x| x.2.iter().copied()).collect(),
        };
        ts.validate()?;
        out.push(ts);
    }
    if !duplicates.is_empty() {
        duplicates.dedup();
        return Err(Error::Ingestion(format!(
            "duplicate (series_id, timestamp) rows: {}",
            duplicates.join(", ")
        )));
    }
    Ok(out)
}

pub fn write_csv(series: &[TimeSeries], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(series, std::io::BufWriter::new(file))
}

pub fn write_csv_to(series: &[TimeSeries], writer: impl Write) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(Error::Contract("no series to write".into()));
    };
    if series
        .iter()
        .any(|s| s.channels != first.channels || s.covariate_names != first.covariate_names)
    {
        return Err(Error::Contract("series disagree on column layout".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "timestamp".into(), "value".into()];
    header.extend((2..=first.channels).map(|c| format!("value_{c}")));
    header.extend(first.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in series {
        for t in 0..s.len() {
            let mut rec = vec![s.series_id.clone(), s.timestamps[t].to_string()];
            rec.extend(s.row(t).iter().map(|v| v.to_string()));
            rec.extend(s.covariate_row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file() {
        let src = "series_id,timestamp,value\na,0,1.0\na,300,2.0\na,600,3.5\n";
        let s = read_csv(src.as_bytes()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 3);
        assert_eq!(s[0].stride(), Some(300));
    }

    #[test]
    fn rows_are_sorted_and_grouped() {
        let src = "series_id,timestamp,value,value_2,cov_load\nb,600,3,30,0.1\na,0,1,10,0\nb,0,1,10,0.2\nb,300,2,20,0.3\n";
        let s = read_csv(src.as_bytes()).unwrap();
        assert_eq!(s[0].series_id, "b");
        assert_eq!(s[0].timestamps, vec![0, 300, 600]);
        assert_eq!(s[0].values, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        assert_eq!(s[0].covariates, vec![0.2, 0.3, 0.1]);
        assert_eq!(s[1].series_id, "a");
        assert_eq!(s[0].channels, 2);
    }

    #[test]
    fn duplicate_timestamp_named() {
        let src = "series_id,timestamp,value\na,0,1\na,300,2\na,300,2.5\n";
        let err = read_csv(src.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("(a, 300)"), "{err}");
    }

    #[test]
    fn bad_scalar_reports_row() {
        let src = "series_id,timestamp,value\na,0,1\na,300,abc\n";
        let err = read_csv(src.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn uneven_stride_rejected() {
        let src = "series_id,timestamp,value\na,0,1\na,300,2\na,900,3\n";
        assert!(matches!(read_csv(src.as_bytes()), Err(Error::Ingestion(_))));
    }
}
