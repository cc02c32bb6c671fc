//! Long-format plot data: `series,x,y`, nothing rendered.

use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unknown series: {0}")]
    UnknownSeries(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub key: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads a wide CSV file as series. The first column other than `replica`
/// and `seed` is `x`; every other numeric column becomes a series, keyed
/// `col@replica` when the file has a `replica` column.
pub fn load_series(path: &Path) -> Result<Vec<Series>, PlotError> {
    let bad = |message: String| PlotError::Input {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let replica = headers.iter().position(|h| h == "replica");
    let x_col = headers
        .iter()
        .position(|h| h != "replica" && h != "seed")
        .ok_or_else(|| bad("no x column".into()))?;
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let Ok(x) = rec[x_col].parse::<f64>() else { continue };
        for (i, h) in headers.iter().enumerate() {
            if i == x_col || Some(i) == replica || h == "seed" {
                continue;
            }
            let Ok(y) = rec[i].parse::<f64>() else { continue };
            let key = match replica {
                Some(r) => format!("{h}@{}", &rec[r]),
                None => h.to_string(),
            };
            if !out.contains_key(&key) {
                order.push(key.clone());
            }
            out.entry(key).or_default().push((x, y));
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let points = out.remove(&key).unwrap_or_default();
            Series { key, points }
        })
        .collect())
}

/// Writes the selected series to `path`, ordered by `x` and then by the
/// order of `select`, so joined series interleave. Returns the row count.
pub fn emit_plot_data(series: &[Series], select: &[String], path: &Path) -> Result<usize, PlotError> {
    let mut picked = Vec::with_capacity(select.len());
    for key in select {
        let s = series
            .iter()
            .find(|s| &s.key == key)
            .ok_or_else(|| PlotError::UnknownSeries(key.clone()))?;
        picked.push(s);
    }
    let mut rows: Vec<(f64, usize, usize)> = Vec::new();
    for (si, s) in picked.iter().enumerate() {
        rows.extend(s.points.iter().enumerate().map(|(pi, p)| (p.0, si, pi)));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["series", "x", "y"]).map_err(std::io::Error::from)?;
    for (_, si, pi) in &rows {
        let (x, y) = picked[*si].points[*pi];
        w.write_record([picked[*si].key.clone(), format!("{x:.16e}"), format!("{y:.16e}")])
            .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(key: &str, n: usize) -> Series {
        Series {
            key: key.into(),
            points: (0..n).map(|i| (i as f64, 2.0 * i as f64)).collect(),
        }
    }

    #[test]
    fn empty_selection_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        assert_eq!(emit_plot_data(&[series("a", 3)], &[], &path).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(path).unwrap(), "series,x,y\n");
    }

    #[test]
    fn joined_series_interleave() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let all = [series("f_1", 4), series("b_1", 4)];
        let n = emit_plot_data(&all, &["f_1".into(), "b_1".into()], &path).unwrap();
        assert_eq!(n, 8);
        let text = std::fs::read_to_string(path).unwrap();
        let keys: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(keys, ["f_1", "b_1", "f_1", "b_1", "f_1", "b_1", "f_1", "b_1"]);
    }

    #[test]
    fn unknown_series_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(&[series("a", 1)], &["nope".into()], &dir.path().join("p.csv"));
        assert!(matches!(err, Err(PlotError::UnknownSeries(k)) if k == "nope"));
    }

    #[test]
    fn loads_replica_keyed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "replica,seed,window_start,backlog_mean\n0,7,0,1.5\n0,7,10,2.0\n1,6,0,0.5\n").unwrap();
        let s = load_series(&path).unwrap();
        assert_eq!(s.len(), 1 + 1);
        assert_eq!(s[0].key, "backlog_mean@0");
        assert_eq!(s[0].points, vec![(0.0, 1.5), (10.0, 2.0)]);
    }
}
