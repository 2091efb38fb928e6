use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{DataError, DatasetMeta, GeoDataset};
use crate::spatial::{PointId, PointRecord};

/// Sidecar path for a dataset CSV: `data.csv` → `data.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `id,u,v,x1..xp[,y]`. The `y` column is present when any row has a
/// target; absent targets become empty cells. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_csv<W: Write>(ds: &GeoDataset, out: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    let p = ds.n_covariates();
    let with_y = ds.points().iter().any(|pt| pt.y.is_some());
    let mut header = vec!["id".to_string(), "u".into(), "v".into()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    if with_y {
        header.push("y".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for pt in ds.points() {
        write!(w, "{},{},{}", pt.id, pt.u, pt.v)?;
        for x in &pt.x {
            write!(w, ",{x}")?;
        }
        if with_y {
            match pt.y {
                Some(y) => write!(w, ",{y}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Writes the CSV and, when the dataset carries provenance, its sidecar.
pub fn save_csv(ds: &GeoDataset, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_csv(ds, file).map_err(io_err(path))?;
    if let Some(meta) = ds.meta() {
        let mpath = meta_path(path);
        let json = serde_json::to_string_pretty(meta).map_err(|source| DataError::Json {
            path: mpath.clone(),
            source,
        })?;
        fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    }
    Ok(())
}

struct Schema {
    id: usize,
    u: usize,
    v: usize,
    x: Vec<usize>,
    y: Option<usize>,
}

fn schema(path: &Path, header: &csv::StringRecord) -> Result<Schema, DataError> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let need = |name: &str| {
        find(name).ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let (id, u, v) = (need("id")?, need("u")?, need("v")?);
    let mut x = Vec::new();
    while let Some(col) = find(&format!("x{}", x.len() + 1)) {
        x.push(col);
    }
    let y = find("y");
    let known = 3 + x.len() + usize::from(y.is_some());
    if known != header.len() {
        let stray: Vec<&str> = header
            .iter()
            .filter(|h| {
                let h = h.trim();
                !matches!(h, "id" | "u" | "v" | "y")
                    && !(h.starts_with('x') && h[1..].parse::<usize>().is_ok_and(|j| j >= 1 && j <= x.len()))
            })
            .collect();
        return Err(DataError::BadHeader {
            path: path.to_path_buf(),
            message: format!("unexpected columns {stray:?} (covariates must be x1..xp)"),
        });
    }
    Ok(Schema { id, u, v, x, y })
}

/// Reads a dataset CSV, plus its sidecar metadata when one exists.
pub fn load_csv(path: &Path) -> Result<GeoDataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let schema = schema(path, &header)?;

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DataError::RowLength {
                path: path.to_path_buf(),
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let cell = |col: usize| -> Result<f64, DataError> {
            let raw = record[col].trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::BadCell {
                    path: path.to_path_buf(),
                    line,
                    column: header[col].to_string(),
                    value: raw.to_string(),
                })
        };
        let raw_id = record[schema.id].trim();
        let id = raw_id.parse::<u64>().map_err(|_| DataError::BadCell {
            path: path.to_path_buf(),
            line,
            column: "id".into(),
            value: raw_id.to_string(),
        })?;
        let y = match schema.y {
            Some(col) if !record[col].trim().is_empty() => Some(cell(col)?),
            _ => None,
        };
        points.push(PointRecord {
            id: PointId(id),
            u: cell(schema.u)?,
            v: cell(schema.v)?,
            x: schema.x.iter().map(|&c| cell(c)).collect::<Result<_, _>>()?,
            y,
        });
    }

    let mpath = meta_path(path);
    let meta = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: mpath.clone(),
            source,
        })?;
        Some(meta)
    } else {
        None
    };
    Ok(GeoDataset::new(points, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gwr;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn round_trip_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_gwr(100, 3).unwrap();
        let path = dir.path().join("gwr.csv");
        save_csv(&ds, &path).unwrap();
        assert!(meta_path(&path).exists());
        assert_eq!(load_csv(&path).unwrap(), ds);
    }

    #[test]
    fn missing_u_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "id,v,x1,y\n0,0.5,1,2\n");
        let err = load_csv(&p).unwrap_err();
        assert!(matches!(&err, DataError::MissingColumn { column, .. } if column == "u"));
        assert!(err.to_string().contains("`u`"));
    }

    #[test]
    fn covariate_count_is_inferred() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            "id,u,v,x1,x2,x3,x4,x5,y\n1,0,0,1,2,3,4,5,6\n2,1,1,1,2,3,4,5,\n",
        );
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.n_covariates(), 5);
        assert_eq!(ds.points()[0].y, Some(6.0));
        assert_eq!(ds.points()[1].y, None);
        assert!(ds.meta().is_none());
    }

    #[test]
    fn query_files_need_no_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "q.csv", "id,u,v,x1\n7,0.1,0.2,0.3\n");
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.points()[0].y, None);
        assert!(!ds.has_targets());
    }

    #[test]
    fn bad_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "id,u,v,x1,y\n0,0,0,1,2\n1,0,abc,1,2\n");
        let err = load_csv(&p).unwrap_err();
        match &err {
            DataError::BadCell { line, column, value, .. } => {
                assert_eq!((*line, column.as_str(), value.as_str()), (3, "v", "abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("a.csv:3"));
    }

    #[test]
    fn stray_and_gapped_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "id,u,v,x1,x3,y\n0,0,0,1,2,3\n");
        assert!(matches!(load_csv(&p), Err(DataError::BadHeader { .. })));
        let p = write(&dir, "b.csv", "id,u,v,x1,y\n0,0,0,1\n");
        assert!(matches!(load_csv(&p), Err(DataError::RowLength { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn floats_survive_the_round_trip(vals in prop::collection::vec(-1e12f64..1e12, 1..20), tiny in -1e-300f64..1e-300) {
            let points = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| PointRecord { id: PointId(i as u64), u: v, v: tiny, x: vec![v / 3.0, v * 7.1], y: Some(v.sqrt().max(0.0) + 0.1) })
                .collect();
            let ds = GeoDataset::new(points, None);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.csv");
            save_csv(&ds, &path).unwrap();
            prop_assert_eq!(load_csv(&path).unwrap(), ds);
        }
    }
}
