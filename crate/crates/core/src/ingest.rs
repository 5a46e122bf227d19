//! Dataset ingestion. Every loader appends the constant-1 bias feature and
//! returns per-agent shards plus a held-out test set.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DataShard;
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shards: Vec<DataShard>,
    pub test: Option<DataShard>,
    pub summary: IngestSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows_read: usize,
    pub rows_dropped_unlabeled: usize,
    pub rows_dropped_remainder: usize,
    pub test_rows: usize,
    pub shard_sizes: Vec<usize>,
    pub features: usize,
    pub notes: Vec<String>,
}

/// Draw for the one-dimensional Gaussian toy problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyData {
    pub theta: f64,
    pub values: Vec<f64>,
}

/// `theta ~ N(0, sigma_theta^2)`, then `x_i ~ N(theta, sigma_x^2)`.
pub fn draw_toy_data(sigma_theta: f64, sigma_x: f64, count: usize, rng: &mut SimRng) -> ToyData {
    let theta = Normal::new(0.0, sigma_theta)
        .expect("sigma_theta > 0")
        .sample(rng);
    let lik = Normal::new(theta, sigma_x).expect("sigma_x > 0");
    ToyData {
        theta,
        values: (0..count).map(|_| lik.sample(rng)).collect(),
    }
}

/// Contiguous split of `values` into `n` shards whose sizes differ by at most one.
pub fn split_scalar(values: &[f64], n: usize) -> Result<Vec<DataShard>> {
    if values.len() < n {
        return Err(Error::InsufficientData {
            needed: n,
            got: values.len(),
        });
    }
    let base = values.len() / n;
    let extra = values.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for owner in 0..n {
        let len = base + usize::from(owner < extra);
        out.push(DataShard::scalar(&values[start..start + len], owner)?);
        start += len;
    }
    Ok(out)
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::MalformedRow {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads the UCI MAGIC gamma telescope file: ten numeric features then a
/// class letter, `g` (gamma, label 1) or `h` (hadron, label 0).
pub fn read_gamma_rows(path: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 11 {
            return Err(malformed(
                path,
                line_no,
                format!("expected 11 fields, got {}", fields.len()),
            ));
        }
        let mut x = Vec::with_capacity(11);
        for f in &fields[..10] {
            let v: f64 = f
                .parse()
                .map_err(|_| malformed(path, line_no, format!("bad number `{f}`")))?;
            x.push(v);
        }
        x.push(1.0);
        let y = match fields[10] {
            "g" => 1,
            "h" => 0,
            other => return Err(malformed(path, line_no, format!("unknown class `{other}`"))),
        };
        rows.push((x, y));
    }
    Ok(rows)
}

fn shard_from_rows(rows: &[(Vec<f64>, usize)], owner: usize) -> Result<DataShard> {
    DataShard::new(
        rows.iter().map(|r| r.0.clone()).collect(),
        rows.iter().map(|r| r.1).collect(),
        owner,
    )
}

/// Seeded shuffle, hold out `test_fraction`, split the rest into
/// `n_shards` equal parts and drop the remainder.
pub fn ingest_gamma_telescope(
    path: &Path,
    n_shards: usize,
    test_fraction: f64,
    rng: &mut SimRng,
) -> Result<Dataset> {
    let mut rows = read_gamma_rows(path)?;
    let rows_read = rows.len();
    rows.shuffle(rng);
    let test_rows = (rows_read as f64 * test_fraction).round() as usize;
    let test = if test_rows > 0 {
        Some(shard_from_rows(&rows[..test_rows], usize::MAX)?)
    } else {
        None
    };
    let train = &rows[test_rows..];
    let per = train.len() / n_shards;
    if per == 0 {
        return Err(Error::InsufficientData {
            needed: n_shards,
            got: train.len(),
        });
    }
    let shards = (0..n_shards)
        .map(|i| shard_from_rows(&train[i * per..(i + 1) * per], i))
        .collect::<Result<Vec<_>>>()?;
    let dropped = train.len() - per * n_shards;
    if dropped > 0 {
        log::info!("gamma telescope: dropped {dropped} remainder rows");
    }
    Ok(Dataset {
        summary: IngestSummary {
            rows_read,
            rows_dropped_unlabeled: 0,
            rows_dropped_remainder: dropped,
            test_rows,
            shard_sizes: vec![per; n_shards],
            features: 11,
            notes: vec![format!(
                "unstratified seeded split, test fraction {test_fraction}"
            )],
        },
        shards,
        test,
    })
}

pub fn mhealth_subject_file(dir: &Path, subject: usize) -> std::path::PathBuf {
    dir.join(format!("mHealth_subject{subject}.log"))
}

/// Reads one mHealth subject log: 23 sensor columns then the activity label.
/// Returns labeled rows (labels remapped 1..=12 -> 0..=11) and the count of
/// unlabeled rows dropped.
pub fn read_mhealth_subject(path: &Path) -> Result<(Vec<(Vec<f64>, usize)>, usize)> {
    if !path.exists() {
        return Err(Error::MissingSubjectFile(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut unlabeled = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 24 {
            return Err(malformed(
                path,
                line_no,
                format!("expected 24 columns, got {}", fields.len()),
            ));
        }
        let values = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| malformed(path, line_no, format!("bad number `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let label = values[23];
        if label == 0.0 {
            unlabeled += 1;
            continue;
        }
        if label.fract() != 0.0 || !(1.0..=12.0).contains(&label) {
            return Err(malformed(
                path,
                line_no,
                format!("activity label {label} outside 1..=12"),
            ));
        }
        let mut x = values[..23].to_vec();
        x.push(1.0);
        rows.push((x, label as usize - 1));
    }
    Ok((rows, unlabeled))
}

/// Subjects in `train_subjects` become shards in order; `test_subject` is the
/// test set. With `subsample`, each shard keeps that many rows drawn without
/// replacement (original order preserved).
pub fn ingest_mhealth(
    dir: &Path,
    train_subjects: &[usize],
    test_subject: usize,
    subsample: Option<usize>,
    rng: &mut SimRng,
) -> Result<Dataset> {
    let mut summary = IngestSummary {
        features: 24,
        ..Default::default()
    };
    let mut shards = Vec::with_capacity(train_subjects.len());
    for (owner, &subject) in train_subjects.iter().enumerate() {
        let (mut rows, unlabeled) = read_mhealth_subject(&mhealth_subject_file(dir, subject))?;
        summary.rows_read += rows.len() + unlabeled;
        summary.rows_dropped_unlabeled += unlabeled;
        if let Some(m) = subsample {
            if rows.len() < m {
                return Err(Error::InsufficientData {
                    needed: m,
                    got: rows.len(),
                });
            }
            let mut keep = index::sample(rng, rows.len(), m).into_vec();
            keep.sort_unstable();
            rows = keep.into_iter().map(|i| rows[i].clone()).collect();
        }
        summary.shard_sizes.push(rows.len());
        shards.push(shard_from_rows(&rows, owner)?);
    }
    let (test_rows, unlabeled) = read_mhealth_subject(&mhealth_subject_file(dir, test_subject))?;
    summary.rows_read += test_rows.len() + unlabeled;
    summary.rows_dropped_unlabeled += unlabeled;
    summary.test_rows = test_rows.len();
    summary.notes.push(format!(
        "train subjects {train_subjects:?}, test subject {test_subject}"
    ));
    Ok(Dataset {
        shards,
        test: Some(shard_from_rows(&test_rows, usize::MAX)?),
        summary,
    })
}

/// Per-feature affine map fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scores every feature except the trailing bias column using statistics
/// of the training shards, then applies the same map to the test set.
/// Constant features keep a unit scale.
pub fn standardize(data: &mut Dataset) -> Standardization {
    let d = data.shards[0].inputs[0].len() - 1;
    let rows = || data.shards.iter().flat_map(|s| s.inputs.iter());
    let count = rows().count() as f64;
    let mut mean = vec![0.0; d];
    for x in rows() {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; d];
    for x in rows() {
        for ((acc, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *acc += (v - m).powi(2) / count;
        }
    }
    let std: Vec<f64> = var
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    let apply = |shard: &mut DataShard| {
        for x in shard.inputs.iter_mut() {
            for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    };
    data.shards.iter_mut().for_each(apply);
    if let Some(t) = data.test.as_mut() {
        apply(t);
    }
    data.summary
        .notes
        .push("features z-scored with training-shard mean and std (bias column untouched)".into());
    Standardization { mean, std }
}

fn write_shard(path: &Path, shard: &DataShard) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = shard.inputs.first().map_or(0, |x| x.len());
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (x, y) in shard.inputs.iter().zip(&shard.labels) {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_shard(path: &Path, owner: usize) -> Result<DataShard> {
    let mut r = csv::Reader::from_path(path)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let n = rec.len();
        if n < 2 {
            return Err(malformed(
                path,
                line,
                "need at least one feature and a label",
            ));
        }
        let x = rec
            .iter()
            .take(n - 1)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| malformed(path, line, format!("bad number `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let y = rec[n - 1]
            .parse::<usize>()
            .map_err(|_| malformed(path, line, "bad label"))?;
        inputs.push(x);
        labels.push(y);
    }
    DataShard::new(inputs, labels, owner)
}

/// Writes `shard_<i>.csv` for every shard and `test.csv` when present.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in data.shards.iter().enumerate() {
        write_shard(&dir.join(format!("shard_{i}.csv")), s)?;
    }
    if let Some(t) = &data.test {
        write_shard(&dir.join("test.csv"), t)?;
    }
    let summary = dir.join("summary.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&data.summary)?)
        .map_err(|e| Error::io(&summary, e))?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`] with `n_shards` shards.
pub fn read_dataset(dir: &Path, n_shards: usize) -> Result<Dataset> {
    let shards = (0..n_shards)
        .map(|i| {
            let p = dir.join(format!("shard_{i}.csv"));
            if !p.exists() {
                return Err(Error::validation(
                    "data.path",
                    format!("missing {}", p.display()),
                ));
            }
            read_shard(&p, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let test_path = dir.join("test.csv");
    let test = if test_path.exists() {
        Some(read_shard(&test_path, usize::MAX)?)
    } else {
        None
    };
    let summary = IngestSummary {
        rows_read: shards.iter().map(|s| s.len()).sum::<usize>()
            + test.as_ref().map_or(0, |t| t.len()),
        test_rows: test.as_ref().map_or(0, |t| t.len()),
        shard_sizes: shards.iter().map(|s| s.len()).collect(),
        features: shards[0].inputs[0].len(),
        ..Default::default()
    };
    Ok(Dataset {
        shards,
        test,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn write_gamma(dir: &Path, rows: usize) -> std::path::PathBuf {
        let mut text = String::new();
        for r in 0..rows {
            let feats: Vec<String> = (0..10)
                .map(|c| format!("{:.3}", (r * 10 + c) as f64 * 0.01))
                .collect();
            text.push_str(&feats.join(","));
            text.push_str(if r % 3 == 0 { ",h\n" } else { ",g\n" });
        }
        let p = dir.join("magic04.data");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn gamma_split_is_a_partition() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_gamma(dir.path(), 1003);
        let ds = ingest_gamma_telescope(&p, 6, 0.2, &mut stream(1, &[])).unwrap();
        assert_eq!(ds.summary.test_rows, 201);
        assert_eq!(ds.shards.len(), 6);
        let per = (1003 - 201) / 6;
        assert!(ds.shards.iter().all(|s| s.len() == per));
        assert_eq!(ds.summary.rows_dropped_remainder, 802 - 6 * per);
        assert!(ds
            .shards
            .iter()
            .all(|s| s.inputs.iter().all(|x| x.len() == 11 && x[10] == 1.0)));
        // First feature uniquely identifies a row.
        let mut keys: Vec<i64> = ds
            .shards
            .iter()
            .flat_map(|s| s.inputs.iter())
            .chain(ds.test.as_ref().unwrap().inputs.iter())
            .map(|x| (x[0] * 1000.0).round() as i64)
            .collect();
        let total = keys.len();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), total);

        let again = ingest_gamma_telescope(&p, 6, 0.2, &mut stream(1, &[])).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn gamma_labels_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.data");
        std::fs::write(&p, "1,2,3,4,5,6,7,8,9,10,g\n1,2,3,4,5,6,7,8,9,10,h\n").unwrap();
        let rows = read_gamma_rows(&p).unwrap();
        assert_eq!(rows[0].1, 1);
        assert_eq!(rows[1].1, 0);
        std::fs::write(&p, "1,2,3,4,5,6,7,8,9,10,g\n1,2,3,x,5,6,7,8,9,10,h\n").unwrap();
        assert!(matches!(
            read_gamma_rows(&p),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        std::fs::write(&p, "1,2,3,4,5,6,7,8,9,10,q\n").unwrap();
        assert!(matches!(
            read_gamma_rows(&p),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    fn write_mhealth(dir: &Path, subject: usize, rows: usize) {
        let mut text = String::new();
        for r in 0..rows {
            let label = r % 13;
            let feats: Vec<String> = (0..23)
                .map(|c| format!("{}", (subject * 1000 + r) as f64 + c as f64 * 1e-3))
                .collect();
            text.push_str(&format!("{}\t{}\n", feats.join("\t"), label));
        }
        std::fs::write(mhealth_subject_file(dir, subject), text).unwrap();
    }

    #[test]
    fn mhealth_drops_unlabeled_and_subsamples() {
        let dir = tempfile::tempdir().unwrap();
        for s in [1, 2, 3, 4, 5, 6, 10] {
            write_mhealth(dir.path(), s, 260);
        }
        let ds = ingest_mhealth(
            dir.path(),
            &[1, 2, 3, 4, 5, 6],
            10,
            Some(100),
            &mut stream(2, &[]),
        )
        .unwrap();
        assert_eq!(ds.shards.len(), 6);
        for s in &ds.shards {
            assert_eq!(s.len(), 100);
            assert!(s.inputs.iter().all(|x| x.len() == 24 && x[23] == 1.0));
            assert!(s.labels.iter().all(|&y| y < 12));
        }
        let test = ds.test.as_ref().unwrap();
        assert_eq!(test.len(), 240);
        assert!(ds.summary.rows_dropped_unlabeled > 0);
        let mut classes: Vec<usize> = test.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes, (0..12).collect::<Vec<_>>());

        std::fs::remove_file(mhealth_subject_file(dir.path(), 10)).unwrap();
        assert!(matches!(
            ingest_mhealth(dir.path(), &[1], 10, None, &mut stream(2, &[])),
            Err(Error::MissingSubjectFile(_))
        ));
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let shard = |rows: &[[f64; 2]], owner| {
            DataShard::new(
                rows.iter().map(|r| vec![r[0], r[1], 1.0]).collect(),
                vec![0; rows.len()],
                owner,
            )
            .unwrap()
        };
        let mut ds = Dataset {
            shards: vec![
                shard(&[[1.0, 5.0], [3.0, 5.0]], 0),
                shard(&[[5.0, 5.0], [7.0, 5.0]], 1),
            ],
            test: Some(shard(&[[4.0, 9.0]], usize::MAX)),
            summary: IngestSummary::default(),
        };
        let st = standardize(&mut ds);
        assert_eq!(st.mean, vec![4.0, 5.0]);
        assert_eq!(st.std, vec![5.0f64.sqrt(), 1.0]);
        let col: Vec<f64> = ds
            .shards
            .iter()
            .flat_map(|s| s.inputs.iter().map(|x| x[0]))
            .collect();
        assert!(col.iter().sum::<f64>().abs() < 1e-12);
        assert!((col.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let t = &ds.test.as_ref().unwrap().inputs[0];
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn toy_split_sizes() {
        let d = draw_toy_data(1.0, 5.0, 50, &mut stream(3, &[]));
        let shards = split_scalar(&d.values, 5).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
        let shards = split_scalar(&d.values[..13], 5).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2]);
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_gamma(dir.path(), 120);
        let ds = ingest_gamma_telescope(&p, 4, 0.25, &mut stream(5, &[])).unwrap();
        let out = dir.path().join("out");
        write_dataset(&out, &ds).unwrap();
        let back = read_dataset(&out, 4).unwrap();
        assert_eq!(back.shards, ds.shards);
        assert_eq!(back.test.unwrap().labels, ds.test.unwrap().labels);
    }
}
