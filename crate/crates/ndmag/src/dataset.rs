//! On-disk formats: spectrum files, dataset manifests, model persistence,
//! field maps, and flat key-value records.
//!
//! Everything is line-oriented text. Floats are written with Rust's shortest
//! round-trip formatting, so write → read → write is byte-identical; files
//! are written to a temporary sibling and renamed into place. `FORMATS.md`
//! at the repository root documents each layout field by field.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::gpr::{FeatureVector, GprError, GprModel, KernelHyperparams};
use crate::physics::{OdmrSpectrum, PhysicsError};
use crate::pipeline::FieldMap;

pub const SPECTRUM_COLUMNS: &str = "frequency_MHz,contrast";
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MODEL_MAGIC: &str = "ndmag-gpr-v1";
pub const MAP_MAGIC: &str = "ndmag-map-v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Gpr(#[from] GprError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Write `content` atomically: to `<path>.tmp`, then rename over `path`.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), DatasetError> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, content).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn parse_f64(path: &Path, line: usize, s: &str, what: &str) -> Result<f64, DatasetError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("invalid {what}: {s:?}")))
}

/// Serialize a spectrum: one metadata line, a column header, then
/// `frequency_MHz,contrast` rows.
pub fn spectrum_to_string(spectrum: &OdmrSpectrum, true_field_ut: Option<f64>) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "integration_time_s={},photons_per_point={}",
        spectrum.integration_time_s, spectrum.photons_per_point
    );
    if let Some(b) = true_field_ut {
        let _ = write!(out, ",true_field_uT={b}");
    }
    out.push('\n');
    out.push_str(SPECTRUM_COLUMNS);
    out.push('\n');
    for (f, c) in spectrum.frequencies_mhz.iter().zip(&spectrum.contrast) {
        let _ = writeln!(out, "{f},{c}");
    }
    out
}

pub fn write_spectrum(
    path: &Path,
    spectrum: &OdmrSpectrum,
    true_field_ut: Option<f64>,
) -> Result<(), DatasetError> {
    write_atomic(path, &spectrum_to_string(spectrum, true_field_ut))
}

pub fn read_spectrum(path: &Path) -> Result<(OdmrSpectrum, Option<f64>), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();

    let (ln, meta) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty spectrum file"))?;
    let mut integration_time = None;
    let mut photons = None;
    let mut true_field = None;
    for item in meta.split(',') {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| parse_err(path, ln + 1, format!("bad metadata item {item:?}")))?;
        match key.trim() {
            "integration_time_s" => {
                integration_time = Some(parse_f64(path, ln + 1, value, "integration time")?)
            }
            "photons_per_point" => {
                photons = Some(parse_f64(path, ln + 1, value, "photon count")?)
            }
            "true_field_uT" => true_field = Some(parse_f64(path, ln + 1, value, "true field")?),
            other => return Err(parse_err(path, ln + 1, format!("unknown metadata key {other:?}"))),
        }
    }
    let integration_time = integration_time
        .ok_or_else(|| parse_err(path, 1, "missing integration_time_s"))?;
    let photons = photons.ok_or_else(|| parse_err(path, 1, "missing photons_per_point"))?;

    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing column header"))?;
    if header.trim() != SPECTRUM_COLUMNS {
        return Err(parse_err(
            path,
            ln + 1,
            format!("expected column header {SPECTRUM_COLUMNS:?}, got {header:?}"),
        ));
    }

    let mut freqs = Vec::new();
    let mut contrast = Vec::new();
    for (ln, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let (f, c) = row
            .split_once(',')
            .ok_or_else(|| parse_err(path, ln + 1, format!("expected two columns, got {row:?}")))?;
        freqs.push(parse_f64(path, ln + 1, f, "frequency")?);
        contrast.push(parse_f64(path, ln + 1, c, "contrast")?);
    }
    let spectrum = OdmrSpectrum::new(freqs, contrast, integration_time, photons)?;
    Ok((spectrum, true_field))
}

/// Write a dataset directory: numbered spectrum files plus a manifest of
/// `file,true_field_uT` rows.
pub fn write_dataset(dir: &Path, entries: &[(OdmrSpectrum, f64)]) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("file,true_field_uT\n");
    for (i, (spectrum, field)) in entries.iter().enumerate() {
        let name = format!("spec_{i:05}.csv");
        write_spectrum(&dir.join(&name), spectrum, Some(*field))?;
        let _ = writeln!(manifest, "{name},{field}");
    }
    write_atomic(&dir.join(MANIFEST_NAME), &manifest)
}

/// Read a manifest: `(file name, true field)` rows in listed order.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, f64)>, DatasetError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (ln, row) in text.lines().enumerate() {
        if ln == 0 {
            if row.trim() != "file,true_field_uT" {
                return Err(parse_err(&path, 1, format!("bad manifest header {row:?}")));
            }
            continue;
        }
        if row.trim().is_empty() {
            continue;
        }
        let (name, field) = row
            .split_once(',')
            .ok_or_else(|| parse_err(&path, ln + 1, format!("expected two columns, got {row:?}")))?;
        let field = parse_f64(&path, ln + 1, field, "true field")?;
        out.push((name.trim().to_string(), field));
    }
    if out.is_empty() {
        return Err(parse_err(&path, 1, "manifest lists no spectra"));
    }
    Ok(out)
}

/// Read a dataset directory through its manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<(OdmrSpectrum, f64)>, DatasetError> {
    read_manifest(dir)?
        .into_iter()
        .map(|(name, field)| {
            let (spectrum, _) = read_spectrum(&dir.join(name))?;
            Ok((spectrum, field))
        })
        .collect()
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split_f64(path: &Path, line: usize, s: &str, what: &str) -> Result<Vec<f64>, DatasetError> {
    s.split(',')
        .map(|item| parse_f64(path, line, item, what))
        .collect()
}

/// Serialize a trained model: versioned header, hyperparameters, sizes,
/// targets, solution weights, then one feature row per training spectrum.
pub fn model_to_string(model: &GprModel) -> String {
    let hp = model.hyperparams();
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC}");
    let _ = writeln!(out, "theta={}", hp.theta);
    let _ = writeln!(out, "beta_inv={}", hp.beta_inv);
    let _ = writeln!(out, "n_train={}", model.n_train());
    let _ = writeln!(out, "feature_len={}", model.feature_len());
    let _ = writeln!(out, "targets:{}", join_f64(model.targets()));
    let _ = writeln!(out, "weights:{}", join_f64(model.weights()));
    for f in model.features() {
        let _ = writeln!(out, "feature:{}", join_f64(&f.values));
    }
    out
}

pub fn save_model(path: &Path, model: &GprModel) -> Result<(), DatasetError> {
    write_atomic(path, &model_to_string(model))
}

/// Load a model, rebuilding the kernel factorization and re-verifying the
/// stored solution against the training system.
pub fn load_model(path: &Path) -> Result<GprModel, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let expect_line = |item: Option<(usize, &str)>, what: &str| -> Result<(usize, String), DatasetError> {
        item.map(|(ln, s)| (ln + 1, s.to_string()))
            .ok_or_else(|| parse_err(path, 0, format!("missing {what}")))
    };

    let (ln, magic) = expect_line(lines.next(), "header")?;
    if magic.trim() != MODEL_MAGIC {
        return Err(parse_err(path, ln, format!("expected {MODEL_MAGIC:?}, got {magic:?}")));
    }
    let mut field = |prefix: &str| -> Result<(usize, String), DatasetError> {
        let (ln, s) = expect_line(lines.next(), prefix)?;
        s.strip_prefix(prefix)
            .map(|rest| (ln, rest.to_string()))
            .ok_or_else(|| parse_err(path, ln, format!("expected {prefix:?} line, got {s:?}")))
    };
    let (ln, theta) = field("theta=")?;
    let theta = parse_f64(path, ln, &theta, "theta")?;
    let (ln, beta_inv) = field("beta_inv=")?;
    let beta_inv = parse_f64(path, ln, &beta_inv, "beta_inv")?;
    let (ln, n_train) = field("n_train=")?;
    let n_train: usize = n_train
        .trim()
        .parse()
        .map_err(|_| parse_err(path, ln, format!("invalid n_train {n_train:?}")))?;
    let (ln, feature_len) = field("feature_len=")?;
    let feature_len: usize = feature_len
        .trim()
        .parse()
        .map_err(|_| parse_err(path, ln, format!("invalid feature_len {feature_len:?}")))?;
    let (ln, targets) = field("targets:")?;
    let targets = split_f64(path, ln, &targets, "target")?;
    let (ln, weights) = field("weights:")?;
    let weights = split_f64(path, ln, &weights, "weight")?;

    let mut features = Vec::with_capacity(n_train);
    for (ln, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let rest = row
            .strip_prefix("feature:")
            .ok_or_else(|| parse_err(path, ln + 1, format!("expected feature row, got {row:?}")))?;
        let values = split_f64(path, ln + 1, rest, "feature value")?;
        if values.len() != feature_len {
            return Err(parse_err(
                path,
                ln + 1,
                format!("feature row has {} values, expected {feature_len}", values.len()),
            ));
        }
        features.push(FeatureVector { values });
    }
    if features.len() != n_train || targets.len() != n_train || weights.len() != n_train {
        return Err(parse_err(
            path,
            1,
            format!(
                "size mismatch: n_train={n_train}, {} features, {} targets, {} weights",
                features.len(),
                targets.len(),
                weights.len()
            ),
        ));
    }
    let hp = KernelHyperparams::new(theta, beta_inv)?;
    Ok(GprModel::from_parts(features, targets, hp, weights)?)
}

/// Write a flat key-value record: a versioned magic line followed by
/// `key=value` lines in the given order.
pub fn write_record(path: &Path, magic: &str, fields: &[(&str, String)]) -> Result<(), DatasetError> {
    let mut out = String::new();
    let _ = writeln!(out, "{magic}");
    for (key, value) in fields {
        let _ = writeln!(out, "{key}={value}");
    }
    write_atomic(path, &out)
}

/// Read a flat key-value record, returning its magic line and fields.
pub fn read_record(path: &Path) -> Result<(String, Vec<(String, String)>), DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty record"))?;
    let mut fields = Vec::new();
    for (ln, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let (k, v) = row
            .split_once('=')
            .ok_or_else(|| parse_err(path, ln + 1, format!("expected key=value, got {row:?}")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    Ok((magic.to_string(), fields))
}

/// Write a field map as two delimited grids (`<stem>.mean.csv`,
/// `<stem>.stddev.csv`; one row per y, comma-separated x values) plus a
/// `<stem>.meta.txt` sidecar.
pub fn write_field_map(dir: &Path, stem: &str, map: &FieldMap) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let grid = |values: &[f64]| -> String {
        let mut out = String::new();
        for iy in 0..map.ny {
            let row: Vec<String> = (0..map.nx)
                .map(|ix| values[iy * map.nx + ix].to_string())
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    };
    write_atomic(&dir.join(format!("{stem}.mean.csv")), &grid(&map.mean_ut))?;
    write_atomic(&dir.join(format!("{stem}.stddev.csv")), &grid(&map.stddev_ut))?;
    write_record(
        &dir.join(format!("{stem}.meta.txt")),
        MAP_MAGIC,
        &[
            ("nx", map.nx.to_string()),
            ("ny", map.ny.to_string()),
            ("pixel_area_um2", map.pixel_area_um2.to_string()),
        ],
    )
}

pub fn read_field_map(dir: &Path, stem: &str) -> Result<FieldMap, DatasetError> {
    let meta_path = dir.join(format!("{stem}.meta.txt"));
    let (magic, fields) = read_record(&meta_path)?;
    if magic.trim() != MAP_MAGIC {
        return Err(parse_err(&meta_path, 1, format!("expected {MAP_MAGIC:?}, got {magic:?}")));
    }
    let lookup = |key: &str| -> Result<String, DatasetError> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| parse_err(&meta_path, 1, format!("missing {key}")))
    };
    let nx: usize = lookup("nx")?
        .trim()
        .parse()
        .map_err(|_| parse_err(&meta_path, 2, "invalid nx"))?;
    let ny: usize = lookup("ny")?
        .trim()
        .parse()
        .map_err(|_| parse_err(&meta_path, 3, "invalid ny"))?;
    let pixel_area = lookup("pixel_area_um2")?;
    let pixel_area = parse_f64(&meta_path, 4, &pixel_area, "pixel area")?;

    let read_grid = |name: String| -> Result<Vec<f64>, DatasetError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut values = Vec::with_capacity(nx * ny);
        for (ln, row) in text.lines().enumerate() {
            if row.trim().is_empty() {
                continue;
            }
            let vals = split_f64(&path, ln + 1, row, "grid value")?;
            if vals.len() != nx {
                return Err(parse_err(
                    &path,
                    ln + 1,
                    format!("row has {} values, expected {nx}", vals.len()),
                ));
            }
            values.extend(vals);
        }
        if values.len() != nx * ny {
            return Err(parse_err(&path, 1, format!("expected {} values, got {}", nx * ny, values.len())));
        }
        Ok(values)
    };
    let mean = read_grid(format!("{stem}.mean.csv"))?;
    let stddev = read_grid(format!("{stem}.stddev.csv"))?;
    Ok(FieldMap {
        nx,
        ny,
        pixel_area_um2: pixel_area,
        mean_ut: mean,
        stddev_ut: stddev,
    })
}

/// Write plot-ready columns (header + comma rows).
pub fn write_table(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<(), DatasetError> {
    let mut out = String::new();
    let _ = writeln!(out, "{header}");
    for row in rows {
        let _ = writeln!(out, "{}", join_f64(row));
    }
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpr::{preprocess, train};
    use crate::physics::{synthesize_spectrum, uniform_frequency_grid, FieldVector, NdeModelParams};
    use tempfile::tempdir;

    fn synth(b: f64) -> OdmrSpectrum {
        let grid = uniform_frequency_grid(2720.0, 2990.0, 141);
        synthesize_spectrum(&FieldVector::axial(b), &NdeModelParams::default(), &grid).unwrap()
    }

    #[test]
    fn spectrum_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = synth(547.1);
        write_spectrum(&path, &s, Some(547.1)).unwrap();
        let (loaded, field) = read_spectrum(&path).unwrap();
        assert_eq!(s, loaded);
        assert_eq!(field, Some(547.1));
        // Re-serialization is byte-identical.
        let first = fs::read(&path).unwrap();
        write_spectrum(&path, &loaded, field).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn spectrum_without_true_field_roundtrips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_spectrum(&path, &synth(100.0), None).unwrap();
        let (_, field) = read_spectrum(&path).unwrap();
        assert_eq!(field, None);
    }

    #[test]
    fn malformed_spectrum_reports_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "integration_time_s=1,photons_per_point=0\nfrequency_MHz,contrast\n2720,0.99\noops\n",
        )
        .unwrap();
        match read_spectrum(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempdir().unwrap();
        let entries: Vec<(OdmrSpectrum, f64)> =
            [100.0, 500.0, 900.0].iter().map(|&b| (synth(b), b)).collect();
        write_dataset(dir.path(), &entries).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(entries.len(), loaded.len());
        for ((s1, b1), (s2, b2)) in entries.iter().zip(&loaded) {
            assert_eq!(s1, s2);
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn model_roundtrip_reproduces_predictions_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.gpr.txt");
        let fields: Vec<f64> = (0..12).map(|i| 150.0 + 170.0 * i as f64).collect();
        let features: Vec<FeatureVector> =
            fields.iter().map(|&b| preprocess(&synth(b)).unwrap()).collect();
        let model =
            train(features, fields, KernelHyperparams::new(20.0, 1e-2).unwrap()).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        let q = preprocess(&synth(733.0)).unwrap();
        assert_eq!(model.predict(&q).unwrap(), loaded.predict(&q).unwrap());
    }

    #[test]
    fn corrupted_model_fails_verification() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.gpr.txt");
        let fields: Vec<f64> = (0..8).map(|i| 200.0 + 250.0 * i as f64).collect();
        let features: Vec<FeatureVector> =
            fields.iter().map(|&b| preprocess(&synth(b)).unwrap()).collect();
        let model = train(features, fields, KernelHyperparams::new(20.0, 0.0).unwrap()).unwrap();
        let mut text = model_to_string(&model);
        // Corrupt the first target noticeably.
        text = text.replace("targets:2", "targets:9");
        fs::write(&path, text).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn field_map_roundtrip() {
        let dir = tempdir().unwrap();
        let map = FieldMap {
            nx: 3,
            ny: 2,
            pixel_area_um2: 18.0,
            mean_ut: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            stddev_ut: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        write_field_map(dir.path(), "map", &map).unwrap();
        let loaded = read_field_map(dir.path(), "map").unwrap();
        assert_eq!(map, loaded);
    }

    #[test]
    fn record_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fit.txt");
        write_record(
            &path,
            "ndmag-fit-v1",
            &[("b_hat_uT", "1000.5".to_string()), ("converged", "true".to_string())],
        )
        .unwrap();
        let (magic, fields) = read_record(&path).unwrap();
        assert_eq!(magic, "ndmag-fit-v1");
        assert_eq!(fields[0], ("b_hat_uT".to_string(), "1000.5".to_string()));
    }
}
