//! Labeled contract datasets on disk, and the stratified split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avp::VulnClass;
use crate::disasm::{parse_hex, ContractBytecode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub bytecode: ContractBytecode,
    pub label: bool,
    pub vuln_class: VulnClass,
    pub teacher: Option<Array1<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    vuln_class: String,
    label: u8,
}

pub const LABELS_FILE: &str = "labels.csv";
pub const TEACHER_FILE: &str = "teacher.txt";
pub const BYTECODE_DIR: &str = "bytecode";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads `id,vuln_class,label` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, VulnClass, bool)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| format_err(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "vuln_class", "label"] {
        return Err(format_err(path, "header must be `id,vuln_class,label`"));
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| format_err(path, e.to_string()))?;
        let class: VulnClass = row
            .vuln_class
            .parse()
            .map_err(|e: Error| format_err(path, format!("row {}: {e}", line + 2)))?;
        if row.label > 1 {
            return Err(format_err(path, format!("row {}: label must be 0 or 1", line + 2)));
        }
        if !seen.insert(row.id.clone()) {
            return Err(format_err(path, format!("duplicate id `{}`", row.id)));
        }
        rows.push((row.id, class, row.label == 1));
    }
    Ok(rows)
}

/// Teacher file: a `# dim=<D_s>` header, then `id,f1,...,fD` per line.
pub fn read_teacher(path: &Path) -> Result<BTreeMap<String, Array1<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_teacher(&text).map_err(|msg| format_err(path, msg))
}

pub fn parse_teacher(text: &str) -> std::result::Result<BTreeMap<String, Array1<f64>>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or("empty teacher file")?;
    let dim: usize = header
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|h| h.strip_prefix("dim="))
        .and_then(|d| d.trim().parse().ok())
        .ok_or("first line must be `# dim=<n>`")?;
    let mut out = BTreeMap::new();
    for line in lines {
        let mut fields = line.split(',').map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| format!("{id}: bad number `{f}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if values.len() != dim {
            return Err(format!("{id}: expected {dim} values, found {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("{id}: non-finite value"));
        }
        if out.insert(id.clone(), Array1::from_vec(values)).is_some() {
            return Err(format!("duplicate teacher row `{id}`"));
        }
    }
    Ok(out)
}

/// Joins `<bytecode_dir>/<id>.hex` files with the label rows and optional
/// teacher features.
pub fn load_dataset(
    bytecode_dir: &Path,
    labels_csv: &Path,
    teacher_file: Option<&Path>,
) -> Result<Vec<SampleRecord>> {
    let labels = read_labels(labels_csv)?;
    let mut teacher = match teacher_file {
        Some(p) => read_teacher(p)?,
        None => BTreeMap::new(),
    };
    let missing: Vec<String> = labels
        .iter()
        .filter(|(id, _, _)| !bytecode_dir.join(format!("{id}.hex")).is_file())
        .map(|(id, _, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingBytecode(missing));
    }
    let mut out = Vec::with_capacity(labels.len());
    for (id, vuln_class, label) in labels {
        let path = bytecode_dir.join(format!("{id}.hex"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw = parse_hex(&text).map_err(|e| format_err(&path, e.to_string()))?;
        let teacher = teacher.remove(&id);
        out.push(SampleRecord {
            bytecode: ContractBytecode::new(id.clone(), raw),
            id,
            label,
            vuln_class,
            teacher,
        });
    }
    for id in teacher.keys() {
        log::warn!("teacher row `{id}` has no labeled contract; dropped");
    }
    Ok(out)
}

/// Writes `bytecode/<id>.hex`, `labels.csv` and, when any sample carries
/// one, `teacher.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SampleRecord]) -> Result<()> {
    let code_dir = dir.join(BYTECODE_DIR);
    fs::create_dir_all(&code_dir).map_err(|e| Error::io(&code_dir, e))?;
    for s in samples {
        let path = code_dir.join(format!("{}.hex", s.id));
        fs::write(&path, format!("0x{}\n", hex::encode(&s.bytecode.raw))).map_err(|e| Error::io(&path, e))?;
    }
    let labels = dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&labels).map_err(|e| format_err(&labels, e.to_string()))?;
    for s in samples {
        w.serialize(LabelRow {
            id: s.id.clone(),
            vuln_class: s.vuln_class.as_str().to_string(),
            label: s.label as u8,
        })
        .map_err(|e| format_err(&labels, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;

    let with_teacher: Vec<_> = samples.iter().filter_map(|s| s.teacher.as_ref().map(|t| (&s.id, t))).collect();
    if let Some((_, first)) = with_teacher.first() {
        let path = dir.join(TEACHER_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = format!("# dim={}\n", first.len());
        for (id, t) in &with_teacher {
            text.push_str(id);
            for v in t.iter() {
                text.push_str(&format!(",{v:e}"));
            }
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a directory written by [`write_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<SampleRecord>> {
    let teacher = dir.join(TEACHER_FILE);
    load_dataset(
        &dir.join(BYTECODE_DIR),
        &dir.join(LABELS_FILE),
        teacher.is_file().then_some(teacher.as_path()),
    )
}

/// Seeded 80/20 split that keeps the label ratio in both parts.
/// Returns `(train, test)` index lists in ascending order.
pub fn stratified_split(samples: &[SampleRecord], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [false, true] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn subset(samples: &[SampleRecord], idx: &[usize]) -> Vec<SampleRecord> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}
