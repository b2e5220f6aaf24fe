//! On-disk dataset bundles, model snapshots, and the learned-strength
//! report. Serialization is canonical (sorted edges, fixed float
//! formatting) so repeated saves are byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseMatrix;
use crate::error::{Error, Result};
use crate::graph::{DataSplit, DatasetBundle, Graph};
use crate::model::{BackboneConfig, GseModel, ModelState, StrengthParam};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n: usize,
    num_edges: usize,
    num_classes: usize,
    feature_dim: usize,
    name: String,
}

/// 17 significant digits: enough to round-trip any 64-bit float.
fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::data(format!("{}:{}: {}", path.display(), line, msg))
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_to_string(&meta_path)?)
        .map_err(|e| Error::data(format!("{}: {}", meta_path.display(), e)))?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (idx, line) in read_to_string(&edges_path)?.lines().enumerate() {
        let lineno = idx + 1;
        let mut parts = line.split('\t');
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(parse_err(&edges_path, lineno, "expected two tab-separated columns")),
        };
        let u: usize =
            u.parse().map_err(|_| parse_err(&edges_path, lineno, "bad source index"))?;
        let v: usize =
            v.parse().map_err(|_| parse_err(&edges_path, lineno, "bad target index"))?;
        if u >= v {
            return Err(parse_err(&edges_path, lineno, "edges must satisfy u < v (no loops)"));
        }
        edges.push((u, v));
    }
    if edges.len() != meta.num_edges {
        return Err(Error::data(format!(
            "{}: {} edges but meta.num_edges = {}",
            edges_path.display(),
            edges.len(),
            meta.num_edges
        )));
    }
    let mut sorted = edges.clone();
    sorted.sort_unstable();
    let graph = Graph::from_undirected_edges(meta.n, &sorted)?;
    if sorted != edges {
        return Err(Error::data(format!("{}: edges are not sorted", edges_path.display())));
    }

    let feat_path = dir.join("features.tsv");
    let mut rows = Vec::with_capacity(meta.n);
    for (idx, line) in read_to_string(&feat_path)?.lines().enumerate() {
        let lineno = idx + 1;
        let row: Vec<f64> = line
            .split('\t')
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(&feat_path, lineno, "bad real")))
            .collect::<Result<_>>()?;
        if row.len() != meta.feature_dim {
            return Err(parse_err(
                &feat_path,
                lineno,
                format!("expected {} columns, got {}", meta.feature_dim, row.len()),
            ));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(parse_err(&feat_path, lineno, "non-finite feature"));
        }
        rows.push(row);
    }
    if rows.len() != meta.n {
        return Err(Error::data(format!(
            "{}: {} rows but meta.n = {}",
            feat_path.display(),
            rows.len(),
            meta.n
        )));
    }
    let features = DenseMatrix::from_rows(&rows)?;

    let labels_path = dir.join("labels.tsv");
    let mut labels = Vec::with_capacity(meta.n);
    for (idx, line) in read_to_string(&labels_path)?.lines().enumerate() {
        let lineno = idx + 1;
        let c: usize =
            line.trim().parse().map_err(|_| parse_err(&labels_path, lineno, "bad label"))?;
        if c >= meta.num_classes {
            return Err(parse_err(
                &labels_path,
                lineno,
                format!("label {} out of range for {} classes", c, meta.num_classes),
            ));
        }
        labels.push(c);
    }
    if labels.len() != meta.n {
        return Err(Error::data(format!(
            "{}: {} labels but meta.n = {}",
            labels_path.display(),
            labels.len(),
            meta.n
        )));
    }
    // every class must actually occur, otherwise num_classes is wrong
    let seen = labels.iter().max().map_or(0, |m| m + 1);
    if seen != meta.num_classes {
        return Err(Error::data(format!(
            "{}: max label implies {} classes, meta says {}",
            labels_path.display(),
            seen,
            meta.num_classes
        )));
    }

    let split_path = dir.join("split.json");
    let split: DataSplit = serde_json::from_str(&read_to_string(&split_path)?)
        .map_err(|e| Error::data(format!("{}: {}", split_path.display(), e)))?;

    let bundle = DatasetBundle { graph, features, labels, split, name: meta.name };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let edges = bundle.graph.undirected_edges();
    let meta = Meta {
        n: bundle.graph.n(),
        num_edges: edges.len(),
        num_classes: bundle.num_classes(),
        feature_dim: bundle.features.cols(),
        name: bundle.name.clone(),
    };
    let mut meta_str = serde_json::to_string_pretty(&meta)?;
    meta_str.push('\n');
    fs::write(dir.join("meta.json"), meta_str)?;

    let mut edges_str = String::new();
    for (u, v) in edges {
        edges_str.push_str(&format!("{}\t{}\n", u, v));
    }
    fs::write(dir.join("edges.tsv"), edges_str)?;

    let mut feat_str = String::new();
    for i in 0..bundle.features.rows() {
        let line: Vec<String> = bundle.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
        feat_str.push_str(&line.join("\t"));
        feat_str.push('\n');
    }
    fs::write(dir.join("features.tsv"), feat_str)?;

    let mut labels_str = String::new();
    for &c in &bundle.labels {
        labels_str.push_str(&format!("{}\n", c));
    }
    fs::write(dir.join("labels.tsv"), labels_str)?;

    let mut split_str = serde_json::to_string_pretty(&bundle.split)?;
    split_str.push('\n');
    fs::write(dir.join("split.json"), split_str)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Trained parameters plus the architecture they belong to.
#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub backbone: String,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    weights: Vec<SnapshotMatrix>,
    z: Vec<Vec<f64>>,
}

pub fn save_snapshot(cfg: &BackboneConfig, state: &ModelState, path: &Path) -> Result<()> {
    let snap = Snapshot {
        backbone: cfg.backbone.name().to_string(),
        layers: cfg.layers,
        hidden: cfg.hidden,
        heads: cfg.heads,
        dropout: cfg.dropout,
        weights: state
            .weights
            .iter()
            .map(|w| SnapshotMatrix { rows: w.rows(), cols: w.cols(), data: w.data().to_vec() })
            .collect(),
        z: state.z.iter().map(|p| p.values.clone()).collect(),
    };
    let mut s = serde_json::to_string(&snap)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<(BackboneConfig, Vec<DenseMatrix>, Vec<StrengthParam>)> {
    let snap: Snapshot = serde_json::from_str(&read_to_string(path)?)?;
    let mut cfg = BackboneConfig::new(snap.backbone.parse()?);
    cfg.layers = snap.layers;
    cfg.hidden = snap.hidden;
    cfg.heads = snap.heads;
    cfg.dropout = snap.dropout;
    cfg.validate()?;
    let weights = snap
        .weights
        .into_iter()
        .map(|m| DenseMatrix::new(m.rows, m.cols, m.data))
        .collect::<Result<_>>()?;
    let z = snap.z.into_iter().map(|values| StrengthParam { values }).collect();
    Ok((cfg, weights, z))
}

/// One row per stored directed entry of the strength pattern. For
/// multi-head models the raw strengths are averaged across heads.
pub fn export_z_report(model: &GseModel, z: &[StrengthParam], path: &Path) -> Result<()> {
    let pattern = model.pattern();
    for p in z {
        if p.values.len() != pattern.nnz() {
            return Err(Error::shape("strength vector does not match pattern"));
        }
    }
    if z.is_empty() {
        return Err(Error::contract("no strength parameters to export"));
    }
    let labels = model.labels();
    let init = &model.z_init()[0];
    let mut out = String::from("src\tdst\tinit_weight\traw_z\tstrength\tsame_class\n");
    for (e, (i, j)) in pattern.entries().enumerate() {
        let raw: f64 = z.iter().map(|p| p.values[e]).sum::<f64>() / z.len() as f64;
        let strength = raw.max(0.0).min(1.0);
        let same = (labels[i] == labels[j]) as u8;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            i,
            j,
            fmt_f64(init.values[e]),
            fmt_f64(raw),
            fmt_f64(strength),
            same
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
