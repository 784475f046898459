//! Graph container, on-disk formats and the synthetic graph generator.
//!
//! A dataset directory holds either the text form
//! (`edges.txt`, `features.csv`, `labels.txt`, `splits.json`) or the binary
//! form (`graph.bin` plus the same `labels.txt`/`splits.json`):
//!
//! * `edges.txt` — one undirected edge per line, two whitespace-separated
//!   node ids; duplicates and self-loops are dropped on load.
//! * `features.csv` — one comma-separated row of reals per node; the number
//!   of rows defines the node count.
//! * `labels.txt` — one integer class id per node.
//! * `splits.json` — `{"train": [...], "val": [...], "test": [...]}`.
//! * `graph.bin` — little-endian: magic `GTS1`, `n: u64`, `d: u64`,
//!   `nnz: u64`, the adjacency CSR (`row_ptr: (n+1)×u64`,
//!   `col_idx: nnz×u64`), then the feature matrix as `n·d` f32 values.
//!
//! Text feature values are written in shortest round-trip notation, so a
//! text→text round trip reproduces the graph exactly; the binary feature
//! block is f32 by definition, so binary→binary round trips are exact while
//! text→binary narrows the features to f32.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Train/validation/test node index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// In-memory graph dataset: symmetric adjacency (no self-loops), node
/// features, integer labels and the split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adjacency: CsrMatrix,
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Directed edge count (each undirected edge counted twice).
    pub fn num_directed_edges(&self) -> usize {
        self.adjacency.nnz()
    }
}

/// On-disk representation choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Text,
    Binary,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_features_csv(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, idx + 1, format!("bad feature value {tok:?}")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("expected {w} columns, found {}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    let d = width.unwrap_or(0);
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat)
        .map_err(|e| parse_err(path, 0, format!("feature matrix shape: {e}")))
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(u32, u32)>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let (a, b) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(parse_err(
                    path,
                    idx + 1,
                    "expected exactly two node ids per line",
                ))
            }
        };
        let parse_id = |tok: &str| -> Result<u32> {
            let id: u64 = tok
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad node id {tok:?}")))?;
            if id as usize >= n {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("node id {id} out of range for {n} nodes"),
                ));
            }
            Ok(id as u32)
        };
        edges.push((parse_id(a)?, parse_id(b)?));
    }
    Ok(edges)
}

fn read_labels(path: &Path, n: usize) -> Result<(Vec<u32>, usize)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::with_capacity(n);
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let y: u32 = trimmed
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("bad label {trimmed:?}")))?;
        labels.push(y);
    }
    if labels.len() != n {
        return Err(parse_err(
            path,
            0,
            format!("expected {n} labels, found {}", labels.len()),
        ));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Ok((labels, num_classes))
}

fn read_splits(path: &Path, n: usize) -> Result<Splits> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let splits: Splits = serde_json::from_str(&text)
        .map_err(|e| parse_err(path, e.line(), format!("bad splits json: {e}")))?;
    for (name, ids) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= n) {
            return Err(parse_err(
                path,
                0,
                format!("{name} split references node {bad}, graph has {n} nodes"),
            ));
        }
    }
    Ok(splits)
}

fn read_binary_graph(path: &Path) -> Result<(CsrMatrix, Array2<f64>)> {
    let bad = |msg: &str| Error::BadBinary {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut file = BufReader::new(fs::File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != b"GTS1" {
        return Err(bad("bad magic, expected GTS1"));
    }
    let read_u64 = |file: &mut BufReader<fs::File>| -> Result<u64> {
        let mut buf = [0u8; 8];
        file.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        Ok(u64::from_le_bytes(buf))
    };
    let n = read_u64(&mut file)? as usize;
    let d = read_u64(&mut file)? as usize;
    let nnz = read_u64(&mut file)? as usize;

    let mut row_ptr = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_ptr.push(read_u64(&mut file)? as usize);
    }
    if row_ptr[0] != 0 || *row_ptr.last().unwrap() != nnz {
        return Err(bad("row_ptr does not cover nnz entries"));
    }
    let mut col_idx = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let j = read_u64(&mut file)?;
        if j as usize >= n {
            return Err(bad("column index out of range"));
        }
        col_idx.push(j as u32);
    }
    let mut feat = Vec::with_capacity(n * d);
    let mut buf = [0u8; 4];
    for _ in 0..n * d {
        file.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        feat.push(f32::from_le_bytes(buf) as f64);
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(bad("trailing bytes after feature block"));
    }
    let features = Array2::from_shape_vec((n, d), feat).map_err(|_| bad("feature shape"))?;
    let adjacency = CsrMatrix {
        nrows: n,
        ncols: n,
        row_ptr,
        col_idx,
        values: vec![1.0; nnz],
    };
    Ok((adjacency, features))
}

/// Loads a dataset directory in the given format.
pub fn load_graph(dir: &Path, format: GraphFormat) -> Result<Graph> {
    let (adjacency, features) = match format {
        GraphFormat::Text => {
            let features = read_features_csv(&dir.join("features.csv"))?;
            let n = features.nrows();
            let edges = read_edges(&dir.join("edges.txt"), n)?;
            (CsrMatrix::adjacency_from_edges(n, &edges), features)
        }
        GraphFormat::Binary => read_binary_graph(&dir.join("graph.bin"))?,
    };
    let n = adjacency.nrows;
    let (labels, num_classes) = read_labels(&dir.join("labels.txt"), n)?;
    let splits = read_splits(&dir.join("splits.json"), n)?;
    Ok(Graph {
        adjacency,
        features,
        labels,
        num_classes,
        splits,
    })
}

/// Writes a dataset directory in the given format (creating it if needed).
pub fn write_graph(graph: &Graph, dir: &Path, format: GraphFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let n = graph.num_nodes();

    match format {
        GraphFormat::Text => {
            let epath = dir.join("edges.txt");
            let mut edges = BufWriter::new(fs::File::create(&epath).map_err(|e| io_err(&epath, e))?);
            for u in 0..n {
                let (cols, _) = graph.adjacency.row(u);
                for &v in cols {
                    if (v as usize) > u {
                        writeln!(edges, "{u} {v}").map_err(|e| io_err(&epath, e))?;
                    }
                }
            }
            edges.flush().map_err(|e| io_err(&epath, e))?;

            let fpath = dir.join("features.csv");
            let mut feats = BufWriter::new(fs::File::create(&fpath).map_err(|e| io_err(&fpath, e))?);
            for row in graph.features.rows() {
                let mut first = true;
                for &x in row {
                    if !first {
                        write!(feats, ",").map_err(|e| io_err(&fpath, e))?;
                    }
                    write!(feats, "{x}").map_err(|e| io_err(&fpath, e))?;
                    first = false;
                }
                writeln!(feats).map_err(|e| io_err(&fpath, e))?;
            }
            feats.flush().map_err(|e| io_err(&fpath, e))?;
        }
        GraphFormat::Binary => {
            let bpath = dir.join("graph.bin");
            let mut out = BufWriter::new(fs::File::create(&bpath).map_err(|e| io_err(&bpath, e))?);
            let adj = &graph.adjacency;
            out.write_all(b"GTS1").map_err(|e| io_err(&bpath, e))?;
            for v in [n as u64, graph.num_features() as u64, adj.nnz() as u64] {
                out.write_all(&v.to_le_bytes()).map_err(|e| io_err(&bpath, e))?;
            }
            for &p in &adj.row_ptr {
                out.write_all(&(p as u64).to_le_bytes())
                    .map_err(|e| io_err(&bpath, e))?;
            }
            for &j in &adj.col_idx {
                out.write_all(&(j as u64).to_le_bytes())
                    .map_err(|e| io_err(&bpath, e))?;
            }
            for &x in graph.features.iter() {
                out.write_all(&(x as f32).to_le_bytes())
                    .map_err(|e| io_err(&bpath, e))?;
            }
            out.flush().map_err(|e| io_err(&bpath, e))?;
        }
    }

    let lpath = dir.join("labels.txt");
    let mut labels = BufWriter::new(fs::File::create(&lpath).map_err(|e| io_err(&lpath, e))?);
    for &y in &graph.labels {
        writeln!(labels, "{y}").map_err(|e| io_err(&lpath, e))?;
    }
    labels.flush().map_err(|e| io_err(&lpath, e))?;

    let spath = dir.join("splits.json");
    let json = serde_json::to_string(&graph.splits).expect("splits serialize");
    fs::write(&spath, json + "\n").map_err(|e| io_err(&spath, e))?;
    Ok(())
}

/// Divides each feature row by its L1 norm in place (rows summing to zero
/// are kept as-is). Standard preprocessing for bag-of-words node features.
pub fn row_l1_normalize(features: &mut Array2<f64>) {
    for mut row in features.rows_mut() {
        let s: f64 = row.iter().map(|x| x.abs()).sum();
        if s > 0.0 {
            row.mapv_inplace(|x| x / s);
        }
    }
}

/// Generates a deterministic planted-partition graph: balanced class labels,
/// features clustered around per-class centroids, and edges drawn with 0.7
/// probability of joining nodes of the same class. The number of undirected
/// edges targets `n * avg_degree / 2`.
pub fn synthesize_graph(
    n: usize,
    avg_degree: f64,
    d: usize,
    num_classes: usize,
    seed: u64,
) -> Graph {
    assert!(n > 0 && num_classes > 0, "need at least one node and class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<u32> = (0..n).map(|i| (i % num_classes) as u32).collect();
    labels.shuffle(&mut rng);

    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i as u32);
    }

    let centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut features = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let c = &centroids[labels[i] as usize];
        for j in 0..d {
            features[(i, j)] = c[j] + 0.5 * rng.gen_range(-1.0..1.0);
        }
    }

    let target = (n as f64 * avg_degree / 2.0).round() as usize;
    let mut pairs: HashSet<(u32, u32)> = HashSet::new();
    let mut edges = Vec::new();
    if n > 1 {
        let mut attempts = 0usize;
        let max_attempts = target.saturating_mul(20).max(100);
        while edges.len() < target && attempts < max_attempts {
            attempts += 1;
            let u = rng.gen_range(0..n) as u32;
            let same_class = rng.gen_bool(0.7);
            let v = if same_class {
                let peers = &by_class[labels[u as usize] as usize];
                peers[rng.gen_range(0..peers.len())]
            } else {
                rng.gen_range(0..n) as u32
            };
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if pairs.insert(key) {
                edges.push(key);
            }
        }
    }

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let n_train = ((n * 3) / 5).max(1).min(n);
    let n_val = (n - n_train) / 2;
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    Graph {
        adjacency: CsrMatrix::adjacency_from_edges(n, &edges),
        features,
        labels,
        num_classes,
        splits,
    }
}

/// Directory holding a graph written in `format`; convenience for tests.
pub fn dataset_paths(dir: &Path, format: GraphFormat) -> Vec<PathBuf> {
    let mut paths = vec![dir.join("labels.txt"), dir.join("splits.json")];
    match format {
        GraphFormat::Text => {
            paths.push(dir.join("edges.txt"));
            paths.push(dir.join("features.csv"));
        }
        GraphFormat::Binary => paths.push(dir.join("graph.bin")),
    }
    paths
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_text_dataset(dir: &Path, edges: &str, features: &str, labels: &str, splits: &str) {
        fs::write(dir.join("edges.txt"), edges).unwrap();
        fs::write(dir.join("features.csv"), features).unwrap();
        fs::write(dir.join("labels.txt"), labels).unwrap();
        fs::write(dir.join("splits.json"), splits).unwrap();
    }

    #[test]
    fn loads_two_node_text_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_text_dataset(
            dir.path(),
            "0 1\n",
            "1.0,2.0\n3.0,4.0\n",
            "0\n1\n",
            r#"{"train":[0],"val":[1],"test":[]}"#,
        );
        let g = load_graph(dir.path(), GraphFormat::Text).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_features(), 2);
        assert_eq!(g.num_directed_edges(), 2);
        assert_eq!(g.num_classes, 2);
        assert_eq!(g.features[(1, 0)], 3.0);
    }

    #[test]
    fn empty_edge_file_gives_edgeless_graph() {
        let dir = tempfile::tempdir().unwrap();
        write_text_dataset(
            dir.path(),
            "",
            "1\n2\n3\n",
            "0\n0\n1\n",
            r#"{"train":[0,1],"val":[2],"test":[]}"#,
        );
        let g = load_graph(dir.path(), GraphFormat::Text).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_directed_edges(), 0);
    }

    #[test]
    fn edge_referencing_missing_node_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_text_dataset(
            dir.path(),
            "0 1\n1 7\n",
            "1\n2\n",
            "0\n0\n",
            r#"{"train":[0],"val":[],"test":[]}"#,
        );
        let err = load_graph(dir.path(), GraphFormat::Text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edges.txt:2"), "got: {msg}");
        assert!(msg.contains('7'), "got: {msg}");
    }

    #[test]
    fn text_round_trip_is_identical() {
        let g = synthesize_graph(40, 4.0, 5, 3, 7);
        let dir = tempfile::tempdir().unwrap();
        write_graph(&g, dir.path(), GraphFormat::Text).unwrap();
        let g2 = load_graph(dir.path(), GraphFormat::Text).unwrap();
        assert_eq!(g, g2);
        // Writing the reloaded graph again produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_graph(&g2, dir2.path(), GraphFormat::Text).unwrap();
        for (a, b) in dataset_paths(dir.path(), GraphFormat::Text)
            .iter()
            .zip(dataset_paths(dir2.path(), GraphFormat::Text).iter())
        {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn binary_round_trip_is_identical() {
        let mut g = synthesize_graph(25, 3.0, 4, 2, 11);
        // Narrow features to f32 values first: the binary block is f32.
        g.features.mapv_inplace(|x| x as f32 as f64);
        let dir = tempfile::tempdir().unwrap();
        write_graph(&g, dir.path(), GraphFormat::Binary).unwrap();
        let g2 = load_graph(dir.path(), GraphFormat::Binary).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn binary_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let g = synthesize_graph(5, 2.0, 2, 2, 0);
        write_graph(&g, dir.path(), GraphFormat::Binary).unwrap();
        let mut bytes = fs::read(dir.path().join("graph.bin")).unwrap();
        bytes[0] = b'X';
        fs::write(dir.path().join("graph.bin"), bytes).unwrap();
        assert!(load_graph(dir.path(), GraphFormat::Binary).is_err());
    }

    #[test]
    fn synthesize_hits_edge_target_and_is_deterministic() {
        let g1 = synthesize_graph(1000, 10.0, 16, 4, 42);
        let g2 = synthesize_graph(1000, 10.0, 16, 4, 42);
        assert_eq!(g1, g2);
        let directed = g1.num_directed_edges() as f64;
        assert!(
            (directed - 10_000.0).abs() <= 2_000.0,
            "directed edge count {directed} not within 20% of 10000"
        );
        // Balanced classes from round-robin assignment.
        let mut counts = vec![0usize; 4];
        for &y in &g1.labels {
            counts[y as usize] += 1;
        }
        assert_eq!(counts, vec![250; 4]);
    }

    #[test]
    fn row_l1_normalize_handles_zero_rows() {
        let mut f = ndarray::array![[2.0, 2.0], [0.0, 0.0]];
        row_l1_normalize(&mut f);
        assert_eq!(f[(0, 0)], 0.5);
        assert_eq!(f[(1, 1)], 0.0);
    }
}
