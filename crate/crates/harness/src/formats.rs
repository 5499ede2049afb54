//! On-disk dataset formats and checkpoints.
//!
//! Nodes are JSON lines, edges are `src,dst` text lines, classes are one
//! name per line, embeddings are the little-endian "EMB1" binary layout:
//! 4 magic bytes, u32 rows, u32 dim, then rows*dim f32 values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use mmgl_core::graph::{
    AssemblyCounts, EmbeddingTable, GraphError, Modality, MultimodalGraph, NodeRecord,
};
use mmgl_core::prompt::DatasetDomain;
use mmgl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";

#[derive(Debug, thiserror::Error)]
pub enum Emb1Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"EMB1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: truncated header, got {got} of 12 bytes")]
    TruncatedHeader { path: PathBuf, got: usize },
    #[error(
        "{path}: truncated data, header promises {rows}x{dim} ({expected} bytes) but only {got} follow"
    )]
    TruncatedData {
        path: PathBuf,
        rows: u32,
        dim: u32,
        expected: u64,
        got: u64,
    },
    #[error("{path}: {extra} trailing bytes after {rows}x{dim} values")]
    TrailingBytes {
        path: PathBuf,
        rows: u32,
        dim: u32,
        extra: u64,
    },
    #[error("{path}: header {rows}x{dim} does not fit in memory")]
    Oversized { path: PathBuf, rows: u32, dim: u32 },
}

/// Raw matrix as read from an EMB1 file; the modality tag is not part of
/// the format.
#[derive(Debug, Clone, PartialEq)]
pub struct Emb1Matrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

pub fn read_emb1(path: &Path) -> Result<Emb1Matrix, Emb1Error> {
    let io = |source| Emb1Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(io)?;
    if bytes.len() < 12 {
        if bytes.len() >= 4 && bytes[..4] != EMB1_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Emb1Error::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        return Err(Emb1Error::TruncatedHeader {
            path: path.to_path_buf(),
            got: bytes.len(),
        });
    }
    if bytes[..4] != EMB1_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Emb1Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let values = (rows as u64) * (dim as u64);
    let expected = values * 4;
    let got = (bytes.len() - 12) as u64;
    if got < expected {
        return Err(Emb1Error::TruncatedData {
            path: path.to_path_buf(),
            rows,
            dim,
            expected,
            got,
        });
    }
    if got > expected {
        return Err(Emb1Error::TrailingBytes {
            path: path.to_path_buf(),
            rows,
            dim,
            extra: got - expected,
        });
    }
    if values > (u32::MAX as u64) {
        return Err(Emb1Error::Oversized {
            path: path.to_path_buf(),
            rows,
            dim,
        });
    }
    let mut data = Vec::with_capacity(values as usize);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Emb1Matrix {
        rows: rows as usize,
        dim: dim as usize,
        data,
    })
}

pub fn write_emb1(path: &Path, rows: usize, dim: usize, data: &[f32]) -> std::io::Result<()> {
    assert_eq!(rows * dim, data.len(), "row-major length mismatch");
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&EMB1_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_embedding_table(path: &Path, modality: Modality) -> Result<EmbeddingTable, IngestError> {
    let m = read_emb1(path)?;
    Ok(EmbeddingTable::new(modality, m.rows, m.dim, m.data)?)
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Emb1(#[from] Emb1Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("class file {path} is empty")]
    NoClasses { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(test, derive(Default))]
pub struct DatasetPaths {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub classes: PathBuf,
    pub text_embeddings: Option<PathBuf>,
    pub image_embeddings: Option<PathBuf>,
}

/// What `load_graph` saw; `ingest` prints this as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub nodes: usize,
    pub edges: usize,
    pub classes: usize,
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
    pub text_dim: Option<usize>,
    pub image_dim: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct NodeLine {
    id: usize,
    text: String,
    label: usize,
    #[serde(default)]
    image_row: Option<usize>,
    #[serde(default)]
    image_path: Option<String>,
}

pub fn load_graph(
    paths: &DatasetPaths,
    domain: Option<DatasetDomain>,
) -> Result<(MultimodalGraph, LoadReport), IngestError> {
    let nodes = read_nodes(&paths.nodes)?;
    let edges = read_edges(&paths.edges)?;
    let classes = read_classes(&paths.classes)?;

    let mut tables = Vec::new();
    let mut text_dim = None;
    let mut image_dim = None;
    if let Some(path) = &paths.text_embeddings {
        let table = read_embedding_table(path, Modality::Text)?;
        text_dim = Some(table.dim());
        tables.push(table);
    }
    if let Some(path) = &paths.image_embeddings {
        let table = read_embedding_table(path, Modality::Image)?;
        image_dim = Some(table.dim());
        tables.push(table);
    }

    let (graph, counts) = MultimodalGraph::assemble(nodes, &edges, classes, tables, domain)?;
    let report = LoadReport {
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        classes: graph.classes().len(),
        self_loops_dropped: counts.self_loops_dropped,
        duplicate_edges_dropped: counts.duplicate_edges_dropped,
        text_dim,
        image_dim,
    };
    Ok((graph, report))
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufReader::new(file).lines())
}

fn read_nodes(path: &Path) -> Result<Vec<NodeRecord>, IngestError> {
    let mut nodes = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: NodeLine =
            serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        nodes.push(NodeRecord {
            id: parsed.id,
            text: parsed.text,
            label: parsed.label,
            image_row: parsed.image_row,
            image_path: parsed.image_path,
        });
    }
    Ok(nodes)
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>, IngestError> {
    let mut edges = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (src, dst) = line
            .split_once(',')
            .ok_or_else(|| malformed("expected \"src,dst\"".to_string()))?;
        let src = src
            .trim()
            .parse::<usize>()
            .map_err(|e| malformed(format!("bad source id: {e}")))?;
        let dst = dst
            .trim()
            .parse::<usize>()
            .map_err(|e| malformed(format!("bad destination id: {e}")))?;
        edges.push((src, dst));
    }
    Ok(edges)
}

fn read_classes(path: &Path) -> Result<Vec<String>, IngestError> {
    let mut classes = Vec::new();
    for line in open_lines(path)? {
        let line = line.map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if !line.trim().is_empty() {
            classes.push(line.trim_end().to_string());
        }
    }
    if classes.is_empty() {
        return Err(IngestError::NoClasses {
            path: path.to_path_buf(),
        });
    }
    Ok(classes)
}

/// Checkpoints: a manifest JSON next to one EMB1 file per named parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub parameters: BTreeMap<String, (usize, usize)>,
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    parameters: &[(&str, &Tensor)],
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut listed = BTreeMap::new();
    for (name, tensor) in parameters {
        listed.insert(name.to_string(), tensor.shape());
        write_emb1(
            &dir.join(format!("{name}.emb1")),
            tensor.rows(),
            tensor.cols(),
            tensor.data(),
        )?;
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        parameters: listed,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>), IngestError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|source| IngestError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&raw).map_err(|e| IngestError::Malformed {
            path: manifest_path,
            line: 1,
            reason: e.to_string(),
        })?;
    let mut tensors = BTreeMap::new();
    for (name, &(rows, cols)) in &manifest.parameters {
        let m = read_emb1(&dir.join(format!("{name}.emb1")))?;
        if m.rows != rows || m.dim != cols {
            return Err(IngestError::Malformed {
                path: dir.join(format!("{name}.emb1")),
                line: 1,
                reason: format!(
                    "shape {}x{} does not match manifest {rows}x{cols}",
                    m.rows, m.dim
                ),
            });
        }
        tensors.insert(name.clone(), Tensor::from_vec(m.rows, m.dim, m.data).unwrap());
    }
    Ok((manifest, tensors))
}

/// Convenience used by reports and tests.
pub fn counts_of(counts: &AssemblyCounts) -> (usize, usize) {
    (counts.self_loops_dropped, counts.duplicate_edges_dropped)
}

pub fn read_to_string(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_bytes(path: &Path) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(path: &Path, contents: &str) {
        fs::write(path, contents).unwrap();
    }

    #[test]
    fn emb1_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("t.emb1");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.0).collect();
        write_emb1(&path, 3, 4, &data).unwrap();
        let m = read_emb1(&path).unwrap();
        assert_eq!((m.rows, m.dim), (3, 4));
        assert_eq!(m.data, data);
    }

    #[test]
    fn emb1_truncation_errors_name_the_byte_counts() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("t.emb1");
        let data = vec![1.0f32; 8];
        write_emb1(&path, 2, 4, &data).unwrap();
        let full = fs::read(&path).unwrap();

        fs::write(&path, &full[..20]).unwrap();
        match read_emb1(&path).unwrap_err() {
            Emb1Error::TruncatedData {
                rows,
                dim,
                expected,
                got,
                ..
            } => {
                assert_eq!((rows, dim), (2, 4));
                assert_eq!(expected, 32);
                assert_eq!(got, 8);
            }
            other => panic!("wrong error: {other}"),
        }

        fs::write(&path, &full[..7]).unwrap();
        assert!(matches!(
            read_emb1(&path).unwrap_err(),
            Emb1Error::TruncatedHeader { got: 7, .. }
        ));

        let mut extra = full.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(
            read_emb1(&path).unwrap_err(),
            Emb1Error::TrailingBytes { extra: 1, .. }
        ));

        fs::write(&path, b"NOPE, not embeddings").unwrap();
        assert!(matches!(
            read_emb1(&path).unwrap_err(),
            Emb1Error::BadMagic { found: [b'N', b'O', b'P', b'E'], .. }
        ));
    }

    #[test]
    fn load_graph_reads_the_three_files() {
        let dir = TempDir::new().unwrap();
        let nodes = dir.path().join("nodes.jsonl");
        let edges = dir.path().join("edges.txt");
        let classes = dir.path().join("classes.txt");
        write(
            &nodes,
            r#"{"id":0,"text":"a","label":0}
{"id":1,"text":"b","label":1}
{"id":2,"text":"c","label":0}
"#,
        );
        write(&edges, "0,1\n1,2\n1,2\n2,2\n");
        write(&classes, "alpha\nbeta\n");
        let paths = DatasetPaths {
            nodes,
            edges,
            classes,
            text_embeddings: None,
            image_embeddings: None,
        };
        let (graph, report) = load_graph(&paths, None).unwrap();
        assert_eq!(graph.node_count(), 3);
        assert_eq!(graph.degree(1), 2);
        assert_eq!(report.edges, 2);
        assert_eq!(report.self_loops_dropped, 1);
        assert_eq!(report.duplicate_edges_dropped, 1);
        assert_eq!(report.classes, 2);
    }

    #[test]
    fn malformed_node_line_is_reported_with_its_number() {
        let dir = TempDir::new().unwrap();
        let nodes = dir.path().join("nodes.jsonl");
        write(&nodes, "{\"id\":0,\"text\":\"a\",\"label\":0}\nnot json\n");
        let err = read_nodes(&nodes).unwrap_err();
        match err {
            IngestError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_named_tensors() {
        let dir = TempDir::new().unwrap();
        let w = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(1, 3, vec![0.5, -0.5, 0.0]).unwrap();
        save_checkpoint(
            dir.path(),
            "encoder",
            serde_json::json!({"seed": 7}),
            &[("text_head", &w), ("image_head", &b)],
        )
        .unwrap();
        let (manifest, tensors) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.kind, "encoder");
        assert_eq!(tensors["text_head"], w);
        assert_eq!(tensors["image_head"], b);
    }
}
