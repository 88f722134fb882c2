//! CSV and JSON artifacts.
//!
//! Embeddings: `id,label,domain,z0..z{l-1}`. t-SNE: `id,label,domain,y0,y1,kl_final`.
//! Unlabeled rows leave `label` empty. Floats use the shortest representation
//! that round-trips, so files are byte-stable across runs.

use std::path::Path;

use serde::Serialize;

use super::tsne::TsneResult;
use super::EmbeddingSet;
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_rows(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn prefix(emb: &EmbeddingSet, i: usize) -> Vec<String> {
    vec![
        emb.ids[i].clone(),
        emb.labels[i].map(|l| l.to_string()).unwrap_or_default(),
        emb.domains[i].clone(),
    ]
}

pub fn write_embeddings_csv(path: &Path, emb: &EmbeddingSet) -> Result<()> {
    let mut header = vec!["id".to_string(), "label".into(), "domain".into()];
    header.extend((0..emb.dim()).map(|k| format!("z{k}")));
    write_rows(
        path,
        header,
        (0..emb.len()).map(|i| {
            let mut r = prefix(emb, i);
            r.extend(emb.vectors[i].iter().map(f64::to_string));
            r
        }),
    )
}

/// Writes the 2-D embedding; `emb` supplies ids, labels and domains.
pub fn write_tsne_csv(path: &Path, emb: &EmbeddingSet, result: &TsneResult) -> Result<()> {
    if result.y.len() != emb.len() {
        return Err(Error::Dimension(format!(
            "{} t-SNE points for {} samples",
            result.y.len(),
            emb.len()
        )));
    }
    let header = ["id", "label", "domain", "y0", "y1", "kl_final"].map(String::from).to_vec();
    write_rows(
        path,
        header,
        (0..emb.len()).map(|i| {
            let mut r = prefix(emb, i);
            r.push(result.y[i][0].to_string());
            r.push(result.y[i][1].to_string());
            r.push(result.kl_final.to_string());
            r
        }),
    )
}

/// Reads either CSV flavor. Vector columns are those named `z<k>` or `y<k>`;
/// anything else after `domain` is ignored.
pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingSet> {
    let decode = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "label" || &header[2] != "domain" {
        return Err(decode("header must start with id,label,domain and have vector columns".into()));
    }
    let is_vec_col = |h: &str| {
        let mut c = h.chars();
        matches!(c.next(), Some('z' | 'y')) && !c.as_str().is_empty() && c.as_str().chars().all(|d| d.is_ascii_digit())
    };
    let cols: Vec<usize> = (3..header.len()).filter(|&k| is_vec_col(&header[k])).collect();
    if cols.is_empty() {
        return Err(decode("no z<k> or y<k> columns".into()));
    }
    let (mut ids, mut vectors, mut labels, mut domains) = (vec![], vec![], vec![], vec![]);
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = line + 2;
        ids.push(rec[0].to_string());
        labels.push(if rec[1].is_empty() {
            None
        } else {
            Some(rec[1].parse().map_err(|_| decode(format!("line {row}: bad label `{}`", &rec[1])))?)
        });
        domains.push(rec[2].to_string());
        vectors.push(
            cols.iter()
                .map(|&k| {
                    rec[k]
                        .parse::<f64>()
                        .map_err(|_| decode(format!("line {row}, column {}: bad number `{}`", &header[k], &rec[k])))
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    EmbeddingSet::new(ids, vectors, labels, domains)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
