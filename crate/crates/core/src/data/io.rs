//! Plain-text matrix formats.
//!
//! * Dense CSV: header row `cell_id,<gene>,<gene>,...`, one row per cell,
//!   first column the cell id, remaining fields non-negative integers.
//! * MatrixMarket: `coordinate integer general`, 1-indexed, accompanied by
//!   one-name-per-line gene and cell files (only the first tab-separated
//!   column is used). Either orientation is accepted and is resolved by
//!   matching the dimensions against the name files; cells × genes wins
//!   when both match.
//! * Cell metadata CSV keyed by cell id: optional `label` and `batch`
//!   columns, every other column is a numeric QC covariate.
//!
//! CSV readers skip lines starting with `#`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::matrix::{ExpressionMatrix, QcTable};
use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

fn parse_count(field: &str, path: &Path, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| ScviError::parse(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(ScviError::parse(path, line, format!("non-finite count '{field}'")));
    }
    if v < 0.0 {
        return Err(ScviError::parse(path, line, format!("negative count {v}")));
    }
    if v.fract() != 0.0 {
        return Err(ScviError::parse(path, line, format!("non-integer count {v}")));
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> ScviError {
    let line = e.position().map_or(0, |p| p.line());
    ScviError::parse(path, line, e.to_string())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| ScviError::io(path, e))
}

/// Reads a dense cells × genes CSV.
pub fn load_csv(path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(open(path)?);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(ScviError::parse(path, 1, "header needs a cell id column and at least one gene"));
    }
    let genes: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut cells = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != genes.len() + 1 {
            return Err(ScviError::parse(
                path,
                line,
                format!("expected {} fields, found {}", genes.len() + 1, record.len()),
            ));
        }
        cells.push(record[0].trim().to_string());
        for field in record.iter().skip(1) {
            data.push(parse_count(field, path, line)?);
        }
    }
    let counts = Tensor::matrix(cells.len(), genes.len(), data)?;
    ExpressionMatrix::new(counts, genes, cells)
}

/// Writes the dense CSV format read by [`load_csv`].
pub fn save_csv(data: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ScviError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        write!(w, "cell_id")?;
        for g in data.gene_names() {
            write!(w, ",{g}")?;
        }
        writeln!(w)?;
        for (i, cell) in data.cell_ids().iter().enumerate() {
            write!(w, "{cell}")?;
            for v in data.row(i) {
                write!(w, ",{}", *v as u64)?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| ScviError::io(path, e))
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut names = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| ScviError::io(path, e))?;
        let name = line.split('\t').next().unwrap_or("").trim();
        if !name.is_empty() {
            names.push(name.to_string());
        }
    }
    Ok(names)
}

/// Reads a MatrixMarket coordinate file with its gene and cell name files.
pub fn load_mtx(
    matrix_path: impl AsRef<Path>,
    genes_path: impl AsRef<Path>,
    cells_path: impl AsRef<Path>,
) -> Result<ExpressionMatrix> {
    let path = matrix_path.as_ref();
    let genes = read_names(genes_path.as_ref())?;
    let cells = read_names(cells_path.as_ref())?;
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, banner) = lines
        .next()
        .ok_or_else(|| ScviError::parse(path, 1, "empty file"))?;
    let banner = banner.map_err(|e| ScviError::io(path, e))?;
    let tokens: Vec<String> = banner.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(ScviError::parse(path, 1, "missing %%MatrixMarket matrix banner"));
    }
    if tokens[2] != "coordinate" {
        return Err(ScviError::parse(path, 1, "only coordinate format is supported"));
    }
    if tokens[3] != "integer" && tokens[3] != "real" {
        return Err(ScviError::parse(path, 1, format!("unsupported field type '{}'", tokens[3])));
    }
    if tokens[4] != "general" {
        return Err(ScviError::parse(path, 1, format!("unsupported symmetry '{}'", tokens[4])));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut counts: Option<Tensor> = None;
    let mut transposed = false;
    let mut seen = 0usize;
    for (idx, line) in lines {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| ScviError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(ScviError::parse(path, line_no, "size line needs rows, columns, entries"));
                }
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| ScviError::parse(path, line_no, format!("bad size field '{s}'")))
                };
                let (r, c, nnz) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
                transposed = if r == cells.len() && c == genes.len() {
                    false
                } else if r == genes.len() && c == cells.len() {
                    true
                } else {
                    return Err(ScviError::parse(
                        path,
                        line_no,
                        format!(
                            "matrix is {r}×{c} but there are {} cells and {} genes",
                            cells.len(),
                            genes.len()
                        ),
                    ));
                };
                size = Some((r, c, nnz));
                counts = Some(Tensor::zeros(&[cells.len(), genes.len()]));
            }
            Some((r, c, _)) => {
                if fields.len() != 3 {
                    return Err(ScviError::parse(path, line_no, "entry needs row, column, value"));
                }
                let index = |s: &str, max: usize| -> Result<usize> {
                    let i: usize = s
                        .parse()
                        .map_err(|_| ScviError::parse(path, line_no, format!("bad index '{s}'")))?;
                    if i == 0 || i > max {
                        return Err(ScviError::parse(path, line_no, format!("index {i} outside 1..={max}")));
                    }
                    Ok(i - 1)
                };
                let (i, j) = (index(fields[0], r)?, index(fields[1], c)?);
                let v = parse_count(fields[2], path, line_no)?;
                let (cell, gene) = if transposed { (j, i) } else { (i, j) };
                let t = counts.as_mut().expect("allocated with size line");
                let ng = genes.len();
                t.data_mut()[cell * ng + gene] += v;
                seen += 1;
            }
        }
    }
    let (_, _, nnz) = size.ok_or_else(|| ScviError::parse(path, 1, "missing size line"))?;
    if seen != nnz {
        return Err(ScviError::parse(
            path,
            0,
            format!("size line declares {nnz} entries, found {seen}"),
        ));
    }
    ExpressionMatrix::new(counts.expect("allocated with size line"), genes, cells)
}

/// Attaches labels, batches and QC covariates from a metadata CSV.
pub fn load_metadata(data: ExpressionMatrix, path: impl AsRef<Path>) -> Result<ExpressionMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.is_empty() {
        return Err(ScviError::parse(path, 1, "empty header"));
    }
    let label_col = header.iter().position(|h| h.trim() == "label");
    let batch_col = header.iter().position(|h| h.trim() == "batch");
    let qc_cols: Vec<usize> = (1..header.len())
        .filter(|&c| Some(c) != label_col && Some(c) != batch_col)
        .collect();

    let index: std::collections::HashMap<&str, usize> = data
        .cell_ids()
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let n = data.n_cells();
    let mut labels: Vec<Option<String>> = vec![None; n];
    let mut batches: Vec<Option<String>> = vec![None; n];
    let mut qc = vec![f64::NAN; n * qc_cols.len()];
    let mut found = vec![false; n];
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = record[0].trim();
        let Some(&i) = index.get(cell) else {
            // metadata for cells not in the matrix (e.g. filtered) is ignored
            continue;
        };
        if found[i] {
            return Err(ScviError::parse(path, line, format!("duplicate cell id '{cell}'")));
        }
        found[i] = true;
        if let Some(c) = label_col {
            labels[i] = Some(record[c].trim().to_string());
        }
        if let Some(c) = batch_col {
            batches[i] = Some(record[c].trim().to_string());
        }
        for (k, &c) in qc_cols.iter().enumerate() {
            let v: f64 = record[c].trim().parse().map_err(|_| {
                ScviError::parse(path, line, format!("QC value '{}' is not a number", &record[c]))
            })?;
            if !v.is_finite() {
                return Err(ScviError::parse(path, line, format!("non-finite QC value '{}'", &record[c])));
            }
            qc[i * qc_cols.len() + k] = v;
        }
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(ScviError::Data(format!(
            "{}: no metadata for cell '{}'",
            path.display(),
            data.cell_ids()[i]
        )));
    }
    let mut out = data;
    if label_col.is_some() {
        out = out.with_labels(labels.into_iter().map(Option::unwrap_or_default).collect())?;
    }
    if batch_col.is_some() {
        out = out.with_batches(batches.into_iter().map(Option::unwrap_or_default).collect())?;
    }
    if !qc_cols.is_empty() {
        let names = qc_cols.iter().map(|&c| header[c].trim().to_string()).collect();
        out = out.with_qc(QcTable {
            names,
            values: Tensor::matrix(n, qc_cols.len(), qc)?,
        })?;
    }
    Ok(out)
}

/// Writes the metadata CSV read by [`load_metadata`].
pub fn save_metadata(data: &ExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ScviError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["cell_id".to_string()];
    if data.labels().is_some() {
        header.push("label".into());
    }
    if data.batches().is_some() {
        header.push("batch".into());
    }
    if let Some(qc) = data.qc() {
        header.extend(qc.names.iter().cloned());
    }
    let err = |e: csv::Error| ScviError::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    for (i, cell) in data.cell_ids().iter().enumerate() {
        let mut row = vec![cell.clone()];
        if let Some(l) = data.labels() {
            row.push(l[i].clone());
        }
        if let Some(b) = data.batches() {
            row.push(b[i].clone());
        }
        if let Some(qc) = data.qc() {
            row.extend(qc.values.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| ScviError::io(path, e))
}
