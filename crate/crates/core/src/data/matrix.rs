use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScviError};
use crate::tensor::Tensor;

/// Named per-cell quality-control covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct QcTable {
    pub names: Vec<String>,
    /// cells × columns
    pub values: Tensor,
}

/// Cells × genes matrix of non-negative integer counts plus optional
/// per-cell annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    counts: Tensor,
    gene_names: Vec<String>,
    cell_ids: Vec<String>,
    labels: Option<Vec<String>>,
    batches: Option<Vec<String>>,
    qc: Option<QcTable>,
}

fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(ScviError::Data(format!("duplicate {what} '{n}'")));
        }
    }
    Ok(())
}

impl ExpressionMatrix {
    /// Validates and wraps a dense cells × genes count tensor.
    pub fn new(counts: Tensor, gene_names: Vec<String>, cell_ids: Vec<String>) -> Result<Self> {
        if counts.shape().len() != 2 {
            return Err(ScviError::Dimension(format!(
                "counts must be a matrix, got shape {:?}",
                counts.shape()
            )));
        }
        if counts.rows() != cell_ids.len() || counts.cols() != gene_names.len() {
            return Err(ScviError::Dimension(format!(
                "counts are {}×{} but {} cell ids and {} gene names were given",
                counts.rows(),
                counts.cols(),
                cell_ids.len(),
                gene_names.len()
            )));
        }
        if let Some((i, v)) = counts
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0))
        {
            let g = counts.cols().max(1);
            return Err(ScviError::Data(format!(
                "count at cell {}, gene {} is {v}; counts must be non-negative integers",
                i / g,
                i % g
            )));
        }
        check_unique(&gene_names, "gene name")?;
        check_unique(&cell_ids, "cell id")?;
        Ok(ExpressionMatrix {
            counts,
            gene_names,
            cell_ids,
            labels: None,
            batches: None,
            qc: None,
        })
    }

    /// Matrix with generated names `gene0..` and `cell0..`.
    pub fn from_counts(counts: Tensor) -> Result<Self> {
        let genes = (0..counts.cols()).map(|g| format!("gene{g}")).collect();
        let cells = (0..counts.rows()).map(|c| format!("cell{c}")).collect();
        Self::new(counts, genes, cells)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        self.check_len(labels.len(), "labels")?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_batches(mut self, batches: Vec<String>) -> Result<Self> {
        self.check_len(batches.len(), "batch ids")?;
        self.batches = Some(batches);
        Ok(self)
    }

    pub fn with_qc(mut self, qc: QcTable) -> Result<Self> {
        self.check_len(qc.values.rows(), "QC rows")?;
        if qc.values.cols() != qc.names.len() {
            return Err(ScviError::Dimension("QC names do not match QC columns".into()));
        }
        if !qc.values.is_finite() {
            return Err(ScviError::Data("QC table contains non-finite values".into()));
        }
        self.qc = Some(qc);
        Ok(self)
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.n_cells() {
            return Err(ScviError::Dimension(format!(
                "{len} {what} for {} cells",
                self.n_cells()
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.counts.rows()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn counts(&self) -> &Tensor {
        &self.counts
    }

    /// Mutable counts for in-crate transforms that preserve validity.
    pub(crate) fn counts_mut(&mut self) -> &mut Tensor {
        &mut self.counts
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn batches(&self) -> Option<&[String]> {
        self.batches.as_deref()
    }

    pub fn qc(&self) -> Option<&QcTable> {
        self.qc.as_ref()
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        self.counts.row(cell)
    }

    /// Keeps the given cells, in the given order.
    pub fn subset_cells(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_cells()) {
            return Err(ScviError::Parameter(format!("cell index {bad} out of range")));
        }
        let pick = |v: &Vec<String>| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Ok(ExpressionMatrix {
            counts: self.counts.select_rows(indices),
            gene_names: self.gene_names.clone(),
            cell_ids: pick(&self.cell_ids),
            labels: self.labels.as_ref().map(pick),
            batches: self.batches.as_ref().map(pick),
            qc: self.qc.as_ref().map(|q| QcTable {
                names: q.names.clone(),
                values: q.values.select_rows(indices),
            }),
        })
    }

    /// Keeps the given genes, in the given order.
    pub fn subset_genes(&self, genes: &[usize]) -> Result<Self> {
        if let Some(&bad) = genes.iter().find(|&&g| g >= self.n_genes()) {
            return Err(ScviError::Parameter(format!("gene index {bad} out of range")));
        }
        let n = self.n_cells();
        let mut data = Vec::with_capacity(n * genes.len());
        for i in 0..n {
            let row = self.counts.row(i);
            data.extend(genes.iter().map(|&g| row[g]));
        }
        Ok(ExpressionMatrix {
            counts: Tensor::matrix(n, genes.len(), data)?,
            gene_names: genes.iter().map(|&g| self.gene_names[g].clone()).collect(),
            ..self.clone()
        })
    }

    /// Indices of cells whose label equals `label`.
    pub fn cells_with_label(&self, label: &str) -> Vec<usize> {
        self.labels
            .as_ref()
            .map(|ls| {
                ls.iter()
                    .enumerate()
                    .filter(|(_, l)| l.as_str() == label)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default()
    }

    /// `log(1 + x)` of the counts.
    pub fn log1p(&self) -> Tensor {
        self.counts.map(f64::ln_1p)
    }
}

/// Keeps the `k` genes with the largest variance of `log(1 + x)`; ties are
/// broken by gene name. Retained genes stay in their original column order.
pub fn select_variable_genes(data: &ExpressionMatrix, k: usize) -> Result<ExpressionMatrix> {
    let g = data.n_genes();
    if k > g {
        return Err(ScviError::Parameter(format!(
            "cannot select {k} variable genes out of {g}"
        )));
    }
    let n = data.n_cells() as f64;
    let logged = data.log1p();
    let mut mean = vec![0.0; g];
    for i in 0..data.n_cells() {
        for (m, v) in mean.iter_mut().zip(logged.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; g];
    for i in 0..data.n_cells() {
        for ((s, v), m) in var.iter_mut().zip(logged.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        var[b]
            .total_cmp(&var[a])
            .then_with(|| data.gene_names[a].cmp(&data.gene_names[b]))
    });
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    data.subset_genes(&keep)
}

/// Seeded uniform split of cells into `(train, heldout)`.
pub fn split(
    data: &ExpressionMatrix,
    heldout_fraction: f64,
    seed: u64,
) -> Result<(ExpressionMatrix, ExpressionMatrix)> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(ScviError::Parameter(format!(
            "held-out fraction must lie in (0, 1), got {heldout_fraction}"
        )));
    }
    let n = data.n_cells();
    let n_heldout = (heldout_fraction * n as f64).round() as usize;
    if n_heldout == 0 || n_heldout == n {
        return Err(ScviError::Parameter(format!(
            "held-out fraction {heldout_fraction} of {n} cells leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut heldout = order[..n_heldout].to_vec();
    let mut train = order[n_heldout..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    Ok((data.subset_cells(&train)?, data.subset_cells(&heldout)?))
}
