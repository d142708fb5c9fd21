//! Count matrices: validation, file formats, covariates, splitting, gene
//! selection and a forward simulator of the generative model.

mod covariates;
mod io;
mod matrix;
mod simulate;

pub use covariates::{CovariateEncoder, Covariates};
pub use io::{load_csv, load_metadata, load_mtx, save_csv, save_metadata};
pub use matrix::{select_variable_genes, split, ExpressionMatrix, QcTable};
pub use simulate::{simulate, GroundTruth, GroundTruthDecoder, SimulatedData, SimulationSpec};
