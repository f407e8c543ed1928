use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("blank id {id} out of range for vocabulary of size {vocab}")]
    BlankOutOfRange { id: usize, vocab: usize },

    #[error("token sequence contains the blank id {0} at position {1}")]
    BlankInTokens(usize, usize),

    #[error("malformed lattice document: {0}")]
    Malformed(String),

    #[error("non-finite entry in {grid} at ({t}, {u})")]
    NonFinite {
        grid: &'static str,
        t: usize,
        u: usize,
    },

    #[error("path enumeration needs {needed} paths, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("no data: {0}")]
    NoData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at seed {seed}, epoch {epoch}: {detail}")]
    Diverged {
        seed: u64,
        epoch: usize,
        detail: String,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
