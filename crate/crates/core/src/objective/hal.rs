//! Hubness-aware contrastive loss and the bidirectional InfoNCE alternative,
//! recorded on the tape so gradients reach the similarity matrix.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

/// The positive cell for every row and every column of a similarity matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Positives {
    row_to_col: Vec<usize>,
    col_to_row: Vec<usize>,
}

impl Positives {
    /// Row `i` pairs with column `i`.
    pub fn diagonal(n: usize) -> Self {
        Positives {
            row_to_col: (0..n).collect(),
            col_to_row: (0..n).collect(),
        }
    }

    /// Row `i` pairs with column `perm[i]`.
    pub fn permutation(perm: &[usize]) -> Result<Self> {
        let mut col_to_row = vec![usize::MAX; perm.len()];
        for (r, &c) in perm.iter().enumerate() {
            if c >= perm.len() || col_to_row[c] != usize::MAX {
                return Err(Error::shape("positives", format!("{perm:?} is not a permutation")));
            }
            col_to_row[c] = r;
        }
        Ok(Positives {
            row_to_col: perm.to_vec(),
            col_to_row,
        })
    }

    /// Builds from `(row, col)` pairs. When a row or column appears in
    /// several pairs the first one wins.
    pub fn from_pairs(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut row_to_col = vec![usize::MAX; rows];
        let mut col_to_row = vec![usize::MAX; cols];
        for &(r, c) in pairs {
            if r >= rows || c >= cols {
                return Err(Error::shape("positives", format!("pair ({r}, {c}) outside {rows}x{cols}")));
            }
            if row_to_col[r] == usize::MAX {
                row_to_col[r] = c;
            }
            if col_to_row[c] == usize::MAX {
                col_to_row[c] = r;
            }
        }
        if let Some(r) = row_to_col.iter().position(|&c| c == usize::MAX) {
            return Err(Error::MissingPositive { axis: "row", index: r });
        }
        if let Some(c) = col_to_row.iter().position(|&r| r == usize::MAX) {
            return Err(Error::MissingPositive { axis: "column", index: c });
        }
        Ok(Positives { row_to_col, col_to_row })
    }

    pub fn rows(&self) -> usize {
        self.row_to_col.len()
    }

    pub fn cols(&self) -> usize {
        self.col_to_row.len()
    }

    pub fn row_to_col(&self) -> &[usize] {
        &self.row_to_col
    }

    pub fn col_to_row(&self) -> &[usize] {
        &self.col_to_row
    }

    fn transposed(&self) -> Positives {
        Positives {
            row_to_col: self.col_to_row.clone(),
            col_to_row: self.row_to_col.clone(),
        }
    }

    fn row_mask(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows(), self.cols()));
        for (r, &c) in self.row_to_col.iter().enumerate() {
            m[[r, c]] = 1.0;
        }
        m
    }
}

/// Row direction of the loss:
/// `(mu/Q) sum_q [log(sum_{r != pos(q)} exp((S_qr - gamma)/mu) + 1) - log(S_q,pos(q) + 1)]`
fn hal_rows(tape: &mut Tape, s: Var, pos: &Positives, gamma: f64, mu: f64) -> Result<Var> {
    let (q, r) = tape.shape(s);
    let mask = pos.row_mask();
    let negatives = mask.mapv(|m| 1.0 - m);
    let ones_r = tape.constant(Array2::ones((r, 1)));

    let shifted = tape.add_scalar(s, -gamma)?;
    let scaled = tape.scale(shifted, 1.0 / mu)?;
    let e = tape.exp(scaled)?;
    let neg_mask = tape.constant(negatives);
    let e = tape.mul(e, neg_mask)?;
    let neg_sum = tape.matmul(e, ones_r)?;
    let neg_sum = tape.add_scalar(neg_sum, 1.0)?;
    let neg_log = tape.log(neg_sum)?;

    let pos_mask = tape.constant(mask);
    let p = tape.mul(s, pos_mask)?;
    let p = tape.matmul(p, ones_r)?;
    let p = tape.add_scalar(p, 1.0)?;
    let pos_log = tape.log(p)?;
    let pos_log = tape.scale(pos_log, -1.0)?;

    let per_row = tape.add(neg_log, pos_log)?;
    let total = tape.sum_all(per_row)?;
    tape.scale(total, mu / q as f64)
}

/// Bidirectional hubness-aware contrastive loss over a Q x R similarity matrix.
pub fn hal_loss(tape: &mut Tape, s: Var, positives: &Positives, gamma: f64, mu: f64) -> Result<Var> {
    let (q, r) = tape.shape(s);
    if positives.rows() != q || positives.cols() != r {
        return Err(Error::shape(
            "hal",
            format!("similarity {q}x{r} vs positives {}x{}", positives.rows(), positives.cols()),
        ));
    }
    let rows = hal_rows(tape, s, positives, gamma, mu)?;
    let st = tape.transpose(s)?;
    let cols = hal_rows(tape, st, &positives.transposed(), gamma, mu)?;
    tape.add(rows, cols)
}

/// Single-direction loss of `anchors` (Q x d, unit rows) against fixed keys:
/// each anchor's positive is the matching row of `positives`, its negatives are
/// all rows of `bank`. Neither `positives` nor `bank` receive gradient.
pub fn bank_hal_loss(
    tape: &mut Tape,
    anchors: Var,
    positives: &Array2<f64>,
    bank: &Array2<f64>,
    gamma: f64,
    mu: f64,
) -> Result<Var> {
    let (q, d) = tape.shape(anchors);
    if positives.dim() != (q, d) {
        return Err(Error::shape("bank-hal", format!("anchors {:?} vs positives {:?}", (q, d), positives.dim())));
    }
    if bank.nrows() > 0 && bank.ncols() != d {
        return Err(Error::shape("bank-hal", format!("bank width {} vs {}", bank.ncols(), d)));
    }
    let ones_d = tape.constant(Array2::ones((d, 1)));
    let keys = tape.constant(positives.clone());
    let p = tape.mul(anchors, keys)?;
    let p = tape.matmul(p, ones_d)?;
    let p = tape.add_scalar(p, 1.0)?;
    let pos_log = tape.log(p)?;
    let mut per_row = tape.scale(pos_log, -1.0)?;

    // An empty bank contributes log(0 + 1) = 0.
    if bank.nrows() > 0 {
        let bank_t = tape.constant(bank.t().to_owned());
        let sims = tape.matmul(anchors, bank_t)?;
        let shifted = tape.add_scalar(sims, -gamma)?;
        let scaled = tape.scale(shifted, 1.0 / mu)?;
        let e = tape.exp(scaled)?;
        let ones_m = tape.constant(Array2::ones((bank.nrows(), 1)));
        let neg_sum = tape.matmul(e, ones_m)?;
        let neg_sum = tape.add_scalar(neg_sum, 1.0)?;
        let neg_log = tape.log(neg_sum)?;
        per_row = tape.add(neg_log, per_row)?;
    }
    let total = tape.sum_all(per_row)?;
    tape.scale(total, mu / q as f64)
}

/// Mean cross-entropy of each row's positive under row-softmax(S / temperature).
fn infonce_rows(tape: &mut Tape, s: Var, pos: &Positives, temperature: f64) -> Result<Var> {
    let q = tape.shape(s).0;
    let logits = tape.scale(s, 1.0 / temperature)?;
    let p = tape.row_softmax(logits)?;
    let logp = tape.log(p)?;
    let mask = tape.constant(pos.row_mask());
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / q as f64)
}

/// Symmetric InfoNCE over rows and columns, averaged.
pub fn infonce_loss(tape: &mut Tape, s: Var, positives: &Positives, temperature: f64) -> Result<Var> {
    let (q, r) = tape.shape(s);
    if q != r {
        return Err(Error::NotSquare { rows: q, cols: r });
    }
    if positives.rows() != q {
        return Err(Error::shape("infonce", format!("{} positives for {q} rows", positives.rows())));
    }
    let rows = infonce_rows(tape, s, positives, temperature)?;
    let st = tape.transpose(s)?;
    let cols = infonce_rows(tape, st, &positives.transposed(), temperature)?;
    let both = tape.add(rows, cols)?;
    tape.scale(both, 0.5)
}
