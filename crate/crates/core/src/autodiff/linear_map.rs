use crate::error::{Error, Result};

/// Fixed sparse linear map between per-sample arrays, stored row-wise
/// (one row per output element).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl LinearMap {
    /// Builds a map from one list of `(input index, weight)` terms per output
    /// element, in output order.
    pub fn from_rows(
        in_shape: &[usize],
        out_shape: &[usize],
        rows: impl IntoIterator<Item = Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let in_len: usize = in_shape.iter().product();
        let mut row_start = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                if c >= in_len {
                    return Err(Error::invalid(format!("linear map column {c} ≥ {in_len}")));
                }
                cols.push(c);
                weights.push(w);
            }
            row_start.push(cols.len());
        }
        let out_len: usize = out_shape.iter().product();
        if row_start.len() != out_len + 1 {
            return Err(Error::invalid(format!(
                "linear map has {} rows, output shape {out_shape:?} needs {out_len}",
                row_start.len() - 1
            )));
        }
        Ok(Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            row_start,
            cols,
            weights,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let (s, e) = (self.row_start[r], self.row_start[r + 1]);
            *o = self.cols[s..e]
                .iter()
                .zip(&self.weights[s..e])
                .map(|(&c, &w)| input[c] * w)
                .sum();
        }
    }

    /// `grad_in += Mᵀ · grad_out`
    pub fn apply_transpose_add(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (r, &g) in grad_out.iter().enumerate() {
            let (s, e) = (self.row_start[r], self.row_start[r + 1]);
            for (&c, &w) in self.cols[s..e].iter().zip(&self.weights[s..e]) {
                grad_in[c] += w * g;
            }
        }
    }
}
