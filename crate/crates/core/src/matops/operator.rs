use nalgebra::DVector;

use super::{LinalgError, Matrix};

/// Materializes a linear map as a dense matrix by probing unit basis vectors.
///
/// Column `k` of the result is `apply(e_k)`.
pub fn assemble_linear_operator<F>(
    apply: F,
    dim_in: usize,
    dim_out: usize,
) -> Result<Matrix, LinalgError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut m = Matrix::zeros(dim_out, dim_in);
    let mut e = DVector::zeros(dim_in);
    for k in 0..dim_in {
        e[k] = 1.0;
        let col = apply(&e);
        if col.len() != dim_out {
            return Err(LinalgError::DimensionMismatch(format!(
                "operator returned {} entries, expected {dim_out}",
                col.len()
            )));
        }
        m.set_column(k, &col);
        e[k] = 0.0;
    }
    Ok(m)
}
