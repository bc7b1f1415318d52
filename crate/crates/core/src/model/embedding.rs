use voxc_grad::Tensor;

use crate::error::{Error, Result};

/// Unit-norm utterance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// Set when the time-mean was the zero vector; `vector` is then zero.
    pub degenerate: bool,
}

/// Time-mean of `c` (`T x d`), L2-normalized.
pub fn utterance_embedding(c: &Tensor) -> Result<Embedding> {
    let (t, d) = c
        .dims2()
        .ok_or_else(|| Error::Config(format!("embedding expects T x d input, got {:?}", c.shape())))?;
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (m, x) in mean.iter_mut().zip(c.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Embedding {
            vector: vec![0.0; d],
            degenerate: true,
        });
    }
    Ok(Embedding {
        vector: mean.into_iter().map(|x| x / norm).collect(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_rows_give_normalized_row() {
        let c = Tensor::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
        let e = utterance_embedding(&c).unwrap();
        assert!(!e.degenerate);
        assert!((e.vector[0] - 0.6).abs() < 1e-15);
        assert!((e.vector[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let e = utterance_embedding(&Tensor::zeros(&[5, 3])).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.vector, vec![0.0; 3]);
    }

    #[test]
    fn rejects_non_matrix() {
        assert!(utterance_embedding(&Tensor::zeros(&[3])).is_err());
    }
}
