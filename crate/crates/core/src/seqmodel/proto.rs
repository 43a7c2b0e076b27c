use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Matrix, Tape, Var};

/// `P = h · V` for a weighting `h: N_P × N_V`.
pub fn build_prototypes(vocabulary: &Matrix, h: &Matrix) -> Result<Matrix> {
    if h.cols() != vocabulary.rows() {
        return Err(Error::Dimension {
            expected: vocabulary.rows(),
            actual: h.cols(),
        });
    }
    if h.rows() >= vocabulary.rows() {
        return Err(Error::invalid(format!(
            "{} prototypes for a vocabulary of {} rows; prototypes must be fewer",
            h.rows(),
            vocabulary.rows()
        )));
    }
    let p = h.matmul(vocabulary);
    if !p.is_finite() {
        return Err(Error::Numerical("prototype matrix is not finite".into()));
    }
    Ok(p)
}

/// Attention of a lifted query over the prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub embedding: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `softmax(q Pᵀ / √d_k) P` for one query row.
pub fn language_project(query: &[f64], prototypes: &Matrix, d_k: f64) -> Result<Projection> {
    if query.len() != prototypes.cols() {
        return Err(Error::Dimension {
            expected: prototypes.cols(),
            actual: query.len(),
        });
    }
    if !query.iter().all(|x| x.is_finite()) || !prototypes.is_finite() || !(d_k > 0.0) {
        return Err(Error::Numerical("non-finite language projection input".into()));
    }
    let scale = d_k.sqrt();
    let mut weights: Vec<f64> = prototypes
        .iter_rows()
        .map(|p| crate::nn::dot(query, p) / scale)
        .collect();
    softmax_in_place(&mut weights);
    let mut embedding = vec![0.0; prototypes.cols()];
    for (w, p) in weights.iter().zip(prototypes.iter_rows()) {
        for (e, x) in embedding.iter_mut().zip(p) {
            *e += w * x;
        }
    }
    Ok(Projection { embedding, weights })
}

/// Differentiable row-wise version of [`language_project`].
pub(crate) fn project_on_tape(tape: &mut Tape, queries: Var, prototypes: Var, d_k: f64) -> Var {
    let scores = tape.matmul_nt(queries, prototypes);
    let scores = tape.scale(scores, 1.0 / d_k.sqrt());
    let weights = tape.softmax(scores);
    tape.matmul(weights, prototypes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_selects_rows() {
        let v = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h = Matrix::from_vec(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let p = build_prototypes(&v, &h).unwrap();
        assert_eq!(p.row(0), &[5.0, 6.0]);
        assert_eq!(p.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_weights_give_mean() {
        let v = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let h = Matrix::filled(2, 3, 1.0 / 3.0);
        let p = build_prototypes(&v, &h).unwrap();
        for r in p.iter_rows() {
            assert!((r[0] - 3.0).abs() < 1e-12 && (r[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_many_prototypes_rejected() {
        let v = Matrix::filled(3, 2, 1.0);
        assert!(build_prototypes(&v, &Matrix::filled(3, 3, 0.1)).is_err());
    }

    #[test]
    fn hand_evaluated_two_prototypes() {
        let p = Matrix::identity(2);
        let out = language_project(&[1.0, 0.0], &p, 1.0).unwrap();
        let e = std::f64::consts::E;
        let w0 = e / (e + 1.0);
        assert!((out.weights[0] - w0).abs() < 1e-12);
        assert!((out.embedding[0] - w0).abs() < 1e-12);
        assert!((out.embedding[1] - (1.0 - w0)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_query_gives_mean() {
        let p = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let out = language_project(&[0.0, 0.0, 4.0], &p, 3.0).unwrap();
        assert_eq!(out.embedding, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn tape_matches_plain() {
        let p = Matrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.3, -0.2]);
        let q = vec![0.4, 0.1, -0.7];
        let plain = language_project(&q, &p, 3.0).unwrap();
        let mut t = Tape::new();
        let qv = t.constant(Matrix::row_vector(q));
        let pv = t.constant(p);
        let out = project_on_tape(&mut t, qv, pv, 3.0);
        for (a, b) in t.value(out).data().iter().zip(&plain.embedding) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let p = Matrix::identity(2);
        assert!(matches!(
            language_project(&[f64::NAN, 0.0], &p, 1.0),
            Err(Error::Numerical(_))
        ));
    }
}
